import dataclasses
import hashlib
import json
import os

import numpy as np
import pytest
import torch

from stubs import StubExactInverseModel, stub_batch_pair, stub_config

from placecode import losses as L
from placecode import networks as N
from placecode import synthdata as S
from placecode.errors import CheckpointError, ValidationError
from placecode.geometry import GeometricTransform, apply_transform
from placecode.losses import LossWeights
from placecode.training import (TrainConfig, compute_discriminator_losses,
                                compute_generator_losses, create_train_state,
                                forward_graph, load_checkpoint, model_fingerprint,
                                read_config_file, run_training, sample_unpaired,
                                save_checkpoint, train_step,
                                weighted_discriminator_loss)

TINY = dict(image_size=36, crop_size=32, place_channels=16, occlusion_channels=8,
            appearance_dim=4, domain_count=3)


def tiny_config(**overrides) -> TrainConfig:
    values = dict(TINY)
    values.update(overrides)
    return TrainConfig(**values)


def random_batch_pair(cfg, seed=0):
    g = torch.Generator().manual_seed(seed)
    size = cfg.crop_size
    b = cfg.batch_size

    def make(domains, flags):
        return N.ImageBatch(
            pixels=torch.rand(b, 3, size, size, generator=g) * 2 - 1,
            appearance_domain=torch.tensor(domains[:b]),
            occlusion_flag=torch.tensor(flags[:b]),
        )

    x = make([0, 1], [True, False])
    y = make([1, 2], [False, False])
    return x, y


def params_hash(params) -> str:
    digest = hashlib.sha256()
    for p in params:
        digest.update(p.detach().numpy().tobytes())
    return digest.hexdigest()


class TestStubFixedPoint:
    """With exact-inverse networks every reconstruction-family loss
    vanishes simultaneously and exactly."""

    def setup_method(self):
        self.model = StubExactInverseModel()
        self.cfg = stub_config()
        self.t = GeometricTransform(1)
        self.x, self.y = stub_batch_pair()
        self.outs = forward_graph(self.model, self.x, self.y, self.t, self.cfg)

    def test_cross_cycle_reconstruction_bit_exact(self):
        assert torch.equal(self.outs.recon_x.pixels, self.x.pixels)
        assert torch.equal(self.outs.recon_y.pixels, self.y.pixels)

    def test_geometry_fixed_point_bit_exact(self):
        rotated = apply_transform(self.outs.to_y_cell.pixels, self.t)
        assert torch.equal(rotated, self.outs.rot_to_y_cell.pixels)

    def test_all_reconstruction_losses_exactly_zero(self):
        outs = self.outs
        assert L.cross_cycle_loss(self.x, self.y, outs.recon_x, outs.recon_y).item() == 0.0
        assert L.self_reconstruction_loss(self.x, outs.self_x,
                                          self.y, outs.self_y).item() == 0.0
        assert L.geometry_consistency_loss(outs.to_y_cell, outs.rot_to_y_cell,
                                           self.t).item() == 0.0
        assert L.cross_cycle_geometry_loss(outs.rot_recon_y, outs.rotated_y).item() == 0.0
        assert L.place_latent_regression_loss(
            outs.codes_x.place, outs.codes_to_y_cell.place).item() == 0.0
        assert L.place_latent_regression_loss(
            outs.codes_y.place, outs.codes_to_x_cell.place).item() == 0.0
        assert L.appearance_latent_regression_loss(
            outs.app_drawn_y_cell, outs.app_recovered_y_cell).item() == 0.0
        assert L.appearance_latent_regression_loss(
            outs.app_drawn_x_cell, outs.app_recovered_x_cell).item() == 0.0

    def test_kl_zero_at_prior(self):
        assert L.kl_loss(torch.zeros(2, 1), torch.zeros(2, 1)).item() == 0.0


class TestForwardGraph:
    def test_shapes_and_finiteness_at_random_init(self):
        cfg = tiny_config()
        torch.manual_seed(0)
        model = N.build_model(cfg)
        x, y = random_batch_pair(cfg)
        rng = torch.Generator().manual_seed(1)
        outs = forward_graph(model, x, y, GeometricTransform(1), cfg, rng=rng)
        h = cfg.crop_size // 4
        assert outs.codes_x.place.shape == (2, cfg.place_channels, h, h)
        assert outs.codes_x.occlusion.shape == (2, cfg.occlusion_channels, h, h)
        assert outs.codes_x.appearance_mean.shape == (2, cfg.appearance_dim)
        for name, batch in outs.image_fields():
            assert batch.pixels.shape == (2, 3, cfg.crop_size, cfg.crop_size), name
            assert torch.isfinite(batch.pixels).all(), name
        assert outs.rot_recon_y is not None
        assert outs.app_recovered_x_cell is not None

    def test_domain_collision_rejected(self):
        cfg = tiny_config()
        torch.manual_seed(0)
        model = N.build_model(cfg)
        x, y = random_batch_pair(cfg)
        y_bad = N.ImageBatch(pixels=y.pixels, appearance_domain=x.appearance_domain,
                             occlusion_flag=y.occlusion_flag)
        with pytest.raises(ValidationError, match="collision"):
            forward_graph(model, x, y_bad, GeometricTransform(1), cfg)

    def test_geometry_path_disabled_by_ablation(self):
        cfg = tiny_config(anti_occlusion_enabled=False)
        torch.manual_seed(0)
        model = N.build_model(cfg)
        x, y = random_batch_pair(cfg)
        outs = forward_graph(model, x, y, GeometricTransform(1), cfg)
        assert outs.rot_to_y_cell is None
        assert torch.all(outs.codes_x.occlusion == 0)


class TestTrainStep:
    def test_zero_learning_rates_leave_params_bit_exact(self):
        cfg = tiny_config(lr_generator=0.0, lr_discriminator=0.0, total_steps=1)
        state = create_train_state(cfg)
        before = {k: v.clone() for k, v in state.model.state_dict().items()}
        x, y = random_batch_pair(cfg)
        train_step(state, x, y)
        after = state.model.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_small_step_decreases_generator_objective(self):
        cfg = TrainConfig(lr_generator=1e-5, lr_discriminator=0.0,
                          weights=dataclasses.replace(LossWeights(), lat_app=0.0))
        state = create_train_state(cfg)
        x, y = random_batch_pair(cfg, seed=3)
        t = GeometricTransform(cfg.quarter_turns)

        def generator_objective():
            outs = forward_graph(state.model, x, y, t, cfg, rng=None)
            terms = compute_generator_losses(state.model, x, y, outs, t, cfg)
            return L.total_loss(terms, cfg.weights, cfg.multidomain)

        before = generator_objective()
        state.opt_generator.zero_grad()
        before.backward()
        state.opt_generator.step()
        after = generator_objective()
        assert after.item() < before.item()

    def test_identical_seeds_give_identical_report_streams(self, tmp_path):
        out = tmp_path / "data"
        S.build_synthetic_dataset(3, 3, 2, np.random.default_rng(0), str(out), size=36)
        dataset = S.load_image_folder(str(out / "train.txt"))

        def stream():
            cfg = tiny_config(total_steps=3, batch_size=1, seed=11)
            state = create_train_state(cfg)
            reports = []
            for _ in range(3):
                x, y = sample_unpaired(dataset, state.rng, cfg)
                reports.append(train_step(state, x, y).as_dict())
            return reports

        assert stream() == stream()

    def test_half_steps_touch_only_their_parameter_group(self):
        cfg = tiny_config(lr_generator=0.0, lr_discriminator=1e-3)
        state = create_train_state(cfg)
        x, y = random_batch_pair(cfg)
        g_before = params_hash(state.model.generator_side_parameters())
        d_before = params_hash(state.model.discriminator_side_parameters())
        train_step(state, x, y)
        assert params_hash(state.model.generator_side_parameters()) == g_before
        assert params_hash(state.model.discriminator_side_parameters()) != d_before

        cfg = tiny_config(lr_generator=1e-3, lr_discriminator=0.0)
        state = create_train_state(cfg)
        g_before = params_hash(state.model.generator_side_parameters())
        d_before = params_hash(state.model.discriminator_side_parameters())
        train_step(state, x, y)
        assert params_hash(state.model.generator_side_parameters()) != g_before
        assert params_hash(state.model.discriminator_side_parameters()) == d_before

    def test_every_parameter_receives_gradient(self):
        cfg = tiny_config()
        torch.manual_seed(0)
        model = N.build_model(cfg)
        x, y = random_batch_pair(cfg)
        t = GeometricTransform(1)
        rng = torch.Generator().manual_seed(5)
        outs = forward_graph(model, x, y, t, cfg, rng=rng)
        g_terms = compute_generator_losses(model, x, y, outs, t, cfg)
        d_terms = compute_discriminator_losses(model, x, y, outs, cfg)
        total = (L.total_loss(g_terms, cfg.weights, cfg.multidomain)
                 + weighted_discriminator_loss(d_terms, cfg))
        total.backward()
        dead = [name for name, p in model.named_parameters()
                if p.grad is None or not p.grad.abs().max() > 0]
        assert dead == []


class TestAblations:
    def _run_steps(self, cfg, steps=2):
        state = create_train_state(cfg)
        for s in range(steps):
            x, y = random_batch_pair(cfg, seed=s)
            report = train_step(state, x, y)
        return state, report

    def test_anti_occlusion_disabled_zeroes_its_terms_and_params(self):
        cfg = tiny_config(anti_occlusion_enabled=False, lr_generator=1e-3,
                          lr_discriminator=1e-3)
        torch.manual_seed(0)
        reference = N.build_model(tiny_config())
        state, report = self._run_steps(cfg)
        assert report.gc == 0.0 and report.cgc == 0.0 and report.adv_occ == 0.0
        occ_keys = [k for k in state.model.state_dict()
                    if k.startswith(("occlusion_encoder", "image_discriminators.occlusion"))]
        ref_state = reference.state_dict()
        live_state = state.model.state_dict()
        assert occ_keys and all(torch.equal(ref_state[k], live_state[k]) for k in occ_keys)

    def test_appearance_disabled_zeroes_its_terms_and_params(self):
        cfg = tiny_config(appearance_enabled=False, lr_generator=1e-3,
                          lr_discriminator=1e-3)
        torch.manual_seed(0)
        reference = N.build_model(tiny_config())
        state, report = self._run_steps(cfg)
        assert report.kl == 0.0 and report.lat_app == 0.0
        assert report.adv_app == 0.0 and report.cls == 0.0
        app_keys = [k for k in state.model.state_dict()
                    if k.startswith(("appearance_encoder", "image_discriminators.appearance"))]
        ref_state = reference.state_dict()
        live_state = state.model.state_dict()
        assert app_keys and all(torch.equal(ref_state[k], live_state[k]) for k in app_keys)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("sampling")
    S.build_synthetic_dataset(3, 3, 2, np.random.default_rng(1), str(out), size=36)
    return S.load_image_folder(str(out / "train.txt"))


class TestSampling:
    def test_distinct_appearance_and_geometry_side_rule(self, dataset):
        cfg = tiny_config(batch_size=2)
        rng = torch.Generator().manual_seed(0)
        for _ in range(20):
            x, y = sample_unpaired(dataset, rng, cfg)
            assert (x.appearance_domain != y.appearance_domain).all()
            assert not y.occlusion_flag.any()
            assert x.pixels.shape == (2, 3, 32, 32)

    def test_cell_coverage(self, dataset):
        cfg = tiny_config(batch_size=2)
        rng = torch.Generator().manual_seed(0)
        seen = set()
        for _ in range(250):
            x, _ = sample_unpaired(dataset, rng, cfg)
            for d, o in zip(x.appearance_domain.tolist(), x.occlusion_flag.tolist()):
                seen.add((d, bool(o)))
        assert seen == {(a, o) for a in range(3) for o in (False, True)}

    def test_unrestricted_y_when_geometry_disabled(self, dataset):
        cfg = tiny_config(batch_size=2,
                          weights=dataclasses.replace(LossWeights(), gc=0.0, cgc=0.0))
        rng = torch.Generator().manual_seed(0)
        flags = []
        for _ in range(100):
            _, y = sample_unpaired(dataset, rng, cfg)
            flags.extend(y.occlusion_flag.tolist())
        assert any(flags) and not all(flags)


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = tiny_config()
        torch.manual_seed(0)
        model = N.build_model(cfg)
        path = str(tmp_path / "ckpt.pt")
        save_checkpoint(model, cfg, 42, path)
        loaded, cfg2, step = load_checkpoint(path)
        assert step == 42
        assert cfg2 == cfg
        original = model.state_dict()
        restored = loaded.state_dict()
        assert all(torch.equal(original[k], restored[k]) for k in original)
        assert model_fingerprint(model, cfg) == model_fingerprint(loaded, cfg2)

    def test_truncated_file_rejected(self, tmp_path):
        cfg = tiny_config()
        torch.manual_seed(0)
        model = N.build_model(cfg)
        path = str(tmp_path / "ckpt.pt")
        save_checkpoint(model, cfg, 1, path)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[: len(blob) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_config_mismatch_rejected(self, tmp_path):
        cfg = tiny_config()
        torch.manual_seed(0)
        model = N.build_model(cfg)
        path = str(tmp_path / "ckpt.pt")
        save_checkpoint(model, cfg, 1, path)
        other = tiny_config(place_channels=32)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected_cfg=other)

    def test_shape_disagreement_rejected(self, tmp_path):
        cfg = tiny_config()
        torch.manual_seed(0)
        model = N.build_model(cfg)
        payload_path = str(tmp_path / "ckpt.pt")
        save_checkpoint(model, cfg, 1, payload_path)
        payload = torch.load(payload_path, weights_only=True)
        payload["config"]["place_channels"] = 32
        torch.save(payload, payload_path)
        with pytest.raises(CheckpointError, match="shapes"):
            load_checkpoint(payload_path)


class TestRunTraining:
    def test_log_lines_and_resume(self, tmp_path):
        data = tmp_path / "data"
        S.build_synthetic_dataset(3, 3, 2, np.random.default_rng(0), str(data), size=36)
        dataset = S.load_image_folder(str(data / "train.txt"))
        cfg = tiny_config(total_steps=3, batch_size=1, checkpoint_every=2)
        run_dir = str(tmp_path / "run")
        ckpt = run_training(cfg, dataset, run_dir)

        lines = open(os.path.join(run_dir, "losses.ndjson")).read().splitlines()
        header = json.loads(lines[0])
        assert header["config"]["total_steps"] == 3
        steps = [json.loads(line)["step"] for line in lines[1:]]
        assert steps == [1, 2, 3]

        cfg_more = tiny_config(total_steps=5, batch_size=1, checkpoint_every=2)
        # resuming keeps the checkpoint's config; extend by writing a new one
        _, loaded_cfg, step = load_checkpoint(ckpt)
        assert step == 3
        save_checkpoint(N.build_model(loaded_cfg), cfg_more, 3, ckpt)
        run_training(cfg_more, dataset, run_dir, resume_from=ckpt)
        lines = open(os.path.join(run_dir, "losses.ndjson")).read().splitlines()
        steps = [json.loads(line)["step"] for line in lines if "step" in json.loads(line)]
        assert steps == [1, 2, 3, 4, 5]


class TestConfigPlumbing:
    def test_flat_round_trip(self):
        cfg = tiny_config(weights=LossWeights(cc=3.5), seed=9)
        assert TrainConfig.from_flat_dict(cfg.as_flat_dict()) == cfg

    def test_config_file_parsing(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("""
# comment
total_steps = 7
batch_size = 1
weight_cc = 2.5
deterministic_appearance = true
""")
        values = read_config_file(str(path))
        cfg = TrainConfig.from_flat_dict(values)
        assert cfg.total_steps == 7
        assert cfg.weights.cc == 2.5
        assert cfg.deterministic_appearance is True

    def test_invalid_sizes_rejected(self):
        with pytest.raises(ValidationError):
            TrainConfig(image_size=32, crop_size=64)
        with pytest.raises(ValidationError):
            TrainConfig(crop_size=30, image_size=32)
        with pytest.raises(ValidationError):
            TrainConfig(domain_count=1)


def test_domain_conditioning_changes_output_after_training(tmp_path):
    """Swapping only the target domain for fixed codes must move the
    generated pixels once the model has trained a little."""
    data = tmp_path / "data"
    S.build_synthetic_dataset(3, 3, 2, np.random.default_rng(0), str(data), size=36)
    dataset = S.load_image_folder(str(data / "train.txt"))
    cfg = tiny_config(total_steps=25, batch_size=1, seed=0)
    state = create_train_state(cfg)
    for _ in range(cfg.total_steps):
        x, y = sample_unpaired(dataset, state.rng, cfg)
        train_step(state, x, y)
    model = state.model
    model.eval()
    x, _ = sample_unpaired(dataset, state.rng, cfg)
    with torch.no_grad():
        codes = N.encode_all(model, x)
        base = N.generate(model, codes.place, codes.occlusion, codes.appearance_sample,
                          x.appearance_domain)
        swapped_domain = (x.appearance_domain + 1) % cfg.domain_count
        other = N.generate(model, codes.place, codes.occlusion, codes.appearance_sample,
                           swapped_domain)
    assert (base.pixels - other.pixels).abs().mean().item() > 0.0
