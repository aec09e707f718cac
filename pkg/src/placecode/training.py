"""Translation-graph wiring, alternating adversarial optimization,
unpaired multi-domain sampling, and checkpointing.

One training step runs a discriminator half-step (image discriminators,
place discriminator, and domain heads on real images) followed by an
encoder/generator half-step on the full weighted objective. The two
parameter groups are disjoint.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import torch

from . import losses as L
from . import networks as N
from .errors import CheckpointError, DataError, NumericError, ValidationError
from .geometry import GeometricTransform, apply_transform
from .losses import LossReport, LossWeights
from .networks import FactorCodes, ImageBatch

ADAM_BETAS = (0.5, 0.999)


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; the paper-scale geometry is 256/216 with a
    256-channel place code."""

    image_size: int = 72
    crop_size: int = 64
    place_channels: int = 64
    occlusion_channels: int = 16
    appearance_dim: int = 8
    domain_count: int = 3
    weights: LossWeights = field(default_factory=LossWeights)
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-4
    total_steps: int = 2000
    batch_size: int = 2
    seed: int = 0
    quarter_turns: int = 1
    deterministic_appearance: bool = False
    anti_occlusion_enabled: bool = True
    appearance_enabled: bool = True
    multidomain: bool = True
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.crop_size > self.image_size:
            raise ValidationError("crop_size must be <= image_size")
        if self.crop_size % 4 != 0:
            raise ValidationError("crop_size must be divisible by 4")
        if self.domain_count < 2:
            raise ValidationError("domain_count must be >= 2")
        if self.quarter_turns not in (0, 1, 2, 3):
            raise ValidationError("quarter_turns must be in {0,1,2,3}")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValidationError("batch_size must be >= 1 and total_steps >= 0")

    def geometry_path_enabled(self) -> bool:
        return self.anti_occlusion_enabled and (
            self.weights.gc > 0 or self.weights.cgc > 0
        )

    def as_flat_dict(self) -> dict:
        record = dataclasses.asdict(self)
        weights = record.pop("weights")
        record.update({f"weight_{k}": v for k, v in weights.items()})
        return record

    @staticmethod
    def from_flat_dict(record: dict) -> "TrainConfig":
        record = dict(record)
        weight_values = {}
        for name in L.TERM_NAMES:
            key = f"weight_{name}"
            if key in record:
                weight_values[name] = float(record.pop(key))
        fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"weights"}
        unknown = set(record) - fields
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for f in dataclasses.fields(TrainConfig):
            if f.name == "weights" or f.name not in record:
                continue
            value = record[f.name]
            if f.type == "bool" or isinstance(getattr(TrainConfig, f.name, None), bool):
                value = _parse_bool(value)
            elif f.name in ("lr_generator", "lr_discriminator"):
                value = float(value)
            else:
                value = int(value) if not isinstance(value, bool) else value
            kwargs[f.name] = value
        kwargs["weights"] = LossWeights(**weight_values)
        return TrainConfig(**kwargs)


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"cannot parse boolean from {value!r}")


def read_config_file(path: str) -> dict:
    """Flat `key = value` config document; '#' starts a comment."""
    if not os.path.exists(path):
        raise DataError(f"config file not found: {path}")
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


# ---------------------------------------------------------------------------
# translation graph


@dataclass
class StepOutputs:
    """Every intermediate of one training step's translation graph.

    Optional fields stay None when the corresponding path is disabled by
    ablation flags or zero weights.
    """

    codes_x: FactorCodes
    codes_y: FactorCodes
    to_y_cell: ImageBatch  # x's place rendered in y's cell
    to_x_cell: ImageBatch  # y's place rendered in x's cell
    codes_to_y_cell: FactorCodes
    codes_to_x_cell: FactorCodes
    recon_x: ImageBatch
    recon_y: ImageBatch
    self_x: ImageBatch
    self_y: ImageBatch
    rotated_x: Optional[ImageBatch] = None
    rotated_y: Optional[ImageBatch] = None
    rot_to_x_cell: Optional[ImageBatch] = None
    rot_to_y_cell: Optional[ImageBatch] = None
    rot_recon_y: Optional[ImageBatch] = None
    app_drawn_y_cell: Optional[torch.Tensor] = None
    app_recovered_y_cell: Optional[torch.Tensor] = None
    app_probe_y_cell: Optional[ImageBatch] = None
    app_drawn_x_cell: Optional[torch.Tensor] = None
    app_recovered_x_cell: Optional[torch.Tensor] = None
    app_probe_x_cell: Optional[ImageBatch] = None

    def image_fields(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, ImageBatch):
                yield f.name, value


def _zero_occlusion_code(model, reference_place: torch.Tensor) -> torch.Tensor:
    b, _, h, w = reference_place.shape
    return torch.zeros(b, model.occlusion_channels, h, w, dtype=reference_place.dtype)


def _zero_appearance(model, batch_size: int, dtype) -> N.AppearanceEncoding:
    z = torch.zeros(batch_size, model.appearance_dim, dtype=dtype)
    return N.AppearanceEncoding(mean=z, logvar=z.clone(), sample=z.clone(), eps=z.clone())


def _encode_factors(model, img: ImageBatch, cfg: TrainConfig,
                    rng: Optional[torch.Generator]) -> FactorCodes:
    place = N.encode_place(model, img)
    if cfg.anti_occlusion_enabled:
        occlusion = N.encode_occlusion(model, img)
    else:
        occlusion = _zero_occlusion_code(model, place)
    if cfg.appearance_enabled:
        appearance = N.encode_appearance(
            model, img, img.appearance_domain,
            rng=None if cfg.deterministic_appearance else rng,
        )
    else:
        appearance = _zero_appearance(model, len(img), place.dtype)
    return FactorCodes(place=place, occlusion=occlusion, appearance=appearance)


def forward_graph(model, x: ImageBatch, y: ImageBatch, t: GeometricTransform,
                  cfg: TrainConfig, rng: Optional[torch.Generator] = None) -> StepOutputs:
    """Run the full translation graph for one unpaired batch pair.

    Produces the two place-swapped translations, their re-encodings, the
    double-swap reconstructions, self-reconstructions, the transformed-image
    path, and the appearance latent-regression probes.
    """
    if torch.eq(x.appearance_domain, y.appearance_domain).any():
        raise ValidationError(
            "appearance-domain collision: each x/y item pair must come from "
            "distinct appearance domains"
        )
    codes_x = _encode_factors(model, x, cfg, rng)
    codes_y = _encode_factors(model, y, cfg, rng)

    to_y_cell = N.generate(model, codes_x.place, codes_y.occlusion,
                           codes_y.appearance_sample, y.appearance_domain,
                           occlusion_flag=y.occlusion_flag)
    to_x_cell = N.generate(model, codes_y.place, codes_x.occlusion,
                           codes_x.appearance_sample, x.appearance_domain,
                           occlusion_flag=x.occlusion_flag)
    codes_to_y_cell = _encode_factors(model, to_y_cell, cfg, rng)
    codes_to_x_cell = _encode_factors(model, to_x_cell, cfg, rng)

    recon_x = N.generate(model, codes_to_y_cell.place, codes_to_x_cell.occlusion,
                         codes_to_x_cell.appearance_sample, x.appearance_domain,
                         occlusion_flag=x.occlusion_flag)
    recon_y = N.generate(model, codes_to_x_cell.place, codes_to_y_cell.occlusion,
                         codes_to_y_cell.appearance_sample, y.appearance_domain,
                         occlusion_flag=y.occlusion_flag)
    self_x = N.generate(model, codes_x.place, codes_x.occlusion,
                        codes_x.appearance_sample, x.appearance_domain,
                        occlusion_flag=x.occlusion_flag)
    self_y = N.generate(model, codes_y.place, codes_y.occlusion,
                        codes_y.appearance_sample, y.appearance_domain,
                        occlusion_flag=y.occlusion_flag)

    outs = StepOutputs(
        codes_x=codes_x, codes_y=codes_y,
        to_y_cell=to_y_cell, to_x_cell=to_x_cell,
        codes_to_y_cell=codes_to_y_cell, codes_to_x_cell=codes_to_x_cell,
        recon_x=recon_x, recon_y=recon_y, self_x=self_x, self_y=self_y,
    )

    if cfg.geometry_path_enabled():
        rotated_x = apply_transform(x, t)
        rotated_y = apply_transform(y, t)
        rot_to_x_cell = N.generate(
            model, N.encode_place(model, rotated_y), codes_x.occlusion,
            codes_x.appearance_sample, x.appearance_domain,
            occlusion_flag=x.occlusion_flag,
        )
        rot_to_y_cell = N.generate(
            model, N.encode_place(model, rotated_x), codes_y.occlusion,
            codes_y.appearance_sample, y.appearance_domain,
            occlusion_flag=y.occlusion_flag,
        )
        rot_recon_y = N.generate(
            model, N.encode_place(model, rot_to_x_cell), codes_to_y_cell.occlusion,
            codes_to_y_cell.appearance_sample, y.appearance_domain,
            occlusion_flag=y.occlusion_flag,
        )
        outs.rotated_x = rotated_x
        outs.rotated_y = rotated_y
        outs.rot_to_x_cell = rot_to_x_cell
        outs.rot_to_y_cell = rot_to_y_cell
        outs.rot_recon_y = rot_recon_y

    if cfg.appearance_enabled and cfg.weights.lat_app > 0:
        dtype = codes_x.place.dtype
        drawn_y = _draw_prior(model, len(x), dtype, rng)
        probe_y = N.generate(model, codes_x.place, codes_x.occlusion, drawn_y,
                             y.appearance_domain, occlusion_flag=y.occlusion_flag)
        recovered_y = N.encode_appearance(model, probe_y, probe_y.appearance_domain).mean
        drawn_x = _draw_prior(model, len(y), dtype, rng)
        probe_x = N.generate(model, codes_y.place, codes_y.occlusion, drawn_x,
                             x.appearance_domain, occlusion_flag=x.occlusion_flag)
        recovered_x = N.encode_appearance(model, probe_x, probe_x.appearance_domain).mean
        outs.app_drawn_y_cell = drawn_y
        outs.app_recovered_y_cell = recovered_y
        outs.app_probe_y_cell = probe_y
        outs.app_drawn_x_cell = drawn_x
        outs.app_recovered_x_cell = recovered_x
        outs.app_probe_x_cell = probe_x

    return outs


def _draw_prior(model, batch_size: int, dtype, rng: Optional[torch.Generator]):
    if rng is None:
        return torch.zeros(batch_size, model.appearance_dim, dtype=dtype)
    return torch.randn(batch_size, model.appearance_dim, generator=rng, dtype=dtype)


def _detached_copy(img: ImageBatch) -> ImageBatch:
    return ImageBatch(pixels=img.pixels.detach(),
                      appearance_domain=img.appearance_domain,
                      occlusion_flag=img.occlusion_flag)


def _occlusion_realness_and_logits(model, img: ImageBatch,
                                   target_flags: torch.Tensor):
    """Score every item with the discriminator of its target occlusion side."""
    realness_rows = []
    logits_rows = []
    order = []
    for side in (False, True):
        idx = torch.nonzero(target_flags == side, as_tuple=False).flatten()
        if idx.numel() == 0:
            continue
        sub = ImageBatch(pixels=img.pixels[idx],
                         appearance_domain=img.appearance_domain[idx],
                         occlusion_flag=img.occlusion_flag[idx])
        realness, logits = N.discriminate_image(model, sub, side)
        realness_rows.append(realness)
        logits_rows.append(logits)
        order.append(idx)
    perm = torch.cat(order)
    inverse = torch.argsort(perm)
    return (torch.cat(realness_rows)[inverse], torch.cat(logits_rows)[inverse])


def compute_generator_losses(model, x: ImageBatch, y: ImageBatch, outs: StepOutputs,
                             t: GeometricTransform, cfg: TrainConfig) -> dict:
    """All objective terms for the encoder/generator half-step."""
    w = cfg.weights
    terms: dict[str, L.Scalar] = {name: 0.0 for name in L.TERM_NAMES}

    if w.cc > 0:
        terms["cc"] = L.cross_cycle_loss(x, y, outs.recon_x, outs.recon_y)
    if w.recon > 0:
        terms["recon"] = L.self_reconstruction_loss(x, outs.self_x, y, outs.self_y)
    if outs.rot_to_y_cell is not None and w.gc > 0:
        terms["gc"] = L.geometry_consistency_loss(outs.to_y_cell, outs.rot_to_y_cell, t)
    if outs.rot_recon_y is not None and w.cgc > 0:
        terms["cgc"] = L.cross_cycle_geometry_loss(outs.rot_recon_y, outs.rotated_y)
    if w.lat_place > 0:
        terms["lat_place"] = (
            L.place_latent_regression_loss(outs.codes_x.place, outs.codes_to_y_cell.place)
            + L.place_latent_regression_loss(outs.codes_y.place, outs.codes_to_x_cell.place)
        )
    if cfg.appearance_enabled:
        if w.kl > 0:
            terms["kl"] = (
                L.kl_loss(outs.codes_x.appearance_mean, outs.codes_x.appearance_logvar)
                + L.kl_loss(outs.codes_y.appearance_mean, outs.codes_y.appearance_logvar)
            )
        if outs.app_drawn_y_cell is not None and w.lat_app > 0:
            terms["lat_app"] = (
                L.appearance_latent_regression_loss(outs.app_drawn_y_cell,
                                                    outs.app_recovered_y_cell)
                + L.appearance_latent_regression_loss(outs.app_drawn_x_cell,
                                                      outs.app_recovered_x_cell)
            )
        if w.adv_app > 0 or (cfg.multidomain and w.cls > 0):
            real_app_x, logits_app_x = N.discriminate_appearance(model, outs.to_y_cell)
            real_app_y, logits_app_y = N.discriminate_appearance(model, outs.to_x_cell)
            if w.adv_app > 0:
                fakes = torch.cat([real_app_x.reshape(-1), real_app_y.reshape(-1)])
                terms["adv_app"] = L.image_adversarial_loss(None, fakes, "generator")
            if cfg.multidomain and w.cls > 0:
                cls = (
                    L.domain_classification_loss(logits_app_x, y.appearance_domain,
                                                 "generator_on_fake")
                    + L.domain_classification_loss(logits_app_y, x.appearance_domain,
                                                   "generator_on_fake")
                )
                terms["cls"] = cls
    if cfg.anti_occlusion_enabled and w.adv_occ > 0:
        occ_x, occ_logits_x = _occlusion_realness_and_logits(model, outs.to_y_cell,
                                                             y.occlusion_flag)
        occ_y, occ_logits_y = _occlusion_realness_and_logits(model, outs.to_x_cell,
                                                             x.occlusion_flag)
        fakes = torch.cat([occ_x.reshape(-1), occ_y.reshape(-1)])
        terms["adv_occ"] = L.image_adversarial_loss(None, fakes, "generator")
        if cfg.appearance_enabled and cfg.multidomain and w.cls > 0:
            terms["cls"] = terms["cls"] + (
                L.domain_classification_loss(occ_logits_x, y.appearance_domain,
                                             "generator_on_fake")
                + L.domain_classification_loss(occ_logits_y, x.appearance_domain,
                                               "generator_on_fake")
            )
    if w.adv_place > 0:
        logits_x = N.discriminate_place(model, outs.codes_x.place)
        logits_y = N.discriminate_place(model, outs.codes_y.place)
        terms["adv_place"] = L.place_adversarial_loss(logits_x, logits_y, "encoder")
    return terms


def compute_discriminator_losses(model, x: ImageBatch, y: ImageBatch,
                                 outs: StepOutputs, cfg: TrainConfig) -> dict:
    """Objective terms for the discriminator half-step (detached fakes,
    real images with true labels)."""
    w = cfg.weights
    terms: dict[str, L.Scalar] = {}
    fake_to_y = _detached_copy(outs.to_y_cell)
    fake_to_x = _detached_copy(outs.to_x_cell)

    if cfg.appearance_enabled and (w.adv_app > 0 or (cfg.multidomain and w.cls > 0)):
        real_x_scores, real_x_logits = N.discriminate_appearance(model, x)
        real_y_scores, real_y_logits = N.discriminate_appearance(model, y)
        fake_x_scores, _ = N.discriminate_appearance(model, fake_to_y)
        fake_y_scores, _ = N.discriminate_appearance(model, fake_to_x)
        if w.adv_app > 0:
            reals = torch.cat([real_x_scores.reshape(-1), real_y_scores.reshape(-1)])
            fakes = torch.cat([fake_x_scores.reshape(-1), fake_y_scores.reshape(-1)])
            terms["adv_app"] = L.image_adversarial_loss(reals, fakes, "discriminator")
        if cfg.multidomain and w.cls > 0:
            terms["cls"] = (
                L.domain_classification_loss(real_x_logits, x.appearance_domain,
                                             "discriminator_on_real")
                + L.domain_classification_loss(real_y_logits, y.appearance_domain,
                                               "discriminator_on_real")
            )
    if cfg.anti_occlusion_enabled and w.adv_occ > 0:
        real_occ_x, real_occ_logits_x = _occlusion_realness_and_logits(
            model, x, x.occlusion_flag)
        real_occ_y, real_occ_logits_y = _occlusion_realness_and_logits(
            model, y, y.occlusion_flag)
        fake_occ_x, _ = _occlusion_realness_and_logits(model, fake_to_y, y.occlusion_flag)
        fake_occ_y, _ = _occlusion_realness_and_logits(model, fake_to_x, x.occlusion_flag)
        reals = torch.cat([real_occ_x.reshape(-1), real_occ_y.reshape(-1)])
        fakes = torch.cat([fake_occ_x.reshape(-1), fake_occ_y.reshape(-1)])
        terms["adv_occ"] = L.image_adversarial_loss(reals, fakes, "discriminator")
        if cfg.appearance_enabled and cfg.multidomain and w.cls > 0:
            terms["cls"] = terms.get("cls", 0.0) + (
                L.domain_classification_loss(real_occ_logits_x, x.appearance_domain,
                                             "discriminator_on_real")
                + L.domain_classification_loss(real_occ_logits_y, y.appearance_domain,
                                               "discriminator_on_real")
            )
    if w.adv_place > 0:
        logits_x = N.discriminate_place(model, outs.codes_x.place.detach())
        logits_y = N.discriminate_place(model, outs.codes_y.place.detach())
        terms["adv_place"] = L.place_adversarial_loss(logits_x, logits_y, "discriminator")
    return terms


def weighted_discriminator_loss(terms: dict, cfg: TrainConfig) -> torch.Tensor:
    w = cfg.weights
    total = torch.zeros((), dtype=torch.float32)
    for name, value in terms.items():
        value_f = float(value.detach() if isinstance(value, torch.Tensor) else value)
        if value_f != value_f or abs(value_f) == float("inf"):
            raise NumericError(f"{name} (discriminator side)")
        total = total + getattr(w, name) * value
    return total


# ---------------------------------------------------------------------------
# stepping


@dataclass
class TrainState:
    model: N.FactorModel
    cfg: TrainConfig
    opt_generator: torch.optim.Optimizer
    opt_discriminator: torch.optim.Optimizer
    rng: torch.Generator
    step: int = 0


def create_train_state(cfg: TrainConfig, model: Optional[N.FactorModel] = None,
                       step: int = 0) -> TrainState:
    torch.manual_seed(cfg.seed)
    if model is None:
        model = N.build_model(cfg)
    opt_g = torch.optim.Adam(model.generator_side_parameters(),
                             lr=cfg.lr_generator, betas=ADAM_BETAS)
    opt_d = torch.optim.Adam(model.discriminator_side_parameters(),
                             lr=cfg.lr_discriminator, betas=ADAM_BETAS)
    # fold the step in so resumed runs do not replay the fresh-run draws
    rng = torch.Generator().manual_seed(cfg.seed * 1_000_003 + step)
    return TrainState(model=model, cfg=cfg, opt_generator=opt_g,
                      opt_discriminator=opt_d, rng=rng, step=step)


def train_step(state: TrainState, x: ImageBatch, y: ImageBatch) -> LossReport:
    """One discriminator half-step then one encoder/generator half-step."""
    cfg = state.cfg
    t = GeometricTransform(cfg.quarter_turns)
    outs = forward_graph(state.model, x, y, t, cfg, rng=state.rng)

    d_terms = compute_discriminator_losses(state.model, x, y, outs, cfg)
    if d_terms:
        d_total = weighted_discriminator_loss(d_terms, cfg)
        state.opt_discriminator.zero_grad(set_to_none=True)
        d_total.backward()
        state.opt_discriminator.step()

    g_terms = compute_generator_losses(state.model, x, y, outs, t, cfg)
    g_total = L.total_loss(g_terms, cfg.weights, cfg.multidomain)
    state.opt_generator.zero_grad(set_to_none=True)
    g_total.backward()
    state.opt_generator.step()

    state.step += 1
    return L.make_report(g_terms, cfg.weights, cfg.multidomain)


def sample_unpaired(dataset, rng: torch.Generator, cfg: TrainConfig
                    ) -> tuple[ImageBatch, ImageBatch]:
    """Draw an unpaired (x, y) batch from distinct appearance domains.

    With the geometry path active, y comes from a without-occlusion cell.
    Images are resized to image_size and randomly cropped to crop_size.
    """
    cells = dataset.cells()
    if not cells:
        raise DataError("dataset has no records")
    for key, indices in cells.items():
        if not indices:
            raise DataError(f"domain cell {key} is empty")
    x_keys = sorted(cells.keys())
    y_pool = sorted(k for k in cells if not (cfg.geometry_path_enabled() and k[1]))
    if not y_pool:
        raise DataError("no without-occlusion cells available for the geometry path")

    def _pick(keys):
        return keys[int(torch.randint(len(keys), (1,), generator=rng))]

    def _load(key):
        indices = cells[key]
        idx = indices[int(torch.randint(len(indices), (1,), generator=rng))]
        pixels = dataset.load_pixels(idx, cfg.image_size)
        return _random_crop(pixels, cfg.crop_size, rng), dataset.records[idx].spec

    xs, ys = [], []
    for _ in range(cfg.batch_size):
        x_key = _pick(x_keys)
        y_choices = [k for k in y_pool if k[0] != x_key[0]]
        if not y_choices:
            raise DataError("no admissible y cell with a distinct appearance domain")
        y_key = _pick(y_choices)
        xs.append(_load(x_key))
        ys.append(_load(y_key))

    def _pack(items):
        pixels = torch.stack([p for p, _ in items])
        domains = torch.tensor([s.appearance_domain for _, s in items], dtype=torch.long)
        flags = torch.tensor([s.occluded for _, s in items], dtype=torch.bool)
        return ImageBatch(pixels=pixels, appearance_domain=domains, occlusion_flag=flags)

    return _pack(xs), _pack(ys)


def _random_crop(pixels: torch.Tensor, crop: int, rng: torch.Generator) -> torch.Tensor:
    h, w = pixels.shape[-2:]
    if h == crop and w == crop:
        return pixels
    top = int(torch.randint(h - crop + 1, (1,), generator=rng))
    left = int(torch.randint(w - crop + 1, (1,), generator=rng))
    return pixels[..., top : top + crop, left : left + crop]


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_FORMAT = 1


def save_checkpoint(model: N.FactorModel, cfg: TrainConfig, step: int, path: str):
    """Atomic write: serialize to a temp file then rename into place."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg.as_flat_dict(),
        "step": int(step),
        "model_state": model.state_dict(),
    }
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str, expected_cfg: Optional[TrainConfig] = None
                    ) -> tuple[N.FactorModel, TrainConfig, int]:
    """Load and validate a checkpoint; rejects corrupt archives and
    config/shape disagreements without leaving partial state around."""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "model_state" not in payload:
        raise CheckpointError(f"checkpoint {path} has an unexpected layout")
    try:
        cfg = TrainConfig.from_flat_dict(payload["config"])
    except (KeyError, ValidationError) as exc:
        raise CheckpointError(f"checkpoint {path} carries a bad config: {exc}") from exc
    if expected_cfg is not None and expected_cfg.as_flat_dict() != cfg.as_flat_dict():
        raise CheckpointError(
            "checkpoint config disagrees with the requested config"
        )
    model = N.build_model(cfg)
    try:
        model.load_state_dict(payload["model_state"], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} parameter shapes disagree "
                              f"with its config: {exc}") from exc
    return model, cfg, int(payload["step"])


def model_fingerprint(model: N.FactorModel, cfg: TrainConfig) -> str:
    """Stable hash of the config plus every parameter tensor."""
    digest = hashlib.sha256()
    digest.update(json.dumps(cfg.as_flat_dict(), sort_keys=True).encode())
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# the loop


def run_training(cfg: TrainConfig, dataset, out_dir: str,
                 resume_from: Optional[str] = None,
                 log_name: str = "losses.ndjson",
                 checkpoint_name: str = "checkpoint.pt",
                 quiet: bool = True) -> str:
    """Train for cfg.total_steps, logging one report line per step and
    checkpointing periodically; returns the final checkpoint path."""
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, log_name)
    ckpt_path = os.path.join(out_dir, checkpoint_name)

    if resume_from is not None:
        model, cfg, start_step = load_checkpoint(resume_from, expected_cfg=None)
        state = create_train_state(cfg, model=model, step=start_step)
        log_mode = "a"
    else:
        state = create_train_state(cfg)
        log_mode = "w"

    with open(log_path, log_mode, encoding="utf-8") as log:
        if log_mode == "w":
            log.write(json.dumps({"config": cfg.as_flat_dict()}) + "\n")
        while state.step < cfg.total_steps:
            x, y = sample_unpaired(dataset, state.rng, cfg)
            report = train_step(state, x, y)
            log.write(report.to_json_line(state.step) + "\n")
            if not quiet and (state.step % 100 == 0 or state.step == cfg.total_steps):
                print(f"step {state.step}: total={report.total:.4f}", flush=True)
            if cfg.checkpoint_every > 0 and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(state.model, cfg, state.step, ckpt_path)
    save_checkpoint(state.model, cfg, state.step, ckpt_path)
    return ckpt_path
