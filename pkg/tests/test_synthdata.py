import math
import os
from collections import Counter

import numpy as np
import pytest
import torch

from placecode import synthdata as S
from placecode.errors import DataError
from placecode.geometry import Pose6DoF, read_pose_manifest


def make_spec(place=3, appearance=0, occluded=False, shift=(2, -1), view=0):
    base = S.place_base_position(place)
    translation = base + np.array([shift[0] * S.METERS_PER_PIXEL,
                                   shift[1] * S.METERS_PER_PIXEL, 0.0])
    seed = int(np.random.SeedSequence([place, appearance, int(occluded), view])
               .generate_state(1)[0])
    return S.SceneSpec(place_id=place, appearance_domain=appearance,
                       occluded=occluded,
                       pose=Pose6DoF(translation=translation), render_seed=seed)


class TestRenderScene:
    def test_deterministic(self):
        spec = make_spec()
        a = S.render_scene(spec, 64)
        b = S.render_scene(spec, 64)
        assert torch.equal(a, b)
        assert a.shape == (3, 64, 64)
        assert a.min() >= -1.0 and a.max() <= 1.0

    def test_occlusion_toggle_differs_only_inside_mask(self):
        clean = S.render_scene(make_spec(occluded=False), 64)
        occluded = S.render_scene(make_spec(occluded=True), 64)
        diff = (clean - occluded).abs().sum(dim=0) > 0
        spec = make_spec(occluded=True)
        mask, _ = S.occluder_mask_and_grays(spec, 64, S.view_shift_px(spec))
        assert not diff[~torch.from_numpy(mask)].any()
        area = diff.float().mean().item()
        assert 0.10 <= area <= 0.35

    @pytest.mark.parametrize("seed_view", range(6))
    def test_occluder_coverage_band(self, seed_view):
        spec = make_spec(place=seed_view, occluded=True, view=seed_view)
        mask, _ = S.occluder_mask_and_grays(spec, 64, (0, 0))
        assert 0.10 <= mask.mean() <= 0.35

    def test_same_place_same_geometry_across_factors(self):
        base = S.render_structure(5, (0, 0), 64)
        again = S.render_structure(5, (0, 0), 64)
        np.testing.assert_array_equal(base, again)

    @pytest.mark.parametrize("pair", [(0, 1), (0, 2), (1, 2)])
    def test_appearance_change_is_monotone_in_gray(self, pair):
        a = S.render_scene(make_spec(appearance=pair[0]), 48).numpy()
        b = S.render_scene(make_spec(appearance=pair[1]), 48).numpy()
        rng = np.random.default_rng(0)
        flat_a = a.reshape(3, -1)
        flat_b = b.reshape(3, -1)
        idx = rng.integers(0, flat_a.shape[1], size=(4000, 2))
        for c in range(3):
            da = flat_a[c, idx[:, 0]] - flat_a[c, idx[:, 1]]
            db = flat_b[c, idx[:, 0]] - flat_b[c, idx[:, 1]]
            # weak monotonicity: never strictly discordant
            assert np.all(da * db >= 0.0)

    def test_appearance_transforms_are_positive_gain(self):
        for d in range(6):
            gain, _, gamma = S.appearance_transform_params(d)
            assert np.all(gain > 0) and gamma > 0


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    manifest = S.build_synthetic_dataset(4, 3, 2, np.random.default_rng(7),
                                         str(out), size=32)
    return str(out), manifest


class TestBuildDataset:
    def test_counting_contract(self, built):
        _, manifest = built
        assert len(manifest.records) == 4 * 3 * 2 * 2

    def test_every_cell_present(self, built):
        _, manifest = built
        cells = {(r.spec.appearance_domain, r.spec.occluded) for r in manifest.records}
        assert cells == {(a, o) for a in range(3) for o in (False, True)}

    def test_database_split_is_clean_reference_cell(self, built):
        _, manifest = built
        db = manifest.by_split("database")
        assert len(db) == 4
        assert all(not r.spec.occluded and r.spec.appearance_domain == 0 for r in db)

    def test_split_files_written(self, built):
        out, _ = built
        for name in ("train.txt", "database.txt", "query.txt", "poses.txt"):
            assert os.path.exists(os.path.join(out, name))

    def test_pose_file_matches_geometry_format(self, built):
        out, manifest = built
        poses = read_pose_manifest(os.path.join(out, "poses.txt"))
        assert set(poses) == {r.path for r in manifest.records}

    def test_rebuild_identical(self, built, tmp_path):
        out, manifest = built
        again = S.build_synthetic_dataset(4, 3, 2, np.random.default_rng(7),
                                          str(tmp_path), size=32)
        assert [S._record_line(r) for r in manifest.records] == \
               [S._record_line(r) for r in again.records]
        for r in manifest.records[:6]:
            a = open(os.path.join(out, r.path), "rb").read()
            b = open(os.path.join(str(tmp_path), r.path), "rb").read()
            assert a == b

    def test_factor_independence_zero_mutual_information(self, built):
        _, manifest = built
        joint = Counter((r.spec.place_id, (r.spec.appearance_domain, r.spec.occluded))
                        for r in manifest.records)
        n = len(manifest.records)
        p_place = Counter(r.spec.place_id for r in manifest.records)
        p_cell = Counter((r.spec.appearance_domain, r.spec.occluded)
                         for r in manifest.records)
        mi = sum(
            (c / n) * math.log((c / n) / ((p_place[pl] / n) * (p_cell[cell] / n)))
            for (pl, cell), c in joint.items()
        )
        assert abs(mi) < 1e-12


class TestFolderDataset:
    def test_item_count_and_round_trip(self, built):
        out, manifest = built
        ds = S.load_image_folder(os.path.join(out, "train.txt"))
        assert len(ds) == len(manifest.by_split("train"))
        record = ds.records[0]
        rendered = S.render_scene(record.spec, 32)
        loaded = ds.load_pixels(0, 32)
        assert (loaded - rendered).abs().max().item() <= (1.0 / 255.0) + 1e-7

    def test_missing_file_names_the_record(self, built, tmp_path):
        out, _ = built
        manifest_path = tmp_path / "broken.txt"
        lines = open(os.path.join(out, "train.txt")).read().splitlines()
        first = lines[0].split()
        first[0] = "images/missing.png"
        manifest_path.write_text(" ".join(first) + "\n")
        ds = S.load_image_folder(str(manifest_path))
        with pytest.raises(DataError, match="missing.png"):
            ds.load_pixels(0, 32)

    def test_malformed_manifest_line(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("images/a.png 1 0\n")
        with pytest.raises(DataError, match="bad.txt:1"):
            S.load_image_folder(str(bad))

    def test_cells_grouping(self, built):
        out, _ = built
        ds = S.load_image_folder(os.path.join(out, "train.txt"))
        cells = ds.cells()
        assert set(cells) == {(a, o) for a in range(3) for o in (False, True)}
        assert all(len(v) == 4 for v in cells.values())
