"""Procedural scenes with independently controlled place identity,
appearance domain, and occlusion, plus folder/manifest ingestion.

Each place is a fixed arrangement of grayscale primitives; appearance
domains apply strictly monotone per-channel color transforms to that
grayscale layout; occlusion composites 1-3 opaque "vehicle" rectangles
drawn into the layout before color mapping. Factors are independent by
construction, which is what makes disentanglement claims testable.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .errors import DataError, ValidationError
from .geometry import Pose6DoF, format_pose_line, yaw_quaternion

GRID_SPACING_M = 10.0
GRID_COLS = 8
METERS_PER_PIXEL = 0.02
MAX_VIEW_SHIFT_PX = 4
MAX_VIEW_YAW_DEG = 0.5

STRUCTURE_GRAY = (0.35, 0.95)
OCCLUDER_GRAY = (0.04, 0.22)
OCCLUDER_COVERAGE = (0.10, 0.35)

_LAYOUT_SALT = 0x51AB
_OCCLUDER_SALT = 0x0CC1
_APPEARANCE_SALT = 0xA99E

# hand-picked high-contrast transforms for the first domains; each is
# (per-channel gain, per-channel bias, shared gamma) and monotone in gray
_BASE_APPEARANCES = [
    ((1.00, 0.92, 0.78), (0.00, 0.02, 0.02), 1.00),
    ((0.45, 0.52, 0.95), (0.03, 0.05, 0.08), 1.35),
    ((0.85, 0.55, 0.30), (0.10, 0.03, 0.00), 0.75),
]


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to render one image deterministically."""

    place_id: int
    appearance_domain: int
    occluded: bool
    pose: Pose6DoF
    render_seed: int = 0


@dataclass
class ManifestRecord:
    path: str  # relative to the manifest's directory
    spec: SceneSpec
    split: str  # train | database | query


@dataclass
class DatasetManifest:
    root: str
    records: list[ManifestRecord] = field(default_factory=list)

    def by_split(self, split: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == split]


def place_base_position(place_id: int) -> np.ndarray:
    """Ground-truth grid position for a place, spaced well beyond the
    loosest localization threshold."""
    col = place_id % GRID_COLS
    row = place_id // GRID_COLS
    return np.array([GRID_SPACING_M * col, GRID_SPACING_M * row, 0.0])


def appearance_transform_params(domain: int) -> tuple[np.ndarray, np.ndarray, float]:
    if domain < 0:
        raise ValidationError(f"appearance domain must be >= 0, got {domain}")
    if domain < len(_BASE_APPEARANCES):
        gain, bias, gamma = _BASE_APPEARANCES[domain]
        return np.array(gain), np.array(bias), gamma
    rng = np.random.default_rng(np.random.SeedSequence([_APPEARANCE_SALT, domain]))
    gain = rng.uniform(0.35, 1.0, size=3)
    bias = rng.uniform(0.0, 0.2, size=3)
    gamma = rng.uniform(0.7, 1.4)
    return gain, bias, float(gamma)


def _layout_rng(place_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_LAYOUT_SALT, place_id]))


def _draw_rect(canvas: np.ndarray, cx: float, cy: float, w: float, h: float, value: float):
    size = canvas.shape[0]
    r0 = max(int(round((cy - h / 2) * size)), 0)
    r1 = min(int(round((cy + h / 2) * size)), size)
    c0 = max(int(round((cx - w / 2) * size)), 0)
    c1 = min(int(round((cx + w / 2) * size)), size)
    if r1 > r0 and c1 > c0:
        canvas[r0:r1, c0:c1] = value


def _draw_disc(canvas: np.ndarray, cx: float, cy: float, radius: float, value: float):
    size = canvas.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (xx / size - cx) ** 2 + (yy / size - cy) ** 2 <= radius**2
    canvas[mask] = value


def render_structure(place_id: int, shift_px: tuple[int, int], size: int) -> np.ndarray:
    """Grayscale layout for a place, shifted by the view offset in pixels."""
    rng = _layout_rng(place_id)
    base = rng.uniform(0.24, 0.32)
    slope = rng.uniform(-0.06, 0.06)
    rows = np.linspace(0.0, 1.0, size)[:, None]
    canvas = np.broadcast_to(base + slope * rows, (size, size)).copy()
    dx = shift_px[0] / size
    dy = shift_px[1] / size
    for _ in range(6):
        cx, cy = rng.uniform(0.05, 0.95, size=2)
        w = rng.uniform(0.12, 0.35)
        h = rng.uniform(0.12, 0.35)
        gray = rng.uniform(*STRUCTURE_GRAY)
        _draw_rect(canvas, cx + dx, cy + dy, w, h, gray)
    for _ in range(2):
        cx, cy = rng.uniform(0.1, 0.9, size=2)
        radius = rng.uniform(0.05, 0.14)
        gray = rng.uniform(*STRUCTURE_GRAY)
        _draw_disc(canvas, cx + dx, cy + dy, radius, gray)
    return canvas


def occluder_mask_and_grays(spec: SceneSpec, size: int,
                            shift_px: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Opaque occluder layout: union coverage lands in [0.10, 0.35]."""
    rng = np.random.default_rng(
        np.random.SeedSequence([_OCCLUDER_SALT, spec.place_id, spec.render_seed])
    )
    dx = shift_px[0] / size
    dy = shift_px[1] / size
    lo, hi = OCCLUDER_COVERAGE
    for _ in range(64):
        layer = np.zeros((size, size))
        count = int(rng.integers(1, 4))
        for i in range(count):
            cx = rng.uniform(0.1, 0.9) + dx
            cy = rng.uniform(0.55, 0.9) + dy  # vehicles sit low in the frame
            w = rng.uniform(0.2, 0.45)
            h = rng.uniform(0.15, 0.35)
            gray = rng.uniform(*OCCLUDER_GRAY)
            _draw_rect(layer, cx, cy, w, h, gray)
        mask = layer > 0
        if lo <= mask.mean() <= hi:
            return mask, layer
    # deterministic fallback: one rectangle of exactly 20% coverage
    layer = np.zeros((size, size))
    _draw_rect(layer, 0.5, 0.7, 0.5, 0.4, float(np.mean(OCCLUDER_GRAY)))
    return layer > 0, layer


def view_shift_px(spec: SceneSpec) -> tuple[int, int]:
    """Pixel offset of the view, recovered from the pose relative to the
    place's grid position."""
    base = place_base_position(spec.place_id)
    delta = spec.pose.translation - base
    return (
        int(round(delta[0] / METERS_PER_PIXEL)),
        int(round(delta[1] / METERS_PER_PIXEL)),
    )


def render_scene(spec: SceneSpec, size: int) -> torch.Tensor:
    """Deterministic render of one spec as a 3xSxS tensor in [-1, 1]."""
    shift = view_shift_px(spec)
    gray = render_structure(spec.place_id, shift, size)
    if spec.occluded:
        mask, layer = occluder_mask_and_grays(spec, size, shift)
        gray = np.where(mask, layer, gray)
    gain, bias, gamma = appearance_transform_params(spec.appearance_domain)
    shaped = np.clip(gray, 0.0, 1.0) ** gamma
    rgb = np.clip(shaped[:, :, None] * gain[None, None, :] + bias[None, None, :], 0.0, 1.0)
    tensor = torch.from_numpy(rgb.astype(np.float32)).permute(2, 0, 1)
    return tensor * 2.0 - 1.0


def quantize_to_uint8(img: torch.Tensor) -> np.ndarray:
    """[-1, 1] CxHxW tensor -> HxWxC uint8, the stored representation."""
    arr = ((img.clamp(-1, 1) + 1.0) * 0.5 * 255.0).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def _record_line(record: ManifestRecord) -> str:
    spec = record.spec
    pose_values = list(spec.pose.translation) + list(spec.pose.rotation)
    fields = [record.path, str(spec.place_id), str(spec.appearance_domain),
              "1" if spec.occluded else "0"] + [f"{v:.9f}" for v in pose_values]
    return " ".join(fields)


def _parse_record_line(line: str, lineno: int, path: str, split: str) -> ManifestRecord:
    parts = line.split()
    if len(parts) != 11:
        raise DataError(f"{path}:{lineno}: expected 11 fields, got {len(parts)}")
    try:
        place_id = int(parts[1])
        appearance = int(parts[2])
        occluded = bool(int(parts[3]))
        numbers = [float(v) for v in parts[4:]]
    except ValueError as exc:
        raise DataError(f"{path}:{lineno}: malformed record") from exc
    pose = Pose6DoF(translation=np.array(numbers[:3]), rotation=np.array(numbers[3:]))
    spec = SceneSpec(place_id=place_id, appearance_domain=appearance,
                     occluded=occluded, pose=pose)
    return ManifestRecord(path=parts[0], spec=spec, split=split)


def write_manifest(records: list[ManifestRecord], path: str):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(_record_line(record) + "\n")


def read_manifest(path: str, split: str | None = None) -> list[ManifestRecord]:
    if not os.path.exists(path):
        raise DataError(f"manifest not found: {path}")
    tag = split or os.path.splitext(os.path.basename(path))[0]
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            records.append(_parse_record_line(line, lineno, path, tag))
    return records


def build_synthetic_dataset(n_places: int, domain_count: int, views_per_place: int,
                            rng: np.random.Generator, out_dir: str,
                            size: int = 64) -> DatasetManifest:
    """Render the full factor grid and write images, per-split manifests
    (train.txt / database.txt / query.txt), and the pose file.

    Per (place, appearance, occlusion) cell the last view is held out: it
    becomes the database entry for the (appearance 0, no occlusion) cell
    and a query everywhere else; earlier views are the training split.
    """
    if n_places < 2:
        raise ValidationError("need at least two places")
    if views_per_place < 2:
        raise ValidationError("need at least two views per cell (train + held-out)")
    image_dir = os.path.join(out_dir, "images")
    os.makedirs(image_dir, exist_ok=True)

    records: list[ManifestRecord] = []
    for place in range(n_places):
        base = place_base_position(place)
        for appearance in range(domain_count):
            for occluded in (False, True):
                for view in range(views_per_place):
                    shift = rng.integers(-MAX_VIEW_SHIFT_PX, MAX_VIEW_SHIFT_PX + 1, size=2)
                    yaw = rng.uniform(-MAX_VIEW_YAW_DEG, MAX_VIEW_YAW_DEG)
                    translation = base + np.array(
                        [shift[0] * METERS_PER_PIXEL, shift[1] * METERS_PER_PIXEL, 0.0]
                    )
                    pose = Pose6DoF(translation=translation, rotation=yaw_quaternion(yaw))
                    seed_words = [place, appearance, int(occluded), view]
                    render_seed = int(
                        np.random.SeedSequence(seed_words).generate_state(1)[0]
                    )
                    spec = SceneSpec(place_id=place, appearance_domain=appearance,
                                     occluded=occluded, pose=pose, render_seed=render_seed)
                    name = f"p{place:03d}_a{appearance}_o{int(occluded)}_v{view}.png"
                    rel = os.path.join("images", name)
                    img = render_scene(spec, size)
                    Image.fromarray(quantize_to_uint8(img)).save(os.path.join(out_dir, rel))
                    if view < views_per_place - 1:
                        split = "train"
                    elif appearance == 0 and not occluded:
                        split = "database"
                    else:
                        split = "query"
                    records.append(ManifestRecord(path=rel, spec=spec, split=split))

    manifest = DatasetManifest(root=out_dir, records=records)
    for split in ("train", "database", "query"):
        write_manifest(manifest.by_split(split), os.path.join(out_dir, f"{split}.txt"))
    with open(os.path.join(out_dir, "poses.txt"), "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(format_pose_line(record.path, record.spec.pose) + "\n")
    return manifest


class FolderDataset:
    """Lazy image-folder handle over one manifest file."""

    def __init__(self, root: str, records: list[ManifestRecord]):
        self.root = root
        self.records = records

    def __len__(self) -> int:
        return len(self.records)

    def load_pixels(self, index: int, out_size: int) -> torch.Tensor:
        record = self.records[index]
        path = os.path.join(self.root, record.path)
        if not os.path.exists(path):
            raise DataError(f"image file missing for record '{record.path}': {path}")
        try:
            with Image.open(path) as im:
                im = im.convert("RGB")
                if im.size != (out_size, out_size):
                    im = im.resize((out_size, out_size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except (OSError, ValueError) as exc:
            raise DataError(f"unreadable image for record '{record.path}': {exc}") from exc
        return torch.from_numpy(arr).permute(2, 0, 1) * 2.0 - 1.0

    def cells(self) -> dict[tuple[int, bool], list[int]]:
        grouped: dict[tuple[int, bool], list[int]] = {}
        for i, record in enumerate(self.records):
            key = (record.spec.appearance_domain, record.spec.occluded)
            grouped.setdefault(key, []).append(i)
        return grouped


def load_image_folder(manifest_path: str) -> FolderDataset:
    """Open a manifest and return a lazily-loading dataset handle."""
    records = read_manifest(manifest_path)
    return FolderDataset(root=os.path.dirname(os.path.abspath(manifest_path)),
                         records=records)
