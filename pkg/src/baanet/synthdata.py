"""Deterministic paired RGB-thermal toy scenes with the two modality noise modes.

Scenes are soft-edged rectangles on a flat background. The RGB image carries
the low-light failure: at night the object/background color difference is
scaled by ``1 - rgb_night_contrast_collapse`` while sensor noise grows
heavy and blotchy, so appearance dissolves into object-scale false structure.
The thermal image carries the iso-temperature failure: the object temperature
is blended toward the background by ``tir_iso_temperature`` regardless of the
hour. Ground-truth boxes, day/night labels, and occlusion tags come along for
training and subset evaluation.

Everything is a pure function of the seeds: rendering the same spec twice is
bit-identical, and datasets are reproducible file-for-file.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from . import fileio
from .detector import BoundingBox, GroundTruth
from .tensor import Tensor

__all__ = [
    "ObjectSpec",
    "SceneSpec",
    "Sample",
    "NoiseProfile",
    "render",
    "random_scene",
    "occlusion_tag",
    "SampleRecord",
    "Dataset",
    "make_dataset",
    "load_dataset",
    "splitmix64",
]

# occlusion tag boundaries over the occluded fraction
PARTIAL_MAX = 0.5

# RGB sensor noise splits its variance between per-pixel grain and a smooth
# blotch field (Gaussian upsampled from a coarse grid): low light produces
# object-scale false structure, not just white speckle
BLOTCH_VARIANCE_SHARE = 0.65
BLOTCH_GRID_DIV = 6


@dataclasses.dataclass(frozen=True)
class ObjectSpec:
    """One rectangle: geometry plus how visible it is in each modality."""

    cx: float
    cy: float
    width: float
    height: float
    temperature_contrast: float
    reflectance_contrast: float
    occlusion_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.occlusion_fraction < 1.0:
            raise ValueError(f"occlusion fraction must lie in [0, 1), got {self.occlusion_fraction}")


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    """Generative description of one image pair."""

    size: int
    regime: str  # "day" | "night"
    objects: tuple[ObjectSpec, ...]
    rgb_night_contrast_collapse: float = 0.0
    tir_iso_temperature: float = 0.0
    rgb_noise_sigma: float = 0.0
    tir_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.regime not in ("day", "night"):
            raise ValueError(f"regime must be 'day' or 'night', got {self.regime!r}")
        for knob in ("rgb_night_contrast_collapse", "tir_iso_temperature"):
            v = getattr(self, knob)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{knob} must lie in [0, 1], got {v}")
        for obj in self.objects:
            half_w, half_h = obj.width / 2, obj.height / 2
            if obj.cx - half_w < 0 or obj.cx + half_w > self.size or obj.cy - half_h < 0 or obj.cy + half_h > self.size:
                raise ValueError(
                    f"object at ({obj.cx}, {obj.cy}) size ({obj.width}, {obj.height}) "
                    f"leaves the {self.size}x{self.size} image"
                )


@dataclasses.dataclass
class Sample:
    """Rendered pair plus its annotations."""

    rgb: Tensor  # [3, H, W], values in [0, 1]
    tir: Tensor  # [1, H, W], values in [0, 1]
    ground_truths: list[GroundTruth]
    illumination: str


def occlusion_tag(fraction: float) -> str:
    if fraction <= 0.0:
        return "none"
    return "partial" if fraction <= PARTIAL_MAX else "heavy"


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each unit pixel [i, i+1] covered by the interval [lo, hi]."""
    edges = np.arange(n + 1, dtype=np.float64)
    return np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, 1.0)


def _alpha_mask(obj: ObjectSpec, size: int) -> np.ndarray:
    cov_x = _coverage(obj.cx - obj.width / 2, obj.cx + obj.width / 2, size)
    cov_y = _coverage(obj.cy - obj.height / 2, obj.cy + obj.height / 2, size)
    return np.outer(cov_y, cov_x)


def _upsample_bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear upsample of [C, k, k] to [C, size, size]."""
    k = grid.shape[-1]
    pos = np.arange(size) * ((k - 1) / (size - 1)) if size > 1 else np.zeros(1)
    lo = np.minimum(pos.astype(int), k - 1)
    hi = np.minimum(lo + 1, k - 1)
    f = pos - lo
    rows = grid[:, lo, :] * (1 - f)[None, :, None] + grid[:, hi, :] * f[None, :, None]
    return rows[:, :, lo] * (1 - f)[None, None, :] + rows[:, :, hi] * f[None, None, :]


def _rgb_noise(rng: np.random.Generator, sigma: float, size: int) -> np.ndarray:
    """Gaussian sensor noise with per-pixel std ``sigma`` at the grid knots:
    part white grain, part smooth blotches at roughly object scale."""
    grain = rng.normal(0.0, sigma * np.sqrt(1.0 - BLOTCH_VARIANCE_SHARE), (3, size, size))
    k = max(2, size // BLOTCH_GRID_DIV)
    coarse = rng.normal(0.0, sigma * np.sqrt(BLOTCH_VARIANCE_SHARE), (3, k, k))
    return grain + _upsample_bilinear(coarse, size)


def _occluder_mask(obj: ObjectSpec, size: int, side: int) -> np.ndarray:
    """Strip covering ``occlusion_fraction`` of the object from one side (0=bottom,
    1=top, 2=left, 3=right)."""
    x1, x2 = obj.cx - obj.width / 2, obj.cx + obj.width / 2
    y1, y2 = obj.cy - obj.height / 2, obj.cy + obj.height / 2
    f = obj.occlusion_fraction
    if side == 0:
        y1 = y2 - f * obj.height
    elif side == 1:
        y2 = y1 + f * obj.height
    elif side == 2:
        x2 = x1 + f * obj.width
    else:
        x1 = x2 - f * obj.width
    return np.outer(_coverage(y1, y2, size), _coverage(x1, x2, size))


def render(spec: SceneSpec) -> Sample:
    """Rasterize one scene; bit-identical for identical specs."""
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    size = spec.size

    bg_rgb = rng.uniform(0.35, 0.55) + rng.uniform(-0.05, 0.05, size=3)
    bg_tir = rng.uniform(0.25, 0.45)
    rgb = np.broadcast_to(bg_rgb[:, None, None], (3, size, size)).copy()
    tir = np.full((1, size, size), bg_tir)

    collapse = spec.rgb_night_contrast_collapse if spec.regime == "night" else 0.0
    gts: list[GroundTruth] = []
    for obj in spec.objects:
        # zero-mean hue jitter keeps the mean-channel contrast exactly as specified
        j = rng.uniform(-0.08, 0.08, size=2)
        hue = np.array([j[0], j[1], -j[0] - j[1]])
        delta_rgb = (obj.reflectance_contrast + hue) * (1.0 - collapse)
        delta_tir = obj.temperature_contrast * (1.0 - spec.tir_iso_temperature)
        occ_side = int(rng.integers(0, 4))

        alpha = _alpha_mask(obj, size)
        rgb += alpha[None] * delta_rgb[:, None, None]
        tir += alpha[None] * delta_tir
        if obj.occlusion_fraction > 0.0:
            occ = _occluder_mask(obj, size, occ_side)
            # the occluder restores the background in both modalities
            rgb -= occ[None] * alpha[None] * delta_rgb[:, None, None]
            tir -= occ[None] * alpha[None] * delta_tir
        gts.append(
            GroundTruth(
                BoundingBox(obj.cx, obj.cy, obj.width, obj.height),
                occlusion=occlusion_tag(obj.occlusion_fraction),
            )
        )

    if spec.rgb_noise_sigma > 0.0:
        rgb += _rgb_noise(rng, spec.rgb_noise_sigma, size)
    if spec.tir_noise_sigma > 0.0:
        tir += rng.normal(0.0, spec.tir_noise_sigma, tir.shape)
    np.clip(rgb, 0.0, 1.0, out=rgb)
    np.clip(tir, 0.0, 1.0, out=tir)
    return Sample(Tensor(rgb), Tensor(tir), gts, spec.regime)


@dataclasses.dataclass(frozen=True)
class NoiseProfile:
    """Per-regime sampling ranges for the scene noise knobs.

    The defaults encode the intended asymmetry: nights collapse the RGB
    appearance under heavy sensor noise while thermal stays crisp; days keep
    RGB clean but blend a good share of the thermal contrast away.
    """

    night_collapse: tuple[float, float] = (0.9, 1.0)
    day_tir_iso: tuple[float, float] = (0.25, 0.65)
    night_tir_iso: tuple[float, float] = (0.0, 0.2)
    day_rgb_sigma: float = 0.02
    night_rgb_sigma: float = 0.24
    tir_sigma: float = 0.025

    @classmethod
    def default(cls) -> "NoiseProfile":
        return cls()

    @classmethod
    def none(cls) -> "NoiseProfile":
        """Clean control: no collapse, no blending, no sensor noise."""
        return cls((0.0, 0.0), (0.0, 0.0), (0.0, 0.0), 0.0, 0.0, 0.0)


HEIGHT_RANGE = (8.0, 40.0)
ASPECT_RATIO = 0.41


def random_scene(size: int, regime: str, profile: NoiseProfile, seed: int) -> SceneSpec:
    """Draw one scene: 1-4 pedestrian-ish rectangles with seeded everything.

    Heights follow the documented uniform law at the default 64px resolution;
    smaller frames clamp the ceiling so every object still fits with margin.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    n_objects = int(rng.integers(1, 5))
    h_max = min(HEIGHT_RANGE[1], size * 0.625)
    objects = []
    for _ in range(n_objects):
        h = float(rng.uniform(HEIGHT_RANGE[0], h_max))
        w = float(np.clip(h * ASPECT_RATIO * np.exp(rng.uniform(-0.1, 0.1)), 2.0, size / 2))
        cx = float(rng.uniform(w / 2 + 1, size - w / 2 - 1))
        cy = float(rng.uniform(h / 2 + 1, size - h / 2 - 1))
        temp = float(rng.uniform(0.25, 0.55))
        refl = float(rng.uniform(0.28, 0.5)) * (1.0 if rng.random() < 0.5 else -1.0)
        roll = rng.random()
        if roll < 0.7:
            occ = 0.0
        elif roll < 0.9:
            occ = float(rng.uniform(0.1, 0.4))
        else:
            occ = float(rng.uniform(0.55, 0.8))
        objects.append(ObjectSpec(cx, cy, w, h, temp, refl, occ))
    if regime == "night":
        collapse = float(rng.uniform(*profile.night_collapse))
        tir_iso = float(rng.uniform(*profile.night_tir_iso))
        rgb_sigma = profile.night_rgb_sigma
    else:
        collapse = 0.0
        tir_iso = float(rng.uniform(*profile.day_tir_iso))
        rgb_sigma = profile.day_rgb_sigma
    return SceneSpec(
        size=size,
        regime=regime,
        objects=tuple(objects),
        rgb_night_contrast_collapse=collapse,
        tir_iso_temperature=tir_iso,
        rgb_noise_sigma=rgb_sigma,
        tir_noise_sigma=profile.tir_sigma,
        seed=int(rng.integers(0, 2**62)),
    )


def splitmix64(seed: int, index: int) -> int:
    """Derive a stream-independent per-item seed from the master seed."""
    z = (seed + 0x9E3779B97F4A7C15 * (index + 1)) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


@dataclasses.dataclass
class SampleRecord:
    """One manifest row: annotations plus the tensor file names."""

    sample_id: str
    split: str
    illumination: str
    ground_truths: list[GroundTruth]
    rgb_file: str
    tir_file: str


@dataclasses.dataclass
class Dataset:
    root: Path
    image_size: int
    seed: int
    records: list[SampleRecord]

    def entries(self, split: str | None = None) -> list[SampleRecord]:
        return [r for r in self.records if split is None or r.split == split]

    def load_pair(self, record: SampleRecord) -> tuple[np.ndarray, np.ndarray]:
        return (
            fileio.load_tensor(self.root / record.rgb_file),
            fileio.load_tensor(self.root / record.tir_file),
        )


def _record_to_json(r: SampleRecord) -> dict:
    return {
        "id": r.sample_id,
        "split": r.split,
        "illumination": r.illumination,
        "boxes": [
            {
                "cx": gt.box.cx,
                "cy": gt.box.cy,
                "w": gt.box.w,
                "h": gt.box.h,
                "occlusion": gt.occlusion,
                "height_px": gt.box.h,
            }
            for gt in r.ground_truths
        ],
        "rgb": r.rgb_file,
        "tir": r.tir_file,
    }


def _record_from_json(d: dict) -> SampleRecord:
    gts = [
        GroundTruth(BoundingBox(b["cx"], b["cy"], b["w"], b["h"]), occlusion=b["occlusion"])
        for b in d["boxes"]
    ]
    return SampleRecord(d["id"], d["split"], d["illumination"], gts, d["rgb"], d["tir"])


def make_dataset(
    out_dir,
    n_samples: int,
    train_ratio: float = 0.8,
    profile: NoiseProfile | None = None,
    seed: int = 0,
    image_size: int = 64,
) -> Dataset:
    """Generate, render, and persist a dataset under ``out_dir``.

    Day/night labels alternate by index so both the whole set and any
    contiguous split stay balanced; the first ``round(n * train_ratio)``
    samples form the train split. Per-sample seeds come from a splitmix
    derivation of the master seed, so samples are independent and the whole
    directory is byte-reproducible.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    if not 0.0 <= train_ratio <= 1.0:
        raise ValueError(f"train_ratio must lie in [0, 1], got {train_ratio}")
    profile = profile if profile is not None else NoiseProfile.default()
    root = Path(out_dir)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    n_train = int(round(n_samples * train_ratio))

    records = []
    for i in range(n_samples):
        regime = "day" if i % 2 == 0 else "night"
        spec = random_scene(image_size, regime, profile, splitmix64(seed, i))
        sample = render(spec)
        sid = f"{i:05d}"
        rgb_file = f"samples/{sid}_rgb.bin"
        tir_file = f"samples/{sid}_tir.bin"
        fileio.save_tensor(root / rgb_file, sample.rgb.array)
        fileio.save_tensor(root / tir_file, sample.tir.array)
        records.append(
            SampleRecord(
                sid,
                "train" if i < n_train else "test",
                sample.illumination,
                sample.ground_truths,
                rgb_file,
                tir_file,
            )
        )

    manifest = {
        "version": 1,
        "image_size": image_size,
        "seed": seed,
        "n_samples": n_samples,
        "samples": [_record_to_json(r) for r in records],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return Dataset(root, image_size, seed, records)


def load_dataset(root) -> Dataset:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != 1:
        raise fileio.FormatError(f"manifest version {manifest.get('version')} != supported version 1")
    records = [_record_from_json(d) for d in manifest["samples"]]
    return Dataset(root, manifest["image_size"], manifest["seed"], records)
