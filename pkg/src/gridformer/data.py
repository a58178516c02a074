"""Synthetic weather degradations, paired datasets, pyramids and image I/O.

Images are float arrays laid out (3, H, W) with values in [0, 1].  Every random
draw comes from a generator seeded by ``(seed, image id)`` so that generating
one image or a whole directory, serially or in parallel, gives identical bits.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ContractError, ShapeError

KINDS = ("haze", "rain", "snow", "raindrop", "mixed")


def rng_for(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(key.encode())])


# --------------------------------------------------------------------- pyramid


def box_downsample(img: np.ndarray) -> np.ndarray:
    """2x2 box filter over the last two axes."""
    h, w = img.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"box downsample needs even extents, got {h}x{w}")
    v = img.reshape(img.shape[:-2] + (h // 2, 2, w // 2, 2))
    return v.mean(axis=(-3, -1))


def make_pyramid(img: np.ndarray, levels: int = 3) -> list[np.ndarray]:
    """Scales 1, 1/2, 1/4, ... by repeated 2x2 box filtering."""
    h, w = img.shape[-2:]
    m = 2 ** (levels - 1)
    if h % m or w % m:
        raise ShapeError(f"pyramid of {levels} levels needs extents divisible by {m}, got {h}x{w}")
    out = [img]
    for _ in range(levels - 1):
        out.append(box_downsample(out[-1]))
    return out


# ---------------------------------------------------------------- clean scenes


def smooth_noise(rng: np.random.Generator, h: int, w: int, passes: int = 4, size: int = 9) -> np.ndarray:
    """Value noise smoothed by repeated box blur, normalized to [0, 1]."""
    d = rng.random((h, w))
    for _ in range(passes):
        d = ndimage.uniform_filter(d, size=size, mode="reflect")
    lo, hi = d.min(), d.max()
    return (d - lo) / (hi - lo) if hi > lo else np.zeros_like(d)


def clean_scene(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Procedural stand-in for a natural image: gradients, blobs and shapes."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    top, bottom = rng.uniform(0.2, 0.9, 3), rng.uniform(0.1, 0.8, 3)
    img = top[:, None, None] * (1 - yy) + bottom[:, None, None] * yy
    texture = smooth_noise(rng, size, size, passes=2, size=5)
    img = img + rng.uniform(0.05, 0.2) * (texture - 0.5)
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0, 1, 3)
        cy, cx = rng.uniform(0, 1, 2)
        if rng.random() < 0.5:
            rad = rng.uniform(0.08, 0.3)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < rad**2
        else:
            hh, ww = rng.uniform(0.1, 0.4, 2)
            mask = (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
        img = np.where(mask[None], color[:, None, None], img)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------- degradations


@dataclass
class DegradationSpec:
    kind: str = "haze"
    seed: int = 0
    # haze
    airlight: tuple[float, float, float] | None = None
    beta: float = 1.2
    depth: str = "noise"
    depth_value: float = 1.0
    # rain streaks
    streaks: int = 40
    streak_length: int = 12
    streak_angle: float = 75.0
    streak_alpha: float = 0.6
    streak_color: float = 1.0
    # snow
    flakes: int = 60
    flake_radius: tuple[float, float] = (0.8, 2.5)
    flake_alpha: float = 0.85
    # raindrops
    drops: int = 8
    drop_radius: tuple[float, float] = (3.0, 8.0)
    drop_blur: float = 2.0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ContractError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")

    def to_pairs(self) -> dict[str, str]:
        out = {}
        for k, v in self.__dict__.items():
            if v is None:
                continue
            out[k] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
        return out


def depth_map(spec: DegradationSpec, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    if spec.depth == "constant":
        return np.full((h, w), spec.depth_value)
    if spec.depth == "ramp":
        return np.repeat(np.linspace(0.0, 1.0, h)[:, None], w, axis=1)
    if spec.depth == "noise":
        return smooth_noise(rng, h, w)
    raise ContractError(f"unknown depth style {spec.depth!r}")


def synth_haze(clean: np.ndarray, spec: DegradationSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Atmospheric scattering: ``I = J t + A (1 - t)`` with ``t = exp(-beta d)``."""
    rng = rng or np.random.default_rng(spec.seed)
    a = np.asarray(spec.airlight if spec.airlight is not None else rng.uniform(0.7, 1.0, 3), dtype=np.float64)
    if spec.beta == 0:
        return clean.copy()
    t = np.exp(-spec.beta * depth_map(spec, rng, *clean.shape[-2:]))
    return np.clip(clean * t + a[:, None, None] * (1.0 - t), 0.0, 1.0)


def _blend(img: np.ndarray, mask: np.ndarray, color) -> np.ndarray:
    color = np.broadcast_to(np.asarray(color, dtype=np.float64).reshape(-1, 1, 1), img.shape)
    return np.clip((1.0 - mask) * img + mask * color, 0.0, 1.0)


def synth_rain(clean: np.ndarray, spec: DegradationSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Alpha-blended bright line segments at a common orientation."""
    if spec.streaks == 0:
        return clean.copy()
    rng = rng or np.random.default_rng(spec.seed)
    h, w = clean.shape[-2:]
    mask = np.zeros((h, w))
    angle = math.radians(spec.streak_angle)
    dy, dx = math.sin(angle), math.cos(angle)
    steps = np.linspace(0.0, spec.streak_length, 2 * spec.streak_length + 1)
    for _ in range(spec.streaks):
        y0, x0 = rng.uniform(0, h), rng.uniform(0, w)
        length = rng.uniform(0.5, 1.0)
        ys = np.round(y0 + dy * steps * length).astype(int)
        xs = np.round(x0 + dx * steps * length).astype(int)
        keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        mask[ys[keep], xs[keep]] = spec.streak_alpha
    return _blend(clean, mask, spec.streak_color)


def synth_snow(clean: np.ndarray, spec: DegradationSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Alpha-blended soft white disks."""
    if spec.flakes == 0:
        return clean.copy()
    rng = rng or np.random.default_rng(spec.seed)
    h, w = clean.shape[-2:]
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w))
    for _ in range(spec.flakes):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        rad = rng.uniform(*spec.flake_radius)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        mask = np.maximum(mask, np.clip(1.0 - dist / rad, 0.0, 1.0) * spec.flake_alpha)
    return _blend(clean, mask, 1.0)


def synth_raindrop(clean: np.ndarray, spec: DegradationSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Disk regions replaced by a blurred, slightly brightened copy."""
    if spec.drops == 0:
        return clean.copy()
    rng = rng or np.random.default_rng(spec.seed)
    h, w = clean.shape[-2:]
    yy, xx = np.mgrid[0:h, 0:w]
    blurred = ndimage.gaussian_filter(clean, sigma=(0, spec.drop_blur, spec.drop_blur), mode="reflect")
    blurred = np.clip(blurred * 1.1 + 0.05, 0.0, 1.0)
    mask = np.zeros((h, w))
    for _ in range(spec.drops):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        rad = rng.uniform(*spec.drop_radius)
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        mask = np.maximum(mask, np.clip((rad - dist) / 1.5, 0.0, 1.0))
    return np.clip((1.0 - mask) * clean + mask * blurred, 0.0, 1.0)


def degrade(clean: np.ndarray, spec: DegradationSpec, key: str = "") -> np.ndarray:
    """Apply ``spec`` to ``clean``; randomness is keyed by ``(spec.seed, key)``."""
    rng = rng_for(spec.seed, key)
    if spec.kind == "haze":
        return synth_haze(clean, spec, rng)
    if spec.kind == "rain":
        return synth_rain(clean, spec, rng)
    if spec.kind == "snow":
        return synth_snow(clean, spec, rng)
    if spec.kind == "raindrop":
        return synth_raindrop(clean, spec, rng)
    return synth_rain(synth_haze(clean, spec, rng), spec, rng)


# ----------------------------------------------------------------- augmentation


def augment(
    degraded: np.ndarray, clean: np.ndarray, rng: np.random.Generator, patch: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Shared random square crop, then shared horizontal/vertical flips."""
    if degraded.shape != clean.shape:
        raise ContractError(f"pair extents differ: {degraded.shape} vs {clean.shape}")
    h, w = clean.shape[-2:]
    if patch is not None:
        if patch > h or patch > w:
            raise ContractError(f"patch {patch} larger than image {h}x{w}")
        y, x = int(rng.integers(0, h - patch + 1)), int(rng.integers(0, w - patch + 1))
        degraded = degraded[..., y : y + patch, x : x + patch]
        clean = clean[..., y : y + patch, x : x + patch]
    if rng.random() < 0.5:
        degraded, clean = degraded[..., ::-1], clean[..., ::-1]
    if rng.random() < 0.5:
        degraded, clean = degraded[..., ::-1, :], clean[..., ::-1, :]
    return np.ascontiguousarray(degraded), np.ascontiguousarray(clean)


# -------------------------------------------------------------------- image I/O


def quantize(img: np.ndarray) -> np.ndarray:
    """[0,1] floats to uint8 with round-half-up."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path: str | Path) -> None:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ContractError(f"save_image expects a (3,H,W) array, got {arr.shape}")
    Image.fromarray(quantize(arr).transpose(1, 2, 0), mode="RGB").save(path)


def load_image(path: str | Path, dtype=np.float32) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return (arr.transpose(2, 0, 1) / 255.0).astype(dtype)


# --------------------------------------------------------------------- datasets


@dataclass
class PairedDataset:
    ids: list[str]
    degraded: list[np.ndarray]
    clean: list[np.ndarray]
    meta: dict[str, dict[str, str]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)


def synth_pairs(n: int, spec: DegradationSpec, size: int = 64, prefix: str = "img") -> PairedDataset:
    ids, deg, cln = [], [], []
    for i in range(n):
        key = f"{prefix}{i:04d}"
        clean = clean_scene(rng_for(spec.seed, "scene/" + key), size)
        ids.append(key)
        cln.append(clean)
        deg.append(degrade(clean, spec, key))
    return PairedDataset(ids, deg, cln, {k: spec.to_pairs() for k in ids})


def write_dataset(ds: PairedDataset, root: str | Path) -> None:
    """Layout: ``clean/<id>.png``, ``degraded/<id>.png`` and ``manifest.txt``."""
    root = Path(root)
    (root / "clean").mkdir(parents=True, exist_ok=True)
    (root / "degraded").mkdir(parents=True, exist_ok=True)
    lines = []
    for key, d, c in zip(ds.ids, ds.degraded, ds.clean):
        save_image(c, root / "clean" / f"{key}.png")
        save_image(d, root / "degraded" / f"{key}.png")
        pairs = " ".join(f"{k}={v}" for k, v in ds.meta.get(key, {}).items())
        lines.append(f"{key} {pairs}".rstrip())
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> dict[str, dict[str, str]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        out[parts[0]] = dict(p.split("=", 1) for p in parts[1:])
    return out


def read_dataset(root: str | Path, dtype=np.float32) -> PairedDataset:
    root = Path(root)
    manifest = root / "manifest.txt"
    if manifest.exists():
        meta = read_manifest(manifest)
        ids = list(meta)
    else:
        meta = {}
        ids = sorted(p.stem for p in (root / "degraded").glob("*.png"))
    if not ids:
        raise ContractError(f"no image pairs found under {root}")
    deg = [load_image(root / "degraded" / f"{k}.png", dtype) for k in ids]
    cln = [load_image(root / "clean" / f"{k}.png", dtype) for k in ids]
    return PairedDataset(ids, deg, cln, meta)
