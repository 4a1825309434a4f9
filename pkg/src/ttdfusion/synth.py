"""Seeded synthetic source pairs with ground-truth dominance, plus corruptions.

A scene is a smooth illumination field with scattered texture elements.  The
two sources see the same scene, but each one is low-pass degraded wherever
the other source is dominant.  All randomness comes from ``CounterRNG``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .codec import parse_key_values
from .imaging import gaussian_blur, save_image, write_pgm
from .rng import CounterRNG

SPLITS = ("left-right", "quadrant", "random-blobs")
CORRUPTIONS = ("contrast", "mask", "exposure", "blur")

MASK_A = 0
MASK_B = 1
MASK_NEUTRAL = 2
# grey levels used when a dominance mask is written as PGM
MASK_PGM_LEVELS = {MASK_A: 0, MASK_B: 255, MASK_NEUTRAL: 128}

CONTRAST_FACTORS = (0.8, 0.6, 0.4, 0.25, 0.1)
EXPOSURE_GAMMAS = (1.5, 2.2, 3.0, 4.0, 6.0)
BLUR_SIGMAS = (0.5, 1.0, 2.0, 4.0, 8.0)

DEGRADE_SIGMA = 2.0


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    seed: int = 0
    texture_density: float = 0.5
    split: str = "left-right"

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError("scenes must be at least 16x16")
        if not 0.0 <= self.texture_density <= 1.0:
            raise ValueError("texture density must be in [0, 1]")
        if self.split not in SPLITS:
            raise ValueError(f"unknown dominance split {self.split!r}")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        kv = parse_key_values(text)
        return cls(height=int(kv["height"]), width=int(kv["width"]), seed=int(kv["seed"]),
                   texture_density=float(kv["texture_density"]), split=kv["split"])


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0
    invert: bool = False  # exposure only: brighten with 1/gamma instead of darkening

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError("severity must be in 1..5")


def _normalize(field: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = field.max() - field.min()
    if span == 0:
        return np.full_like(field, 0.5 * (lo + hi))
    return lo + (hi - lo) * (field - field.min()) / span


def base_scene(spec: SceneSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    rng = CounterRNG(spec.seed, stream=1)
    smooth = gaussian_blur(rng.uniform((h, w)), max(h, w) / 8.0)
    scene = _normalize(smooth, 0.25, 0.75)
    count = int(round(spec.texture_density * h * w / 24.0))
    if count:
        ys = rng.integers(0, h, count)
        xs = rng.integers(0, w, count)
        sizes = rng.integers(1, 4, count)
        amps = rng.uniform(count, 0.1, 0.25) * np.where(rng.uniform(count) < 0.5, -1.0, 1.0)
        for y, x, s, a in zip(ys, xs, sizes, amps):
            scene[y : y + s, x : x + s] += a
    return np.clip(scene, 0.0, 1.0)[:, :, None]


def dominance_mask(spec: SceneSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    if spec.texture_density == 0.0:
        return np.full((h, w), MASK_NEUTRAL, dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    if spec.split == "left-right":
        b_dom = xx >= w // 2
    elif spec.split == "quadrant":
        b_dom = (yy < h // 2) != (xx < w // 2)
    else:
        rng = CounterRNG(spec.seed, stream=2)
        field = gaussian_blur(rng.uniform((h, w)), max(h, w) / 10.0)
        b_dom = field > np.median(field)
    return np.where(b_dom, MASK_B, MASK_A).astype(np.uint8)


def generate_pair(spec: SceneSpec):
    """Return ``(x_a, x_b, mask)``; mask holds MASK_A / MASK_B / MASK_NEUTRAL."""
    scene = base_scene(spec)
    mask = dominance_mask(spec)
    if spec.texture_density == 0.0:
        return scene, scene.copy(), mask
    degraded = gaussian_blur(scene, DEGRADE_SIGMA)
    a_dom = (mask == MASK_A)[:, :, None]
    x_a = np.where(a_dom, scene, degraded)
    x_b = np.where(a_dom, degraded, scene)
    return x_a, x_b, mask


def corruption_region(shape, c: CorruptionSpec) -> np.ndarray:
    """Boolean (H, W) area zeroed by a ``mask`` corruption."""
    h, w = shape[:2]
    region = np.zeros((h, w), dtype=bool)
    rng = CounterRNG(c.seed, stream=3)
    side_lo = 0.10 * min(h, w)
    side_hi = 0.25 * min(h, w)
    for _ in range(c.severity):
        rh, rw = (int(round(v)) for v in rng.uniform(2, side_lo, side_hi))
        rh, rw = max(rh, 1), max(rw, 1)
        y = int(rng.integers(0, h - rh + 1, 1)[0])
        x = int(rng.integers(0, w - rw + 1, 1)[0])
        region[y : y + rh, x : x + rw] = True
    return region


def apply_corruption(x: np.ndarray, c: CorruptionSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    s = c.severity - 1
    if c.kind == "contrast":
        out = 0.5 + (x - 0.5) * CONTRAST_FACTORS[s]
    elif c.kind == "mask":
        out = x.copy()
        out[corruption_region(x.shape, c)] = 0.0
    elif c.kind == "exposure":
        gamma = EXPOSURE_GAMMAS[s]
        out = np.power(x, 1.0 / gamma if c.invert else gamma)
    else:
        out = gaussian_blur(x, BLUR_SIGMAS[s])
    return np.clip(out, 0.0, 1.0)


def scene_specs(count: int, seed: int, size: int = 64, texture_density: float = 0.5):
    """Deterministic list of scene specs cycling through the dominance splits."""
    rng = CounterRNG(seed, stream=4)
    seeds = rng.bits(count)
    return [SceneSpec(size, size, int(s), texture_density, SPLITS[i % len(SPLITS)])
            for i, s in enumerate(seeds)]


def write_dataset(root, specs) -> list[Path]:
    """Write ``<root>/<scene-id>/{a.png, b.png, mask.pgm, spec.txt}`` per spec."""
    root = Path(root)
    written = []
    for i, spec in enumerate(specs):
        d = root / f"scene{i:04d}"
        d.mkdir(parents=True, exist_ok=True)
        x_a, x_b, mask = generate_pair(spec)
        save_image(x_a, d / "a.png")
        save_image(x_b, d / "b.png")
        write_pgm(np.vectorize(MASK_PGM_LEVELS.get)(mask).astype(np.uint8), d / "mask.pgm")
        (d / "spec.txt").write_text(spec.to_text(), encoding="utf-8")
        written.append(d)
    return written
