"""Test-time dynamic fusion: loss maps, relative-dominability weights, fusion.

Two stages per input tuple:

1. every source is passed alone through the frozen codec; the per-pixel
   reconstruction deficiency ``|D(E(x_m)) - x_m|`` is its loss map, and the
   loss maps are turned into per-pixel weights that sum to one;
2. the weighted sum of the sources' features is decoded into the fused image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image

from .codec import CodecSpec, ToyNetParams, decode, encode, loss_gradients, reconstruct
from .imaging import gaussian_blur, pack_raw_map

VARIANTS = ("rd", "plain", "sigmoid", "static", "pc", "grad")
NORMS = ("softmax", "prop", "none")
VARIANT_ALIASES = {
    "exp-softmax": "rd",
    "plain-softmax": "plain",
    "sigmoid-softmax": "sigmoid",
    "static-uniform": "static",
    "positive-correlated": "pc",
    "gradient-rd": "grad",
}
NORM_ALIASES = {"proportional": "prop"}
SUM_TOL = 1e-6


class WeightError(ValueError):
    pass


@dataclass(frozen=True)
class WeightForm:
    variant: str = "rd"
    norm: str = "softmax"
    grad_channel: Optional[int] = None
    smooth_sigma: Optional[float] = None  # optional Gaussian pre-smoothing of loss maps

    def __post_init__(self):
        object.__setattr__(self, "variant", VARIANT_ALIASES.get(self.variant, self.variant))
        object.__setattr__(self, "norm", NORM_ALIASES.get(self.norm, self.norm))
        if self.variant not in VARIANTS:
            raise WeightError(f"unknown weight variant {self.variant!r}")
        if self.norm not in NORMS:
            raise WeightError(f"unknown normalization {self.norm!r}")

    @property
    def label(self) -> str:
        return self.variant if self.norm == "softmax" else f"{self.variant}/{self.norm}"


RD = WeightForm("rd")
STATIC = WeightForm("static")
PC = WeightForm("pc")


def unisource_loss_map(spec: CodecSpec, params: Optional[ToyNetParams], x: np.ndarray) -> np.ndarray:
    """Channel-mean absolute reconstruction error of one source, ``(H, W)``."""
    x = np.asarray(x, dtype=np.float64)
    return np.abs(reconstruct(spec, params, x) - x).mean(axis=2)


def _stack(maps: Sequence[np.ndarray]) -> np.ndarray:
    if len(maps) < 2:
        raise WeightError("need at least two sources")
    shapes = {np.shape(m) for m in maps}
    if len(shapes) != 1:
        raise WeightError(f"loss maps differ in shape: {sorted(shapes)}")
    stacked = np.stack([np.asarray(m, dtype=np.float64) for m in maps], axis=-1)
    if stacked.ndim != 3:
        raise WeightError("loss maps must be (H, W)")
    return stacked


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _scores(losses: np.ndarray, variant: str) -> np.ndarray:
    if variant in ("rd", "grad"):
        return np.exp(-losses)
    if variant == "plain":
        return -losses
    if variant == "sigmoid":
        return 1.0 / (1.0 + np.exp(losses))
    if variant == "pc":
        return -np.exp(-losses)
    return np.ones_like(losses)


def normalize(scores: np.ndarray, norm: str) -> np.ndarray:
    if norm == "softmax":
        return softmax(scores)
    if norm == "prop":
        if np.any(scores <= 0):
            raise WeightError("proportional normalization needs strictly positive scores")
        return scores / scores.sum(axis=-1, keepdims=True)
    return scores.copy()


def compute_weights(losses: Sequence[np.ndarray], form: WeightForm = RD) -> np.ndarray:
    """Per-pixel weights ``(H, W, M)`` from M loss maps."""
    stacked = _stack(losses)
    if form.smooth_sigma:
        stacked = gaussian_blur(stacked, form.smooth_sigma)
    return normalize(_scores(stacked, form.variant), form.norm)


def select_gradient_channel(batches: Sequence[Sequence[np.ndarray]]) -> int:
    """Channel whose |gradient| has the largest spatial variance, averaged over
    every map of every item in ``batches`` (each map is ``(H, W, K)``)."""
    maps = [np.abs(g) for item in batches for g in item]
    if not maps:
        raise WeightError("empty calibration batch")
    variances = np.mean([g.reshape(-1, g.shape[-1]).var(axis=0) for g in maps], axis=0)
    return int(np.argmax(variances))


def gradient_rd(feature_grads: Sequence[np.ndarray], channel: Optional[int] = None,
                norm: str = "softmax") -> np.ndarray:
    """Weights from one channel of each source's |dL/dE(x_m)|."""
    grads = [np.asarray(g, dtype=np.float64) for g in feature_grads]
    k = grads[0].shape[-1]
    if any(g.shape != grads[0].shape for g in grads):
        raise WeightError("gradient maps differ in shape")
    if channel is None:
        channel = select_gradient_channel([grads])
    if not 0 <= channel < k:
        raise WeightError(f"gradient channel {channel} out of range [0, {k})")
    mags = [np.abs(g[:, :, channel]) for g in grads]
    return normalize(_scores(_stack(mags), "grad"), norm)


def check_normalized(weights: np.ndarray, tol: float = SUM_TOL) -> bool:
    return bool(np.all(np.abs(weights.sum(axis=-1) - 1.0) <= tol))


def fuse(features: Sequence[np.ndarray], weights: np.ndarray, spec: CodecSpec,
         params: Optional[ToyNetParams], force: bool = False) -> np.ndarray:
    """Decode the per-pixel weighted sum of source features."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(features) != weights.shape[-1]:
        raise WeightError(f"{len(features)} feature maps but {weights.shape[-1]} weight channels")
    if any(f.shape != features[0].shape for f in features):
        raise WeightError("feature maps differ in shape")
    if features[0].shape[:2] != weights.shape[:2]:
        raise WeightError("weights and features differ in spatial size")
    if not force and not check_normalized(weights):
        raise WeightError("weights do not sum to one per pixel; pass force=True to fuse anyway")
    fused = np.zeros_like(features[0], dtype=np.float64)
    for m, f in enumerate(features):
        fused += weights[:, :, m : m + 1] * f
    return np.clip(decode(spec, params, fused), 0.0, 1.0)


def image_distance(a: np.ndarray, b: np.ndarray, norm: str = "mae") -> float:
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if norm == "mae":
        return float(np.mean(np.abs(diff)))
    if norm == "rms":
        return float(np.sqrt(np.mean(diff * diff)))
    raise ValueError(f"unknown norm {norm!r}")


def fusion_loss(fused: np.ndarray, sources: Sequence[np.ndarray], norm: str = "mae") -> float:
    """``sum_m ||I_F - x_m||`` with a mean-absolute (or root-mean-square) norm."""
    if any(np.shape(x) != np.shape(fused) for x in sources):
        raise ValueError("fused image and sources differ in shape")
    return math.fsum(image_distance(fused, x, norm) for x in sources)


class PipelineResult(NamedTuple):
    fused: np.ndarray
    weights: np.ndarray
    losses: list


def stage_one(spec: CodecSpec, params: Optional[ToyNetParams], sources: Sequence[np.ndarray],
              form: WeightForm = RD):
    """Loss maps and weights from uni-source reconstructions."""
    if len(sources) < 2:
        raise WeightError("need at least two sources")
    if any(np.shape(x) != np.shape(sources[0]) for x in sources):
        raise ValueError("sources differ in shape")
    losses = [unisource_loss_map(spec, params, x) for x in sources]
    if form.variant == "grad":
        grads = [loss_gradients(spec, params, x).features for x in sources]
        weights = gradient_rd(grads, form.grad_channel, form.norm)
    else:
        weights = compute_weights(losses, form)
    return losses, weights


def run_pipeline(spec: CodecSpec, params: Optional[ToyNetParams], sources: Sequence[np.ndarray],
                 form: WeightForm = RD, force: bool = False) -> PipelineResult:
    losses, weights = stage_one(spec, params, sources, form)
    features = [encode(spec, params, x) for x in sources]
    fused = fuse(features, weights, spec, params, force=force)
    return PipelineResult(fused, weights, losses)


def export_weight_maps(weights: np.ndarray, out_dir, stem: str) -> list[Path]:
    """Per source: 16-bit PNG (round(w * 65535)) and raw f32 map with H, W header."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for m in range(weights.shape[-1]):
        w = weights[:, :, m]
        png = out_dir / f"{stem}_w{m}.png"
        levels = np.floor(np.clip(w, 0.0, 1.0) * 65535.0 + 0.5).astype(np.uint16)
        Image.fromarray(levels).save(png, format="PNG")
        raw = out_dir / f"{stem}_w{m}.f32"
        raw.write_bytes(pack_raw_map(w))
        written += [png, raw]
    return written


def export_loss_maps(losses: Sequence[np.ndarray], out_dir, stem: str) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for m, loss in enumerate(losses):
        path = out_dir / f"{stem}_loss{m}.f32"
        path.write_bytes(pack_raw_map(loss))
        written.append(path)
    return written
