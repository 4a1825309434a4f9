"""Fusion quality metrics: EN, SD, AG, EI, SF, SCD, CE, SSIM.

Conventions (absolute values depend on them):

* multi-channel inputs are converted to BT.601 luma first;
* SD, AG, EI, SF and SSIM work on the 0-255 intensity scale;
* EN and CE use the 256-bin histogram, log base 2;
* CE is the mean over sources of KL(source || fused), both histograms
  normalized and offset by 1e-12;
* SCD is r(F - A, B) + r(F - B, A) with Pearson r (Aslantas and Bendes);
* SSIM is the mean local SSIM over an 11x11 Gaussian window (sigma 1.5),
  averaged over sources.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .imaging import gaussian_blur, histogram256, sobel_magnitude, to_grayscale

CE_EPS = 1e-12
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2

CSV_COLUMNS = ("EN", "SD", "AG", "EI", "SF", "SCD", "CE", "SSIM")


class UndefinedMetricError(ValueError):
    """Metric has no value for these inputs (e.g. zero-variance correlation)."""


def _gray255(img) -> np.ndarray:
    return to_grayscale(img)[:, :, 0] * 255.0


def _gray01(img) -> np.ndarray:
    return to_grayscale(img)[:, :, 0]


def en(fused) -> float:
    p = histogram256(_gray01(fused)[:, :, None]).probabilities()
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


def ce(fused, sources: Sequence) -> float:
    q = histogram256(_gray01(fused)[:, :, None]).probabilities() + CE_EPS
    vals = []
    for src in sources:
        p = histogram256(_gray01(src)[:, :, None]).probabilities() + CE_EPS
        vals.append(float(np.sum(p * np.log2(p / q))))
    return float(np.mean(vals))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise UndefinedMetricError("correlation undefined for a zero-variance operand")
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    denom = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if denom == 0.0:
        raise UndefinedMetricError("correlation undefined for a zero-variance operand")
    return float(np.dot(a, b)) / denom


def scd(fused, a, b) -> float:
    f, ga, gb = _gray01(fused), _gray01(a), _gray01(b)
    return pearson(f - ga, gb) + pearson(f - gb, ga)


def sd(fused) -> float:
    return float(np.std(_gray255(fused)))


def ag(fused) -> float:
    f = _gray255(fused)
    if f.shape[0] < 2 or f.shape[1] < 2:
        return 0.0
    dx = f[:-1, 1:] - f[:-1, :-1]
    dy = f[1:, :-1] - f[:-1, :-1]
    return float(np.mean(np.sqrt((dx * dx + dy * dy) / 2.0)))


def ei(fused) -> float:
    return float(np.mean(sobel_magnitude(_gray255(fused))))


def sf(fused) -> float:
    f = _gray255(fused)
    rf = math.sqrt(float(np.mean((f[:, 1:] - f[:, :-1]) ** 2))) if f.shape[1] > 1 else 0.0
    cf = math.sqrt(float(np.mean((f[1:, :] - f[:-1, :]) ** 2))) if f.shape[0] > 1 else 0.0
    return math.sqrt(rf * rf + cf * cf)


def ssim_map(x, y) -> np.ndarray:
    x, y = _gray255(x), _gray255(y)
    blur = lambda a: gaussian_blur(a, SSIM_SIGMA)  # noqa: E731
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    return ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / (
        (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    )


def ssim(fused, sources: Sequence) -> float:
    return float(np.mean([np.mean(ssim_map(fused, src)) for src in sources]))


@dataclass
class MetricRow:
    en: float
    sd: float
    ag: float
    ei: float
    sf: float
    scd: Optional[float]
    ce: float
    ssim: float
    source_ids: tuple = field(default_factory=tuple)

    def values(self) -> tuple:
        """Values in CSV column order."""
        return (self.en, self.sd, self.ag, self.ei, self.sf, self.scd, self.ce, self.ssim)

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_all(fused, sources: Sequence, source_ids: Sequence[str] = ()) -> MetricRow:
    """All eight metrics; SCD is ``None`` unless it is defined (two sources,
    non-degenerate differences)."""
    sources = list(sources)
    scd_val: Optional[float] = None
    if len(sources) == 2:
        try:
            scd_val = scd(fused, sources[0], sources[1])
        except UndefinedMetricError:
            scd_val = None
    return MetricRow(
        en=en(fused),
        sd=sd(fused),
        ag=ag(fused),
        ei=ei(fused),
        sf=sf(fused),
        scd=scd_val,
        ce=ce(fused, sources),
        ssim=ssim(fused, sources),
        source_ids=tuple(source_ids),
    )
