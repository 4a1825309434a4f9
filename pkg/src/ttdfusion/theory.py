"""Empirical checks of the generalization-bound machinery.

Expectations over the data distribution are estimated by pooling pixels.
Covariances are population covariances (divide by n), which makes
``E[w * l] = E[w] E[l] + Cov(w, l)`` an exact identity on the pooled pixels.
All reductions use ``math.fsum`` so that results do not depend on the order
in which items are processed.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .codec import CodecSpec, ToyNetParams, reconstruct
from .engine import RD, WeightForm, fusion_loss, run_pipeline
from .metrics import CSV_COLUMNS, evaluate_all
from .parallel import pmap

CONVEXITY_TOL = 1e-9
BOUND_TOL = 1e-6
SIMPLEX_TOL = 1e-9


def _fmean(values) -> float:
    values = np.asarray(values, dtype=np.float64).ravel()
    return math.fsum(values.tolist()) / values.size


def pooled_covariance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or a.size != b.size:
        raise ValueError("covariance needs two non-empty, equally sized samples")
    # shift by the first element: a constant field gives exact zeros
    da = a - a[0]
    db = b - b[0]
    ma, mb = _fmean(da), _fmean(db)
    return math.fsum(((da - ma) * (db - mb)).tolist()) / a.size


def pixel_covariance(weights: Sequence[np.ndarray], losses: Sequence[Sequence[np.ndarray]], m: int) -> float:
    """Cov(w_m, l_m) pooled over all pixels of all items.

    ``weights[j]`` is item j's ``(H, W, M)`` weight map and ``losses[j][m]``
    its ``(H, W)`` loss map for source m.
    """
    if not weights or len(weights) != len(losses):
        raise ValueError("need aligned, non-empty weight and loss sequences")
    w = np.concatenate([np.asarray(wm)[:, :, m].ravel() for wm in weights])
    l = np.concatenate([np.asarray(lm[m]).ravel() for lm in losses])
    return pooled_covariance(w, l)


def _norm(diff: np.ndarray, norm: str) -> float:
    if norm == "mae":
        return float(np.mean(np.abs(diff)))
    if norm == "rms":
        return float(np.sqrt(np.mean(diff * diff)))
    raise ValueError(f"unknown norm {norm!r}")


def convexity_check(components: Sequence[np.ndarray], x: np.ndarray, weights, norm: str = "mae"):
    """``(lhs, rhs, holds)`` for ``||sum_i w_i y_i - x|| <= sum_i ||w_i (y_i - x)||``.

    ``weights`` is a length-M simplex vector or an ``(H, W, M)`` per-pixel map
    summing to one at every pixel.
    """
    x = np.asarray(x, dtype=np.float64)
    ys = [np.asarray(y, dtype=np.float64) for y in components]
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        if w.size != len(ys):
            raise ValueError("weight vector length does not match component count")
        if np.any(w < 0) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError("weights are not on the probability simplex")
        planes = [np.full(x.shape[:2], wi) for wi in w]
    else:
        if w.shape[:2] != x.shape[:2] or w.shape[-1] != len(ys):
            raise ValueError("weight map shape does not match components")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
            raise ValueError("weight map is not on the simplex at every pixel")
        planes = [w[:, :, i] for i in range(len(ys))]
    if x.ndim == 3:
        planes = [p[:, :, None] for p in planes]
    mix = sum(p * y for p, y in zip(planes, ys))
    lhs = _norm(mix - x, norm)
    rhs = math.fsum(_norm(p * (y - x), norm) for p, y in zip(planes, ys))
    return lhs, rhs, lhs <= rhs + CONVEXITY_TOL


@dataclass
class GebItem:
    loss: float
    convex_rhs: float
    own: list  # E l(x_com^m, x^m) per source
    cross: list  # sum_{i != m} E l(x_com^i, x^m) per source
    cov: list  # pixel covariance per source
    constant: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.loss <= self.bound + BOUND_TOL


@dataclass
class GebReport:
    strategy: str
    m: int
    items: list = field(default_factory=list)
    pooled_cov: list = field(default_factory=list)
    constant: float = 0.0
    mean_loss: float = 0.0

    @property
    def violations(self) -> int:
        return sum(not it.holds for it in self.items)

    @property
    def dataset_bound(self) -> float:
        return self.constant + math.fsum(self.pooled_cov)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["strategy", "item", "fusion_loss", "convex_rhs", "constant", "bound", "holds"]
        header += [f"cov_{m}" for m in range(self.m)]
        header += [f"own_{m}" for m in range(self.m)] + [f"cross_{m}" for m in range(self.m)]
        writer.writerow(header)
        for j, it in enumerate(self.items):
            writer.writerow([self.strategy, j, repr(it.loss), repr(it.convex_rhs), repr(it.constant),
                             repr(it.bound), int(it.holds)]
                            + [repr(v) for v in it.cov] + [repr(v) for v in it.own]
                            + [repr(v) for v in it.cross])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [
            f"strategy: {self.strategy}",
            f"items: {len(self.items)}",
            f"mean fusion loss: {self.mean_loss:.9g}",
            f"constant term C: {self.constant:.9g}",
        ]
        lines += [f"pooled Cov(w_{m}, l_{m}): {c:.9g}" for m, c in enumerate(self.pooled_cov)]
        lines += [
            f"dataset bound C + sum Cov: {self.dataset_bound:.9g}",
            f"per-item bound violations: {self.violations}",
        ]
        return "\n".join(lines) + "\n"


def _geb_item(spec, params, sources, form, force):
    m_count = len(sources)
    result = run_pipeline(spec, params, sources, form, force=force)
    comps = [reconstruct(spec, params, x) for x in sources]
    dist = [[np.abs(comps[i] - sources[m]).mean(axis=2) for m in range(m_count)] for i in range(m_count)]
    own = [_fmean(dist[m][m]) for m in range(m_count)]
    cross = [math.fsum(_fmean(dist[i][m]) for i in range(m_count) if i != m) for m in range(m_count)]
    cov = [pooled_covariance(result.weights[:, :, m], result.losses[m]) for m in range(m_count)]
    convex_rhs = math.fsum(
        _fmean(result.weights[:, :, i] * dist[i][m]) for m in range(m_count) for i in range(m_count)
    )
    constant = math.fsum(
        (2 * m_count - 1) / m_count * own[m] + (m_count - 1) / m_count * cross[m] for m in range(m_count)
    )
    item = GebItem(
        loss=fusion_loss(result.fused, sources, "mae"),
        convex_rhs=convex_rhs,
        own=own,
        cross=cross,
        cov=cov,
        constant=constant,
        bound=constant + math.fsum(cov),
    )
    return item, result


def geb_decomposition(dataset: Sequence[Sequence[np.ndarray]], spec: CodecSpec,
                      params: Optional[ToyNetParams], form: WeightForm = RD,
                      force: bool = False, jobs: int = 1) -> GebReport:
    """Decompose the mean-absolute fusion loss into constant and covariance terms.

    Per item, ``bound = sum_m [(2M-1)/M E l_mm + (M-1)/M sum_{i!=m} E l_im
    + Cov(w_m, l_m)]`` with expectations and covariances over that item's
    pixels; ``l_im`` is the distance between source i's uni-source component
    and source m.  The report also holds dataset-pooled covariances.
    """
    if not dataset:
        raise ValueError("empty dataset")
    m_count = len(dataset[0])
    if m_count < 2:
        raise ValueError("need at least two sources per item")
    outs = pmap(lambda item: _geb_item(spec, params, item, form, force), dataset, jobs)
    items = [o[0] for o in outs]
    weights = [o[1].weights for o in outs]
    losses = [o[1].losses for o in outs]
    return GebReport(
        strategy=form.label,
        m=m_count,
        items=items,
        pooled_cov=[pixel_covariance(weights, losses, m) for m in range(m_count)],
        constant=math.fsum(it.constant for it in items) / len(items),
        mean_loss=math.fsum(it.loss for it in items) / len(items),
    )


@dataclass
class StrategyRow:
    strategy: str
    losses: np.ndarray  # per-item fusion loss
    metrics: dict  # metric name -> mean over items (SCD over defined items)

    @property
    def mean_loss(self) -> float:
        return math.fsum(self.losses.tolist()) / len(self.losses)

    @property
    def se_loss(self) -> float:
        if len(self.losses) < 2:
            return 0.0
        return float(np.std(self.losses, ddof=1) / math.sqrt(len(self.losses)))


def paired_margin(better: StrategyRow, worse: StrategyRow) -> tuple[float, float]:
    """Mean and standard error over items of ``worse.loss - better.loss``."""
    diff = worse.losses - better.losses
    mean = math.fsum(diff.tolist()) / len(diff)
    se = float(np.std(diff, ddof=1) / math.sqrt(len(diff))) if len(diff) > 1 else 0.0
    return mean, se


def _strategy_item(spec, params, sources, form, norm, force, with_metrics):
    res = run_pipeline(spec, params, sources, form, force=force)
    loss = fusion_loss(res.fused, sources, norm)
    row = evaluate_all(res.fused, sources) if with_metrics else None
    return loss, row


def compare_strategies(dataset: Sequence[Sequence[np.ndarray]], spec: CodecSpec,
                       params: Optional[ToyNetParams], forms: Sequence[WeightForm],
                       norm: str = "mae", metrics: bool = True, force_unnormalized: bool = False,
                       jobs: int = 1) -> list[StrategyRow]:
    """One row per strategy, in the order given."""
    if not dataset:
        raise ValueError("empty dataset")
    if len(forms) < 2:
        raise ValueError("compare at least two strategies")
    rows = []
    for form in forms:
        force = force_unnormalized and form.norm == "none"
        outs = pmap(lambda item: _strategy_item(spec, params, item, form, norm, force, metrics), dataset, jobs)
        losses = np.array([o[0] for o in outs])
        means = {}
        if metrics:
            for col in CSV_COLUMNS:
                vals = [getattr(o[1], col.lower()) for o in outs]
                vals = [v for v in vals if v is not None]
                means[col] = math.fsum(vals) / len(vals) if vals else None
        rows.append(StrategyRow(form.label, losses, means))
    return rows


def strategies_csv(rows: Sequence[StrategyRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["strategy", "mean_fusion_loss", "se_fusion_loss", *CSV_COLUMNS])
    for r in rows:
        writer.writerow([r.strategy, repr(r.mean_loss), repr(r.se_loss)]
                        + ["" if r.metrics.get(c) is None else repr(r.metrics[c]) for c in CSV_COLUMNS])
    return buf.getvalue()
