"""Evaluation metrics, per-area records and grouped aggregation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Literal, Mapping, Optional, Sequence

import numpy as np

from .graph import InvalidInputError

SMOOTHING = 1e-12
METRIC_NAMES = ("cpc", "rmse", "nrmse", "jsd_inflow", "jsd_outflow", "jsd_odflow")
DEFAULT_SIZE_BANDS = (20, 50, 100, 200, 500)
STRUCTURE_LABELS = ("monocentric", "polycentric", "others")


def _pair(F, F_hat):
    F = np.asarray(F, dtype=np.float64)
    F_hat = np.asarray(F_hat, dtype=np.float64)
    if F_hat.ndim == 0:
        F_hat = np.full_like(F, float(F_hat))
    if F.shape != F_hat.shape:
        raise InvalidInputError(f"shape mismatch: {F.shape} vs {F_hat.shape}")
    return F, F_hat


def rmse(F, F_hat) -> float:
    F, F_hat = _pair(F, F_hat)
    return float(np.sqrt(np.mean((F - F_hat) ** 2)))


def nrmse(F, F_hat) -> float:
    """RMSE over the population std of the real flows; NaN if F is constant."""
    F, F_hat = _pair(F, F_hat)
    std = float(np.sqrt(np.mean((F - F.mean()) ** 2)))
    if std == 0.0:
        return math.nan
    return rmse(F, F_hat) / std


def cpc(F, F_hat) -> float:
    """Common part of commuters; NaN when both matrices are all zero."""
    F, F_hat = _pair(F, F_hat)
    denom = F.sum() + F_hat.sum()
    if denom == 0:
        return math.nan
    return float(2.0 * np.minimum(F, F_hat).sum() / denom)


def log2_bin_index(values) -> np.ndarray:
    """Bin 0 holds exact zeros; bin k >= 1 holds [2^(k-1), 2^k), with (0, 1) folded into bin 1."""
    v = np.asarray(values, dtype=np.float64)
    idx = np.zeros(v.shape, dtype=np.int64)
    pos = v > 0
    idx[pos] = 1 + np.maximum(0, np.floor(np.log2(v[pos]))).astype(np.int64)
    return idx


def n_log2_bins(*arrays) -> int:
    top = max((float(np.max(a)) if np.size(a) else 0.0) for a in arrays)
    return int(log2_bin_index(np.array([top]))[0]) + 1


def flow_values(F, kind: str) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if kind == "inflow":
        return F.sum(axis=0)
    if kind == "outflow":
        return F.sum(axis=1)
    if kind == "odflow":
        return F.ravel()
    raise InvalidInputError(f"unknown flow kind {kind!r}")


def log2_histogram(values, n_bins: Optional[int] = None, smoothing: float = SMOOTHING) -> np.ndarray:
    idx = log2_bin_index(values)
    if n_bins is None:
        n_bins = int(idx.max(initial=0)) + 1
    counts = np.bincount(idx.ravel(), minlength=n_bins).astype(np.float64)
    if counts.size > n_bins:
        raise InvalidInputError(f"values need {counts.size} bins, only {n_bins} requested")
    counts = counts + smoothing
    return counts / counts.sum()


def flow_distribution(F, kind: str, n_bins: Optional[int] = None) -> np.ndarray:
    """Empirical distribution of in-, out- or OD flows over log2-spaced bins."""
    return log2_histogram(flow_values(F, kind), n_bins)


def kl_divergence(P, Q) -> float:
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    mask = P > 0
    with np.errstate(divide="ignore"):
        return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def jsd(P, Q, mode: Literal["paper", "mixture"] = "paper") -> float:
    """Divergence between two distributions on the same bins, in nats.

    ``paper`` averages the two directed KL divergences; ``mixture`` is the
    standard Jensen-Shannon divergence against M = (P + Q) / 2.
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise InvalidInputError(f"distribution length mismatch: {P.shape} vs {Q.shape}")
    if mode == "paper":
        return 0.5 * (kl_divergence(P, Q) + kl_divergence(Q, P))
    if mode == "mixture":
        M = 0.5 * (P + Q)
        return 0.5 * (kl_divergence(P, M) + kl_divergence(Q, M))
    raise InvalidInputError(f"unknown JSD mode {mode!r}")


def flow_jsd(F, F_hat, kind: str, mode: str = "paper") -> float:
    a, b = flow_values(F, kind), flow_values(F_hat, kind)
    n_bins = n_log2_bins(a, b)
    return jsd(log2_histogram(a, n_bins), log2_histogram(b, n_bins), mode)


@dataclass
class MetricsRecord:
    area_id: str
    cpc: float
    rmse: float
    nrmse: float
    jsd_inflow: float
    jsd_outflow: float
    jsd_odflow: float
    n_regions: int = 0
    label: Optional[str] = None

    def values(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def evaluate_area(F, F_hat, area_id: str = "", jsd_mode: str = "paper", label: Optional[str] = None) -> MetricsRecord:
    F, F_hat = _pair(F, F_hat)
    return MetricsRecord(
        area_id=area_id,
        cpc=cpc(F, F_hat),
        rmse=rmse(F, F_hat),
        nrmse=nrmse(F, F_hat),
        jsd_inflow=flow_jsd(F, F_hat, "inflow", jsd_mode),
        jsd_outflow=flow_jsd(F, F_hat, "outflow", jsd_mode),
        jsd_odflow=flow_jsd(F, F_hat, "odflow", jsd_mode),
        n_regions=F.shape[0],
        label=label,
    )


@dataclass(frozen=True)
class GroupingSpec:
    """Size bands are upper-exclusive cut points over region counts.

    ``(20, 50, 100, 200, 500)`` yields six bands: [1,20), [20,50), ...,
    [500, inf). Structure labels come from a user-supplied mapping.
    """

    size_bands: tuple[int, ...] = DEFAULT_SIZE_BANDS
    labels: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        bands = tuple(int(b) for b in self.size_bands)
        if any(b <= 1 for b in bands) or list(bands) != sorted(set(bands)):
            raise InvalidInputError(f"size bands must be strictly increasing cut points > 1, got {bands}")
        object.__setattr__(self, "size_bands", bands)

    def band_names(self) -> list[str]:
        edges = (1,) + self.size_bands
        names = [f"size[{lo},{hi})" for lo, hi in zip(edges, edges[1:])]
        names.append(f"size[{edges[-1]},inf)")
        return names

    def size_group(self, n_regions: int) -> str:
        k = int(np.searchsorted(np.asarray(self.size_bands), n_regions, side="right"))
        return self.band_names()[k]


@dataclass
class AggregateRow:
    group: str
    n_areas: int
    means: dict[str, float]
    n_undefined: dict[str, int]


def _mean_row(group: str, records: Sequence[MetricsRecord]) -> AggregateRow:
    means, undefined = {}, {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in records], dtype=np.float64)
        ok = np.isfinite(vals)
        undefined[name] = int((~ok).sum())
        # fsum is exactly rounded, so the mean does not depend on record order
        means[name] = float(math.fsum(vals[ok]) / ok.sum()) if ok.any() else math.nan
    return AggregateRow(group, len(records), means, undefined)


def aggregate(records: Iterable[MetricsRecord], grouping: Optional[GroupingSpec] = None) -> list[AggregateRow]:
    """Unweighted per-area means, overall and per size band / structure label.

    Undefined metrics (NaN) are excluded from the means and counted.
    """
    records = list(records)
    if not records:
        raise InvalidInputError("no metric records to aggregate")
    rows = [_mean_row("all", records)]
    if grouping is None:
        return rows
    for name in grouping.band_names():
        members = [r for r in records if grouping.size_group(r.n_regions) == name]
        if members:
            rows.append(_mean_row(name, members))
    if grouping.labels:
        for label in sorted({*STRUCTURE_LABELS, *grouping.labels.values()}):
            members = [r for r in records if grouping.labels.get(r.area_id, r.label) == label]
            if members:
                rows.append(_mean_row(f"label={label}", members))
    return rows


def record_as_row(record: MetricsRecord) -> dict:
    d = asdict(record)
    return {k: d[k] for k in ("area_id",) + METRIC_NAMES}
