"""Gravity-model baselines with power-law (GM-P) or exponential (GM-E) decay."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Literal, Optional

import numpy as np

from .graph import AreaSpatialCharacteristics, InvalidInputError, ODMatrix

DecayKind = Literal["power", "exponential"]
PARAM_NAMES = ("log_K", "alpha", "beta", "gamma")


class GravityFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class GravityParams:
    K: float
    alpha: float
    beta: float
    gamma: float
    decay_kind: DecayKind = "power"

    def __post_init__(self):
        if not self.K > 0:
            raise InvalidInputError(f"K must be positive, got {self.K}")
        if not np.isfinite(self.gamma):
            raise InvalidInputError("gamma must be finite")
        object.__setattr__(self, "decay_kind", normalize_decay(self.decay_kind))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "GravityParams":
        return cls(float(d["K"]), float(d["alpha"]), float(d["beta"]), float(d["gamma"]), d["decay_kind"])


def normalize_decay(kind: str) -> DecayKind:
    if kind in ("power", "pow", "p"):
        return "power"
    if kind in ("exponential", "exp", "e"):
        return "exponential"
    raise InvalidInputError(f"unknown decay kind {kind!r}")


def effective_distances(distances: np.ndarray, decay_kind: str) -> np.ndarray:
    """Distances as seen by the decay function.

    Power decay is singular at d=0, so zero entries (the diagonal, and any
    coincident centroids) are replaced by half the smallest positive
    distance in the area. Exponential decay uses distances unchanged.
    """
    d = np.asarray(distances, dtype=np.float64)
    if normalize_decay(decay_kind) == "exponential":
        return d
    positive = d[d > 0]
    # single-region area: no positive distance to anchor on
    fill = positive.min() / 2.0 if positive.size else 1.0
    return np.where(d > 0, d, fill)


def _decay_feature(d_eff: np.ndarray, decay_kind: DecayKind) -> np.ndarray:
    # g(d) such that log f(d) = gamma * g(d)
    return -np.log(d_eff) if decay_kind == "power" else -d_eff


def gravity_predict(params: GravityParams, masses, distances) -> ODMatrix:
    """F_ij = K * m_i^alpha * m_j^beta * f(d_ij)."""
    m = np.asarray(masses, dtype=np.float64)
    d = np.asarray(distances, dtype=np.float64)
    if m.ndim != 1 or d.shape != (m.size, m.size):
        raise InvalidInputError(f"masses {m.shape} and distances {d.shape} disagree")
    if np.any(~np.isfinite(m)) or np.any(m <= 0):
        raise InvalidInputError("masses must be positive and finite")
    d_eff = effective_distances(d, params.decay_kind)
    if params.decay_kind == "power":
        decay = d_eff ** (-params.gamma)
    else:
        decay = np.exp(-params.gamma * d_eff)
    flows = params.K * np.outer(m**params.alpha, m**params.beta) * decay
    return ODMatrix(flows)


def area_masses(area: AreaSpatialCharacteristics, mass_column: int = 0) -> np.ndarray:
    return area.feature_matrix[:, mass_column]


def _design_rows(area: AreaSpatialCharacteristics, od: ODMatrix, decay_kind: DecayKind, mass_column: int):
    m = area_masses(area, mass_column)
    F = od.flows
    if F.shape != (area.n_regions, area.n_regions):
        raise InvalidInputError(f"area {area.area_id!r}: OD shape does not match region count")
    g = _decay_feature(effective_distances(area.distances, decay_kind), decay_kind)
    ii, jj = np.nonzero(F > 0)
    keep = (m[ii] > 0) & (m[jj] > 0)
    ii, jj = ii[keep], jj[keep]
    X = np.column_stack([np.ones(ii.size), np.log(m[ii]), np.log(m[jj]), g[ii, jj]])
    y = np.log(F[ii, jj])
    return X, y


def _solve(X: np.ndarray, y: np.ndarray, decay_kind: DecayKind) -> GravityParams:
    if X.shape[0] == 0:
        raise GravityFitError("no positive flows with positive masses to fit")
    if X.shape[0] < X.shape[1]:
        raise GravityFitError(
            f"underdetermined fit: {X.shape[0]} positive flow(s) for {X.shape[1]} parameters"
        )
    # column scaling keeps the rank test meaningful across units
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    _, s, vt = np.linalg.svd(Xs, full_matrices=False)
    tol = s.max() * max(Xs.shape) * np.finfo(float).eps * 1e3
    if s.min() <= tol or np.linalg.norm(X, axis=0).min() == 0:
        null = vt[-1]
        worst = int(np.argmax(np.abs(null)))
        raise GravityFitError(f"singular design matrix: column {PARAM_NAMES[worst]!r} is collinear with the others")
    coef, *_ = np.linalg.lstsq(Xs, y, rcond=None)
    coef = coef / scale
    return GravityParams(float(np.exp(coef[0])), float(coef[1]), float(coef[2]), float(coef[3]), decay_kind)


def gravity_fit(
    data: Iterable[tuple[AreaSpatialCharacteristics, ODMatrix]],
    decay_kind: str = "power",
    mass_column: int = 0,
    per_area: bool = False,
):
    """Calibrate the four gravity parameters by log-linear least squares.

    Fits ``log F = log K + alpha log m_i + beta log m_j + gamma g(d)`` over
    every pair with positive flow, pooled across all areas. Zero flows are
    dropped. With ``per_area=True`` a separate fit is returned per area id.
    """
    kind = normalize_decay(decay_kind)
    data = list(data)
    if not data:
        raise GravityFitError("no areas to fit")
    if per_area:
        out = {}
        for area, od in data:
            X, y = _design_rows(area, od, kind, mass_column)
            out[area.area_id] = _solve(X, y, kind)
        return out
    rows = [_design_rows(area, od, kind, mass_column) for area, od in data]
    X = np.vstack([r[0] for r in rows])
    y = np.concatenate([r[1] for r in rows])
    return _solve(X, y, kind)


def predict_area(params: GravityParams, area: AreaSpatialCharacteristics, mass_column: int = 0) -> ODMatrix:
    return gravity_predict(params, area_masses(area, mass_column), area.distances)


def load_params(path) -> GravityParams:
    with open(path, encoding="utf-8") as fh:
        return GravityParams.from_dict(json.load(fh))


def save_params(params: GravityParams, path, extra: Optional[dict] = None) -> None:
    d = asdict(params)
    if extra:
        d.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(d, fh, indent=2)
        fh.write("\n")
