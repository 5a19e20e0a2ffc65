"""Core domain types: regions, areas, OD matrices and the attributed area graph."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

N_DEMOGRAPHICS = 97
N_POI = 36
FEATURE_WIDTH = N_DEMOGRAPHICS + N_POI


class InvalidInputError(ValueError):
    """Raised when inputs violate a domain invariant."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RegionFeatures:
    region_id: str
    demographics: np.ndarray
    poi_counts: np.ndarray
    centroid: tuple[float, float]

    def __post_init__(self):
        demo = _frozen(self.demographics)
        poi = _frozen(self.poi_counts)
        if demo.shape != (N_DEMOGRAPHICS,):
            raise InvalidInputError(
                f"region {self.region_id!r}: expected {N_DEMOGRAPHICS} demographic values, got {demo.shape}"
            )
        if poi.shape != (N_POI,):
            raise InvalidInputError(
                f"region {self.region_id!r}: expected {N_POI} POI counts, got {poi.shape}"
            )
        if np.any(poi < 0):
            raise InvalidInputError(f"region {self.region_id!r}: negative POI count")
        x, y = (float(c) for c in self.centroid)
        if not (np.isfinite(x) and np.isfinite(y)):
            raise InvalidInputError(f"region {self.region_id!r}: non-finite centroid")
        object.__setattr__(self, "demographics", demo)
        object.__setattr__(self, "poi_counts", poi)
        object.__setattr__(self, "centroid", (x, y))

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.demographics, self.poi_counts])


def compute_distance_matrix(centroids: Sequence[tuple[float, float]]) -> np.ndarray:
    """Planar Euclidean distances (km) between region centroids."""
    xy = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    if xy.shape[0] < 1:
        raise InvalidInputError("need at least one centroid")
    if not np.all(np.isfinite(xy)):
        raise InvalidInputError("non-finite centroid coordinate")
    diff = xy[:, None, :] - xy[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(d, 0.0)
    return d


def _check_distances(d: np.ndarray, n: int) -> None:
    if d.shape != (n, n):
        raise InvalidInputError(f"distance matrix shape {d.shape} does not match {n} regions")
    if not np.all(np.isfinite(d)):
        raise InvalidInputError("non-finite distance")
    if np.any(d < 0):
        raise InvalidInputError("negative distance")
    if np.any(np.diag(d) != 0):
        raise InvalidInputError("distance matrix diagonal must be zero")
    if not np.allclose(d, d.T, rtol=1e-12, atol=1e-12):
        raise InvalidInputError("distance matrix is not symmetric")


@dataclass(frozen=True)
class AreaSpatialCharacteristics:
    """Regions of one area plus their pairwise distances.

    Region order is the canonical index order for every matrix attached
    to the area. When ``distances`` is omitted it is computed from the
    centroids; an explicit matrix takes precedence and is remembered so it
    can be written back out.
    """

    area_id: str
    regions: tuple[RegionFeatures, ...]
    distances: Optional[np.ndarray] = None
    explicit_distances: bool = field(default=False)

    def __post_init__(self):
        regions = tuple(self.regions)
        if len(regions) < 1:
            raise InvalidInputError(f"area {self.area_id!r} has no regions")
        ids = [r.region_id for r in regions]
        if len(set(ids)) != len(ids):
            raise InvalidInputError(f"area {self.area_id!r} has duplicate region ids")
        object.__setattr__(self, "regions", regions)
        if self.distances is None:
            d = compute_distance_matrix([r.centroid for r in regions])
            object.__setattr__(self, "explicit_distances", False)
        else:
            d = np.array(self.distances, dtype=np.float64)
            _check_distances(d, len(regions))
            object.__setattr__(self, "explicit_distances", True)
        d.setflags(write=False)
        object.__setattr__(self, "distances", d)

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def region_ids(self) -> list[str]:
        return [r.region_id for r in self.regions]

    @property
    def centroids(self) -> np.ndarray:
        return np.array([r.centroid for r in self.regions], dtype=np.float64)

    @property
    def feature_matrix(self) -> np.ndarray:
        return np.stack([r.features for r in self.regions])

    def permuted(self, perm: Sequence[int]) -> "AreaSpatialCharacteristics":
        perm = np.asarray(perm)
        d = self.distances[np.ix_(perm, perm)] if self.explicit_distances else None
        return AreaSpatialCharacteristics(
            self.area_id, tuple(self.regions[i] for i in perm), d
        )


@dataclass(frozen=True)
class ODMatrix:
    """Dense nonnegative flow matrix; ``flows[i, j]`` commute from region i to j."""

    flows: np.ndarray

    def __post_init__(self):
        f = _frozen(self.flows)
        report = validate_od_matrix(f, f.shape[0] if f.ndim == 2 else -1)
        if not report.ok:
            raise InvalidInputError("; ".join(report.failures))
        object.__setattr__(self, "flows", f)

    @property
    def n(self) -> int:
        return self.flows.shape[0]


@dataclass(frozen=True)
class ValidationReport:
    checks: dict[str, bool]
    failures: list[str]

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def validate_od_matrix(F, n: int) -> ValidationReport:
    """Check shape, nonnegativity and finiteness of a candidate OD matrix."""
    checks: dict[str, bool] = {}
    failures: list[str] = []
    try:
        arr = np.asarray(F, dtype=np.float64)
    except (TypeError, ValueError):
        return ValidationReport({"numeric": False}, ["not numeric"])

    checks["square"] = arr.ndim == 2 and arr.shape[0] == arr.shape[1]
    if not checks["square"]:
        failures.append(f"not square: shape {arr.shape}")
    checks["size"] = arr.ndim == 2 and arr.shape == (n, n)
    if checks["square"] and not checks["size"]:
        failures.append(f"size mismatch: expected {n}x{n}, got {arr.shape}")
    finite = np.isfinite(arr)
    checks["finite"] = bool(np.all(finite))
    if not checks["finite"]:
        failures.append("non-finite flow")
    checks["nonnegative"] = bool(np.all(arr[finite] >= 0))
    if not checks["nonnegative"]:
        failures.append("negative flow")
    return ValidationReport(checks, failures)


@dataclass(frozen=True)
class AttributedGraph:
    """Area as a complete directed graph: node features, edge weights, distances."""

    node_features: np.ndarray
    distances: np.ndarray
    edge_weights: Optional[np.ndarray] = None
    area_id: str = ""
    region_ids: tuple[str, ...] = ()

    def __post_init__(self):
        x = _frozen(self.node_features)
        d = _frozen(self.distances)
        n = x.shape[0]
        if d.shape != (n, n):
            raise InvalidInputError(f"distances shape {d.shape} inconsistent with {n} nodes")
        object.__setattr__(self, "node_features", x)
        object.__setattr__(self, "distances", d)
        if self.edge_weights is not None:
            w = _frozen(self.edge_weights)
            report = validate_od_matrix(w, n)
            if not report.ok:
                raise InvalidInputError("; ".join(report.failures))
            object.__setattr__(self, "edge_weights", w)

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    @property
    def n_edges(self) -> int:
        return 0 if self.edge_weights is None else self.edge_weights.size

    def with_node_features(self, features: np.ndarray) -> "AttributedGraph":
        return AttributedGraph(features, self.distances, self.edge_weights, self.area_id, self.region_ids)


def build_area_graph(area: AreaSpatialCharacteristics, od: Optional[ODMatrix] = None) -> AttributedGraph:
    """Build the attributed directed weighted graph of an area.

    Node ``i`` carries ``[demographics_i | poi_counts_i]``. With ``od`` absent
    the graph is a generation target and has no edge weights.
    """
    if od is not None and od.flows.shape != (area.n_regions, area.n_regions):
        raise InvalidInputError(
            f"OD shape {od.flows.shape} does not match area with {area.n_regions} regions"
        )
    return AttributedGraph(
        node_features=area.feature_matrix,
        distances=area.distances,
        edge_weights=None if od is None else od.flows,
        area_id=area.area_id,
        region_ids=tuple(area.region_ids),
    )


def deconstruct_graph(graph: AttributedGraph) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Inverse of construction: (demographics, poi_counts, flows)."""
    x = graph.node_features
    return x[:, :N_DEMOGRAPHICS], x[:, N_DEMOGRAPHICS:], graph.edge_weights
