"""Corpus on-disk format, splitting, feature scaling, synthetic areas and corpus statistics.

An area lives in its own directory ``area_<id>/``::

    meta.json        {"area_id": ..., "n_regions": ..., "units": "km"}
    features.csv     region_id,d0..d96,p0..p35
    centroids.csv    region_id,x_km,y_km
    od.csv           origin_id,destination_id,flow   (absent pairs are zero)
    distances.csv    optional full matrix; overrides centroid distances
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .graph import (
    FEATURE_WIDTH,
    N_DEMOGRAPHICS,
    N_POI,
    AreaSpatialCharacteristics,
    AttributedGraph,
    InvalidInputError,
    ODMatrix,
    RegionFeatures,
    build_area_graph,
)
from .gravity import GravityParams, gravity_predict
from .metrics import log2_bin_index

FEATURE_HEADER = ["region_id"] + [f"d{i}" for i in range(N_DEMOGRAPHICS)] + [f"p{i}" for i in range(N_POI)]
CENTROID_HEADER = ["region_id", "x_km", "y_km"]
OD_HEADER = ["origin_id", "destination_id", "flow"]
STD_FLOOR = 1e-8

PathLike = Union[str, Path]


class LoadError(Exception):
    """Malformed or missing area data; names the offending file and line."""

    def __init__(self, path: PathLike, message: str, line: Optional[int] = None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


# --------------------------------------------------------------------------
# I/O


def _fmt(v: float) -> str:
    return repr(float(v))


def _read_csv(path: Path, header: Optional[list[str]] = None):
    if not path.exists():
        raise LoadError(path, "missing file")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise LoadError(path, "empty file", 1)
    if header is not None and rows[0] != header:
        raise LoadError(path, f"unexpected header {rows[0][:4]}...", 1)
    return rows


def _floats(path: Path, lineno: int, cells: Sequence[str]) -> list[float]:
    try:
        out = [float(c) for c in cells]
    except ValueError as exc:
        raise LoadError(path, f"malformed number ({exc})", lineno) from None
    if not all(math.isfinite(v) for v in out):
        raise LoadError(path, "non-finite value", lineno)
    return out


def _read_od(path: Path, index: Mapping[str, int], n: int) -> np.ndarray:
    F = np.zeros((n, n))
    rows = _read_csv(path, OD_HEADER)
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise LoadError(path, f"expected 3 fields, got {len(row)}", lineno)
        o, d = row[0], row[1]
        for rid in (o, d):
            if rid not in index:
                raise LoadError(path, f"unknown region_id {rid!r}", lineno)
        (flow,) = _floats(path, lineno, row[2:])
        if flow < 0:
            raise LoadError(path, "negative flow", lineno)
        F[index[o], index[d]] += flow
    return F


def load_area(path: PathLike) -> tuple[AreaSpatialCharacteristics, ODMatrix]:
    """Read one area directory; OD triples are expanded to a dense matrix."""
    return _load(Path(path), require_od=True)


def load_area_spatial(path: PathLike) -> AreaSpatialCharacteristics:
    """Read only the spatial characteristics; ``od.csv`` may be absent (generation targets)."""
    return _load(Path(path), require_od=False)[0]


def _load(root: Path, require_od: bool):
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise LoadError(meta_path, "missing file")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        area_id = str(meta["area_id"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise LoadError(meta_path, f"malformed metadata ({exc})") from None

    feat_path = root / "features.csv"
    feats: dict[str, list[float]] = {}
    order: list[str] = []
    for lineno, row in enumerate(_read_csv(feat_path, FEATURE_HEADER)[1:], start=2):
        if len(row) != len(FEATURE_HEADER):
            raise LoadError(feat_path, f"expected {len(FEATURE_HEADER)} fields, got {len(row)}", lineno)
        if row[0] in feats:
            raise LoadError(feat_path, f"duplicate region_id {row[0]!r}", lineno)
        vals = _floats(feat_path, lineno, row[1:])
        if any(v < 0 for v in vals[N_DEMOGRAPHICS:]):
            raise LoadError(feat_path, "negative POI count", lineno)
        feats[row[0]] = vals
        order.append(row[0])
    if not order:
        raise LoadError(feat_path, "no regions")

    cen_path = root / "centroids.csv"
    cents: dict[str, tuple[float, float]] = {}
    for lineno, row in enumerate(_read_csv(cen_path, CENTROID_HEADER)[1:], start=2):
        if len(row) != 3:
            raise LoadError(cen_path, f"expected 3 fields, got {len(row)}", lineno)
        if row[0] not in feats:
            raise LoadError(cen_path, f"unknown region_id {row[0]!r}", lineno)
        x, y = _floats(cen_path, lineno, row[1:])
        cents[row[0]] = (x, y)
    missing = [r for r in order if r not in cents]
    if missing:
        raise LoadError(cen_path, f"no centroid for region(s) {missing[:5]}")

    distances = None
    dist_path = root / "distances.csv"
    if dist_path.exists():
        rows = _read_csv(dist_path)
        if rows[0][1:] != order:
            raise LoadError(dist_path, "header must list region_ids in features.csv order", 1)
        if len(rows) - 1 != len(order):
            raise LoadError(dist_path, f"expected {len(order)} rows, got {len(rows) - 1}")
        distances = np.zeros((len(order), len(order)))
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(order) + 1 or row[0] != order[lineno - 2]:
                raise LoadError(dist_path, "malformed distance row", lineno)
            distances[lineno - 2] = _floats(dist_path, lineno, row[1:])

    regions = tuple(
        RegionFeatures(rid, feats[rid][:N_DEMOGRAPHICS], feats[rid][N_DEMOGRAPHICS:], cents[rid]) for rid in order
    )
    try:
        area = AreaSpatialCharacteristics(area_id, regions, distances)
    except InvalidInputError as exc:
        raise LoadError(dist_path if distances is not None else root, str(exc)) from None
    if int(meta.get("n_regions", area.n_regions)) != area.n_regions:
        raise LoadError(meta_path, f"n_regions={meta['n_regions']} but features.csv has {area.n_regions}")

    od_path = root / "od.csv"
    if not od_path.exists():
        if require_od:
            raise LoadError(od_path, "missing file")
        return area, None
    index = {rid: i for i, rid in enumerate(order)}
    return area, ODMatrix(_read_od(od_path, index, len(order)))


def _write_csv(path: Path, rows: Iterable[Sequence[str]]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_od_csv(path: PathLike, region_ids: Sequence[str], flows: np.ndarray) -> None:
    F = np.asarray(flows, dtype=np.float64)
    rows: list[Sequence[str]] = [OD_HEADER]
    for i, j in zip(*np.nonzero(F)):
        rows.append([region_ids[i], region_ids[j], _fmt(F[i, j])])
    _write_csv(Path(path), rows)


def read_od_csv(path: PathLike, region_ids: Sequence[str]) -> np.ndarray:
    index = {rid: i for i, rid in enumerate(region_ids)}
    return _read_od(Path(path), index, len(region_ids))


def save_area(path: PathLike, area: AreaSpatialCharacteristics, od: Optional[ODMatrix] = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"area_id": area.area_id, "n_regions": area.n_regions, "units": "km"}
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    _write_csv(
        root / "features.csv",
        [FEATURE_HEADER] + [[r.region_id] + [_fmt(v) for v in r.features] for r in area.regions],
    )
    _write_csv(
        root / "centroids.csv",
        [CENTROID_HEADER] + [[r.region_id, _fmt(r.centroid[0]), _fmt(r.centroid[1])] for r in area.regions],
    )
    if area.explicit_distances:
        ids = area.region_ids
        _write_csv(
            root / "distances.csv",
            [["region_id"] + ids] + [[rid] + [_fmt(v) for v in row] for rid, row in zip(ids, area.distances)],
        )
    if od is not None:
        write_od_csv(root / "od.csv", area.region_ids, od.flows)
    return root


def area_dir_name(area_id: str) -> str:
    return f"area_{area_id}"


def list_area_dirs(corpus_dir: PathLike) -> list[Path]:
    root = Path(corpus_dir)
    if not root.is_dir():
        raise LoadError(root, "corpus directory not found")
    return sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("area_"))


def load_corpus(corpus_dir: PathLike, area_ids: Optional[Iterable[str]] = None):
    """Load every ``area_*`` directory, sorted by name, optionally restricted to ``area_ids``."""
    wanted = None if area_ids is None else set(area_ids)
    out = []
    for d in list_area_dirs(corpus_dir):
        if wanted is not None and d.name[len("area_"):] not in wanted:
            continue
        out.append(load_area(d))
    return out


def save_corpus(corpus_dir: PathLike, data: Iterable[tuple[AreaSpatialCharacteristics, ODMatrix]]) -> Path:
    root = Path(corpus_dir)
    root.mkdir(parents=True, exist_ok=True)
    for area, od in data:
        save_area(root / area_dir_name(area.area_id), area, od)
    return root


def read_labels(path: PathLike) -> dict[str, str]:
    p = Path(path)
    rows = _read_csv(p, ["area_id", "label"])
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise LoadError(p, f"expected 2 fields, got {len(row)}", lineno)
        out[row[0]] = row[1]
    return out


# --------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class AreaInfo:
    area_id: str
    n_regions: int = 0
    label: Optional[str] = None


AreaFilter = Callable[[AreaInfo], bool]


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    seed: int
    ratios: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test),
                "seed": self.seed, "ratios": list(self.ratios)}


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    sizes = [int(math.floor(r * n + 1e-9)) for r in ratios]
    sizes[0] += n - sum(sizes)
    return tuple(sizes)  # type: ignore[return-value]


def split_corpus(
    area_ids: Sequence[str],
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    filters: Union[None, AreaFilter, Mapping[str, AreaFilter]] = None,
    info: Optional[Mapping[str, AreaInfo]] = None,
) -> CorpusSplit:
    """Seeded shuffle-and-cut split; remainders go to train.

    ``filters`` is either one predicate restricting the whole corpus, or a
    mapping from split name ("train", "val", "test") to a predicate that
    selects that split's members directly (cross-type experiments). With a
    mapping, an area matching several predicates goes to the first of
    test, val, train; a missing "val" predicate carves validation out of
    the train pool at the val:train ratio.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidInputError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    ids = sorted(dict.fromkeys(str(a) for a in area_ids))
    info = dict(info or {})

    def _info(a: str) -> AreaInfo:
        return info.get(a, AreaInfo(a))

    rng = np.random.default_rng(seed)

    if filters is None or callable(filters):
        pool = [a for a in ids if filters is None or filters(_info(a))]
        if not pool:
            raise InvalidInputError("empty corpus after filtering")
        order = [pool[i] for i in rng.permutation(len(pool))]
        n_tr, n_va, _ = split_sizes(len(order), ratios)
        return CorpusSplit(
            tuple(order[:n_tr]), tuple(order[n_tr:n_tr + n_va]), tuple(order[n_tr + n_va:]), seed, ratios
        )

    unknown = set(filters) - {"train", "val", "test"}
    if unknown:
        raise InvalidInputError(f"unknown split filter key(s) {sorted(unknown)}")
    pools: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for a in ids:
        for name in ("test", "val", "train"):
            pred = filters.get(name)
            if pred is not None and pred(_info(a)):
                pools[name].append(a)
                break
    if not any(pools.values()):
        raise InvalidInputError("empty corpus after filtering")
    shuffled = {k: [v[i] for i in rng.permutation(len(v))] for k, v in pools.items()}
    train, val = shuffled["train"], shuffled["val"]
    if "val" not in filters and train:
        frac = ratios[1] / (ratios[0] + ratios[1]) if ratios[0] + ratios[1] > 0 else 0.0
        n_va = int(math.floor(frac * len(train) + 1e-9))
        train, val = train[n_va:], train[:n_va]
    return CorpusSplit(tuple(train), tuple(val), tuple(shuffled["test"]), seed, ratios)


# --------------------------------------------------------------------------
# feature scaling


@dataclass(frozen=True)
class FeatureScaler:
    """Column z-scores, optionally of log1p(features) for count-like columns."""

    mean: np.ndarray
    std: np.ndarray
    log1p: bool = False

    def _pre(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if self.log1p:
            if np.any(X <= -1):
                raise InvalidInputError("log1p feature transform needs features > -1")
            return np.log1p(X)
        return X

    def transform(self, X) -> np.ndarray:
        return (self._pre(X) - self.mean) / self.std

    def inverse(self, Z) -> np.ndarray:
        X = np.asarray(Z, dtype=np.float64) * self.std + self.mean
        return np.expm1(X) if self.log1p else X

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "log1p": self.log1p}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureScaler":
        return cls(
            np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64), bool(d.get("log1p", False))
        )


def fit_feature_scaler(areas: Iterable[AreaSpatialCharacteristics], log1p: bool = False) -> FeatureScaler:
    """Per-column z-score statistics over all training regions pooled."""
    mats = [a.feature_matrix for a in areas]
    if not mats:
        raise InvalidInputError("need at least one training region")
    X = FeatureScaler(np.zeros(1), np.ones(1), log1p)._pre(np.vstack(mats))
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std < STD_FLOOR, 1.0, std)
    return FeatureScaler(mean, std, log1p)


def apply_scaler(scaler: FeatureScaler, area: Union[AreaSpatialCharacteristics, AttributedGraph]) -> AttributedGraph:
    graph = build_area_graph(area) if isinstance(area, AreaSpatialCharacteristics) else area
    return graph.with_node_features(scaler.transform(graph.node_features))


# --------------------------------------------------------------------------
# synthetic areas


@dataclass(frozen=True)
class SyntheticAreaSpec:
    """Gravity-generated area with a planted parameter set.

    Population mass sits in demographics column 0 and is drawn log-uniformly
    from ``mass_range``. Flows are the gravity prediction times
    ``exp(noise_level * z)`` with ``z`` standard normal.
    """

    n_regions: int
    mass_range: tuple[float, float] = (50.0, 5000.0)
    extent_km: float = 10.0
    params: GravityParams = field(default_factory=lambda: GravityParams(1e-3, 1.0, 1.0, 2.0, "power"))
    noise_level: float = 0.0
    seed: int = 0
    area_id: Optional[str] = None

    def __post_init__(self):
        lo, hi = self.mass_range
        if self.n_regions < 2:
            raise InvalidInputError("n_regions must be >= 2")
        if not 0 < lo <= hi:
            raise InvalidInputError(f"mass range must satisfy 0 < lo <= hi, got {self.mass_range}")
        if not self.extent_km > 0:
            raise InvalidInputError("extent_km must be positive")
        if self.noise_level < 0:
            raise InvalidInputError("noise_level must be nonnegative")


def generate_synthetic_area(spec: SyntheticAreaSpec) -> tuple[AreaSpatialCharacteristics, ODMatrix]:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_regions
    lo, hi = spec.mass_range
    centroids = rng.uniform(0.0, spec.extent_km, size=(n, 2))
    masses = np.exp(rng.uniform(np.log(lo), np.log(hi), size=n))
    # remaining demographics: mass split into random shares, like census sub-counts
    shares = rng.dirichlet(np.ones(N_DEMOGRAPHICS - 1), size=n)
    demographics = np.column_stack([masses, masses[:, None] * shares])
    poi = rng.poisson(masses[:, None] / 500.0 * rng.uniform(0.1, 2.0, size=N_POI)).astype(np.float64)

    area_id = spec.area_id if spec.area_id is not None else f"syn{spec.seed}"
    regions = tuple(
        RegionFeatures(f"r{i}", demographics[i], poi[i], (centroids[i, 0], centroids[i, 1])) for i in range(n)
    )
    area = AreaSpatialCharacteristics(area_id, regions)
    flows = gravity_predict(spec.params, area.feature_matrix[:, 0], area.distances).flows
    if spec.noise_level > 0:
        flows = flows * np.exp(spec.noise_level * rng.standard_normal((n, n)))
    return area, ODMatrix(np.maximum(flows, 0.0))


def generate_synthetic_corpus(
    n_areas: int,
    n_range: tuple[int, int] = (5, 15),
    seed: int = 0,
    **spec_kwargs,
) -> list[tuple[AreaSpatialCharacteristics, ODMatrix]]:
    """Independent synthetic areas with region counts uniform in ``n_range`` (inclusive)."""
    children = np.random.SeedSequence(seed).spawn(n_areas)
    out = []
    for k, child in enumerate(children):
        sub = int(child.generate_state(1)[0])
        n = int(np.random.default_rng(sub).integers(n_range[0], n_range[1] + 1))
        spec = SyntheticAreaSpec(n_regions=n, seed=sub, area_id=f"syn{k:04d}", **spec_kwargs)
        out.append(generate_synthetic_area(spec))
    return out


# --------------------------------------------------------------------------
# corpus statistics


@dataclass
class CorpusStats:
    per_area: list[dict]
    region_count_hist: dict[int, int]
    edge_weight_bins: list[str]
    edge_weight_cdf: list[float]
    degree_bins: list[str]
    inflow_pdf: list[float]
    outflow_pdf: list[float]
    n_undefined_trip_distance: int

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["region_count_hist"] = {str(k): v for k, v in self.region_count_hist.items()}
        return d


def average_trip_distance(F, d) -> float:
    F = np.asarray(F, dtype=np.float64)
    total = F.sum()
    if total == 0:
        return math.nan
    return float((F * np.asarray(d, dtype=np.float64)).sum() / total)


def _bin_labels(n_bins: int) -> list[str]:
    labels = ["0"]
    for k in range(1, n_bins):
        lo = 0 if k == 1 else 2 ** (k - 1)
        labels.append(f"({lo},{2 ** k})" if k == 1 else f"[{lo},{2 ** k})")
    return labels


def _hist(values: np.ndarray, n_bins: int) -> np.ndarray:
    if values.size == 0:
        return np.zeros(n_bins)
    counts = np.bincount(log2_bin_index(values), minlength=n_bins).astype(np.float64)
    return counts / counts.sum()


def corpus_stats(data: Iterable[tuple[AreaSpatialCharacteristics, ODMatrix]]) -> CorpusStats:
    """Region counts, flow-weighted trip distances, flow variances and log2 histograms.

    Areas with all-zero flows report ``avg_trip_distance`` as None and are
    left out of the corpus-level histograms.
    """
    data = list(data)
    if not data:
        raise InvalidInputError("need at least one area")
    per_area, weights, inflows, outflows = [], [], [], []
    undefined = 0
    region_counts: dict[int, int] = {}
    for area, od in data:
        F = od.flows
        region_counts[area.n_regions] = region_counts.get(area.n_regions, 0) + 1
        atd = average_trip_distance(F, area.distances)
        inflow, outflow = F.sum(axis=0), F.sum(axis=1)
        per_area.append({
            "area_id": area.area_id,
            "n_regions": area.n_regions,
            "avg_trip_distance": None if math.isnan(atd) else atd,
            "inflow_variance": float(inflow.var()),
            "outflow_variance": float(outflow.var()),
        })
        if math.isnan(atd):
            undefined += 1
            continue
        weights.append(F.ravel())
        inflows.append(inflow)
        outflows.append(outflow)

    w = np.concatenate(weights) if weights else np.zeros(0)
    n_w = int(log2_bin_index(np.array([w.max(initial=0.0)]))[0]) + 1
    cdf = np.cumsum(_hist(w, n_w))
    if w.size:
        cdf[-1] = 1.0
    deg_in = np.concatenate(inflows) if inflows else np.zeros(0)
    deg_out = np.concatenate(outflows) if outflows else np.zeros(0)
    n_d = int(log2_bin_index(np.array([max(deg_in.max(initial=0.0), deg_out.max(initial=0.0))]))[0]) + 1
    return CorpusStats(
        per_area=per_area,
        region_count_hist=dict(sorted(region_counts.items())),
        edge_weight_bins=_bin_labels(n_w),
        edge_weight_cdf=cdf.tolist(),
        degree_bins=_bin_labels(n_d),
        inflow_pdf=_hist(deg_in, n_d).tolist(),
        outflow_pdf=_hist(deg_out, n_d).tolist(),
        n_undefined_trip_distance=undefined,
    )


__all__ = [
    "FEATURE_WIDTH",
    "LoadError",
    "load_area",
    "save_area",
    "load_corpus",
    "save_corpus",
    "split_corpus",
    "CorpusSplit",
    "FeatureScaler",
    "fit_feature_scaler",
    "apply_scaler",
    "SyntheticAreaSpec",
    "generate_synthetic_area",
    "generate_synthetic_corpus",
    "CorpusStats",
    "corpus_stats",
]
