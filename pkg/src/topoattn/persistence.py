"""Exact capped Vietoris-Rips persistence (H0-H2) and 1-D sublevel H0.

The boundary-matrix reduction is the standard GF(2) column algorithm with
columns stored as Python integers (bitsets), which keeps the XOR chain in
C speed. Filtrations are totally ordered by (value, dimension,
lexicographic vertices); persistence bar multisets do not depend on the
refinement chosen for ties.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import CapExceeded, InvalidParameter
from .geometry import DistanceMatrix

#: Point-count cap for exact full-window persistence.
EXACT_POINT_CAP = 28
#: Default maximum-edge quantile for the capped exact path.
EXACT_EDGE_QUANTILE = 0.60
#: Additive guard in the lifetime-summary denominator.
LIFETIME_EPS = 1e-9


@dataclass
class Filtration:
    """Sorted simplex list: (vertex tuple, filtration value)."""

    simplices: list[tuple[tuple[int, ...], float]]
    max_dim: int


@dataclass
class PersistenceDiagram:
    """Bars (birth, death, dim); death may be ``numpy.inf``."""

    bars: list[tuple[float, float, int]]

    def in_dim(self, dim: int) -> "PersistenceDiagram":
        return PersistenceDiagram([b for b in self.bars if b[2] == dim])

    def finite_lifetimes(self, dim: int | None = None) -> np.ndarray:
        lifetimes = [
            d - b for (b, d, k) in self.bars if np.isfinite(d) and (dim is None or k == dim)
        ]
        return np.asarray(lifetimes, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.bars)


def _distance_values(D) -> np.ndarray:
    if isinstance(D, DistanceMatrix):
        return D.values
    return np.asarray(D, dtype=np.float64)


def rips_filtration(D, max_dim: int, max_edge: float) -> Filtration:
    """Vietoris-Rips filtration up to ``max_dim``-dimensional simplices.

    A simplex enters at the maximum pairwise distance of its vertices;
    simplices whose value exceeds ``max_edge`` are excluded. Vertices
    enter at 0. Simplices are returned sorted by (value, dimension,
    lexicographic vertices) so that faces precede cofaces.
    """
    if max_dim not in (1, 2, 3):
        raise InvalidParameter(f"max_dim must be 1, 2 or 3, got {max_dim}")
    if not max_edge > 0.0:
        raise InvalidParameter(f"max_edge must be > 0, got {max_edge}")
    values = _distance_values(D)
    n = values.shape[0]
    if n > 40 and max_dim == 3:
        raise CapExceeded(
            f"{n} points with max_dim=3 exceeds the exact-reduction budget; "
            "use capped_exact_diagrams"
        )
    adj = values <= max_edge
    np.fill_diagonal(adj, False)

    simplices: list[tuple[tuple[int, ...], float]] = [((i,), 0.0) for i in range(n)]
    frontier: list[tuple[tuple[int, ...], float]] = []
    for i in range(n):
        row = values[i]
        for j in np.nonzero(adj[i])[0]:
            if j > i:
                frontier.append(((i, int(j)), float(row[j])))
    simplices.extend(frontier)

    for _ in range(2, max_dim + 1):
        new_frontier: list[tuple[tuple[int, ...], float]] = []
        for verts, val in frontier:
            mask = adj[verts[0]].copy()
            for v in verts[1:]:
                mask &= adj[v]
            mask[: verts[-1] + 1] = False
            for w in np.nonzero(mask)[0]:
                w = int(w)
                new_val = max(val, float(values[list(verts), w].max()))
                new_frontier.append((verts + (w,), new_val))
        simplices.extend(new_frontier)
        frontier = new_frontier

    simplices.sort(key=lambda s: (s[1], len(s[0]), s[0]))
    return Filtration(simplices=simplices, max_dim=max_dim)


def _reduce_bitset_columns(columns: list[int]) -> list[tuple[int, int]]:
    """In-place GF(2) column reduction; returns the persistence pairs."""
    low_to_col: dict[int, int] = {}
    get = low_to_col.get
    pairs: list[tuple[int, int]] = []
    for j in range(len(columns)):
        col = columns[j]
        while col:
            low = col.bit_length() - 1
            k = get(low)
            if k is None:
                low_to_col[low] = j
                pairs.append((low, j))
                break
            col ^= columns[k]
        columns[j] = col
    return pairs


def _bars_from_reduction(columns, pairs, values, dims, max_hom_dim) -> PersistenceDiagram:
    paired: set[int] = set()
    bars: list[tuple[float, float, int]] = []
    for i, j in pairs:
        paired.add(i)
        paired.add(j)
        dim = dims[i]
        birth, death = values[i], values[j]
        if death > birth and dim <= max_hom_dim:
            bars.append((float(birth), float(death), int(dim)))
    for i in range(len(columns)):
        if i not in paired and columns[i] == 0 and dims[i] <= max_hom_dim:
            bars.append((float(values[i]), np.inf, int(dims[i])))
    bars.sort(key=lambda b: (b[2], b[0], b[1]))
    return PersistenceDiagram(bars=bars)


def reduce_boundary_matrix(filtration: Filtration) -> PersistenceDiagram:
    """Standard GF(2) persistence pairing of a sorted filtration.

    Returns bars for homology dimensions 0 .. max_dim - 1. Bars with
    death equal to birth are discarded; essential classes get death
    ``numpy.inf`` (one infinite H0 bar per connected component).
    """
    simplices = filtration.simplices
    index = {verts: i for i, (verts, _) in enumerate(simplices)}

    columns: list[int] = []
    for verts, _ in simplices:
        if len(verts) == 1:
            columns.append(0)
            continue
        col = 0
        for face in combinations(verts, len(verts) - 1):
            col |= 1 << index[face]
        columns.append(col)

    pairs = _reduce_bitset_columns(columns)
    values = [v for _, v in simplices]
    dims = [len(verts) - 1 for verts, _ in simplices]
    return _bars_from_reduction(columns, pairs, values, dims, filtration.max_dim - 1)


# static combinatorial structure of the full complex on n points, cached per n
_FULL_CACHE: dict[int, tuple] = {}


def _full_complex_static(n: int):
    if n in _FULL_CACHE:
        return _FULL_CACHE[n]
    simplices = [(i,) for i in range(n)]
    for k in (2, 3, 4):
        simplices.extend(combinations(range(n), k))
    index = {s: i for i, s in enumerate(simplices)}
    total = len(simplices)
    dims = np.fromiter((len(s) - 1 for s in simplices), dtype=np.int64, count=total)

    def pair_pos(i: int, j: int) -> int:  # row-major upper-triangle index
        return i * n - i * (i + 1) // 2 + (j - i - 1)

    pair_idx = np.full((total, 6), -1, dtype=np.int64)
    face_pos = np.full((total, 4), -1, dtype=np.int64)
    for si, s in enumerate(simplices):
        if len(s) < 2:
            continue
        for c, (a, b) in enumerate(combinations(s, 2)):
            pair_idx[si, c] = pair_pos(a, b)
        for c, face in enumerate(combinations(s, len(s) - 1)):
            face_pos[si, c] = index[face]
    _FULL_CACHE[n] = (dims, pair_idx, face_pos)
    return _FULL_CACHE[n]


def _full_complex_diagrams(values: np.ndarray) -> PersistenceDiagram:
    """Exact H0-H2 bars of the full (untruncated) Rips filtration.

    Equivalent to reduce_boundary_matrix(rips_filtration(values, 3, inf))
    but with the combinatorial structure cached per point count and the
    filtration values computed vectorized.
    """
    n = values.shape[0]
    dims, pair_idx, face_pos = _full_complex_static(n)
    iu = np.triu_indices(n, k=1)
    condensed = np.concatenate([values[iu], [0.0]])
    gathered = condensed[np.where(pair_idx >= 0, pair_idx, len(condensed) - 1)]
    vals = gathered.max(axis=1)
    order = np.lexsort((dims, vals))  # stable: ties keep (dim, lex) static order
    sorted_pos = np.empty(len(order), dtype=np.int64)
    sorted_pos[order] = np.arange(len(order))

    pos_list = sorted_pos.tolist()
    fp = face_pos
    columns: list[int] = []
    for static_i in order.tolist():
        col = 0
        for f in fp[static_i]:
            if f >= 0:
                col |= 1 << pos_list[f]
        columns.append(col)
    pairs = _reduce_bitset_columns(columns)
    return _bars_from_reduction(columns, pairs, vals[order], dims[order], 2)


def maxmin_landmarks(values: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Deterministic farthest-point subset of ``count`` indices (sorted)."""
    n = values.shape[0]
    rng = np.random.default_rng(seed)
    start = int(rng.integers(n))
    selected = [start]
    min_dist = values[start].copy()
    while len(selected) < count:
        nxt = int(np.argmax(min_dist))
        selected.append(nxt)
        np.minimum(min_dist, values[nxt], out=min_dist)
    return np.sort(np.asarray(selected, dtype=np.intp))


def capped_exact_diagrams(
    D,
    cap: int = EXACT_POINT_CAP,
    edge_quantile: float = EXACT_EDGE_QUANTILE,
    seed: int = 0,
) -> PersistenceDiagram:
    """Exact H0-H2 persistence on an (optionally) capped point subset.

    Clouds above ``cap`` points are reduced to a maxmin (farthest-point)
    landmark subset seeded by ``seed``; the maximum edge is the
    ``edge_quantile`` quantile of the subset's pairwise distances.
    """
    if cap < 4:
        raise InvalidParameter(f"cap must be >= 4, got {cap}")
    if not 0.0 < edge_quantile <= 1.0:
        raise InvalidParameter(f"edge_quantile must be in (0, 1], got {edge_quantile}")
    values = _distance_values(D)
    n = values.shape[0]
    if n > cap:
        idx = maxmin_landmarks(values, cap, seed)
        values = values[np.ix_(idx, idx)]
    iu = np.triu_indices(values.shape[0], k=1)
    max_edge = float(np.quantile(values[iu], edge_quantile)) if iu[0].size else 1.0
    if max_edge <= 0.0:
        max_edge = np.inf if not np.any(values[iu] > 0) else float(values[iu][values[iu] > 0].min())
    if iu[0].size and max_edge >= float(values[iu].max()):
        return _full_complex_diagrams(values)  # cached fast path, identical bars
    filtration = rips_filtration(values, max_dim=3, max_edge=max_edge)
    return reduce_boundary_matrix(filtration)


def path_sublevel_h0(series) -> PersistenceDiagram:
    """0-dimensional sublevel-set persistence of a 1-D signal.

    Union-find over values in ascending order; plateaus (consecutive
    equal values) collapse to a single vertex and equal-valued components
    merge left-to-right. The global minimum carries the infinite bar.
    """
    series = np.asarray(series, dtype=np.float64).ravel()
    if series.size == 0:
        return PersistenceDiagram(bars=[])
    # collapse plateaus so every neighbor pair differs strictly
    keep = np.ones(series.size, dtype=bool)
    keep[1:] = series[1:] != series[:-1]
    vals = series[keep]
    n = vals.size
    if n == 1:
        return PersistenceDiagram(bars=[(float(vals[0]), np.inf, 0)])

    parent = np.arange(n)

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return int(x)

    # birth of a component = (value, index) of its minimum; smaller is older
    birth = [(float(vals[i]), i) for i in range(n)]
    active = np.zeros(n, dtype=bool)
    bars: list[tuple[float, float, int]] = []
    order = np.lexsort((np.arange(n), vals))
    for idx in order:
        idx = int(idx)
        active[idx] = True
        for nb in (idx - 1, idx + 1):
            if nb < 0 or nb >= n or not active[nb]:
                continue
            ra, rb = find(idx), find(nb)
            if ra == rb:
                continue
            if birth[ra] <= birth[rb]:
                survivor, dead = ra, rb
            else:
                survivor, dead = rb, ra
            death = float(vals[idx])
            b = birth[dead][0]
            if death > b:
                bars.append((b, death, 0))
            parent[dead] = survivor
    root = find(0)
    bars.append((birth[root][0], np.inf, 0))
    bars.sort(key=lambda b: (b[0], b[1]))
    return PersistenceDiagram(bars=bars)


def lifetime_summary(dgm: PersistenceDiagram, dim: int, D) -> float:
    """log(1 + sum of finite dim-``dim`` lifetimes / (median distance + eps))."""
    if isinstance(D, DistanceMatrix):
        sigma = D.sigma
    else:
        sigma = float(D)
    lifetimes = dgm.finite_lifetimes(dim)
    return float(np.log1p(lifetimes.sum() / (sigma + LIFETIME_EPS)))


#: Length of the per-diagram feature vector.
DIAGRAM_VECTOR_LEN = 9


def vectorize_diagram(dgm: PersistenceDiagram, dim: int | None = None) -> np.ndarray:
    """Finite-lifetime statistics of one diagram as a fixed 9-vector.

    Layout: top-4 lifetimes (descending, zero-padded), total persistence,
    mean, population std, max, finite-bar count. Infinite bars contribute
    nothing; an empty diagram maps to the zero vector.
    """
    lifetimes = dgm.finite_lifetimes(dim)
    out = np.zeros(DIAGRAM_VECTOR_LEN, dtype=np.float64)
    if lifetimes.size == 0:
        return out
    top = np.sort(lifetimes)[::-1][:4]
    out[: top.size] = top
    out[4] = lifetimes.sum()
    out[5] = lifetimes.mean()
    out[6] = lifetimes.std()
    out[7] = lifetimes.max()
    out[8] = float(lifetimes.size)
    return out
