"""Comparison metrics between attention/error behavior and references.

Exact earth mover's distance (closed form in 1-d, min-cost flow in 2-d),
smoothed KL over error taxonomies, a contextual modulation index for
representation drift across contexts, boundary-placement variance, and
the VQA error taxonomy.
"""

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractError,
    DimensionError,
    GridTooLargeError,
    NoErrorsError,
    NumericsError,
)
from .synthdata import REFLECTED_RELATION

EMD_MAX_BINS = 256
KL_SMOOTHING = 1e-6
NORMALIZATION_TOL = 1e-9
# residual masses below this are treated as drained by the flow solver
_MASS_EPS = 1e-15

ERROR_CATEGORIES = ("wrong_attribute", "wrong_object", "wrong_relation", "other")


# ------------------------------------------------------------------ heatmaps


@dataclass(frozen=True)
class Heatmap:
    """Non-negative weights over 1-d positions or a 2-d grid."""

    bins: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.bins, dtype=np.float64)
        object.__setattr__(self, "bins", arr)
        if arr.ndim not in (1, 2) or arr.size == 0:
            raise DimensionError(f"heatmap must be a nonempty 1-d or 2-d array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ContractError("heatmap weights must be finite")
        if np.any(arr < 0):
            raise ContractError("heatmap weights must be non-negative")
        if self.normalized and abs(float(arr.sum()) - 1.0) > NORMALIZATION_TOL:
            raise ContractError(f"normalized heatmap sums to {float(arr.sum())!r}, not 1")

    @property
    def shape(self):
        return self.bins.shape

    def normalize(self) -> "Heatmap":
        total = float(self.bins.sum())
        if total <= 0.0:
            raise ContractError("cannot normalize a zero-mass heatmap")
        return Heatmap(self.bins / total, normalized=True)


def _as_normalized(x, ndim: int) -> Heatmap:
    hm = x if isinstance(x, Heatmap) else Heatmap(x, normalized=True)
    if not hm.normalized:
        raise ContractError("heatmap is not normalized; call normalize() first")
    if hm.bins.ndim != ndim:
        raise DimensionError(f"expected a {ndim}-d heatmap, got shape {hm.shape}")
    return hm


# ------------------------------------------------------------------ transport


def emd_1d(p, q, bin_width: float = 1.0) -> float:
    """Earth mover's distance between two 1-d heatmaps on a shared axis:
    sum over positions of |CDF_p - CDF_q| times the bin width."""
    hp = _as_normalized(p, 1)
    hq = _as_normalized(q, 1)
    if hp.shape != hq.shape:
        raise DimensionError(f"length mismatch: {hp.shape} vs {hq.shape}")
    if bin_width <= 0.0:
        raise ContractError("bin_width must be positive")
    return float(np.abs(np.cumsum(hp.bins - hq.bins)).sum() * bin_width)


_dist_cache: dict = {}


def _grid_distances(r: int, c: int) -> np.ndarray:
    """Euclidean distances between cell centers of an r x c unit grid,
    flattened row-major."""
    key = (r, c)
    if key not in _dist_cache:
        rows, cols = np.divmod(np.arange(r * c), c)
        dr = rows[:, None] - rows[None, :]
        dc = cols[:, None] - cols[None, :]
        _dist_cache[key] = np.sqrt(dr * dr + dc * dc)
    return _dist_cache[key]


def _transport_cost(supply: np.ndarray, demand: np.ndarray, cost: np.ndarray) -> float:
    """Exact min-cost transport by successive shortest paths with node
    potentials. Supplies and demands are positive and sum to the same
    total; `cost[i, j]` prices one unit from supply i to demand j."""
    ns, nd = cost.shape
    a = supply.astype(np.float64).copy()
    b = demand.astype(np.float64).copy()
    flow = np.zeros((ns, nd))
    pot_s = [0.0] * ns
    pot_d = [0.0] * nd
    rounds = 0
    while True:
        sources = [i for i in range(ns) if a[i] > _MASS_EPS]
        if not sources:
            break
        rounds += 1
        if rounds > 16 * (ns + nd) + 16:
            raise NumericsError("transport solver failed to drain supplies")
        ds = [math.inf] * ns
        dd = [math.inf] * nd
        from_supply = [-1] * nd  # forward-arc parent of each demand
        from_demand = [-1] * ns  # backward-arc parent of each supply; -2 marks a source
        heap = []
        for i in sources:
            ds[i] = 0.0
            from_demand[i] = -2
            heap.append((0.0, 0, i))
        heapq.heapify(heap)
        target = -1
        while heap:
            d, side, u = heapq.heappop(heap)
            if side == 0:
                if d > ds[u]:
                    continue
                row = cost[u]
                base = d + pot_s[u]
                for j in range(nd):
                    nj = base + row[j] - pot_d[j]
                    if nj < dd[j] - 1e-15:
                        dd[j] = nj
                        from_supply[j] = u
                        heapq.heappush(heap, (nj, 1, j))
            else:
                if d > dd[u]:
                    continue
                if b[u] > _MASS_EPS:
                    target = u
                    break
                base = d + pot_d[u]
                for i in range(ns):
                    if flow[i, u] > _MASS_EPS:
                        ni = base - cost[i, u] - pot_s[i]
                        if ni < ds[i] - 1e-15:
                            ds[i] = ni
                            from_demand[i] = u
                            heapq.heappush(heap, (ni, 0, i))
        if target < 0:
            raise NumericsError("transport solver found no augmenting path")
        # trace the alternating path back to a source: forward arc into each
        # demand, backward arc (a flow reduction) out of each interior supply
        dist_t = dd[target]
        path = []
        j = target
        while True:
            i = from_supply[j]
            path.append((i, j))
            if from_demand[i] == -2:
                start = i
                break
            j = from_demand[i]
        delta = min(a[start], b[target])
        for i, _ in path[:-1]:
            delta = min(delta, flow[i, from_demand[i]])
        for i, j in path:
            flow[i, j] += delta
            if from_demand[i] != -2:
                flow[i, from_demand[i]] -= delta
        a[start] -= delta
        b[target] -= delta
        # shift potentials so reduced costs stay non-negative next round
        for i in range(ns):
            pot_s[i] += min(ds[i], dist_t)
        for j in range(nd):
            pot_d[j] += min(dd[j], dist_t)
    return float((flow * cost).sum())


def emd_2d(p, q) -> float:
    """Exact earth mover's distance between two heatmaps on the same grid,
    with Euclidean distance between cell centers as the ground metric."""
    hp = _as_normalized(p, 2)
    hq = _as_normalized(q, 2)
    if hp.shape != hq.shape:
        raise DimensionError(f"grid mismatch: {hp.shape} vs {hq.shape}")
    r, c = hp.shape
    n = r * c
    if n > EMD_MAX_BINS:
        raise GridTooLargeError(n, EMD_MAX_BINS)
    pf = hp.bins.ravel()
    qf = hq.bins.ravel()
    sup = np.nonzero(pf > 0.0)[0]
    dem = np.nonzero(qf > 0.0)[0]
    dist = _grid_distances(r, c)
    return _transport_cost(pf[sup], qf[dem], dist[np.ix_(sup, dem)])


# ------------------------------------------------------------------ divergence


def kl_divergence(p, q, smoothing: float = KL_SMOOTHING) -> float:
    """KL(p || q) in nats after additive smoothing and renormalization of
    both arguments."""
    pa = np.asarray(p, dtype=np.float64)
    qa = np.asarray(q, dtype=np.float64)
    if pa.ndim != 1 or qa.ndim != 1:
        raise DimensionError("kl_divergence expects 1-d distributions")
    if pa.shape != qa.shape:
        raise ContractError(f"support mismatch: {pa.shape[0]} vs {qa.shape[0]}")
    if np.any(pa < 0) or np.any(qa < 0):
        raise ContractError("distributions must be non-negative")
    if smoothing <= 0.0:
        raise ContractError("smoothing must be positive")
    ps = pa + smoothing
    qs = qa + smoothing
    ps /= ps.sum()
    qs /= qs.sum()
    return float((ps * np.log(ps / qs)).sum())


# ------------------------------------------------------------------ context


def contextual_modulation_index(probes) -> float:
    """Mean over probes of (1 - mean pairwise cosine similarity) among each
    probe's context-conditioned vectors. 0 means contexts never move the
    representation; the ceiling is 2 (all pairs anti-parallel)."""
    if len(probes) == 0:
        raise ContractError("need at least one probe")
    scores = []
    for probe in probes:
        vecs = np.asarray(probe, dtype=np.float64)
        if vecs.ndim != 2:
            raise DimensionError(f"a probe must stack its context vectors as C x d, got {vecs.shape}")
        n = vecs.shape[0]
        if n < 2:
            raise ContractError("each probe needs at least 2 context vectors")
        norms = np.linalg.norm(vecs, axis=1)
        if np.any(norms == 0.0):
            raise ContractError("zero-norm context vector")
        sims = []
        for i in range(n):
            for j in range(i + 1, n):
                if np.array_equal(vecs[i], vecs[j]):
                    # bit-identical vectors have cosine exactly 1; computing
                    # it through sqrt would leave float dust on the index
                    sims.append(1.0)
                else:
                    sims.append(float(vecs[i] @ vecs[j] / (norms[i] * norms[j])))
        scores.append(1.0 - sum(sims) / len(sims))
    return float(sum(scores) / len(scores))


def boundary_variance(boundary_sets, core_length: int) -> float:
    """Mean over core positions of the across-context variance of the
    boundary indicator. Boundary positions are relative to the core start;
    any context-independent segmenter scores exactly 0."""
    contexts = [set(map(int, s)) for s in boundary_sets]
    if len(contexts) < 2:
        raise ContractError("boundary variance needs at least 2 contexts")
    if core_length < 1:
        raise ContractError("core span must be nonempty")
    for s in contexts:
        for t in s:
            if t < 0 or t >= core_length:
                raise ContractError(f"boundary {t} lies outside the core span [0, {core_length})")
    ind = np.zeros((len(contexts), core_length))
    for row, s in enumerate(contexts):
        for t in s:
            ind[row, t] = 1.0
    m = ind.mean(axis=0)
    return float((m * (1.0 - m)).mean())


# ------------------------------------------------------------------ error taxonomy


@dataclass
class ErrorHistogram:
    counts: dict = field(default_factory=lambda: {c: 0 for c in ERROR_CATEGORIES})

    def __post_init__(self):
        if set(self.counts) != set(ERROR_CATEGORIES):
            raise ContractError(f"histogram categories must be {ERROR_CATEGORIES}")
        if any(v < 0 for v in self.counts.values()):
            raise ContractError("error counts must be non-negative")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def as_array(self) -> np.ndarray:
        return np.array([self.counts[c] for c in ERROR_CATEGORIES], dtype=np.float64)

    def distribution(self) -> np.ndarray:
        if self.total == 0:
            raise NoErrorsError("cannot turn an empty error histogram into a distribution")
        return self.as_array() / self.total


def classify_error(item, prediction: str):
    """Category of one wrong VQA answer, or None when it is correct.

    Precedence: the target object's other attribute, then an attribute
    belonging to a different scene object, then the reflected relation,
    then other.
    """
    payload = item.payload
    truth = payload["answer"]
    if prediction == truth:
        return None
    objs = item.scene.objects
    qtype = payload["qtype"]
    if qtype in ("color", "shape"):
        target = objs[payload["target"][0]]
        other_attr = target.shape if qtype == "color" else target.color
        if prediction == other_attr:
            return "wrong_attribute"
        rest = [o for k, o in enumerate(objs) if k != payload["target"][0]]
        if any(prediction in (o.color, o.shape) for o in rest):
            return "wrong_object"
        return "other"
    if qtype == "relation":
        if any(prediction in (o.color, o.shape) for o in objs):
            return "wrong_object"
        if prediction == REFLECTED_RELATION.get(truth):
            return "wrong_relation"
        return "other"
    raise ContractError(f"unknown question type {qtype!r}")


def error_histogram(predictions, items) -> ErrorHistogram:
    """Classify every wrong answer of a toy-VQA run into the taxonomy."""
    if len(predictions) != len(items):
        raise ContractError(f"{len(predictions)} predictions for {len(items)} items")
    hist = ErrorHistogram()
    for pred, item in zip(predictions, items):
        if item.kind != "vqa":
            raise ContractError(f"error taxonomy is defined for vqa items, got {item.kind!r}")
        cat = classify_error(item, pred)
        if cat is not None:
            hist.counts[cat] += 1
    return hist
