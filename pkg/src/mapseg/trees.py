"""Histogram-based decision trees shared by the forest and both boosters.

Features are quantised once into at most ``max_bins`` bins per column
(:class:`BinMap`). Split search then works on per-node histograms of two
target sums plus a row count:

* Gini mode: ``a`` = weighted class-1 count, ``b`` = sample weight.
* Gradient mode: ``a`` = gradient, ``b`` = hessian of the binary log-loss.

Thresholds are stored as real numbers (midpoints between adjacent distinct
training values), so a fitted tree predicts on raw feature values and never
needs the bin map again. Rows go left iff ``x <= threshold``.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
import numpy as np

from mapseg.errors import ConfigError, DataError

# relative slack when comparing gains; keeps tie-breaking stable under
# different summation orders
TIE_RTOL = 1e-10
MIN_GAIN = 1e-12


@dataclass(frozen=True, eq=False)
class BinMap:
    """Per-feature ascending thresholds; bin ``i`` holds ``t[i-1] < x <= t[i]``."""

    thresholds: tuple[np.ndarray, ...]

    @property
    def n_features(self) -> int:
        return len(self.thresholds)

    def n_bins(self, feature: int) -> int:
        return len(self.thresholds[feature]) + 1

    @property
    def max_bins(self) -> int:
        return max(self.n_bins(f) for f in range(self.n_features))

    def transform(self, X: np.ndarray) -> np.ndarray:
        """Bin codes, feature-major ``(F, N)``."""
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DataError(f"expected {self.n_features} feature columns, got shape {X.shape}")
        dtype = np.uint8 if self.max_bins <= 256 else np.uint16
        codes = np.empty((self.n_features, X.shape[0]), dtype=dtype)
        for f, thr in enumerate(self.thresholds):
            codes[f] = np.searchsorted(thr, X[:, f].astype(np.float64), side="left")
        return codes


def _quantile_thresholds(uniq: np.ndarray, counts: np.ndarray, max_bins: int) -> np.ndarray:
    cum = np.cumsum(counts)
    n = cum[-1]
    targets = np.arange(1, max_bins) * (n / max_bins)
    # cut after the first distinct value whose cumulative count reaches the target
    cut = np.searchsorted(cum, targets - 1e-9, side="left")
    cut = np.unique(cut[cut < len(uniq) - 1])
    return (uniq[cut] + uniq[cut + 1]) / 2.0


def build_bins(X, max_bins: int = 256) -> BinMap:
    """Exact bins when a column has at most ``max_bins`` distinct values, quantile bins otherwise."""
    if max_bins < 2:
        raise ConfigError(f"max_bins must be >= 2, got {max_bins}")
    X = np.asarray(getattr(X, "values", X))
    if X.ndim != 2 or X.shape[0] == 0:
        raise DataError("cannot build bins for an empty matrix")
    thresholds = []
    for f in range(X.shape[1]):
        uniq, counts = np.unique(X[:, f].astype(np.float64), return_counts=True)
        if len(uniq) <= max_bins:
            thr = (uniq[:-1] + uniq[1:]) / 2.0
        else:
            thr = _quantile_thresholds(uniq, counts, max_bins)
        thresholds.append(thr)
    return BinMap(tuple(thresholds))


def grad_hess(p, y):
    """Gradient and hessian of binary log-loss w.r.t. the raw score: ``p - y``, ``p (1 - p)``."""
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    return p - y, p * (1.0 - p)


@dataclass(frozen=True)
class Gini:
    name = "gini"


@dataclass(frozen=True)
class GradGain:
    reg_lambda: float = 0.0
    reg_alpha: float = 0.0
    gamma: float = 0.0
    min_child_weight: float = 0.0
    name = "grad"

    def __post_init__(self):
        for key in ("reg_lambda", "reg_alpha", "gamma", "min_child_weight"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative, got {getattr(self, key)}")

    def shrink(self, G):
        return np.sign(G) * np.maximum(np.abs(G) - self.reg_alpha, 0.0)

    def leaf_value(self, G: float, H: float) -> float:
        denom = H + self.reg_lambda
        if denom <= 0:
            return 0.0
        return float(-self.shrink(G) / denom)


@dataclass(frozen=True, eq=False)
class Targets:
    """Per-row sums accumulated by histograms (see module docstring)."""

    a: np.ndarray
    b: np.ndarray

    @classmethod
    def for_gini(cls, y, weight=None) -> "Targets":
        y = np.asarray(y, dtype=np.float64)
        w = np.ones_like(y) if weight is None else np.asarray(weight, dtype=np.float64)
        return cls(w * y, w)

    @classmethod
    def for_grad(cls, grad, hess) -> "Targets":
        return cls(np.asarray(grad, dtype=np.float64), np.asarray(hess, dtype=np.float64))


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    gain: float
    bin: int = -1


def _gini_weighted(P, W):
    # W * gini impurity, with 0 for empty nodes
    with np.errstate(divide="ignore", invalid="ignore"):
        out = W - (P * P + (W - P) * (W - P)) / W
    return np.where(W > 0, out, 0.0)


def _split_gains(criterion, AL, BL, CL, A, B, C):
    """Gain for every candidate (broadcast); invalid candidates get -inf. Also returns a scale."""
    AR, BR, CR = A - AL, B - BL, C - CL
    valid = (CL >= 1) & (CR >= 1)
    if isinstance(criterion, Gini):
        gain = (_gini_weighted(A, B) - _gini_weighted(AL, BL) - _gini_weighted(AR, BR)) / B
        scale = np.ones_like(gain)
    else:
        lam = criterion.reg_lambda
        mcw = criterion.min_child_weight
        valid &= (BL >= mcw) & (BR >= mcw)
        with np.errstate(divide="ignore", invalid="ignore"):
            tl = criterion.shrink(AL) ** 2 / (BL + lam)
            tr = criterion.shrink(AR) ** 2 / (BR + lam)
            tp = criterion.shrink(A) ** 2 / (B + lam)
        gain = 0.5 * (tl + tr - tp) - criterion.gamma
        scale = 0.5 * (tl + tr)
    gain = np.where(valid & np.isfinite(gain), gain, -np.inf)
    return gain, scale


def _pick(gain: np.ndarray, scale: np.ndarray):
    """Index of the best candidate in row-major order with the tie rule, or None."""
    flat = gain.ravel()
    if flat.size == 0:
        return None
    best = flat.max()
    if not np.isfinite(best):
        return None
    idx = int(np.argmax(flat >= best - TIE_RTOL * max(1.0, abs(best))))
    if flat[idx] <= MIN_GAIN * max(1.0, float(scale.ravel()[idx])):
        return None
    return idx


def _histograms(codes, rows, targets: Targets, features, n_bins):
    hist = np.empty((3, len(features), n_bins), dtype=np.float64)
    ar = targets.a[rows]
    br = targets.b[rows]
    for j, f in enumerate(features):
        col = codes[f, rows]
        hist[0, j] = np.bincount(col, weights=ar, minlength=n_bins)
        hist[1, j] = np.bincount(col, weights=br, minlength=n_bins)
        hist[2, j] = np.bincount(col, minlength=n_bins)
    return hist


def _best_from_hist(hist, features, bins: BinMap, criterion):
    cum = np.cumsum(hist, axis=2)
    total = cum[:, :, -1:]
    AL, BL, CL = cum[0, :, :-1], cum[1, :, :-1], cum[2, :, :-1]
    gain, scale = _split_gains(criterion, AL, BL, CL, total[0], total[1], total[2])
    # boundaries past a feature's last real bin leave the right child empty and are
    # already invalid; mask them anyway for features with fewer bins
    for j, f in enumerate(features):
        gain[j, bins.n_bins(f) - 1:] = -np.inf
    idx = _pick(gain, scale)
    if idx is None:
        return None
    j, b = divmod(idx, gain.shape[1])
    f = int(features[j])
    return Split(f, float(bins.thresholds[f][b]), float(gain[j, b]), int(b))


def best_split(codes, bins: BinMap, rows, targets: Targets, criterion, features=None):
    """Best bin-boundary split of ``rows`` over ``features`` (default: all).

    Ties go to the lower feature index, then the lower threshold. Returns
    ``None`` when no candidate has positive gain or every candidate leaves a
    child empty or below ``min_child_weight``.
    """
    rows = np.asarray(rows)
    if features is None:
        features = np.arange(bins.n_features)
    features = np.asarray(features, dtype=np.intp)
    if rows.size < 2 or features.size == 0:
        return None
    hist = _histograms(codes, rows, targets, features, bins.max_bins)
    return _best_from_hist(hist, features, bins, criterion)


def exhaustive_split_oracle(X, rows, targets: Targets, criterion, features=None):
    """Reference split search over every midpoint of consecutive distinct raw values.

    Gains are computed from direct masked sums, independently of the
    histogram path. Slow; meant for tests.
    """
    X = np.asarray(X, dtype=np.float64)
    rows = np.asarray(rows)
    if features is None:
        features = range(X.shape[1])
    a, b = targets.a[rows], targets.b[rows]
    A, B, C = a.sum(), b.sum(), float(rows.size)
    best = None
    best_gain = -np.inf
    for f in features:
        x = X[rows, f]
        uniq = np.unique(x)
        for t in (uniq[:-1] + uniq[1:]) / 2.0:
            left = x <= t
            AL, BL, CL = a[left].sum(), b[left].sum(), float(left.sum())
            AR, BR, CR = A - AL, B - BL, C - CL
            if CL < 1 or CR < 1:
                continue
            if isinstance(criterion, Gini):
                def wg(P, W):
                    return W * (1.0 - (P / W) ** 2 - (1.0 - P / W) ** 2)
                gain = (wg(A, B) - wg(AL, BL) - wg(AR, BR)) / B
                scale = 1.0
            else:
                if BL < criterion.min_child_weight or BR < criterion.min_child_weight:
                    continue
                lam = criterion.reg_lambda

                def term(G, H):
                    s = np.sign(G) * max(abs(G) - criterion.reg_alpha, 0.0)
                    return s * s / (H + lam)

                gain = 0.5 * (term(AL, BL) + term(AR, BR) - term(A, B)) - criterion.gamma
                scale = 0.5 * (term(AL, BL) + term(AR, BR))
            if gain > best_gain + TIE_RTOL * max(1.0, abs(best_gain) if np.isfinite(best_gain) else 1.0):
                best_gain = gain
                best = (Split(int(f), float(t), float(gain)), scale)
    if best is None or best[0].gain <= MIN_GAIN * max(1.0, best[1]):
        return None
    return best[0]


@dataclass(frozen=True)
class LevelWise:
    max_depth: int | None = None


@dataclass(frozen=True)
class LeafWise:
    num_leaves: int = 31
    max_depth: int | None = None

    def __post_init__(self):
        if self.num_leaves < 1:
            raise ConfigError(f"num_leaves must be >= 1, got {self.num_leaves}")


@dataclass(eq=False)
class Tree:
    """Flat array tree. ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    cover: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depths[self.left[i]] = depths[i] + 1
                depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def apply(self, X) -> np.ndarray:
        """Leaf node index reached by each row of ``X``."""
        X = np.asarray(X)
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.arange(X.shape[0])
        while active.size:
            nd = node[active]
            inner = self.feature[nd] >= 0
            active, nd = active[inner], nd[inner]
            if not active.size:
                break
            f = self.feature[nd]
            go_left = X[active, f] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        nodes = []
        for i in range(self.n_nodes):
            if self.feature[i] < 0:
                nodes.append({"leaf": float(self.value[i]), "cover": float(self.cover[i])})
            else:
                nodes.append(
                    {
                        "f": int(self.feature[i]),
                        "t": float(self.threshold[i]),
                        "l": int(self.left[i]),
                        "r": int(self.right[i]),
                        "gain": float(self.gain[i]),
                        "cover": float(self.cover[i]),
                    }
                )
        return {"nodes": nodes}

    @classmethod
    def from_dict(cls, payload: dict) -> "Tree":
        nodes = payload["nodes"]
        n = len(nodes)
        feature = np.full(n, -1, dtype=np.int64)
        threshold = np.zeros(n)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        value = np.zeros(n)
        gain = np.zeros(n)
        cover = np.zeros(n)
        for i, nd in enumerate(nodes):
            cover[i] = nd.get("cover", 0.0)
            if "leaf" in nd:
                value[i] = nd["leaf"]
            else:
                feature[i], threshold[i] = nd["f"], nd["t"]
                left[i], right[i] = nd["l"], nd["r"]
                gain[i] = nd.get("gain", 0.0)
        return cls(feature, threshold, left, right, value, gain, cover)


class _Node:
    __slots__ = ("id", "rows", "depth", "hist", "split", "A", "B")

    def __init__(self, id, rows, depth):
        self.id, self.rows, self.depth = id, rows, depth
        self.hist = None
        self.split = None


def grow_tree(
    codes,
    bins: BinMap,
    rows,
    targets: Targets,
    criterion,
    growth=LevelWise(),
    features=None,
    features_per_split: int | None = None,
    rng: np.random.Generator | None = None,
) -> Tree:
    """Grow one tree on ``rows``.

    ``features`` restricts the candidate columns for the whole tree (column
    subsampling); ``features_per_split`` additionally draws that many of them
    at random for every node (random-forest style), using ``rng``.

    Leaf values: Gini mode stores the class-1 fraction ``A / B``; gradient
    mode stores ``-shrink(G) / (H + lambda)`` with sums taken directly over the
    leaf's rows.
    """
    rows = np.asarray(rows)
    if rows.size == 0:
        raise DataError("cannot grow a tree on zero rows")
    allowed = np.arange(bins.n_features) if features is None else np.sort(np.asarray(features, dtype=np.intp))
    if features_per_split is not None:
        if rng is None:
            raise ConfigError("features_per_split requires an rng")
        features_per_split = min(int(features_per_split), allowed.size)
        if features_per_split >= allowed.size:
            features_per_split = None
    n_bins = bins.max_bins
    subtract = features_per_split is None

    if isinstance(growth, LeafWise):
        max_depth, max_leaves = growth.max_depth, growth.num_leaves
    else:
        max_depth, max_leaves = growth.max_depth, None
    if max_depth is not None and max_depth <= 0:
        max_depth = None

    counter = 0
    records = {}  # id -> [feature, threshold, left, right, value, gain, cover]

    def new_node(node_rows, depth):
        nonlocal counter
        node = _Node(counter, node_rows, depth)
        counter += 1
        return node

    def evaluate(node):
        if node.rows.size < 2 or (max_depth is not None and node.depth >= max_depth):
            return
        if subtract:
            if node.hist is None:
                node.hist = _histograms(codes, node.rows, targets, allowed, n_bins)
            node.split = _best_from_hist(node.hist, allowed, bins, criterion)
        else:
            feats = np.sort(rng.choice(allowed, size=features_per_split, replace=False))
            node.split = best_split(codes, bins, node.rows, targets, criterion, feats)

    def finalize_leaf(node):
        A = float(targets.a[node.rows].sum())
        B = float(targets.b[node.rows].sum())
        if isinstance(criterion, Gini):
            value = A / B if B > 0 else 0.0
        else:
            value = criterion.leaf_value(A, B)
        records[node.id] = [-1, 0.0, -1, -1, value, 0.0, B]
        node.hist = None

    def do_split(node):
        s = node.split
        go_left = codes[s.feature, node.rows] <= s.bin
        left = new_node(node.rows[go_left], node.depth + 1)
        right = new_node(node.rows[~go_left], node.depth + 1)
        if subtract and node.hist is not None:
            small, large = (left, right) if left.rows.size <= right.rows.size else (right, left)
            small.hist = _histograms(codes, small.rows, targets, allowed, n_bins)
            large.hist = node.hist - small.hist
        B = float(targets.b[node.rows].sum())
        records[node.id] = [s.feature, s.threshold, left.id, right.id, 0.0, s.gain, B]
        node.hist = None
        return left, right

    root = new_node(rows, 0)
    evaluate(root)

    if max_leaves is None:
        frontier = [root]
        while frontier:
            nxt = []
            for node in frontier:
                if node.split is None:
                    finalize_leaf(node)
                    continue
                for child in do_split(node):
                    evaluate(child)
                    nxt.append(child)
            frontier = nxt
    else:
        heap = []
        leaves = {root.id: root}

        def push(node):
            if node.split is not None:
                heapq.heappush(heap, (-node.split.gain, node.id, node))

        push(root)
        n_leaves = 1
        while heap and n_leaves < max_leaves:
            _, _, node = heapq.heappop(heap)
            del leaves[node.id]
            for child in do_split(node):
                leaves[child.id] = child
                evaluate(child)
                push(child)
            n_leaves += 1
        for node in leaves.values():
            finalize_leaf(node)

    n = counter
    arr = [records[i] for i in range(n)]
    return Tree(
        feature=np.array([r[0] for r in arr], dtype=np.int64),
        threshold=np.array([r[1] for r in arr], dtype=np.float64),
        left=np.array([r[2] for r in arr], dtype=np.int64),
        right=np.array([r[3] for r in arr], dtype=np.int64),
        value=np.array([r[4] for r in arr], dtype=np.float64),
        gain=np.array([r[5] for r in arr], dtype=np.float64),
        cover=np.array([r[6] for r in arr], dtype=np.float64),
    )

