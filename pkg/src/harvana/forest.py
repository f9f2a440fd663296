"""Regression forest over trial logs, with exact leaf-box geometry.

Trees are fitted in feature space: numeric params (continuous/integer) use
their unit-cube coordinate, categorical params their choice index. Every
leaf stores its axis-aligned box (interval per numeric dim, choice subset per
categorical dim), so marginal predictions and variance decompositions can be
computed exactly under the uniform measure instead of by sampling.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .hyperspace import Configuration, SearchSpace, Trial, derive_rng, validate_space


class ForestError(ValueError):
    pass


@dataclass
class TreeNode:
    """Internal node (split_dim set) or leaf (prediction set)."""
    split_dim: int | None = None
    split_value: float | None = None            # numeric: go left iff z < split_value
    split_subset: frozenset[int] | None = None  # categorical: go left iff index in subset
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    prediction: float | None = None
    box: tuple | None = None                    # filled on leaves: per dim (lo, hi) or frozenset

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class TreeData:
    """A fitted tree plus flattened leaf geometry for fast exact integrals."""
    root: TreeNode
    predictions: np.ndarray              # (L,)
    lo: np.ndarray                       # (L, d) numeric lower edges (cat dims unused)
    hi: np.ndarray                       # (L, d) numeric upper edges
    cat_masks: dict[int, np.ndarray]     # dim -> (L, n_choices) bool
    extents: np.ndarray                  # (L, d) per-dim extent of each leaf box
    volumes: np.ndarray                  # (L,)


@dataclass
class Forest:
    trees: list[TreeData]
    space: SearchSpace
    response: str
    n_trials: int
    seed: int | None = None

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def dims(self) -> tuple[str, ...]:
        return self.space.names


def response_value(trial: Trial, response: str) -> float:
    if response == "nu":
        return trial.nu
    if response == "f1":
        return trial.f1
    if response.startswith("per_activity_nu[") and response.endswith("]"):
        return trial.per_activity_nu[response[len("per_activity_nu["):-1]]
    raise ForestError(f"unknown response selector {response!r}")


def encode_config(space: SearchSpace, config: Configuration) -> np.ndarray:
    """Feature vector: unit coordinate for numeric dims, choice index for categorical."""
    z = np.empty(space.dim)
    for i, p in enumerate(space.params):
        v = config[p.name]
        if p.kind == "categorical":
            z[i] = p.choices.index(v)
        elif p.prior == "log":
            z[i] = math.log(v / p.lower) / math.log(p.upper / p.lower)
        else:
            z[i] = (v - p.lower) / (p.upper - p.lower)
    return z


def unit_to_feature(space: SearchSpace, dim: int, u: float) -> float:
    """Map a unit-space coordinate to feature space (cat: snap to choice index)."""
    p = space.params[dim]
    if p.kind == "categorical":
        return float(int(round(u * (p.n_choices - 1))))
    return float(u)


# ---------------------------------------------------------------------------
# fitting

def _best_numeric_split(z: np.ndarray, y: np.ndarray, min_leaf: int):
    n = len(y)
    order = np.argsort(z, kind="stable")
    zs, ys = z[order], y[order]
    counts = np.arange(1, n)
    valid = (zs[1:] != zs[:-1]) & (counts >= min_leaf) & ((n - counts) >= min_leaf)
    if not valid.any():
        return None
    csum = np.cumsum(ys)
    csq = np.cumsum(ys * ys)
    ls, lq = csum[:-1], csq[:-1]
    rs, rq = csum[-1] - ls, csq[-1] - lq
    sse = (lq - ls * ls / counts) + (rq - rs * rs / (n - counts))
    sse = np.where(valid, sse, np.inf)
    j = int(np.argmin(sse))
    parent_sse = csq[-1] - csum[-1] ** 2 / n
    gain = parent_sse - sse[j]
    thr = 0.5 * (zs[j] + zs[j + 1])
    return gain, thr


def _best_categorical_split(z: np.ndarray, y: np.ndarray, min_leaf: int):
    """Prefix split over choices ordered by mean response (optimal for SSE)."""
    idx = z.astype(int)
    choices = np.unique(idx)
    if len(choices) < 2:
        return None
    sums = np.array([y[idx == c].sum() for c in choices])
    sqs = np.array([(y[idx == c] ** 2).sum() for c in choices])
    cnts = np.array([(idx == c).sum() for c in choices])
    order = np.argsort(sums / cnts, kind="stable")
    sums, sqs, cnts, choices = sums[order], sqs[order], cnts[order], choices[order]
    n = cnts.sum()
    lc = np.cumsum(cnts)[:-1]
    ls = np.cumsum(sums)[:-1]
    lq = np.cumsum(sqs)[:-1]
    rc, rs, rq = n - lc, sums.sum() - ls, sqs.sum() - lq
    valid = (lc >= min_leaf) & (rc >= min_leaf)
    if not valid.any():
        return None
    sse = (lq - ls * ls / lc) + (rq - rs * rs / rc)
    sse = np.where(valid, sse, np.inf)
    j = int(np.argmin(sse))
    parent_sse = sqs.sum() - sums.sum() ** 2 / n
    gain = parent_sse - sse[j]
    left_choices = frozenset(int(c) for c in choices[: j + 1])
    return gain, left_choices


def _build_tree(Z: np.ndarray, y: np.ndarray, cat_dims: dict[int, int],
                max_depth: int, min_leaf: int, n_features: int,
                rng: np.random.Generator) -> TreeNode:
    d = Z.shape[1]

    def rec(rows: np.ndarray, depth: int) -> TreeNode:
        ys = y[rows]
        node = TreeNode(prediction=float(ys.mean()))
        if depth >= max_depth or len(rows) < 2 * min_leaf or np.ptp(ys) == 0.0:
            return node
        dims = rng.choice(d, size=n_features, replace=False) if n_features < d else np.arange(d)
        best = (0.0, None, None)  # gain, dim, payload
        for dim in dims:
            col = Z[rows, dim]
            if dim in cat_dims:
                res = _best_categorical_split(col, ys, min_leaf)
            else:
                res = _best_numeric_split(col, ys, min_leaf)
            if res is not None and res[0] > best[0]:
                best = (res[0], int(dim), res[1])
        if best[1] is None:
            return node
        _, dim, payload = best
        if dim in cat_dims:
            mask = np.isin(Z[rows, dim].astype(int), list(payload))
            node.split_subset = payload
        else:
            mask = Z[rows, dim] < payload
            node.split_value = float(payload)
        node.split_dim = dim
        node.prediction = None
        node.left = rec(rows[mask], depth + 1)
        node.right = rec(rows[~mask], depth + 1)
        return node

    return rec(np.arange(len(y)), 0)


def _collect_leaves(root: TreeNode, space: SearchSpace) -> TreeData:
    d = space.dim
    cat_sizes = {i: p.n_choices for i, p in enumerate(space.params) if p.kind == "categorical"}
    leaves: list[tuple[TreeNode, list]] = []

    def rec(node: TreeNode, box: list):
        if node.is_leaf:
            node.box = tuple(frozenset(b) if isinstance(b, set) else tuple(b) for b in box)
            leaves.append((node, [frozenset(b) if isinstance(b, set) else tuple(b) for b in box]))
            return
        dim = node.split_dim
        saved = box[dim]
        if node.split_subset is not None:
            left = set(saved) & set(node.split_subset)
            right = set(saved) - set(node.split_subset)
            box[dim] = left
            rec(node.left, box)
            box[dim] = right
            rec(node.right, box)
        else:
            box[dim] = (saved[0], node.split_value)
            rec(node.left, box)
            box[dim] = (node.split_value, saved[1])
            rec(node.right, box)
        box[dim] = saved

    init: list = [set(range(cat_sizes[i])) if i in cat_sizes else (0.0, 1.0) for i in range(d)]
    rec(root, init)

    L = len(leaves)
    preds = np.array([node.prediction for node, _ in leaves])
    lo = np.zeros((L, d))
    hi = np.ones((L, d))
    extents = np.ones((L, d))
    cat_masks = {dim: np.zeros((L, n), dtype=bool) for dim, n in cat_sizes.items()}
    for li, (_, box) in enumerate(leaves):
        for dim in range(d):
            if dim in cat_sizes:
                for c in box[dim]:
                    cat_masks[dim][li, c] = True
                extents[li, dim] = len(box[dim]) / cat_sizes[dim]
            else:
                lo[li, dim], hi[li, dim] = box[dim]
                extents[li, dim] = box[dim][1] - box[dim][0]
    return TreeData(root=root, predictions=preds, lo=lo, hi=hi,
                    cat_masks=cat_masks, extents=extents,
                    volumes=extents.prod(axis=1))


def forest_from_roots(space: SearchSpace, roots: Sequence[TreeNode],
                      response: str = "nu") -> Forest:
    """Wrap hand-built trees (e.g. planted splits) in a Forest."""
    trees = [_collect_leaves(r, space) for r in roots]
    return Forest(trees=trees, space=space, response=response, n_trials=0)


def fit_forest(trials: Sequence[Trial], space: SearchSpace, response: str = "nu",
               n_trees: int = 64, max_depth: int = 10, min_leaf: int = 3,
               feature_frac: float = 5 / 6, seed: int = 0,
               bootstrap: bool = True, workers: int = 1) -> Forest:
    """Fit a regression forest of axis-aligned trees by variance reduction.

    Bootstrap per tree, random feature subset of size ceil(d*feature_frac)
    per node. Deterministic for a fixed seed regardless of worker count.
    """
    validate_space(space)
    if len({t.config.key() for t in trials}) < 2:
        raise ForestError("need at least 2 trials with distinct configs")
    Z = np.stack([encode_config(space, t.config) for t in trials])
    y = np.array([response_value(t, response) for t in trials])
    d = space.dim
    cat_dims = {i: p.n_choices for i, p in enumerate(space.params) if p.kind == "categorical"}
    n_features = min(d, max(1, math.ceil(d * feature_frac)))

    def one_tree(t: int) -> TreeData:
        rng = derive_rng(seed, t)
        rows = rng.integers(0, len(y), len(y)) if bootstrap else np.arange(len(y))
        root = _build_tree(Z[rows], y[rows], cat_dims, max_depth, min_leaf, n_features, rng)
        return _collect_leaves(root, space)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trees = list(pool.map(one_tree, range(n_trees)))
    else:
        trees = [one_tree(t) for t in range(n_trees)]
    return Forest(trees=trees, space=space, response=response,
                  n_trials=len(trials), seed=seed)


# ---------------------------------------------------------------------------
# prediction

def _tree_point_predict(root: TreeNode, z: np.ndarray) -> float:
    node = root
    while not node.is_leaf:
        if node.split_subset is not None:
            node = node.left if int(z[node.split_dim]) in node.split_subset else node.right
        else:
            node = node.left if z[node.split_dim] < node.split_value else node.right
    return node.prediction


def predict(forest: Forest, Z: np.ndarray) -> np.ndarray:
    """Mean point prediction over trees; Z rows in feature space."""
    Z = np.atleast_2d(Z)
    out = np.zeros(len(Z))
    for tree in forest.trees:
        out += np.array([_tree_point_predict(tree.root, z) for z in Z])
    return out / forest.n_trees


def _tree_marginal(tree: TreeData, space: SearchSpace, fixed: dict[int, float]) -> float:
    """Exact average of the tree over all completions of the fixed dims.

    Linear in node count: descends fixed dims, splits weight across both
    children (proportionally to sub-box extent) for marginalized dims.
    """
    cat_sizes = {i: p.n_choices for i, p in enumerate(space.params) if p.kind == "categorical"}
    lo = np.zeros(space.dim)
    hi = np.ones(space.dim)
    cat_cur = {dim: set(range(n)) for dim, n in cat_sizes.items()}
    total = 0.0

    def rec(node: TreeNode, w: float):
        nonlocal total
        if w == 0.0:
            return
        if node.is_leaf:
            total += w * node.prediction
            return
        dim = node.split_dim
        if dim in fixed:
            if node.split_subset is not None:
                child = node.left if int(fixed[dim]) in node.split_subset else node.right
            else:
                child = node.left if fixed[dim] < node.split_value else node.right
            rec(child, w)
            return
        if node.split_subset is not None:
            cur = cat_cur[dim]
            left_set = cur & node.split_subset
            right_set = cur - node.split_subset
            if cur:
                cat_cur[dim] = left_set
                rec(node.left, w * len(left_set) / len(cur))
                cat_cur[dim] = right_set
                rec(node.right, w * len(right_set) / len(cur))
                cat_cur[dim] = cur
        else:
            span = hi[dim] - lo[dim]
            frac = (node.split_value - lo[dim]) / span
            saved_hi, saved_lo = hi[dim], lo[dim]
            hi[dim] = node.split_value
            rec(node.left, w * frac)
            hi[dim] = saved_hi
            lo[dim] = node.split_value
            rec(node.right, w * (1.0 - frac))
            lo[dim] = saved_lo

    rec(tree.root, 1.0)
    return total


def marginal_predict(forest: Forest, subset: Sequence[str], theta: Sequence[float]) -> float:
    """Forest marginal at unit-space values `theta` for the params in `subset`."""
    if not subset:
        raise ForestError("subset must be non-empty")
    names = list(forest.space.names)
    fixed: dict[int, float] = {}
    for name, u in zip(subset, theta, strict=True):
        if name not in names:
            raise ForestError(f"unknown param {name!r}")
        dim = names.index(name)
        if not (0.0 <= u <= 1.0):
            raise ForestError(f"theta for {name!r} outside unit bounds: {u}")
        fixed[dim] = unit_to_feature(forest.space, dim, u)
    return sum(_tree_marginal(t, forest.space, fixed) for t in forest.trees) / forest.n_trees
