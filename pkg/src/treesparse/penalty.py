"""Hierarchical group norms and their proximal operators.

A :class:`GroupStructure` is a laminar family of index sets (any two groups
are disjoint or nested) with positive weights.  The proximal operator of
``lam * sum_g eta_g ||w_g||`` is obtained exactly by applying the single-group
operators from the innermost groups outwards.
"""

from __future__ import annotations

from pathlib import Path

import numba
import numpy as np

from .cluster import ClusterTree
from .io import atomic_write_text

__all__ = [
    "StructureError",
    "GroupStructure",
    "tree_groups",
    "norm_value",
    "prox_group_l2",
    "prox_group_linf",
    "project_l1_ball",
    "prox_tree",
    "prox_l1",
    "prox_weighted_l1",
    "prox_elastic_net",
    "prox_ridge",
    "prox_multitask",
    "multitask_norm",
    "FLAVORS",
]

FLAVORS = ("l2", "linf")


class StructureError(ValueError):
    """Group family is not laminar, does not cover every index, or has bad weights."""


class GroupStructure:
    """Weighted laminar family of groups over ``n_features`` coordinates.

    Parameters
    ----------
    groups : sequence of int arrays
        0-based coordinate indices of each group.
    weights : array_like
        Strictly positive weight per group.
    flavor : {"l2", "linf"}
        Norm applied inside each group.
    n_features : int, optional
        Ambient dimension; defaults to ``max index + 1``.
    """

    def __init__(self, groups, weights, flavor="l2", n_features=None, *, _forest=None):
        if flavor not in FLAVORS:
            raise ValueError(f"flavor must be one of {FLAVORS}, got {flavor!r}")
        self.flavor = flavor
        self.groups = [np.unique(np.asarray(g, dtype=np.int64)) for g in groups]
        self.weights = np.asarray(weights, dtype=float).reshape(-1)
        G = len(self.groups)
        if self.weights.shape != (G,):
            raise StructureError(f"{G} groups but {self.weights.size} weights")
        if G and not np.all(self.weights > 0):
            raise StructureError("group weights must be strictly positive")
        if any(g.size == 0 for g in self.groups):
            raise StructureError("empty group")
        top = max((int(g.max()) for g in self.groups), default=-1)
        if n_features is None:
            n_features = top + 1
        if min((int(g.min()) for g in self.groups), default=0) < 0 or top >= n_features:
            raise IndexError(f"group index out of bounds for {n_features} features")
        self.n_features = int(n_features)

        if _forest is None:
            parent, own = _laminar_forest(self.groups, self.n_features)
        else:
            parent, own = _forest
        self.parent = np.asarray(parent, dtype=np.int64)
        self.own = np.asarray(own, dtype=np.int64)
        if np.any(self.own < 0):
            missing = int(np.flatnonzero(self.own < 0)[0])
            raise StructureError(f"index {missing} is not covered by any group")

        depth = np.zeros(G, dtype=np.int64)
        for g in _topdown(self.parent):
            if self.parent[g] >= 0:
                depth[g] = depth[self.parent[g]] + 1
        self.depth = depth
        # deepest groups first, root(s) last
        self.order = np.argsort(-depth, kind="stable").astype(np.int64)
        self.perm, self.start, self.stop = _contiguous_layout(self.parent, self.own, G)

    def __len__(self):
        return len(self.groups)

    def thresholds(self, lam: float) -> np.ndarray:
        return lam * self.weights

    def to_text(self) -> str:
        """One group per line: ``eta idx1 idx2 ...`` with 1-based indices."""
        return "".join(
            "%.17g " % eta + " ".join(str(int(i) + 1) for i in g) + "\n"
            for eta, g in zip(self.weights, self.groups)
        )

    @classmethod
    def from_text(cls, text: str, flavor="l2", n_features=None) -> "GroupStructure":
        groups, weights = [], []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                weights.append(float(parts[0]))
                groups.append([int(t) - 1 for t in parts[1:]])
            except ValueError:
                raise StructureError(f"line {lineno}: malformed group line {line!r}") from None
        return cls(groups, weights, flavor, n_features)

    def write(self, path) -> None:
        atomic_write_text(path, self.to_text())


def _laminar_forest(groups, n):
    """Parent group of every group and innermost group of every index.

    Raises :class:`StructureError` when two groups overlap without nesting.
    """
    G = len(groups)
    sizes = np.array([len(g) for g in groups])
    # larger first; among equal sets the lower index is the outer one
    order = np.lexsort((np.arange(G), -sizes))
    owner = np.full(n, -1, dtype=np.int64)
    parent = np.full(G, -1, dtype=np.int64)
    for g in order:
        idx = groups[g]
        h = owner[idx]
        if np.any(h != h[0]):
            raise StructureError(f"group {g} overlaps other groups without nesting")
        parent[g] = h[0]
        owner[idx] = g
    return parent, owner


def _topdown(parent):
    """Group ids ordered so that every parent precedes its children."""
    G = len(parent)
    children = [[] for _ in range(G)]
    roots = []
    for g in range(G):
        (children[parent[g]] if parent[g] >= 0 else roots).append(g)
    out = []
    stack = roots[::-1]
    while stack:
        g = stack.pop()
        out.append(g)
        stack.extend(children[g][::-1])
    return out


def _contiguous_layout(parent, own, G):
    """Coordinate permutation in which every group is a contiguous slice."""
    children = [[] for _ in range(G)]
    roots = []
    for g in range(G):
        (children[parent[g]] if parent[g] >= 0 else roots).append(g)
    own_coords = [[] for _ in range(G)]
    for k, g in enumerate(own):
        own_coords[g].append(k)
    perm = []
    start = np.zeros(G, dtype=np.int64)
    stop = np.zeros(G, dtype=np.int64)
    stack = [(g, False) for g in roots[::-1]]
    while stack:
        g, done = stack.pop()
        if done:
            stop[g] = len(perm)
            continue
        start[g] = len(perm)
        perm.extend(own_coords[g])
        stack.append((g, True))
        stack.extend((c, False) for c in children[g][::-1])
    return np.asarray(perm, dtype=np.int64), start, stop


def tree_groups(tree: ClusterTree, rho: float, flavor="l2") -> GroupStructure:
    """One group per node (its subtree) weighted by ``rho ** depth``."""
    if rho <= 0:
        raise ValueError("rho must be > 0")
    q = tree.n_nodes
    groups = [tree.subtree(j) for j in range(q)]
    weights = float(rho) ** tree.depth.astype(float)
    gs = GroupStructure(
        groups, weights, flavor, q, _forest=(tree.parent.copy(), np.arange(q))
    )
    return gs


# ---------------------------------------------------------------------------
# single-group operators


def prox_group_l2(v, tau: float) -> np.ndarray:
    """Block soft-threshold: prox of ``tau * ||.||_2``."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    v = np.asarray(v, dtype=float)
    nrm = np.sqrt(np.dot(v, v))
    if nrm <= tau:
        return np.zeros_like(v)
    return (1.0 - tau / nrm) * v


def _l1_ball_theta(a_sorted_desc, radius):
    cs = np.cumsum(a_sorted_desc)
    j = np.arange(1, a_sorted_desc.size + 1)
    k = np.count_nonzero(a_sorted_desc - (cs - radius) / j > 0)
    return (cs[k - 1] - radius) / k


def project_l1_ball(v, radius: float) -> np.ndarray:
    """Euclidean projection onto ``{u : ||u||_1 <= radius}`` by sort-and-scan."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    v = np.asarray(v, dtype=float)
    a = np.abs(v)
    if a.sum() <= radius:
        return v.copy()
    if radius == 0:
        return np.zeros_like(v)
    theta = _l1_ball_theta(np.sort(a)[::-1], radius)
    return np.sign(v) * np.maximum(a - theta, 0.0)


def prox_group_linf(v, tau: float) -> np.ndarray:
    """Prox of ``tau * ||.||_inf`` via the Moreau decomposition."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    v = np.asarray(v, dtype=float)
    if np.abs(v).sum() <= tau:
        return np.zeros_like(v)
    return v - project_l1_ball(v, tau)


# ---------------------------------------------------------------------------
# hierarchical operators


@numba.njit(cache=True)
def _prox_l2_forest(v, own, parent, order, tau):
    G = parent.size
    sq = np.zeros(G)
    for k in range(v.size):
        sq[own[k]] += v[k] * v[k]
    fac = np.empty(G)
    for i in range(G):
        g = order[i]
        nrm = np.sqrt(sq[g])
        if nrm <= tau[g]:
            f = 0.0
        else:
            f = 1.0 - tau[g] / nrm
        fac[g] = f
        if parent[g] >= 0:
            sq[parent[g]] += f * f * sq[g]
    for i in range(G - 1, -1, -1):
        g = order[i]
        if parent[g] >= 0:
            fac[g] *= fac[parent[g]]
    out = np.empty_like(v)
    for k in range(v.size):
        out[k] = v[k] * fac[own[k]]
    return out


@numba.njit(cache=True)
def _prox_linf_forest(v, perm, start, stop, order, tau):
    u = v[perm]
    for i in range(order.size):
        g = order[i]
        s = start[g]
        e = stop[g]
        t = tau[g]
        l1 = 0.0
        for k in range(s, e):
            l1 += abs(u[k])
        if l1 <= t:
            for k in range(s, e):
                u[k] = 0.0
            continue
        if t == 0.0:
            continue
        a = -np.sort(-np.abs(u[s:e]))
        cs = 0.0
        theta = 0.0
        for j in range(a.size):
            cs += a[j]
            cand = (cs - t) / (j + 1)
            if a[j] - cand > 0:
                theta = cand
            else:
                break
        for k in range(s, e):
            if u[k] > theta:
                u[k] = theta
            elif u[k] < -theta:
                u[k] = -theta
    out = np.empty_like(v)
    out[perm] = u
    return out


@numba.njit(cache=True)
def _norm_forest(v, own, parent, order, weights, linf):
    G = parent.size
    acc = np.zeros(G)
    for k in range(v.size):
        g = own[k]
        if linf:
            a = abs(v[k])
            if a > acc[g]:
                acc[g] = a
        else:
            acc[g] += v[k] * v[k]
    total = 0.0
    for i in range(G):
        g = order[i]
        val = acc[g] if linf else np.sqrt(acc[g])
        total += weights[g] * val
        pg = parent[g]
        if pg >= 0:
            if linf:
                if acc[g] > acc[pg]:
                    acc[pg] = acc[g]
            else:
                acc[pg] += acc[g]
    return total


def _columns(w, n_features, fn):
    w = np.asarray(w, dtype=float)
    if w.shape[0] != n_features:
        raise IndexError(f"vector has {w.shape[0]} entries, structure expects {n_features}")
    if w.ndim == 1:
        return fn(np.ascontiguousarray(w))
    return np.column_stack([fn(np.ascontiguousarray(w[:, c])) for c in range(w.shape[1])])


def norm_value(w, gs: GroupStructure) -> float:
    """``sum_g eta_g ||w_g||``; a matrix is summed over its columns."""
    out = _columns(
        w, gs.n_features,
        lambda x: _norm_forest(x, gs.own, gs.parent, gs.order, gs.weights, gs.flavor == "linf"),
    )
    return float(np.sum(out))


def prox_tree(w, lam: float, gs: GroupStructure) -> np.ndarray:
    """Exact prox of ``lam * Omega`` for a laminar ``gs``.

    A (d, c) matrix is treated column by column.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    tau = gs.thresholds(lam)
    if gs.flavor == "l2":
        fn = lambda x: _prox_l2_forest(x, gs.own, gs.parent, gs.order, tau)  # noqa: E731
    else:
        fn = lambda x: _prox_linf_forest(x, gs.perm, gs.start, gs.stop, gs.order, tau)  # noqa: E731
    return _columns(w, gs.n_features, fn)


# ---------------------------------------------------------------------------
# separable operators


def prox_l1(w, lam: float) -> np.ndarray:
    if lam < 0:
        raise ValueError("lam must be >= 0")
    w = np.asarray(w, dtype=float)
    return np.sign(w) * np.maximum(np.abs(w) - lam, 0.0)


def prox_weighted_l1(w, lam: float, eta) -> np.ndarray:
    """Soft-threshold coordinate j by ``lam * eta[j]`` (``eta`` broadcasts over rows)."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    w = np.asarray(w, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if np.any(eta < 0):
        raise ValueError("weights must be >= 0")
    if w.ndim == 2 and eta.ndim == 1:
        eta = eta[:, None]
    return np.sign(w) * np.maximum(np.abs(w) - lam * eta, 0.0)


def prox_ridge(w, lam2: float) -> np.ndarray:
    """Prox of ``lam2 * ||w||_2^2``."""
    if lam2 < 0:
        raise ValueError("lam2 must be >= 0")
    return np.asarray(w, dtype=float) / (1.0 + 2.0 * lam2)


def prox_elastic_net(w, lam1: float, lam2: float) -> np.ndarray:
    """Prox of ``lam1 * ||w||_1 + lam2 * ||w||_2^2``."""
    return prox_ridge(prox_l1(w, lam1), lam2)


def _linf_prox_rows(W, tau):
    A = np.abs(W)
    l1 = A.sum(axis=1)
    zero = l1 <= tau
    S = -np.sort(-A, axis=1)
    cs = np.cumsum(S, axis=1)
    j = np.arange(1, W.shape[1] + 1)
    k = np.count_nonzero(S - (cs - tau) / j > 0, axis=1)
    k = np.maximum(k, 1)
    theta = (cs[np.arange(W.shape[0]), k - 1] - tau) / k
    theta = np.maximum(theta, 0.0)
    out = np.clip(W, -theta[:, None], theta[:, None])
    out[zero] = 0.0
    return out


def prox_multitask(W, lam: float, flavor="l2") -> np.ndarray:
    """Row-wise group prox: each row of ``W`` is one group with weight 1."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if flavor not in FLAVORS:
        raise ValueError(f"flavor must be one of {FLAVORS}, got {flavor!r}")
    W = np.asarray(W, dtype=float)
    if W.ndim != 2:
        raise ValueError("W must be a matrix")
    if lam == 0:
        return W.copy()
    if flavor == "l2":
        nrm = np.sqrt(np.einsum("ij,ij->i", W, W))
        fac = np.where(nrm <= lam, 0.0, 1.0 - lam / np.where(nrm > 0, nrm, 1.0))
        return W * fac[:, None]
    return _linf_prox_rows(W, lam)


def multitask_norm(W, flavor="l2") -> float:
    W = np.asarray(W, dtype=float)
    if flavor == "l2":
        return float(np.sqrt((W * W).sum(axis=1)).sum())
    return float(np.abs(W).max(axis=1).sum())


def read_groups(path, flavor="l2", n_features=None) -> GroupStructure:
    return GroupStructure.from_text(Path(path).read_text(), flavor, n_features)
