"""Dyadic-tree cascade model.

Each node ``j`` with parent ``p`` and offspring set ``O_j`` evolves as::

    dX_j/dt = alpha * (c_j X_p^2 - sum_{k in O_j} c_k X_j X_k)
              - beta * (d_p X_p X_j - sum_{k in O_j} d_j X_k^2)

with the root's ghost parent value taken as 0.  The energy ``sum_j X_j^2`` is
conserved for any coefficients.  The Jacobian trace is
``-sum_m (alpha c_m + beta |O_m| d_m) X_m``, so the product Gaussian measure
is invariant exactly when ``alpha c_m + beta |O_m| d_m = 0`` on every node.
:func:`make_tree_params` builds ``d`` that way by default; the rule
``d = (alpha / beta) c`` is kept as ``d_rule="proportional"`` for comparison.

Nodes are stored in level order (parents before children, stable within a
level), so the topology of a regular tree of depth ``N`` is a prefix of the
one of depth ``N + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, ParameterError
from .field import PolynomialField

DEFAULT_NODE_BUDGET = 2_000_000


@dataclass(frozen=True, eq=False)
class TreeTopology:
    ids: np.ndarray
    level: np.ndarray
    parent: np.ndarray  # position of the parent, -1 for the root
    M: int

    def __post_init__(self):
        level = np.asarray(self.level, dtype=np.int64)
        parent = np.asarray(self.parent, dtype=np.int64)
        ids = np.asarray(self.ids, dtype=np.int64)
        Q = level.size
        if Q == 0 or ids.size != Q or parent.size != Q:
            raise ParameterError("topology arrays must be nonempty and of equal length")
        roots = np.flatnonzero(parent < 0)
        if roots.size != 1 or roots[0] != 0 or level[0] != 0:
            raise ParameterError("exactly one root, stored first at level 0, is required")
        if np.any(parent[1:] >= np.arange(1, Q)):
            raise ParameterError("nodes must be stored with parents before children")
        if np.any(level[1:] != level[parent[1:]] + 1):
            raise ParameterError("every node's level must be its parent's level + 1")
        if np.any(np.diff(level) < 0):
            raise ParameterError("nodes must be stored in level order")
        if np.unique(ids).size != Q:
            raise ParameterError("node ids must be unique")
        counts = np.bincount(parent[1:], minlength=Q)
        if counts.max(initial=0) > self.M:
            raise ParameterError(f"a node has {counts.max()} children, more than M={self.M}")
        for name, arr in (("ids", ids), ("level", level), ("parent", parent)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_n_children", counts)

    @property
    def Q(self) -> int:
        return int(self.level.size)

    @property
    def depth(self) -> int:
        return int(self.level.max())

    @property
    def n_children(self) -> np.ndarray:
        return self._n_children

    def children(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.parent == j)

    def child_matrix(self) -> sp.csr_matrix:
        """Sparse ``C`` with ``C[j, k] = 1`` when ``k`` is a child of ``j``."""
        kids = np.arange(1, self.Q)
        return sp.csr_matrix(
            (np.ones(kids.size), (self.parent[1:], kids)), shape=(self.Q, self.Q)
        )

    def to_text(self) -> str:
        ids = self.ids
        lines = []
        for pos in range(self.Q):
            par = -1 if self.parent[pos] < 0 else int(ids[self.parent[pos]])
            lines.append(f"{int(ids[pos])} {int(self.level[pos])} {par}\n")
        return "".join(lines)

    @classmethod
    def from_text(cls, text: str, M: int | None = None) -> "TreeTopology":
        """Parse ``id level parent_id`` lines (root has parent ``-1``)."""
        rows = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ParameterError(f"line {lineno}: expected 'id level parent_id'")
            try:
                rows.append(tuple(int(p) for p in parts))
            except ValueError:
                raise ParameterError(f"line {lineno}: non-integer field") from None
        if not rows:
            raise ParameterError("empty topology")
        order = sorted(range(len(rows)), key=lambda r: rows[r][1])
        ids = [rows[r][0] for r in order]
        pos = {node_id: p for p, node_id in enumerate(ids)}
        if len(pos) != len(ids):
            raise ParameterError("duplicate node ids")
        parent = []
        for r in order:
            par = rows[r][2]
            if par == -1:
                parent.append(-1)
            elif par in pos:
                parent.append(pos[par])
            else:
                raise ParameterError(f"node {rows[r][0]} references unknown parent {par}")
        level = [rows[r][1] for r in order]
        counts = np.bincount([p for p in parent if p >= 0], minlength=len(ids))
        bound = int(counts.max(initial=0)) if M is None else M
        return cls(np.array(ids), np.array(level), np.array(parent), max(bound, 1))


def make_regular_tree(branching: int, depth: int, max_nodes: int = DEFAULT_NODE_BUDGET) -> TreeTopology:
    """Complete ``branching``-ary tree with levels ``0..depth``."""
    if branching < 1 or depth < 0:
        raise ParameterError("branching must be >= 1 and depth >= 0")
    Q = sum(branching**lvl for lvl in range(depth + 1))
    if Q > max_nodes:
        raise ParameterError(f"tree would have {Q} nodes, over the budget of {max_nodes}")
    level = np.repeat(np.arange(depth + 1), [branching**lvl for lvl in range(depth + 1)])
    parent = np.empty(Q, dtype=np.int64)
    parent[0] = -1
    parent[1:] = (np.arange(1, Q) - 1) // branching
    return TreeTopology(np.arange(Q), level, parent, branching)


@dataclass(frozen=True, eq=False)
class TreeParams:
    topology: TreeTopology
    alpha: float
    beta: float
    c: np.ndarray
    d: np.ndarray
    lam: float

    def __post_init__(self):
        if self.beta == 0:
            raise ParameterError("beta must be nonzero")
        Q = self.topology.Q
        for name in ("c", "d"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != (Q,) or not np.all(np.isfinite(arr)):
                raise ParameterError(f"{name} must be {Q} finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return self.topology.Q

    def coupling_defect(self) -> np.ndarray:
        """Per-node ``alpha c_m + beta |O_m| d_m``; all zeros iff the Gaussian is invariant."""
        return self.alpha * self.c + self.beta * self.topology.n_children * self.d

    def with_d(self, updates) -> "TreeParams":
        d = np.array(self.d)
        for j, value in dict(updates).items():
            d[j] = value
        return TreeParams(self.topology, self.alpha, self.beta, self.c, d, self.lam)

    def field(self) -> PolynomialField:
        top, a, b, c, d = self.topology, self.alpha, self.beta, self.c, self.d
        terms = []
        for j in range(top.Q):
            p = top.parent[j]
            if p >= 0:
                terms.append((j, p, p, a * c[j]))
                terms.append((j, p, j, -b * d[p]))
            for kid in top.children(j):
                terms.append((j, j, kid, -a * c[kid]))
                terms.append((j, kid, kid, b * d[j]))
        stiff = max(abs(a), abs(b)) * float(self.lam) ** max(top.depth, 1)
        return PolynomialField.quadratic(top.Q, terms, stiffness=stiff)

    def as_dict(self) -> dict:
        return {
            "model": "tree",
            "topology": self.topology.to_text(),
            "alpha": float(self.alpha),
            "beta": float(self.beta),
            "lambda": float(self.lam),
            "c": self.c.tolist(),
            "d": self.d.tolist(),
        }


def make_tree_params(
    topology: TreeTopology, alpha: float, beta: float, lam: float, d_rule: str = "divergence_free"
) -> TreeParams:
    """Geometric coefficients ``c_j = lam**|j|`` on levels ``1..N-1``, zero elsewhere.

    ``d_rule="divergence_free"`` sets ``d_j = -alpha c_j / (beta |O_j|)`` so the
    Gaussian product measure is invariant; ``"proportional"`` sets
    ``d_j = (alpha / beta) c_j``, which conserves energy but not the measure.
    """
    if beta == 0:
        raise ParameterError("beta must be nonzero")
    if not np.isfinite(lam) or lam <= 1:
        raise ParameterError(f"lambda must be > 1, got {lam}")
    N = topology.depth
    level = topology.level
    c = np.zeros(topology.Q)
    for j in range(1, topology.Q):
        lvl = level[j]
        if lvl >= N:
            continue
        c[j] = lam if lvl == 1 else lam * c[topology.parent[j]]
    active = (level >= 1) & (level <= N - 1)
    if d_rule == "divergence_free":
        kids = topology.n_children
        if np.any(active & (kids == 0)):
            raise ParameterError("divergence-free coupling needs children on every node above the last level")
        d = np.zeros_like(c)
        d[active] = -alpha * c[active] / (beta * kids[active])
    elif d_rule == "proportional":
        d = np.where(active, (alpha / beta) * c, 0.0)
    else:
        raise ParameterError(f"unknown d_rule {d_rule!r}")
    return TreeParams(topology, float(alpha), float(beta), c, d, float(lam))


def check_tree_state(params: TreeParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (params.topology.Q,):
        raise DimensionError(f"state has shape {x.shape}, expected trailing dimension {params.topology.Q}")
    return x


def _parent_values(top: TreeTopology, v: np.ndarray) -> np.ndarray:
    out = np.zeros_like(v)
    out[..., 1:] = v[..., top.parent[1:]]
    return out


def _child_sum(top: TreeTopology, v: np.ndarray) -> np.ndarray:
    """``out[..., j] = sum_{k in O_j} v[..., k]``."""
    flat = v.reshape(-1, top.Q)
    out = np.zeros_like(flat)
    for r in range(flat.shape[0]):
        out[r] = np.bincount(top.parent[1:], weights=flat[r, 1:], minlength=top.Q)
    return out.reshape(v.shape)


def tree_eval_rhs(params: TreeParams, x) -> np.ndarray:
    x = check_tree_state(params, x)
    top, a, b, c, d = params.topology, params.alpha, params.beta, params.c, params.d
    xp = _parent_values(top, x)
    dp = np.zeros(top.Q)
    dp[1:] = d[top.parent[1:]]
    sum_ck_xk = _child_sum(top, c * x)
    sum_xk2 = _child_sum(top, x * x)
    return a * (c * xp**2 - x * sum_ck_xk) - b * (dp * xp * x - d * sum_xk2)


def tree_energy(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return np.sum(x * x, axis=-1)


def tree_divergence_residual(params: TreeParams, x) -> float:
    """Jacobian trace ``sum_j (-alpha sum_{k in O_j} c_k x_k - beta d_p x_p)``."""
    x = check_tree_state(params, x)
    top = params.topology
    dp = np.zeros(top.Q)
    dp[1:] = params.d[top.parent[1:]]
    xp = _parent_values(top, x)
    per_node = -params.alpha * _child_sum(top, params.c * x) - params.beta * dp * xp
    return np.sum(per_node, axis=-1)


def tree_energy_quadratic_residual(params: TreeParams, x) -> float:
    x = check_tree_state(params, x)
    return np.sum(x * tree_eval_rhs(params, x), axis=-1)
