"""Graph-algebraic substrate: incidence matrices, Laplacians, tree flows, Kron reduction.

All matrices are dense ``numpy`` arrays; target problem sizes are a few hundred nodes.
Edge ``l = (i, j)`` is oriented from source ``i`` to sink ``j``, so column ``l`` of the
incidence matrix carries ``-1`` in row ``i`` and ``+1`` in row ``j``.
"""

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _cc

from .exceptions import BalanceError, DomainError, StructuralError
from .validation import check_vector, symmetrize

LOAD = "load"
INVERTER = "inverter"
NODE_KINDS = (LOAD, INVERTER)


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Electrical graph of an islanded microgrid.

    Parameters
    ----------
    kinds : sequence of {"load", "inverter"}
        Kind of every node; node ``k`` is ``kinds[k]``.
    edges : sequence of (int, int)
        Lines as ordered ``(source, sink)`` pairs. The orientation is arbitrary but fixed.
    susceptance : array-like, shape (n_edges,)
        Line susceptance magnitudes ``|Y_ij|`` in siemens.
    voltages : array-like, shape (n_nodes,)
        Nodal voltage magnitudes in volts.
    names : sequence of str, optional
        Human-readable node identifiers.
    """

    kinds: tuple
    edges: tuple
    susceptance: np.ndarray
    voltages: np.ndarray
    names: tuple = field(default=None)

    def __post_init__(self):
        kinds = tuple(str(k) for k in self.kinds)
        for k in kinds:
            if k not in NODE_KINDS:
                raise DomainError(f"unknown node kind {k!r}; expected one of {NODE_KINDS}")
        n = len(kinds)
        if n == 0:
            raise DomainError("network has no nodes")
        edges = tuple((int(i), int(j)) for i, j in self.edges)
        for i, j in edges:
            if not (0 <= i < n and 0 <= j < n):
                raise DomainError(f"edge ({i}, {j}) references a node outside 0..{n - 1}")
            if i == j:
                raise DomainError(f"self-loop at node {i}")
        seen = set()
        for i, j in edges:
            key = (min(i, j), max(i, j))
            if key in seen:
                raise DomainError(f"duplicate line between nodes {key}")
            seen.add(key)
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(
            self, "susceptance", check_vector(self.susceptance, "susceptance", len(edges), positive=True)
        )
        object.__setattr__(self, "voltages", check_vector(self.voltages, "voltages", n, positive=True))
        if self.names is None:
            object.__setattr__(self, "names", tuple(str(k) for k in range(n)))
        else:
            names = tuple(str(s) for s in self.names)
            if len(names) != n or len(set(names)) != n:
                raise DomainError("names must be unique and one per node")
            object.__setattr__(self, "names", names)

    @classmethod
    def parallel(cls, susceptance, voltages, load_voltage=None):
        """Star network: load node 0 fed directly by inverters ``1..m``.

        ``voltages`` gives the inverter voltages; the load voltage defaults to their mean.
        """
        susceptance = np.atleast_1d(np.asarray(susceptance, dtype=float))
        voltages = np.atleast_1d(np.asarray(voltages, dtype=float))
        m = susceptance.shape[0]
        if voltages.shape[0] != m:
            raise DomainError("need one voltage per inverter")
        if load_voltage is None:
            load_voltage = float(np.mean(voltages))
        return cls(
            kinds=(LOAD,) + (INVERTER,) * m,
            edges=tuple((0, i) for i in range(1, m + 1)),
            susceptance=susceptance,
            voltages=np.concatenate([[load_voltage], voltages]),
        )

    @property
    def n_nodes(self):
        return len(self.kinds)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def load_nodes(self):
        return np.array([k for k, kind in enumerate(self.kinds) if kind == LOAD], dtype=int)

    @property
    def inverter_nodes(self):
        return np.array([k for k, kind in enumerate(self.kinds) if kind == INVERTER], dtype=int)

    @property
    def sources(self):
        return np.array([i for i, _ in self.edges], dtype=int)

    @property
    def sinks(self):
        return np.array([j for _, j in self.edges], dtype=int)

    def components(self):
        """List of connected components, each a sorted list of node indices."""
        return connected_components(self.n_nodes, self.edges)

    @property
    def is_connected(self):
        return len(self.components()) == 1

    @property
    def is_acyclic(self):
        return self.is_connected and self.n_edges == self.n_nodes - 1

    def with_voltages(self, voltages):
        return replace(self, voltages=voltages)

    def with_susceptance(self, susceptance):
        return replace(self, susceptance=susceptance)


def connected_components(n, edges):
    if not edges:
        return [[k] for k in range(n)]
    rows = [i for i, _ in edges]
    cols = [j for _, j in edges]
    adj = coo_matrix((np.ones(len(edges)), (rows, cols)), shape=(n, n))
    count, labels = _cc(adj, directed=False)
    return [sorted(np.flatnonzero(labels == c).tolist()) for c in range(count)]


def bfs_tree(n, edges, root=0):
    """Breadth-first spanning order of a tree.

    Returns a list of ``(node, parent, edge_index)`` triples in visiting order, with
    ``parent`` and ``edge_index`` set to ``-1`` for the root.
    """
    adj = [[] for _ in range(n)]
    for ell, (i, j) in enumerate(edges):
        adj[i].append((j, ell))
        adj[j].append((i, ell))
    order = [(root, -1, -1)]
    visited = np.zeros(n, dtype=bool)
    visited[root] = True
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v, ell in adj[u]:
            if not visited[v]:
                visited[v] = True
                order.append((v, u, ell))
                queue.append(v)
    if len(order) != n:
        raise StructuralError("graph is disconnected")
    return order


def _require_connected(net):
    comps = net.components()
    if len(comps) > 1:
        listing = "; ".join("{" + ", ".join(net.names[k] for k in c) + "}" for c in comps)
        raise StructuralError(f"network is disconnected; components: {listing}")


def require_acyclic(net, what="this operation"):
    _require_connected(net)
    if net.n_edges != net.n_nodes - 1:
        raise StructuralError(
            f"{what} requires an acyclic network; got {net.n_edges} lines on {net.n_nodes} nodes"
        )


def build_incidence(net):
    """Node-edge incidence matrix ``B`` of shape ``(n_nodes, n_edges)``."""
    _require_connected(net)
    B = np.zeros((net.n_nodes, net.n_edges))
    for ell, (i, j) in enumerate(net.edges):
        B[i, ell] = -1.0
        B[j, ell] = 1.0
    return B


def _edge_endpoints(B):
    B = np.asarray(B, dtype=float)
    if B.ndim != 2:
        raise DomainError("incidence matrix must be two-dimensional")
    src = np.argmin(B, axis=0)
    snk = np.argmax(B, axis=0)
    ok = (
        np.all(np.isin(B, (-1.0, 0.0, 1.0)))
        and np.all(B[src, np.arange(B.shape[1])] == -1.0)
        and np.all(B[snk, np.arange(B.shape[1])] == 1.0)
        and np.all(np.abs(B).sum(axis=0) == 2.0)
    )
    if not ok:
        raise DomainError("not an incidence matrix: each column needs exactly one +1 and one -1")
    return src, snk


def weighted_laplacian(B, weights):
    """``L = B diag(weights) B^T``."""
    B = np.asarray(B, dtype=float)
    w = check_vector(weights, "weights", B.shape[1])
    if np.any(w <= 0):
        raise DomainError("Laplacian weights must be strictly positive")
    return symmetrize((B * w) @ B.T)


def laplacian_eigenvalues(L):
    """Ascending eigenvalues of a symmetric matrix."""
    return np.linalg.eigvalsh(symmetrize(np.asarray(L, dtype=float)))


def algebraic_connectivity(L):
    """Second-smallest Laplacian eigenvalue."""
    ev = laplacian_eigenvalues(L)
    return float(ev[1]) if ev.shape[0] > 1 else 0.0


def pinv_laplacian(L):
    """Moore-Penrose inverse of a connected-graph Laplacian.

    Uses ``L^+ = (L + J/n)^{-1} - J/n`` with ``J`` the all-ones matrix, which is exact
    whenever the kernel of ``L`` is exactly ``span(1)``.
    """
    L = symmetrize(np.asarray(L, dtype=float))
    n = L.shape[0]
    ev = np.linalg.eigvalsh(L)
    scale = max(abs(ev[-1]), 1.0)
    if n > 1 and ev[1] <= 1e-12 * scale:
        raise StructuralError("Laplacian has more than one zero eigenvalue; graph is disconnected")
    J = np.full((n, n), 1.0 / n)
    return symmetrize(np.linalg.inv(L + J) - J)


def solve_tree_flows(B, x, *, balance_tol=1e-9):
    """Unique edge flows ``xi`` with ``B @ xi == x`` on a tree, by leaf elimination.

    Raises
    ------
    BalanceError
        If ``|sum(x)| > balance_tol * max(1, ||x||_inf)``. Smaller imbalances are
        projected out by subtracting the mean.
    StructuralError
        If ``B`` is not the incidence matrix of a tree.
    """
    B = np.asarray(B, dtype=float)
    src, snk = _edge_endpoints(B)
    n, n_edges = B.shape
    x = check_vector(x, "injections", n)
    if n_edges != n - 1:
        raise StructuralError(f"flows are unique only on trees; got {n_edges} edges on {n} nodes")
    total = float(np.sum(x))
    if abs(total) > balance_tol * max(1.0, float(np.max(np.abs(x)))):
        raise BalanceError(total)
    residual = x - total / n

    edges = list(zip(src.tolist(), snk.tolist()))
    order = bfs_tree(n, edges)
    xi = np.zeros(n_edges)
    for v, parent, ell in reversed(order[1:]):
        xi[ell] = residual[v] / B[v, ell]
        residual[parent] -= B[parent, ell] * xi[ell]
    return xi


def reduced_laplacian(L, load_set, inverter_set, *, cond_limit=1e12):
    """Kron reduction ``L_II - L_IL L_LL^{-1} L_LI`` eliminating the load nodes."""
    L = np.asarray(L, dtype=float)
    load_set = np.asarray(load_set, dtype=int)
    inverter_set = np.asarray(inverter_set, dtype=int)
    L_II = L[np.ix_(inverter_set, inverter_set)]
    if load_set.size == 0:
        return symmetrize(L_II)
    L_LL = L[np.ix_(load_set, load_set)]
    L_LI = L[np.ix_(load_set, inverter_set)]
    L_IL = L[np.ix_(inverter_set, load_set)]
    if not np.isfinite(np.linalg.cond(L_LL)) or np.linalg.cond(L_LL) > cond_limit:
        raise DomainError("load block of the Laplacian is singular; angles lie outside the feasible arc")
    return symmetrize(L_II - L_IL @ np.linalg.solve(L_LL, L_LI))
