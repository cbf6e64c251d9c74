"""Closed-form synchronization, power-sharing and linear stability analysis.

Everything here works on a :class:`~droopnet.netgraph.NetworkModel` together with
:class:`DroopParams`. Angles are anchored by pinning node 0 to zero; spectra report
the rotational zero eigenvalue explicitly.
"""

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ._newton import NewtonFailure, damped_newton
from .exceptions import DomainError, InfeasibleError, PreconditionError, StructuralError
from .netgraph import (
    algebraic_connectivity,
    bfs_tree,
    build_incidence,
    require_acyclic,
    reduced_laplacian,
    solve_tree_flows,
    weighted_laplacian,
)
from .powerflow import active_injections, coupling_weights, injection_jacobian
from .validation import check_square, check_vector, symmetrize


@dataclass(frozen=True, eq=False)
class DroopParams:
    """Droop controller constants and load powers.

    Parameters
    ----------
    D : array-like, shape (n_inverters,)
        Inverse droop coefficients in W*s, ordered like ``net.inverter_nodes``.
    P_star : array-like, shape (n_inverters,)
        Nominal inverter injections in W.
    P_load : array-like, shape (n_loads,)
        Constant load powers in W, ordered like ``net.load_nodes`` (consumption < 0).
    ratings : array-like, shape (n_inverters,), optional
        Inverter power ratings in W. When given, ``0 <= P_star <= ratings`` is enforced.
    k : array-like, shape (n_inverters,), optional
        Secondary (DAPI) integrator time constants in s.
    """

    D: np.ndarray
    P_star: np.ndarray
    P_load: np.ndarray
    ratings: np.ndarray = field(default=None)
    k: np.ndarray = field(default=None)

    def __post_init__(self):
        D = check_vector(self.D, "D", positive=True)
        m = D.shape[0]
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "P_star", check_vector(self.P_star, "P_star", m))
        P_load = np.atleast_1d(np.asarray(self.P_load, dtype=float))
        object.__setattr__(self, "P_load", check_vector(P_load, "P_load") if P_load.size else P_load)
        if self.ratings is not None:
            ratings = check_vector(self.ratings, "ratings", m, positive=True)
            tol = 1e-12 * ratings
            if np.any(self.P_star < -tol) or np.any(self.P_star > ratings + tol):
                raise DomainError("nominal injections must satisfy 0 <= P_star <= ratings")
            object.__setattr__(self, "ratings", ratings)
        if self.k is not None:
            object.__setattr__(self, "k", check_vector(self.k, "k", m, positive=True))

    @property
    def n_inverters(self):
        return self.D.shape[0]

    def check(self, net):
        if net.inverter_nodes.shape[0] != self.n_inverters:
            raise DomainError(
                f"network has {net.inverter_nodes.shape[0]} inverters but parameters describe {self.n_inverters}"
            )
        if net.load_nodes.shape[0] != self.P_load.shape[0]:
            raise DomainError(
                f"network has {net.load_nodes.shape[0]} loads but parameters describe {self.P_load.shape[0]}"
            )
        return self

    def nodal_injections(self, net):
        """Nominal injections ``P*`` as a node-indexed vector."""
        P = np.zeros(net.n_nodes)
        P[net.inverter_nodes] = self.P_star
        P[net.load_nodes] = self.P_load
        return P

    def nodal_D(self, net, load_value=0.0):
        """Node-indexed time constants, ``load_value`` at loads."""
        D = np.full(net.n_nodes, float(load_value))
        D[net.inverter_nodes] = self.D
        return D

    def with_loads(self, P_load):
        return replace(self, P_load=np.atleast_1d(np.asarray(P_load, dtype=float)))

    def scaled(self, c):
        """Multiply every droop time constant by ``c``."""
        return replace(self, D=self.D * float(c))


@dataclass(frozen=True, eq=False)
class CommGraph:
    """Weighted undirected communication graph among inverters, as its Laplacian (W*s)."""

    laplacian: np.ndarray

    def __post_init__(self):
        L = check_square(self.laplacian, "communication Laplacian")
        scale = max(1.0, float(np.max(np.abs(L))))
        if np.max(np.abs(L - L.T)) > 1e-12 * scale:
            raise DomainError("communication Laplacian must be symmetric")
        if np.max(np.abs(L.sum(axis=1))) > 1e-10 * scale:
            raise DomainError("communication Laplacian rows must sum to zero")
        off = L - np.diag(np.diag(L))
        if np.any(off > 1e-12 * scale):
            raise DomainError("communication Laplacian must have nonpositive off-diagonal entries")
        L = symmetrize(L)
        L.flags.writeable = False
        object.__setattr__(self, "laplacian", L)

    @classmethod
    def from_edges(cls, n_inverters, edges, weights):
        L = np.zeros((n_inverters, n_inverters))
        for (i, j), w in zip(edges, np.broadcast_to(weights, (len(edges),))):
            if w <= 0:
                raise DomainError("communication weights must be positive")
            L[i, i] += w
            L[j, j] += w
            L[i, j] -= w
            L[j, i] -= w
        return cls(L)

    @property
    def size(self):
        return self.laplacian.shape[0]

    @property
    def connected(self):
        if self.size == 1:
            return True
        scale = max(1.0, float(np.max(np.abs(self.laplacian))))
        return algebraic_connectivity(self.laplacian) > 1e-10 * scale


@dataclass(frozen=True, eq=False)
class SyncReport:
    """Outcome of the flow-feasibility test on an acyclic network."""

    omega_avg: float
    edge_flows: np.ndarray
    stress: float
    feasible: bool
    arc: float = math.nan
    equilibrium: np.ndarray = None
    rate_bound: float = math.nan
    capacities: np.ndarray = None

    def to_dict(self):
        d = asdict(self)
        for key in ("edge_flows", "equilibrium", "capacities"):
            if d[key] is not None:
                d[key] = [float(v) for v in d[key]]
        for key in ("omega_avg", "stress", "arc", "rate_bound"):
            d[key] = None if math.isnan(d[key]) else float(d[key])
        d["feasible"] = bool(d["feasible"])
        return d

    @classmethod
    def from_dict(cls, d):
        def arr(v):
            return None if v is None else np.asarray(v, dtype=float)

        return cls(
            omega_avg=float(d["omega_avg"]),
            edge_flows=arr(d["edge_flows"]),
            stress=float(d["stress"]),
            feasible=bool(d["feasible"]),
            arc=math.nan if d.get("arc") is None else float(d["arc"]),
            equilibrium=arr(d.get("equilibrium")),
            rate_bound=math.nan if d.get("rate_bound") is None else float(d["rate_bound"]),
            capacities=arr(d.get("capacities")),
        )

    def to_text(self):
        lines = [
            f"omega_avg_rad_s = {self.omega_avg:.12g}",
            f"omega_avg_Hz = {self.omega_avg / (2 * math.pi):.12g}",
            f"stress = {self.stress:.12g}",
            f"feasible = {'yes' if self.feasible else 'no'}",
        ]
        if self.feasible:
            lines.append(f"arc_deg = {math.degrees(self.arc):.12g}")
            lines.append(f"rate_bound_per_s = {self.rate_bound:.12g}")
        for ell, xi in enumerate(self.edge_flows):
            ratio = abs(xi) / self.capacities[ell] if self.capacities is not None else math.nan
            lines.append(f"edge_{ell}_flow_W = {xi:.12g}")
            lines.append(f"edge_{ell}_loading = {ratio:.12g}")
        if self.equilibrium is not None:
            for k, th in enumerate(self.equilibrium):
                lines.append(f"theta_{k}_rad = {th:.12g}")
        return "\n".join(lines)


def power_imbalance(params):
    """Scaled power imbalance: total nominal power over total inverter time constant (rad/s)."""
    if params.n_inverters == 0:
        raise DomainError("at least one inverter is required")
    return float((np.sum(params.P_star) + np.sum(params.P_load)) / np.sum(params.D))


def steady_injections(net, params, omega=None):
    """Node-indexed ``P* - omega D``; the flows these injections induce are balanced."""
    omega = power_imbalance(params) if omega is None else omega
    return params.nodal_injections(net) - omega * params.nodal_D(net)


def check_sync(net, params):
    """Flow-feasibility test, explicit equilibrium and rate bound on an acyclic network.

    Raises
    ------
    StructuralError
        If the network has a cycle or is disconnected.
    """
    require_acyclic(net, "the synchronization test")
    params.check(net)
    omega = power_imbalance(params)
    a = coupling_weights(net)
    xi = solve_tree_flows(build_incidence(net), steady_injections(net, params, omega))
    stress = float(np.max(np.abs(xi) / a)) if xi.size else 0.0
    report = SyncReport(omega_avg=omega, edge_flows=xi, stress=stress, feasible=stress < 1.0, capacities=a)
    if not report.feasible:
        return report
    theta = equilibrium_angles(net, params, xi)
    report = replace(report, arc=math.asin(stress), equilibrium=theta)
    return replace(report, rate_bound=rate_bound(net, params, report))


def equilibrium_angles(net, params, xi):
    """Equilibrium angles with ``sin(theta_sink - theta_source) = xi / a`` on every line.

    Node 0 is pinned at zero; the tree is traversed breadth-first from it.
    """
    a = coupling_weights(net)
    xi = check_vector(xi, "edge flows", net.n_edges)
    ratio = xi / a
    stress = float(np.max(np.abs(ratio))) if ratio.size else 0.0
    if stress >= 1.0:
        raise InfeasibleError(stress)
    delta = np.arcsin(ratio)
    theta = np.zeros(net.n_nodes)
    for v, parent, ell in bfs_tree(net.n_nodes, net.edges)[1:]:
        src, snk = net.edges[ell]
        theta[v] = theta[parent] + (delta[ell] if v == snk else -delta[ell])
    return theta


def rate_bound(net, params, report):
    """Lower bound on the local exponential synchronization rate (1/s)."""
    if not report.feasible:
        raise InfeasibleError(report.stress)
    if net.n_nodes < 2:
        return 0.0
    lam2 = algebraic_connectivity(weighted_laplacian(build_incidence(net), coupling_weights(net)))
    return lam2 / float(np.max(params.D)) * math.sqrt(max(0.0, 1.0 - report.stress**2))


def _star_edges(net):
    """For a star with a single load hub, the line index feeding each inverter."""
    loads = net.load_nodes
    if loads.shape[0] != 1 or net.n_edges != net.inverter_nodes.shape[0]:
        raise StructuralError("parallel condition requires one load fed directly by every inverter")
    hub = int(loads[0])
    line_of = {}
    for ell, (i, j) in enumerate(net.edges):
        if hub not in (i, j):
            raise StructuralError(f"line {ell} does not touch the load node; network is not a star")
        line_of[j if i == hub else i] = ell
    return np.array([line_of[int(v)] for v in net.inverter_nodes])


def parallel_condition(net, params):
    """Stress of a parallel (star) interconnection from the injections alone."""
    params.check(net)
    lines = _star_edges(net)
    a = coupling_weights(net)[lines]
    omega = power_imbalance(params)
    return float(np.max(np.abs((params.P_star - omega * params.D) / a)))


def robust_stress(net, params, E_lower, Y_lower):
    """Stress evaluated with worst-case couplings built from lower bounds."""
    E_lower = check_vector(E_lower, "E_lower", net.n_nodes, positive=True)
    Y_lower = check_vector(Y_lower, "Y_lower", net.n_edges, positive=True)
    if np.any(E_lower > net.voltages) or np.any(Y_lower > net.susceptance):
        raise DomainError("lower bounds must not exceed the nominal voltages and susceptances")
    require_acyclic(net, "the robust condition")
    params.check(net)
    xi = solve_tree_flows(build_incidence(net), steady_injections(net, params))
    a_low = E_lower[net.sources] * E_lower[net.sinks] * Y_lower
    return float(np.max(np.abs(xi) / a_low)) if xi.size else 0.0


def robust_condition(net, params, E_lower, Y_lower):
    """True when the flows stay feasible for every voltage and susceptance above the bounds."""
    return robust_stress(net, params, E_lower, Y_lower) < 1.0


def proportional_params(ratings, utilization, D_scale):
    """Inverter parameters with ``P_star = utilization * ratings`` and ``D = D_scale * ratings``.

    Loads are empty; attach them with :meth:`DroopParams.with_loads`.
    """
    ratings = check_vector(ratings, "ratings", positive=True)
    utilization = float(utilization)
    if not 0.0 <= utilization <= 1.0:
        raise DomainError(f"utilization must lie in [0, 1], got {utilization}")
    if D_scale <= 0:
        raise DomainError("D_scale must be positive")
    return DroopParams(D=D_scale * ratings, P_star=utilization * ratings, P_load=np.zeros(0), ratings=ratings)


def _all_equal(v, rtol):
    return bool(np.max(v) - np.min(v) <= rtol * max(1.0, float(np.max(np.abs(v))))) if v.size else True


def is_proportional(params, rtol=1e-10):
    """Whether ``P*/D`` and ``P*/P_bar`` are each common across inverters."""
    if params.ratings is None:
        return False
    return _all_equal(params.P_star / params.D, rtol) and _all_equal(params.P_star / params.ratings, rtol)


@dataclass(frozen=True)
class SharingReport:
    injections: np.ndarray
    ratios: np.ndarray
    total_load: float
    within_limits: bool
    ratios_equal: bool
    at_rating: bool
    at_zero: bool


def sharing_check(net, params, report, *, require_proportional=True):
    """Steady-state inverter injections and the load constraint for proportional droop."""
    params.check(net)
    if params.ratings is None:
        raise PreconditionError("power sharing needs inverter ratings")
    if require_proportional and not is_proportional(params):
        raise PreconditionError(
            "droop coefficients are not selected proportionally: need P*/D and P*/rating equal across inverters"
        )
    if not report.feasible:
        raise InfeasibleError(report.stress)
    injections = params.P_star - report.omega_avg * params.D
    ratios = injections / params.ratings
    total_load = float(np.sum(params.P_load))
    capacity = float(np.sum(params.ratings))
    return SharingReport(
        injections=injections,
        ratios=ratios,
        total_load=total_load,
        within_limits=bool(-capacity <= total_load <= 0.0),
        ratios_equal=_all_equal(ratios, 1e-10),
        at_rating=total_load == -capacity,
        at_zero=total_load == 0.0,
    )


def droop_jacobian_spectrum(net, params, theta):
    """Eigenvalues (ascending) of ``-D_I^{-1} L_red(theta)``, the reduced droop linearization."""
    params.check(net)
    L = injection_jacobian(np.asarray(theta, dtype=float), net)
    L_red = reduced_laplacian(L, net.load_nodes, net.inverter_nodes)
    s = 1.0 / np.sqrt(params.D)
    return np.sort(-np.linalg.eigvalsh(symmetrize(s[:, None] * L_red * s[None, :])))


def dapi_matrices(net, params, comm, theta, eps=0.0):
    """Factors of the reduced DAPI Jacobian ``-Z^{-1} X1 X2``."""
    params.check(net)
    if params.k is None:
        raise DomainError("DAPI analysis needs integrator time constants k")
    if comm.size != params.n_inverters:
        raise DomainError("communication graph must span exactly the inverters")
    if not comm.connected:
        raise StructuralError("communication graph is disconnected")
    m = params.n_inverters
    I = np.eye(m)
    L_red = reduced_laplacian(injection_jacobian(np.asarray(theta, dtype=float), net), net.load_nodes, net.inverter_nodes)
    Dinv = np.diag(1.0 / params.D)
    X1 = np.block([[Dinv, I], [I, comm.laplacian + np.diag(params.D) + eps * I]])
    X2 = np.block([[L_red, np.zeros((m, m))], [np.zeros((m, m)), Dinv]])
    Z = np.block([[I, np.zeros((m, m))], [np.zeros((m, m)), np.diag(params.k)]])
    return X1, X2, Z


def dapi_spectrum(net, params, comm, theta, eps=0.0):
    """Eigenvalues of the reduced DAPI linearization, sorted by real part.

    ``eps`` adds ``eps * I`` to the lower-right block of ``X1``.
    """
    X1, X2, Z = dapi_matrices(net, params, comm, theta, eps)
    J = -np.linalg.solve(Z, X1 @ X2)
    ev = np.linalg.eigvals(J)
    return ev[np.lexsort((ev.imag, ev.real))]


@dataclass(frozen=True)
class SpectrumVerdict:
    n_zero: int
    n_negative: int
    n_positive: int
    max_relative_imag: float
    stable: bool


def classify_spectrum(eigenvalues, zero_tol=1e-8, imag_tol=1e-7):
    """Count structural zeros (``|l| <= zero_tol * max|l|``), negatives and positives.

    ``stable`` means exactly one zero, no positive eigenvalue, and every imaginary part
    within ``imag_tol`` times the spectral radius.
    """
    ev = np.asarray(eigenvalues)
    radius = float(np.max(np.abs(ev))) if ev.size else 0.0
    zero = np.abs(ev) <= zero_tol * radius
    re = np.real(ev)
    rel_imag = float(np.max(np.abs(np.imag(ev)))) / radius if radius > 0 else 0.0
    n_neg = int(np.sum(~zero & (re < 0)))
    n_pos = int(np.sum(~zero & (re >= 0)))
    n_zero = int(np.sum(zero))
    return SpectrumVerdict(
        n_zero=n_zero,
        n_negative=n_neg,
        n_positive=n_pos,
        max_relative_imag=rel_imag,
        stable=n_zero == 1 and n_pos == 0 and rel_imag <= imag_tol,
    )


def dapi_equilibrium(net, params, report):
    """Auxiliary powers at the DAPI equilibrium: ``D * omega_avg``."""
    if not report.feasible:
        raise InfeasibleError(report.stress)
    return params.D * report.omega_avg


def wrap_angle(x):
    return (np.asarray(x) + np.pi) % (2 * np.pi) - np.pi


def search_equilibrium(net, params, n_seeds=50, rng=None, tol=1e-9, maxiter=50):
    """Multi-start damped Newton search for an equilibrium inside the open quarter-arc set.

    Seeds draw every line's angle difference uniformly from ``(-pi/2, pi/2)``. Returns
    the first equilibrium found (node 0 pinned at zero) or ``None``. Failing to find one
    is evidence, not proof, of nonexistence.
    """
    params.check(net)
    rng = np.random.default_rng(rng)
    a = coupling_weights(net)
    target = steady_injections(net, params)
    src, snk = net.sources, net.sinks
    order = bfs_tree(net.n_nodes, net.edges)

    def full(x):
        return np.concatenate([[0.0], x])

    def residual(x):
        return (target - active_injections(full(x), net, a))[1:]

    def jacobian(x):
        return -injection_jacobian(full(x), net, a)[1:, 1:]

    abs_tol = tol * float(np.max(a))
    for _ in range(n_seeds):
        delta = rng.uniform(-np.pi / 2, np.pi / 2, size=net.n_edges)
        theta0 = np.zeros(net.n_nodes)
        for v, parent, ell in order[1:]:
            theta0[v] = theta0[parent] + (delta[ell] if v == snk[ell] else -delta[ell])
        try:
            x, _, _ = damped_newton(residual, jacobian, theta0[1:], abs_tol, maxiter)
        except NewtonFailure:
            continue
        theta = full(x)
        if np.all(np.abs(wrap_angle(theta[snk] - theta[src])) < np.pi / 2):
            return theta
    return None
