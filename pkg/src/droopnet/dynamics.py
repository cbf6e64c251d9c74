"""Time-domain simulation of droop and DAPI closed loops.

The closed loops are index-1 differential-algebraic systems: inverter angles (and DAPI
auxiliary powers) are differential states, load angles are algebraic. Two treatments of
the loads are available:

``newton``
    Load angles are re-solved by damped Newton at every right-hand-side evaluation.
``perturbation``
    Loads become frequency-dependent with a small time constant ``eps``.

Two integrators are available: fixed-step classical Runge-Kutta (``rk4``, reproducible
bit for bit) and ``adaptive``, which hands the reduced ODE to SciPy's Radau method with an
analytic Jacobian. The adaptive method is required when the DAPI gains or the
perturbation constant make the system stiff.
"""

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from ._newton import NewtonFailure, damped_newton, fd_jacobian
from .analysis import power_imbalance, wrap_angle
from .exceptions import (
    ConvergenceError,
    DomainError,
    SimulationError,
    StepSizeError,
    StructuralError,
    VoltageCollapseError,
)
from .netgraph import build_incidence
from .powerflow import coupling_weights, lossy_injections
from .validation import check_vector

DROOP = "droop"
DAPI = "dapi"


@dataclass(frozen=True)
class SimOptions:
    """Integrator and DAE settings.

    ``step=None`` picks ``min(max_step, 0.1 / rho)`` with ``rho`` the spectral radius of
    the linearization at synchronized angles; a step below ``min_step`` raises
    :class:`StepSizeError`.
    """

    method: str = "rk4"
    step: float = None
    max_step: float = 1e-3
    min_step: float = 1e-6
    rtol: float = 1e-8
    atol: float = 1e-10
    mode: str = "newton"
    eps: float = None
    frame: str = "nominal"
    sample_dt: float = 1e-2
    newton_tol: float = 1e-10
    newton_maxiter: int = 50

    def __post_init__(self):
        if self.method not in ("rk4", "adaptive"):
            raise DomainError(f"unknown method {self.method!r}")
        if self.mode not in ("newton", "perturbation"):
            raise DomainError(f"unknown DAE mode {self.mode!r}")
        if self.frame not in ("nominal", "rotating"):
            raise DomainError(f"unknown frame {self.frame!r}")
        if self.sample_dt <= 0:
            raise DomainError("sample_dt must be positive")
        if self.step is not None and self.step <= 0:
            raise DomainError("step must be positive")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True, eq=False)
class LoadSchedule:
    """Piecewise-constant, right-continuous load powers.

    ``values[0]`` holds before ``times[0]``; ``values[k]`` on ``[times[k-1], times[k])``.
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None] if times.size else values[None, :]
        if values.shape[0] != times.size + 1:
            raise DomainError("a schedule needs one more value row than breakpoints")
        if times.size and np.any(np.diff(times) <= 0):
            raise DomainError("schedule breakpoints must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, values):
        return cls(np.zeros(0), np.atleast_2d(np.asarray(values, dtype=float)))

    @classmethod
    def steps(cls, initial, changes):
        """``changes`` is a sequence of ``(time, values)`` pairs."""
        changes = sorted(changes, key=lambda c: c[0])
        rows = [np.atleast_1d(np.asarray(initial, dtype=float))]
        rows += [np.atleast_1d(np.asarray(v, dtype=float)) for _, v in changes]
        return cls(np.array([t for t, _ in changes]), np.vstack(rows))

    @property
    def n_loads(self):
        return self.values.shape[1]

    def at(self, t):
        return self.values[int(np.searchsorted(self.times, t, side="right"))]

    def breakpoints(self, t0, t1):
        return [float(t) for t in self.times if t0 < t < t1]


@dataclass(frozen=True, eq=False)
class SimState:
    """Initial condition: node angles (rad) and, for DAPI, auxiliary powers (W)."""

    theta: np.ndarray
    p: np.ndarray = None
    t: float = 0.0


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sampled solution. Arrays are indexed ``[sample, node]`` (``[sample, inverter]`` for ``p``)."""

    t: np.ndarray
    theta: np.ndarray
    theta_dot: np.ndarray
    injections: np.ndarray
    edges: tuple
    inverter_nodes: np.ndarray
    p: np.ndarray = None
    voltages: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_nodes(self):
        return self.theta.shape[1]

    def frequency_hz(self, nominal_hz=0.0):
        """Nodal frequencies in Hz, offset by ``nominal_hz``."""
        return nominal_hz + self.theta_dot / (2 * math.pi)

    def header(self):
        n = self.n_nodes
        cols = ["t"]
        cols += [f"theta_{k}" for k in range(n)]
        cols += [f"thetadot_{k}" for k in range(n)]
        if self.p is not None:
            cols += [f"p_{k}" for k in range(self.p.shape[1])]
        cols += [f"Pe_{k}" for k in range(n)]
        if self.voltages is not None:
            cols += [f"E_{k}" for k in range(n)]
        return cols

    def rows(self):
        blocks = [self.t[:, None], self.theta, self.theta_dot]
        if self.p is not None:
            blocks.append(self.p)
        blocks.append(self.injections)
        if self.voltages is not None:
            blocks.append(self.voltages)
        return np.hstack(blocks)

    def to_csv(self, dest=None):
        """Write CSV (SI units, ``repr`` precision). Returns the text when ``dest`` is None."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        for row in self.rows():
            writer.writerow([repr(float(v)) for v in row])
        text = buf.getvalue()
        if dest is None:
            return text
        if hasattr(dest, "write"):
            dest.write(text)
        else:
            with open(dest, "w", newline="") as fh:
                fh.write(text)
        return None


class _ClosedLoop:
    """Right-hand side, Jacobian and output map of one closed-loop configuration."""

    def __init__(self, net, params, controller, opts, schedule, comm=None, ext=None):
        params.check(net)
        self.net = net
        self.params = params
        self.controller = controller
        self.opts = opts
        self.schedule = schedule
        self.ext = ext
        n = net.n_nodes
        self.n = n
        self.inv = net.inverter_nodes
        self.loads = net.load_nodes
        self.m = self.inv.shape[0]
        if self.m == 0:
            raise DomainError("simulation needs at least one inverter")
        if schedule.n_loads != self.loads.shape[0]:
            raise DomainError("load schedule width must match the number of loads")
        self.B = build_incidence(net)
        self.a = coupling_weights(net)
        self.amax = float(np.max(self.a)) if self.a.size else 1.0

        if controller == DAPI:
            if comm is None:
                raise DomainError("DAPI simulation needs a communication graph")
            if comm.size != self.m:
                raise DomainError("communication graph must span exactly the inverters")
            if not comm.connected:
                raise StructuralError("communication graph is disconnected")
            if params.k is None:
                raise DomainError("DAPI simulation needs integrator time constants k")
            self.Lc = comm.laplacian
        self.dapi = controller == DAPI

        if opts.mode == "perturbation":
            if ext is not None:
                raise DomainError("the voltage-droop extension supports only newton mode")
            self.eps = opts.eps if opts.eps is not None else 1e-4 * float(np.min(params.D))
            if self.eps <= 0:
                raise DomainError("perturbation constant must be positive")
            self.dyn = np.arange(n)
            self.alg = np.zeros(0, dtype=int)
            self.D_dyn = params.nodal_D(net, self.eps)
        else:
            self.eps = None
            self.dyn = self.inv
            self.alg = self.loads
            self.D_dyn = params.D.copy()
        self.n_dyn = self.dyn.shape[0]
        # positions of inverters inside the dynamic angle block
        self.inv_in_dyn = np.searchsorted(self.dyn, self.inv)

        if ext is not None:
            ext.check(net)
            self.g = ext.conductance
            self.b = ext.line_susceptance(net)
            self.load_q_sched = ext.load_Q_schedule
            if self.load_q_sched is None and ext.load_Q is not None:
                self.load_q_sched = LoadSchedule.constant(ext.load_Q)
            self.pq_loads = self.load_q_sched is not None
            self.E = net.voltages.copy()
            self.E[self.inv] = ext.E_star
            self._x_alg = np.concatenate(
                [net.voltages[self.loads] * 0.0, self.E[self.loads] if self.pq_loads else [], ext.E_star]
            )
        self._P_base = params.nodal_injections(net)
        self._frame_speeds = [power_imbalance(params.with_loads(row)) for row in schedule.values]
        self._ix_aa = np.ix_(self.alg, self.alg)
        self.theta_alg = np.zeros(self.alg.shape[0])
        self._anchor = None
        self.last_residual = 0.0

    # -- state helpers ----------------------------------------------------------------

    def loads_at(self, t):
        P = self._P_base.copy()
        P[self.loads] = self.schedule.at(t)
        return P

    def frame_speed(self, t):
        if self.opts.frame == "nominal":
            return 0.0
        return self._frame_speeds[int(np.searchsorted(self.schedule.times, t, side="right"))]

    def pack(self, state):
        theta = check_vector(state.theta, "initial angles", self.n)
        parts = [theta[self.dyn]]
        if self.dapi:
            p = np.zeros(self.m) if state.p is None else check_vector(state.p, "initial p", self.m)
            parts.append(p)
        self.theta_alg = theta[self.alg].copy()
        if self.ext is not None:
            self._x_alg[: self.alg.shape[0]] = theta[self.alg]
        return np.concatenate(parts)

    def abs_tolerances(self):
        """Absolute tolerance per state: ``atol`` rad for angles, ``atol * max a`` W for powers."""
        tol = np.full(self.n_dyn + (self.m if self.dapi else 0), self.opts.atol)
        tol[self.n_dyn :] *= self.amax
        return tol

    def split(self, y):
        th = y[: self.n_dyn]
        p = y[self.n_dyn :] if self.dapi else None
        return th, p

    def full_theta(self, th_dyn, theta_alg):
        theta = np.empty(self.n)
        theta[self.dyn] = th_dyn
        theta[self.alg] = theta_alg
        return theta

    # -- lossless network --------------------------------------------------------------

    def _pe(self, theta):
        return self.B @ (self.a * np.sin(self.B.T @ theta))

    def _jac_full(self, theta):
        c = self.a * np.cos(self.B.T @ theta)
        return (self.B * c) @ self.B.T

    def _load_newton(self, th_dyn, P_L, x0):
        """Newton solve of load balance; returns ``(x, residual)`` or ``None``.

        Roots where the load block of ``dP/dtheta`` is not positive definite are
        rejected: they sit on the non-operational branch of the constraint.
        """
        alg = self.alg

        def residual(x):
            return P_L - self._pe(self.full_theta(th_dyn, x))[alg]

        def jacobian(x):
            return -self._jac_full(self.full_theta(th_dyn, x))[self._ix_aa]

        try:
            x, res, _ = damped_newton(
                residual, jacobian, x0, self.opts.newton_tol * self.amax, self.opts.newton_maxiter, polish=True
            )
            np.linalg.cholesky(-jacobian(x))
        except (NewtonFailure, np.linalg.LinAlgError):
            return None
        return x, res

    def _harmonic_guess(self, th_dyn):
        """Load angles solving the linearized balance with zero load power."""
        L = (self.B * self.a) @ self.B.T
        alg, dyn = self.alg, self.dyn
        return -np.linalg.solve(L[np.ix_(alg, alg)], L[np.ix_(alg, dyn)] @ th_dyn)

    def _continuation(self, th_dyn, P_L):
        """Track the operational root from the last accepted solve (or from zero load)."""
        if self._anchor is not None:
            th_a, x_a, P_a = self._anchor
        else:
            th_a, P_a = th_dyn, np.zeros_like(P_L)
            sol = self._load_newton(th_a, P_a, self._harmonic_guess(th_a))
            if sol is None:
                return None
            x_a = sol[0]
        for n_sub in (4, 16, 64):
            x, ok = x_a, True
            for k in range(1, n_sub + 1):
                s = k / n_sub
                sol = self._load_newton(th_a + s * (th_dyn - th_a), P_a + s * (P_L - P_a), x)
                if sol is None:
                    ok = False
                    break
                x = sol[0]
            if ok:
                return sol
        return None

    def solve_loads(self, t, th_dyn, P_nom):
        """Return full angles with load angles satisfying power balance."""
        if self.alg.size == 0:
            return self.full_theta(th_dyn, self.theta_alg)
        P_L = P_nom[self.alg]
        sol = self._load_newton(th_dyn, P_L, self.theta_alg)
        if sol is None:
            sol = self._continuation(th_dyn, P_L)
        if sol is None:
            raise ConvergenceError(
                f"load-angle Newton failed at t={t:.6g} s: no operational solution of the load balance "
                "near the current angles; the flows are likely infeasible (stress >= 1) or the load step is too large",
                t=t,
                residual=float("nan"),
            )
        x, res = sol
        self.theta_alg = x
        self._anchor = (np.array(th_dyn, dtype=float), x, P_L.copy())
        self.last_residual = res
        return self.full_theta(th_dyn, x)

    # -- lossy / voltage-droop network -------------------------------------------------

    def _ext_unpack(self, th_dyn, x):
        nL = self.alg.shape[0]
        theta = self.full_theta(th_dyn, x[:nL])
        E = self.E.copy()
        k = nL
        if self.pq_loads:
            E[self.loads] = x[k : k + nL]
            k += nL
        E[self.inv] = x[k : k + self.m]
        return theta, E

    def _ext_residual(self, t, th_dyn, x, P_nom):
        theta, E = self._ext_unpack(th_dyn, x)
        P, Q = lossy_injections(theta, E, self.net, _ExtView(self.g, self.b))
        parts = [(P_nom[self.loads] - P[self.loads]) / self.amax]
        if self.pq_loads:
            parts.append((self.load_q_sched.at(t) - Q[self.loads]) / self.amax)
        ext = self.ext
        parts.append((E[self.inv] - ext.E_star + ext.droop_gain * (Q[self.inv] - ext.Q_star)) / np.max(ext.E_star))
        return np.concatenate(parts)

    def solve_ext(self, t, th_dyn, P_nom):
        def residual(x):
            return self._ext_residual(t, th_dyn, x, P_nom)

        def jacobian(x):
            return fd_jacobian(residual, x)

        try:
            x, res, _ = damped_newton(residual, jacobian, self._x_alg, self.opts.newton_tol, self.opts.newton_maxiter)
        except NewtonFailure as exc:
            raise ConvergenceError(
                f"algebraic Newton failed at t={t:.6g} s: {exc}", t=t, residual=exc.residual
            ) from None
        theta, E = self._ext_unpack(th_dyn, x)
        if np.any(E <= 0):
            bad = int(np.argmin(E))
            raise VoltageCollapseError(f"voltage at node {self.net.names[bad]} collapsed to {E[bad]:.4g} V at t={t:.6g} s")
        self._x_alg = x
        self.last_residual = res * self.amax
        P, Q = lossy_injections(theta, E, self.net, _ExtView(self.g, self.b))
        return theta, E, P, Q, x

    # -- vector field ------------------------------------------------------------------

    def _field(self, t, y, P_nom, theta, Pe):
        th_dyn, p = self.split(y)
        mismatch = P_nom[self.dyn] - Pe[self.dyn]
        if self.dapi:
            mismatch = mismatch.copy()
            mismatch[self.inv_in_dyn] -= p
        dth = mismatch / self.D_dyn - self.frame_speed(t)
        if not self.dapi:
            return dth
        inv_mismatch = P_nom[self.inv] - p - Pe[self.inv]
        dp = (inv_mismatch - self.Lc @ (p / self.params.D)) / self.params.k
        return np.concatenate([dth, dp])

    def rhs(self, t, y):
        P_nom = self.loads_at(t)
        th_dyn, _ = self.split(y)
        if self.ext is None:
            theta = self.solve_loads(t, th_dyn, P_nom)
            Pe = self._pe(theta)
        else:
            theta, _, Pe, _, _ = self.solve_ext(t, th_dyn, P_nom)
        return self._field(t, y, P_nom, theta, Pe)

    def reduced_jacobian(self, Jfull):
        """Jacobian of the reduced ODE given ``dPe/dtheta`` at the current angles."""
        if self.alg.size:
            dyn, alg = self.dyn, self.alg
            J_dd = Jfull[np.ix_(dyn, dyn)]
            J_da = Jfull[np.ix_(dyn, alg)]
            J_ad = Jfull[np.ix_(alg, dyn)]
            J_aa = Jfull[np.ix_(alg, alg)]
            Jpe = J_dd - J_da @ np.linalg.solve(J_aa, J_ad)
        else:
            Jpe = Jfull
        A = -Jpe / self.D_dyn[:, None]
        if not self.dapi:
            return A
        m = self.m
        top_right = np.zeros((self.n_dyn, m))
        top_right[self.inv_in_dyn, np.arange(m)] = -1.0 / self.params.D
        bottom_left = -Jpe[self.inv_in_dyn, :] / self.params.k[:, None]
        bottom_right = -(np.eye(m) + self.Lc / self.params.D[None, :]) / self.params.k[:, None]
        return np.block([[A, top_right], [bottom_left, bottom_right]])

    def jac(self, t, y):
        th_dyn, _ = self.split(y)
        theta = self.solve_loads(t, th_dyn, self.loads_at(t))
        return self.reduced_jacobian(self._jac_full(theta))

    def spectral_radius_estimate(self):
        """Spectral radius of the linearization with all angles equal."""
        Jfull = (self.B * self.a) @ self.B.T
        if self.ext is not None:
            E = self.E
            w = E[self.net.sources] * E[self.net.sinks] * np.hypot(self.g, self.b)
            Jfull = (self.B * w) @ self.B.T
        return float(np.max(np.abs(np.linalg.eigvals(self.reduced_jacobian(Jfull)))))

    # -- output map --------------------------------------------------------------------

    def evaluate(self, t, y):
        """Full angles, angle rates, injections, auxiliary powers and voltages at ``(t, y)``."""
        P_nom = self.loads_at(t)
        th_dyn, p = self.split(y)
        E = None
        if self.ext is None:
            theta = self.solve_loads(t, th_dyn, P_nom)
            Pe = self._pe(theta)
        else:
            theta, E, Pe, _, x = self.solve_ext(t, th_dyn, P_nom)
        dy = self._field(t, y, P_nom, theta, Pe)
        theta_dot = np.empty(self.n)
        theta_dot[self.dyn] = dy[: self.n_dyn]
        if self.alg.size:
            if self.ext is None:
                J = self._jac_full(theta)
                alg, dyn = self.alg, self.dyn
                theta_dot[alg] = -np.linalg.solve(J[np.ix_(alg, alg)], J[np.ix_(alg, dyn)] @ dy[: self.n_dyn])
            else:
                theta_dot[self.alg] = self._ext_alg_rate(t, th_dyn, x, dy[: self.n_dyn], P_nom)
        return theta, theta_dot, Pe, p, E

    def _ext_alg_rate(self, t, th_dyn, x, dth, P_nom):
        G_x = fd_jacobian(lambda z: self._ext_residual(t, th_dyn, z, P_nom), x)
        h = 1e-7
        g0 = self._ext_residual(t, th_dyn, x, P_nom)
        g1 = self._ext_residual(t, th_dyn + h * dth, x, P_nom)
        xdot = -np.linalg.solve(G_x, (g1 - g0) / h)
        return xdot[: self.alg.shape[0]]


@dataclass(frozen=True)
class _ExtView:
    conductance: np.ndarray
    susceptance: np.ndarray

    def line_susceptance(self, net):
        return self.susceptance


def _sample_times(t0, t1, dt, breakpoints):
    n = int(math.floor((t1 - t0) / dt + 1e-9))
    grid = [t0 + k * dt for k in range(n + 1)]
    if t1 - grid[-1] > 1e-12 * max(1.0, abs(t1)):
        grid.append(t1)
    else:
        grid[-1] = t1
    pts = sorted(set(grid) | set(breakpoints))
    # drop grid points that nearly coincide with a breakpoint
    out = []
    for s in pts:
        if out and s - out[-1] <= 1e-12 * max(1.0, abs(s)):
            if s in breakpoints:
                out[-1] = s
            continue
        out.append(s)
    return out


def _rk4_step(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _integrate(model, y0, tspan):
    opts = model.opts
    t0, t1 = float(tspan[0]), float(tspan[1])
    if not t1 > t0:
        raise DomainError("tspan must be increasing")
    bps = model.schedule.breakpoints(t0, t1)
    if model.ext is not None and model.load_q_sched is not None:
        bps = sorted(set(bps) | set(model.load_q_sched.breakpoints(t0, t1)))
    samples = _sample_times(t0, t1, opts.sample_dt, bps)

    h = opts.step
    if opts.method == "rk4" and h is None:
        rho = model.spectral_radius_estimate()
        h = opts.max_step if rho == 0 else min(opts.max_step, 0.1 / rho)
        if h < opts.min_step:
            raise StepSizeError(
                f"fixed step would be {h:.3g} s (linearization radius {rho:.3g} 1/s), below "
                f"min_step={opts.min_step:.3g}; the system is stiff, use method='adaptive'"
            )

    records = []
    y = y0.copy()
    records.append((t0, model.evaluate(t0, y)))
    segments = [t0] + bps + [t1]
    idx = 1
    for s0, s1 in zip(segments[:-1], segments[1:]):
        targets = [s for s in samples[idx:] if s <= s1]
        idx += len(targets)
        if opts.method == "rk4":
            t = s0
            for target in targets:
                n_sub = max(1, int(math.ceil((target - t) / h - 1e-9)))
                hh = (target - t) / n_sub
                for k in range(n_sub):
                    y = _rk4_step(model.rhs, t + k * hh, y, hh)
                if not np.all(np.isfinite(y)):
                    raise SimulationError(f"state diverged near t={target:.6g} s")
                t = target
                records.append((t, model.evaluate(t, y)))
        else:
            sol = solve_ivp(
                model.rhs,
                (s0, s1),
                y,
                method="Radau",
                t_eval=targets,
                rtol=opts.rtol,
                atol=model.abs_tolerances(),
                jac=model.jac if model.ext is None else None,
            )
            if not sol.success:
                raise StepSizeError(f"adaptive integration failed on [{s0:.6g}, {s1:.6g}] s: {sol.message}")
            for k, t in enumerate(sol.t):
                records.append((float(t), model.evaluate(float(t), sol.y[:, k])))
            y = sol.y[:, -1].copy()
    # samples at a breakpoint are evaluated with the post-switch loads (right-continuous)
    return records, h


def _run(model, state0, tspan, extra_meta):
    y0 = model.pack(state0)
    records, h = _integrate(model, y0, tspan)
    t = np.array([r[0] for r in records])
    theta = np.array([r[1][0] for r in records])
    theta_dot = np.array([r[1][1] for r in records])
    Pe = np.array([r[1][2] for r in records])
    p = np.array([r[1][3] for r in records]) if model.dapi else None
    E = np.array([r[1][4] for r in records]) if model.ext is not None else None
    meta = {
        "controller": model.controller,
        "options": model.opts.to_dict(),
        "step_used": h,
        "eps": model.eps,
    }
    meta.update(extra_meta)
    return Trajectory(
        t=t,
        theta=theta,
        theta_dot=theta_dot,
        injections=Pe,
        edges=model.net.edges,
        inverter_nodes=model.inv,
        p=p,
        voltages=E,
        metadata=meta,
    )


def _as_schedule(schedule, params):
    if schedule is None:
        return LoadSchedule.constant(params.P_load)
    if isinstance(schedule, LoadSchedule):
        return schedule
    return LoadSchedule.constant(schedule)


def _as_state(state0, net):
    if isinstance(state0, SimState):
        return state0
    if state0 is None:
        return SimState(np.zeros(net.n_nodes))
    return SimState(np.asarray(state0, dtype=float))


def simulate_droop(net, params, schedule=None, theta0=None, tspan=(0.0, 1.0), opts=None):
    """Integrate the primary droop closed loop.

    Inverters follow ``D_i dtheta_i/dt = P_i* - P_e,i``; loads enforce ``0 = P_i* - P_e,i``
    (``newton`` mode) or carry the small time constant ``eps`` (``perturbation`` mode).
    """
    opts = opts or SimOptions()
    model = _ClosedLoop(net, params, DROOP, opts, _as_schedule(schedule, params))
    return _run(model, _as_state(theta0, net), tspan, {})


def simulate_dapi(net, params, comm, schedule=None, state0=None, tspan=(0.0, 1.0), opts=None):
    """Integrate the DAPI closed loop.

    Adds ``k_i dp_i/dt = P_i* - p_i - P_e,i - sum_j Lc_ij (p_i/D_i - p_j/D_j)`` and
    subtracts ``p_i`` from the droop balance.
    """
    opts = opts or SimOptions()
    model = _ClosedLoop(net, params, DAPI, opts, _as_schedule(schedule, params), comm=comm)
    return _run(model, _as_state(state0, net), tspan, {})


def simulate_voltage_droop_ext(
    net, params, ext, comm=None, schedule=None, state0=None, tspan=(0.0, 1.0), opts=None, controller=DAPI
):
    """DAPI (or droop) loop on lossy lines with inverter voltages set by voltage droop.

    Inverter voltages satisfy ``E_i = E_i* - m_i (Q_e,i - Q_i*)`` at every instant. Load
    voltages are solved from reactive balance when the extension carries load reactive
    powers, and held at the network values otherwise.
    """
    opts = opts or SimOptions()
    if opts.mode != "newton":
        raise DomainError("the voltage-droop extension supports only newton mode")
    model = _ClosedLoop(net, params, controller, opts, _as_schedule(schedule, params), comm=comm, ext=ext)
    return _run(model, _as_state(state0, net), tspan, {"extension": True})


@dataclass(frozen=True)
class SyncMeasurement:
    omega_sync: float
    sync_error: float
    decay_rate: float


def _projected_error(traj, reference):
    dev = traj.theta - reference[None, :]
    # node angles are only defined modulo 2 pi
    dev = wrap_angle(dev - dev[:, :1])
    dev = dev - dev.mean(axis=1, keepdims=True)
    return np.linalg.norm(dev, axis=1)


def measure_sync(traj, window, reference=None, fit_range=(1e-1, 1e-6), noise_floor=1e-9):
    """Synchronization frequency, residual phase error and decay rate of a trajectory.

    ``omega_sync`` averages the angle rates over the final ``window`` seconds.
    ``sync_error`` is the largest line-angle deviation from ``reference`` over that window.
    ``decay_rate`` is minus the least-squares slope of ``log ||P(theta - reference)||``,
    with ``P`` removing the uniform rotation, over samples whose error lies between
    ``fit_range[1]`` and ``fit_range[0]`` times its peak (and above ``noise_floor``).
    The reference defaults to the final sample.
    """
    t = traj.t
    duration = t[-1] - t[0]
    if window <= 0 or window > duration:
        raise DomainError(f"window {window} s does not fit in a {duration} s trajectory")
    ref = traj.theta[-1] if reference is None else np.asarray(reference, dtype=float)
    mask = t >= t[-1] - window - 1e-12
    omega_sync = float(np.mean(traj.theta_dot[mask]))

    src = np.array([i for i, _ in traj.edges], dtype=int)
    snk = np.array([j for _, j in traj.edges], dtype=int)
    if src.size:
        line = traj.theta[:, snk] - traj.theta[:, src]
        ref_line = ref[snk] - ref[src]
        sync_error = float(np.max(np.abs(wrap_angle(line[mask] - ref_line))))
    else:
        sync_error = 0.0

    err = _projected_error(traj, ref)
    peak_at = int(np.argmax(err))
    peak = err[peak_at]
    decay = math.nan
    if peak > 0:
        hi, lo = fit_range[0] * peak, max(fit_range[1] * peak, noise_floor)
        tail = np.arange(peak_at, t.shape[0])
        sel = tail[(err[tail] <= hi) & (err[tail] >= lo)]
        # keep only the first contiguous run below hi, before the noise floor is reached
        if sel.size >= 3:
            breaks = np.flatnonzero(np.diff(sel) != 1)
            if breaks.size:
                sel = sel[: breaks[0] + 1]
        if sel.size >= 3:
            slope = np.polyfit(t[sel], np.log(err[sel]), 1)[0]
            decay = float(-slope)
    return SyncMeasurement(omega_sync=omega_sync, sync_error=sync_error, decay_rate=decay)
