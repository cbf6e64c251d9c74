"""Coupling weights and nodal power injections.

Units are SI throughout: W, var, V, S, rad. The lossy/reactive branch model is the
standard polar AC power flow and is used only by the voltage-droop simulation.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DomainError
from .validation import check_vector


def coupling_weights(net):
    """Per-line coupling ``a_ij = E_i E_j |Y_ij|`` in watts."""
    E = net.voltages
    return E[net.sources] * E[net.sinks] * net.susceptance


def active_injections(theta, net, weights=None):
    """Active power injected at every node of a lossless network.

    ``P_i = sum_j a_ij sin(theta_i - theta_j)``, equivalently ``B diag(a) sin(B^T theta)``.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (net.n_nodes,):
        raise DomainError(f"theta must have shape ({net.n_nodes},), got {theta.shape}")
    a = coupling_weights(net) if weights is None else np.asarray(weights, dtype=float)
    src, snk = net.sources, net.sinks
    flow = a * np.sin(theta[snk] - theta[src])
    P = np.zeros(net.n_nodes)
    np.add.at(P, snk, flow)
    np.add.at(P, src, -flow)
    return P


def injection_jacobian(theta, net, weights=None):
    """``dP/dtheta``: the angle-dependent Laplacian ``B diag(a cos(B^T theta)) B^T``."""
    a = coupling_weights(net) if weights is None else np.asarray(weights, dtype=float)
    src, snk = net.sources, net.sinks
    c = a * np.cos(theta[snk] - theta[src])
    n = net.n_nodes
    J = np.zeros((n, n))
    np.add.at(J, (src, src), c)
    np.add.at(J, (snk, snk), c)
    np.add.at(J, (src, snk), -c)
    np.add.at(J, (snk, src), -c)
    return J


@dataclass(frozen=True, eq=False)
class LineExtension:
    """Lossy-line and voltage-droop data for the extended simulation.

    Parameters
    ----------
    conductance : array-like, shape (n_edges,)
        Series conductance magnitudes in siemens (>= 0).
    E_star, droop_gain, Q_star : array-like, shape (n_inverters,)
        Nominal voltage (V), voltage-droop slope ``m_i`` (V/var, >= 0) and nominal
        reactive injection (var) per inverter.
    susceptance : array-like, shape (n_edges,), optional
        Series susceptance magnitudes to use instead of the network's. Lets the lossy
        model use ``1/(R + jX)`` while the feasibility analysis keeps ``1/X``.
    load_Q : array-like, shape (n_loads,), optional
        Constant reactive load powers (var). When given, load voltages become unknowns
        solved from reactive balance; otherwise they stay at the network values.
    load_Q_schedule : LoadSchedule, optional
        Piecewise-constant reactive loads; overrides ``load_Q`` in simulation.
    """

    conductance: np.ndarray
    E_star: np.ndarray
    droop_gain: np.ndarray
    Q_star: np.ndarray
    susceptance: np.ndarray = field(default=None)
    load_Q: np.ndarray = field(default=None)
    load_Q_schedule: object = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "conductance", check_vector(self.conductance, "conductance", nonnegative=True))
        object.__setattr__(self, "E_star", check_vector(self.E_star, "E_star", positive=True))
        object.__setattr__(self, "droop_gain", check_vector(self.droop_gain, "droop_gain", nonnegative=True))
        object.__setattr__(self, "Q_star", check_vector(self.Q_star, "Q_star"))
        m = self.E_star.shape[0]
        if self.droop_gain.shape[0] != m or self.Q_star.shape[0] != m:
            raise DomainError("E_star, droop_gain and Q_star need one entry per inverter")
        if self.susceptance is not None:
            object.__setattr__(self, "susceptance", check_vector(self.susceptance, "susceptance", positive=True))
        if self.load_Q is not None:
            object.__setattr__(self, "load_Q", check_vector(self.load_Q, "load_Q"))

    @classmethod
    def lossless(cls, net, droop_gain=0.0, Q_star=0.0):
        """Zero conductance, ``E_star`` at the network's inverter voltages."""
        m = net.inverter_nodes.shape[0]
        return cls(
            conductance=np.zeros(net.n_edges),
            E_star=net.voltages[net.inverter_nodes],
            droop_gain=np.broadcast_to(droop_gain, (m,)),
            Q_star=np.broadcast_to(Q_star, (m,)),
        )

    def check(self, net):
        m = net.inverter_nodes.shape[0]
        if self.conductance.shape[0] != net.n_edges:
            raise DomainError("conductance needs one entry per line")
        if self.susceptance is not None and self.susceptance.shape[0] != net.n_edges:
            raise DomainError("susceptance override needs one entry per line")
        if self.E_star.shape[0] != m:
            raise DomainError("voltage-droop data needs one entry per inverter")
        if self.load_Q is not None and self.load_Q.shape[0] != net.load_nodes.shape[0]:
            raise DomainError("load_Q needs one entry per load")
        return self

    def line_susceptance(self, net):
        return net.susceptance if self.susceptance is None else self.susceptance


def lossy_injections(theta, E, net, ext):
    """Active and reactive nodal injections for series lines ``g - j b``.

    For a line between ``i`` and ``j`` with ``theta_ij = theta_i - theta_j``::

        P_i += g E_i^2 - g E_i E_j cos(theta_ij) + b E_i E_j sin(theta_ij)
        Q_i += b E_i^2 - g E_i E_j sin(theta_ij) - b E_i E_j cos(theta_ij)

    With ``g = 0`` and ``b = |Y|`` the active part equals :func:`active_injections`.
    """
    theta = np.asarray(theta, dtype=float)
    E = np.asarray(E, dtype=float)
    g = ext.conductance
    b = ext.line_susceptance(net)
    i, j = net.sources, net.sinks
    d = theta[i] - theta[j]
    EiEj = E[i] * E[j]
    s, c = np.sin(d), np.cos(d)
    P = np.zeros(net.n_nodes)
    Q = np.zeros(net.n_nodes)
    np.add.at(P, i, g * E[i] ** 2 - g * EiEj * c + b * EiEj * s)
    np.add.at(P, j, g * E[j] ** 2 - g * EiEj * c - b * EiEj * s)
    np.add.at(Q, i, b * E[i] ** 2 - g * EiEj * s - b * EiEj * c)
    np.add.at(Q, j, b * E[j] ** 2 + g * EiEj * s - b * EiEj * c)
    return P, Q
