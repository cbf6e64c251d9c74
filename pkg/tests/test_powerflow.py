import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from droopnet import (
    DomainError,
    LineExtension,
    NetworkModel,
    active_injections,
    coupling_weights,
    injection_jacobian,
    lossy_injections,
)
from droopnet.netgraph import INVERTER

from instances import random_network


def test_coupling_weights_table1_values():
    w = 2 * np.pi * 60
    net = NetworkModel.parallel(1 / (w * np.array([0.7e-3, 0.5e-3])), [120, 122], load_voltage=120)
    a = coupling_weights(net)
    assert a == pytest.approx([120 * 120 / (w * 0.7e-3), 120 * 122 / (w * 0.5e-3)], rel=1e-14)


def test_two_node_injection_sign():
    net = NetworkModel(kinds=[INVERTER, INVERTER], edges=[(0, 1)], susceptance=[2.0], voltages=[1.0, 1.5])
    P = active_injections(np.array([0.3, 0.0]), net)
    # node 0 leads, so it exports power
    assert P[0] == pytest.approx(3.0 * np.sin(0.3))
    assert P[1] == pytest.approx(-3.0 * np.sin(0.3))


def test_injection_shape_check():
    net = NetworkModel(kinds=[INVERTER, INVERTER], edges=[(0, 1)], susceptance=[1.0], voltages=[1.0, 1.0])
    with pytest.raises(DomainError):
        active_injections(np.zeros(3), net)


def _pairwise_injections(theta, net):
    """Direct double sum over neighbours, independent of the incidence matrix."""
    a = coupling_weights(net)
    P = np.zeros(net.n_nodes)
    for ell, (i, j) in enumerate(net.edges):
        P[i] += a[ell] * np.sin(theta[i] - theta[j])
        P[j] += a[ell] * np.sin(theta[j] - theta[i])
    return P


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_injections_match_pairwise_sum_and_conserve(n, seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n)
    theta = rng.uniform(-3, 3, n)
    P = active_injections(theta, net)
    assert np.allclose(P, _pairwise_injections(theta, net), atol=1e-12)
    assert abs(P.sum()) < 1e-12 * max(1.0, np.abs(P).max())
    # invariant under a common rotation
    assert np.allclose(active_injections(theta + 0.7, net), P, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_jacobian_matches_finite_differences(n, seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n)
    theta = rng.uniform(-1, 1, n)
    J = injection_jacobian(theta, net)
    h = 1e-6
    fd = np.column_stack(
        [(active_injections(theta + h * e, net) - active_injections(theta - h * e, net)) / (2 * h) for e in np.eye(n)]
    )
    assert np.allclose(J, fd, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_lossy_reduces_to_lossless(n, seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n)
    theta = rng.uniform(-1, 1, n)
    P, Q = lossy_injections(theta, net.voltages, net, LineExtension.lossless(net))
    assert np.allclose(P, active_injections(theta, net), atol=1e-12)
    # a lossless network consumes reactive power but no active power
    assert abs(P.sum()) < 1e-12


def test_lossy_matches_complex_power():
    """Compare with S = V conj(Y V) built from complex phasors."""
    rng = np.random.default_rng(3)
    net = random_network(rng, 5)
    g = rng.uniform(0.1, 1.0, net.n_edges)
    b = net.susceptance
    ext = LineExtension(conductance=g, E_star=np.ones(net.inverter_nodes.size), droop_gain=np.zeros(net.inverter_nodes.size), Q_star=np.zeros(net.inverter_nodes.size))
    theta = rng.uniform(-0.5, 0.5, 5)
    E = rng.uniform(0.9, 1.1, 5)
    Y = np.zeros((5, 5), dtype=complex)
    for ell, (i, j) in enumerate(net.edges):
        y = g[ell] - 1j * b[ell]
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    V = E * np.exp(1j * theta)
    S = V * np.conj(Y @ V)
    P, Q = lossy_injections(theta, E, net, ext)
    assert np.allclose(P, S.real, atol=1e-12)
    assert np.allclose(Q, S.imag, atol=1e-12)
    # losses are positive with conductance present
    assert P.sum() > 0


def test_line_extension_validation():
    net = NetworkModel.parallel([1.0, 1.0], [1.0, 1.0])
    with pytest.raises(DomainError):
        LineExtension(conductance=[-1.0, 0.0], E_star=[1, 1], droop_gain=[0, 0], Q_star=[0, 0])
    with pytest.raises(DomainError):
        LineExtension(conductance=[0.0, 0.0], E_star=[1, 1], droop_gain=[0], Q_star=[0, 0])
    ext = LineExtension(conductance=[0.0], E_star=[1, 1], droop_gain=[0, 0], Q_star=[0, 0])
    with pytest.raises(DomainError):
        ext.check(net)
