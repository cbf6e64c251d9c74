import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import fsolve

from droopnet import (
    CommGraph,
    DomainError,
    DroopParams,
    InfeasibleError,
    NetworkModel,
    PreconditionError,
    StructuralError,
    SyncReport,
    active_injections,
    check_sync,
    classify_spectrum,
    coupling_weights,
    dapi_equilibrium,
    dapi_spectrum,
    droop_jacobian_spectrum,
    is_proportional,
    parallel_condition,
    power_imbalance,
    proportional_params,
    robust_condition,
    robust_stress,
    search_equilibrium,
    sharing_check,
    steady_injections,
)
from droopnet.netgraph import INVERTER, LOAD

from instances import frame_aligned_error, random_comm, random_instance, random_star, scale_to_stress


def table1(load=-2500.0):
    w = 2 * np.pi * 60
    net = NetworkModel.parallel(1 / (w * np.array([0.7e-3, 0.5e-3])), [120, 122], load_voltage=120)
    params = DroopParams(D=[4000, 6000], P_star=[2000, 3000], P_load=[load], ratings=[2000, 3000], k=[1e-6, 1e-6])
    return net, params


def test_table1_closed_form_half_load():
    net, params = table1(-2500)
    rep = check_sync(net, params)
    assert rep.omega_avg == pytest.approx(0.25, abs=1e-12)
    assert rep.edge_flows == pytest.approx([1000, 1500], abs=1e-9)
    assert rep.feasible
    share = sharing_check(net, params, rep)
    assert share.injections == pytest.approx([1000, 1500], abs=1e-9)
    assert share.ratios == pytest.approx([0.5, 0.5], abs=1e-12)
    assert share.ratios_equal and share.within_limits and not share.at_rating


def test_table1_closed_form_full_load():
    net, params = table1(-5000)
    rep = check_sync(net, params)
    assert rep.omega_avg == pytest.approx(0.0, abs=1e-12)
    share = sharing_check(net, params, rep)
    assert share.injections == pytest.approx([2000, 3000], abs=1e-9)
    assert share.ratios == pytest.approx([1.0, 1.0], abs=1e-12)
    assert share.at_rating and share.within_limits


def test_table1_overload_violates_load_constraint():
    net, params = table1(-6000)
    share = sharing_check(net, params, check_sync(net, params))
    assert not share.within_limits
    assert share.ratios == pytest.approx([1.2, 1.2])


def test_sharing_requires_proportional_selection():
    net, _ = table1()
    params = DroopParams(D=[4000, 4000], P_star=[2000, 3000], P_load=[-2500], ratings=[2000, 3000])
    assert not is_proportional(params)
    with pytest.raises(PreconditionError, match="proportional"):
        sharing_check(net, params, check_sync(net, params))
    share = sharing_check(net, params, check_sync(net, params), require_proportional=False)
    assert not share.ratios_equal


def test_sharing_rejects_infeasible():
    net = NetworkModel(kinds=[LOAD, INVERTER], edges=[(0, 1)], susceptance=[1.0], voltages=[10.0, 10.0])
    params = DroopParams(D=[100.0], P_star=[100.0], P_load=[-150.0], ratings=[200.0])
    rep = check_sync(net, params)
    assert rep.stress == pytest.approx(1.5)
    assert not rep.feasible
    with pytest.raises(InfeasibleError):
        sharing_check(net, params, rep)


def test_stress_on_boundary_is_infeasible():
    net = NetworkModel(kinds=[LOAD, INVERTER], edges=[(0, 1)], susceptance=[1.0], voltages=[10.0, 10.0])
    params = DroopParams(D=[100.0], P_star=[0.0], P_load=[-100.0])
    rep = check_sync(net, params)
    assert rep.stress == 1.0 and not rep.feasible


def test_cyclic_network_rejected():
    net = NetworkModel(kinds=[INVERTER] * 3, edges=[(0, 1), (1, 2), (2, 0)], susceptance=[1, 1, 1], voltages=[1, 1, 1])
    with pytest.raises(StructuralError):
        check_sync(net, DroopParams(D=[1, 1, 1], P_star=[0, 0, 0], P_load=[]))


def test_balanced_power_zero_frequency_zero_flows():
    net, params = table1(-5000)
    params = DroopParams(D=params.D, P_star=[0, 0], P_load=[0])
    rep = check_sync(net, params)
    assert rep.stress == 0 and np.all(rep.equilibrium == 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_equilibrium_solves_power_balance(seed):
    rng = np.random.default_rng(seed)
    net, params = random_instance(rng, stress_range=(0.05, 0.99))
    rep = check_sync(net, params)
    assert rep.feasible
    P = active_injections(rep.equilibrium, net)
    target = steady_injections(net, params)
    assert np.max(np.abs(P - target)) <= 1e-9 * max(1.0, np.max(np.abs(target)))
    # every line angle inside the arc
    d = np.array([rep.equilibrium[j] - rep.equilibrium[i] for i, j in net.edges])
    assert np.all(np.abs(d) <= rep.arc + 1e-12)
    assert rep.arc == pytest.approx(math.asin(rep.stress))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rate_bound_formula(seed):
    rng = np.random.default_rng(seed)
    net, params = random_instance(rng, stress_range=(0.05, 0.99))
    rep = check_sync(net, params)
    a = coupling_weights(net)
    L = np.zeros((net.n_nodes, net.n_nodes))
    for w, (i, j) in zip(a, net.edges):
        L[i, i] += w
        L[j, j] += w
        L[i, j] -= w
        L[j, i] -= w
    lam2 = np.sort(np.linalg.eigvalsh(L))[1]
    assert rep.rate_bound == pytest.approx(lam2 / params.D.max() * math.sqrt(1 - rep.stress**2), rel=1e-10)


def _reduced_droop_field(net, params):
    """Inverter angle rates with load angles from a generic root finder."""
    inv, loads = net.inverter_nodes, net.load_nodes
    P_nom = params.nodal_injections(net)
    guess = {"x": np.zeros(loads.size)}

    def full(th_I):
        def g(x):
            th = np.zeros(net.n_nodes)
            th[inv], th[loads] = th_I, x
            return (P_nom - active_injections(th, net))[loads]

        x = fsolve(g, guess["x"], xtol=1e-12) if loads.size else np.zeros(0)
        th = np.zeros(net.n_nodes)
        th[inv], th[loads] = th_I, x
        return th

    def f(th_I):
        th = full(th_I)
        return (P_nom - active_injections(th, net))[inv] / params.D

    return f, full


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_droop_spectrum_matches_finite_difference_jacobian(seed):
    rng = np.random.default_rng(seed)
    net, params = random_instance(rng, n_max=8, stress_range=(0.05, 0.9))
    rep = check_sync(net, params)
    f, _ = _reduced_droop_field(net, params)
    th_I = rep.equilibrium[net.inverter_nodes]
    h = 1e-6
    J = np.column_stack([(f(th_I + h * e) - f(th_I - h * e)) / (2 * h) for e in np.eye(th_I.size)])
    ev_fd = np.sort(np.linalg.eigvals(J).real)
    ev = droop_jacobian_spectrum(net, params, rep.equilibrium)
    scale = np.max(np.abs(ev))
    assert np.allclose(ev, ev_fd, atol=1e-5 * scale)
    verdict = classify_spectrum(ev)
    assert verdict.n_zero == 1 and verdict.n_positive == 0 and verdict.stable


def test_two_inverter_droop_eigenvalue():
    net = NetworkModel(kinds=[INVERTER, INVERTER], edges=[(0, 1)], susceptance=[2.0], voltages=[1.0, 1.0])
    params = DroopParams(D=[1.0, 3.0], P_star=[0.5, -0.5], P_load=[])
    rep = check_sync(net, params)
    delta = rep.equilibrium[1] - rep.equilibrium[0]
    ev = droop_jacobian_spectrum(net, params, rep.equilibrium)
    assert ev[-1] == pytest.approx(0.0, abs=1e-12)
    assert ev[0] == pytest.approx(-2.0 * math.cos(delta) * (1 / 1.0 + 1 / 3.0), rel=1e-12)


def test_single_inverter_single_load_spectrum_is_zero():
    net = NetworkModel(kinds=[LOAD, INVERTER], edges=[(0, 1)], susceptance=[1.0], voltages=[1.0, 1.0])
    params = DroopParams(D=[1.0], P_star=[0.0], P_load=[-0.3])
    ev = droop_jacobian_spectrum(net, params, check_sync(net, params).equilibrium)
    assert ev == pytest.approx([0.0], abs=1e-12)


def _dapi_field(net, params, comm):
    f_droop, full = _reduced_droop_field(net, params)
    inv = net.inverter_nodes
    P_nom = params.nodal_injections(net)
    m = inv.size

    def f(y):
        th_I, p = y[:m], y[m:]
        th = full(th_I)
        Pe = active_injections(th, net)[inv]
        dth = (P_nom[inv] - p - Pe) / params.D
        dp = (P_nom[inv] - p - Pe - comm.laplacian @ (p / params.D)) / params.k
        return np.concatenate([dth, dp])

    return f


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dapi_spectrum_matches_finite_difference_jacobian(seed):
    rng = np.random.default_rng(seed)
    net, params = random_instance(rng, n_max=7, stress_range=(0.05, 0.9))
    comm = random_comm(rng, params.n_inverters)
    rep = check_sync(net, params)
    p_eq = dapi_equilibrium(net, params, rep)
    f = _dapi_field(net, params, comm)
    y0 = np.concatenate([rep.equilibrium[net.inverter_nodes], p_eq])
    assert np.max(np.abs(f(y0))) < 1e-8
    h = 1e-6
    J = np.column_stack([(f(y0 + h * e) - f(y0 - h * e)) / (2 * h) for e in np.eye(y0.size)])
    ev_fd = np.linalg.eigvals(J)
    ev = dapi_spectrum(net, params, comm, rep.equilibrium)
    scale = np.max(np.abs(ev))
    for lam in ev:
        assert np.min(np.abs(ev_fd - lam)) < 1e-5 * scale
    assert classify_spectrum(ev).stable


def test_dapi_table1_spectrum_structure():
    net, params = table1()
    comm = CommGraph.from_edges(2, [(0, 1)], [1000.0])
    rep = check_sync(net, params)
    ev = dapi_spectrum(net, params, comm, rep.equilibrium)
    v = classify_spectrum(ev)
    assert (v.n_zero, v.n_negative, v.n_positive) == (1, 3, 0)
    assert np.all(np.abs(ev.imag) < 1e-7 * np.max(np.abs(ev)))
    assert dapi_equilibrium(net, params, rep) == pytest.approx([1000, 1500])


def test_dapi_requires_connected_comm_and_k():
    net, params = table1()
    rep = check_sync(net, params)
    with pytest.raises(StructuralError):
        dapi_spectrum(net, params, CommGraph(np.zeros((2, 2))), rep.equilibrium)
    no_k = DroopParams(D=params.D, P_star=params.P_star, P_load=params.P_load)
    with pytest.raises(DomainError):
        dapi_spectrum(net, no_k, CommGraph.from_edges(2, [(0, 1)], [1.0]), rep.equilibrium)


def test_comm_graph_validation():
    with pytest.raises(DomainError):
        CommGraph(np.array([[1.0, -2.0], [-2.0, 1.0]]))
    with pytest.raises(DomainError):
        CommGraph(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert CommGraph.from_edges(3, [(0, 1), (1, 2)], [1, 2]).connected
    assert not CommGraph.from_edges(3, [(0, 1)], [1]).connected


def test_classify_spectrum_counts():
    v = classify_spectrum(np.array([-3.0, -1.0, 1e-12, 2.0]))
    assert (v.n_zero, v.n_negative, v.n_positive, v.stable) == (1, 2, 1, False)
    v = classify_spectrum(np.array([-3.0 + 1j, -3.0 - 1j, 0.0]))
    assert not v.stable and v.max_relative_imag > 0.1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_parallel_condition_equals_general_stress(seed):
    net, params = random_star(np.random.default_rng(seed))
    assert parallel_condition(net, params) == pytest.approx(check_sync(net, params).stress, rel=1e-12, abs=1e-15)


def test_parallel_condition_rejects_non_star():
    net = NetworkModel(kinds=[LOAD, INVERTER, INVERTER], edges=[(0, 1), (1, 2)], susceptance=[1, 1], voltages=[1, 1, 1])
    with pytest.raises(StructuralError):
        parallel_condition(net, DroopParams(D=[1, 1], P_star=[0, 0], P_load=[0]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_robust_stress_dominates_admissible_draws(seed):
    rng = np.random.default_rng(seed)
    net, params = random_instance(rng, stress_range=(0.05, 0.6))
    E_low = net.voltages * rng.uniform(0.8, 1.0, net.n_nodes)
    Y_low = net.susceptance * rng.uniform(0.8, 1.0, net.n_edges)
    bound = robust_stress(net, params, E_low, Y_low)
    for _ in range(5):
        E = E_low * rng.uniform(1.0, 1.3, net.n_nodes)
        Y = Y_low * rng.uniform(1.0, 1.3, net.n_edges)
        drawn = NetworkModel(kinds=net.kinds, edges=net.edges, susceptance=Y, voltages=E)
        assert check_sync(drawn, params).stress <= bound * (1 + 1e-12)


def test_robust_bounds_must_not_exceed_nominal():
    net, params = table1()
    with pytest.raises(DomainError):
        robust_stress(net, params, net.voltages * 1.1, net.susceptance)


def test_robust_condition_single_edge_scaling():
    net = NetworkModel(kinds=[LOAD, INVERTER], edges=[(0, 1)], susceptance=[2.0], voltages=[3.0, 4.0])
    params = DroopParams(D=[1.0], P_star=[0.0], P_load=[-5.0])
    # stress = 5 / (E_i E_j Y)
    assert check_sync(net, params).stress == pytest.approx(5.0 / 24.0, rel=1e-15)
    assert robust_stress(net, params, [1.5, 2.0], [1.0]) == pytest.approx(5.0 / 3.0, rel=1e-15)
    assert not robust_condition(net, params, [1.5, 2.0], [1.0])


@pytest.mark.parametrize("c", [0.1, 10.0])
def test_scaling_droop_constants(c):
    rng = np.random.default_rng(11)
    for _ in range(10):
        net, params = random_instance(rng, stress_range=(0.05, 0.95))
        a, b = check_sync(net, params), check_sync(net, params.scaled(c))
        assert np.allclose(a.edge_flows, b.edge_flows, rtol=1e-12, atol=1e-15)
        assert b.stress == pytest.approx(a.stress, rel=1e-12)
        assert np.allclose(a.equilibrium, b.equilibrium, rtol=1e-12, atol=1e-15)
        assert b.omega_avg == pytest.approx(a.omega_avg / c, rel=1e-14)


def test_search_finds_equilibrium_when_feasible():
    rng = np.random.default_rng(5)
    net, params = random_instance(rng, stress_range=(0.5, 0.9))
    rep = check_sync(net, params)
    theta = search_equilibrium(net, params, rng=1)
    assert theta is not None
    assert frame_aligned_error(theta, rep.equilibrium) < 1e-8


def test_search_finds_nothing_when_infeasible():
    net = NetworkModel(kinds=[LOAD, INVERTER], edges=[(0, 1)], susceptance=[1.0], voltages=[10.0, 10.0])
    params = DroopParams(D=[100.0], P_star=[100.0], P_load=[-150.0])
    assert search_equilibrium(net, params, rng=0) is None


def test_power_imbalance_requires_inverter():
    with pytest.raises(DomainError):
        power_imbalance(DroopParams(D=[], P_star=[], P_load=[-1.0]))


def test_proportional_params():
    p = proportional_params([2000, 3000], 0.5, 2.0)
    assert p.P_star.tolist() == [1000, 1500] and p.D.tolist() == [4000, 6000]
    assert is_proportional(p)
    with pytest.raises(DomainError):
        proportional_params([1, 2], 1.5, 1.0)


def test_ratings_bound_nominal_power():
    with pytest.raises(DomainError):
        DroopParams(D=[1.0], P_star=[3.0], P_load=[], ratings=[2.0])


def test_report_round_trip_through_json():
    net, params = table1()
    rep = check_sync(net, params)
    back = SyncReport.from_dict(json.loads(json.dumps(rep.to_dict())))
    assert back.to_dict() == rep.to_dict()
    assert back.stress == rep.stress and np.array_equal(back.equilibrium, rep.equilibrium)


def test_scale_to_stress_hits_target():
    rng = np.random.default_rng(0)
    net, params = random_instance(rng)
    assert check_sync(net, scale_to_stress(net, params, 0.37)).stress == pytest.approx(0.37, rel=1e-12)
