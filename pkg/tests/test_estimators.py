import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from droopnet import DAPISimulator, DroopSimulator, SimState, SyncAnalyzer, check_sync, steady_injections
from droopnet.scenario import bundled, load


@pytest.fixture(scope="module")
def table1():
    return load(bundled("table1"))


def test_params_round_trip():
    est = SyncAnalyzer(n_seeds=7, random_state=3)
    assert est.get_params() == {"n_seeds": 7, "random_state": 3}
    other = clone(est).set_params(n_seeds=9)
    assert other.n_seeds == 9 and est.n_seeds == 7
    sim = DroopSimulator(method="adaptive", sample_dt=0.5)
    assert clone(sim).get_params() == sim.get_params()
    assert set(DAPISimulator().get_params()) == {"method", "mode", "frame", "step", "sample_dt", "rtol", "atol", "eps"}


def test_unfitted_raises(table1):
    with pytest.raises(NotFittedError):
        SyncAnalyzer().predict([[-1.0]])
    with pytest.raises(NotFittedError):
        DroopSimulator().simulate()
    with pytest.raises(NotFittedError):
        DAPISimulator().simulate()


def test_analyzer_matches_functional_core(table1):
    s = table1
    est = SyncAnalyzer().fit(s.net, s.params)
    rep = check_sync(s.net, s.params)
    assert est.omega_avg_ == rep.omega_avg and est.stress_ == rep.stress and est.feasible_
    X = np.array([[-2500.0], [-5000.0], [-6000.0]])
    pred = est.predict(X)
    assert pred[0] == pytest.approx(steady_injections(s.net, s.params))
    assert pred[1, s.net.inverter_nodes] == pytest.approx([2000, 3000])
    assert est.frequencies(X) == pytest.approx([0.25, 0.0, -0.1])
    assert np.all(est.decision_function(X) > 0)
    assert est.search() is not None
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 3)))


def test_droop_simulator_uses_hyperparameters(table1):
    s = table1
    sim = DroopSimulator(frame="rotating", sample_dt=0.1).fit(s.net, s.params)
    tr = sim.simulate(np.zeros(3), (0, 2))
    assert tr.t.size == 21
    assert np.abs(tr.theta_dot[-1]).max() < 1e-6
    assert tr.metadata["options"]["frame"] == "rotating"


def test_dapi_simulator(table1):
    s = table1
    sim = DAPISimulator(method="adaptive", sample_dt=0.25).fit(s.net, s.params, s.comm)
    assert sim.p_equilibrium_ == pytest.approx([1000, 1500])
    tr = sim.simulate(SimState(theta=sim.report_.equilibrium, p=sim.p_equilibrium_), (0, 1))
    assert np.abs(tr.theta_dot).max() < 1e-9


def test_invalid_hyperparameter_fails_at_fit(table1):
    with pytest.raises(Exception, match="method"):
        DroopSimulator(method="euler").fit(table1.net, table1.params)
