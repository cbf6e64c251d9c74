"""Estimator-style wrappers: construct with settings, ``fit`` to a network, then query.

Hyperparameters live in ``__init__`` and are exposed through ``get_params`` /
``set_params``; everything learned from the data carries a trailing underscore.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .analysis import check_sync, dapi_equilibrium, power_imbalance, search_equilibrium, steady_injections
from .dynamics import SimOptions, simulate_dapi, simulate_droop

_FITTED = ("net_", "params_", "report_")


def _load_matrix(X, n_loads):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, n_loads) if n_loads else X.reshape(-1, 0)
    if X.ndim != 2 or X.shape[1] != n_loads:
        raise ValueError(f"expected load rows of width {n_loads}, got shape {X.shape}")
    return X


class SyncAnalyzer(BaseEstimator):
    """Closed-form synchronization analysis of a fixed network.

    ``predict`` and ``decision_function`` take load scenarios, one row per scenario with
    one column per load node (W).
    """

    def __init__(self, n_seeds=50, random_state=None):
        self.n_seeds = n_seeds
        self.random_state = random_state

    def fit(self, net, params):
        self.net_ = net
        self.params_ = params
        self.report_ = check_sync(net, params)
        self.omega_avg_ = self.report_.omega_avg
        self.stress_ = self.report_.stress
        self.feasible_ = self.report_.feasible
        self.edge_flows_ = self.report_.edge_flows
        self.equilibrium_ = self.report_.equilibrium
        self.rate_bound_ = self.report_.rate_bound
        return self

    def predict(self, X):
        """Steady-state nodal injections ``P* - omega_avg D`` for each load row."""
        check_is_fitted(self, _FITTED)
        X = _load_matrix(X, self.params_.P_load.shape[0])
        out = np.empty((X.shape[0], self.net_.n_nodes))
        for r, row in enumerate(X):
            out[r] = steady_injections(self.net_, self.params_.with_loads(row))
        return out

    def decision_function(self, X):
        """``1 - stress`` per load row; positive means a synchronized state exists."""
        check_is_fitted(self, _FITTED)
        X = _load_matrix(X, self.params_.P_load.shape[0])
        return np.array([1.0 - check_sync(self.net_, self.params_.with_loads(row)).stress for row in X])

    def frequencies(self, X):
        """Synchronous frequency (rad/s) for each load row."""
        check_is_fitted(self, _FITTED)
        X = _load_matrix(X, self.params_.P_load.shape[0])
        return np.array([power_imbalance(self.params_.with_loads(row)) for row in X])

    def search(self):
        """Multi-start Newton search for an equilibrium; ``None`` when none is found."""
        check_is_fitted(self, _FITTED)
        return search_equilibrium(self.net_, self.params_, n_seeds=self.n_seeds, rng=self.random_state)


class _SimulatorBase(BaseEstimator):
    def __init__(self, method="rk4", mode="newton", frame="nominal", step=None, sample_dt=1e-2, rtol=1e-8, atol=1e-10, eps=None):
        self.method = method
        self.mode = mode
        self.frame = frame
        self.step = step
        self.sample_dt = sample_dt
        self.rtol = rtol
        self.atol = atol
        self.eps = eps

    def _options(self):
        return SimOptions(
            method=self.method,
            mode=self.mode,
            frame=self.frame,
            step=self.step,
            sample_dt=self.sample_dt,
            rtol=self.rtol,
            atol=self.atol,
            eps=self.eps,
        )


class DroopSimulator(_SimulatorBase):
    """Primary droop closed loop as an estimator."""

    def fit(self, net, params):
        self._options()
        self.net_ = net
        self.params_ = params
        self.report_ = check_sync(net, params)
        return self

    def simulate(self, theta0=None, tspan=(0.0, 1.0), schedule=None):
        check_is_fitted(self, _FITTED)
        return simulate_droop(self.net_, self.params_, schedule, theta0, tspan, self._options())


class DAPISimulator(_SimulatorBase):
    """DAPI closed loop as an estimator; ``fit`` also takes the communication graph."""

    def fit(self, net, params, comm):
        self._options()
        self.net_ = net
        self.params_ = params
        self.comm_ = comm
        self.report_ = check_sync(net, params)
        if self.report_.feasible:
            self.p_equilibrium_ = dapi_equilibrium(net, params, self.report_)
        return self

    def simulate(self, state0=None, tspan=(0.0, 1.0), schedule=None):
        check_is_fitted(self, _FITTED + ("comm_",))
        return simulate_dapi(self.net_, self.params_, self.comm_, schedule, state0, tspan, self._options())
