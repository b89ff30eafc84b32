"""Scikit-learn style wrapper around the relaxed GLRT.

Each sample passed to :meth:`TopologyVerifier.predict` is one observation
window: an array of shape ``(T_a, 2N + L)`` holding snapshots in the
channel order pressure, injection, flow.  Only the estimator conventions
that fit a hypothesis test are provided: constructor parameters,
``get_params``/``set_params``, ``fit`` (which solves the believed topology
and sets the noise model) and ``predict``/``decision_function``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .network import load_network, physical_topology, solve_steady_state
from .sensing import NoiseModel, ObservationSet, SensorPlacement, rsd_to_noise
from .verify import RelaxedSolver, efficient_verify, enumerate_topologies, relaxed_glrt

__all__ = ["TopologyVerifier"]


class TopologyVerifier(BaseEstimator):
    """Decide whether data windows agree with a believed topology.

    Parameters
    ----------
    network : str
        Shipped network name or path to a network file.
    h0 : str
        Believed open/closed pattern of the changeable pipelines, e.g. ``"CCO"``.
    rsd : float
        Relative noise level used when ``noise`` is None.
    noise : tuple of float, optional
        ``(sigma_p, sigma_q, sigma_phi)``.
    algorithm : {"relaxed", "efficient"}
    p_fa : float
        Target false-alarm rate of the asymptotic threshold.
    """

    def __init__(self, network="network1", h0="CCC", rsd=0.1, noise=None,
                 algorithm="relaxed", p_fa=1e-3):
        self.network = network
        self.h0 = h0
        self.rsd = rsd
        self.noise = noise
        self.algorithm = algorithm
        self.p_fa = p_fa

    def fit(self, X=None, y=None):
        """Solve the believed topology and fix the noise model; ``X`` is unused."""
        if self.algorithm not in ("relaxed", "efficient"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        net = load_network(self.network)
        closed = [c == "C" for c in self.h0.upper()]
        self.network_ = net
        self.placement_ = SensorPlacement.default(net)
        self.A_H0_ = physical_topology(net, closed)
        state = solve_steady_state(net, self.A_H0_)
        self.noise_ = NoiseModel(*self.noise) if self.noise is not None else \
            rsd_to_noise(self.rsd, state, self.placement_)
        self.candidates_ = enumerate_topologies(net)
        self.n_channels_ = 2 * net.N + net.L
        return self

    def _check(self, X):
        if not hasattr(self, "network_"):
            raise RuntimeError("call fit before predict")
        windows = [np.asarray(x, dtype=float) for x in X]
        for w in windows:
            if w.ndim != 2 or w.shape[1] != self.n_channels_:
                raise ValueError(f"each window must have shape (T_a, {self.n_channels_})")
        return windows

    def _report(self, w):
        N = self.network_.N
        obs = ObservationSet.from_slices(w[:, :N], w[:, N:2 * N], w[:, 2 * N:])
        solver = RelaxedSolver(self.network_, self.placement_, self.noise_, obs)
        args = (obs, self.network_, self.placement_, self.noise_, self.A_H0_)
        if self.algorithm == "efficient":
            return efficient_verify(*args, candidates=self.candidates_, p_fa=self.p_fa,
                                    solver=solver)
        return relaxed_glrt(*args, self.candidates_, p_fa=self.p_fa, solver=solver)

    def decision_function(self, X) -> np.ndarray:
        """GLRT statistic minus ``ln rho`` per window (positive means H1)."""
        return np.array([r.statistic - r.threshold for r in map(self._report, self._check(X))])

    def predict(self, X) -> np.ndarray:
        """``"H0"`` or ``"H1"`` per window."""
        return np.array([r.decision for r in map(self._report, self._check(X))])
