"""Sensor placements, the Gaussian measurement model and observation data.

Observations are summarised by per-channel sums and sums of squares, which
is all the likelihood and the lifted objective ever need.  An
:class:`ObservationSet` may carry the individual time slices as well; an
:class:`ObservationBatch` stacks the statistics of many Monte-Carlo runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .network import GasNetwork, SteadyState

__all__ = [
    "SensorPlacement",
    "NoiseModel",
    "ObservationSet",
    "ObservationBatch",
    "rsd_to_noise",
    "run_generator",
    "generate_observations",
    "sample_statistics",
]


def _binary(v, n, name):
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.shape != (n,):
        raise ValueError(f"{name} must have length {n}, got {arr.shape[0]}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} entries must be 0 or 1")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class SensorPlacement:
    """Indicator vectors of the installed sensors.

    Parameters
    ----------
    delta_F, delta_C : array_like
        Flow meters on fixed and on changeable pipelines.
    delta_p, delta_q : array_like
        Pressure and injection sensors on the non-reference nodes.
    """

    delta_F: np.ndarray
    delta_C: np.ndarray
    delta_p: np.ndarray
    delta_q: np.ndarray

    @classmethod
    def from_network(cls, network: GasNetwork, *, delta_F=None, delta_C=None,
                     delta_p=None, delta_q=None) -> "SensorPlacement":
        def pick(v, n):
            return np.zeros(n) if v is None else v

        return cls(
            _binary(pick(delta_F, network.L_F), network.L_F, "delta_F"),
            _binary(pick(delta_C, network.L_C), network.L_C, "delta_C"),
            _binary(pick(delta_p, network.N), network.N, "delta_p"),
            _binary(pick(delta_q, network.N), network.N, "delta_q"),
        )

    @classmethod
    def default(cls, network: GasNetwork) -> "SensorPlacement":
        """Pressure and injection at every node, flow on every fixed pipeline."""
        return cls.from_network(
            network,
            delta_F=np.ones(network.L_F),
            delta_p=np.ones(network.N),
            delta_q=np.ones(network.N),
        )

    @classmethod
    def full(cls, network: GasNetwork) -> "SensorPlacement":
        """Every possible sensor."""
        return cls.from_network(
            network,
            delta_F=np.ones(network.L_F),
            delta_C=np.ones(network.L_C),
            delta_p=np.ones(network.N),
            delta_q=np.ones(network.N),
        )

    @classmethod
    def all_pressure(cls, network: GasNetwork) -> "SensorPlacement":
        return cls.from_network(network, delta_p=np.ones(network.N))

    @classmethod
    def from_vector(cls, network: GasNetwork, delta) -> "SensorPlacement":
        """Inverse of :attr:`vector` (order p, q, F, C)."""
        d = np.asarray(delta, dtype=float)
        N, LF = network.N, network.L_F
        return cls.from_network(
            network,
            delta_p=d[:N],
            delta_q=d[N:2 * N],
            delta_F=d[2 * N:2 * N + LF],
            delta_C=d[2 * N + LF:],
        )

    @property
    def delta_phi(self) -> np.ndarray:
        return np.concatenate([self.delta_F, self.delta_C])

    @property
    def delta(self) -> np.ndarray:
        """All indicators stacked as (phi_F, phi_C, p, q)."""
        return np.concatenate([self.delta_F, self.delta_C, self.delta_p, self.delta_q])

    @property
    def vector(self) -> np.ndarray:
        """Indicators stacked as (p, q, F, C); used by the placement search."""
        return np.concatenate([self.delta_p, self.delta_q, self.delta_F, self.delta_C])

    @property
    def n_sensors(self) -> int:
        return int(self.delta.sum())

    def check(self, network: GasNetwork) -> None:
        if (len(self.delta_F), len(self.delta_C), len(self.delta_p)) != (
            network.L_F, network.L_C, network.N
        ):
            raise ValueError("placement dimensions do not match the network")

    def __repr__(self):
        return (f"SensorPlacement(p={int(self.delta_p.sum())}, q={int(self.delta_q.sum())}, "
                f"F={int(self.delta_F.sum())}, C={int(self.delta_C.sum())})")


@dataclass(frozen=True)
class NoiseModel:
    """One standard deviation per measurement type."""

    sigma_p: float
    sigma_q: float
    sigma_phi: float

    def __post_init__(self):
        for name in ("sigma_p", "sigma_q", "sigma_phi"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def is_zero(self) -> bool:
        return self.sigma_p == 0 and self.sigma_q == 0 and self.sigma_phi == 0

    def require_positive(self) -> None:
        if min(self.sigma_p, self.sigma_q, self.sigma_phi) <= 0:
            raise ValueError("noise standard deviations must be positive")


def rsd_to_noise(tau: float, state: SteadyState, placement: SensorPlacement | None = None
                 ) -> NoiseModel:
    """Noise model with relative standard deviation ``tau``.

    Each sigma is ``tau`` times the mean magnitude of the true values seen
    by the sensors of that type.  Types without sensors fall back to the
    mean over all values of the type so that sigma stays defined.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")

    def mean_abs(values, mask):
        values = np.abs(np.asarray(values, dtype=float))
        if mask is not None and mask.sum() > 0:
            return float(values[mask > 0].mean())
        return float(values.mean())

    if placement is None:
        mp = mq = mf = None
    else:
        mp, mq, mf = placement.delta_p, placement.delta_q, placement.delta_phi
    return NoiseModel(
        sigma_p=tau * mean_abs(state.p, mp),
        sigma_q=tau * mean_abs(state.q, mq),
        sigma_phi=tau * mean_abs(state.phi, mf),
    )


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Sufficient statistics of ``T_a`` noisy snapshots.

    ``sum_*`` hold per-channel sums over time and ``sumsq_*`` per-channel
    sums of squares.  ``p_tilde`` etc. hold the raw slices when available.
    ``noise_sums`` holds the realised noise sums (simulation only).
    """

    T_a: int
    sum_p: np.ndarray
    sum_q: np.ndarray
    sum_phi: np.ndarray
    sumsq_p: np.ndarray
    sumsq_q: np.ndarray
    sumsq_phi: np.ndarray
    p_tilde: np.ndarray | None = None
    q_tilde: np.ndarray | None = None
    phi_tilde: np.ndarray | None = None
    noise_sums: tuple | None = field(default=None, repr=False)

    @classmethod
    def from_slices(cls, p_tilde, q_tilde, phi_tilde, noise_sums=None) -> "ObservationSet":
        p = np.atleast_2d(np.asarray(p_tilde, dtype=float))
        q = np.atleast_2d(np.asarray(q_tilde, dtype=float))
        f = np.atleast_2d(np.asarray(phi_tilde, dtype=float))
        if not p.shape[0] == q.shape[0] == f.shape[0]:
            raise ValueError("all slice arrays need the same number of rows")
        if p.shape[0] < 1:
            raise ValueError("T_a must be at least 1")
        return cls(
            T_a=p.shape[0],
            sum_p=p.sum(0), sum_q=q.sum(0), sum_phi=f.sum(0),
            sumsq_p=(p * p).sum(0), sumsq_q=(q * q).sum(0), sumsq_phi=(f * f).sum(0),
            p_tilde=p, q_tilde=q, phi_tilde=f,
            noise_sums=noise_sums,
        )

    @property
    def mean_p(self):
        return self.sum_p / self.T_a

    @property
    def mean_q(self):
        return self.sum_q / self.T_a

    @property
    def mean_phi(self):
        return self.sum_phi / self.T_a

    def masked_sumsq(self, placement: SensorPlacement, noise: NoiseModel) -> float:
        """Weighted sum over time of the masked squared norms of the data."""
        return float(
            placement.delta_p @ self.sumsq_p / noise.sigma_p**2
            + placement.delta_q @ self.sumsq_q / noise.sigma_q**2
            + placement.delta_phi @ self.sumsq_phi / noise.sigma_phi**2
        )

    def batch(self) -> "ObservationBatch":
        """A one-run :class:`ObservationBatch` view."""
        return ObservationBatch(
            T_a=self.T_a,
            sum_p=self.sum_p[None], sum_q=self.sum_q[None], sum_phi=self.sum_phi[None],
            sumsq_p=self.sumsq_p[None], sumsq_q=self.sumsq_q[None],
            sumsq_phi=self.sumsq_phi[None],
        )


@dataclass(frozen=True, eq=False)
class ObservationBatch:
    """Statistics of ``R`` independent runs, arrays of shape ``(R, n)``."""

    T_a: int
    sum_p: np.ndarray
    sum_q: np.ndarray
    sum_phi: np.ndarray
    sumsq_p: np.ndarray
    sumsq_q: np.ndarray
    sumsq_phi: np.ndarray

    @property
    def runs(self) -> int:
        return self.sum_p.shape[0]

    def __getitem__(self, idx) -> ObservationSet:
        return ObservationSet(
            T_a=self.T_a,
            sum_p=self.sum_p[idx], sum_q=self.sum_q[idx], sum_phi=self.sum_phi[idx],
            sumsq_p=self.sumsq_p[idx], sumsq_q=self.sumsq_q[idx],
            sumsq_phi=self.sumsq_phi[idx],
        )

    def subset(self, idx) -> "ObservationBatch":
        return ObservationBatch(
            T_a=self.T_a,
            sum_p=self.sum_p[idx], sum_q=self.sum_q[idx], sum_phi=self.sum_phi[idx],
            sumsq_p=self.sumsq_p[idx], sumsq_q=self.sumsq_q[idx],
            sumsq_phi=self.sumsq_phi[idx],
        )

    @classmethod
    def stack(cls, sets) -> "ObservationBatch":
        sets = list(sets)
        if not sets:
            raise ValueError("cannot stack an empty sequence")
        T = sets[0].T_a
        if any(s.T_a != T for s in sets):
            raise ValueError("all observation sets must share T_a")
        return cls(
            T_a=T,
            **{k: np.stack([getattr(s, k) for s in sets])
               for k in ("sum_p", "sum_q", "sum_phi", "sumsq_p", "sumsq_q", "sumsq_phi")},
        )


def run_generator(seed: int, run: int = 0, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, run, stream)``.

    Runs are independent of each other and of the order in which they are
    evaluated, which keeps parallel Monte-Carlo results reproducible.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(run), int(stream)])
    return np.random.Generator(np.random.Philox(ss))


def generate_observations(state: SteadyState, noise: NoiseModel, T_a: int, seed: int,
                          run: int = 0, *, stream: int = 0) -> ObservationSet:
    """Draw ``T_a`` i.i.d. Gaussian snapshots of the true state.

    Noise is drawn slice by slice in the channel order (p, q, phi) from the
    generator keyed by ``(seed, run)``.
    """
    if T_a < 1:
        raise ValueError("T_a must be at least 1")
    rng = run_generator(seed, run, stream)
    N, L = len(state.p), len(state.phi)
    z = rng.standard_normal((T_a, 2 * N + L))
    n_p = noise.sigma_p * z[:, :N]
    n_q = noise.sigma_q * z[:, N:2 * N]
    n_f = noise.sigma_phi * z[:, 2 * N:]
    return ObservationSet.from_slices(
        state.p + n_p, state.q + n_q, state.phi + n_f,
        noise_sums=(n_p.sum(0), n_q.sum(0), n_f.sum(0)),
    )


def sample_statistics(state: SteadyState, noise: NoiseModel, T_a: int, seed: int,
                      runs, *, stream: int = 1, return_noise: bool = False):
    """Draw the sufficient statistics of many runs directly.

    For each run the noise sum is ``N(0, T_a sigma^2)`` and the within-run
    scatter is ``sigma^2 chi^2(T_a - 1)``, independent of the sum.  The joint
    law of the returned statistics equals that of :func:`generate_observations`
    but the cost does not grow with ``T_a``.

    Parameters
    ----------
    runs : int or sequence of int
        Run indices; each run uses its own keyed generator.

    Returns
    -------
    ObservationBatch
        Plus the ``(R, n)`` noise sums ``(n_p, n_q, n_phi)`` when
        ``return_noise`` is set.
    """
    if T_a < 1:
        raise ValueError("T_a must be at least 1")
    runs = range(runs) if np.isscalar(runs) else runs
    N, L = len(state.p), len(state.phi)
    n = 2 * N + L
    sig = np.concatenate([np.full(N, noise.sigma_p), np.full(N, noise.sigma_q),
                          np.full(L, noise.sigma_phi)])
    truth = np.concatenate([state.p, state.q, state.phi])
    zs, chis = [], []
    for r in runs:
        rng = run_generator(seed, r, stream)
        zs.append(rng.standard_normal(n))
        chis.append(rng.chisquare(T_a - 1, n) if T_a > 1 else np.zeros(n))
    z = np.array(zs).reshape(-1, n)
    chi = np.array(chis).reshape(-1, n)
    noise_sum = sig * np.sqrt(T_a) * z
    sums = T_a * truth + noise_sum
    sumsq = sums**2 / T_a + sig**2 * chi
    batch = ObservationBatch(
        T_a=T_a,
        sum_p=sums[:, :N], sum_q=sums[:, N:2 * N], sum_phi=sums[:, 2 * N:],
        sumsq_p=sumsq[:, :N], sumsq_q=sumsq[:, N:2 * N], sumsq_phi=sumsq[:, 2 * N:],
    )
    if return_noise:
        return batch, (noise_sum[:, :N], noise_sum[:, N:2 * N], noise_sum[:, 2 * N:])
    return batch
