"""Monte-Carlo experiments: benchmark cases, threshold calibration and tables.

Every run draws its data from a generator keyed by ``(seed, run, stream)``
so results do not depend on how runs are split between workers.  The
number of worker processes comes from the ``GASNET_VERIFY_WORKERS``
environment variable (default 1).

CSV schema
----------
Every table carries ``schema_version`` as its first column.  Monte-Carlo
rows (:data:`RESULT_COLUMNS`) hold, per network, case and ``T_a``:

``detections`` / ``p_emp`` / ``ci_low`` / ``ci_high``
    count and rate of H1 decisions with a Wilson 95% interval;
``p_pred`` / ``lambda``
    predicted detection probability from the null-space non-centrality;
``p_pred_obs`` / ``lambda_obs``
    the same from the measurement-space misfit non-centrality;
``rank1_fraction``
    runs whose ``A_H0`` and ``A_H1`` relaxed solves both have rank one;
``exact_fraction``
    runs where the relaxation exactness condition holds for the true
    topology;
``pr_correct`` / ``pd_wrong_term`` / ``pd_right_term``
    ``Pr(A_hat = A_true)`` and the split of the detection rate by whether
    the best alternative is the true topology.

Rows returned in memory also carry ``seconds_per_decision``, the mean wall
time per decision; it is left out of the CSV files so that seed and
configuration determine every byte written.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .asymptotics import misfit_lambda, noncentrality_lambda, predict_pd, pseudo_true_params
from .likelihood import constrained_ml, standard_glrt
from .network import (
    GasNetwork,
    NetworkError,
    SolverError,
    TopologyState,
    load_network,
    physical_topology,
    solve_steady_state,
)
from .sdr import exactness_condition
from .sensing import (
    NoiseModel,
    ObservationBatch,
    SensorPlacement,
    generate_observations,
    rsd_to_noise,
    sample_statistics,
)
from .verify import RelaxedSolver, efficient_verify, enumerate_topologies

__all__ = [
    "Case",
    "CASES",
    "ExperimentConfig",
    "ExperimentResult",
    "CaseSetup",
    "setup_case",
    "calibrate_threshold",
    "run_monte_carlo",
    "reproduce_tables",
    "wilson_interval",
    "worker_count",
    "SCHEMA_VERSION",
    "RESULT_COLUMNS",
    "GRIDS",
]

SCHEMA_VERSION = 1
WORKERS_ENV = "GASNET_VERIFY_WORKERS"
CHUNK = 500


@dataclass(frozen=True)
class Case:
    """Changeable-pipeline patterns under H0 and H1 plus an operating point."""

    network: str
    case: int
    h0: str
    h1: str
    T_a: int
    rsd: float

    @property
    def key(self) -> str:
        return f"{self.network}:case{self.case}"


CASES = {
    ("network1", 1): Case("network1", 1, "CCC", "CCO", 80, 0.10),
    ("network1", 2): Case("network1", 2, "OCO", "OCC", 100, 0.10),
    ("network1", 3): Case("network1", 3, "CCO", "CCC", 80, 0.10),
    ("network1", 4): Case("network1", 4, "OOO", "CCC", 100, 0.10),
    ("network2", 1): Case("network2", 1, "CCCC", "CCCO", 114, 0.08),
    ("network2", 2): Case("network2", 2, "CCCC", "OCCO", 47, 0.08),
}


def _pattern(s: str) -> list:
    s = s.strip().upper()
    if set(s) - {"C", "O"}:
        raise ValueError(f"pattern {s!r} must use only C (closed) and O (open)")
    return [ch == "C" for ch in s]


@dataclass(frozen=True)
class ExperimentConfig:
    """One Monte-Carlo experiment.

    ``truth`` selects which hypothesis generates the data.  ``log_rho``
    overrides the asymptotic threshold ``chi2_{L+N}(p_fa)/2``.
    ``placement`` is ``"default"``, ``"full"``, ``"all_pressure"`` or an
    explicit 0/1 list in the order pressure, injection, fixed flow,
    changeable flow.
    """

    network: str
    case: int
    T_a: tuple = (80,)
    rsd: float | None = None
    p_fa: float = 1e-3
    runs: int = 10_000
    seed: int = 0
    algorithm: str = "relaxed"
    truth: str = "H1"
    placement: object = "default"
    log_rho: float | None = None
    include_orientation_flips: bool = False
    sampler: str = "statistics"

    def __post_init__(self):
        object.__setattr__(self, "T_a", tuple(int(t) for t in np.atleast_1d(self.T_a)))
        if (self.network, self.case) not in CASES:
            raise ValueError(f"unknown case {self.network} case {self.case}")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if any(t < 1 for t in self.T_a):
            raise ValueError("T_a values must be at least 1")
        if self.algorithm not in ("standard", "relaxed", "efficient"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.truth not in ("H0", "H1"):
            raise ValueError("truth must be 'H0' or 'H1'")
        if self.sampler not in ("statistics", "slices"):
            raise ValueError("sampler must be 'statistics' or 'slices'")
        if not 0 < self.p_fa < 1:
            raise ValueError("p_fa must lie in (0, 1)")
        if isinstance(self.placement, list):
            object.__setattr__(self, "placement", tuple(self.placement))

    @property
    def case_info(self) -> Case:
        return CASES[(self.network, self.case)]

    @property
    def rsd_value(self) -> float:
        return self.case_info.rsd if self.rsd is None else float(self.rsd)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["T_a"] = list(self.T_a)
        if isinstance(self.placement, tuple):
            d["placement"] = list(self.placement)
        return d


@dataclass
class CaseSetup:
    """Solved ingredients shared by every run of an experiment."""

    network: GasNetwork
    placement: SensorPlacement
    A_H0: TopologyState
    A_H1: TopologyState
    state_H0: object
    state_H1: object
    noise: NoiseModel
    candidates: list


def _placement(network, spec) -> SensorPlacement:
    if isinstance(spec, str):
        makers = {"default": SensorPlacement.default, "full": SensorPlacement.full,
                  "all_pressure": SensorPlacement.all_pressure}
        if spec not in makers:
            raise ValueError(f"unknown placement {spec!r}")
        return makers[spec](network)
    return SensorPlacement.from_vector(network, spec)


def setup_case(config: ExperimentConfig) -> CaseSetup:
    """Solve both hypotheses; noise levels come from the H0 steady state."""
    info = config.case_info
    net = load_network(config.network)
    pl = _placement(net, config.placement)
    h0 = physical_topology(net, _pattern(info.h0))
    h1 = physical_topology(net, _pattern(info.h1))
    s0 = solve_steady_state(net, h0)
    s1 = solve_steady_state(net, h1)
    noise = rsd_to_noise(config.rsd_value, s0, pl)
    cands = enumerate_topologies(net, config.include_orientation_flips)
    for t in (h0, h1):
        if t not in cands:
            cands.append(t)
    return CaseSetup(net, pl, h0, h1, s0, s1, noise, cands)


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


def wilson_interval(k: int, n: int, z: float = 1.959963984540054):
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return 0.0, 1.0
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return float(max(0.0, centre - half)), float(min(1.0, centre + half))


# ---------------------------------------------------------------------------
# per-chunk work
# ---------------------------------------------------------------------------

def _stream(truth: str) -> int:
    return 1 if truth == "H1" else 2


def _draw(setup: CaseSetup, config: ExperimentConfig, T_a: int, runs):
    state = setup.state_H1 if config.truth == "H1" else setup.state_H0
    if config.sampler == "statistics":
        return sample_statistics(state, setup.noise, T_a, config.seed, runs,
                                 stream=_stream(config.truth), return_noise=True)
    sets = [generate_observations(state, setup.noise, T_a, config.seed, r,
                                  stream=_stream(config.truth)) for r in runs]
    batch = ObservationBatch.stack(sets)
    ns = tuple(np.stack([s.noise_sums[i] for s in sets]) for i in range(3))
    return batch, ns


def _chunk(args):
    config, T_a, runs, log_rho = args
    setup = setup_case(config)
    net = setup.network
    truth_topo = setup.A_H1 if config.truth == "H1" else setup.A_H0
    batch, ns = _draw(setup, config, T_a, runs)
    R = batch.runs
    stat = np.empty(R)
    best = np.empty(R, dtype=int)
    rank1 = np.zeros(R, dtype=bool)
    exact = np.zeros(R, dtype=bool)
    index = {t: i for i, t in enumerate(setup.candidates)}
    alts = [t for t in setup.candidates if t != setup.A_H0]
    t0 = time.perf_counter()
    if config.algorithm == "relaxed":
        solver = RelaxedSolver(net, setup.placement, setup.noise, batch)
        obj0 = solver.objective(setup.A_H0)
        objs = np.stack([solver.objective(t) for t in alts])
        k = np.argmin(objs, axis=0)
        stat[:] = (obj0 - objs[k, np.arange(R)]) / 2
        best[:] = [index[alts[i]] for i in k]
        rank1[:] = (solver.solve(setup.A_H0).rank == 1) & (solver.solve(setup.A_H1).rank == 1)
    else:
        for r in range(R):
            obs = batch[r]
            if config.algorithm == "efficient":
                rep = efficient_verify(obs, net, setup.placement, setup.noise, setup.A_H0,
                                       candidates=setup.candidates, p_fa=config.p_fa,
                                       log_rho=log_rho)
                ranks = {s.topo: s.exact for s in rep.search_path}
            else:
                rep = standard_glrt(obs, net, setup.placement, setup.noise, setup.A_H0,
                                    setup.candidates, log_rho=log_rho)
                ranks = {}
            stat[r] = rep.statistic
            alt = rep.best_alternative
            best[r] = index[alt] if alt is not None else -1
            rank1[r] = ranks.get(setup.A_H0, True) and ranks.get(setup.A_H1, True)
    elapsed = time.perf_counter() - t0
    for r in range(R):
        exact[r] = exactness_condition(truth_topo, setup.placement,
                                       (ns[0][r], ns[1][r], ns[2][r]), T_a, net).holds
    return stat, best, rank1, exact, elapsed


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def _simulate(config: ExperimentConfig, T_a: int, log_rho, workers=None):
    workers = worker_count() if workers is None else workers
    starts = range(0, config.runs, CHUNK)
    jobs = [(config, T_a, range(s, min(s + CHUNK, config.runs)), log_rho) for s in starts]
    parts = _map(_chunk, jobs, workers)
    stat = np.concatenate([p[0] for p in parts])
    best = np.concatenate([p[1] for p in parts])
    rank1 = np.concatenate([p[2] for p in parts])
    exact = np.concatenate([p[3] for p in parts])
    elapsed = sum(p[4] for p in parts)
    return stat, best, rank1, exact, elapsed


def _threshold(config: ExperimentConfig, setup: CaseSetup) -> float:
    if config.log_rho is not None:
        return float(config.log_rho)
    return float(stats.chi2.isf(config.p_fa, setup.network.L + setup.network.N) / 2)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

RESULT_COLUMNS = [
    "schema_version", "network", "case", "truth", "algorithm", "rsd", "T_a", "runs", "p_fa",
    "log_rho", "detections", "p_emp", "ci_low", "ci_high", "p_pred", "lambda", "p_pred_obs",
    "lambda_obs", "rank1_fraction", "exact_fraction", "pr_correct", "pd_wrong_term",
    "pd_right_term",
]


@dataclass
class ExperimentResult:
    """Per-``T_a`` rows plus the raw statistics of the last simulation."""

    config: ExperimentConfig
    rows: list = field(default_factory=list)
    statistics: dict = field(default_factory=dict)

    def row(self, T_a: int) -> dict:
        for r in self.rows:
            if r["T_a"] == T_a:
                return r
        raise KeyError(T_a)

    def counts(self) -> list:
        """The deterministic part of every row (no timing)."""
        return [{k: v for k, v in r.items() if k != "seconds_per_decision"} for r in self.rows]

    def write_csv(self, path) -> None:
        _write_csv(path, RESULT_COLUMNS, self.rows)


def _write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


def predictions(setup: CaseSetup, T_a: int, p_fa: float) -> dict:
    """Null-space and misfit non-centralities with their detection predictions."""
    net = setup.network
    dof = net.L + net.N
    w0 = pseudo_true_params(setup.A_H0, setup.state_H1, setup.placement, setup.noise, net,
                            A_true=setup.A_H1)
    lam = noncentrality_lambda(setup.A_H0, setup.A_H1, setup.state_H1, setup.placement,
                               setup.noise, T_a, net, omega_H0=w0)
    lam_obs = misfit_lambda(setup.A_H0, setup.state_H1, setup.placement, setup.noise, T_a,
                            net, omega_H0=w0)
    return {"lambda": lam, "p_pred": predict_pd(lam, p_fa, dof),
            "lambda_obs": lam_obs, "p_pred_obs": predict_pd(lam_obs, p_fa, dof)}


def run_monte_carlo(config: ExperimentConfig, *, workers: int | None = None) -> ExperimentResult:
    """Simulate the configured algorithm at every ``T_a``.

    Raises
    ------
    RuntimeError
        Wrapping any solver failure, with the ``T_a`` and chunk that failed.
    """
    setup = setup_case(config)
    log_rho = _threshold(config, setup)
    result = ExperimentResult(config)
    truth_idx = setup.candidates.index(setup.A_H1 if config.truth == "H1" else setup.A_H0)
    for T_a in config.T_a:
        try:
            stat, best, rank1, exact, elapsed = _simulate(config, T_a, log_rho, workers)
        except (SolverError, NetworkError, ValueError) as exc:
            raise RuntimeError(f"T_a={T_a}: {exc}") from exc
        R = len(stat)
        det = stat > log_rho
        k = int(det.sum())
        lo, hi = wilson_interval(k, R)
        right = best == truth_idx
        pred = predictions(setup, T_a, config.p_fa) if config.truth == "H1" else \
            {"lambda": 0.0, "p_pred": config.p_fa, "lambda_obs": 0.0, "p_pred_obs": config.p_fa}
        result.rows.append({
            "schema_version": SCHEMA_VERSION,
            "network": config.network, "case": config.case, "truth": config.truth,
            "algorithm": config.algorithm, "rsd": config.rsd_value, "T_a": T_a, "runs": R,
            "p_fa": config.p_fa, "log_rho": log_rho, "detections": k, "p_emp": k / R,
            "ci_low": lo, "ci_high": hi,
            "p_pred": float(pred["p_pred"]), "lambda": float(pred["lambda"]),
            "p_pred_obs": float(pred["p_pred_obs"]), "lambda_obs": float(pred["lambda_obs"]),
            "rank1_fraction": float(rank1.mean()), "exact_fraction": float(exact.mean()),
            "pr_correct": float(right.mean()),
            "pd_wrong_term": float((det & ~right).mean()),
            "pd_right_term": float((det & right).mean()),
            "seconds_per_decision": elapsed / R,
        })
        result.statistics[T_a] = stat
    return result


def calibrate_threshold(config: ExperimentConfig, *, workers: int | None = None) -> dict:
    """Monte-Carlo ``ln rho`` at ``1 - p_fa`` under H0, per ``T_a``.

    Raises
    ------
    ValueError
        If fewer than ``10 / min(p_fa, 1 - p_fa)`` runs are configured.
    """
    tail = min(config.p_fa, 1 - config.p_fa)
    if config.runs * tail < 10:
        raise ValueError(
            f"{config.runs} runs cannot resolve the {config.p_fa} quantile; "
            f"use at least {int(np.ceil(10 / tail))}"
        )
    cfg = replace(config, truth="H0")
    setup = setup_case(cfg)
    out = {"asymptotic": _threshold(replace(cfg, log_rho=None), setup), "calibrated": {}}
    for T_a in cfg.T_a:
        stat = _simulate(cfg, T_a, out["asymptotic"], workers)[0]
        out["calibrated"][T_a] = float(np.quantile(stat, 1 - cfg.p_fa, method="higher"))
    return out


# ---------------------------------------------------------------------------
# table reproduction
# ---------------------------------------------------------------------------

GRIDS = {
    "table_v": [
        {"network": "network1", "case": 1, "T_a": [80]},
        {"network": "network1", "case": 2, "T_a": [100]},
        {"network": "network1", "case": 3, "T_a": [80]},
        {"network": "network2", "case": 1, "T_a": [114]},
        {"network": "network2", "case": 2, "T_a": [47]},
    ],
    "pd_vs_T": [
        {"network": "network1", "case": c, "T_a": [20, 40, 60, 80, 100]} for c in (1, 2, 3)
    ] + [
        {"network": "network2", "case": c, "T_a": [20, 47, 80, 114]} for c in (1, 2)
    ],
    "rank_one": [
        {"network": "network1", "case": c, "rsd": 0.05, "T_a": [20, 50, 110, 150, 200]}
        for c in (1, 2)
    ],
    "decomposition": [
        {"network": "network1", "case": c, "T_a": [50, 60, 70, 80, 90, 100]} for c in (1, 2)
    ],
}


def reproduce_tables(config_set, out_dir, *, runs: int = 10_000, seed: int = 0,
                     workers: int | None = None) -> dict:
    """Run named grids and write one CSV per grid.

    Parameters
    ----------
    config_set : dict or sequence of str
        Grid name to list of partial :class:`ExperimentConfig` dicts, or
        names from :data:`GRIDS`.

    Returns
    -------
    dict
        Grid name to written CSV path.  An empty set writes nothing.
    """
    if not isinstance(config_set, dict):
        config_set = {name: GRIDS[name] for name in config_set}
    out_dir = Path(out_dir)
    written = {}
    for name, entries in config_set.items():
        rows = []
        for entry in entries:
            cfg = ExperimentConfig.from_dict({"runs": runs, "seed": seed, **entry})
            res = run_monte_carlo(cfg, workers=workers)
            for r in res.rows:
                r = dict(r)
                r["p_diff"] = r["p_emp"] - r["p_pred"]
                rows.append(r)
        path = out_dir / f"{name}.csv"
        _write_csv(path, RESULT_COLUMNS + ["p_diff"], rows)
        written[name] = str(path)
    if written:
        (out_dir / "manifest.json").write_text(json.dumps(
            {"schema_version": SCHEMA_VERSION, "runs": runs, "seed": seed, "files": written},
            indent=2, sort_keys=True))
    return written


def constrained_ml_batch(setup: CaseSetup, batch, topo: TopologyState | None = None) -> np.ndarray:
    """Constrained ML estimates for every run of a batch (slow oracle route)."""
    topo = setup.A_H0 if topo is None else topo
    start = solve_steady_state(setup.network, topo).omega
    return np.stack([
        constrained_ml(batch[r], topo, setup.network, setup.placement, setup.noise,
                       starts=[start]).omega_hat
        for r in range(batch.runs)
    ])
