"""The multi-run comparison protocol and its RMSE metric.

Each algorithm is started from a fresh wrong initial condition per
reference run and scored by the spatio-temporal root mean square error
over checkpoints k0..K.  Note the summation bounds are kept exactly as
specified: the checkpoint sum has K - k0 + 1 terms against a K - k0
normalizer; faithfulness wins over tidiness here.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .assimilation import NudgeSchedule, ObservationOperator, ObservationStream, \
    run_assimilation
from .dynamics import ReferenceRun


def rmse(alg_runs, ref_runs, k0: int, K: int) -> float:
    """sqrt( sum_{k=k0}^{K} sum_n |x_alg - x_ref|^2 / ((K - k0) N) ).

    ``alg_runs`` and ``ref_runs`` are per-run lists of checkpoint states
    with identical shapes; the inner square is the squared 2-norm over
    state components.  Any non-finite contribution makes the result
    +inf (a diverged run poisons the whole cell).
    """
    A = np.asarray(alg_runs, dtype=np.float64)
    R = np.asarray(ref_runs, dtype=np.float64)
    if A.shape != R.shape or A.ndim != 3:
        raise ValueError(
            f"run arrays must share shape (runs, checkpoints, dim); got "
            f"{A.shape} vs {R.shape}"
        )
    if not 0 <= k0 < K < A.shape[1]:
        raise ValueError(
            f"need 0 <= k0 < K < {A.shape[1]}, got k0={k0}, K={K}"
        )
    diff = A[:, k0 : K + 1] - R[:, k0 : K + 1]
    total = float((diff * diff).sum())
    if not np.isfinite(total):
        return math.inf
    n_runs = A.shape[0]
    return math.sqrt(total / ((K - k0) * n_runs))


@dataclass(frozen=True)
class ProtocolConfig:
    """Shape of one comparison experiment."""

    system: str
    n_runs: int = 100
    k0: int = 50
    K: int = 100
    obs_op: ObservationOperator | None = None
    methods: tuple[str, ...] = ("free-run", "ninn1", "ninn2-lookahead")
    mu_grid: tuple[float, ...] = (1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0)
    lambda_grid: tuple[float, ...] = (0.2, 1.0, 3.0)
    substeps: int = 10
    seed: int = 0
    ic_std: float = 10.0
    nudging_dt: float = 1e-3

    def __post_init__(self):
        if not 0 <= self.k0 < self.K:
            raise ValueError(f"need K > k0 >= 0, got k0={self.k0}, K={self.K}")
        if self.n_runs < 1:
            raise ValueError("n_runs must be positive")


@dataclass(frozen=True)
class RmseRow:
    system: str
    net_label: str
    method: str
    obs_pattern: str
    mu: float
    lambda_decay: float
    rmse: float


@dataclass
class RmseTable:
    rows: list[RmseRow] = field(default_factory=list)

    def add(self, row: RmseRow):
        self.rows.append(row)

    def best(self, method: str, net_label: str | None = None) -> RmseRow:
        """Row with the smallest RMSE for a method (ties keep grid order)."""
        candidates = [
            r
            for r in self.rows
            if r.method == method and (net_label is None or r.net_label == net_label)
        ]
        if not candidates:
            raise KeyError(f"no rows for method {method!r}")
        return min(candidates, key=lambda r: r.rmse)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["system", "net_label", "method", "obs_pattern", "mu",
                 "lambda_decay", "rmse"]
            )
            for r in self.rows:
                value = "Inf" if math.isinf(r.rmse) else repr(r.rmse)
                writer.writerow(
                    [r.system, r.net_label, r.method, r.obs_pattern,
                     repr(r.mu), repr(r.lambda_decay), value]
                )


def observation_label(op: ObservationOperator) -> str:
    return ";".join(str(i) for i in op.observed)


def _grid_for(method: str, config: ProtocolConfig):
    if method.startswith("ninn"):
        return [(mu, lam) for mu in config.mu_grid for lam in config.lambda_grid]
    if method == "nudging":
        return [(mu, 0.0) for mu in config.mu_grid]
    return [(0.0, 0.0)]


def run_protocol(
    config: ProtocolConfig,
    systems: dict,
    reference: list[ReferenceRun],
    ode_spec=None,
) -> RmseTable:
    """Score every (net, method, grid cell) over the reference runs.

    The wrong initial condition for run n is a Gaussian draw seeded by
    (config.seed, n), shared across methods so comparisons see the same
    starting error.  Classic nudging runs on the true dynamics
    (``ode_spec``); the remaining methods run on each trained system.
    """
    if config.obs_op is None:
        raise ValueError("protocol needs an observation operator")
    op = config.obs_op
    runs = reference[: config.n_runs]
    if len(runs) < config.n_runs:
        raise ValueError(
            f"protocol wants {config.n_runs} reference runs, got {len(runs)}"
        )
    n_checkpoints = len(runs[0].checkpoints)
    if config.K >= n_checkpoints:
        raise ValueError(
            f"K={config.K} exceeds the {n_checkpoints} available checkpoints"
        )

    w0s = [
        np.random.default_rng([config.seed, n]).normal(0.0, config.ic_std,
                                                       op.state_dim)
        for n in range(len(runs))
    ]
    streams = [
        ObservationStream.from_trajectory(run.checkpoints, op) for run in runs
    ]
    ref_states = np.stack([run.checkpoints.states for run in runs])
    pattern = observation_label(op)

    table = RmseTable()
    for method in config.methods:
        targets = {"ode": ode_spec} if method == "nudging" else systems
        for net_label, model in targets.items():
            if model is None:
                raise ValueError(f"method {method!r} has no model to run on")
            for mu, lam in _grid_for(method, config):
                schedule = NudgeSchedule(mu, lam, config.substeps)
                estimates = []
                for run, stream, w0 in zip(runs, streams, w0s):
                    result = run_assimilation(
                        method,
                        model,
                        stream,
                        schedule,
                        w0,
                        ref_checkpoints=run.checkpoints,
                        dt=config.nudging_dt if method == "nudging" else None,
                        record_substeps=False,
                    )
                    states = result.estimates.states
                    if method == "nudging":
                        # The integrator records every dt; keep checkpoints only.
                        stride = int(round(stream.delta_t_obs / config.nudging_dt))
                        states = states[::stride]
                    estimates.append(states)
                value = rmse(np.stack(estimates), ref_states, config.k0, config.K)
                table.add(
                    RmseRow(
                        system=config.system,
                        net_label=net_label,
                        method=method,
                        obs_pattern=pattern,
                        mu=mu,
                        lambda_decay=lam,
                        rmse=value,
                    )
                )
    return table
