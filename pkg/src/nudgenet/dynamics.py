"""Ground-truth dynamics: Lorenz 63/96, fixed-step RK4, data generation.

Truth trajectories use classical RK4 at a fixed step (default 1e-3),
which keeps every run exactly reproducible.  Training sets harvest
consecutive state pairs on the attractor after a burn-in; reference
runs provide the trajectories and observation checkpoints the
assimilation protocol consumes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .resnet import DivergenceError
from .training import Dataset

TRUTH_DT = 1e-3


@dataclass(frozen=True)
class Lorenz63:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0

    @property
    def dim(self) -> int:
        return 3

    def rhs(self, u):
        """(sigma (y - x), x (rho - z) - y, x y - beta z); batched on the last axis."""
        u = np.asarray(u, dtype=np.float64)
        x, y, z = u[..., 0], u[..., 1], u[..., 2]
        return np.stack(
            [
                self.sigma * (y - x),
                x * (self.rho - z) - y,
                x * y - self.beta * z,
            ],
            axis=-1,
        )


@dataclass(frozen=True)
class Lorenz96:
    forcing: float = 10.0
    dim: int = 40

    def __post_init__(self):
        if self.dim < 4:
            raise ValueError(f"Lorenz 96 needs dimension >= 4, got {self.dim}")

    def rhs(self, u):
        """d_t x_i = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F with cyclic indices."""
        u = np.asarray(u, dtype=np.float64)
        xp1 = np.roll(u, -1, axis=-1)
        xm1 = np.roll(u, 1, axis=-1)
        xm2 = np.roll(u, 2, axis=-1)
        return (xp1 - xm2) * xm1 - u + self.forcing


OdeSpec = Lorenz63 | Lorenz96


def rhs(spec, x):
    return spec.rhs(x)


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    method: str = "rk4"

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.method != "rk4":
            raise ValueError(f"only the classical rk4 method is supported")


@dataclass(frozen=True)
class Trajectory:
    """Uniformly spaced states; ``states[k]`` is the state at ``times[k]``."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        states = np.asarray(self.states, dtype=np.float64)
        if times.ndim != 1 or states.ndim != 2 or len(times) != len(states):
            raise ValueError("times must be 1-d and align with the state rows")
        if len(times) > 1:
            steps = np.diff(times)
            if np.any(steps <= 0):
                raise ValueError("times must be strictly increasing")
            if np.max(steps) - np.min(steps) > 1e-9 * np.max(steps):
                raise ValueError("times must be uniformly spaced")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)

    def __len__(self):
        return len(self.times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0


def _rk4(f, x, dt):
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(spec, x, dt):
    """One classical 4-stage Runge-Kutta update of the spec's dynamics."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    out = _rk4(spec.rhs, np.asarray(x, dtype=np.float64), dt)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("rk4 step produced non-finite state")
    return out


def integrate(spec, x0, t0, t1, config: IntegratorConfig) -> Trajectory:
    """Uniform RK4 march from t0 to t1 recording every step.

    On divergence the partial trajectory up to the last finite state is
    attached to the raised ``DivergenceError`` as ``.trajectory``.
    """
    if t1 < t0:
        raise ValueError(f"t1={t1} must not precede t0={t0}")
    x = np.asarray(x0, dtype=np.float64)
    n_steps = int(round((t1 - t0) / config.dt)) if t1 > t0 else 0
    times = t0 + config.dt * np.arange(n_steps + 1)
    states = np.empty((n_steps + 1, x.shape[-1]))
    states[0] = x
    for k in range(n_steps):
        x = _rk4(spec.rhs, x, config.dt)
        if not np.all(np.isfinite(x)):
            err = DivergenceError(f"trajectory diverged at step {k + 1}")
            err.trajectory = Trajectory(times[: k + 1], states[: k + 1])
            raise err
        states[k + 1] = x
    return Trajectory(times, states)


def _march(spec, x, dt, n_steps):
    """March without recording; returns the final state (may be non-finite)."""
    for _ in range(n_steps):
        x = _rk4(spec.rhs, x, dt)
        if not np.all(np.isfinite(x)):
            return x
    return x


def make_training_set(
    spec,
    n_samples: int,
    dt_step: float,
    burn_in: float = 20.0,
    rng=0,
    chunk: int = 2000,
    ic_std: float = 10.0,
) -> Dataset:
    """Harvest consecutive on-attractor pairs (u(t), u(t + dt_step)).

    Initial conditions are Gaussian (mean 0, std ``ic_std``); each is
    integrated past ``burn_in`` time units before harvesting up to
    ``chunk`` pairs, then a fresh condition is drawn.  The inner
    integration uses dt = dt_step / 10, so targets are exactly what the
    integrator produces from the inputs.  A diverging trajectory is
    dropped and its condition resampled.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    rng = np.random.default_rng(rng)
    fine_dt = dt_step / 10.0
    inputs = np.empty((n_samples, spec.dim))
    targets = np.empty((n_samples, spec.dim))
    filled = 0
    while filled < n_samples:
        x = _march(spec, rng.normal(0.0, ic_std, spec.dim), fine_dt,
                   int(round(burn_in / fine_dt)))
        if not np.all(np.isfinite(x)):
            continue
        for _ in range(min(chunk, n_samples - filled)):
            x_next = _march(spec, x, fine_dt, 10)
            if not np.all(np.isfinite(x_next)):
                break
            inputs[filled] = x
            targets[filled] = x_next
            filled += 1
            x = x_next
    return Dataset(inputs=inputs, targets=targets, dt_step=dt_step)


@dataclass(frozen=True)
class ReferenceRun:
    """A truth trajectory over the assimilation window plus its checkpoints."""

    trajectory: Trajectory
    checkpoints: Trajectory


def make_reference_runs(
    spec,
    n_runs: int,
    seed: int,
    start: float = 100.0,
    window: float | None = None,
    checkpoint_dt: float = 0.1,
    record_dt: float = 0.01,
    dt: float = TRUTH_DT,
    ic_std: float = 10.0,
) -> list[ReferenceRun]:
    """Evolve Gaussian initial conditions and record the assimilation window.

    Run i draws its condition with seed ``seed ^ i``, spins up to
    ``start`` time units, then records every ``record_dt`` until
    ``start + window`` (window defaults to 10 time units for Lorenz 63,
    20 for Lorenz 96).  Checkpoints subsample the record every
    ``checkpoint_dt``, the first one exactly at ``start``.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be positive")
    if window is None:
        window = 20.0 if isinstance(spec, Lorenz96) else 10.0
    ics = np.stack(
        [
            np.random.default_rng(seed ^ i).normal(0.0, ic_std, spec.dim)
            for i in range(n_runs)
        ]
    )
    steps_per_record = int(round(record_dt / dt))
    n_records = int(round(window / record_dt))
    if abs(steps_per_record * dt - record_dt) > 1e-12:
        raise ValueError("record_dt must be a multiple of dt")

    x = _march(spec, ics, dt, int(round(start / dt)))
    if not np.all(np.isfinite(x)):
        raise DivergenceError("reference spin-up diverged")
    record = np.empty((n_records + 1, n_runs, spec.dim))
    record[0] = x
    for k in range(n_records):
        x = _march(spec, x, dt, steps_per_record)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"reference run diverged near record {k + 1}")
        record[k + 1] = x

    times = start + record_dt * np.arange(n_records + 1)
    stride = int(round(checkpoint_dt / record_dt))
    runs = []
    for i in range(n_runs):
        traj = Trajectory(times, record[:, i])
        checkpoints = Trajectory(times[::stride], record[::stride, i])
        runs.append(ReferenceRun(traj, checkpoints))
    return runs
