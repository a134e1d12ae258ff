"""Text-file interchange: datasets, trajectories, histories, run results.

Floats are written with repr (shortest exact form), so every file
round-trips float64 values exactly and reruns with the same seed are
byte-identical.
"""

from __future__ import annotations

import csv

import numpy as np

from .dynamics import Trajectory
from .training import Dataset, TrainHistory


def _fmt(x) -> str:
    return repr(float(x))


def write_dataset(path, dataset: Dataset) -> None:
    """Columns t, u_1..u_d, s_1..s_d; t is the sample index times dt_step."""
    d = dataset.inputs.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["t"]
            + [f"u_{j + 1}" for j in range(d)]
            + [f"s_{j + 1}" for j in range(d)]
        )
        for i, (u, s) in enumerate(zip(dataset.inputs, dataset.targets)):
            writer.writerow(
                [_fmt(i * dataset.dt_step)] + [_fmt(v) for v in u]
                + [_fmt(v) for v in s]
            )


def read_dataset(path) -> Dataset:
    rows = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64)
    rows = np.atleast_2d(rows)
    d = (rows.shape[1] - 1) // 2
    dt_step = float(rows[1, 0] - rows[0, 0]) if len(rows) > 1 else 0.0
    return Dataset(inputs=rows[:, 1 : 1 + d], targets=rows[:, 1 + d :],
                   dt_step=dt_step)


def write_trajectory(path, traj: Trajectory) -> None:
    """Columns t, x_1..x_d."""
    d = traj.states.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x_{j + 1}" for j in range(d)])
        for t, x in zip(traj.times, traj.states):
            writer.writerow([_fmt(t)] + [_fmt(v) for v in x])


def read_trajectory(path) -> Trajectory:
    rows = np.atleast_2d(
        np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64)
    )
    return Trajectory(times=rows[:, 0], states=rows[:, 1:])


def write_history(path, history: TrainHistory) -> None:
    """Columns iter, train_loss, val_loss, grad_norm."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "train_loss", "val_loss", "grad_norm"])
        for k, (tr, va, gn) in enumerate(
            zip(history.train_loss, history.val_loss, history.grad_norm)
        ):
            writer.writerow([k, _fmt(tr), _fmt(va), _fmt(gn)])


def write_result(path, times, states, checkpoint_errors=None,
                 checkpoint_stride: int = 1) -> None:
    """Columns t, w_1..w_d, err_checkpoint (blank off the checkpoint grid)."""
    d = states.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"w_{j + 1}" for j in range(d)]
                        + ["err_checkpoint"])
        for k, (t, w) in enumerate(zip(times, states)):
            err = ""
            if checkpoint_errors is not None and k % checkpoint_stride == 0:
                idx = k // checkpoint_stride
                if idx < len(checkpoint_errors):
                    err = _fmt(checkpoint_errors[idx])
            writer.writerow([_fmt(t)] + [_fmt(v) for v in w] + [err])


def read_result(path):
    """Returns (times, states, checkpoint_errors); errors are NaN off-grid."""
    times, states, errors = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = len(header) - 2
        for row in reader:
            times.append(float(row[0]))
            states.append([float(v) for v in row[1 : 1 + d]])
            errors.append(float(row[-1]) if row[-1] else np.nan)
    return (
        np.asarray(times),
        np.asarray(states),
        np.asarray(errors),
    )
