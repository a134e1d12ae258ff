"""Supervised training of residual-network systems.

Each component net is an independent scalar regression: quadratic data
loss plus an L1+L2 regularizer (the L1 part smoothed so BFGS keeps its
assumptions) plus a quadratic penalty on decreasing adjacent bias pairs.
Optimization is full-batch BFGS with an 80/20 validation split and a
patience rule; the best-validation iterate is returned.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .bfgs import bfgs_minimize
from .resnet import (
    ResNetParams,
    ResNetSystem,
    LayerParams,
    backprop,
    forward,
    n_params,
    pack_grads,
    pack_params,
    unpack_params,
)


@dataclass(frozen=True)
class Dataset:
    """Input states and their one-step-ahead targets, ``dt_step`` apart."""

    inputs: np.ndarray
    targets: np.ndarray
    dt_step: float

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        if inputs.ndim != 2 or targets.ndim != 2:
            raise ValueError("inputs and targets must be 2-d (samples x components)")
        if len(inputs) != len(targets):
            raise ValueError(
                f"{len(inputs)} inputs vs {len(targets)} targets"
            )
        if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    def __len__(self):
        return len(self.inputs)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1e-6
    gamma: float = 1e4
    split_fraction: float = 0.8
    patience: int = 400
    max_iters: int = 2000
    l1_delta: float = 1e-8
    seed: int = 0
    box_scale: float = 1.0
    tol: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("penalty weights must be non-negative")
        if not self.l1_delta > 0:
            raise ValueError("l1_delta must be positive")
        if not self.box_scale > 0:
            raise ValueError("box_scale must be positive")


@dataclass
class TrainHistory:
    """Per-iteration record of one net's training run."""

    train_loss: np.ndarray
    val_loss: np.ndarray
    grad_norm: np.ndarray
    best_index: int
    converged: bool = False
    line_search_failed: bool = False
    diverged: bool = False


def data_loss(net: ResNetParams, inputs, targets) -> float:
    """(1 / 2N) sum of squared prediction errors over the batch."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if len(inputs) == 0:
        raise ValueError("empty batch")
    preds, _ = forward(net, inputs)
    if preds.shape != targets.shape:
        raise ValueError(
            f"target shape {targets.shape} does not match predictions {preds.shape}"
        )
    res = preds - targets
    return float((res * res).sum() / (2.0 * len(inputs)))


def _smooth_abs(x, delta):
    return np.sqrt(x * x + delta * delta) - delta


def regularizer(net: ResNetParams, lam: float, l1_delta: float = 1e-8) -> float:
    """(lam/2) * sum over layers of (|W|_1 + |b|_1 + |W|_2^2 + |b|_2^2).

    |x| inside the 1-norms is smoothed to sqrt(x^2 + delta^2) - delta so
    the objective stays twice differentiable.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    vec = pack_params(net)
    return 0.5 * lam * float(_smooth_abs(vec, l1_delta).sum() + (vec * vec).sum())


def bias_order_penalty(net: ResNetParams, gamma: float) -> float:
    """(gamma/2) * sum of squared decreasing adjacent bias gaps, per layer."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    total = 0.0
    for layer in (net.opening, *net.hidden):
        drops = np.minimum(np.diff(layer.bias), 0.0)
        total += float(drops @ drops)
    return 0.5 * gamma * total


def max_bias_violation(net: ResNetParams) -> float:
    """Largest decreasing adjacent bias gap (0 when biases are ordered)."""
    worst = 0.0
    for layer in (net.opening, *net.hidden):
        if len(layer.bias) > 1:
            worst = max(worst, float(np.max(-np.diff(layer.bias), initial=0.0)))
    return worst


def box_init(template: ResNetParams, box_scale: float, rng, input_box=None) -> ResNetParams:
    """Draw parameters so pre-activations stay in an O(box_scale) box.

    Weight rows are uniform draws rescaled against the input bounding box
    (``input_box`` = (lo, hi); unit box by default) and each layer's
    biases are sorted ascending, so the bias-order penalty starts at
    zero.  Same seed, same parameters.
    """
    rng = np.random.default_rng(rng)
    n, d = template.opening.weights.shape
    eps = template.activation.epsilon
    if input_box is None:
        lo, hi = -np.ones(d), np.ones(d)
    else:
        lo = np.asarray(input_box[0], dtype=np.float64)
        hi = np.asarray(input_box[1], dtype=np.float64)
    mag = np.maximum(np.maximum(np.abs(lo), np.abs(hi)), 1e-12)

    w0 = rng.uniform(-1.0, 1.0, (n, d))
    w0 *= box_scale / np.maximum(np.abs(w0) @ mag, 1e-12)[:, None]
    b0 = np.sort(rng.uniform(-0.5, 0.5, n)) * box_scale
    opening = LayerParams(w0, b0)

    # Running bound on the hidden-state magnitude entering each layer.
    bound = 1.5 * box_scale + 0.25 * eps
    hidden = []
    for _ in template.hidden:
        w = rng.uniform(-1.0, 1.0, (n, n))
        w *= box_scale / np.maximum(bound * np.abs(w).sum(axis=1), 1e-12)[:, None]
        b = np.sort(rng.uniform(-0.5, 0.5, n)) * box_scale
        hidden.append(LayerParams(w, b))
        bound = bound + template.tau * (1.5 * box_scale + 0.25 * eps)

    wc = rng.uniform(-1.0, 1.0, template.closing.shape)
    wc *= box_scale / np.maximum(bound * np.abs(wc).sum(axis=1), 1e-12)[:, None]

    return ResNetParams(
        input_dim=template.input_dim,
        output_dim=template.output_dim,
        depth=template.depth,
        hidden_width=template.hidden_width,
        tau=template.tau,
        opening=opening,
        hidden=tuple(hidden),
        closing=wc,
        activation=template.activation,
    )


class _Objective:
    """Full training objective on the packed parameter vector."""

    def __init__(self, template, inputs, targets, cfg: TrainConfig):
        self.template = template
        self.inputs = inputs
        self.targets = targets
        self.cfg = cfg
        self.n = len(inputs)
        self.bias_slices = self._bias_slices(template)

    @staticmethod
    def _bias_slices(template):
        n, d = template.opening.weights.shape
        slices = [slice(n * d, n * d + n)]
        pos = n * d + n
        for _ in template.hidden:
            slices.append(slice(pos + n * n, pos + n * n + n))
            pos += n * n + n
        return slices

    def _penalties(self, vec):
        cfg = self.cfg
        reg = 0.5 * cfg.lam * float(
            _smooth_abs(vec, cfg.l1_delta).sum() + (vec * vec).sum()
        )
        pen = 0.0
        for s in self.bias_slices:
            drops = np.minimum(np.diff(vec[s]), 0.0)
            pen += float(drops @ drops)
        return reg + 0.5 * cfg.gamma * pen

    def value(self, vec):
        net = unpack_params(vec, self.template)
        preds, _, _ = _forward_nocheck(net, self.inputs)
        res = preds - self.targets
        return float((res * res).sum()) / (2.0 * self.n) + self._penalties(vec)

    def gradient(self, vec):
        cfg = self.cfg
        net = unpack_params(vec, self.template)
        preds, _, _ = _forward_nocheck(net, self.inputs)
        res = preds - self.targets
        grads, _ = backprop(net, self.inputs, res / self.n, check=False)
        g = pack_grads(grads)
        g += 0.5 * cfg.lam * (vec / np.sqrt(vec * vec + cfg.l1_delta**2) + 2.0 * vec)
        for s in self.bias_slices:
            drops = np.minimum(np.diff(vec[s]), 0.0)
            g[s][1:] += cfg.gamma * drops
            g[s][:-1] -= cfg.gamma * drops
        return g


def _forward_nocheck(net, inputs):
    from .resnet import _forward_full

    return _forward_full(net, inputs, check=False)


def split_indices(n: int, split_fraction: float, seed: int):
    """Deterministic shuffled train/validation split (at least one of each)."""
    perm = np.random.default_rng([seed, 0xD5]).permutation(n)
    n_train = int(round(split_fraction * n))
    n_train = min(max(n_train, 1), n - 1) if n > 1 else n
    return perm[:n_train], perm[n_train:]


def _train_one_net(args):
    template, x_cols, y_col, train_idx, val_idx, cfg, init_seed = args
    x_train, y_train = x_cols[train_idx], y_col[train_idx]
    x_val, y_val = (x_cols[val_idx], y_col[val_idx]) if len(val_idx) else (
        x_train,
        y_train,
    )
    input_box = (x_train.min(axis=0), x_train.max(axis=0))
    net0 = box_init(template, cfg.box_scale, init_seed, input_box)
    x0 = pack_params(net0)
    obj = _Objective(net0, x_train, y_train, cfg)

    state = {"best_val": np.inf, "best_iter": 0, "best_vec": x0.copy()}
    train_hist, val_hist, gnorm_hist = [], [], []

    def validation_loss(vec):
        net = unpack_params(vec, net0)
        preds, _, _ = _forward_nocheck(net, x_val)
        res = preds - y_val
        return float((res * res).sum()) / (2.0 * len(x_val))

    def cb(k, vec, f, gnorm):
        val = validation_loss(vec)
        train_hist.append(f)
        val_hist.append(val)
        gnorm_hist.append(gnorm)
        if np.isfinite(val) and val < state["best_val"]:
            state["best_val"] = val
            state["best_iter"] = k
            state["best_vec"] = vec.copy()
        return k - state["best_iter"] >= cfg.patience

    _, result = bfgs_minimize(
        obj.value, obj.gradient, x0, tol=cfg.tol, max_iters=cfg.max_iters, callback=cb
    )
    trained = unpack_params(state["best_vec"], net0)
    history = TrainHistory(
        train_loss=np.asarray(train_hist),
        val_loss=np.asarray(val_hist),
        grad_norm=np.asarray(gnorm_hist),
        best_index=state["best_iter"],
        converged=result.converged,
        line_search_failed=result.line_search_failed,
        diverged=not np.isfinite(state["best_val"]),
    )
    return trained, history


def train_system(
    system: ResNetSystem,
    data: Dataset,
    config: TrainConfig,
    jobs: int = 1,
) -> tuple[ResNetSystem, list[TrainHistory]]:
    """Train every component net of ``system`` on its stencil view of ``data``.

    The passed system supplies shapes, stencils, tau and activation; the
    parameters themselves are freshly box-initialized (seeded from the
    config), so the same seed, config and data give bit-identical
    results.  The per-net jobs are independent; ``jobs`` > 1 runs them
    in separate processes without changing the outcome.
    """
    if data.inputs.shape[1] != system.state_dim:
        raise ValueError(
            f"dataset has {data.inputs.shape[1]} components, system expects "
            f"{system.state_dim}"
        )
    if data.targets.shape[1] != system.state_dim:
        raise ValueError("dataset targets do not match the system state dimension")

    train_idx, val_idx = split_indices(len(data), config.split_fraction, config.seed)
    tasks = []
    for i, (net, st) in enumerate(zip(system.nets, system.stencils)):
        tasks.append(
            (
                net,
                data.inputs[:, list(st)],
                data.targets[:, [i]],
                train_idx,
                val_idx,
                config,
                [config.seed, 1, i],
            )
        )

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_train_one_net, tasks))
    else:
        outcomes = [_train_one_net(t) for t in tasks]

    nets = tuple(net for net, _ in outcomes)
    histories = [hist for _, hist in outcomes]
    trained = ResNetSystem(nets, system.stencils, system.state_dim, system.dt_step)
    return trained, histories
