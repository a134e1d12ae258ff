"""Dense residual networks with a smoothed-ReLU activation.

A network of depth L applies

    y_1     = sigma(W_0 y_0 + b_0)
    y_{l+1} = y_l + tau * sigma(W_l y_l + b_l),    l = 1, ..., L-2
    y_L     = W_{L-1} y_{L-1}

where sigma is a C^1 quadratic smoothing of the ReLU and the closing layer
carries no bias.  A ``ResNetSystem`` bundles one scalar-output network per
state component, each optionally reading a reduced stencil of the input
state; iterating ``system_forward`` advances the learned update map one
time step at a time.

All arithmetic is 64-bit.  Forward and backward passes accept a single
state vector or a 2-d batch (rows are samples) and are pure functions,
safe to call concurrently on shared parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DivergenceError(FloatingPointError):
    """A pass produced non-finite values.

    ``layer`` is the recurrence index that first went non-finite
    (0 = opening, 1..L-2 = hidden updates, L-1 = closing) and
    ``component`` the index of the offending net inside a system,
    when applicable.
    """

    def __init__(self, message, layer=None, component=None):
        super().__init__(message)
        self.layer = layer
        self.component = component


@dataclass(frozen=True)
class ActivationSpec:
    """Half-width of the quadratic region smoothing the ReLU kink."""

    epsilon: float = 0.1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def activation(x, spec: ActivationSpec):
    """Smoothed ReLU: max(0, x) outside |x| <= eps, a matching parabola inside.

    The quadratic branch x^2/(4 eps) + x/2 + eps/4 agrees with max(0, x) in
    value and first derivative at x = +-eps, so the function is C^1.
    Applied componentwise to arrays; scalars come back as floats.
    """
    eps = spec.epsilon
    x = np.asarray(x, dtype=np.float64)
    quad = x * x / (4.0 * eps) + 0.5 * x + 0.25 * eps
    out = np.where(np.abs(x) <= eps, quad, np.maximum(x, 0.0))
    return out if out.ndim else float(out)


def activation_derivative(x, spec: ActivationSpec):
    """Exact derivative of ``activation``: 0 / x/(2 eps) + 1/2 / 1."""
    eps = spec.epsilon
    x = np.asarray(x, dtype=np.float64)
    mid = x / (2.0 * eps) + 0.5
    out = np.where(x < -eps, 0.0, np.where(x > eps, 1.0, mid))
    return out if out.ndim else float(out)


def _as_matrix(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _as_vector(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class LayerParams:
    """One affine layer: ``weights`` maps this layer's width to the next,
    ``bias`` has the next layer's width."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = _as_matrix(self.weights, "weights")
        b = _as_vector(self.bias, "bias")
        if w.shape[0] != b.shape[0]:
            raise ValueError(
                f"bias length {b.shape[0]} does not match weight rows {w.shape[0]}"
            )
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class ResNetParams:
    """Parameters of one residual network.

    ``hidden`` holds the L-2 square inner layers; ``closing`` is a bare
    weight matrix (the output layer has no bias by construction).
    """

    input_dim: int
    output_dim: int
    depth: int
    hidden_width: int
    tau: float
    opening: LayerParams
    hidden: tuple[LayerParams, ...]
    closing: np.ndarray
    activation: ActivationSpec

    def __post_init__(self):
        d, d_star, L, n = self.input_dim, self.output_dim, self.depth, self.hidden_width
        if L < 3:
            raise ValueError(f"depth must be >= 3, got {L}")
        if d < 1 or d_star < 1 or n < 1:
            raise ValueError("dimensions must be positive")
        # tau = 0 is allowed (the residual chain collapses); negative is not.
        if not self.tau >= 0:
            raise ValueError(f"tau must be non-negative, got {self.tau}")
        if self.opening.weights.shape != (n, d):
            raise ValueError(
                f"opening weights must be {(n, d)}, got {self.opening.weights.shape}"
            )
        hidden = tuple(self.hidden)
        if len(hidden) != L - 2:
            raise ValueError(f"expected {L - 2} hidden layers, got {len(hidden)}")
        for k, layer in enumerate(hidden):
            if layer.weights.shape != (n, n):
                raise ValueError(
                    f"hidden layer {k} must be square {(n, n)}, "
                    f"got {layer.weights.shape}"
                )
        closing = _as_matrix(self.closing, "closing")
        if closing.shape != (d_star, n):
            raise ValueError(f"closing must be {(d_star, n)}, got {closing.shape}")
        object.__setattr__(self, "hidden", hidden)
        object.__setattr__(self, "closing", closing)

    @classmethod
    def from_layers(cls, opening, hidden, closing, tau, activation):
        """Build params with dimensions derived from the layer shapes."""
        closing = _as_matrix(closing, "closing")
        n, d = np.asarray(opening.weights).shape
        return cls(
            input_dim=d,
            output_dim=closing.shape[0],
            depth=len(hidden) + 2,
            hidden_width=n,
            tau=tau,
            opening=opening,
            hidden=tuple(hidden),
            closing=closing,
            activation=activation,
        )


@dataclass(frozen=True)
class HiddenTrace:
    """Hidden states y_1 ... y_{L-1} recorded by one forward pass."""

    states: tuple[np.ndarray, ...]

    def __len__(self):
        return len(self.states)

    def __getitem__(self, k):
        return self.states[k]


def _check_finite(y, layer, component=None):
    if not np.all(np.isfinite(y)):
        raise DivergenceError(
            f"non-finite values at layer {layer}", layer=layer, component=component
        )


def _forward_full(net: ResNetParams, y0, check):
    """Forward pass keeping hidden states and pre-activations for backprop."""
    spec = net.activation
    # Overflow is handled by the finite checks / divergence flags, not warnings.
    with np.errstate(over="ignore", invalid="ignore"):
        z = y0 @ net.opening.weights.T + net.opening.bias
        y = activation(z, spec)
        if check:
            _check_finite(y, 0)
        states = [y]
        preacts = [z]
        for k, layer in enumerate(net.hidden):
            z = y @ layer.weights.T + layer.bias
            y = y + net.tau * activation(z, spec)
            if check:
                _check_finite(y, k + 1)
            states.append(y)
            preacts.append(z)
        y_out = y @ net.closing.T
        if check:
            _check_finite(y_out, net.depth - 1)
    return y_out, states, preacts


def forward(net: ResNetParams, y0, check: bool = True):
    """Propagate ``y0`` through the network.

    Returns ``(y_L, trace)`` where ``trace`` records the hidden states
    y_1 ... y_{L-1}.  ``y0`` may be a vector of length ``input_dim`` or a
    batch of shape ``(N, input_dim)``; outputs follow the same layout.
    With ``check`` on, overflow to non-finite values raises
    ``DivergenceError`` carrying the layer index.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    if y0.shape[-1] != net.input_dim:
        raise ValueError(
            f"input has width {y0.shape[-1]}, expected {net.input_dim}"
        )
    y_out, states, _ = _forward_full(net, y0, check)
    return y_out, HiddenTrace(tuple(states))


@dataclass(frozen=True)
class ResNetGrads:
    """Gradients mirroring the ResNetParams layout."""

    opening: LayerParams
    hidden: tuple[LayerParams, ...]
    closing: np.ndarray


def backprop(net: ResNetParams, y0, upstream, check: bool = True):
    """Exact reverse-mode gradients of ``upstream . y_L``.

    Returns ``(grads, input_grad)`` with ``grads`` holding the derivative
    with respect to every weight and bias and ``input_grad`` the
    derivative with respect to ``y0``.  Batched inputs contract the
    parameter gradients over the batch (``upstream . y_L`` summed over
    samples) while ``input_grad`` stays per-sample.
    """
    y0 = np.asarray(y0, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    single = y0.ndim == 1
    yb = y0[None, :] if single else y0
    ub = upstream[None, :] if single else upstream
    if ub.shape != (yb.shape[0], net.output_dim):
        raise ValueError(
            f"upstream has shape {upstream.shape}, expected output width "
            f"{net.output_dim}"
        )

    _, states, preacts = _forward_full(net, yb, check)
    spec = net.activation

    d_closing = ub.T @ states[-1]
    delta = ub @ net.closing
    hidden_grads = [None] * len(net.hidden)
    for k in range(len(net.hidden) - 1, -1, -1):
        s = net.tau * activation_derivative(preacts[k + 1], spec) * delta
        hidden_grads[k] = LayerParams(s.T @ states[k], s.sum(axis=0))
        delta = delta + s @ net.hidden[k].weights
    s0 = activation_derivative(preacts[0], spec) * delta
    d_opening = LayerParams(s0.T @ yb, s0.sum(axis=0))
    input_grad = s0 @ net.opening.weights
    if single:
        input_grad = input_grad[0]
    return ResNetGrads(d_opening, tuple(hidden_grads), d_closing), input_grad


def n_params(net: ResNetParams) -> int:
    total = net.opening.weights.size + net.opening.bias.size
    for layer in net.hidden:
        total += layer.weights.size + layer.bias.size
    return total + net.closing.size


def pack_params(net: ResNetParams) -> np.ndarray:
    """Flatten all parameters into one vector (fixed layer order)."""
    parts = [net.opening.weights.ravel(), net.opening.bias]
    for layer in net.hidden:
        parts.append(layer.weights.ravel())
        parts.append(layer.bias)
    parts.append(net.closing.ravel())
    return np.concatenate(parts)


def pack_grads(grads: ResNetGrads) -> np.ndarray:
    parts = [grads.opening.weights.ravel(), grads.opening.bias]
    for layer in grads.hidden:
        parts.append(layer.weights.ravel())
        parts.append(layer.bias)
    parts.append(grads.closing.ravel())
    return np.concatenate(parts)


def unpack_params(vec, template: ResNetParams) -> ResNetParams:
    """Rebuild params from a flat vector using ``template`` for shapes."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (n_params(template),):
        raise ValueError(
            f"parameter vector has length {vec.size}, expected {n_params(template)}"
        )
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        out = vec[pos : pos + size].reshape(shape)
        pos += size
        return out

    n, d = template.opening.weights.shape
    opening = LayerParams(take((n, d)), take((n,)))
    hidden = []
    for _ in template.hidden:
        hidden.append(LayerParams(take((n, n)), take((n,))))
    closing = take(template.closing.shape)
    return ResNetParams(
        input_dim=template.input_dim,
        output_dim=template.output_dim,
        depth=template.depth,
        hidden_width=template.hidden_width,
        tau=template.tau,
        opening=opening,
        hidden=tuple(hidden),
        closing=closing,
        activation=template.activation,
    )


def identity_stencils(state_dim: int) -> tuple[tuple[int, ...], ...]:
    """Every net reads the full state."""
    full = tuple(range(state_dim))
    return tuple(full for _ in range(state_dim))


def cyclic_stencils(state_dim: int, offsets=(-2, -1, 0, 1)):
    """Reduced input stencils: net i reads components i+offset (cyclic wrap)."""
    return tuple(
        tuple((i + off) % state_dim for off in offsets) for i in range(state_dim)
    )


@dataclass(frozen=True)
class ResNetSystem:
    """One scalar-output net per state component, forming one update map.

    ``stencils[i]`` lists the input components net i reads.  ``dt_step``
    records the time step the system advances per evaluation (the step
    the training pairs encoded).
    """

    nets: tuple[ResNetParams, ...]
    stencils: tuple[tuple[int, ...], ...]
    state_dim: int
    dt_step: float | None = None

    def __post_init__(self):
        nets = tuple(self.nets)
        stencils = tuple(tuple(int(j) for j in st) for st in self.stencils)
        if len(nets) != self.state_dim:
            raise ValueError(
                f"system has {len(nets)} nets for state dimension {self.state_dim}"
            )
        if len(stencils) != len(nets):
            raise ValueError("one stencil per net required")
        depths = {net.depth for net in nets}
        if len(depths) > 1:
            raise ValueError(f"all nets must share one depth, got {sorted(depths)}")
        for i, (net, st) in enumerate(zip(nets, stencils)):
            if net.output_dim != 1:
                raise ValueError(f"net {i} must have scalar output")
            if net.input_dim != len(st):
                raise ValueError(
                    f"net {i} reads {net.input_dim} inputs but stencil has {len(st)}"
                )
            for j in st:
                if not 0 <= j < self.state_dim:
                    raise ValueError(f"stencil index {j} outside state of dimension "
                                     f"{self.state_dim}")
        object.__setattr__(self, "nets", nets)
        object.__setattr__(self, "stencils", stencils)

    @property
    def depth(self) -> int:
        return self.nets[0].depth


def system_forward(system: ResNetSystem, u, check: bool = True):
    """Advance the state one step: component i comes from net i on its stencil."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != system.state_dim:
        raise ValueError(
            f"state has width {u.shape[-1]}, expected {system.state_dim}"
        )
    outs = []
    for i, (net, st) in enumerate(zip(system.nets, system.stencils)):
        try:
            y_out, _ = forward(net, u[..., list(st)], check=check)
        except DivergenceError as err:
            raise DivergenceError(
                f"net {i} diverged at layer {err.layer}",
                layer=err.layer,
                component=i,
            ) from None
        outs.append(y_out[..., 0])
    return np.stack(outs, axis=-1)


def build_system(
    state_dim: int,
    width: int,
    hidden_layers: int,
    dt_step: float | None = None,
    stencils=None,
    tau: float | None = None,
    epsilon: float = 0.1,
) -> ResNetSystem:
    """Zero-parameter system template with the requested architecture.

    ``tau`` defaults to 1/(hidden_layers) so the residual sum stays O(1)
    across depths.  Training replaces the parameters; the template fixes
    shapes, stencils and activation.
    """
    if hidden_layers < 1:
        raise ValueError("need at least one hidden layer")
    if stencils is None:
        stencils = identity_stencils(state_dim)
    if tau is None:
        tau = 1.0 / hidden_layers
    spec = ActivationSpec(epsilon)
    nets = []
    for st in stencils:
        d = len(st)
        nets.append(
            ResNetParams(
                input_dim=d,
                output_dim=1,
                depth=hidden_layers + 2,
                hidden_width=width,
                tau=tau,
                opening=LayerParams(np.zeros((width, d)), np.zeros(width)),
                hidden=tuple(
                    LayerParams(np.zeros((width, width)), np.zeros(width))
                    for _ in range(hidden_layers)
                ),
                closing=np.zeros((1, width)),
                activation=spec,
            )
        )
    return ResNetSystem(tuple(nets), tuple(stencils), state_dim, dt_step)
