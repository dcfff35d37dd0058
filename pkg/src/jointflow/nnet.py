"""Dense feed-forward velocity networks with hand-rolled reverse mode.

The network maps ``(x, t)`` with ``x`` in R^d and scalar ``t`` to a velocity
in R^d.  Time enters as one extra input coordinate.  Only smooth activations
are offered so input Jacobians (and their traces) are well defined
everywhere, which the trajectory-weight integrals rely on.

Reverse mode is written out explicitly (no autograd dependency): one shared
backward pass produces parameter gradients, input gradients (VJPs), and
exact input-Jacobian traces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "VelocityNet",
    "OptimizerState",
    "make_velocity_net",
    "zero_velocity_net",
    "forward",
    "grad_params",
    "vjp_input",
    "jacobian_trace",
    "init_optimizer",
    "optimizer_step",
    "save_checkpoint",
    "load_checkpoint",
]

_TRACE_DIM_CAP = 32
_CHECKPOINT_MAGIC = b"JFNET1\n"


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _silu(z):
    return z * _sigmoid(z)


def _silu_prime(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def _tanh_prime(z):
    return 1.0 - np.tanh(z) ** 2


_ACTIVATIONS = {
    "silu": (_silu, _silu_prime),
    "tanh": (np.tanh, _tanh_prime),
}


@dataclass
class VelocityNet:
    """A fully-connected net over ``concat(x, t)``.

    ``widths`` runs input to output: ``(d + 1, h_1, ..., h_L, d)``.
    ``weights[l]`` has shape ``(widths[l], widths[l+1])``.
    """

    widths: tuple[int, ...]
    activation: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if widths[0] != widths[-1] + 1:
            raise ValueError(
                f"input width {widths[0]} must equal output width {widths[-1]} + 1"
            )
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(widths) - 1:
            raise ValueError("parameter count does not match widths")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[l], widths[l + 1]) or b.shape != (widths[l + 1],):
                raise ValueError(f"layer {l} parameter shape mismatch")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {l} has non-finite parameters")
        object.__setattr__(self, "widths", widths)

    @property
    def dim(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "VelocityNet":
        return VelocityNet(
            widths=self.widths,
            activation=self.activation,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


def make_velocity_net(
    dim: int,
    hidden: tuple[int, ...],
    activation: str = "silu",
    rng: np.random.Generator | None = None,
) -> VelocityNet:
    """Initialize with symmetric uniform fan-in scaling, U(-1/sqrt(fan), +1/sqrt(fan))."""
    if rng is None:
        rng = np.random.default_rng(0)
    widths = (dim + 1, *hidden, dim)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return VelocityNet(widths=widths, activation=activation, weights=weights, biases=biases)


def zero_velocity_net(dim: int, hidden: tuple[int, ...] = (), activation: str = "silu") -> VelocityNet:
    widths = (dim + 1, *hidden, dim)
    weights = [np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])]
    biases = [np.zeros(b) for b in widths[1:]]
    return VelocityNet(widths=widths, activation=activation, weights=weights, biases=biases)


def _stack_inputs(net: VelocityNet, x: np.ndarray, t) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != net.dim:
        raise ValueError(f"input dimension {x.shape[1]} != net dimension {net.dim}")
    tcol = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    return np.concatenate([x, tcol[:, None]], axis=1), single


def _forward_cache(net: VelocityNet, z: np.ndarray):
    """Run the net on pre-stacked inputs, keeping layer inputs and pre-activations."""
    act, _ = _ACTIVATIONS[net.activation]
    layer_inputs = [z]
    pre_acts = []
    h = z
    for l in range(net.n_layers - 1):
        pre = h @ net.weights[l] + net.biases[l]
        pre_acts.append(pre)
        h = act(pre)
        layer_inputs.append(h)
    out = h @ net.weights[-1] + net.biases[-1]
    return layer_inputs, pre_acts, out


def _backward(net: VelocityNet, layer_inputs, pre_acts, dout):
    """Shared reverse pass: returns (dW list, db list, d_input)."""
    _, act_prime = _ACTIVATIONS[net.activation]
    n_layers = net.n_layers
    dws = [None] * n_layers
    dbs = [None] * n_layers
    delta = dout
    for l in range(n_layers - 1, -1, -1):
        dws[l] = layer_inputs[l].T @ delta
        dbs[l] = delta.sum(axis=0)
        delta = delta @ net.weights[l].T
        if l > 0:
            delta = delta * act_prime(pre_acts[l - 1])
    return dws, dbs, delta


def forward(net: VelocityNet, x: np.ndarray, t) -> np.ndarray:
    """Evaluate the net at ``(x, t)``; accepts ``(d,)`` or ``(B, d)`` inputs."""
    z, single = _stack_inputs(net, x, t)
    _, _, out = _forward_cache(net, z)
    return out[0] if single else out


def grad_params(net: VelocityNet, x: np.ndarray, t, targets: np.ndarray):
    """Gradient of the mean squared residual ``(1/B) sum ||target - f(x,t)||^2``.

    Returns ``(dW, db)`` lists matching the net's parameters.
    """
    z, single = _stack_inputs(net, x, t)
    targets = np.asarray(targets, dtype=float)
    if single:
        targets = targets[None, :]
    if targets.shape != (z.shape[0], net.dim):
        raise ValueError("target shape does not match the batch")
    layer_inputs, pre_acts, out = _forward_cache(net, z)
    dout = 2.0 * (out - targets) / z.shape[0]
    dws, dbs, _ = _backward(net, layer_inputs, pre_acts, dout)
    return dws, dbs


def batch_loss(net: VelocityNet, x: np.ndarray, t, targets: np.ndarray) -> float:
    """Mean squared residual over the batch (sum over coordinates)."""
    out = forward(net, x, t)
    return float(np.mean(np.sum((targets - out) ** 2, axis=-1)))


def vjp_input(net: VelocityNet, x: np.ndarray, t, cotangent: np.ndarray) -> np.ndarray:
    """d/dx of ``cotangent . f(x, t)``; exact reverse-mode, linear in the cotangent."""
    z, single = _stack_inputs(net, x, t)
    cot = np.asarray(cotangent, dtype=float)
    if single:
        cot = cot[None, :]
    if cot.shape != (z.shape[0], net.dim):
        raise ValueError("cotangent shape does not match the batch")
    layer_inputs, pre_acts, _ = _forward_cache(net, z)
    _, _, dz = _backward(net, layer_inputs, pre_acts, cot)
    dx = dz[:, : net.dim]
    return dx[0] if single else dx


def jacobian_trace(net: VelocityNet, x: np.ndarray, t) -> float | np.ndarray:
    """Exact divergence ``sum_i d f_i / d x_i`` via d basis-cotangent reverse passes."""
    d = net.dim
    if d > _TRACE_DIM_CAP:
        raise ValueError(f"jacobian_trace supports dim <= {_TRACE_DIM_CAP}, got {d}")
    z, single = _stack_inputs(net, x, t)
    layer_inputs, pre_acts, _ = _forward_cache(net, z)
    batch = z.shape[0]
    trace = np.zeros(batch)
    basis = np.zeros((batch, d))
    for i in range(d):
        basis[:, i] = 1.0
        _, _, dz = _backward(net, layer_inputs, pre_acts, basis)
        trace += dz[:, i]
        basis[:, i] = 0.0
    return float(trace[0]) if single else trace


@dataclass
class OptimizerState:
    """Decoupled-weight-decay adaptive-moment state (one slot per parameter array)."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m_w: list = field(default_factory=list)
    v_w: list = field(default_factory=list)
    m_b: list = field(default_factory=list)
    v_b: list = field(default_factory=list)


def init_optimizer(net: VelocityNet, lr: float, weight_decay: float = 0.0) -> OptimizerState:
    state = OptimizerState(lr=lr, weight_decay=weight_decay)
    state.m_w = [np.zeros_like(w) for w in net.weights]
    state.v_w = [np.zeros_like(w) for w in net.weights]
    state.m_b = [np.zeros_like(b) for b in net.biases]
    state.v_b = [np.zeros_like(b) for b in net.biases]
    return state


def optimizer_step(net: VelocityNet, state: OptimizerState, grads) -> None:
    """One update with bias correction; weight decay is applied decoupled from moments."""
    dws, dbs = grads
    state.step += 1
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    for params, gs, ms, vs in (
        (net.weights, dws, state.m_w, state.v_w),
        (net.biases, dbs, state.m_b, state.v_b),
    ):
        for p, g, m, v in zip(params, gs, ms, vs):
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            p -= state.lr * ((m / b1c) / (np.sqrt(v / b2c) + state.eps))
            if state.weight_decay:
                p -= state.lr * state.weight_decay * p


def save_checkpoint(net: VelocityNet, path) -> None:
    """Write a versioned binary checkpoint with deterministic bytes."""
    header = {
        "format": 1,
        "widths": list(net.widths),
        "activation": net.activation,
    }
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("ascii"))
        fh.write(b"\n")
        for w, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> VelocityNet:
    """Read a checkpoint; rejects width/size mismatches."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a velocity-net checkpoint")
        header = json.loads(fh.readline().decode("ascii"))
        if header.get("format") != 1:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')}")
        widths = tuple(int(w) for w in header["widths"])
        weights, biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            wbytes = fh.read(fan_in * fan_out * 8)
            bbytes = fh.read(fan_out * 8)
            if len(wbytes) != fan_in * fan_out * 8 or len(bbytes) != fan_out * 8:
                raise ValueError(f"{path}: truncated checkpoint for widths {widths}")
            weights.append(np.frombuffer(wbytes, dtype="<f8").reshape(fan_in, fan_out).copy())
            biases.append(np.frombuffer(bbytes, dtype="<f8").copy())
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes do not match widths {widths}")
    return VelocityNet(widths=widths, activation=header["activation"], weights=weights, biases=biases)
