"""Dense-network training core.

Small fully-connected networks with hand-rolled reverse-mode
differentiation over flat float64 parameter vectors, a closed-form
second-order pass for the input-gradient-norm penalty, and a
bias-corrected Adam optimizer.  Everything is a pure function of
(spec, params, inputs); nothing here holds mutable state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

LEAKY_SLOPE = 0.2

_MAGIC = b"AFPV"
_VERSION = 1

ACTIVATIONS = ("relu", "tanh", "leaky_relu", "linear")


class DivergenceError(RuntimeError):
    """Raised when gradients or parameters stop being finite."""


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a dense network: layer widths plus activations."""

    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    output_activation: str = "linear"

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("need at least input and output widths")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("layer widths must be >= 1")
        for name in (self.activation, self.output_activation):
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    def param_count(self) -> int:
        widths = self.layer_widths
        return sum((widths[i] + 1) * widths[i + 1] for i in range(len(widths) - 1))

    def _layer_activation(self, layer: int) -> str:
        last = len(self.layer_widths) - 2
        return self.output_activation if layer == last else self.activation


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "linear":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0.0, z, LEAKY_SLOPE * z)
    return np.tanh(z)


def _act_deriv(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    # at the relu/leaky kink (z == 0) the left derivative is used
    if name == "linear":
        return np.ones_like(z)
    if name == "relu":
        return np.where(z > 0.0, 1.0, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0.0, 1.0, LEAKY_SLOPE)
    return 1.0 - a * a


def _act_second_deriv(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return -2.0 * a * (1.0 - a * a)
    return np.zeros_like(z)


def unpack(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat parameter vector into per-layer (W, b) views."""
    if params.shape != (spec.param_count(),):
        raise ValueError(
            f"parameter vector has length {params.shape}, spec needs {spec.param_count()}"
        )
    widths = spec.layer_widths
    layers = []
    pos = 0
    for i in range(len(widths) - 1):
        n_in, n_out = widths[i], widths[i + 1]
        w = params[pos : pos + n_in * n_out].reshape(n_out, n_in)
        pos += n_in * n_out
        b = params[pos : pos + n_out]
        pos += n_out
        layers.append((w, b))
    return layers


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform fan-in initialization: U(-1/sqrt(n_in), 1/sqrt(n_in)) per layer."""
    widths = spec.layer_widths
    chunks = []
    for i in range(len(widths) - 1):
        n_in, n_out = widths[i], widths[i + 1]
        bound = 1.0 / np.sqrt(n_in)
        chunks.append(rng.uniform(-bound, bound, size=n_in * n_out))
        chunks.append(rng.uniform(-bound, bound, size=n_out))
    return np.concatenate(chunks)


def _as_batch(spec: MlpSpec, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
        single = True
    else:
        single = False
    if x.shape[1] != spec.in_width:
        raise ValueError(f"input width {x.shape[1]} != spec input width {spec.in_width}")
    return x, single


def _forward_cache(spec: MlpSpec, params: np.ndarray, x: np.ndarray):
    layers = unpack(spec, params)
    acts = [x]
    pre = []
    for i, (w, b) in enumerate(layers):
        z = acts[-1] @ w.T + b
        pre.append(z)
        acts.append(_act(spec._layer_activation(i), z))
    return layers, pre, acts


def forward(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Feed-forward evaluation; accepts a single vector or a batch."""
    xb, single = _as_batch(spec, x)
    _, _, acts = _forward_cache(spec, params, xb)
    out = acts[-1]
    return out[0] if single else out


def grad_params(
    spec: MlpSpec, params: np.ndarray, x: np.ndarray, upstream: np.ndarray
) -> np.ndarray:
    """Reverse-mode gradient of sum_i <upstream_i, net(x_i)> over the parameters.

    ``upstream`` is dLoss/dOutput, one row per batch row; pass shape (out,)
    with a single input.  Returns a flat gradient summed over the batch.
    """
    g, _ = grad_params_and_input(spec, params, x, upstream)
    return g


def grad_params_and_input(
    spec: MlpSpec, params: np.ndarray, x: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop returning (flat parameter gradient, gradient w.r.t. inputs)."""
    xb, single = _as_batch(spec, x)
    up = np.asarray(upstream, dtype=np.float64)
    if up.ndim == 1:
        up = up[None, :] if single else np.broadcast_to(up, (xb.shape[0], up.shape[0]))
    if up.shape != (xb.shape[0], spec.out_width):
        raise ValueError("upstream shape does not match network output")
    layers, pre, acts = _forward_cache(spec, params, xb)

    grad = np.zeros_like(params)
    views = unpack(spec, grad)
    da = up
    for i in reversed(range(len(layers))):
        w, _ = layers[i]
        dz = da * _act_deriv(spec._layer_activation(i), pre[i], acts[i + 1])
        views[i][0][...] += dz.T @ acts[i]
        views[i][1][...] += dz.sum(axis=0)
        da = dz @ w
    dx = da[0] if single else da
    return grad, dx


def per_sample_grad_params(
    spec: MlpSpec, params: np.ndarray, x: np.ndarray, upstream: np.ndarray
) -> np.ndarray:
    """Per-row parameter gradients, shape (batch, param_count).

    Needed where each sample's gradient is clipped before averaging.
    """
    xb, _ = _as_batch(spec, x)
    up = np.asarray(upstream, dtype=np.float64)
    if up.ndim == 1:
        up = np.broadcast_to(up[None, :], (xb.shape[0], spec.out_width))
    layers, pre, acts = _forward_cache(spec, params, xb)

    batch = xb.shape[0]
    out = np.zeros((batch, spec.param_count()))
    pos_views = _per_sample_views(spec, out)
    da = up
    for i in reversed(range(len(layers))):
        w, _ = layers[i]
        dz = da * _act_deriv(spec._layer_activation(i), pre[i], acts[i + 1])
        wv, bv = pos_views[i]
        wv[...] += np.einsum("bi,bj->bij", dz, acts[i])
        bv[...] += dz
        da = dz @ w
    return out


def _per_sample_views(spec: MlpSpec, flat: np.ndarray):
    widths = spec.layer_widths
    batch = flat.shape[0]
    views = []
    pos = 0
    for i in range(len(widths) - 1):
        n_in, n_out = widths[i], widths[i + 1]
        w = flat[:, pos : pos + n_in * n_out].reshape(batch, n_out, n_in)
        pos += n_in * n_out
        b = flat[:, pos : pos + n_out]
        pos += n_out
        views.append((w, b))
    return views


def grad_input(spec: MlpSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Gradient of a scalar-output network with respect to its input."""
    if spec.out_width != 1:
        raise ValueError("grad_input requires a scalar-output network")
    xb, single = _as_batch(spec, x)
    _, dx = grad_params_and_input(spec, params, xb, np.ones((xb.shape[0], 1)))
    return dx[0] if single else dx


def gp_param_grad(
    spec: MlpSpec, params: np.ndarray, interp_point: np.ndarray, gp_coeff: float
) -> np.ndarray:
    """Parameter gradient of gp_coeff * (||grad_x net(x)||_2 - 1)^2 at one point."""
    x = np.asarray(interp_point, dtype=np.float64)
    single = x.ndim == 1
    grads, _, _ = gp_per_sample(spec, params, x if not single else x[None, :], gp_coeff)
    return grads[0] if single else grads.sum(axis=0)


def gp_per_sample(
    spec: MlpSpec, params: np.ndarray, x_hat: np.ndarray, gp_coeff: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample penalty gradients for a batch of interpolation points.

    Returns (per-sample flat gradients (B, P), per-sample penalty values (B,),
    per-sample input-gradient norms (B,)).

    Works by running reverse-mode over the combined graph
    [forward pass -> input-gradient pass -> penalty], which is closed-form
    for a dense network.  The reverse (input-gradient) strand is
        u_L = 1;  v_l = u_l * act'(z_l);  u_{l-1} = W_l^T v_l;  g = u_0,
    so its adjoints need act'' of each activation; the forward strand then
    receives the accumulated z-adjoints as in ordinary backprop.  At
    ||g|| = 0 the subgradient 0 is used, making the whole gradient zero.
    """
    if spec.out_width != 1:
        raise ValueError("gradient penalty requires a scalar-output network")
    xb, _ = _as_batch(spec, x_hat)
    layers, pre, acts = _forward_cache(spec, params, xb)
    n_layers = len(layers)
    names = [spec._layer_activation(i) for i in range(n_layers)]
    d1 = [_act_deriv(names[i], pre[i], acts[i + 1]) for i in range(n_layers)]
    d2 = [_act_second_deriv(names[i], pre[i], acts[i + 1]) for i in range(n_layers)]

    batch = xb.shape[0]
    # input-gradient strand: u[l] = d y / d a_l, v[l] = d y / d z_l
    u = [None] * (n_layers + 1)
    v = [None] * n_layers
    u[n_layers] = np.ones((batch, 1))
    for i in reversed(range(n_layers)):
        v[i] = u[i + 1] * d1[i]
        u[i] = v[i] @ layers[i][0]
    g = u[0]

    norms = np.sqrt(np.sum(g * g, axis=1))
    penalty = gp_coeff * (norms - 1.0) ** 2
    scale = np.where(norms > 0.0, 2.0 * gp_coeff * (norms - 1.0) / np.where(norms > 0.0, norms, 1.0), 0.0)
    g_bar = g * scale[:, None]

    out = np.zeros((batch, spec.param_count()))
    views = _per_sample_views(spec, out)

    # adjoints of the input-gradient strand, walked in original-forward order
    # (u_0 was produced last, so it is differentiated first)
    z_bar = [np.zeros_like(pre[i]) for i in range(n_layers)]
    u_bar = g_bar
    for i in range(n_layers):
        w, _ = layers[i]
        v_bar = u_bar @ w.T
        views[i][0][...] += np.einsum("bi,bj->bij", v[i], u_bar)
        z_bar[i] += v_bar * u[i + 1] * d2[i]
        u_bar = v_bar * d1[i]

    # forward strand: propagate the accumulated z adjoints down
    a_bar = np.zeros((batch, 1))
    for i in reversed(range(n_layers)):
        w, _ = layers[i]
        dz = z_bar[i] + a_bar * d1[i]
        views[i][0][...] += np.einsum("bi,bj->bij", dz, acts[i])
        views[i][1][...] += dz
        a_bar = dz @ w
    return out, penalty, norms


@dataclass(frozen=True)
class AdamState:
    """Optimizer moments plus hyper-parameters; one instance per trained net."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int
    alpha: float
    beta1: float
    beta2: float
    epsilon_num: float = 1e-8

    @classmethod
    def fresh(cls, n_params: int, alpha: float, beta1: float, beta2: float) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params), 0, alpha, beta1, beta2)


def adam_step(
    params: np.ndarray, grads: np.ndarray, state: AdamState
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; pure, returns new params and state."""
    if params.shape != grads.shape:
        raise ValueError("params and grads must have equal length")
    if not np.all(np.isfinite(grads)):
        raise DivergenceError("non-finite gradient passed to adam_step")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.alpha * m_hat / (np.sqrt(v_hat) + state.epsilon_num)
    return new_params, replace(state, first_moment=m, second_moment=v, step_count=t)


def save_params(path, params: np.ndarray) -> None:
    """Checkpoint format: 16-byte header (magic, version, count) + LE float64."""
    arr = np.ascontiguousarray(params, dtype="<f8")
    header = _MAGIC + struct.pack("<IQ", _VERSION, arr.size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def load_params(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != _MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        version, count = struct.unpack("<IQ", header[4:])
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        data = np.frombuffer(fh.read(count * 8), dtype="<f8")
        if data.size != count:
            raise ValueError(f"{path}: truncated checkpoint")
    return data.astype(np.float64)
