"""Minimal sequence-model engine in 64-bit numpy.

Gated recurrent (LSTM) layers, dropout, vector repetition, a per-step affine
head, mean squared error, exact reverse-mode gradients through time, and the
Adam optimizer.  Everything is deterministic under a fixed seed on one thread.

Batched arrays are laid out (batch, time, features).  Gate order in the packed
weight matrices is forget, input, candidate, output.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EmptyInputError


def sigmoid(x):
    """Logistic function 1 / (1 + exp(-x)), numerically stable on both tails."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out[()]


def tanh_act(x):
    """Hyperbolic tangent (exp(x) - exp(-x)) / (exp(x) + exp(-x))."""
    return np.tanh(np.asarray(x, dtype=np.float64))[()]


def param_count(units: int, input_size: int) -> int:
    """Trainable parameters of one recurrent layer: 4*(h*(h+i) + h)."""
    return 4 * (units * (units + input_size) + units)


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_in, fan_out = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class LstmParams:
    """Packed weights of one recurrent layer.

    Each gate g in (forget, input, candidate, output) has input weights
    (input_size, units), recurrent weights (units, units) and a bias (units,),
    stored side by side along the last axis.
    """

    w_x: np.ndarray   # (input_size, 4*units)
    w_h: np.ndarray   # (units, 4*units)
    b: np.ndarray     # (4*units,)

    @property
    def units(self) -> int:
        return self.w_h.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[0]

    @classmethod
    def init(cls, units: int, input_size: int, rng: np.random.Generator) -> "LstmParams":
        w_x = glorot_uniform(rng, (input_size, 4 * units))
        w_h = glorot_uniform(rng, (units, 4 * units))
        b = np.zeros(4 * units)
        b[:units] = 1.0   # open the forget gate at the start of training
        return cls(w_x=w_x, w_h=w_h, b=b)

    def count(self) -> int:
        return self.w_x.size + self.w_h.size + self.b.size


@dataclass
class LstmState:
    """Cell (long-term) and hidden (short-term) state of a recurrent layer."""

    c: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, units: int, batch: int | None = None) -> "LstmState":
        shape = (units,) if batch is None else (batch, units)
        return cls(c=np.zeros(shape), h=np.zeros(shape))


def _gates(params: LstmParams, h_prev: np.ndarray, x: np.ndarray):
    """Forget/input/candidate/output activations for one step."""
    u = params.units
    z = x @ params.w_x + h_prev @ params.w_h + params.b
    f = sigmoid(z[..., 0 * u:1 * u])
    i = sigmoid(z[..., 1 * u:2 * u])
    g = np.tanh(z[..., 2 * u:3 * u])
    o = sigmoid(z[..., 3 * u:4 * u])
    return f, i, g, o


def lstm_step(params: LstmParams, state: LstmState, x: np.ndarray) -> LstmState:
    """One recurrent update.

    The forget, input and output gates squash an affine map of (h_prev, x)
    through the logistic function; the candidate uses tanh.  The new cell
    state is f * c_prev + i * candidate and the new hidden state is
    o * tanh(c).  Accepts a single vector or a batch of rows.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_size:
        raise ValueError(f"input size {x.shape[-1]} does not match layer input {params.input_size}")
    f, i, g, o = _gates(params, state.h, x)
    c = f * state.c + i * g
    h = o * np.tanh(c)
    return LstmState(c=c, h=h)


class LstmLayer:
    """Recurrent layer iterating lstm_step from a zero state over a sequence."""

    def __init__(self, units: int, input_size: int, return_sequences: bool = True,
                 rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng()
        self.p = LstmParams.init(units, input_size, rng)
        self.return_sequences = return_sequences
        self.g_wx = np.zeros_like(self.p.w_x)
        self.g_wh = np.zeros_like(self.p.w_h)
        self.g_b = np.zeros_like(self.p.b)
        self._cache = None

    @property
    def units(self) -> int:
        return self.p.units

    def params(self):
        return [self.p.w_x, self.p.w_h, self.p.b]

    def grads(self):
        return [self.g_wx, self.g_wh, self.g_b]

    def forward(self, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        batch, steps, _ = x.shape
        if steps == 0:
            raise EmptyInputError("empty sequence")
        u = self.p.units
        h = np.zeros((batch, u))
        c = np.zeros((batch, u))
        fs = np.empty((steps, batch, u))
        is_ = np.empty((steps, batch, u))
        gs = np.empty((steps, batch, u))
        os_ = np.empty((steps, batch, u))
        tcs = np.empty((steps, batch, u))
        c_prevs = np.empty((steps, batch, u))
        h_prevs = np.empty((steps, batch, u))
        hs = np.empty((batch, steps, u))
        for t in range(steps):
            c_prevs[t] = c
            h_prevs[t] = h
            f, i, g, o = _gates(self.p, h, x[:, t])
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            fs[t], is_[t], gs[t], os_[t], tcs[t] = f, i, g, o, tc
            hs[:, t] = h
        self._cache = (x, fs, is_, gs, os_, tcs, c_prevs, h_prevs)
        return hs if self.return_sequences else hs[:, -1]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x, fs, is_, gs, os_, tcs, c_prevs, h_prevs = self._cache
        batch, steps, in_size = x.shape
        u = self.p.units
        dx = np.empty((batch, steps, in_size))
        dh_next = np.zeros((batch, u))
        dc_next = np.zeros((batch, u))
        for t in range(steps - 1, -1, -1):
            if self.return_sequences:
                dh = dh_next + grad[:, t]
            else:
                dh = dh_next + grad if t == steps - 1 else dh_next
            f, i, g, o, tc = fs[t], is_[t], gs[t], os_[t], tcs[t]
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            df = dc * c_prevs[t]
            di = dc * g
            dg = dc * i
            dc_next = dc * f
            dz = np.concatenate([
                df * f * (1.0 - f),
                di * i * (1.0 - i),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ], axis=1)
            self.g_wx += x[:, t].T @ dz
            self.g_wh += h_prevs[t].T @ dz
            self.g_b += dz.sum(axis=0)
            dx[:, t] = dz @ self.p.w_x.T
            dh_next = dz @ self.p.w_h.T
        return dx


def lstm_layer_forward(params: LstmParams, sequence: np.ndarray,
                       return_sequence: bool = True) -> np.ndarray:
    """Functional single-sequence forward pass from a zero state.

    Returns all hidden states (T, units) or only the final one (units,).
    """
    sequence = np.asarray(sequence, dtype=np.float64)
    if sequence.shape[0] == 0:
        raise EmptyInputError("empty sequence")
    state = LstmState.zeros(params.units)
    outputs = np.empty((sequence.shape[0], params.units))
    for t in range(sequence.shape[0]):
        state = lstm_step(params, state, sequence[t])
        outputs[t] = state.h
    return outputs if return_sequence else outputs[-1]


def repeat_vector(z: np.ndarray, n: int) -> np.ndarray:
    """Stack n copies of a vector into a sequence (n, len(z))."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.tile(np.asarray(z, dtype=np.float64), (n, 1))


def time_distributed_affine(w: np.ndarray, b: np.ndarray, seq: np.ndarray) -> np.ndarray:
    """Row-wise affine map applied independently at every time step.

    ``w`` is (out, hidden), ``b`` is (out,), ``seq`` is (T, hidden).
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.shape[-1] != w.shape[1]:
        raise ValueError(f"sequence feature size {seq.shape[-1]} does not match weights {w.shape}")
    return seq @ w.T + b


class Dropout:
    """Inverted dropout: scales survivors by 1/(1-rate) while training,
    identity at inference."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self._mask = None

    def forward(self, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad if self._mask is None else grad * self._mask

    def params(self):
        return []

    def grads(self):
        return []


class RepeatVector:
    """Expands the latent vector back to sequence length for the decoder."""

    def __init__(self, repeats: int):
        if repeats < 1:
            raise ValueError("repeats must be >= 1")
        self.repeats = repeats

    def forward(self, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        return np.repeat(x[:, None, :], self.repeats, axis=1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad.sum(axis=1)

    def params(self):
        return []

    def grads(self):
        return []


class TimeDistributedDense:
    """Affine head mapping every time step's hidden vector to the feature space."""

    def __init__(self, input_size: int, output_size: int,
                 rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng()
        self.w = glorot_uniform(rng, (input_size, output_size))
        self.b = np.zeros(output_size)
        self.g_w = np.zeros_like(self.w)
        self.g_b = np.zeros_like(self.b)
        self._x = None

    def forward(self, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        self._x = x
        return x @ self.w + self.b

    def backward(self, grad: np.ndarray) -> np.ndarray:
        batch, steps, hidden = self._x.shape
        flat_x = self._x.reshape(batch * steps, hidden)
        flat_g = grad.reshape(batch * steps, -1)
        self.g_w += flat_x.T @ flat_g
        self.g_b += flat_g.sum(axis=0)
        return grad @ self.w.T

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.g_w, self.g_b]


class Sequential:
    """Layer stack with a shared forward/backward interface."""

    def __init__(self, layers: list):
        self.layers = layers

    def forward(self, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    def zero_grads(self):
        for g in self.grads():
            g[...] = 0.0

    def layer_param_counts(self) -> list[int]:
        return [sum(p.size for p in layer.params()) for layer in self.layers]

    def total_params(self) -> int:
        return sum(self.layer_param_counts())

    def get_param_vector(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()]) if self.params() else np.empty(0)

    def set_param_vector(self, vec: np.ndarray) -> None:
        offset = 0
        for p in self.params():
            p[...] = vec[offset:offset + p.size].reshape(p.shape)
            offset += p.size

    def get_grad_vector(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads()]) if self.grads() else np.empty(0)


def mse_loss(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Mean over every element of the squared difference."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    diff = x - x_hat
    return float(np.mean(diff * diff))


def mse_grad(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    """Gradient of mse_loss with respect to the reconstruction x_hat."""
    return 2.0 * (x_hat - x) / x.size


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
