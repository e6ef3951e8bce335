"""Small Q-networks in numpy: forward pass, reverse-mode gradients and Adam.

Layer stack: encoder (two valid 3x3 convolutions plus a projection for map
inputs, a single dense projection for flat inputs) -> ``rep_size`` features ->
fully-connected layer -> optional LSTM cell -> linear head over the actions.

Gradients never flow through the recurrent carry: every record in a batch
supplies its own ``(h, c)`` and those are treated as constants.
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

ACTION_COUNT = 5
REP_SIZES = (8, 16, 32)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclasses.dataclass(frozen=True)
class ConvLayer:
    kernel: int
    channels: int


@dataclasses.dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, ...]
    rep_size: int = 16
    hidden_size: int = 32
    has_memory: bool = False
    conv_stack: tuple[ConvLayer, ...] = ()
    action_count: int = ACTION_COUNT

    def __post_init__(self):
        if self.rep_size not in REP_SIZES:
            raise ValueError(f"rep_size must be one of {REP_SIZES}")
        if self.action_count != ACTION_COUNT:
            raise ValueError("action_count must be 5")
        if len(self.input_shape) == 3 and len(self.conv_stack) != 2:
            raise ValueError("map inputs need a 2-layer convolution stack")
        if len(self.input_shape) == 1 and self.conv_stack:
            raise ValueError("flat inputs use the dense encoder")

    @classmethod
    def for_map(cls, rep_size=16, hidden_size=32, has_memory=False, channels=(8, 8), size=9):
        return cls(
            input_shape=(size, size, 3),
            rep_size=rep_size,
            hidden_size=hidden_size,
            has_memory=has_memory,
            conv_stack=tuple(ConvLayer(3, c) for c in channels),
        )

    @classmethod
    def for_vector(cls, n_inputs, rep_size=16, hidden_size=32, has_memory=False):
        return cls(input_shape=(n_inputs,), rep_size=rep_size, hidden_size=hidden_size, has_memory=has_memory)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "rep_size": self.rep_size,
            "hidden_size": self.hidden_size,
            "has_memory": self.has_memory,
            "conv_stack": [[c.kernel, c.channels] for c in self.conv_stack],
            "action_count": self.action_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            rep_size=d["rep_size"],
            hidden_size=d["hidden_size"],
            has_memory=d["has_memory"],
            conv_stack=tuple(ConvLayer(k, c) for k, c in d["conv_stack"]),
            action_count=d["action_count"],
        )

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        if self.conv_stack:
            h, w, cin = self.input_shape
            for i, layer in enumerate(self.conv_stack):
                shapes[f"conv{i}.w"] = (layer.kernel, layer.kernel, cin, layer.channels)
                shapes[f"conv{i}.b"] = (layer.channels,)
                h, w, cin = h - layer.kernel + 1, w - layer.kernel + 1, layer.channels
            enc_in = h * w * cin
        else:
            enc_in = int(np.prod(self.input_shape))
        shapes["enc.w"] = (enc_in, self.rep_size)
        shapes["enc.b"] = (self.rep_size,)
        shapes["fc.w"] = (self.rep_size, self.hidden_size)
        shapes["fc.b"] = (self.hidden_size,)
        if self.has_memory:
            H = self.hidden_size
            shapes["lstm.wx"] = (self.hidden_size, 4 * H)
            shapes["lstm.wh"] = (H, 4 * H)
            shapes["lstm.b"] = (4 * H,)
        shapes["head.w"] = (self.hidden_size, self.action_count)
        shapes["head.b"] = (self.action_count,)
        return shapes


def fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.startswith("conv"):
        k1, k2, cin, _ = shape
        return k1 * k2 * cin
    return shape[0]


class MemoryState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


def zero_memory(spec: NetworkSpec) -> MemoryState | None:
    if not spec.has_memory:
        return None
    return MemoryState(np.zeros(spec.hidden_size), np.zeros(spec.hidden_size))


@dataclasses.dataclass
class ParamSet:
    """Named weight arrays plus Adam moments and the Adam step counter."""

    weights: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    def copy(self) -> "ParamSet":
        return ParamSet(
            {k: a.copy() for k, a in self.weights.items()},
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step,
        )

    def n_params(self) -> int:
        return sum(a.size for a in self.weights.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.weights.values())

    def equals(self, other: "ParamSet") -> bool:
        if self.step != other.step or self.weights.keys() != other.weights.keys():
            return False
        return all(
            np.array_equal(d1[k], d2[k])
            for d1, d2 in ((self.weights, other.weights), (self.m, other.m), (self.v, other.v))
            for k in d1
        )


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases and moments."""
    weights = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b"):
            weights[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in(name, shape))
            weights[name] = rng.uniform(-bound, bound, size=shape)
    zeros = {k: np.zeros_like(a) for k, a in weights.items()}
    return ParamSet(weights, zeros, {k: np.zeros_like(a) for k, a in weights.items()}, 0)


_PATCH_INDEX: dict[tuple[int, int, int, int], np.ndarray] = {}


def _patch_index(h: int, w: int, c: int, k: int) -> np.ndarray:
    """Flat gather indices (H'*W', k*k*C) for valid k x k patches, (i, j, c) order."""
    key = (h, w, c, k)
    if key not in _PATCH_INDEX:
        flat = np.arange(h * w * c).reshape(h, w, c)
        win = sliding_window_view(flat, (k, k), axis=(0, 1))  # H', W', C, k, k
        idx = win.transpose(0, 1, 3, 4, 2).reshape((h - k + 1) * (w - k + 1), k * k * c)
        _PATCH_INDEX[key] = np.ascontiguousarray(idx)
    return _PATCH_INDEX[key]


def _conv_forward(x, w, b):
    n, h, wd, c = x.shape
    k, out = w.shape[0], w.shape[3]
    patches = x.reshape(n, -1)[:, _patch_index(h, wd, c, k)]  # B, P, k*k*C
    y = patches @ w.reshape(-1, out) + b
    return y.reshape(n, h - k + 1, wd - k + 1, out), patches


def _conv_backward(dy, patches, w, x_shape):
    k, out = w.shape[0], w.shape[3]
    dy2 = dy.reshape(-1, out)
    dw = (patches.reshape(dy2.shape[0], -1).T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    dx = np.zeros(x_shape)
    ho, wo = dy.shape[1], dy.shape[2]
    for i in range(k):
        for j in range(k):
            dx[:, i : i + ho, j : j + wo, :] += dy @ w[i, j].T
    return dw, db, dx


def _forward_batch(spec: NetworkSpec, weights: dict, x: np.ndarray, h=None, c=None):
    """Batched forward. Returns (q, new_h, new_c, cache)."""
    cache = {}
    a = x
    if spec.conv_stack:
        for i in range(len(spec.conv_stack)):
            z, win = _conv_forward(a, weights[f"conv{i}.w"], weights[f"conv{i}.b"])
            cache[f"conv{i}"] = (win, a.shape, z)
            a = np.maximum(z, 0.0)
    flat = a.reshape(a.shape[0], -1)
    z_enc = flat @ weights["enc.w"] + weights["enc.b"]
    rep = np.maximum(z_enc, 0.0)
    z_fc = rep @ weights["fc.w"] + weights["fc.b"]
    hid = np.maximum(z_fc, 0.0)
    cache.update(flat=flat, a_shape=a.shape, z_enc=z_enc, rep=rep, z_fc=z_fc, hid=hid)
    new_h = new_c = None
    top = hid
    if spec.has_memory:
        H = spec.hidden_size
        gates = hid @ weights["lstm.wx"] + h @ weights["lstm.wh"] + weights["lstm.b"]
        sig = expit(gates)
        gi = sig[:, :H]
        gf = sig[:, H : 2 * H]
        gg = np.tanh(gates[:, 2 * H : 3 * H])
        go = sig[:, 3 * H :]
        new_c = gf * c + gi * gg
        tc = np.tanh(new_c)
        new_h = go * tc
        cache.update(h=h, c=c, gi=gi, gf=gf, gg=gg, go=go, tc=tc)
        top = new_h
    cache["top"] = top
    q = top @ weights["head.w"] + weights["head.b"]
    return q, new_h, new_c, cache


def _backward_batch(spec: NetworkSpec, weights: dict, cache: dict, dq: np.ndarray) -> dict:
    grads = {}
    grads["head.w"] = cache["top"].T @ dq
    grads["head.b"] = dq.sum(axis=0)
    dtop = dq @ weights["head.w"].T
    if spec.has_memory:
        H = spec.hidden_size
        gi, gf, gg, go, tc = (cache[k] for k in ("gi", "gf", "gg", "go", "tc"))
        dgo = dtop * tc
        dc = dtop * go * (1.0 - tc**2)
        dgi = dc * gg
        dgf = dc * cache["c"]
        dgg = dc * gi
        dgates = np.empty((dq.shape[0], 4 * H))
        dgates[:, :H] = dgi * gi * (1 - gi)
        dgates[:, H : 2 * H] = dgf * gf * (1 - gf)
        dgates[:, 2 * H : 3 * H] = dgg * (1 - gg**2)
        dgates[:, 3 * H :] = dgo * go * (1 - go)
        grads["lstm.wx"] = cache["hid"].T @ dgates
        grads["lstm.wh"] = cache["h"].T @ dgates
        grads["lstm.b"] = dgates.sum(axis=0)
        dhid = dgates @ weights["lstm.wx"].T
    else:
        dhid = dtop
    dz_fc = dhid * (cache["z_fc"] > 0)
    grads["fc.w"] = cache["rep"].T @ dz_fc
    grads["fc.b"] = dz_fc.sum(axis=0)
    drep = dz_fc @ weights["fc.w"].T
    dz_enc = drep * (cache["z_enc"] > 0)
    grads["enc.w"] = cache["flat"].T @ dz_enc
    grads["enc.b"] = dz_enc.sum(axis=0)
    if spec.conv_stack:
        da = (dz_enc @ weights["enc.w"].T).reshape(cache["a_shape"])
        for i in reversed(range(len(spec.conv_stack))):
            win, x_shape, z = cache[f"conv{i}"]
            dz = da * (z > 0)
            dw, db, dx = _conv_backward(dz, win, weights[f"conv{i}.w"], x_shape)
            grads[f"conv{i}.w"], grads[f"conv{i}.b"] = dw, db
            da = dx
    return grads


def _check_input(spec: NetworkSpec, x: np.ndarray, batched: bool):
    expected = tuple(spec.input_shape)
    got = x.shape[1:] if batched else x.shape
    if got != expected:
        raise ValueError(f"input shape {got} does not match network input {expected}")


def forward(
    spec: NetworkSpec, params: ParamSet, x: np.ndarray, mem: MemoryState | None = None
) -> tuple[np.ndarray, MemoryState | None]:
    """Q-values for one observation, plus the advanced recurrent state."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(spec, x, batched=False)
    if spec.has_memory:
        if mem is None:
            mem = zero_memory(spec)
        q, h, c, _ = _forward_batch(spec, params.weights, x[None], mem.h[None], mem.c[None])
        return q[0], MemoryState(h[0], c[0])
    q, _, _, _ = _forward_batch(spec, params.weights, x[None])
    return q[0], mem


class Batch(NamedTuple):
    """Regression records: inputs, recurrent carry, taken action, target."""

    inputs: np.ndarray
    actions: np.ndarray
    targets: np.ndarray
    h: np.ndarray | None = None
    c: np.ndarray | None = None


def batch_loss(spec: NetworkSpec, weights: dict, batch: Batch) -> float:
    q, _, _, _ = _forward_batch(spec, weights, batch.inputs, batch.h, batch.c)
    err = q[np.arange(len(batch.actions)), batch.actions] - batch.targets
    return float(np.mean(err**2))


def loss_and_grads(spec: NetworkSpec, params: ParamSet, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared TD error on the taken actions and its gradient."""
    if len(batch.actions) == 0:
        raise ValueError("empty batch")
    targets = np.asarray(batch.targets, dtype=np.float64)
    if not np.isfinite(targets).all():
        raise ValueError("non-finite regression target")
    inputs = np.asarray(batch.inputs, dtype=np.float64)
    _check_input(spec, inputs, batched=True)
    if spec.has_memory and (batch.h is None or batch.c is None):
        raise ValueError("recurrent network needs per-record memory")
    q, _, _, cache = _forward_batch(spec, params.weights, inputs, batch.h, batch.c)
    n = len(batch.actions)
    rows = np.arange(n)
    err = q[rows, batch.actions] - targets
    dq = np.zeros_like(q)
    dq[rows, batch.actions] = 2.0 * err / n
    grads = _backward_batch(spec, params.weights, cache, dq)
    return float(np.mean(err**2)), grads


def adam_step(params: ParamSet, grads: dict[str, np.ndarray], lr: float, t: int | None = None) -> ParamSet:
    """One bias-corrected Adam update; returns a new ParamSet."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    t = params.step + 1 if t is None else t
    b1c = 1.0 - ADAM_BETA1**t
    b2c = 1.0 - ADAM_BETA2**t
    weights, m, v = {}, {}, {}
    for k, w in params.weights.items():
        g = grads[k]
        m[k] = ADAM_BETA1 * params.m[k] + (1 - ADAM_BETA1) * g
        v[k] = ADAM_BETA2 * params.v[k] + (1 - ADAM_BETA2) * g * g
        weights[k] = w - lr * (m[k] / b1c) / (np.sqrt(v[k] / b2c) + ADAM_EPS)
    return ParamSet(weights, m, v, t)


def finite_diff_check(
    spec: NetworkSpec,
    params: ParamSet,
    batch: Batch,
    eps: float = 1e-5,
    grads: dict[str, np.ndarray] | None = None,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The relative error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    the floor keeps round-off on vanishing gradients from dominating.
    ``grads`` overrides the analytic gradient (used to test the checker).
    """
    if params.n_params() == 0:
        return 0.0
    if grads is None:
        _, grads = loss_and_grads(spec, params, batch)
    weights = {k: a.copy() for k, a in params.weights.items()}
    worst = 0.0
    for name, arr in weights.items():
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = batch_loss(spec, weights, batch)
            flat[i] = orig - eps
            down = batch_loss(spec, weights, batch)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            err = abs(g[i] - num) / max(abs(g[i]), abs(num), floor)
            worst = max(worst, err)
    return worst
