"""Minimal dense ResNet engine: forward, hand-written reverse mode, Adam.

Residual blocks are z -> z + W2 relu(W1 z + b1) + b2 so an all-zero block is
the identity, and a zeroed output head makes the whole network compute zero.
Every matrix product goes through einsum with a fixed summation order, which
makes a batch evaluation bitwise equal to row-by-row evaluation (BLAS matmul
does not guarantee that across batch sizes).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

_PARAMS_MAGIC = b"OTNN1\n"


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,jk->ik", a, b, optimize=False)


def _mm_tn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a.T @ b with fixed reduction order over the batch axis."""
    return np.einsum("bi,bo->io", a, b, optimize=False)


def _mm_nt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b.T with fixed reduction order."""
    return np.einsum("bo,io->bi", a, b, optimize=False)


@dataclass(frozen=True)
class NetLayout:
    """Widths of the network: input, one width per residual block, output."""

    in_dim: int
    hidden: Tuple[int, ...]
    out_dim: int

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layout widths must be >= 1")
        if len(self.hidden) < 1 or any(w < 1 for w in self.hidden):
            raise ValueError("need at least one hidden block of width >= 1")
        if len(set(self.hidden)) != 1:
            raise ValueError("residual blocks must share one width (skip adds block input)")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))

    @property
    def width(self) -> int:
        return self.hidden[0]

    @property
    def blocks(self) -> int:
        return len(self.hidden)


def _param_names(layout: NetLayout) -> Tuple[str, ...]:
    names = ["entry.W", "entry.b"]
    for k in range(layout.blocks):
        names += [f"block{k}.W1", f"block{k}.b1", f"block{k}.W2", f"block{k}.b2"]
    names += ["head.W", "head.b"]
    return tuple(names)


@dataclass(frozen=True)
class DenseNet:
    """Value type holding the layout and a flat tuple of parameter arrays.

    Order: entry.W (in,w), entry.b (w,), then per block W1 (w,w), b1, W2, b2,
    then head.W (w,out), head.b (out,).
    """

    layout: NetLayout
    params: Tuple[np.ndarray, ...]

    def __post_init__(self):
        expected = _expected_shapes(self.layout)
        if len(self.params) != len(expected):
            raise ValueError(f"expected {len(expected)} parameter arrays, got {len(self.params)}")
        frozen = []
        for a, shape, name in zip(self.params, expected, _param_names(self.layout)):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name}: non-finite parameters")
            a = a.copy()
            a.flags.writeable = False
            frozen.append(a)
        object.__setattr__(self, "params", tuple(frozen))

    @property
    def param_names(self) -> Tuple[str, ...]:
        return _param_names(self.layout)


@dataclass(frozen=True)
class Gradient:
    """Per-parameter derivative arrays aligned with DenseNet.params."""

    arrays: Tuple[np.ndarray, ...]

    def scaled(self, s: float) -> "Gradient":
        return Gradient(tuple(s * a for a in self.arrays))

    def __add__(self, other: "Gradient") -> "Gradient":
        if len(self.arrays) != len(other.arrays):
            raise ValueError("gradient shapes do not align")
        return Gradient(tuple(a + b for a, b in zip(self.arrays, other.arrays)))


def _net_from_fresh(layout: NetLayout, params) -> "DenseNet":
    """Wrap freshly computed, correctly shaped arrays without the validating
    copy; only for internal updates whose inputs were already checked."""
    net = object.__new__(DenseNet)
    frozen = []
    for a in params:
        a.flags.writeable = False
        frozen.append(a)
    object.__setattr__(net, "layout", layout)
    object.__setattr__(net, "params", tuple(frozen))
    return net


def _expected_shapes(layout: NetLayout):
    w = layout.width
    shapes = [(layout.in_dim, w), (w,)]
    for _ in range(layout.blocks):
        shapes += [(w, w), (w,), (w, w), (w,)]
    shapes += [(w, layout.out_dim), (layout.out_dim,)]
    return shapes


def init_network(layout: NetLayout, rng, zero_last: bool = False) -> DenseNet:
    """He-initialized network; zero_last zeroes the output head so the net
    computes exactly zero at initialization (the residual trunks still carry
    random hidden weights, ready to train)."""
    gen = rng.generator()
    w = layout.width
    params = []

    def he(fan_in, shape):
        return gen.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    params += [he(layout.in_dim, (layout.in_dim, w)), np.zeros(w)]
    for _ in range(layout.blocks):
        params += [he(w, (w, w)), np.zeros(w), he(w, (w, w)), np.zeros(w)]
    if zero_last:
        params += [np.zeros((w, layout.out_dim)), np.zeros(layout.out_dim)]
    else:
        params += [he(w, (w, layout.out_dim)), np.zeros(layout.out_dim)]
    return DenseNet(layout, tuple(params))


def _promote(net: DenseNet, x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.layout.in_dim:
        raise ValueError(f"input shape {x.shape} does not match in_dim {net.layout.in_dim}")
    return x, single


def _forward_cached(net: DenseNet, x: np.ndarray):
    p = net.params
    cache = {"x": x}
    z = _mm(x, p[0]) + p[1]
    cache["entry_pre"] = z
    z = np.maximum(z, 0.0)
    zs, hpres, hs = [], [], []
    idx = 2
    for _ in range(net.layout.blocks):
        w1, b1, w2, b2 = p[idx], p[idx + 1], p[idx + 2], p[idx + 3]
        idx += 4
        zs.append(z)
        h_pre = _mm(z, w1) + b1
        h = np.maximum(h_pre, 0.0)
        hpres.append(h_pre)
        hs.append(h)
        z = z + _mm(h, w2) + b2
    cache["zs"], cache["hpres"], cache["hs"], cache["z_last"] = zs, hpres, hs, z
    out = _mm(z, p[-2]) + p[-1]
    return out, cache


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a single input vector or a batch of rows."""
    xb, single = _promote(net, x)
    out, _ = _forward_cached(net, xb)
    return out[0] if single else out


def backward(net: DenseNet, x: np.ndarray, cotangent: np.ndarray,
             cache: Optional[dict] = None) -> Tuple[Gradient, np.ndarray]:
    """Reverse-mode derivatives of <cotangent, forward(net, x)>.

    Returns the parameter gradient (summed over the batch) and the input
    cotangent. ReLU's subgradient at 0 is taken as 0. Passing the cache from
    a previous forward on the same x skips the recomputation.
    """
    xb, single = _promote(net, x)
    cot = np.asarray(cotangent, dtype=np.float64)
    if single:
        cot = cot[None, :]
    if cot.shape != (xb.shape[0], net.layout.out_dim):
        raise ValueError(f"cotangent shape {cot.shape} does not match output {(xb.shape[0], net.layout.out_dim)}")
    if cache is None:
        _, cache = _forward_cached(net, xb)

    p = net.params
    grads = [None] * len(p)
    z_last = cache["z_last"]
    grads[-2] = _mm_tn(z_last, cot)
    grads[-1] = cot.sum(axis=0)
    g = _mm_nt(cot, p[-2])

    for k in range(net.layout.blocks - 1, -1, -1):
        idx = 2 + 4 * k
        w1, w2 = p[idx], p[idx + 2]
        z, h_pre, h = cache["zs"][k], cache["hpres"][k], cache["hs"][k]
        grads[idx + 2] = _mm_tn(h, g)
        grads[idx + 3] = g.sum(axis=0)
        dh = _mm_nt(g, w2) * (h_pre > 0.0)
        grads[idx] = _mm_tn(z, dh)
        grads[idx + 1] = dh.sum(axis=0)
        g = g + _mm_nt(dh, w1)

    d_entry = g * (cache["entry_pre"] > 0.0)
    grads[0] = _mm_tn(xb, d_entry)
    grads[1] = d_entry.sum(axis=0)
    dx = _mm_nt(d_entry, p[0])
    return Gradient(tuple(grads)), (dx[0] if single else dx)


@dataclass(frozen=True)
class AdamState:
    """Adam accumulators; t counts completed steps (starts at 0)."""

    m: Tuple[np.ndarray, ...]
    v: Tuple[np.ndarray, ...]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: DenseNet) -> "AdamState":
        return cls(
            m=tuple(np.zeros_like(a) for a in net.params),
            v=tuple(np.zeros_like(a) for a in net.params),
        )


def adam_step(state: AdamState, net: DenseNet, grad: Gradient, lr: float):
    """One bias-corrected Adam update; returns (new state, new net)."""
    if lr <= 0:
        raise ValueError("lr must be > 0")
    if len(grad.arrays) != len(net.params):
        raise ValueError("gradient does not align with network parameters")
    for g in grad.arrays:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient: training diverged")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for pa, ga, ma, va in zip(net.params, grad.arrays, state.m, state.v):
        m = b1 * ma + (1.0 - b1) * ga
        v = b2 * va + (1.0 - b2) * ga * ga
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_m.append(m)
        new_v.append(v)
        new_p.append(pa - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return (
        AdamState(tuple(new_m), tuple(new_v), t, b1, b2, state.eps),
        _net_from_fresh(net.layout, new_p),
    )


def write_params(net: DenseNet, path) -> None:
    """Save parameters as a flat named-array container: a magic line, a JSON
    header (names, shapes, layout), then raw little-endian float64 buffers."""
    header = {
        "names": list(net.param_names),
        "shapes": [list(a.shape) for a in net.params],
        "layout": {
            "in_dim": net.layout.in_dim,
            "hidden": list(net.layout.hidden),
            "out_dim": net.layout.out_dim,
        },
        "dtype": "<f8",
    }
    with open(path, "wb") as fh:
        fh.write(_PARAMS_MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for a in net.params:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_params(path) -> DenseNet:
    with open(path, "rb") as fh:
        if fh.read(len(_PARAMS_MAGIC)) != _PARAMS_MAGIC:
            raise ValueError(f"{path}: not a parameter container")
        header = json.loads(fh.readline().decode("utf-8"))
        layout = NetLayout(
            header["layout"]["in_dim"],
            tuple(header["layout"]["hidden"]),
            header["layout"]["out_dim"],
        )
        params = []
        for shape in header["shapes"]:
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated parameter container")
            params.append(np.frombuffer(buf, dtype="<f8").reshape(shape))
    return DenseNet(layout, tuple(params))
