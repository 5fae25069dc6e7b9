"""Vector-field MLP and the input-convex Lyapunov-Razumikhin network.

Parameters are immutable dataclasses holding numpy arrays.  Forward passes are
written against :mod:`stable_ndde.ad`, so they accept either the dataclasses
or flat parameter lists whose entries may be tape variables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import ad
from .ad import ConfigurationError, ShapeError

FORMAT_VERSION = 1
MLP_HIDDEN = (32, 64, 128, 64, 32)
ICNN_HIDDEN = (64, 64)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class MlpParams:
    """Fully connected Swish network; weights stored as (fan_in, fan_out).

    ``init`` draws weights uniformly in +-1/sqrt(fan_in) and zeros the biases.
    """

    weights: tuple
    biases: tuple

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("mlp needs one bias per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape}")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {k} input {w.shape[0]} != previous output {self.weights[k - 1].shape[1]}")

    @classmethod
    def init(cls, in_dim, out_dim, hidden=MLP_HIDDEN, rng=None, seed=0):
        rng = np.random.default_rng(seed) if rng is None else rng
        sizes = [in_dim, *hidden, out_dim]
        ws, bs = [], []
        for fi, fo in zip(sizes[:-1], sizes[1:]):
            ws.append(_uniform(rng, fi, (fi, fo)))
            bs.append(np.zeros(fo))
        return cls(tuple(ws), tuple(bs))

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays):
        arrays = [np.array(ad.value(a), dtype=float) for a in arrays]
        return cls(tuple(arrays[0::2]), tuple(arrays[1::2]))

    def __call__(self, v):
        return mlp_forward(self, v)


def mlp_forward(params, v):
    """Affine + Swish chain with a linear output layer.

    ``v`` is a delayed-state vector or a batch of them (last axis features).
    """
    arrays = params.arrays() if isinstance(params, MlpParams) else params
    w0 = arrays[0]
    if np.shape(v)[-1] != np.shape(ad.value(w0))[0]:
        raise ShapeError(f"mlp input has {np.shape(v)[-1]} features, expected {np.shape(ad.value(w0))[0]}")
    h = v
    n_layers = len(arrays) // 2
    for k in range(n_layers):
        h = ad.add(ad.matmul(h, arrays[2 * k]), arrays[2 * k + 1])
        if k < n_layers - 1:
            h = ad.swish(h)
    return h


def smoothed_relu(x, d: float):
    """Twice differentiable ReLU: zero, a cubic-quartic blend on [0, d], then x - d/2."""
    if not d > 0:
        raise ConfigurationError(f"smoothing width must be positive, got {d}")
    return ad.smooth_relu(x, d)


@dataclass(frozen=True)
class IcnnParams:
    """Input-convex network g(x).

    Layer k computes ``z_k = sigma(x @ wx[k] + z_{k-1} @ wz[k-1] + b[k])``;
    the first layer has no ``wz`` and the last layer is linear with a scalar
    output (``wx[-1]`` and ``wz[-1]`` are vectors, ``b[-1]`` a 0-d array).
    """

    wx: tuple
    wz: tuple
    b: tuple

    def __post_init__(self):
        if not (len(self.wx) == len(self.b) == len(self.wz) + 1):
            raise ShapeError("icnn layer lists have inconsistent lengths")

    @classmethod
    def init(cls, in_dim, hidden=ICNN_HIDDEN, rng=None, seed=0):
        rng = np.random.default_rng(seed) if rng is None else rng
        wx, wz, b = [], [], []
        prev = None
        for k, h in enumerate([*hidden, None]):
            shape = (in_dim,) if h is None else (in_dim, h)
            wx.append(_uniform(rng, in_dim, shape))
            if prev is not None:
                zshape = (prev,) if h is None else (prev, h)
                wz.append(np.abs(_uniform(rng, prev, zshape)))
            b.append(_uniform(rng, in_dim, () if h is None else (h,)))
            prev = h
        return cls(tuple(wx), tuple(wz), tuple(np.asarray(x, dtype=float) for x in b))

    @property
    def in_dim(self):
        return self.wx[0].shape[0]

    def arrays(self) -> list:
        out = [self.wx[0], self.b[0]]
        for k in range(1, len(self.wx)):
            out += [self.wx[k], self.wz[k - 1], self.b[k]]
        return out

    @classmethod
    def from_arrays(cls, arrays):
        arrays = [np.array(ad.value(a), dtype=float) for a in arrays]
        wx, wz, b = [arrays[0]], [], [arrays[1]]
        for k in range(2, len(arrays), 3):
            wx.append(arrays[k])
            wz.append(arrays[k + 1])
            b.append(arrays[k + 2])
        return cls(tuple(wx), tuple(wz), tuple(b))


def wz_positions(n_arrays: int) -> list[int]:
    """Indices of the hidden-to-hidden weights inside ``IcnnParams.arrays()``."""
    return list(range(3, n_arrays, 3))


def project_nonnegative(params: IcnnParams) -> IcnnParams:
    return replace(params, wz=tuple(np.maximum(w, 0.0) for w in params.wz))


def _icnn_layers(arrays):
    layers = [(arrays[0], None, arrays[1])]
    for k in range(2, len(arrays), 3):
        layers.append((arrays[k], arrays[k + 1], arrays[k + 2]))
    return layers


def icnn_forward(arrays, x, d: float, tangent=None):
    """Evaluate g(x); with ``tangent`` also return the directional derivative Dg(x)[tangent]."""
    if isinstance(arrays, IcnnParams):
        arrays = arrays.arrays()
    layers = _icnn_layers(arrays)
    z = dz = None
    for k, (wx, wz, b) in enumerate(layers):
        pre = ad.matmul(x, wx)
        if wz is not None:
            pre = ad.add(pre, ad.matmul(z, wz))
        pre = ad.add(pre, b)
        if tangent is not None:
            dpre = ad.matmul(tangent, wx)
            if wz is not None:
                dpre = ad.add(dpre, ad.matmul(dz, wz))
        if k == len(layers) - 1:
            return pre if tangent is None else (pre, dpre)
        z = ad.smooth_relu(pre, d)
        if tangent is not None:
            dz = ad.mul(ad.smooth_relu_grad(pre, d), dpre)


@dataclass(frozen=True)
class LrfNetwork:
    """V(x) = sigma(g(x) - g(0)) + c * |x|^2 with an input-convex g."""

    icnn: IcnnParams
    c: float = 1e-3
    d: float = 0.1

    def __post_init__(self):
        if not self.c > 0:
            raise ConfigurationError(f"quadratic coefficient must be positive, got {self.c}")
        if not self.d > 0:
            raise ConfigurationError(f"smoothing width must be positive, got {self.d}")

    @classmethod
    def init(cls, in_dim, hidden=ICNN_HIDDEN, c=1e-3, d=0.1, rng=None, seed=0):
        return cls(IcnnParams.init(in_dim, hidden, rng=rng, seed=seed), c, d)

    @property
    def in_dim(self):
        return self.icnn.in_dim

    def __call__(self, x):
        return lrf_forward(self, x)


def lrf_forward(net: LrfNetwork, x, arrays=None):
    """V(x) for a point (n,) or a batch (B, n).  ``arrays`` overrides the ICNN weights."""
    arrays = net.icnn.arrays() if arrays is None else arrays
    g = icnn_forward(arrays, x, net.d)
    g0 = icnn_forward(arrays, np.zeros(net.in_dim), net.d)
    return ad.add(ad.smooth_relu(ad.sub(g, g0), net.d), ad.scale(ad.sumsq(x, axis=-1), net.c))


def lrf_value_and_derivative(net: LrfNetwork, x, v, arrays=None):
    """Return (V(x), grad V(x) . v), both recorded on the tape when inputs are Vars."""
    arrays = net.icnn.arrays() if arrays is None else arrays
    g, dg = icnn_forward(arrays, x, net.d, tangent=v)
    g0 = icnn_forward(arrays, np.zeros(net.in_dim), net.d)
    s = ad.sub(g, g0)
    quad = ad.scale(ad.sumsq(x, axis=-1), net.c)
    V = ad.add(ad.smooth_relu(s, net.d), quad)
    xv = ad.sum(ad.mul(x, v), axis=-1)
    Vdot = ad.add(ad.mul(ad.smooth_relu_grad(s, net.d), dg), ad.scale(xv, 2.0 * net.c))
    return V, Vdot


def estimate_c2(net: LrfNetwork, xs) -> float:
    """Sampled upper envelope constant: max V(x)/|x|^2 over nonzero samples."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    nrm = np.sum(xs * xs, axis=-1)
    keep = nrm > 0
    vals = np.asarray(lrf_forward(net, xs[keep]))
    return float(np.max(vals / nrm[keep]))


# --- checkpoints ------------------------------------------------------------

def _enc(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}


def _dec(d):
    return np.array(d["data"], dtype=float).reshape(d["shape"])


def mlp_to_dict(p: MlpParams) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "mlp",
        "activation": "swish",
        "layers": [{"weight": _enc(w), "bias": _enc(b)} for w, b in zip(p.weights, p.biases)],
    }


def mlp_from_dict(d: dict) -> MlpParams:
    _check_version(d, "mlp")
    return MlpParams(tuple(_dec(l["weight"]) for l in d["layers"]), tuple(_dec(l["bias"]) for l in d["layers"]))


def lrf_to_dict(net: LrfNetwork) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "lrf",
        "c": net.c,
        "d": net.d,
        "wx": [_enc(w) for w in net.icnn.wx],
        "wz": [_enc(w) for w in net.icnn.wz],
        "b": [_enc(b) for b in net.icnn.b],
    }


def lrf_from_dict(d: dict) -> LrfNetwork:
    _check_version(d, "lrf")
    icnn = IcnnParams(tuple(map(_dec, d["wx"])), tuple(map(_dec, d["wz"])), tuple(map(_dec, d["b"])))
    return LrfNetwork(icnn, float(d["c"]), float(d["d"]))


def _check_version(d, kind):
    if d.get("kind") != kind:
        raise ValueError(f"checkpoint kind {d.get('kind')!r}, expected {kind!r}")
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {d.get('format_version')}")


def save_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj))


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())
