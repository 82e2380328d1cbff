"""Hot numeric kernels with a numba backend and a pure-numpy fallback.

The backend is picked once at import time from FEWPROTO_KERNELS:
"numba" (fail loudly if numba is unavailable), "numpy", or "auto"
(default: numba when importable, numpy otherwise). Matrix products stay on
BLAS in both backends; what lives here are the fused rowwise/elementwise
loops that otherwise burn time in numpy temporaries. numba kernels
accumulate in float64 and store back in the input dtype, so float32 results
can differ from the numpy path in the last bits; within one backend all
kernels are deterministic.

`benchmarks/bench_kernels.py` times the two backends against each other.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf as _erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


# ---------------------------------------------------------------- numpy ----

def _np_gelu_fwd(x):
    return 0.5 * x * (1.0 + _erf(x * _INV_SQRT2)).astype(x.dtype, copy=False)


def _np_gelu_bwd(x, gy):
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return (gy * (cdf + x * pdf)).astype(x.dtype, copy=False)


def _np_softmax_fwd(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _np_softmax_bwd(y, gy):
    dot = (gy * y).sum(axis=-1, keepdims=True)
    return y * (gy - dot)


def _np_layernorm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=-1)
    centered = x - mean[:, None]
    var = (centered * centered).mean(axis=-1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = centered * rstd[:, None] * gain + bias
    return y.astype(x.dtype, copy=False), mean.astype(x.dtype, copy=False), rstd.astype(x.dtype, copy=False)


def _np_layernorm_bwd(x, gain, mean, rstd, gy):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dyg = gy * gain
    m1 = dyg.mean(axis=-1, keepdims=True)
    m2 = (dyg * xhat).mean(axis=-1, keepdims=True)
    gx = rstd[:, None] * (dyg - m1 - xhat * m2)
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    return gx.astype(x.dtype, copy=False), ggain, gbias


def _np_pairwise_sqdist(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=-1)


def _np_pairwise_sqdist_bwd(a, b, g):
    ga = 2.0 * (a * g.sum(axis=1)[:, None] - g @ b)
    gb = 2.0 * (b * g.sum(axis=0)[:, None] - g.T @ a)
    return ga.astype(a.dtype, copy=False), gb.astype(b.dtype, copy=False)


def _np_adam_update(p, g, m, v, t, lr, b1, b2, eps):
    m[:] = b1 * m + (1.0 - b1) * g
    v[:] = b2 * v + (1.0 - b2) * (g * g)
    mhat = m / (1.0 - b1**t)
    vhat = v / (1.0 - b2**t)
    p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)


def _np_fnv1a64(state, buf):
    h = int(state)
    for byte in buf.tobytes():
        h = ((h ^ byte) * FNV_PRIME) & _U64
    return h


_NUMPY_IMPLS = {
    "gelu_fwd": _np_gelu_fwd,
    "gelu_bwd": _np_gelu_bwd,
    "softmax_fwd": _np_softmax_fwd,
    "softmax_bwd": _np_softmax_bwd,
    "layernorm_fwd": _np_layernorm_fwd,
    "layernorm_bwd": _np_layernorm_bwd,
    "pairwise_sqdist": _np_pairwise_sqdist,
    "pairwise_sqdist_bwd": _np_pairwise_sqdist_bwd,
    "adam_update": _np_adam_update,
    "fnv1a64_update": _np_fnv1a64,
}


# ---------------------------------------------------------------- numba ----

def _build_numba_impls():
    from numba import njit

    @njit(cache=True)
    def nb_gelu_fwd(x):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            xi = float(flat_x[i])
            flat_o[i] = 0.5 * xi * (1.0 + math.erf(xi * _INV_SQRT2))
        return out

    @njit(cache=True)
    def nb_gelu_bwd(x, gy):
        out = np.empty_like(x)
        flat_x = x.ravel()
        flat_g = gy.ravel()
        flat_o = out.ravel()
        for i in range(flat_x.size):
            xi = float(flat_x[i])
            cdf = 0.5 * (1.0 + math.erf(xi * _INV_SQRT2))
            pdf = math.exp(-0.5 * xi * xi) * _INV_SQRT_2PI
            flat_o[i] = flat_g[i] * (cdf + xi * pdf)
        return out

    @njit(cache=True)
    def nb_softmax_fwd(x):
        r, c = x.shape
        y = np.empty_like(x)
        for i in range(r):
            mx = float(x[i, 0])
            for k in range(1, c):
                if x[i, k] > mx:
                    mx = float(x[i, k])
            s = 0.0
            for k in range(c):
                e = math.exp(float(x[i, k]) - mx)
                y[i, k] = e
                s += e
            for k in range(c):
                y[i, k] = y[i, k] / s
        return y

    @njit(cache=True)
    def nb_softmax_bwd(y, gy):
        r, c = y.shape
        gx = np.empty_like(y)
        for i in range(r):
            dot = 0.0
            for k in range(c):
                dot += float(gy[i, k]) * float(y[i, k])
            for k in range(c):
                gx[i, k] = y[i, k] * (gy[i, k] - dot)
        return gx

    @njit(cache=True)
    def nb_layernorm_fwd(x, gain, bias, eps):
        r, d = x.shape
        y = np.empty_like(x)
        mean = np.empty(r, dtype=x.dtype)
        rstd = np.empty(r, dtype=x.dtype)
        for i in range(r):
            s = 0.0
            for k in range(d):
                s += float(x[i, k])
            mu = s / d
            q = 0.0
            for k in range(d):
                dv = float(x[i, k]) - mu
                q += dv * dv
            rs = 1.0 / math.sqrt(q / d + eps)
            mean[i] = mu
            rstd[i] = rs
            for k in range(d):
                y[i, k] = (float(x[i, k]) - mu) * rs * float(gain[k]) + float(bias[k])
        return y, mean, rstd

    @njit(cache=True)
    def nb_layernorm_bwd(x, gain, mean, rstd, gy):
        r, d = x.shape
        gx = np.empty_like(x)
        ggain = np.zeros(d, dtype=x.dtype)
        gbias = np.zeros(d, dtype=x.dtype)
        for i in range(r):
            mu = float(mean[i])
            rs = float(rstd[i])
            s1 = 0.0
            s2 = 0.0
            for k in range(d):
                xh = (float(x[i, k]) - mu) * rs
                dyg = float(gy[i, k]) * float(gain[k])
                s1 += dyg
                s2 += dyg * xh
            s1 /= d
            s2 /= d
            for k in range(d):
                xh = (float(x[i, k]) - mu) * rs
                dyg = float(gy[i, k]) * float(gain[k])
                gx[i, k] = rs * (dyg - s1 - xh * s2)
                ggain[k] += gy[i, k] * xh
                gbias[k] += gy[i, k]
        return gx, ggain, gbias

    @njit(cache=True)
    def nb_pairwise_sqdist(a, b):
        m, d = a.shape
        n = b.shape[0]
        out = np.empty((m, n), dtype=a.dtype)
        for i in range(m):
            for j in range(n):
                s = 0.0
                for k in range(d):
                    dv = float(a[i, k]) - float(b[j, k])
                    s += dv * dv
                out[i, j] = s
        return out

    @njit(cache=True)
    def nb_pairwise_sqdist_bwd(a, b, g):
        m, d = a.shape
        n = b.shape[0]
        ga = np.zeros_like(a)
        gb = np.zeros_like(b)
        for i in range(m):
            for j in range(n):
                gij = 2.0 * float(g[i, j])
                for k in range(d):
                    dv = float(a[i, k]) - float(b[j, k])
                    ga[i, k] += gij * dv
                    gb[j, k] -= gij * dv
        return ga, gb

    @njit(cache=True)
    def nb_adam_update(p, g, m, v, t, lr, b1, b2, eps):
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for i in range(p.size):
            gi = float(g[i])
            mi = b1 * float(m[i]) + (1.0 - b1) * gi
            vi = b2 * float(v[i]) + (1.0 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] = float(p[i]) - lr * (mi / c1) / (math.sqrt(vi / c2) + eps)

    @njit(cache=True)
    def nb_fnv1a64(state, buf):
        h = state
        for i in range(buf.size):
            h = (h ^ np.uint64(buf[i])) * np.uint64(FNV_PRIME)
        return h

    def fnv_wrapper(state, buf):
        return int(nb_fnv1a64(np.uint64(state), buf))

    def adam_wrapper(p, g, m, v, t, lr, b1, b2, eps):
        nb_adam_update(p, g, m, v, float(t), lr, b1, b2, eps)

    return {
        "gelu_fwd": nb_gelu_fwd,
        "gelu_bwd": nb_gelu_bwd,
        "softmax_fwd": nb_softmax_fwd,
        "softmax_bwd": nb_softmax_bwd,
        "layernorm_fwd": nb_layernorm_fwd,
        "layernorm_bwd": nb_layernorm_bwd,
        "pairwise_sqdist": nb_pairwise_sqdist,
        "pairwise_sqdist_bwd": nb_pairwise_sqdist_bwd,
        "adam_update": adam_wrapper,
        "fnv1a64_update": fnv_wrapper,
    }


_IMPL_CACHE: dict[str, dict] = {"numpy": _NUMPY_IMPLS}


def get_impls(name: str) -> dict:
    """Return the kernel table for a backend ("numpy" or "numba")."""
    if name not in ("numpy", "numba"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name not in _IMPL_CACHE:
        _IMPL_CACHE[name] = _build_numba_impls()
    return _IMPL_CACHE[name]


def _resolve_backend() -> str:
    requested = os.environ.get("FEWPROTO_KERNELS", "auto").lower()
    if requested == "numpy":
        return "numpy"
    if requested == "numba":
        get_impls("numba")  # raise now if numba is missing
        return "numba"
    if requested != "auto":
        raise ValueError(f"FEWPROTO_KERNELS={requested!r}; expected numba, numpy or auto")
    try:
        get_impls("numba")
        return "numba"
    except ImportError:
        return "numpy"


_BACKEND = _resolve_backend()


def backend() -> str:
    return _BACKEND


def set_backend(name: str) -> None:
    """Rebind the module-level kernels to another backend.

    For benchmarks and backend-equivalence tests; not thread-safe against
    in-flight graph construction.
    """
    global _BACKEND, gelu_fwd, gelu_bwd, softmax_fwd, softmax_bwd
    global layernorm_fwd, layernorm_bwd, pairwise_sqdist, pairwise_sqdist_bwd
    global adam_update, fnv1a64_update
    impls = get_impls(name)
    _BACKEND = name
    gelu_fwd = impls["gelu_fwd"]
    gelu_bwd = impls["gelu_bwd"]
    softmax_fwd = impls["softmax_fwd"]
    softmax_bwd = impls["softmax_bwd"]
    layernorm_fwd = impls["layernorm_fwd"]
    layernorm_bwd = impls["layernorm_bwd"]
    pairwise_sqdist = impls["pairwise_sqdist"]
    pairwise_sqdist_bwd = impls["pairwise_sqdist_bwd"]
    adam_update = impls["adam_update"]
    fnv1a64_update = impls["fnv1a64_update"]


set_backend(_BACKEND)


def fnv1a64(data) -> int:
    """FNV-1a 64-bit hash of bytes or a uint8 array."""
    if isinstance(data, (bytes, bytearray, memoryview)):
        buf = np.frombuffer(data, dtype=np.uint8)
    else:
        buf = np.ascontiguousarray(data, dtype=np.uint8)
    return fnv1a64_update(FNV_OFFSET, buf)
