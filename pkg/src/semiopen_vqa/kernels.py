"""Row-wise numeric kernels used by the tensor ops.

Every kernel exists twice: a numba ``@njit`` version operating on a 2-D
C-contiguous array (leading dims flattened by the caller) and a vectorised
numpy version with identical semantics.  The active backend is chosen once at
import time:

* ``SEMIOPEN_VQA_NUMBA=0`` forces the numpy path,
* otherwise numba is used when it imports cleanly.

``use_backend`` switches at runtime (the benchmark and the tests use it).
"""
from __future__ import annotations

import math
import os
from contextlib import contextmanager

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _env_wants_numba() -> bool:
    flag = os.environ.get("SEMIOPEN_VQA_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


# --------------------------------------------------------------------- numba

@njit(cache=True)
def _softmax_fwd_nb(x):
    m, n = x.shape
    out = np.empty_like(x)
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            e = math.exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(n):
            out[i, j] *= inv
    return out


@njit(cache=True)
def _softmax_bwd_nb(y, g):
    m, n = y.shape
    out = np.empty_like(y)
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += g[i, j] * y[i, j]
        for j in range(n):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return out


@njit(cache=True)
def _layer_norm_fwd_nb(x, gain, bias, eps):
    m, n = x.shape
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    rstd = np.empty(m, dtype=x.dtype)
    for i in range(m):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        var /= n
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(n):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            out[i, j] = h * gain[j] + bias[j]
    return out, xhat, rstd


@njit(cache=True)
def _layer_norm_bwd_nb(g, xhat, rstd, gain):
    m, n = g.shape
    dx = np.empty_like(g)
    dgain = np.zeros(n, dtype=g.dtype)
    dbias = np.zeros(n, dtype=g.dtype)
    for i in range(m):
        s1 = 0.0
        s2 = 0.0
        for j in range(n):
            gh = g[i, j] * gain[j]
            s1 += gh
            s2 += gh * xhat[i, j]
            dgain[j] += g[i, j] * xhat[i, j]
            dbias[j] += g[i, j]
        s1 /= n
        s2 /= n
        for j in range(n):
            gh = g[i, j] * gain[j]
            dx[i, j] = rstd[i] * (gh - s1 - xhat[i, j] * s2)
    return dx, dgain, dbias


# tanh-form GELU written as x * sigmoid(2u): 0.5 * (1 + tanh(u)) == 1 / (1 + exp(-2u))
@njit(cache=True, fastmath=True)
def _gelu_fwd_nb(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        u2 = 2.0 * _SQRT_2_OVER_PI * (v + 0.044715 * v * v * v)
        out[i] = v / (1.0 + math.exp(-u2))
    return out.reshape(x.shape)


@njit(cache=True, fastmath=True)
def _gelu_bwd_nb(x, g):
    flat = x.ravel()
    gf = g.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        u2 = 2.0 * _SQRT_2_OVER_PI * (v + 0.044715 * v * v * v)
        s = 1.0 / (1.0 + math.exp(-u2))
        du2 = 2.0 * _SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * v * v)
        out[i] = gf[i] * (s + v * s * (1.0 - s) * du2)
    return out.reshape(x.shape)


@njit(cache=True)
def _asl_fwd_nb(logits, y, gamma_pos, gamma_neg, clamp):
    # returns per-row loss and d(row loss)/d(logit)
    m, n = logits.shape
    loss = np.zeros(m, dtype=logits.dtype)
    dlogit = np.empty_like(logits)
    for i in range(m):
        acc = 0.0
        for j in range(n):
            z = logits[i, j]
            if z >= 0.0:
                p = 1.0 / (1.0 + math.exp(-z))
            else:
                ez = math.exp(z)
                p = ez / (1.0 + ez)
            q = 1.0 - p
            if y[i, j] > 0.5:
                pc = max(p, clamp)
                lg = math.log(pc)
                w = q ** gamma_pos
                acc -= w * lg
                # d/dp of -(1-p)^g log p
                dw = -gamma_pos * q ** (gamma_pos - 1.0) if gamma_pos != 0.0 else 0.0
                dlg = 1.0 / pc if p > clamp else 0.0
                dp = -(dw * lg + w * dlg)
            else:
                qc = max(q, clamp)
                lg = math.log(qc)
                w = p ** gamma_neg
                acc -= w * lg
                dw = gamma_neg * p ** (gamma_neg - 1.0) if gamma_neg != 0.0 else 0.0
                dlg = -1.0 / qc if q > clamp else 0.0
                dp = -(dw * lg + w * dlg)
            dlogit[i, j] = dp * p * q / n
        loss[i] = acc / n
    return loss, dlogit


# --------------------------------------------------------------------- numpy

def _softmax_fwd_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd_np(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def _layer_norm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    d = x - mu
    var = (d * d).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = d * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def _layer_norm_bwd_np(g, xhat, rstd, gain):
    gh = g * gain
    s1 = gh.mean(axis=-1, keepdims=True)
    s2 = (gh * xhat).mean(axis=-1, keepdims=True)
    dx = rstd[:, None] * (gh - s1 - xhat * s2)
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _gelu_gate(x):
    u2 = 2.0 * _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-u2))


def _gelu_fwd_np(x):
    return x * _gelu_gate(x)


def _gelu_bwd_np(x, g):
    s = _gelu_gate(x)
    du2 = 2.0 * _SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x)
    return g * (s + x * s * (1.0 - s) * du2)


def _stable_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _asl_fwd_np(logits, y, gamma_pos, gamma_neg, clamp):
    n = logits.shape[1]
    p = _stable_sigmoid(logits)
    q = 1.0 - p
    pos = y > 0.5
    pc = np.maximum(p, clamp)
    qc = np.maximum(q, clamp)
    lp = np.log(pc)
    lq = np.log(qc)
    wp = q ** gamma_pos
    wn = p ** gamma_neg
    per = np.where(pos, wp * lp, wn * lq)
    dwp = gamma_pos * q ** (gamma_pos - 1.0) if gamma_pos != 0.0 else np.zeros_like(p)
    dwn = gamma_neg * p ** (gamma_neg - 1.0) if gamma_neg != 0.0 else np.zeros_like(p)
    dlp = np.where(p > clamp, 1.0 / pc, 0.0)
    dlq = np.where(q > clamp, -1.0 / qc, 0.0)
    dp = np.where(pos, -(-dwp * lp + wp * dlp), -(dwn * lq + wn * dlq))
    return -per.sum(axis=1) / n, dp * p * q / n


# ------------------------------------------------------------------ dispatch

_NUMBA = {
    "softmax_fwd": _softmax_fwd_nb,
    "softmax_bwd": _softmax_bwd_nb,
    "layer_norm_fwd": _layer_norm_fwd_nb,
    "layer_norm_bwd": _layer_norm_bwd_nb,
    "gelu_fwd": _gelu_fwd_nb,
    "gelu_bwd": _gelu_bwd_nb,
    "asl_fwd": _asl_fwd_nb,
}
_NUMPY = {
    "softmax_fwd": _softmax_fwd_np,
    "softmax_bwd": _softmax_bwd_np,
    "layer_norm_fwd": _layer_norm_fwd_np,
    "layer_norm_bwd": _layer_norm_bwd_np,
    "gelu_fwd": _gelu_fwd_np,
    "gelu_bwd": _gelu_bwd_np,
    "asl_fwd": _asl_fwd_np,
}

_active = _NUMBA if (HAVE_NUMBA and _env_wants_numba()) else _NUMPY


def backend() -> str:
    return "numba" if _active is _NUMBA else "numpy"


def set_backend(name: str) -> None:
    global _active
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        _active = _NUMBA
    elif name == "numpy":
        _active = _NUMPY
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


@contextmanager
def use_backend(name: str):
    prev = backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax_fwd(x):
    return _active["softmax_fwd"](_rows(x)).reshape(x.shape)


def softmax_bwd(y, g):
    return _active["softmax_bwd"](_rows(y), _rows(g)).reshape(y.shape)


def layer_norm_fwd(x, gain, bias, eps):
    out, xhat, rstd = _active["layer_norm_fwd"](
        _rows(x), np.ascontiguousarray(gain), np.ascontiguousarray(bias), float(eps))
    return out.reshape(x.shape), xhat, rstd


def layer_norm_bwd(g, xhat, rstd, gain):
    """Returns (dx as 2-D rows, dgain, dbias); caller reshapes dx."""
    return _active["layer_norm_bwd"](_rows(g), xhat, rstd, np.ascontiguousarray(gain))


def gelu_fwd(x):
    return _active["gelu_fwd"](np.ascontiguousarray(x))


def gelu_bwd(x, g):
    return _active["gelu_bwd"](np.ascontiguousarray(x), np.ascontiguousarray(g))


def asl_fwd(logits, y, gamma_pos, gamma_neg, clamp):
    """Per-row asymmetric loss and its gradient w.r.t. the logits."""
    return _active["asl_fwd"](_rows(logits), _rows(y).astype(logits.dtype),
                              float(gamma_pos), float(gamma_neg), float(clamp))
