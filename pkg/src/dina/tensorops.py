"""Dense float tensor primitives with explicit backward passes.

Forward reductions accumulate in a fixed order so outputs are bit-stable run
to run: ``matmul`` (and everything built on it: ``linear``, ``conv2d``) adds
contributions strictly left to right over the shared axis, per output
element, matching a scalar triple-loop evaluated in the same precision.
Backward passes are run-to-run deterministic as well but use BLAS-backed
products; their accuracy is gated by finite-difference checks rather than
bitwise oracles.

Production paths run in float32. float64 inputs are accepted and propagated,
which the test suites use for high-precision probes.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ArgumentError, DimensionError, NumericError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

try:  # jitted strict-order kernel; the numpy loop below is bit-identical
    import numba

    @numba.njit(cache=True, fastmath=False)
    def _mm_strict(a, b):
        m, p = a.shape
        q = b.shape[1]
        out = np.zeros((m, q), a.dtype)
        for i in range(m):
            row = out[i]
            for t in range(p):
                s = a[i, t]
                bt = b[t]
                for j in range(q):
                    row[j] += s * bt[j]
        return out

except ImportError:  # pragma: no cover - numba is an optional accelerator
    def _mm_strict(a, b):
        out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
        tmp = np.empty_like(out)
        for t in range(a.shape[1]):
            np.multiply(a[:, t, None], b[t], out=tmp)
            np.add(out, tmp, out=out)
        return out


def _as_float(x) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float32)
    return x


def matmul(a, b) -> np.ndarray:
    """2-D product c[i, j] = sum_t a[i, t] * b[t, j], accumulated left to right.

    The accumulation order per output element is strictly sequential over the
    shared axis (no reassociation), so results match a scalar triple loop in
    the same precision bit for bit, and repeated runs are identical.
    """
    a = _as_float(a)
    b = _as_float(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes do not conform: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        common = np.result_type(a, b)
        a = a.astype(common)
        b = b.astype(common)
    return _mm_strict(np.ascontiguousarray(a), np.ascontiguousarray(b))


def matmul_backward(grad_out, a, b):
    if grad_out.shape != (a.shape[0], b.shape[1]):
        raise DimensionError(
            f"matmul grad shape {grad_out.shape} does not match output {(a.shape[0], b.shape[1])}"
        )
    return grad_out @ b.T, a.T @ grad_out


def linear(x, w, b) -> np.ndarray:
    """x @ w + b over the last axis, broadcast across leading dims."""
    x = _as_float(x)
    w = _as_float(w)
    b = _as_float(b)
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"linear shapes do not conform: x {x.shape}, w {w.shape}, b {b.shape}")
    y = matmul(x.reshape(-1, w.shape[0]), w)
    y += b
    return y.reshape(*x.shape[:-1], w.shape[1])


def linear_backward(grad_out, x, w):
    if grad_out.shape != (*x.shape[:-1], w.shape[1]):
        raise DimensionError(f"linear grad shape {grad_out.shape} does not match x {x.shape}, w {w.shape}")
    g2 = grad_out.reshape(-1, w.shape[1])
    x2 = x.reshape(-1, w.shape[0])
    grad_x = (g2 @ w.T).reshape(x.shape)
    return grad_x, x2.T @ g2, g2.sum(axis=0)


def softmax_lastdim(x, scale: float = 1.0) -> np.ndarray:
    """softmax(x / scale) along the last axis, with row-max subtraction."""
    x = _as_float(x)
    if x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    if scale <= 0:
        raise ArgumentError(f"softmax scale must be positive, got {scale}")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains non-finite values")
    z = x / x.dtype.type(scale)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_lastdim_backward(grad_out, y, scale: float = 1.0):
    """Jacobian-vector product through softmax_lastdim, given its output y."""
    if grad_out.shape != y.shape:
        raise DimensionError(f"softmax grad shape {grad_out.shape} does not match output {y.shape}")
    inner = (grad_out * y).sum(axis=-1, keepdims=True)
    return y * (grad_out - inner) / y.dtype.type(scale)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Zero-mean unit-variance over the last axis, then affine (gamma, beta).

    eps may be zero, in which case an all-equal row divides 0 by 0; callers
    that can feed constant rows should keep eps positive.
    """
    x = _as_float(x)
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm needs a non-empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match width {d}")
    if eps < 0:
        raise NumericError(f"layer_norm eps must be non-negative, got {eps}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    return xc * inv * gamma + beta


def layer_norm_backward(grad_out, x, gamma, eps: float = 1e-5):
    if grad_out.shape != x.shape:
        raise DimensionError(f"layer_norm grad shape {grad_out.shape} does not match input {x.shape}")
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    gx = grad_out * gamma
    lead = tuple(range(x.ndim - 1))
    grad_gamma = (grad_out * xhat).sum(axis=lead)
    grad_beta = grad_out.sum(axis=lead)
    grad_x = inv / d * (d * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
    return grad_x, grad_gamma, grad_beta


def gelu(x) -> np.ndarray:
    """Exact GELU x * Phi(x) via the error function (no tanh approximation)."""
    x = _as_float(x)
    return 0.5 * x * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))


def gelu_backward(grad_out, x):
    if grad_out.shape != x.shape:
        raise DimensionError(f"gelu grad shape {grad_out.shape} does not match input {x.shape}")
    phi_cdf = 0.5 * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))
    phi_pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT2PI)
    return grad_out * (phi_cdf + x * phi_pdf)


def _conv_out_extent(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def conv2d(x, w, b, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation with zero padding; x is BHWC, w is (kh, kw, Cin, Cout)."""
    x = _as_float(x)
    w = _as_float(w)
    b = _as_float(b)
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2] or b.shape != (w.shape[3],):
        raise DimensionError(f"conv2d shapes do not conform: x {x.shape}, w {w.shape}, b {b.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    batch, h, wdt, cin = x.shape
    kh, kw, _, cout = w.shape
    oh = _conv_out_extent(h, kh, stride, pad)
    ow = _conv_out_extent(wdt, kw, stride, pad)
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wdt + 2 * pad}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.zeros((batch, oh, ow, cout), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            tap = xp[:, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride, :]
            out += matmul(tap.reshape(-1, cin), w[dy, dx]).reshape(batch, oh, ow, cout)
    out += b
    return out


def conv2d_backward(grad_out, x, w, stride: int = 1, pad: int = 0):
    batch, h, wdt, cin = x.shape
    kh, kw, _, cout = w.shape
    oh = _conv_out_extent(h, kh, stride, pad)
    ow = _conv_out_extent(wdt, kw, stride, pad)
    if grad_out.shape != (batch, oh, ow, cout):
        raise DimensionError(f"conv2d grad shape {grad_out.shape} does not match output {(batch, oh, ow, cout)}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(w)
    g2 = grad_out.reshape(-1, cout)
    for dy in range(kh):
        for dx in range(kw):
            tap = xp[:, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride, :]
            grad_w[dy, dx] = tap.reshape(-1, cin).T @ g2
            grad_xp[:, dy : dy + stride * oh : stride, dx : dx + stride * ow : stride, :] += (
                g2 @ w[dy, dx].T
            ).reshape(batch, oh, ow, cin)
    grad_x = grad_xp[:, pad : pad + h, pad : pad + wdt, :] if pad else grad_xp
    return np.ascontiguousarray(grad_x), grad_w, grad_out.sum(axis=(0, 1, 2))
