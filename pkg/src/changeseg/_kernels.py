"""Hot inner loops, each with a numba-compiled and a pure-numpy implementation.

The numba path is used when numba imports and ``MCDS_NUMBA`` is not set to
``0``. Both paths are deterministic and single-threaded; ``get(name, backend)``
returns a specific implementation so tests and the benchmark can compare them.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("MCDS_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# im2col / col2im
# cols layout: (N, Ho, Wo, C, kh, kw) flattened to (N*Ho*Wo, C*kh*kw)
# ---------------------------------------------------------------------------

def im2col_np(xp, kh, kw, stride, ho, wo):
    """Gather patches from an already padded (N, C, Hp, Wp) array."""
    n, c = xp.shape[:2]
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, :, :, :, i, j] = patch.transpose(0, 2, 3, 1)
    return cols.reshape(n * ho * wo, c * kh * kw)


def col2im_np(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    """Scatter-add patch gradients back onto a padded (N, C, Hp, Wp) array."""
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, ho, wo, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out


def _im2col_loop(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n * ho * wo, c * kh * kw), dtype=xp.dtype)
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        y = oy * stride + i
                        for j in range(kw):
                            cols[row, col] = xp[b, ch, y, ox * stride + j]
                            col += 1
    return cols


def _col2im_loop(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                row = (b * ho + oy) * wo + ox
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        y = oy * stride + i
                        for j in range(kw):
                            out[b, ch, y, ox * stride + j] += cols[row, col]
                            col += 1
    return out


# ---------------------------------------------------------------------------
# depthwise convolution, input already padded
# ---------------------------------------------------------------------------

def dwconv_fwd_np(xp, w, stride, ho, wo):
    n, c = xp.shape[:2]
    kh, kw = w.shape[2], w.shape[3]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] * w[None, :, 0, i, j, None, None]
    return out


def dwconv_bwd_np(xp, w, gout, stride):
    n, c, ho, wo = gout.shape
    kh, kw = w.shape[2], w.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            win = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            gxp[win] += gout * w[None, :, 0, i, j, None, None]
            gw[:, 0, i, j] = (gout * xp[win]).sum(axis=(0, 2, 3))
    return gxp, gw


def _dwconv_fwd_loop(xp, w, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    acc = out[b, ch, oy, ox]
                    for i in range(kh):
                        for j in range(kw):
                            acc += xp[b, ch, oy * stride + i, ox * stride + j] * w[ch, 0, i, j]
                    out[b, ch, oy, ox] = acc
    return out


def _dwconv_bwd_loop(xp, w, gout, stride):
    n, c, ho, wo = gout.shape
    kh, kw = w.shape[2], w.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    g = gout[b, ch, oy, ox]
                    for i in range(kh):
                        for j in range(kw):
                            y = oy * stride + i
                            x = ox * stride + j
                            gxp[b, ch, y, x] += g * w[ch, 0, i, j]
                            gw[ch, 0, i, j] += g * xp[b, ch, y, x]
    return gxp, gw


# ---------------------------------------------------------------------------
# Lovasz gradient of the Jaccard loss along a descending-error ordering
# ---------------------------------------------------------------------------

def lovasz_grad_np(gt_sorted):
    gts = gt_sorted.sum()
    inter = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jac = 1.0 - inter / union
    if jac.size > 1:
        jac[1:] = jac[1:] - jac[:-1].copy()
    return jac


def _lovasz_grad_loop(gt_sorted):
    p = gt_sorted.shape[0]
    out = np.empty(p, dtype=np.float64)
    gts = 0.0
    for i in range(p):
        gts += gt_sorted[i]
    hits = 0.0
    misses = 0.0
    prev = 0.0
    for i in range(p):
        hits += gt_sorted[i]
        misses += 1.0 - gt_sorted[i]
        jac = 1.0 - (gts - hits) / (gts + misses)
        out[i] = jac - prev
        prev = jac
    return out


# ---------------------------------------------------------------------------
# confusion matrix: counts[pred, gt]
# ---------------------------------------------------------------------------

def confusion_np(pred, gt, n):
    idx = pred.astype(np.int64).ravel() * n + gt.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n * n).reshape(n, n).astype(np.int64)


def _confusion_loop(pred, gt, n):
    out = np.zeros((n, n), dtype=np.int64)
    p = pred.ravel()
    g = gt.ravel()
    for i in range(p.shape[0]):
        out[p[i], g[i]] += 1
    return out


_NUMPY = {
    "im2col": im2col_np,
    "col2im": col2im_np,
    "dwconv_fwd": dwconv_fwd_np,
    "dwconv_bwd": dwconv_bwd_np,
    "lovasz_grad": lovasz_grad_np,
    "confusion": confusion_np,
}

_LOOPS = {
    "im2col": _im2col_loop,
    "col2im": _col2im_loop,
    "dwconv_fwd": _dwconv_fwd_loop,
    "dwconv_bwd": _dwconv_bwd_loop,
    "lovasz_grad": _lovasz_grad_loop,
    "confusion": _confusion_loop,
}

_NUMBA = {}
if HAS_NUMBA:
    _NUMBA = {name: njit(cache=True)(fn) for name, fn in _LOOPS.items()}


def get(name, backend=None):
    """Return kernel ``name`` for ``backend`` ('numba', 'numpy' or None for the active one)."""
    if backend is None:
        backend = "numba" if USE_NUMBA else "numpy"
    if backend == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba is not installed")
        return _NUMBA[name]
    if backend == "numpy":
        return _NUMPY[name]
    raise ValueError(f"unknown kernel backend {backend!r}")


def active_backend():
    return "numba" if USE_NUMBA else "numpy"


im2col = get("im2col")
col2im = get("col2im")
dwconv_fwd = get("dwconv_fwd")
dwconv_bwd = get("dwconv_bwd")
lovasz_grad = get("lovasz_grad")
confusion = get("confusion")
