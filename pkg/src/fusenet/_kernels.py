"""Hot inner loops: valid stride-1 convolution and 2x2 max pooling.

Every kernel exists twice, a numba ``@njit`` version and a vectorized numpy
version. ``FUSENET_BACKEND=numpy`` forces the numpy path; the default is numba
when it imports. Arrays are batched NHWC float64 throughout.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


def _select_backend():
    requested = os.environ.get("FUSENET_BACKEND", "").strip().lower()
    if requested not in ("", "numba", "numpy"):
        raise ValueError(f"FUSENET_BACKEND must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numpy" or numba is None:
        return "numpy"
    return "numba"


BACKEND = _select_backend()


# numpy path -----------------------------------------------------------------

def conv_forward_np(x, w, b):
    n, h, wd, d = x.shape
    kh, kw, _, f = w.shape
    oh, ow = h - kh + 1, wd - kw + 1
    out = np.empty((n, oh, ow, f))
    out[...] = b
    for i in range(kh):
        for j in range(kw):
            win = x[:, i:i + oh, j:j + ow, :].reshape(-1, d)
            out += (win @ w[i, j]).reshape(n, oh, ow, f)
    return out


def conv_backward_np(x, w, dout, need_dx=True):
    n, h, wd, d = x.shape
    kh, kw, _, f = w.shape
    oh, ow = dout.shape[1], dout.shape[2]
    g = dout.reshape(-1, f)
    dw = np.empty_like(w)
    for i in range(kh):
        for j in range(kw):
            win = x[:, i:i + oh, j:j + ow, :].reshape(-1, d)
            dw[i, j] = win.T @ g
    db = g.sum(axis=0)
    dx = None
    if need_dx:
        dx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                dx[:, i:i + oh, j:j + ow, :] += (g @ w[i, j].T).reshape(n, oh, ow, d)
    return dw, db, dx


def maxpool_forward_np(x):
    n, h, w, c = x.shape
    oh, ow = h // 2, w // 2
    win = x[:, :2 * oh, :2 * ow, :].reshape(n, oh, 2, ow, 2, c)
    win = win.transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, 4)
    # argmax returns the first maximum: row-major tie break inside the window
    arg = win.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, arg


def maxpool_backward_np(dout, arg, in_shape):
    n, oh, ow, c = dout.shape
    onehot = arg[..., None] == np.arange(4, dtype=np.int8)
    g = np.where(onehot, dout[..., None], 0.0)
    g = g.reshape(n, oh, ow, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * oh, 2 * ow, c)
    dx = np.zeros(in_shape)
    dx[:, :2 * oh, :2 * ow, :] = g
    return dx


# numba path -----------------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True)
    def _im2col_nb(x, kh, kw):
        n, h, wd, d = x.shape
        oh, ow = h - kh + 1, wd - kw + 1
        cols = np.empty((n * oh * ow, kh * kw * d))
        r = 0
        for s in range(n):
            for y in range(oh):
                for xx in range(ow):
                    q = 0
                    for i in range(kh):
                        for j in range(kw):
                            for c in range(d):
                                cols[r, q] = x[s, y + i, xx + j, c]
                                q += 1
                    r += 1
        return cols

    @numba.njit(cache=True)
    def _col2im_nb(dcols, dx, kh, kw):
        n, h, wd, d = dx.shape
        oh, ow = h - kh + 1, wd - kw + 1
        r = 0
        for s in range(n):
            for y in range(oh):
                for xx in range(ow):
                    q = 0
                    for i in range(kh):
                        for j in range(kw):
                            for c in range(d):
                                dx[s, y + i, xx + j, c] += dcols[r, q]
                                q += 1
                    r += 1
        return dx

    @numba.njit(cache=True)
    def _maxpool_forward_nb(x):
        n, h, w, c = x.shape
        oh, ow = h // 2, w // 2
        out = np.empty((n, oh, ow, c))
        arg = np.empty((n, oh, ow, c), dtype=np.int8)
        for s in range(n):
            for y in range(oh):
                for xx in range(ow):
                    for k in range(c):
                        best = x[s, 2 * y, 2 * xx, k]
                        pos = 0
                        for q in range(1, 4):
                            v = x[s, 2 * y + q // 2, 2 * xx + q % 2, k]
                            if v > best:
                                best = v
                                pos = q
                        out[s, y, xx, k] = best
                        arg[s, y, xx, k] = pos
        return out, arg

    @numba.njit(cache=True)
    def _maxpool_backward_nb(dout, arg, dx):
        n, oh, ow, c = dout.shape
        for s in range(n):
            for y in range(oh):
                for xx in range(ow):
                    for k in range(c):
                        q = arg[s, y, xx, k]
                        dx[s, 2 * y + q // 2, 2 * xx + q % 2, k] = dout[s, y, xx, k]
        return dx

    def conv_forward_nb(x, w, b):
        n, h, wd, _ = x.shape
        kh, kw, d, f = w.shape
        cols = _im2col_nb(np.ascontiguousarray(x), kh, kw)
        out = cols @ w.reshape(-1, f)
        out += b
        return out.reshape(n, h - kh + 1, wd - kw + 1, f)

    def conv_backward_nb(x, w, dout, need_dx=True):
        kh, kw, d, f = w.shape
        cols = _im2col_nb(np.ascontiguousarray(x), kh, kw)
        g = dout.reshape(-1, f)
        dw = (cols.T @ g).reshape(w.shape)
        db = g.sum(axis=0)
        dx = None
        if need_dx:
            dcols = g @ w.reshape(-1, f).T
            dx = _col2im_nb(dcols, np.zeros(x.shape), kh, kw)
        return dw, db, dx

    def maxpool_forward_nb(x):
        return _maxpool_forward_nb(np.ascontiguousarray(x))

    def maxpool_backward_nb(dout, arg, in_shape):
        return _maxpool_backward_nb(np.ascontiguousarray(dout), arg, np.zeros(in_shape))


NUMPY_KERNELS = {
    "conv_forward": conv_forward_np,
    "conv_backward": conv_backward_np,
    "maxpool_forward": maxpool_forward_np,
    "maxpool_backward": maxpool_backward_np,
}

NUMBA_KERNELS = {} if numba is None else {
    "conv_forward": conv_forward_nb,
    "conv_backward": conv_backward_nb,
    "maxpool_forward": maxpool_forward_nb,
    "maxpool_backward": maxpool_backward_nb,
}


def kernels(backend=None):
    """Kernel table for ``backend`` (defaults to the env-selected one)."""
    backend = backend or BACKEND
    return NUMBA_KERNELS if backend == "numba" else NUMPY_KERNELS
