import os
import subprocess
import sys

import numpy as np
import pytest

from fusenet import _kernels


def naive_conv(x, w, b):
    n, h, wd, d = x.shape
    kh, kw, _, f = w.shape
    out = np.zeros((n, h - kh + 1, wd - kw + 1, f))
    for s in range(n):
        for y in range(h - kh + 1):
            for xx in range(wd - kw + 1):
                for k in range(f):
                    acc = b[k]
                    for i in range(kh):
                        for j in range(kw):
                            for c in range(d):
                                acc += x[s, y + i, xx + j, c] * w[i, j, c, k]
                    out[s, y, xx, k] = acc
    return out


def naive_pool(x):
    n, h, w, c = x.shape
    out = np.zeros((n, h // 2, w // 2, c))
    arg = np.zeros(out.shape, dtype=int)
    for s in range(n):
        for y in range(h // 2):
            for xx in range(w // 2):
                for k in range(c):
                    vals = [x[s, 2 * y + q // 2, 2 * xx + q % 2, k] for q in range(4)]
                    out[s, y, xx, k] = max(vals)
                    arg[s, y, xx, k] = vals.index(max(vals))
    return out, arg


@pytest.mark.parametrize("table", ["numba", "numpy"])
@pytest.mark.parametrize("shape,kernel", [((2, 7, 5, 3), (2, 2, 3, 4)), ((1, 9, 9, 1), (3, 2, 1, 2)),
                                          ((3, 4, 4, 2), (1, 1, 2, 5))])
def test_conv_kernels_match_naive_loops(table, shape, kernel):
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal(shape), rng.standard_normal(kernel), rng.standard_normal(kernel[-1])
    got = _kernels.kernels(table)["conv_forward"](x, w, b)
    np.testing.assert_allclose(got, naive_conv(x, w, b), rtol=0, atol=1e-12)


@pytest.mark.parametrize("table", ["numba", "numpy"])
def test_conv_backward_kernels_agree(table):
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((3, 6, 7, 2)), rng.standard_normal((2, 2, 2, 3))
    g = rng.standard_normal((3, 5, 6, 3))
    dw, db, dx = _kernels.kernels(table)["conv_backward"](x, w, g)
    ref = _kernels.NUMPY_KERNELS["conv_backward"](x, w, g)
    # dW by the definition: sum over outputs of input window times upstream grad
    dw_def = np.zeros_like(w)
    for i in range(2):
        for j in range(2):
            dw_def[i, j] = np.einsum("nhwc,nhwf->cf", x[:, i:i + 5, j:j + 6], g)
    np.testing.assert_allclose(dw, dw_def, atol=1e-12)
    np.testing.assert_allclose(db, g.sum(axis=(0, 1, 2)), atol=1e-12)
    np.testing.assert_allclose(dx, ref[2], atol=1e-12)
    assert _kernels.kernels(table)["conv_backward"](x, w, g, need_dx=False)[2] is None


@pytest.mark.parametrize("table", ["numba", "numpy"])
def test_pool_kernels_match_naive_and_break_ties_first(table):
    rng = np.random.default_rng(2)
    x = rng.integers(0, 3, size=(2, 7, 6, 3)).astype(float)  # many ties
    out, arg = _kernels.kernels(table)["maxpool_forward"](x)
    ref_out, ref_arg = naive_pool(x)
    np.testing.assert_array_equal(out, ref_out)
    np.testing.assert_array_equal(arg, ref_arg)
    g = rng.standard_normal(out.shape)
    dx = _kernels.kernels(table)["maxpool_backward"](g, arg, x.shape)
    np.testing.assert_array_equal(dx, _kernels.NUMPY_KERNELS["maxpool_backward"](g, ref_arg.astype(np.int8),
                                                                                  x.shape))
    assert dx[:, 6:].sum() == 0  # odd trailing row gets no gradient


def test_backend_env_flag():
    code = "from fusenet import _kernels; print(_kernels.BACKEND)"
    env = dict(os.environ, FUSENET_BACKEND="numpy")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
    env["FUSENET_BACKEND"] = "cuda"
    bad = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert bad.returncode != 0 and "FUSENET_BACKEND" in bad.stderr
