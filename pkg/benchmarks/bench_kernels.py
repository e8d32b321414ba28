"""Time the numba and pure-numpy kernel tables on the default network's layer sizes.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from fusenet import _kernels
from fusenet.data import PATCH
from fusenet.nets import BaseConfig, FusionScheme, TrainedNetwork, make_model

CASES = {
    # batch of 64 patches through the first and second conv stages of a k=4 Type-I network
    "conv1 fwd": ("conv_forward", lambda r: (r.standard_normal((64, PATCH, PATCH, 4)),
                                            r.standard_normal((2, 2, 4, 16)), np.zeros(16))),
    "conv2 fwd": ("conv_forward", lambda r: (r.standard_normal((64, 13, 13, 16)),
                                            r.standard_normal((2, 2, 16, 32)), np.zeros(32))),
    # training never needs the input gradient of the first layer
    "conv1 bwd": ("conv_backward", lambda r: (r.standard_normal((64, PATCH, PATCH, 4)),
                                             r.standard_normal((2, 2, 4, 16)),
                                             r.standard_normal((64, 27, 27, 16)), False)),
    "conv2 bwd": ("conv_backward", lambda r: (r.standard_normal((64, 13, 13, 16)),
                                             r.standard_normal((2, 2, 16, 32)),
                                             r.standard_normal((64, 12, 12, 32)))),
    "pool fwd": ("maxpool_forward", lambda r: (r.standard_normal((64, 27, 27, 16)),)),
}


def best_of(fn, args, repeat):
    fn(*args)  # warm-up (and numba compilation)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':12s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (op, make) in CASES.items():
        inputs = make(rng)
        t_np = best_of(_kernels.NUMPY_KERNELS[op], inputs, args.repeat)
        t_nb = best_of(_kernels.NUMBA_KERNELS[op], inputs, args.repeat)
        print(f"{name:12s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:8.2f}")

    # end to end: one training batch and one full 96 x 96 heatmap per backend
    cfg = BaseConfig()
    scheme = FusionScheme("type1", ("CT", "PET", "T1", "T2"))
    x, y = rng.standard_normal((64, PATCH, PATCH, 4)), rng.integers(0, 2, 64)
    padded = rng.standard_normal((96 + PATCH, 96 + PATCH, 4))
    print()
    print(f"{'end to end':24s} {'numpy s':>9s} {'numba s':>9s}")
    rows = {}
    for backend in ("numpy", "numba"):
        model = make_model(scheme, cfg, backend=backend)
        params = model.init_params(0)
        net = TrainedNetwork(scheme, cfg, params=params, backend=backend)
        rows.setdefault("train batch (64)", []).append(
            best_of(model.backprop, (params, x, y), max(1, args.repeat // 2)))
        rows.setdefault("heatmap 96x96", []).append(best_of(net.predict_image, (padded, 96, 96), 3))
    for name, (t_np, t_nb) in rows.items():
        print(f"{name:24s} {t_np:9.4f} {t_nb:9.4f}")


if __name__ == "__main__":
    main()
