"""Seeded gradient-check instances over every layer kind and every trainable scheme."""

from __future__ import annotations

import numpy as np

from fusenet.nets import BaseConfig, FusionScheme, make_model
from fusenet.tensor import Conv, Dense, MaxPool, ReLU, Sequential, Sigmoid, SoftmaxOutput, gradcheck

TOY = 8
TOY_CFG = BaseConfig(conv1_filters=3, conv2_filters=4, dense_width=6)


def layer_networks():
    """One small network per layer kind, all taking 8 x 8 x 2 inputs."""
    shape = (TOY, TOY, 2)
    return {
        "Conv": Sequential([Conv(2, 2, 2, 3), Dense(147, 2), SoftmaxOutput()], shape),
        "MaxPool": Sequential([Conv(2, 2, 2, 3), MaxPool(), Dense(27, 2), SoftmaxOutput()], shape),
        "ReLU": Sequential([Conv(2, 2, 2, 3), ReLU(), Dense(147, 2), SoftmaxOutput()], shape),
        "Sigmoid": Sequential([Conv(2, 2, 2, 3), Sigmoid(), Dense(147, 2), SoftmaxOutput()], shape),
        "Dense": Sequential([Dense(128, 6), Dense(6, 2), SoftmaxOutput()], shape),
        "SoftmaxOutput": Sequential([Dense(128, 2), SoftmaxOutput()], shape),
    }


def scheme_networks():
    mods = ("A", "B")
    return {
        "type1": make_model(FusionScheme("type1", mods), TOY_CFG, patch=TOY),
        "type2": make_model(FusionScheme("type2", mods), TOY_CFG, patch=TOY),
        "single": make_model(FusionScheme.single("A"), TOY_CFG, patch=TOY),
    }


def gradcheck_suite(seed=0, instances=10, step=1e-5, tolerance=1e-6, batch=4):
    """Yield (case name, instance index, report) for every network and seeded instance."""
    nets = {**layer_networks(), **scheme_networks()}
    for name, net in nets.items():
        in_shape = net.input_shape if hasattr(net, "input_shape") else (TOY, TOY, len(net.towers))
        for i in range(instances):
            rng = np.random.Generator(np.random.PCG64([seed, i]))
            params = net.init_params(int(rng.integers(2**32)))
            # nonzero biases so ReLU/pool inputs are not trivially symmetric
            for key, value in params.tensors.items():
                value += 0.1 * rng.standard_normal(value.shape)
            x = rng.standard_normal((batch,) + in_shape)
            y = rng.integers(0, 2, size=batch)
            yield name, i, gradcheck(net, params, x, y, step=step, tolerance=tolerance,
                                     check_input=True, seed=seed + i)
