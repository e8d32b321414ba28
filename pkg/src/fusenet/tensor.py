"""Minimal deterministic network engine.

Tensors are plain float64 numpy arrays laid out row-major as (h, w, d) per
sample, batched as (n, h, w, d). Vectors between dense layers are (n, width);
a dense layer following a 3-D feature map flattens it in (h, w, d) order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from fusenet import _kernels


class ShapeError(ValueError):
    """A tensor or parameter has the wrong shape for the requested operation."""


class NumericError(FloatingPointError):
    """NaN or Inf appeared in a forward value, loss, gradient or update."""


# layer specifications -------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    kh: int
    kw: int
    depth: int
    filters: int

    def __post_init__(self):
        if min(self.kh, self.kw, self.depth, self.filters) < 1:
            raise ShapeError(f"Conv extents must be >= 1, got {self}")


@dataclass(frozen=True)
class MaxPool:
    window: int = 2

    def __post_init__(self):
        if self.window != 2:
            raise ShapeError("only 2x2 max pooling is supported")


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Sigmoid:
    pass


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1:
            raise ShapeError(f"Dense widths must be >= 1, got {self}")


@dataclass(frozen=True)
class SoftmaxOutput:
    classes: int = 2

    def __post_init__(self):
        if self.classes != 2:
            raise ShapeError("the softmax head is defined for exactly 2 classes")


LayerSpec = Union[Conv, MaxPool, ReLU, Sigmoid, Dense, SoftmaxOutput]


def layer_output_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Per-sample output shape of ``spec`` applied to ``in_shape``."""
    if isinstance(spec, Conv):
        if len(in_shape) != 3:
            raise ShapeError(f"Conv needs an h x w x d input, got {in_shape}")
        h, w, d = in_shape
        if d != spec.depth:
            raise ShapeError(f"Conv kernel depth {spec.depth} does not match input {in_shape}")
        if spec.kh > h or spec.kw > w:
            raise ShapeError(f"Conv kernel {spec.kh}x{spec.kw} larger than input {in_shape}")
        return (h - spec.kh + 1, w - spec.kw + 1, spec.filters)
    if isinstance(spec, MaxPool):
        if len(in_shape) != 3 or in_shape[0] < 2 or in_shape[1] < 2:
            raise ShapeError(f"MaxPool needs an input of at least 2x2, got {in_shape}")
        return (in_shape[0] // 2, in_shape[1] // 2, in_shape[2])
    if isinstance(spec, Dense):
        width = int(np.prod(in_shape))
        if width != spec.n_in:
            raise ShapeError(f"Dense expects width {spec.n_in}, input {in_shape} has width {width}")
        return (spec.n_out,)
    if isinstance(spec, SoftmaxOutput):
        if in_shape != (spec.classes,):
            raise ShapeError(f"softmax head expects ({spec.classes},) logits, got {in_shape}")
        return in_shape
    return in_shape


def shape_chain(specs: Sequence[LayerSpec], in_shape: tuple) -> list[tuple]:
    """Input shape followed by the output shape of every layer."""
    shapes = [tuple(in_shape)]
    for spec in specs:
        shapes.append(layer_output_shape(spec, shapes[-1]))
    return shapes


def param_shapes(spec: LayerSpec):
    """(weight shape, bias shape, fan_in, fan_out), or None for parameter-free layers."""
    if isinstance(spec, Conv):
        area = spec.kh * spec.kw
        return ((spec.kh, spec.kw, spec.depth, spec.filters), (spec.filters,),
                area * spec.depth, area * spec.filters)
    if isinstance(spec, Dense):
        return (spec.n_in, spec.n_out), (spec.n_out,), spec.n_in, spec.n_out
    return None


# parameters -----------------------------------------------------------------

@dataclass
class ParamStore:
    """Named weight/bias tensors in declaration order plus SGD velocity.

    Keys look like ``"3.W"`` / ``"3.b"`` (layer index), optionally prefixed by a
    sub-network name such as ``"tower.PET/0.W"``.
    """

    tensors: dict[str, np.ndarray]
    rng_seed: int
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def initialize(cls, layout, seed: int) -> "ParamStore":
        """Glorot-uniform weights and zero biases, drawn from PCG64(seed) in layout order."""
        rng = np.random.Generator(np.random.PCG64(seed))
        tensors = {}
        for key, wshape, bshape, fan_in, fan_out in layout:
            a = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[key + "W"] = rng.uniform(-a, a, size=wshape)
            tensors[key + "b"] = np.zeros(bshape)
        return cls(tensors, seed)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.tensors.items()}, self.rng_seed,
                          {k: v.copy() for k, v in self.velocity.items()})

    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def __getitem__(self, key):
        return self.tensors[key]

    def __eq__(self, other):
        if not isinstance(other, ParamStore) or list(self.tensors) != list(other.tensors):
            return False
        return all(np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())


@dataclass
class GradientRecord:
    grads: dict[str, np.ndarray]
    loss: float
    input_grad: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None


# elementwise and small ops --------------------------------------------------

def _batched(x, ndim):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == ndim else (x, False)


def conv_forward(x, weights, bias, backend=None):
    """Valid stride-1 convolution. ``x`` is h x w x d or n x h x w x d."""
    xb, single = _batched(x, 3)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weights.ndim != 4 or xb.ndim != 4 or weights.shape[2] != xb.shape[3] \
            or weights.shape[0] > xb.shape[1] or weights.shape[1] > xb.shape[2] \
            or bias.shape != (weights.shape[3],):
        raise ShapeError(f"conv input {np.shape(x)} incompatible with kernel {weights.shape}"
                         f" / bias {bias.shape}")
    out = _kernels.kernels(backend)["conv_forward"](xb, weights, bias)
    return out[0] if single else out


def maxpool_forward(x, backend=None):
    """Non-overlapping 2x2 max pool. Returns (output, argmax position 0..3 per output)."""
    xb, single = _batched(x, 3)
    if xb.ndim != 4 or xb.shape[1] < 2 or xb.shape[2] < 2:
        raise ShapeError(f"max pool needs at least 2x2 spatial input, got {np.shape(x)}")
    out, arg = _kernels.kernels(backend)["maxpool_forward"](xb)
    return (out[0], arg[0]) if single else (out, arg)


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def dense_forward(x, weights, bias):
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, weights.shape[0]) if x.ndim > 1 else x.reshape(1, -1)
    if flat.shape[1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense input {x.shape} incompatible with weights {weights.shape}")
    out = flat @ weights + bias
    return out[0] if x.ndim == 1 else out


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent_forward(logits, labels):
    """Class probabilities and mean cross-entropy against integer labels."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if z.shape[1] != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"softmax head needs (n, 2) logits and n labels, got {z.shape}, {labels.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    probs = np.exp(shifted - logsum[:, None])
    loss = float(np.mean(logsum - shifted[np.arange(len(labels)), labels]))
    return probs, loss


# sequential networks --------------------------------------------------------

def _check_finite(arr, where):
    # NaN/Inf anywhere poisons the sum; one reduction instead of a mask array
    if not np.isfinite(np.add.reduce(arr, axis=None)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in {where}")


class Sequential:
    """A chain of layers over a fixed per-sample input shape.

    ``prefix`` namespaces the parameter keys so several chains can share one
    ParamStore.
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape: tuple, prefix: str = "",
                 backend: Optional[str] = None):
        self.specs = tuple(specs)
        self.input_shape = tuple(input_shape)
        self.prefix = prefix
        self.backend = backend
        self.shapes = shape_chain(self.specs, self.input_shape)

    @property
    def output_shape(self):
        return self.shapes[-1]

    def param_layout(self):
        layout = []
        for i, spec in enumerate(self.specs):
            ps = param_shapes(spec)
            if ps is not None:
                layout.append((f"{self.prefix}{i}.",) + ps)
        return layout

    def init_params(self, seed: int) -> ParamStore:
        return ParamStore.initialize(self.param_layout(), seed)

    def param_count(self) -> int:
        return sum(int(np.prod(w)) + int(np.prod(b)) for _, w, b, _, _ in self.param_layout())

    def _where(self, i):
        return f"layer {self.prefix}{i} ({type(self.specs[i]).__name__})"

    def forward(self, params: ParamStore, x, keep=False):
        """Run the chain on a batch. With ``keep`` also return per-layer caches.

        A trailing SoftmaxOutput turns logits into probabilities.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"batch of shape {x.shape} does not match network input {self.input_shape}")
        _check_finite(x, f"input to {self.prefix or 'network'}")
        kern = _kernels.kernels(self.backend)
        caches = []
        for i, spec in enumerate(self.specs):
            cache = None
            if isinstance(spec, Conv):
                cache = x
                x = kern["conv_forward"](x, params[f"{self.prefix}{i}.W"], params[f"{self.prefix}{i}.b"])
            elif isinstance(spec, MaxPool):
                shape = x.shape
                x, arg = kern["maxpool_forward"](x)
                cache = (arg, shape)
            elif isinstance(spec, ReLU):
                cache = x > 0
                x = np.where(cache, x, 0.0)
            elif isinstance(spec, Sigmoid):
                x = sigmoid(x)
                cache = x
            elif isinstance(spec, Dense):
                cache = x.shape
                x = x.reshape(len(x), -1)
                if keep:
                    cache = (cache, x)
                x = x @ params[f"{self.prefix}{i}.W"] + params[f"{self.prefix}{i}.b"]
            elif isinstance(spec, SoftmaxOutput):
                x = softmax(x)
            if isinstance(spec, (Conv, Dense, Sigmoid)):
                # ReLU and pooling cannot create NaN/Inf from finite input
                _check_finite(x, self._where(i) + " forward")
            if keep:
                caches.append(cache)
        return (x, caches) if keep else x

    def backward(self, params: ParamStore, caches, dout, need_input_grad=False, stop=None):
        """Reverse pass from the gradient w.r.t. the output of layer ``stop - 1``.

        ``stop`` defaults to the full chain; pass ``len(specs) - 1`` to start
        below a trailing softmax with a logit gradient.
        """
        stop = len(self.specs) if stop is None else stop
        kern = _kernels.kernels(self.backend)
        grads = {}
        g = dout
        first_param = min((i for i, s in enumerate(self.specs) if param_shapes(s)), default=0)
        lowest = 0 if need_input_grad else first_param
        for i in range(stop - 1, lowest - 1, -1):
            spec = self.specs[i]
            cache = caches[i]
            key = f"{self.prefix}{i}."
            if isinstance(spec, Conv):
                need_dx = need_input_grad or i > first_param
                dw, db, g = kern["conv_backward"](cache, params[key + "W"], g, need_dx)
                grads[key + "W"], grads[key + "b"] = dw, db
            elif isinstance(spec, MaxPool):
                arg, shape = cache
                g = kern["maxpool_backward"](g, arg, shape)
            elif isinstance(spec, ReLU):
                g = np.where(cache, g, 0.0)
            elif isinstance(spec, Sigmoid):
                g = g * cache * (1.0 - cache)
            elif isinstance(spec, Dense):
                in_shape, flat = cache
                grads[key + "W"] = flat.T @ g
                grads[key + "b"] = g.sum(axis=0)
                if need_input_grad or i > first_param:
                    g = (g @ params[key + "W"].T).reshape(in_shape)
            elif isinstance(spec, SoftmaxOutput):
                raise ShapeError("backward through a softmax head needs the logit gradient; use stop")
            if g is not None and isinstance(spec, (Conv, Dense)):
                _check_finite(g, self._where(i) + " backward")
            for k in (key + "W", key + "b"):
                if k in grads:
                    _check_finite(grads[k], self._where(i) + " gradient")
        return grads, (g if need_input_grad else None)

    def dense_map(self, params: ParamStore, image, out_h: int, out_w: int) -> np.ndarray:
        """Forward output for every input-sized window of ``image``.

        Equivalent to stacking ``image[r:r+h, c:c+w]`` for r < out_h, c < out_w
        and calling forward, but each convolution runs once over the whole
        image: every 2x2 pool splits the maps into four phase branches, and the
        first Dense layer gathers each window's feature block from its branch.
        Returns an (out_h * out_w, ...) array in row-major window order.
        """
        image = np.asarray(image, dtype=np.float64)
        h, w, d = self.input_shape
        if image.ndim != 3 or image.shape[2] != d or image.shape[0] < out_h + h - 1 \
                or image.shape[1] < out_w + w - 1:
            raise ShapeError(f"image {image.shape} too small for {out_h}x{out_w} windows of {self.input_shape}")
        kern = _kernels.kernels(self.backend)
        split = next((i for i, s in enumerate(self.specs) if isinstance(s, (Dense, SoftmaxOutput))),
                     len(self.specs))
        # branch key: tuple of (row phase, col phase) per pool so far
        branches = {(): image[None]}
        extent = (h, w)
        for i, spec in enumerate(self.specs[:split]):
            new = {}
            for key, m in branches.items():
                if isinstance(spec, Conv):
                    new[key] = kern["conv_forward"](m, params[f"{self.prefix}{i}.W"],
                                                    params[f"{self.prefix}{i}.b"])
                elif isinstance(spec, ReLU):
                    new[key] = np.maximum(m, 0.0)
                elif isinstance(spec, Sigmoid):
                    new[key] = sigmoid(m)
                elif isinstance(spec, MaxPool):
                    for pr in (0, 1):
                        for pc in (0, 1):
                            new[key + ((pr, pc),)] = kern["maxpool_forward"](
                                np.ascontiguousarray(m[:, pr:, pc:, :]))[0]
            for m in new.values():
                _check_finite(m, self._where(i) + " forward")
            branches = new
            extent = layer_output_shape(spec, extent + (1,))[:2] if isinstance(spec, MaxPool) \
                else (extent[0] - (spec.kh - 1), extent[1] - (spec.kw - 1)) if isinstance(spec, Conv) \
                else extent
        fh, fw = extent
        n_pools = sum(isinstance(s, MaxPool) for s in self.specs[:split])
        rows = np.arange(out_h)
        cols = np.arange(out_w)
        feat_dim = None
        out = None
        for key, m in branches.items():
            m = m[0]
            # origins whose binary digits (least significant first) match the branch phases
            rsel = rows[np.all([(rows >> b) & 1 == key[b][0] for b in range(n_pools)], axis=0)] \
                if n_pools else rows
            csel = cols[np.all([(cols >> b) & 1 == key[b][1] for b in range(n_pools)], axis=0)] \
                if n_pools else cols
            if len(rsel) == 0 or len(csel) == 0:
                continue
            win = np.lib.stride_tricks.sliding_window_view(m, (fh, fw), axis=(0, 1))
            block = win[np.ix_(rsel >> n_pools, csel >> n_pools)].transpose(0, 1, 3, 4, 2)
            block = block.reshape(len(rsel) * len(csel), -1)
            if feat_dim is None:
                feat_dim = block.shape[1]
                out = np.empty((out_h, out_w, feat_dim))
            out[np.ix_(rsel, csel)] = block.reshape(len(rsel), len(csel), feat_dim)
        out = out.reshape(out_h * out_w, feat_dim)
        if split == len(self.specs):
            return out
        rest = Sequential(self.specs[split:], (feat_dim,), self.prefix, self.backend)
        # re-key the tail so parameter lookups keep the original layer indices
        rest_params = ParamStore({f"{self.prefix}{int(k[len(self.prefix):].split('.')[0]) - split}."
                                  f"{k.rsplit('.', 1)[1]}": v
                                  for k, v in params.tensors.items()
                                  if k.startswith(self.prefix)
                                  and int(k[len(self.prefix):].split('.')[0]) >= split}, params.rng_seed)
        return rest.forward(rest_params, out)

    def loss(self, params: ParamStore, x, labels) -> float:
        logits = self._logits(params, x)
        return softmax_xent_forward(logits, labels)[1]

    def _logits(self, params, x):
        if not isinstance(self.specs[-1], SoftmaxOutput):
            raise ShapeError("loss requires a network ending in SoftmaxOutput")
        return Sequential(self.specs[:-1], self.input_shape, self.prefix, self.backend).forward(params, x)

    def backprop(self, params: ParamStore, x, labels, need_input_grad=False) -> GradientRecord:
        return backprop(self, params, x, labels, need_input_grad)


def backprop(net, params: ParamStore, x, labels, need_input_grad=False) -> GradientRecord:
    """Exact gradients of the mean softmax cross-entropy of a Sequential ending in SoftmaxOutput."""
    if not isinstance(net.specs[-1], SoftmaxOutput):
        raise ShapeError("backprop requires a network ending in SoftmaxOutput")
    labels = np.asarray(labels, dtype=np.intp)
    body = Sequential(net.specs[:-1], net.input_shape, net.prefix, net.backend)
    logits, caches = body.forward(params, x, keep=True)
    probs, loss = softmax_xent_forward(logits, labels)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss at the softmax head of {net.prefix or 'network'}")
    dlogits = probs.copy()
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dlogits /= len(labels)
    grads, dx = body.backward(params, caches, dlogits, need_input_grad)
    ordered = {k: grads[k] for k in params.tensors if k in grads}
    return GradientRecord(ordered, loss, dx, probs)


def sgd_step(params: ParamStore, grads: GradientRecord, lr: float, momentum: float = 0.9) -> ParamStore:
    """In-place momentum SGD: v <- momentum*v - lr*g; p <- p + v."""
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    for key, g in grads.grads.items():
        p = params.tensors[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient {key} has shape {g.shape}, parameter has {p.shape}")
        v = params.velocity.get(key)
        v = -lr * g if v is None else momentum * v - lr * g
        new = p + v
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(new))):
            raise NumericError(f"non-finite SGD update for parameter {key}")
        params.velocity[key] = v
        p[...] = new
    return params


# gradient verification ------------------------------------------------------

@dataclass
class GradcheckReport:
    errors: dict[str, float]
    checked: dict[str, int]
    tolerance: float

    @property
    def layers(self) -> dict[str, float]:
        """Worst relative error per layer (weight and bias merged)."""
        out: dict[str, float] = {}
        for key, err in self.errors.items():
            layer = key.rsplit(".", 1)[0]
            out[layer] = max(out.get(layer, 0.0), err)
        return out

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.errors.values())

    def failures(self):
        return {k: e for k, e in self.errors.items() if not e < self.tolerance}


def relative_error(analytic, numeric) -> float:
    """max |a - n| scaled by the largest gradient magnitude of the tensor."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    if scale < 1e-300:
        return 0.0 if diff == 0 else float("inf")
    return float(diff / scale)


def gradcheck(net, params, x, labels, step=1e-5, tolerance=1e-6, max_full=2000, seed=0,
              check_input=False, grads: Optional[GradientRecord] = None) -> GradcheckReport:
    """Compare backprop against central finite differences on every parameter.

    ``net`` is anything with ``loss(params, x, labels)`` and
    ``backprop(params, x, labels, need_input_grad)``. Above ``max_full``
    parameters a seeded subsample of each tensor is checked. ``grads`` may be
    supplied to check a precomputed (possibly corrupted) record.
    """
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64)
    if grads is None:
        grads = net.backprop(params, x, labels, check_input)
    total = params.size()
    rng = np.random.Generator(np.random.PCG64(seed))
    errors, checked = {}, {}

    def central(arr, flat_idx, evaluate):
        view = arr.reshape(-1)
        old = view[flat_idx]
        view[flat_idx] = old + step
        up = evaluate()
        view[flat_idx] = old - step
        down = evaluate()
        view[flat_idx] = old
        return (up - down) / (2 * step)

    def run(key, arr, analytic, evaluate):
        if total <= max_full:
            idx = np.arange(arr.size)
        else:
            m = min(arr.size, max(20, int(round(max_full * arr.size / total))))
            idx = np.sort(rng.choice(arr.size, size=m, replace=False))
        numeric = np.array([central(arr, i, evaluate) for i in idx])
        errors[key] = relative_error(analytic.reshape(-1)[idx], numeric)
        checked[key] = len(idx)

    evaluate = lambda: net.loss(params, x, labels)  # noqa: E731
    for key, arr in params.tensors.items():
        if key not in grads.grads:
            raise ShapeError(f"gradient record is missing parameter {key}")
        if grads.grads[key].shape != arr.shape:
            raise ShapeError(f"gradient {key} shape {grads.grads[key].shape} != parameter {arr.shape}")
        run(key, arr, grads.grads[key], evaluate)
    if check_input and grads.input_grad is not None:
        run("input", x, grads.input_grad, evaluate)
    return GradcheckReport(errors, checked, tolerance)
