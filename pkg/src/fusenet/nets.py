"""Network builders and training for the four fusion schemes.

* ``type1``  feature-level fusion: modalities are the channels of one input
  tensor, so the first 2x2xk convolution mixes them.
* ``type2``  classifier-level fusion: one convolutional tower per modality,
  flattened tower outputs concatenated into a shared dense classifier, all
  trained jointly.
* ``type3``  decision-level fusion: independent single-modality networks whose
  labelmaps are combined by majority vote at inference time.
* ``single`` one modality, the baseline.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from fusenet.data import PATCH, PatchSample, stack_samples
from fusenet.tensor import (
    Conv, Dense, GradientRecord, MaxPool, ParamStore, ReLU, Sequential, ShapeError,
    SoftmaxOutput, NumericError, sgd_step, softmax_xent_forward,
)

log = logging.getLogger(__name__)

KINDS = ("type1", "type2", "type3", "single")
PREDICT_CHUNK = 1024


class SchemeError(ValueError):
    pass


@dataclass(frozen=True)
class BaseConfig:
    conv1_filters: int = 16
    conv2_filters: int = 32
    dense_width: int = 128
    kernel: int = 2
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("conv1_filters", "conv2_filters", "dense_width", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise SchemeError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kernel != 2:
            raise SchemeError("kernel spatial size is fixed at 2")
        if not self.learning_rate > 0:
            raise SchemeError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise SchemeError(f"momentum must lie in [0, 1), got {self.momentum}")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class FusionScheme:
    """Scheme kind plus the modalities it consumes, always in lexicographic order."""

    kind: str
    modalities: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemeError(f"unknown scheme {self.kind!r}; expected one of {KINDS}")
        mods = tuple(sorted(self.modalities))
        if len(set(mods)) != len(mods):
            raise SchemeError(f"duplicate modalities in {self.modalities}")
        if self.kind == "single" and len(mods) != 1:
            raise SchemeError(f"single scheme needs exactly 1 modality, got {len(mods)}")
        if self.kind != "single" and len(mods) < 2:
            raise SchemeError(f"{self.kind} fusion needs at least 2 modalities, got {len(mods)}")
        object.__setattr__(self, "modalities", mods)

    @classmethod
    def single(cls, modality: str) -> "FusionScheme":
        return cls("single", (modality,))

    @property
    def k(self) -> int:
        return len(self.modalities)

    @property
    def label(self) -> str:
        return f"single:{self.modalities[0]}" if self.kind == "single" else self.kind

    def __str__(self):
        return f"{self.label}[{'+'.join(self.modalities)}]"


# architectures ---------------------------------------------------------------

def _conv_stack(depth: int, cfg: BaseConfig) -> list:
    return [Conv(2, 2, depth, cfg.conv1_filters), ReLU(), MaxPool(),
            Conv(2, 2, cfg.conv1_filters, cfg.conv2_filters), ReLU(), MaxPool()]


def conv_output_shape(cfg: BaseConfig, patch: int = PATCH) -> tuple:
    side = ((patch - 1) // 2 - 1) // 2
    if side < 1:
        raise SchemeError(f"patch size {patch} is too small for two conv/pool stages")
    return (side, side, cfg.conv2_filters)


def _classifier(n_in: int, cfg: BaseConfig) -> list:
    return [Dense(n_in, cfg.dense_width), ReLU(), Dense(cfg.dense_width, 2), SoftmaxOutput()]


def _flat(cfg, patch):
    return int(np.prod(conv_output_shape(cfg, patch)))


def build_type1(k: int, cfg: BaseConfig, patch: int = PATCH) -> list:
    if k < 2:
        raise SchemeError(f"Type-I fusion needs k >= 2 modalities, got {k}")
    return _conv_stack(k, cfg) + _classifier(_flat(cfg, patch), cfg)


def build_single(cfg: BaseConfig, patch: int = PATCH) -> list:
    return _conv_stack(1, cfg) + _classifier(_flat(cfg, patch), cfg)


@dataclass(frozen=True)
class TowerSpec:
    towers: tuple
    head: tuple


def build_type2(k: int, cfg: BaseConfig, patch: int = PATCH) -> TowerSpec:
    if k < 2:
        raise SchemeError(f"Type-II fusion needs k >= 2 modalities, got {k}")
    tower = tuple(_conv_stack(1, cfg))
    return TowerSpec((tower,) * k, tuple(_classifier(k * _flat(cfg, patch), cfg)))


def build_type3(k: int, cfg: BaseConfig, patch: int = PATCH) -> list:
    if k < 2:
        raise SchemeError(f"Type-III fusion needs k >= 2 modalities, got {k}")
    return [build_single(cfg, patch) for _ in range(k)]


def param_count(spec) -> int:
    """Weight plus bias element count of a layer list, a TowerSpec or a list of member lists."""
    if isinstance(spec, TowerSpec):
        return sum(param_count(t) for t in spec.towers) + param_count(spec.head)
    spec = list(spec)
    if spec and isinstance(spec[0], (list, tuple)):
        return sum(param_count(s) for s in spec)
    total = 0
    for layer in spec:
        if isinstance(layer, Conv):
            total += layer.kh * layer.kw * layer.depth * layer.filters + layer.filters
        elif isinstance(layer, Dense):
            total += layer.n_in * layer.n_out + layer.n_out
    return total


def architecture(scheme: FusionScheme, cfg: BaseConfig, patch: int = PATCH):
    if scheme.kind == "type1":
        return build_type1(scheme.k, cfg, patch)
    if scheme.kind == "type2":
        return build_type2(scheme.k, cfg, patch)
    if scheme.kind == "type3":
        return build_type3(scheme.k, cfg, patch)
    return build_single(cfg, patch)


# models -----------------------------------------------------------------------

class TowerNet:
    """Per-modality towers feeding one shared classifier (Type-II)."""

    def __init__(self, spec: TowerSpec, backend=None, patch: int = PATCH):
        self.spec = spec
        self.towers = [Sequential(t, (patch, patch, 1), prefix=f"tower{i}/", backend=backend)
                       for i, t in enumerate(spec.towers)]
        width = sum(int(np.prod(t.output_shape)) for t in self.towers)
        self.head = Sequential(spec.head, (width,), prefix="head/", backend=backend)
        self._body = Sequential(spec.head[:-1], (width,), prefix="head/", backend=backend)

    def param_layout(self):
        return [e for t in self.towers for e in t.param_layout()] + self.head.param_layout()

    def init_params(self, seed):
        return ParamStore.initialize(self.param_layout(), seed)

    def _features(self, params, x, keep):
        outs, caches = [], []
        for i, tower in enumerate(self.towers):
            res = tower.forward(params, x[..., i:i + 1], keep=keep)
            out, cache = res if keep else (res, None)
            outs.append(out.reshape(len(x), -1))
            caches.append(cache)
        return np.concatenate(outs, axis=1), caches

    def forward(self, params, x):
        feats, _ = self._features(params, np.asarray(x, dtype=np.float64), keep=False)
        return self.head.forward(params, feats)

    def dense_map(self, params, image, out_h, out_w):
        """Probabilities for every patch-sized window of an h x w x k image (see Sequential.dense_map)."""
        feats = np.concatenate([t.dense_map(params, image[..., i:i + 1], out_h, out_w)
                                for i, t in enumerate(self.towers)], axis=1)
        return self.head.forward(params, feats)

    def loss(self, params, x, labels):
        feats, _ = self._features(params, np.asarray(x, dtype=np.float64), keep=False)
        return softmax_xent_forward(self._body.forward(params, feats), labels)[1]

    def backprop(self, params, x, labels, need_input_grad=False):
        x = np.asarray(x, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.intp)
        feats, tower_caches = self._features(params, x, keep=True)
        logits, head_caches = self._body.forward(params, feats, keep=True)
        probs, loss = softmax_xent_forward(logits, labels)
        if not np.isfinite(loss):
            raise NumericError("non-finite loss at the Type-II softmax head")
        dlogits = probs.copy()
        dlogits[np.arange(len(labels)), labels] -= 1.0
        dlogits /= len(labels)
        grads, dfeat = self._body.backward(params, head_caches, dlogits, need_input_grad=True)
        dx = np.zeros_like(x) if need_input_grad else None
        start = 0
        for i, (tower, cache) in enumerate(zip(self.towers, tower_caches)):
            width = int(np.prod(tower.output_shape))
            g = dfeat[:, start:start + width].reshape((len(x),) + tower.output_shape)
            start += width
            tg, tdx = tower.backward(params, cache, g, need_input_grad)
            grads.update(tg)
            if need_input_grad:
                dx[..., i:i + 1] = tdx
        ordered = {k: grads[k] for k in params.tensors}
        return GradientRecord(ordered, loss, dx, probs)


def make_model(scheme: FusionScheme, cfg: BaseConfig, backend=None, patch: int = PATCH):
    """Trainable model object for every scheme except type3 (which is a list of singles)."""
    if scheme.kind == "type3":
        raise SchemeError("type3 has no single model; it is an ensemble of single networks")
    arch = architecture(scheme, cfg, patch)
    if scheme.kind == "type2":
        return TowerNet(arch, backend, patch)
    return Sequential(arch, (patch, patch, scheme.k), backend=backend)


def derive_seed(seed: int, tag: str) -> int:
    """Stable 63-bit seed for a named sub-stream of ``seed``."""
    state = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(tag.encode())])
    return int(state.generate_state(1, np.uint64)[0] >> np.uint64(1))


def init_seed(scheme: FusionScheme, cfg: BaseConfig) -> int:
    # singles derive from their modality name so a Type-III member is bitwise
    # the same network as the standalone single of that modality
    return derive_seed(cfg.seed, "single:" + scheme.modalities[0]) if scheme.kind == "single" \
        else derive_seed(cfg.seed, scheme.kind)


# trained networks -------------------------------------------------------------

@dataclass
class TrainedNetwork:
    scheme: FusionScheme
    cfg: BaseConfig
    params: Optional[ParamStore] = None
    members: list = field(default_factory=list)
    log: dict = field(default_factory=dict)
    backend: Optional[str] = None

    def __post_init__(self):
        if self.scheme.kind == "type3":
            if len(self.members) != self.scheme.k:
                raise SchemeError(f"type3 needs {self.scheme.k} members, got {len(self.members)}")
        elif self.params is None:
            raise SchemeError(f"{self.scheme.kind} network needs a parameter store")
        self._model = None

    @property
    def model(self):
        if self._model is None:
            self._model = make_model(self.scheme, self.cfg, self.backend)
        return self._model

    def param_stores(self) -> list:
        if self.scheme.kind == "type3":
            return [m.params for m in self.members]
        return [self.params]

    def param_count(self) -> int:
        return param_count(architecture(self.scheme, self.cfg))

    def predict_proba(self, x) -> np.ndarray:
        """(n, 2) class probabilities for patches carrying this scheme's modality planes in order."""
        if self.scheme.kind == "type3":
            raise SchemeError("type3 networks predict member-wise; combine labelmaps with majority_vote")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != (PATCH, PATCH, self.scheme.k):
            raise ShapeError(f"expected n x {PATCH} x {PATCH} x {self.scheme.k} patches, got {x.shape}")
        out = [self.model.forward(self.params, x[i:i + PREDICT_CHUNK])
               for i in range(0, len(x), PREDICT_CHUNK)]
        return np.concatenate(out) if out else np.zeros((0, 2))


    def predict_image(self, padded: np.ndarray, height: int, width: int) -> np.ndarray:
        """(height*width, 2) probabilities for every pixel of a mirror-padded modality stack.

        ``padded`` holds this scheme's modality planes in order, padded by the
        patch half-size on each side; row-major pixel order.
        """
        if self.scheme.kind == "type3":
            raise SchemeError("type3 networks predict member-wise; combine labelmaps with majority_vote")
        return self.model.dense_map(self.params, padded, height, width)


def _select_planes(x, sample_modalities, wanted):
    idx = [list(sample_modalities).index(m) for m in wanted]
    return x[..., idx] if idx != list(range(x.shape[-1])) else x


def train(scheme: FusionScheme, samples: Sequence[PatchSample], cfg: BaseConfig,
          sample_modalities: Optional[Sequence[str]] = None, *, exact_accuracy: bool = False,
          stop_at_accuracy: Optional[float] = None, backend: Optional[str] = None) -> TrainedNetwork:
    """Mini-batch momentum SGD over shuffled batches for ``cfg.epochs`` epochs.

    ``samples`` carry patch planes in ``sample_modalities`` order (defaults to
    the scheme's own modalities). With ``exact_accuracy`` the training accuracy
    logged each epoch is recomputed over the whole set after the epoch;
    otherwise it is the running accuracy of the batches as they were seen.
    ``stop_at_accuracy`` ends training early once the logged accuracy reaches it.
    """
    if len(samples) == 0:
        raise SchemeError("training set is empty")
    x, y = stack_samples(samples)
    return train_arrays(scheme, x, y, cfg, sample_modalities, exact_accuracy=exact_accuracy,
                        stop_at_accuracy=stop_at_accuracy, backend=backend)


def train_arrays(scheme, x, y, cfg, sample_modalities=None, *, exact_accuracy=False,
                 stop_at_accuracy=None, backend=None) -> TrainedNetwork:
    sample_modalities = tuple(sample_modalities or scheme.modalities)
    if len(y) == 0:
        raise SchemeError("training set is empty")
    if x.shape[-1] != len(sample_modalities):
        raise ShapeError(f"patches have {x.shape[-1]} planes but {len(sample_modalities)} modalities named")
    missing = set(scheme.modalities) - set(sample_modalities)
    if missing:
        raise SchemeError(f"training patches lack modalities {sorted(missing)}")
    if scheme.kind == "type3":
        members = [train_arrays(FusionScheme.single(m), x, y, cfg, sample_modalities,
                                exact_accuracy=exact_accuracy, stop_at_accuracy=stop_at_accuracy,
                                backend=backend)
                   for m in scheme.modalities]
        return TrainedNetwork(scheme, cfg, members=members,
                              log={"members": [m.log for m in members]}, backend=backend)

    x = _select_planes(np.asarray(x, dtype=np.float64), sample_modalities, scheme.modalities)
    y = np.asarray(y, dtype=np.intp)
    seed = init_seed(scheme, cfg)
    model = make_model(scheme, cfg, backend)
    params = model.init_params(seed)
    grad_fn = model.backprop
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "shuffle")))

    def full_accuracy():
        probs = np.concatenate([model.forward(params, x[i:i + PREDICT_CHUNK])
                                for i in range(0, len(x), PREDICT_CHUNK)])
        return float(np.mean(probs.argmax(axis=1) == y))

    history = {"initial_loss": None, "loss": [], "accuracy": []}
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        total_loss, correct = 0.0, 0
        for b, start in enumerate(range(0, len(y), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                rec = grad_fn(params, x[idx], y[idx])
                sgd_step(params, rec, cfg.learning_rate, cfg.momentum)
            except NumericError as exc:
                raise NumericError(f"{scheme} epoch {epoch} batch {b}: {exc}") from exc
            if history["initial_loss"] is None:
                # loss of the first batch is evaluated before any update
                history["initial_loss"] = rec.loss
            total_loss += rec.loss * len(idx)
            correct += int(np.sum(rec.probs.argmax(axis=1) == y[idx]))
        loss = total_loss / len(y)
        acc = full_accuracy() if exact_accuracy else correct / len(y)
        history["loss"].append(loss)
        history["accuracy"].append(acc)
        log.debug("%s epoch %d loss %.5f acc %.4f", scheme, epoch, loss, acc)
        if stop_at_accuracy is not None and acc >= stop_at_accuracy:
            break
    params.velocity.clear()
    return TrainedNetwork(scheme, cfg, params=params, log=history, backend=backend)


def with_seed(cfg: BaseConfig, seed: int) -> BaseConfig:
    return replace(cfg, seed=seed)
