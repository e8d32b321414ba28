"""File formats: MMIMG images, P5 graymaps, subject manifests, model files and run configs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from fusenet.data import SubjectVolume
from fusenet.nets import KINDS, BaseConfig, FusionScheme, SchemeError, TrainedNetwork, make_model
from fusenet.phantom import Contrast, DEFAULT_CONTRAST, PhantomConfig, PhantomError
from fusenet.tensor import ParamStore

MMIMG_MAGIC = b"MMIMG"
MODEL_MAGIC = b"FUSENET-MODEL"
MODEL_VERSION = 1
MANIFEST = "subject.txt"


class FormatError(ValueError):
    """A file does not parse; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


# MMIMG ------------------------------------------------------------------------------

def encode_image(image) -> bytes:
    img = np.asarray(image, dtype="<f8")
    if img.ndim != 2:
        raise ValueError(f"MMIMG holds 2-D images, got shape {img.shape}")
    h, w = img.shape
    return f"MMIMG 1 {w} {h}\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def decode_image(blob: bytes) -> np.ndarray:
    end = blob.find(b"\n")
    if end < 0:
        raise FormatError("MMIMG header has no terminating newline", len(blob))
    parts = blob[:end].split(b" ")
    if not parts or parts[0] != MMIMG_MAGIC:
        raise FormatError("bad magic, expected 'MMIMG'", 0)
    if len(parts) != 4 or parts[1] != b"1":
        raise FormatError(f"malformed MMIMG header {blob[:end]!r}", 0)
    try:
        w, h = int(parts[2]), int(parts[3])
    except ValueError:
        raise FormatError(f"non-integer extents in header {blob[:end]!r}", 0) from None
    if w < 1 or h < 1:
        raise FormatError(f"extents must be positive, got {w}x{h}", 0)
    start = end + 1
    need = 8 * w * h
    have = len(blob) - start
    if have != need:
        raise FormatError(f"payload is {have} bytes, expected {need}", start + min(have, need))
    return np.frombuffer(blob, dtype="<f8", count=w * h, offset=start).reshape(h, w).astype(np.float64)


def write_image(path, image) -> None:
    Path(path).write_bytes(encode_image(image))


def read_image(path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


def read_mask(path) -> np.ndarray:
    img = read_image(path)
    if not np.isin(img, (0.0, 1.0)).all():
        raise FormatError(f"{path}: mask values must be 0.0 or 1.0")
    return img.astype(np.uint8)


# P5 graymap ---------------------------------------------------------------------------

def encode_pgm(pixels) -> bytes:
    px = np.asarray(pixels)
    if px.ndim != 2 or px.min(initial=0) < 0 or px.max(initial=0) > 255:
        raise ValueError("graymap pixels must be a 2-D array in 0..255")
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.astype(np.uint8).tobytes()


def write_labelmap(path, labelmap) -> None:
    values = np.asarray(getattr(labelmap, "values", labelmap))
    Path(path).write_bytes(encode_pgm(np.where(values > 0, 255, 0)))


def write_heatmap(path, heatmap, pgm_path=None) -> None:
    """MMIMG container of the probabilities, plus an optional 0..255 graymap rendering."""
    values = np.asarray(getattr(heatmap, "values", heatmap), dtype=np.float64)
    write_image(path, values)
    if pgm_path is not None:
        Path(pgm_path).write_bytes(encode_pgm(np.rint(values * 255)))


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated graymap header", pos)
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise FormatError("bad magic, expected 'P5'", 0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-integer graymap header field", pos) from None
    if not 0 < maxval < 256:
        raise FormatError(f"only 8-bit graymaps are supported, maxval {maxval}", pos)
    pos += 1  # single whitespace byte before the raster
    if len(blob) - pos != w * h:
        raise FormatError(f"raster is {len(blob) - pos} bytes, expected {w * h}", pos)
    return np.frombuffer(blob, dtype=np.uint8, offset=pos).reshape(h, w).copy()


def read_labelmap(path) -> np.ndarray:
    return (read_pgm(path) > 127).astype(np.uint8)


# subjects ------------------------------------------------------------------------------

def parse_keyvalue(text: str, source="config") -> dict:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source} line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise FormatError(f"{source} line {lineno}: empty key")
        if key in out:
            raise FormatError(f"{source} line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


@dataclass
class SubjectManifest:
    subject_id: str
    modalities: dict
    mask: Path

    @classmethod
    def read(cls, directory) -> "SubjectManifest":
        directory = Path(directory)
        entries = parse_keyvalue((directory / MANIFEST).read_text(), str(directory / MANIFEST))
        if "subject_id" not in entries or "mask" not in entries:
            raise FormatError(f"{directory / MANIFEST}: needs subject_id and mask entries")
        mods = {k.split(".", 1)[1]: directory / v for k, v in entries.items() if k.startswith("modality.")}
        if not mods:
            raise FormatError(f"{directory / MANIFEST}: no modality.<name> entries")
        return cls(entries["subject_id"], mods, directory / entries["mask"])

    def load(self) -> SubjectVolume:
        images = {name: read_image(p) for name, p in self.modalities.items()}
        mask = read_mask(self.mask)
        for name, img in images.items():
            if img.shape != mask.shape:
                raise FormatError(f"{self.modalities[name]}: shape {img.shape} differs from mask {mask.shape}")
        return SubjectVolume(self.subject_id, images, mask)


def write_subject(directory, volume: SubjectVolume) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"subject_id = {volume.subject_id}", "mask = mask.mmimg"]
    write_image(directory / "mask.mmimg", volume.mask.astype(np.float64))
    for name, img in volume.modalities.items():
        write_image(directory / f"{name}.mmimg", img)
        lines.append(f"modality.{name} = {name}.mmimg")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    return directory


def read_subject(directory) -> SubjectVolume:
    return SubjectManifest.read(directory).load()


def write_cohort(directory, cohort) -> None:
    for volume in cohort:
        write_subject(Path(directory) / volume.subject_id, volume)


def read_cohort(directory) -> list:
    directory = Path(directory)
    subdirs = sorted(p for p in directory.iterdir() if (p / MANIFEST).is_file())
    if not subdirs:
        raise FileNotFoundError(f"no subject directories with {MANIFEST} under {directory}")
    return [read_subject(p) for p in subdirs]


# models ------------------------------------------------------------------------------------

def _expected_layout(scheme: FusionScheme, cfg: BaseConfig):
    if scheme.kind == "type3":
        single_layout = make_model(FusionScheme.single(scheme.modalities[0]), cfg).param_layout()
        return [(f"member{i}:{key}{kind}", shape)
                for i in range(scheme.k)
                for key, wshape, bshape, _, _ in single_layout
                for kind, shape in (("W", wshape), ("b", bshape))]
    return [(key + kind, shape)
            for key, wshape, bshape, _, _ in make_model(scheme, cfg).param_layout()
            for kind, shape in (("W", wshape), ("b", bshape))]


def save_model(path, net: TrainedNetwork) -> None:
    """Magic line, one-line JSON descriptor, then float64 LE parameters in declaration order."""
    if net.scheme.kind == "type3":
        tensors = [(f"member{i}:{k}", v) for i, m in enumerate(net.members) for k, v in m.params.tensors.items()]
    else:
        tensors = list(net.params.tensors.items())
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for _, v in tensors)
    descriptor = {
        "scheme": net.scheme.kind,
        "modalities": list(net.scheme.modalities),
        "config": asdict(net.cfg),
        "tensors": [[k, list(v.shape)] for k, v in tensors],
        "payload_bytes": len(payload),
        "log": net.log,
    }
    head = f"{MODEL_MAGIC.decode()} {MODEL_VERSION}\n".encode() + json.dumps(descriptor).encode() + b"\n"
    Path(path).write_bytes(head + payload)


def load_model(path) -> TrainedNetwork:
    blob = Path(path).read_bytes()
    first = blob.find(b"\n")
    if first < 0 or not blob.startswith(MODEL_MAGIC + b" "):
        raise FormatError(f"{path}: not a model file", 0)
    try:
        version = int(blob[len(MODEL_MAGIC) + 1:first])
    except ValueError:
        raise FormatError(f"{path}: unreadable version", len(MODEL_MAGIC) + 1) from None
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: model version {version}, this build reads {MODEL_VERSION}")
    second = blob.find(b"\n", first + 1)
    if second < 0:
        raise FormatError(f"{path}: descriptor is not terminated", len(blob))
    try:
        desc = json.loads(blob[first + 1:second])
        scheme = FusionScheme(desc["scheme"], tuple(desc["modalities"]))
        cfg = BaseConfig(**desc["config"])
        listed = [(k, tuple(s)) for k, s in desc["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad descriptor: {exc}", first + 1) from None
    expected = [(k, tuple(s)) for k, s in _expected_layout(scheme, cfg)]
    if listed != expected:
        bad = next(((a, b) for a, b in zip(listed, expected) if a != b), None)
        raise FormatError(f"{path}: tensor layout does not match the rebuilt {scheme} network"
                          + (f" ({bad[0]} vs expected {bad[1]})" if bad else " (tensor count differs)"))
    payload = blob[second + 1:]
    need = 8 * sum(int(np.prod(s)) for _, s in expected)
    if len(payload) != need or desc.get("payload_bytes") != need:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {need}", second + 1)
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    tensors, pos = {}, 0
    for key, shape in expected:
        n = int(np.prod(shape))
        tensors[key] = flat[pos:pos + n].reshape(shape).copy()
        pos += n
    log = desc.get("log", {})
    if scheme.kind == "type3":
        members = []
        for i, m in enumerate(scheme.modalities):
            sub = FusionScheme.single(m)
            prefix = f"member{i}:"
            store = ParamStore({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}, 0)
            members.append(TrainedNetwork(sub, cfg, params=store,
                                          log=(log.get("members") or [{}] * scheme.k)[i]))
        return TrainedNetwork(scheme, cfg, members=members, log=log)
    return TrainedNetwork(scheme, cfg, params=ParamStore(tensors, 0), log=log)


# run configuration ----------------------------------------------------------------------------

@dataclass
class RunConfig:
    cohort: Optional[Path] = None
    modalities: tuple = ()
    schemes: tuple = ("type1", "type2", "type3", "single")
    combinations: tuple = ()
    base: BaseConfig = field(default_factory=BaseConfig)
    folds: int = 10
    n_per_class: int = 1000
    out: Path = Path("fusenet-out")
    seed: int = 0
    save_models: bool = False
    phantom: Optional[PhantomConfig] = None

    def expand_schemes(self) -> list:
        """Concrete FusionSchemes: each fusion kind on every combination, singles per modality."""
        combos = self.combinations or (tuple(self.modalities),)
        out = []
        for entry in self.schemes:
            if entry.startswith("single:"):
                out.append(FusionScheme.single(entry.split(":", 1)[1]))
            elif entry == "single":
                out.extend(FusionScheme.single(m) for m in self.modalities)
            else:
                out.extend(FusionScheme(entry, c) for c in combos)
        seen, unique = set(), []
        for s in out:
            if s not in seen:
                seen.add(s)
                unique.append(s)
        return unique


_INT_KEYS = {"folds", "n_per_class", "seed", "height", "width", "cohort_size"}
_BASE_KEYS = {f.name for f in fields(BaseConfig)} - {"seed"}
_PHANTOM_KEYS = {"height", "width", "cohort_size", "semi_axis_min", "semi_axis_max", "core_fraction"}
_KNOWN = {"cohort", "modalities", "schemes", "combinations", "folds", "n_per_class", "out", "seed",
          "save_models"} | _BASE_KEYS | _PHANTOM_KEYS


def _names(value):
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _number(key, value, kind):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(key, f"expected {'an integer' if kind is int else 'a number'}, got {value!r}") from None


def build_run_config(entries: dict, base_dir: Path = Path(".")) -> RunConfig:
    """Validate flat key/value entries into a RunConfig. Errors name the offending key."""
    for key in entries:
        if key not in _KNOWN and not key.startswith(("contrast.", "corrupt.")):
            raise ConfigError(key, "unknown configuration key")
    rc = RunConfig()
    seed = _number("seed", entries.get("seed", "0"), int)
    rc.seed = seed
    if "cohort" in entries:
        rc.cohort = (base_dir / entries["cohort"]).resolve()
    if "out" in entries:
        rc.out = (base_dir / entries["out"]).resolve()
    rc.folds = _number("folds", entries.get("folds", "10"), int)
    if rc.folds < 2:
        raise ConfigError("folds", f"need at least 2 folds, got {rc.folds}")
    rc.n_per_class = _number("n_per_class", entries.get("n_per_class", "1000"), int)
    if rc.n_per_class < 1:
        raise ConfigError("n_per_class", "must be >= 1")
    rc.save_models = entries.get("save_models", "false").lower() in ("1", "true", "yes")

    base = {}
    for key in _BASE_KEYS & set(entries):
        kind = float if key in ("learning_rate", "momentum") else int
        base[key] = _number(key, entries[key], kind)
    try:
        rc.base = BaseConfig(seed=seed, **base)
    except SchemeError as exc:
        key = next((k for k in base if k in str(exc)), "config")
        raise ConfigError(key, str(exc)) from None

    contrast = {}
    for key, value in entries.items():
        if key.startswith("contrast."):
            vals = [_number(key, v, float) for v in value.split(",")]
            if len(vals) != 4:
                raise ConfigError(key, "expected 'background, tumor, core, sigma'")
            contrast[key.split(".", 1)[1]] = Contrast(*vals)
    corruption = {k.split(".", 1)[1]: v for k, v in entries.items() if k.startswith("corrupt.")}

    if "modalities" in entries:
        rc.modalities = tuple(sorted(_names(entries["modalities"])))
    elif contrast:
        rc.modalities = tuple(sorted(contrast))
    else:
        rc.modalities = tuple(sorted(DEFAULT_CONTRAST))
    if not rc.modalities:
        raise ConfigError("modalities", "modality list is empty")
    if len(set(rc.modalities)) != len(rc.modalities):
        raise ConfigError("modalities", "duplicate modality names")

    if "schemes" in entries:
        rc.schemes = _names(entries["schemes"])
    if not rc.schemes:
        raise ConfigError("schemes", "scheme list is empty")
    for entry in rc.schemes:
        kind = entry.split(":", 1)[0]
        if kind not in KINDS or (":" in entry and kind != "single"):
            raise ConfigError("schemes", f"unknown scheme {entry!r}; expected type1, type2, type3, single"
                                         " or single:<modality>")
        if entry.startswith("single:") and entry.split(":", 1)[1] not in rc.modalities:
            raise ConfigError("schemes", f"{entry!r} names a modality outside modalities {rc.modalities}")
    if "combinations" in entries:
        combos = []
        for chunk in entries["combinations"].split(";"):
            combo = tuple(sorted(m.strip() for m in chunk.split("+") if m.strip()))
            if not combo:
                continue
            missing = set(combo) - set(rc.modalities)
            if missing:
                raise ConfigError("combinations", f"{'+'.join(combo)} uses modalities {sorted(missing)} "
                                                  f"outside modalities {rc.modalities}")
            combos.append(combo)
        rc.combinations = tuple(combos)
    try:
        rc.expand_schemes()
    except SchemeError as exc:
        field_name = "combinations" if rc.combinations else "modalities"
        raise ConfigError(field_name, f"incompatible with schemes {rc.schemes}: {exc}") from None

    phantom = {}
    if _PHANTOM_KEYS & set(entries) or contrast or corruption:
        phantom_args = dict(seed=seed)
        for key in ("height", "width", "cohort_size"):
            if key in entries:
                phantom_args[key] = _number(key, entries[key], int)
        if "core_fraction" in entries:
            phantom_args["core_fraction"] = _number("core_fraction", entries["core_fraction"], float)
        lo = _number("semi_axis_min", entries.get("semi_axis_min", "8"), float)
        hi = _number("semi_axis_max", entries.get("semi_axis_max", "20"), float)
        phantom_args["semi_axes"] = (lo, hi)
        phantom_args["contrast"] = contrast or {m: DEFAULT_CONTRAST[m] for m in rc.modalities
                                               if m in DEFAULT_CONTRAST}
        phantom_args["corruption"] = corruption
        phantom = phantom_args
    try:
        rc.phantom = PhantomConfig(**phantom) if phantom else PhantomConfig(
            seed=seed, contrast={m: DEFAULT_CONTRAST[m] for m in rc.modalities if m in DEFAULT_CONTRAST}
            or dict(DEFAULT_CONTRAST))
    except PhantomError as exc:
        raise ConfigError("phantom", str(exc)) from None
    return rc


def read_run_config(path) -> RunConfig:
    path = Path(path)
    return build_run_config(parse_keyvalue(path.read_text(), str(path)), path.parent)
