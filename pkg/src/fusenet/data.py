"""Subjects, patches, balanced sampling and subject-level folds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

PATCH = 28
HALF = PATCH // 2  # 0-based row/col of the patch center

POSITIVE, NEGATIVE = 1, 0


class SubjectError(ValueError):
    pass


@dataclass(frozen=True)
class SubjectVolume:
    """Co-registered per-modality 2-D images plus a binary tumor mask."""

    subject_id: str
    modalities: Mapping[str, np.ndarray]
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.ndim != 2:
            raise SubjectError(f"{self.subject_id}: mask must be 2-D, got shape {mask.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise SubjectError(f"{self.subject_id}: mask values must be 0 or 1")
        images = {}
        for name in sorted(self.modalities):
            img = np.asarray(self.modalities[name], dtype=np.float64)
            if img.shape != mask.shape:
                raise SubjectError(f"{self.subject_id}: modality {name} has shape {img.shape}, "
                                   f"mask has {mask.shape}")
            images[name] = img
        object.__setattr__(self, "modalities", images)
        object.__setattr__(self, "mask", mask.astype(np.uint8))

    @property
    def shape(self):
        return self.mask.shape

    @property
    def modality_names(self):
        return tuple(self.modalities)

    def stack(self, names: Sequence[str]) -> np.ndarray:
        """h x w x k array of the named modality planes, in the given order."""
        missing = [n for n in names if n not in self.modalities]
        if missing:
            raise SubjectError(f"{self.subject_id}: missing modalities {missing}")
        return np.stack([self.modalities[n] for n in names], axis=-1)


@dataclass(frozen=True)
class PatchSample:
    subject_id: str
    center: tuple
    patch: np.ndarray
    label: int


def normalize_subject(volume: SubjectVolume) -> SubjectVolume:
    """Z-score each modality image independently; constant images become zeros."""
    out = {}
    for name, img in volume.modalities.items():
        sd = img.std()
        out[name] = np.zeros_like(img) if sd == 0 else (img - img.mean()) / sd
    return SubjectVolume(volume.subject_id, out, volume.mask)


def padded_stack(volume: SubjectVolume, modalities: Sequence[str]) -> np.ndarray:
    """Modality stack mirror-padded by the patch half-size on every side."""
    stack = volume.stack(modalities)
    return np.pad(stack, ((HALF, HALF), (HALF, HALF), (0, 0)), mode="reflect")


def _check_center(volume, center):
    r, c = center
    h, w = volume.shape
    if not (0 <= r < h and 0 <= c < w):
        raise SubjectError(f"center {center} outside image of shape {volume.shape}")


def extract_patch(volume: SubjectVolume, center, modalities: Sequence[str]) -> np.ndarray:
    """28 x 28 x k window whose (14, 14) pixel sits on ``center``."""
    _check_center(volume, center)
    r, c = center
    return padded_stack(volume, modalities)[r:r + PATCH, c:c + PATCH].copy()


def patches_at(padded: np.ndarray, rows, cols) -> np.ndarray:
    """Batch of patches from a pre-padded stack for arrays of centers."""
    windows = np.lib.stride_tricks.sliding_window_view(padded, (PATCH, PATCH), axis=(0, 1))
    # sliding_window_view puts the window axes last: (H, W, k, 28, 28)
    return windows[np.asarray(rows), np.asarray(cols)].transpose(0, 2, 3, 1)


def label_patch(volume: SubjectVolume, center) -> int:
    _check_center(volume, center)
    return POSITIVE if volume.mask[center[0], center[1]] == 1 else NEGATIVE


def enumerate_patches(volume: SubjectVolume, modalities: Sequence[str] | None = None) -> Iterator[PatchSample]:
    """One PatchSample per pixel in row-major center order."""
    names = list(modalities or volume.modality_names)
    padded = padded_stack(volume, names)
    h, w = volume.shape
    for r in range(h):
        for c in range(w):
            yield PatchSample(volume.subject_id, (r, c), padded[r:r + PATCH, c:c + PATCH].copy(),
                              int(volume.mask[r, c]))


def balanced_sample(subjects: Sequence[SubjectVolume], n_per_class: int, seed: int,
                    modalities: Sequence[str] | None = None) -> list[PatchSample]:
    """``n_per_class`` positives and negatives drawn without replacement from the pooled pixels.

    Negatives come first, then positives; each group is in pooled
    (subject, row-major pixel) order.
    """
    if not subjects:
        raise SubjectError("balanced_sample needs at least one subject")
    names = list(modalities or subjects[0].modality_names)
    rng = np.random.Generator(np.random.PCG64(seed))
    pools = {}
    for label in (NEGATIVE, POSITIVE):
        idx = [np.column_stack([np.full(np.count_nonzero(s.mask == label), i),
                                *np.nonzero(s.mask == label)])
               for i, s in enumerate(subjects)]
        pools[label] = np.concatenate(idx) if idx else np.zeros((0, 3), int)
    for label, pool in pools.items():
        if len(pool) < n_per_class:
            name = "positive" if label == POSITIVE else "negative"
            raise SubjectError(f"not enough {name} patches: need {n_per_class}, have {len(pool)}")
    samples = []
    for label in (NEGATIVE, POSITIVE):
        pool = pools[label]
        chosen = np.sort(rng.choice(len(pool), size=n_per_class, replace=False))
        picked = pool[chosen]
        for i in np.unique(picked[:, 0]):
            s = subjects[i]
            sel = picked[picked[:, 0] == i]
            batch = patches_at(padded_stack(s, names), sel[:, 1], sel[:, 2])
            for (_, r, c), patch in zip(sel, batch):
                samples.append(PatchSample(s.subject_id, (int(r), int(c)), patch, label))
    return samples


def stack_samples(samples: Sequence[PatchSample]):
    """(n x 28 x 28 x k patches, n labels) arrays."""
    x = np.stack([s.patch for s in samples])
    y = np.array([s.label for s in samples], dtype=np.intp)
    return x, y


@dataclass(frozen=True)
class FoldPlan:
    assignment: dict
    n_folds: int

    def test_subjects(self, fold: int) -> list:
        return [s for s, f in self.assignment.items() if f == fold]

    def train_subjects(self, fold: int) -> list:
        return [s for s, f in self.assignment.items() if f != fold]

    def folds(self):
        return [(self.train_subjects(i), self.test_subjects(i)) for i in range(self.n_folds)]


def make_folds(subject_ids: Sequence[str], n_folds: int, seed: int) -> FoldPlan:
    """Seeded shuffle of subjects followed by round-robin fold assignment."""
    ids = list(subject_ids)
    if n_folds < 2:
        raise SubjectError(f"need at least 2 folds, got {n_folds}")
    if n_folds > len(ids):
        raise SubjectError(f"{n_folds} folds requested for only {len(ids)} subjects")
    if len(set(ids)) != len(ids):
        raise SubjectError("subject ids must be unique")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(ids))
    assignment = {ids[j]: pos % n_folds for pos, j in enumerate(order)}
    return FoldPlan({s: assignment[s] for s in ids}, n_folds)
