"""Full-image prediction, thresholding, majority vote and accuracy statistics."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from fusenet.data import FoldPlan, SubjectVolume, balanced_sample, normalize_subject, padded_stack, \
    stack_samples
from fusenet.nets import BaseConfig, FusionScheme, SchemeError, TrainedNetwork, derive_seed, train_arrays

log = logging.getLogger(__name__)


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class Heatmap:
    subject_id: str
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or not np.all((v >= 0) & (v <= 1)):
            raise EvalError(f"heatmap for {self.subject_id} must be 2-D with values in [0, 1]")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class Labelmap:
    subject_id: str
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or not np.isin(v, (0, 1)).all():
            raise EvalError(f"labelmap for {self.subject_id} must be 2-D binary")
        object.__setattr__(self, "values", v.astype(np.uint8))


def predict_heatmap(net: TrainedNetwork, volume: SubjectVolume) -> Heatmap:
    """Positive-class probability at every pixel, each from the patch centered on it.

    ``volume`` is used as given; normalize it first the way the training
    subjects were normalized.
    """
    if net.scheme.kind == "type3":
        raise SchemeError("type3 has no single heatmap: predict each member, threshold, then majority_vote")
    h, w = volume.shape
    probs = net.predict_image(padded_stack(volume, net.scheme.modalities), h, w)
    return Heatmap(volume.subject_id, probs[:, 1].reshape(h, w))


def threshold(heatmap: Heatmap, tau: float = 0.5) -> Labelmap:
    """Positive iff probability > tau (strictly)."""
    if not 0 < tau < 1:
        raise EvalError(f"threshold must lie in (0, 1), got {tau}")
    return Labelmap(heatmap.subject_id, (heatmap.values > tau).astype(np.uint8))


def majority_vote(labelmaps: Sequence[Labelmap], heatmaps: Optional[Sequence[Heatmap]] = None) -> Labelmap:
    """Per-pixel strict majority; exact ties go positive iff the mean member probability > 0.5."""
    k = len(labelmaps)
    if k < 2:
        raise EvalError(f"majority vote needs at least 2 labelmaps, got {k}")
    shape = labelmaps[0].values.shape
    subject = labelmaps[0].subject_id
    for m in labelmaps:
        if m.values.shape != shape or m.subject_id != subject:
            raise EvalError(f"labelmap {m.subject_id} {m.values.shape} does not match {subject} {shape}")
    votes = np.sum([m.values for m in labelmaps], axis=0, dtype=np.int64)
    out = (2 * votes > k).astype(np.uint8)
    tie = 2 * votes == k
    if tie.any():
        if heatmaps is None or len(heatmaps) != k:
            raise EvalError("an even vote has ties; the k member heatmaps are needed to break them")
        for hm in heatmaps:
            if hm.values.shape != shape or hm.subject_id != subject:
                raise EvalError(f"heatmap {hm.subject_id} {hm.values.shape} does not match {subject} {shape}")
        mean = np.mean([hm.values for hm in heatmaps], axis=0)
        out[tie] = (mean[tie] > 0.5).astype(np.uint8)
    return Labelmap(subject, out)


def predict_labelmap(net: TrainedNetwork, volume: SubjectVolume):
    """(labelmap, heatmap) for any scheme; for type3 the heatmap is the member mean."""
    if net.scheme.kind != "type3":
        hm = predict_heatmap(net, volume)
        return threshold(hm), hm
    heat = [predict_heatmap(m, volume) for m in net.members]
    lab = majority_vote([threshold(hm) for hm in heat], heat)
    return lab, Heatmap(volume.subject_id, np.mean([hm.values for hm in heat], axis=0))


def pixel_accuracy(labelmap, mask) -> float:
    a = np.asarray(getattr(labelmap, "values", labelmap))
    b = np.asarray(getattr(mask, "values", mask))
    if a.shape != b.shape:
        raise EvalError(f"labelmap shape {a.shape} does not match mask shape {b.shape}")
    return float(np.count_nonzero(a == b) / a.size)


@dataclass(frozen=True)
class FoldMetrics:
    accuracies: tuple
    median: float
    q1: float
    q3: float
    min: float
    max: float


def fold_statistics(accuracies: Sequence[float]) -> FoldMetrics:
    """Box statistics; quartiles by inclusive linear interpolation between order statistics."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise EvalError("fold_statistics needs at least one accuracy")
    q1, med, q3 = np.quantile(acc, [0.25, 0.5, 0.75], method="linear")
    return FoldMetrics(tuple(acc.tolist()), float(med), float(q1), float(q3), float(acc.min()), float(acc.max()))


# cross-validation --------------------------------------------------------------

@dataclass
class CrossvalResult:
    """Per-subject accuracy rows plus the box-statistics summary per scheme."""

    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    audit: list = field(default_factory=list)

    def medians(self) -> dict:
        return {k: m.median for k, m in self.summary.items()}


def cohort_modalities(cohort: Sequence[SubjectVolume]) -> tuple:
    mods = set(cohort[0].modality_names)
    for s in cohort[1:]:
        mods &= set(s.modality_names)
    return tuple(sorted(mods))


def _run_fold(fold, train_ids, test_ids, by_id, schemes, cfg, n_per_class, keep_models):
    train_subjects = [by_id[s] for s in train_ids]
    test_subjects = [by_id[s] for s in test_ids]
    mods = cohort_modalities(train_subjects + test_subjects)
    samples = balanced_sample(train_subjects, n_per_class, derive_seed(cfg.seed, f"fold{fold}"), mods)
    sampled_ids = {s.subject_id for s in samples}
    leaked = sampled_ids & set(test_ids)
    if leaked:
        raise EvalError(f"fold {fold}: test subjects {sorted(leaked)} leaked into the training patches")
    x, y = stack_samples(samples)
    del samples
    trained, heat = {}, {}

    def get(scheme):
        if scheme not in trained:
            if scheme.kind == "type3":
                members = [get(FusionScheme.single(m)) for m in scheme.modalities]
                trained[scheme] = TrainedNetwork(scheme, cfg, members=members,
                                                 log={"members": [m.log for m in members]})
            else:
                log.info("fold %d: training %s on %d patches", fold, scheme, len(y))
                trained[scheme] = train_arrays(scheme, x, y, cfg, mods)
        return trained[scheme]

    def heatmap(scheme, subject):
        key = (scheme, subject.subject_id)
        if key not in heat:
            heat[key] = predict_heatmap(get(scheme), subject)
        return heat[key]

    rows = []
    for scheme in schemes:
        for subject in test_subjects:
            if scheme.kind == "type3":
                hms = [heatmap(FusionScheme.single(m), subject) for m in scheme.modalities]
                lab = majority_vote([threshold(h) for h in hms], hms)
            else:
                lab = threshold(heatmap(scheme, subject))
            rows.append((scheme, fold, subject.subject_id, pixel_accuracy(lab, subject.mask)))
    audit = (fold, tuple(sorted(sampled_ids)), tuple(test_ids))
    models = {(fold, s): get(s) for s in schemes} if keep_models else {}
    return rows, audit, models


def _threads() -> int:
    raw = os.environ.get("FUSENET_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise EvalError(f"FUSENET_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise EvalError(f"FUSENET_THREADS must be a positive integer, got {raw!r}")
    return n


def run_crossval(cohort: Sequence[SubjectVolume], schemes: Sequence[FusionScheme], cfg: BaseConfig,
                 plan: FoldPlan, n_per_class: int, *, normalize: bool = True,
                 keep_models: bool = False) -> CrossvalResult:
    """Subject-level cross-validation of every scheme on the same per-fold patch set.

    Each fold draws one balanced training set from its training subjects, trains
    every scheme on it, and scores each test subject by pixel accuracy.
    Type-III members are the same networks as the single-modality schemes of
    the fold, so they are trained once and shared.
    """
    if not schemes:
        raise EvalError("no schemes to evaluate")
    ids = [s.subject_id for s in cohort]
    if set(ids) != set(plan.assignment):
        raise EvalError("fold plan does not cover exactly the cohort")
    vols = [normalize_subject(s) for s in cohort] if normalize else list(cohort)
    mods = cohort_modalities(vols)
    for scheme in schemes:
        missing = set(scheme.modalities) - set(mods)
        if missing:
            raise EvalError(f"scheme {scheme} needs modalities {sorted(missing)} absent from the cohort")
    by_id = {s.subject_id: s for s in vols}
    jobs = [(f, plan.train_subjects(f), plan.test_subjects(f)) for f in range(plan.n_folds)]
    workers = min(_threads(), len(jobs))
    args = [(f, tr, te, by_id, list(schemes), cfg, n_per_class, keep_models) for f, tr, te in jobs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_fold, *zip(*args)))
    else:
        outputs = [_run_fold(*a) for a in args]

    result = CrossvalResult()
    # joined in fold order so tables do not depend on worker scheduling
    for rows, audit, models in outputs:
        result.rows.extend(rows)
        result.audit.append(audit)
        result.models.update(models)
    for scheme in schemes:
        accs = [acc for s, _, _, acc in result.rows if s == scheme]
        result.summary[scheme] = fold_statistics(accs)
    return result
