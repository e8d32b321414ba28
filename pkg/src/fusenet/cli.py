"""Command-line entry point: ``fusenet <subcommand> ...``.

Exit codes: 0 success, 1 validation failure or bad usage, 2 I/O or parse error.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import sys
import time
from pathlib import Path

import numpy as np

from fusenet import io
from fusenet.checks import gradcheck_suite
from fusenet.data import SubjectError, balanced_sample, make_folds, normalize_subject
from fusenet.evaluate import EvalError, fold_statistics, pixel_accuracy, predict_labelmap, run_crossval
from fusenet.nets import FusionScheme, SchemeError, derive_seed, train
from fusenet.phantom import PhantomError, generate_cohort
from fusenet.tensor import NumericError, ShapeError

log = logging.getLogger("fusenet")

METRIC_COLUMNS = ["scheme", "modalities", "fold", "subject", "accuracy"]
SUMMARY_COLUMNS = ["scheme", "modalities", "n", "median", "q1", "q3", "min", "max"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parser():
    p = _Parser(prog="fusenet", description="Multi-modal fusion CNNs for patch-based tumor segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("phantom", help="generate a synthetic cohort")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="train one scheme on balanced patches from the whole cohort")
    s.add_argument("--config", required=True)
    s.add_argument("--scheme", required=True, help="type1, type2, type3 or single:<modality>")
    s.add_argument("--out", required=True)

    s = sub.add_parser("crossval", help="subject-level cross-validation of the configured schemes")
    s.add_argument("--config", required=True)

    s = sub.add_parser("predict", help="heatmap and labelmap for one subject")
    s.add_argument("--model", required=True)
    s.add_argument("--subject", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", help="pixel accuracy of predicted labelmaps against cohort masks")
    s.add_argument("--maps", required=True)
    s.add_argument("--cohort", required=True)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer kind and scheme")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--instances", type=int, default=10)
    return p


def _load_cohort(rc: io.RunConfig):
    if rc.cohort is not None:
        return io.read_cohort(rc.cohort)
    return generate_cohort(rc.phantom)


def _scheme_from_arg(text: str, rc: io.RunConfig) -> FusionScheme:
    if text.startswith("single:"):
        return FusionScheme.single(text.split(":", 1)[1])
    combo = rc.combinations[0] if rc.combinations else rc.modalities
    return FusionScheme(text, combo)


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_csv(result) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for scheme, fold, subject, acc in result.rows:
        w.writerow([scheme.label, "+".join(scheme.modalities), fold, subject, _fmt(acc)])
    return buf.getvalue()


def summary_csv(result) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for scheme, m in result.summary.items():
        w.writerow([scheme.label, "+".join(scheme.modalities), len(m.accuracies),
                    *(_fmt(v) for v in (m.median, m.q1, m.q3, m.min, m.max))])
    return buf.getvalue()


def model_filename(fold: int, scheme: FusionScheme) -> str:
    return f"fold{fold}_{scheme.label.replace(':', '-')}_{'+'.join(scheme.modalities)}.model"


def cmd_phantom(args):
    rc = io.read_run_config(args.config)
    cohort = generate_cohort(rc.phantom)
    io.write_cohort(args.out, cohort)
    print(f"wrote {len(cohort)} subjects to {args.out}")


def cmd_train(args):
    rc = io.read_run_config(args.config)
    scheme = _scheme_from_arg(args.scheme, rc)
    cohort = [normalize_subject(s) for s in _load_cohort(rc)]
    samples = balanced_sample(cohort, rc.n_per_class, derive_seed(rc.seed, "train"), rc.modalities)
    net = train(scheme, samples, rc.base, rc.modalities)
    io.save_model(args.out, net)
    print(f"trained {scheme} ({net.param_count()} parameters) -> {args.out}")


def cmd_crossval(args):
    rc = io.read_run_config(args.config)
    rc.out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(rc.out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root = logging.getLogger("fusenet")
    root.addHandler(handler)
    root.setLevel(min(root.level or logging.INFO, logging.INFO))
    try:
        started = time.time()
        cohort = _load_cohort(rc)
        plan = make_folds([s.subject_id for s in cohort], rc.folds, rc.seed)
        schemes = rc.expand_schemes()
        log.info("crossval: %d subjects, %d folds, schemes %s", len(cohort), rc.folds,
                 ", ".join(map(str, schemes)))
        result = run_crossval(cohort, schemes, rc.base, plan, rc.n_per_class, keep_models=rc.save_models)
        (rc.out / "metrics.csv").write_text(metrics_csv(result))
        (rc.out / "summary.csv").write_text(summary_csv(result))
        if rc.save_models:
            (rc.out / "models").mkdir(exist_ok=True)
            for (fold, scheme), net in result.models.items():
                io.save_model(rc.out / "models" / model_filename(fold, scheme), net)
        log.info("crossval finished in %.1f s", time.time() - started)
    finally:
        root.removeHandler(handler)
        handler.close()
    for scheme, m in result.summary.items():
        print(f"{str(scheme):32s} median {m.median:.4f}  q1 {m.q1:.4f}  q3 {m.q3:.4f}  "
              f"min {m.min:.4f}  max {m.max:.4f}")


def cmd_predict(args):
    net = io.load_model(args.model)
    volume = io.read_subject(args.subject)
    lab, heat = predict_labelmap(net, normalize_subject(volume))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sid = volume.subject_id
    io.write_labelmap(out / f"{sid}_labelmap.pgm", lab)
    io.write_heatmap(out / f"{sid}_heatmap.mmimg", heat, out / f"{sid}_heatmap.pgm")
    print(f"{sid}: {int(lab.values.sum())} positive pixels of {lab.values.size} -> {out}")


def cmd_evaluate(args):
    cohort = {s.subject_id: s for s in io.read_cohort(args.cohort)}
    maps = sorted(Path(args.maps).glob("*_labelmap.pgm"))
    if not maps:
        raise FileNotFoundError(f"no *_labelmap.pgm files in {args.maps}")
    accs = []
    print("subject,accuracy")
    for path in maps:
        sid = path.name[:-len("_labelmap.pgm")]
        if sid not in cohort:
            raise EvalError(f"labelmap {path.name} has no subject {sid!r} in {args.cohort}")
        acc = pixel_accuracy(io.read_labelmap(path), cohort[sid].mask)
        accs.append(acc)
        print(f"{sid},{_fmt(acc)}")
    m = fold_statistics(accs)
    print(f"# median {m.median:.6f} q1 {m.q1:.6f} q3 {m.q3:.6f} min {m.min:.6f} max {m.max:.6f}")


def cmd_gradcheck(args):
    worst = {}
    failed = False
    for name, i, report in gradcheck_suite(args.seed, args.instances):
        for layer, err in report.layers.items():
            key = (name, layer)
            worst[key] = max(worst.get(key, 0.0), err)
        failed |= not report.passed
    for (name, layer), err in worst.items():
        print(f"{name:14s} {layer:12s} max relative error {err:.3e}")
    print("gradcheck " + ("FAILED" if failed else "passed"))
    return 1 if failed else 0


COMMANDS = {"phantom": cmd_phantom, "train": cmd_train, "crossval": cmd_crossval, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args) or 0
    except (io.ConfigError, SchemeError, SubjectError, EvalError, PhantomError, ShapeError,
            NumericError) as exc:
        print(f"fusenet {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, io.FormatError) as exc:
        print(f"fusenet {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
