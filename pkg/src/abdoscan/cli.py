"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 numeric failure.
Every subcommand accepts ``--config FILE`` (JSON object whose keys are flag
names) and writes its outputs atomically.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .cohort import (
    DEFAULT_PREVALENCE,
    TASKS,
    generate_synthetic_cohort,
    load_cohort_csv,
    records_to_rows,
    split_cohort,
    task_info,
    task_subset,
    write_cohort_csv,
)
from .errors import AbdoscanError, NumericError, ParameterError
from .features import cumulative_explained, fit_pca
from .fileio import atomic_write_text, write_json
from .geometry import extract_sequence, level_heights, load_obj, to_obj
from .metrics import bland_altman, classification_report, hidden_state_heatmap, regression_report
from .network import VARIANTS
from .persistence import ModelArtifact, load_model, save_model
from .pipeline import TrainConfig, run_ablation, run_baselines, train_hybrid
from .svg import render_bland_altman_svg, render_heatmap_svg

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class CommandOutcome:
    code: int
    artifacts: list = field(default_factory=list)
    summary: str = ""


# ---------------------------------------------------------------------------
# helpers


def _load_records(path):
    base = os.path.dirname(os.path.abspath(path))
    return [r.resolved(base) for r in load_cohort_csv(path)]


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _config_from_args(args, task=None, variant=None):
    return TrainConfig(
        task=task or args.task,
        variant=variant or getattr(args, "variant", "PCA+RNN+FC"),
        seed=args.seed,
        max_epochs=args.max_epochs,
        patience=args.patience,
        folds=args.folds,
        test_fraction=args.test_fraction,
        learning_rate=args.learning_rate,
        threshold=args.threshold,
        pos_weight=args.pos_weight,
        permute_train_labels=getattr(args, "permute_labels", False),
    )


def _eval_records(art, records, which):
    """Labelled records for the artifact's task, restricted to the test split if asked."""
    usable = task_subset(records, art.task)
    if which == "all":
        return usable
    cfg = art.config
    split = split_cohort(usable, art.task, cfg.get("test_fraction", 0.3), cfg.get("folds", 5), art.seed)
    keep = set(split.test_ids)
    return [r for r in usable if r.id in keep]


def _targets(records, task):
    name = task_info(task)[0]
    return np.array([r.outcomes[name] for r in records], dtype=np.float64)


# ---------------------------------------------------------------------------
# subcommands


def cmd_extract(args):
    mesh = load_obj(args.mesh, args.axis)
    seq = extract_sequence(mesh, args.z_low, args.z_high)
    z = level_heights(args.z_low, args.z_high)
    rows = [(k, repr(float(z[k])), repr(float(v))) for k, v in enumerate(seq.values)]
    _write_csv(args.out, ("level", "z_m", "circumference_m"), rows)
    return [args.out], f"extracted {len(rows)} levels from {args.mesh}"


def _prevalence(items):
    out = {}
    for item in items or ():
        name, sep, value = item.partition("=")
        if not sep or name not in DEFAULT_PREVALENCE:
            raise UsageError(f"--prevalence expects OUTCOME=P with OUTCOME in {sorted(DEFAULT_PREVALENCE)}")
        try:
            out[name] = float(value)
        except ValueError:
            raise UsageError(f"--prevalence value {value!r} is not a number") from None
    return out


def cmd_synth(args):
    cohort = generate_synthetic_cohort(
        args.n, _prevalence(args.prevalence), args.noise_sd, args.seed, meshes=args.meshes
    )
    os.makedirs(args.out, exist_ok=True)
    written = []
    records = cohort.records
    if args.meshes:
        mesh_dir = os.path.join(args.out, "meshes")
        os.makedirs(mesh_dir, exist_ok=True)
        new = []
        for r in records:
            rel = os.path.join("meshes", f"{r.id}.obj")
            path = os.path.join(args.out, rel)
            # written with +Z up; the CSV records that axis
            atomic_write_text(path, to_obj(cohort.meshes[r.id]))
            written.append(path)
            scans = tuple(replace(s, mesh_path=rel) for s in r.scans)
            new.append(replace(r, scans=scans))
        records = new
    csv_path = os.path.join(args.out, "cohort.csv")
    write_cohort_csv(records, csv_path)
    written.insert(0, csv_path)
    return written, f"wrote {len(records)} synthetic records to {csv_path}"


def cmd_fit_pca(args):
    records = _load_records(args.cohort)
    rows = records_to_rows(records)[:, :64]
    model = fit_pca(rows, args.k)
    write_json(
        args.out,
        {
            "k": model.k,
            "n_records": len(records),
            "mean": model.mean.tolist(),
            "components": model.components.tolist(),
            "explained_variance": model.explained_variance.tolist(),
            "explained_ratio": model.explained_ratio.tolist(),
            "cumulative_ratio": [float(v) for v in cumulative_explained(model)],
            "total_variance": model.total_variance,
        },
    )
    ratio = float(np.sum(model.explained_ratio))
    return [args.out], f"top {model.k} components explain {100 * ratio:.2f}% of variance"


def cmd_train(args):
    cfg = _config_from_args(args)
    records = _load_records(args.cohort)
    report = train_hybrid(records, cfg)
    art = ModelArtifact(report.model, cfg.task, cfg.seed, cfg.digest(), cfg.to_dict())
    save_model(art, args.out)
    write_json(args.report, report.to_dict())
    return [args.out, args.report], report.to_text().rstrip()


def cmd_evaluate(args):
    art = load_model(args.model)
    cohort = _load_records(args.cohort)
    records = _eval_records(art, cohort, args.split)
    y = _targets(records, art.task)
    out = art.model.predict_output(records_to_rows(records))
    if art.model.task_kind == "classification":
        metrics = classification_report(out, y, art.model.net.threshold).to_dict()
    else:
        metrics = regression_report(out, y).to_dict()
    result = {"task": art.task, "variant": art.model.variant, "split": args.split, "n": len(records),
              "metrics": metrics}
    if args.baselines:
        cfg = TrainConfig(**art.config)
        result["baselines"] = run_baselines(cohort, cfg)
    write_json(args.out, result)
    return [args.out], json.dumps(metrics, sort_keys=True)


def cmd_predict(args):
    art = load_model(args.model)
    records = _load_records(args.cohort)
    out = art.model.predict_output(records_to_rows(records))
    col = "probability" if art.model.task_kind == "classification" else task_info(art.task)[0]
    _write_csv(args.out, ("id", col), [(r.id, repr(float(v))) for r, v in zip(records, out)])
    return [args.out], f"wrote {len(records)} predictions"


def cmd_ablate(args):
    cfg = _config_from_args(args, variant="PCA+RNN+FC")
    table = run_ablation(_load_records(args.cohort), cfg)
    write_json(args.out, table.to_dict())
    written = [args.out]
    if args.text:
        atomic_write_text(args.text, table.to_text())
        written.append(args.text)
    return written, table.to_text().rstrip()


def cmd_heatmap(args):
    art = load_model(args.model)
    records = _eval_records(art, _load_records(args.cohort), args.split)
    matrix = hidden_state_heatmap(art.model, records_to_rows(records), _targets(records, art.task))
    render_heatmap_svg(matrix, args.out)
    written = [args.out]
    if args.json:
        write_json(args.json, matrix.to_dict())
        written.append(args.json)
    return written, f"heatmap over {sum(matrix.counts)} records (class counts {list(matrix.counts)})"


def _read_pairs(path):
    a, b = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if i == 0 and row and not _is_number(row[0]):
                continue
            if not row:
                continue
            if len(row) < 2:
                raise ParameterError(f"{path}: line {i + 1} needs two values")
            try:
                a.append(float(row[0]))
                b.append(float(row[1]))
            except ValueError:
                raise ParameterError(f"{path}: line {i + 1} is not numeric") from None
    return np.array(a), np.array(b)


def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def cmd_bland_altman(args):
    if args.pairs:
        a, b = _read_pairs(args.pairs)
        title = "Bland-Altman"
    else:
        if not (args.model and args.cohort):
            raise UsageError("bland-altman needs --pairs, or --model with --cohort")
        art = load_model(args.model)
        if art.model.task_kind != "regression":
            raise UsageError("bland-altman needs a regression model")
        records = _eval_records(art, _load_records(args.cohort), args.split)
        a = art.model.predict_output(records_to_rows(records))
        b = _targets(records, art.task)
        title = f"Bland-Altman: {art.task} predicted vs reference"
    ba = bland_altman(a, b)
    render_bland_altman_svg(ba, args.out, title=title)
    written = [args.out]
    if args.json:
        write_json(args.json, {k: v for k, v in ba.to_dict().items()})
        written.append(args.json)
    return written, f"mean diff {ba.mean_diff:.4f}, limits [{ba.lower:.4f}, {ba.upper:.4f}]"


# ---------------------------------------------------------------------------
# parser


def _training_flags(p, default_task):
    p.add_argument("--task", choices=sorted(TASKS), default=default_task)
    p.add_argument("--cohort", required=True, help="cohort CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=2000)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.add_argument("--learning-rate", type=float, default=1e-2)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--pos-weight", type=float, default=1.0)


def build_parser():
    parser = _Parser(prog="abdoscan", description="Abdominal body-scan shape modelling toolkit.")
    parser.add_argument("--version", action="version", version=f"abdoscan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file supplying flag values")
        p.set_defaults(func=func)
        return p

    p = add("extract", cmd_extract, "Extract 64 level circumferences from an OBJ mesh.")
    p.add_argument("--mesh", required=True)
    p.add_argument("--z-low", type=float, required=True)
    p.add_argument("--z-high", type=float, required=True)
    p.add_argument("--axis", default="+Y", help="vertical axis of the file (default +Y)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; extraction is deterministic")

    p = add("synth", cmd_synth, "Generate a seeded synthetic cohort (DIR/cohort.csv).")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sd", type=float, default=25.0, help="EFW noise SD in grams")
    p.add_argument("--prevalence", action="append", metavar="OUTCOME=P")
    p.add_argument("--meshes", action="store_true", help="also write OBJ meshes and reference them")
    p.add_argument("--out", required=True, help="output directory")

    p = add("fit-pca", cmd_fit_pca, "Fit circumference PCA on a cohort.")
    p.add_argument("--cohort", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; PCA is deterministic")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "Train a network with split, cross-validation and retrain.")
    _training_flags(p, "gdm")
    p.add_argument("--variant", choices=VARIANTS, default="PCA+RNN+FC")
    p.add_argument("--permute-labels", action="store_true", help="label-permutation control")
    p.add_argument("--out", default="model.json")
    p.add_argument("--report", default="report.json")

    p = add("evaluate", cmd_evaluate, "Score a saved model on a cohort.")
    p.add_argument("--model", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--baselines", action="store_true", help="also run the baseline models")
    p.add_argument("--seed", type=int, default=0, help="unused; the split seed comes from the model")
    p.add_argument("--out", default="evaluation.json")

    p = add("predict", cmd_predict, "Write per-participant predictions.")
    p.add_argument("--model", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--seed", type=int, default=0, help="unused; prediction is deterministic")
    p.add_argument("--out", default="predictions.csv")

    p = add("ablate", cmd_ablate, "Train all five network variants on one split.")
    _training_flags(p, "efw")
    p.add_argument("--out", default="ablation.json")
    p.add_argument("--text", help="also write the aligned-column table here")

    p = add("heatmap", cmd_heatmap, "Render per-class hidden-state heatmaps as SVG.")
    p.add_argument("--model", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--seed", type=int, default=0, help="unused; the split seed comes from the model")
    p.add_argument("--json", help="also write the matrix as JSON")
    p.add_argument("--out", default="heatmap.svg")

    p = add("bland-altman", cmd_bland_altman, "Render a Bland-Altman plot as SVG.")
    p.add_argument("--pairs", help="CSV of (a, b) pairs")
    p.add_argument("--model")
    p.add_argument("--cohort")
    p.add_argument("--split", choices=("test", "all"), default="test")
    p.add_argument("--seed", type=int, default=0, help="unused; the split seed comes from the model")
    p.add_argument("--json", help="also write the statistics as JSON")
    p.add_argument("--out", default="bland_altman.svg")
    return parser


def _config_path(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """A ``--config`` file supplies defaults for the subcommand; explicit flags win."""
    path = _config_path(argv)
    subs = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subs), None)
    if path and command:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config {path}: invalid JSON ({exc})") from None
        if not isinstance(cfg, dict):
            raise UsageError("--config must hold a JSON object")
        sub = subs[command]
        dests = {a.dest for a in sub._actions} - {"help", "config"}
        defaults = {}
        for key, value in cfg.items():
            dest = key.lstrip("-").replace("-", "_")
            if dest not in dests:
                raise UsageError(f"--config: unknown option {key!r} for {command}")
            defaults[dest] = value
        sub.set_defaults(**defaults)
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
    return parser.parse_args(argv)


def run(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        written, summary = args.func(args)
    except SystemExit as exc:  # --help / --version
        return CommandOutcome(int(exc.code or 0))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CommandOutcome(EXIT_USAGE, summary=str(exc))
    except NumericError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return CommandOutcome(EXIT_NUMERIC, summary=str(exc))
    except (AbdoscanError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return CommandOutcome(EXIT_DATA, summary=str(exc))
    print(summary)
    return CommandOutcome(EXIT_OK, list(written), summary)


def main(argv=None):
    return run(argv).code


if __name__ == "__main__":
    sys.exit(main())
