"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict (criterion number, PASS/FAIL, the measured
quantities and the wall time) that ``conftest.py`` prints in the terminal
summary, then asserts. Tolerances and time budgets are fixed constants below.
"""
import json
import math
import time
from dataclasses import replace
from itertools import product

import numpy as np
import pytest

from abdoscan import geometry, metrics, network, nn
from abdoscan.cli import main
from abdoscan.cohort import generate_synthetic_cohort, load_cohort_csv, records_to_rows, task_subset
from abdoscan.features import cumulative_explained, fit_pca
from abdoscan.persistence import ModelArtifact, load_model, save_model
from abdoscan.pipeline import TrainConfig, train_hybrid

RESULTS = []

VARIANT_ORDER = ["FC", "PCA+FC", "RNN+FC", "PCA+GRU+FC", "PCA+RNN+FC"]


def _verdict(number, title, ok, detail, started, budget=None):
    elapsed = time.perf_counter() - started
    in_time = budget is None or elapsed < budget
    status = "PASS" if ok and in_time else "FAIL"
    limit = f" (budget {budget:g}s)" if budget is not None else ""
    RESULTS.append((number, f"criterion {number:>2} {status}  {title}: {detail}  [{elapsed:.2f}s{limit}]"))
    return ok and in_time


# ---------------------------------------------------------------------------
# 1. geometry


def test_criterion_01_geometry_oracle():
    t0 = time.perf_counter()
    worst_smooth, worst_exact = 0.0, 0.0
    # tessellated solids: analytic perimeters within 1e-3 relative
    r = 0.15
    cyl = geometry.lathe_mesh(np.array([0.0, 1.0]), np.array([r, r]), 256)
    seq = geometry.extract_sequence(cyl, 0.1, 0.9).values
    worst_smooth = max(worst_smooth, float(np.max(np.abs(seq - 2 * math.pi * r) / (2 * math.pi * r))))
    sphere = geometry.uv_sphere_mesh(1.0, segments=256, rings=128)
    for z in (-0.6, -0.3, 0.0, 0.3, 0.6):
        p = geometry.slice_at_height(sphere, z).perimeters[0]
        exact = 2 * math.pi * math.sqrt(1 - z * z)
        worst_smooth = max(worst_smooth, abs(p - exact) / exact)
    # polyhedral cases: exact up to 1e-9
    cube = geometry.box_mesh()
    for z in (0.1, 0.5, 0.9):
        worst_exact = max(worst_exact, abs(geometry.slice_at_height(cube, z).perimeters[0] - 4.0) / 4.0)
    n = 64
    polygon = geometry.lathe_mesh(np.array([0.0, 1.0]), np.array([1.0, 1.0]), n)
    exact = 2 * n * math.sin(math.pi / n)
    worst_exact = max(worst_exact, abs(geometry.slice_at_height(polygon, 0.37).perimeters[0] - exact) / exact)
    ok = worst_smooth < 1e-3 and worst_exact < 1e-9
    detail = f"max rel err tessellated {worst_smooth:.2e} (<1e-3), polyhedral {worst_exact:.2e} (<1e-9)"
    assert _verdict(1, "geometry oracle", ok, detail, t0, budget=10)


# ---------------------------------------------------------------------------
# 2. gradients


def test_criterion_02_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    seq = rng.normal(0, 1, (4, 64)).cumsum(axis=1) * 0.2
    X = np.hstack([seq, rng.normal(size=(4, 6))])
    worst = {}
    for variant, task in product(VARIANT_ORDER, network.TASK_KINDS):
        arch = network.Architecture(variant, task)
        prng = np.random.default_rng([3, VARIANT_ORDER.index(variant)])
        params = {k: prng.normal(0, 0.5, v.shape) for k, v in network.init_params(arch, prng).items()}
        y = np.array([0.0, 1.0, 1.0, 0.0]) if task == "classification" else rng.normal(size=4)
        _, grads = network.loss_and_grads(arch, params, network.init_stats(arch), X, y)

        def loss(p, arch=arch, y=y):
            return network.batch_loss(arch, p, network.init_stats(arch), X, y)

        err = nn.grad_check(loss, params, grads, eps=1e-5)
        worst[variant] = max(worst.get(variant, 0.0), err)
    ok = all(e < 1e-4 for e in worst.values())
    detail = ", ".join(f"{v} {e:.1e}" for v, e in worst.items()) + " (<1e-4)"
    assert _verdict(2, "gradient suite", ok, detail, t0, budget=30)


# ---------------------------------------------------------------------------
# 3. PCA


def test_criterion_03_pca_oracle():
    t0 = time.perf_counter()
    worst_val, worst_vec = 0.0, 0.0
    for n in (20, 50):
        x = np.random.default_rng(n).normal(size=(n, 64))
        model = fit_pca(x, 3)
        c = x - x.mean(axis=0)
        w, v = np.linalg.eigh(c.T @ c / (n - 1))
        idx = np.argsort(w)[::-1][:3]
        worst_val = max(worst_val, float(np.max(np.abs(model.explained_variance - w[idx]) / w[idx])))
        for comp, ref in zip(model.components, v[:, idx].T):
            ref = ref if ref[np.argmax(np.abs(ref))] > 0 else -ref
            worst_vec = max(worst_vec, float(np.max(np.abs(comp - ref))))
    ratios = model.explained_ratio
    prefix_exact = cumulative_explained(model).tolist() == [sum(ratios[: i + 1].tolist()) for i in range(3)]
    ok = worst_val < 1e-8 and worst_vec < 1e-8 and prefix_exact
    detail = f"eigenvalue rel err {worst_val:.1e}, component err {worst_vec:.1e} (<1e-8), prefix sums exact={prefix_exact}"
    assert _verdict(3, "PCA oracle", ok, detail, t0, budget=5)


# ---------------------------------------------------------------------------
# 4. metrics


def test_criterion_04_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    p, t = rng.normal(380, 60, 80), rng.normal(380, 60, 80)
    rep = metrics.regression_report(p, t)
    n = len(t)
    naive = {
        "mae": sum(abs(a - b) for a, b in zip(p, t)) / n,
        "rmse": (sum((a - b) ** 2 for a, b in zip(p, t)) / n) ** 0.5,
        "mape": 100 * sum(abs((a - b) / b) for a, b in zip(p, t)) / n,
        "rmspe": 100 * (sum(((a - b) / b) ** 2 for a, b in zip(p, t)) / n) ** 0.5,
    }
    reg_err = max(abs(getattr(rep, k) - v) / max(1.0, abs(v)) for k, v in naive.items())
    acc_ok = all(
        rep.acc_at[m] == sum(1 for a, b in zip(p, t) if abs((a - b) / b) < m) / n for m in (0.1, 0.05)
    )
    auc_exact = 0
    for _ in range(200):
        k = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, k)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 8, k) / 7.0
        pos, neg = scores[labels == 1], scores[labels == 0]
        brute = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg) / (len(pos) * len(neg))
        auc_exact += metrics.auc_mann_whitney(scores, labels)[0] == brute
    conf = metrics.classification_report([1.0] * 4 + [0.0] * 6, [1, 1, 1, 0, 1, 1, 0, 0, 0, 0])
    f1_ok = (conf.tp, conf.fp, conf.fn, conf.tn) == (3, 1, 2, 4) and abs(conf.f1 - 0.6667) < 1e-4
    ok = reg_err < 1e-12 and acc_ok and auc_exact == 200 and f1_ok
    detail = (f"regression max err {reg_err:.1e} (<1e-12), Acc exact={acc_ok}, AUC exact {auc_exact}/200, "
              f"F1 {conf.f1:.4f}")
    assert _verdict(4, "metric oracles", ok, detail, t0, budget=5)


# ---------------------------------------------------------------------------
# 5. Bland-Altman


def test_criterion_05_bland_altman():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    a = rng.normal(size=10000)
    b = a - rng.normal(0.2, 1.0, 10000)
    ba = metrics.bland_altman(a, b)
    d = a - b
    sd = math.sqrt(sum((x - d.mean()) ** 2 for x in d) / (len(d) - 1))
    lim_err = max(abs(ba.upper - (d.mean() + 1.96 * sd)), abs(ba.lower - (d.mean() - 1.96 * sd)))
    cover = float(np.mean((d >= ba.lower) & (d <= ba.upper)))
    ok = lim_err < 1e-9 and 0.94 <= cover <= 0.96
    detail = f"limit err {lim_err:.1e} (<1e-9), coverage {cover:.4f} in [0.94, 0.96]"
    assert _verdict(5, "Bland-Altman", ok, detail, t0, budget=5)


# ---------------------------------------------------------------------------
# 6. end-to-end learnability through the CLI


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("accept")
    assert main(["synth", "--n", "200", "--seed", "7", "--out", str(d / "cohort")]) == 0
    return d


def test_criterion_06_synthetic_learnability(synth_dir):
    t0 = time.perf_counter()
    cohort = str(synth_dir / "cohort" / "cohort.csv")

    def train(name, *extra):
        code = main(["train", "--cohort", cohort, "--seed", "7", *extra,
                     "--out", str(synth_dir / f"{name}.json"), "--report", str(synth_dir / f"{name}_report.json")])
        assert code == 0
        return json.loads((synth_dir / f"{name}_report.json").read_text())["test_metrics"]

    real = train("gdm", "--task", "gdm", "--variant", "PCA+RNN+FC")
    control = train("gdm_permuted", "--task", "gdm", "--variant", "PCA+RNN+FC", "--permute-labels")
    efw = train("efw", "--task", "efw", "--variant", "PCA+RNN+FC")
    gap = real["auc"] - control["auc"]
    ok = real["auc"] >= 0.85 and gap >= 0.25 and efw["mape"] < 10
    detail = (f"GDM test AUC {real['auc']:.4f} (>=0.85), permuted control {control['auc']:.4f}, "
              f"gap {gap:.4f} (>=0.25), EFW MAPE {efw['mape']:.2f}% (<10%)")
    assert _verdict(6, "synthetic learnability", ok, detail, t0, budget=300)


# ---------------------------------------------------------------------------
# 7. ablation ordering


def test_criterion_07_ablation_ordering(synth_dir):
    t0 = time.perf_counter()
    out = synth_dir / "table.json"
    assert main(["ablate", "--task", "efw", "--cohort", str(synth_dir / "cohort" / "cohort.csv"), "--seed", "7",
                 "--out", str(out)]) == 0
    rows = json.loads(out.read_text())["rows"]
    order = [r["variant"] for r in rows]
    mae = {r["variant"]: r["MAE"] for r in rows}
    ok = order == VARIANT_ORDER and mae["PCA+RNN+FC"] <= mae["PCA+FC"] and mae["PCA+RNN+FC"] <= mae["RNN+FC"]
    detail = (f"rows {order == VARIANT_ORDER and 'in order' or order}; MAE PCA+RNN+FC {mae['PCA+RNN+FC']:.4f} "
              f"vs PCA+FC {mae['PCA+FC']:.4f}, RNN+FC {mae['RNN+FC']:.4f}")
    assert _verdict(7, "ablation ordering", ok, detail, t0, budget=600)


# ---------------------------------------------------------------------------
# 8. determinism of every command


def _run_all(root):
    quick = ["--max-epochs", "15", "--patience", "5", "--folds", "3", "--seed", "3"]
    # mesh slicing is exercised on a small cohort; the learners run on plain sequences
    m, c = root / "meshes", root / "cohort"
    assert main(["synth", "--n", "10", "--seed", "3", "--meshes", "--out", str(m)]) == 0
    assert main(["synth", "--n", "40", "--seed", "3", "--prevalence", "gdm=0.3", "--out", str(c)]) == 0
    first = load_cohort_csv(m / "cohort.csv")[0].scans[0]
    cmds = [
        ["extract", "--mesh", str(m / first.mesh_path), "--z-low", repr(first.z_low), "--z-high", repr(first.z_high),
         "--axis", first.axis, "--out", str(root / "seq.csv")],
        ["fit-pca", "--cohort", str(m / "cohort.csv"), "--out", str(root / "pca.json")],
        ["train", "--task", "gdm", "--cohort", str(c / "cohort.csv"), *quick,
         "--out", str(root / "gdm.json"), "--report", str(root / "gdm_report.json")],
        ["train", "--task", "efw", "--cohort", str(c / "cohort.csv"), *quick,
         "--out", str(root / "efw.json"), "--report", str(root / "efw_report.json")],
        ["evaluate", "--model", str(root / "gdm.json"), "--cohort", str(c / "cohort.csv"), "--baselines",
         "--out", str(root / "evaluation.json")],
        ["predict", "--model", str(root / "efw.json"), "--cohort", str(c / "cohort.csv"),
         "--out", str(root / "predictions.csv")],
        ["heatmap", "--model", str(root / "gdm.json"), "--cohort", str(c / "cohort.csv"), "--split", "all",
         "--out", str(root / "heatmap.svg"), "--json", str(root / "heatmap.json")],
        ["bland-altman", "--model", str(root / "efw.json"), "--cohort", str(c / "cohort.csv"),
         "--out", str(root / "ba.svg"), "--json", str(root / "ba.json")],
        ["ablate", "--task", "efw", "--cohort", str(c / "cohort.csv"), *quick,
         "--out", str(root / "ablation.json"), "--text", str(root / "ablation.txt")],
    ]
    for cmd in cmds:
        assert main(cmd) == 0, cmd
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_08_determinism(tmp_path):
    t0 = time.perf_counter()
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    first, second = _run_all(tmp_path / "a"), _run_all(tmp_path / "b")
    differing = sorted(k for k in first if first[k] != second.get(k))
    ok = set(first) == set(second) and not differing
    detail = f"{len(first)} artifacts from 9 subcommands, {len(differing)} differ" + (
        f" ({differing[:3]})" if differing else ""
    )
    assert _verdict(8, "determinism", ok, detail, t0)


# ---------------------------------------------------------------------------
# 9. leakage guard


def test_criterion_09_leakage_guard(synth_dir):
    t0 = time.perf_counter()
    records = load_cohort_csv(synth_dir / "cohort" / "cohort.csv")
    cfg = TrainConfig(task="gdm", seed=7, max_epochs=20, patience=5)
    base = train_hybrid(records, cfg)
    test_ids = set(base.test_ids)
    rng = np.random.default_rng(9)
    mutated = []
    for r in records:
        if r.id in test_ids:
            seq = r.sequence * rng.uniform(0.3, 3.0, 64)
            r = replace(r, scans=(replace(r.scans[0], sequence=seq),))
        mutated.append(r)
    changed = sum(
        not np.array_equal(a.sequence, b.sequence) for a, b in zip(records, mutated)
    )
    after = train_hybrid(mutated, cfg)
    ok = after.fingerprint == base.fingerprint and changed == len(test_ids)
    detail = f"{changed} test sequences mutated; featurizer hash {base.fingerprint[:12]} -> {after.fingerprint[:12]}"
    assert _verdict(9, "leakage guard", ok, detail, t0)


# ---------------------------------------------------------------------------
# 10. persistence


def test_criterion_10_persistence(tmp_path):
    t0 = time.perf_counter()
    records = generate_synthetic_cohort(n=80, seed=10).records
    cfg = TrainConfig(task="efw", seed=10, max_epochs=30, patience=5, folds=3)
    rep = train_hybrid(records, cfg)
    path = tmp_path / "model.json"
    save_model(ModelArtifact(rep.model, "efw", cfg.seed, cfg.digest(), cfg.to_dict()), path)
    loaded = load_model(path)
    rng = np.random.default_rng(10)
    base = records_to_rows(task_subset(records, "efw"))
    X = base[rng.integers(0, len(base), 100)] * rng.uniform(0.95, 1.05, (100, base.shape[1]))
    before, after = rep.model.predict_output(X), loaded.model.predict_output(X)
    equal = int(np.sum(before.view(np.uint64) == after.view(np.uint64)))
    ok = equal == 100
    assert _verdict(10, "persistence", ok, f"{equal}/100 outputs bitwise equal after save/load", t0)
