"""Acceptance criteria, one test each, run at their stated tolerances.

Every test records a one-line verdict; ``conftest.py`` prints them in the
terminal summary so the outcome is visible even without ``-s``.
"""

import csv
import filecmp
import math
import time
from pathlib import Path

import numpy as np
import pytest

from apanet import cli
from apanet.attention import HeadParams, attention_forward, init_head_params
from apanet.core import RegionalFeatureSet, load_descriptor_table, make_rng
from apanet.evaluate import recall_at_n
from apanet.gradcheck import run_suite
from apanet.pyramid import grid_spec, pyramid_pool_forward, region_count
from apanet.synth import WorldConfig, build_world, channel_groups
from apanet.train import TrainConfig, TrainingTuple, train_epochs, train_step, triplet_loss
from apanet.whitening import fit_pca, load_whitening, variance_report

from test_train import rec, single_mode_oracle

VERDICTS: dict[int, str] = {}


def verdict(n, ok, detail):
    VERDICTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(VERDICTS[n])
    return ok


# --- 1 --------------------------------------------------------------------


def test_criterion_1_region_counts():
    t = time.perf_counter()
    got = {s: region_count(s) for s in [(1, 2, 3, 4), (2, 4, 6, 8), (2, 3, 4, 5, 6, 7, 8)]}
    elapsed = time.perf_counter() - t
    ok = list(got.values()) == [30, 120, 203] and elapsed < 1.0
    assert verdict(1, ok, f"region counts {list(got.values())} (expected [30, 120, 203]), {elapsed:.3f}s")


# --- 2 --------------------------------------------------------------------


def test_criterion_2_pooling_geometry():
    t = time.perf_counter()
    rng = make_rng(2024)
    checked = rejected = 0
    problems = []
    while checked < 200:
        n, w, h = int(rng.integers(1, 9)), int(rng.integers(1, 65)), int(rng.integers(1, 65))
        ww, wh = math.ceil(2 * w / (n + 1)), math.ceil(2 * h / (n + 1))
        sw, sh = math.ceil(w / (n + 1)), math.ceil(h / (n + 1))
        try:
            g = grid_spec(n, w, h)
        except ValueError:
            # Rejected only when the formulas put a window origin outside the map.
            rejected += 1
            if (n - 1) * sw < w and (n - 1) * sh < h:
                problems.append(("wrongly rejected", n, w, h))
            continue
        checked += 1
        if (g.window_w, g.window_h, g.stride_w, g.stride_h) != (ww, wh, sw, sh):
            problems.append(("formula", n, w, h))
        if g.origins != tuple((i * sh, j * sw) for i in range(n) for j in range(n)):
            problems.append(("origins", n, w, h))
        covered = np.zeros((h, w), bool)
        for r0, r1, c0, c1 in g.windows():
            if r1 <= r0 or c1 <= c0:
                problems.append(("empty", n, w, h))
            covered[r0:r1, c0:c1] = True
        if not covered.all():
            problems.append(("coverage", n, w, h))
    elapsed = time.perf_counter() - t
    ok = not problems and elapsed < 5.0
    assert verdict(2, ok, f"{checked} valid triples checked, {rejected} rejected as too small for the scale, "
                          f"{len(problems)} problems, {elapsed:.2f}s"), problems[:5]


# --- 3 --------------------------------------------------------------------


def test_criterion_3_gradient_suite():
    t = time.perf_counter()
    results = run_suite(seed=7, trials=20)
    elapsed = time.perf_counter() - t
    worst = max(results, key=results.get)
    ok = all(v < 1e-5 for v in results.values()) and elapsed < 60.0
    assert verdict(3, ok, f"{len(results)} blocks x 20 trials, worst {worst} = {results[worst]:.2e} "
                          f"(< 1e-5), {elapsed:.1f}s"), results


# --- 4 --------------------------------------------------------------------


def test_criterion_4_whitening_identities():
    t = time.perf_counter()
    rng = make_rng(4)
    x = rng.normal(size=(500, 16)) @ rng.normal(size=(16, 16)) + rng.normal(size=16)
    m = fit_pca(x)
    q = rng.normal(size=(20, 16))
    centred_rot = (q - m.mean) @ m.rotation
    err0 = np.abs(m.transform(q, normalize=False, alpha=0.0) - centred_rot).max()
    err1 = np.abs(m.transform(q, normalize=False, alpha=1.0) - centred_rot / np.sqrt(m.eigenvalues)).max()
    var_err = 0.0
    for alpha in (0.0, 0.25, 0.5, 1.0):
        for r in variance_report(x, m, [alpha]):
            var_err = max(var_err, abs(r["variance"] - m.eigenvalues[r["dim"]] ** (1 - alpha)))
    cov = np.cov(m.transform(x, normalize=False, alpha=1.0), rowvar=False)
    off = np.abs(cov - np.diag(np.diag(cov))).max()
    elapsed = time.perf_counter() - t
    ok = err0 <= 1e-10 and err1 <= 1e-10 and var_err <= 1e-6 and off < 1e-6 and elapsed < 10
    assert verdict(4, ok, f"alpha=0 err {err0:.1e}, alpha=1 err {err1:.1e}, variance err {var_err:.1e}, "
                          f"off-diagonal {off:.1e}, {elapsed:.2f}s")


# --- 5 --------------------------------------------------------------------


def test_criterion_5_loss_oracles():
    t = time.perf_counter()
    z = np.zeros(1)
    cases = [
        (triplet_loss(z, [np.array([math.sqrt(0.2)])], [np.array([math.sqrt(0.35)])], 0.1)[0], 0.0),
        (triplet_loss(z, [np.array([math.sqrt(0.2)])], [np.array([0.5])], 0.1)[0], 0.05),
        (triplet_loss(np.array([0.3, 0.4]), [np.array([0.3, 0.4])], [np.array([0.3, 0.8])], 0.1)[0], 0.0),
    ]
    loss_err = max(abs(a - b) for a, b in cases)

    feats = {"q": [[1.0, 0.2], [0.3, 0.9]], "p": [[0.9, 0.4], [0.1, 1.1]], "n": [[1.2, 0.1], [0.8, -0.3]]}
    v0 = np.array([0.7, -0.4])
    cfg = TrainConfig(mode="single", margin=0.5)
    _, grad = single_mode_oracle(feats, v0, "qpn", cfg.margin)
    features = {k: RegionalFeatureSet(np.array(v), (1, 1)) for k, v in feats.items()}
    recs = {k: rec(k, 0, "query" if k == "q" else "database") for k in feats}
    params = HeadParams("single", v0.copy())
    train_step(params, {}, [TrainingTuple(recs["q"], [recs["p"]], [recs["n"]])], features,
               cfg.learning_rate(1), cfg)
    rate = cfg.lr0 * cfg.attention_lr_multiplier
    expected = v0 - rate * (np.array(grad) + cfg.weight_decay * v0)
    sgd_err = np.abs(params.v0 - expected).max()
    elapsed = time.perf_counter() - t
    # 0.05 is not exact in binary; 1e-15 is the representational floor of the hand value.
    ok = loss_err <= 1e-15 and sgd_err <= 1e-10 and elapsed < 5
    assert verdict(5, ok, f"hinge cases max err {loss_err:.1e}, one-step SGD err {sgd_err:.1e} (<= 1e-10), "
                          f"{elapsed:.2f}s")


# --- 6 and 7 share one training run --------------------------------------


@pytest.fixture(scope="module")
def trained():
    t = time.perf_counter()
    cfg = WorldConfig(seed=42)
    train_records, train_maps = build_world(cfg)
    feats = {r.id: pyramid_pool_forward(train_maps[r.id])[0] for r in train_records}
    tcfg = TrainConfig(mode="cascaded", epochs=10, seed=0)
    untrained = init_head_params(cfg.depth, "cascaded", make_rng(tcfg.seed))
    params, history = train_epochs(train_records, feats, tcfg)
    # Held-out evaluation world: new places, generated from the next seed.
    test_cfg = WorldConfig(seed=43)
    test_records, test_maps = build_world(test_cfg)
    test_feats = {r.id: pyramid_pool_forward(test_maps[r.id])[0] for r in test_records}
    return dict(cfg=cfg, records=test_records, feats=test_feats, params=params, untrained=untrained,
                history=history, seconds=time.perf_counter() - t)


def recall1(d, params):
    desc = {}
    for rid, rfs in d["feats"].items():
        v, _, _ = attention_forward(rfs, params)
        desc[rid] = v / np.linalg.norm(v)
    recs = d["records"]
    return recall_at_n([r for r in recs if r.role == "query"], [r for r in recs if r.role == "database"],
                       desc, ns=[1]).recalls[0]


def test_criterion_6_learning(trained):
    h = trained["history"]
    r_trained = recall1(trained, trained["params"])
    r_untrained = recall1(trained, trained["untrained"])
    r_none = recall1(trained, HeadParams("none"))
    ok = (trained["cfg"].num_places >= 20 and h[-1] < h[0] and r_trained >= r_untrained
          and r_trained >= r_none and trained["seconds"] < 300)
    assert verdict(6, ok, f"loss {h[0]:.3f} -> {h[-1]:.3f}; held-out R@1 trained {100 * r_trained:.1f} vs "
                          f"untrained {100 * r_untrained:.1f} vs none {100 * r_none:.1f}; "
                          f"{trained['seconds']:.1f}s")


def test_criterion_7_attention_suppression(trained):
    t = time.perf_counter()
    signal, clutter = channel_groups(trained["cfg"])
    sig_scores, clut_scores = [], []
    for rfs in trained["feats"].values():
        _, scores, _ = attention_forward(rfs, trained["params"])
        s = rfs.data[:, signal].sum(axis=1)
        c = rfs.data[:, clutter].sum(axis=1)
        sig_scores.extend(scores.final[s > c])
        clut_scores.extend(scores.final[c > s])
    elapsed = time.perf_counter() - t
    ms, mc = float(np.mean(sig_scores)), float(np.mean(clut_scores))
    ok = mc < ms and elapsed < 60
    assert verdict(7, ok, f"mean final score: clutter-dominated {mc:.3f} ({len(clut_scores)} regions) < "
                          f"signal-dominated {ms:.3f} ({len(sig_scores)} regions), {elapsed:.1f}s")


# --- 8 and 9: CLI pipelines ----------------------------------------------


def run(*argv):
    code = cli.main([str(a) for a in argv])
    assert code == 0, argv
    return code


def bursty_pipeline(root: Path):
    """Bursty training world -> trained head -> PCA-pw fit -> recall per alpha -> report."""
    burst = ["--burst-repeat-rate", "0.5"]
    run("synth", "--out", root / "train", "--seed", 42, *burst)
    run("synth", "--out", root / "test", "--seed", 43, *burst)
    run("train", "--manifest", root / "train/manifest.json", "--out", root / "head", "--seed", 0)
    head = root / "head/head.json"
    run("extract", "--manifest", root / "train/manifest.json", "--head", head, "--out", root / "fit.apad")
    run("extract", "--manifest", root / "test/manifest.json", "--head", head, "--out", root / "test.apad")
    run("whiten-fit", "--descriptors", root / "fit.apad", "--out", root / "pw.apaw", "--seed", 0,
        "--variance-report", root / "variance.csv", "--alphas", "0,0.25,0.5,1")
    run("eval", "--manifest", root / "test/manifest.json", "--descriptors", root / "test.apad",
        "--out-csv", root / "recall_plain.csv", "--out-json", root / "recall_plain.json")
    inputs = ["--input", f"no whitening={root / 'recall_plain.csv'}"]
    for dim in (32, 16):
        for alpha in ("0", "0.5", "1"):
            tag = f"a{alpha}_d{dim}"
            run("whiten-apply", "--model", root / "pw.apaw", "--descriptors", root / "test.apad",
                "--out", root / f"{tag}.apad", "--alpha", alpha, "--out-dim", dim)
            run("eval", "--manifest", root / "test/manifest.json", "--descriptors", root / f"{tag}.apad",
                "--out-csv", root / f"recall_{tag}.csv")
            inputs += ["--input", f"alpha={alpha} dim={dim}={root / f'recall_{tag}.csv'}"]
    run("report", *inputs, "--out", root / "report.csv", "--figure", root / "report.png",
        "--variance", root / "variance.csv")


@pytest.fixture(scope="module")
def bursty_runs(tmp_path_factory):
    roots = [tmp_path_factory.mktemp(f"bursty{i}") for i in range(2)]
    for r in roots:
        bursty_pipeline(r)
    return roots


def tree_diff(a: Path, b: Path):
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    other = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if files != other:
        return ["file lists differ"]
    return [str(f) for f in files if not filecmp.cmp(a / f, b / f, shallow=False)]


def test_criterion_8_whitening_report(bursty_runs):
    root = bursty_runs[0]
    diffs = tree_diff(*bursty_runs)
    _, fit = load_descriptor_table(root / "fit.apad")
    model = load_whitening(root / "pw.apaw")
    var_err = 0.0
    with open(root / "variance.csv", newline="") as f:
        for row in csv.DictReader(f):
            expect = model.eigenvalues[int(row["dim"])] ** (1 - float(row["alpha"]))
            var_err = max(var_err, abs(float(row["variance"]) - expect))
    # Recompute from the fitting rows directly rather than trusting the CSV alone.
    for r in variance_report(fit, fit_pca(fit), [0.0, 0.5, 1.0]):
        var_err = max(var_err, abs(r["variance"] - fit_pca(fit).eigenvalues[r["dim"]] ** (1 - r["alpha"])))
    table = (root / "report.csv").read_text()
    print(table)
    rows = table.splitlines()
    labels = {r.split(",")[0] for r in rows[1:]}
    ok = not diffs and var_err <= 1e-6 and {f"alpha={a} dim=32" for a in ("0", "0.5", "1")} <= labels
    r1 = ", ".join(f"{r.split(',')[0]} R@1 {r.split(',')[1]}" for r in rows[1:])
    assert verdict(8, ok, f"deterministic ({len(diffs)} differing files), variance identity err {var_err:.1e}; "
                          f"reported: {r1}"), diffs


def test_criterion_9_reproducibility(bursty_runs, tmp_path, capsys):
    # synth, train, extract, whiten-fit, whiten-apply, eval and report are covered by the
    # bursty pipeline; extract also runs with an untrained seeded head, and gradcheck is
    # compared on its printed output.
    diffs = tree_diff(*bursty_runs)
    for i in range(2):
        run("extract", "--manifest", bursty_runs[0] / "test/manifest.json", "--mode", "cascaded", "--seed", 5,
            "--dump-scores", tmp_path / f"s{i}.csv", "--out", tmp_path / f"u{i}.apad", "--threads", 1 + 3 * i)
    for name in ("s{}.csv", "u{}.apad", "u{}.apad.ids"):
        if (tmp_path / name.format(0)).read_bytes() != (tmp_path / name.format(1)).read_bytes():
            diffs.append(name)
    outs = []
    for _ in range(2):
        capsys.readouterr()
        run("gradcheck", "--seed", 7, "--trials", 2)
        outs.append(capsys.readouterr().out)
    if outs[0] != outs[1]:
        diffs.append("gradcheck stdout")
    n_files = sum(1 for p in bursty_runs[0].rglob("*") if p.is_file()) + 3
    ok = not diffs
    assert verdict(9, ok, f"8 subcommands, {n_files} output files + gradcheck output compared across two runs, "
                          f"{len(diffs)} differ"), diffs
