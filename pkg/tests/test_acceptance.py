"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The training criteria (7 and 8) share one module-scoped set of runs and take
roughly ten minutes on a single core.
"""

import shutil
import time

import numpy as np
import pytest

from oracles import explicit_combined_loss, jacobi_eigenvalues
from tiloss.affinity import compute_affinity, directional_similarity, prior_margin_table
from tiloss.cli import IDX_NAMES, main
from tiloss.features import ALL_FEATURES, build_tensor, similarity
from tiloss.glyphs import GlyphRaster, synth_strokes, synth_template_set
from tiloss.gradcheck import OPS, gradient_check, random_batch, random_margin_table
from tiloss.loss import (CosineBatch, LossConfig, alpha_schedule, am_softmax_loss,
                         softmax_cross_entropy, template_instance_loss)
from tiloss.numeric import prng, svd
from tiloss.trainer import TrainConfig, load_idx_dataset, train

SEEDS = range(5)
FIXED_ALPHAS = (0.1, 0.2, 0.3, 0.4)
SWEEP_ALPHAS = (0.01, 0.05, 0.1, 0.2)


# 1 ---------------------------------------------------------------------------------

def test_gradient_fidelity(acceptance):
    start = time.perf_counter()
    worst = {}
    for n in (3, 10, 50):
        for op in OPS:
            for mode in (("detached", "differentiated") if op == "template_instance" else ("detached",)):
                r = gradient_check(op, mode, batch_size=8, n=n, seed=0, trials=100)
                key = f"{op}/{mode}"
                worst[key] = max(worst.get(key, 0.0), r["max_rel_error"])
    elapsed = time.perf_counter() - start
    err = max(worst.values())
    ok = err < 1e-5 and elapsed < 10.0
    acceptance(1, ok, f"max rel error {err:.2e} (< 1e-5), {elapsed:.1f} s (< 10 s)")
    assert err < 1e-5, worst
    assert elapsed < 10.0


# 2 ---------------------------------------------------------------------------------

def _tiny_p_batch(rng, size, n):
    # target cosine far below one competitor: p is of order 1e-12 at s = 30
    cos = rng.uniform(-1.0, -0.6, (size, n))
    labels = rng.integers(0, n, size)
    rows = np.arange(size)
    cos[rows, labels] = -0.46
    cos[rows, (labels + 1) % n] = 0.46
    return CosineBatch(cos, labels)


def test_closed_form_identity(acceptance):
    rng = prng(2024)
    worst, smallest_p, count = 0.0, 1.0, 0
    for k in range(100):
        cfg = LossConfig(gamma=float(k % 3), beta=1.0, alpha_max=0.1)
        n = 8
        margins = random_margin_table(rng, n)
        batch = _tiny_p_batch(rng, 10, n) if k % 10 == 0 else random_batch(rng, 10, n)
        alpha = float(rng.uniform(0.0, 0.4))
        ev = template_instance_loss(batch, cfg, margins, alpha)
        ref = explicit_combined_loss(batch.cosines, batch.labels, cfg, margins, alpha)
        worst = max(worst, float(np.max(np.abs(ev.losses - ref))))
        smallest_p = min(smallest_p, float(ev.p.min()))
        count += len(ref)
    ok = worst <= 1e-10 and count == 1000 and smallest_p < 1e-11
    acceptance(2, ok, f"{count} samples, max |closed - explicit| {worst:.1e} (<= 1e-10), "
                      f"smallest p {smallest_p:.1e}")
    assert count == 1000 and smallest_p < 1e-11
    assert worst <= 1e-10


# 3 ---------------------------------------------------------------------------------

def test_degeneracy_chain(acceptance):
    rng = prng(3)
    worst_soft = worst_am = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 30))
        batch, margins = random_batch(rng, 16, n), random_margin_table(rng, n)
        gamma = float(rng.uniform(0.0, 3.0))
        cfg = LossConfig(beta=0.0, gamma=gamma)
        soft = softmax_cross_entropy(batch, cfg)
        ti = template_instance_loss(batch, cfg, margins, alpha=0.0)
        worst_soft = max(worst_soft, float(np.max(np.abs(ti.losses - soft.losses))),
                         float(np.max(np.abs(ti.grad - soft.grad))))
        alpha = float(rng.uniform(0.0, 0.5))
        cfg0 = LossConfig(beta=0.0, gamma=0.0)
        ti = template_instance_loss(batch, cfg0, margins, alpha=alpha)
        am = am_softmax_loss(batch, cfg0, m=alpha)
        worst_am = max(worst_am, float(np.max(np.abs(ti.losses - am.losses))),
                       float(np.max(np.abs(ti.grad - am.grad))))
    ok = worst_soft <= 1e-12 and worst_am <= 1e-12
    acceptance(3, ok, f"alpha=0,beta=0 vs softmax {worst_soft:.1e}; "
                      f"gamma=0,beta=0 vs additive margin {worst_am:.1e} (<= 1e-12)")
    assert worst_soft <= 1e-12 and worst_am <= 1e-12


# 4 ---------------------------------------------------------------------------------

def test_schedule(acceptance):
    ok = True
    worst = 0.0
    for alpha_max in (0.1, 0.2, 0.35):
        cfg = LossConfig(alpha_max=alpha_max, rho=10.0)
        for max_iter in (1000, 3000, 10000):
            ok &= alpha_schedule(max_iter // 2, max_iter, cfg) == alpha_max / 2
            end = alpha_schedule(max_iter, max_iter, cfg) / alpha_max
            worst = max(worst, abs(end - 0.99331))
    ok &= worst <= 1e-5
    acceptance(4, ok, f"alpha(T/2) = alpha_max/2 exactly; |alpha(T)/alpha_max - 0.99331| {worst:.1e}")
    assert ok


# 5 ---------------------------------------------------------------------------------

def test_affinity_pipeline(acceptance):
    start = time.perf_counter()
    tset = synth_template_set(7, 8, 3)
    tensor = build_tensor(tset)
    a = compute_affinity(tensor)
    m = prior_margin_table(a)
    svd_err = 0.0
    for i in range(8):
        s = directional_similarity(tensor, i).matrix
        u, sigma, v = svd(s)
        svd_err = max(svd_err, float(np.max(np.abs(u @ np.diag(sigma) @ v.T - s))))
        eig = jacobi_eigenvalues(s @ s.T)[:len(sigma)]
        svd_err = max(svd_err, float(np.max(np.abs(sigma ** 2 - eig))))
    elapsed = time.perf_counter() - start

    strokes = [set(x) for x in synth_strokes(7, 8)]
    pairs = [(i, j) for i in range(8) for j in range(8) if i != j]
    near = [m.matrix[i, j] for i, j in pairs if len(strokes[i] ^ strokes[j]) == 2]
    far = [m.matrix[i, j] for i, j in pairs if not strokes[i] & strokes[j]]
    off = ~np.eye(8, dtype=bool)
    checks = {
        "symmetric": np.array_equal(a.matrix, a.matrix.T),
        "unit diagonal": np.all(np.diag(a.matrix) == 1.0),
        "zero margin diagonal": np.all(m.matrix[~off] == 0.0),
        "positive off-diagonal": np.all(m.matrix[off] > 0.0),
        "near > far": bool(near and far and min(near) > max(far)),
        "svd": svd_err < 1e-10,
        "runtime": elapsed < 30.0,
    }
    failed = [k for k, v in checks.items() if not v]
    acceptance(5, not failed, f"svd error {svd_err:.1e}, near/far margins "
                              f"{min(near):.4f} > {max(far):.4f}, {elapsed:.1f} s"
               + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed


# 6 ---------------------------------------------------------------------------------

def test_feature_sanity(acceptance):
    rng = prng(6)
    glyphs = synth_template_set(6, 10, 2, side=48)
    bad = []
    for k in range(500):
        side = int(rng.integers(16, 49))
        if k % 5 == 0:
            # structured pairs: glyph rasters, possibly equal
            a = glyphs.raster(int(rng.integers(10)), int(rng.integers(2)))
            b = glyphs.raster(int(rng.integers(10)), int(rng.integers(2)))
        else:
            a = GlyphRaster(rng.integers(0, 256, (side, side), dtype=np.uint8))
            b = GlyphRaster(rng.integers(0, 256, (side, side), dtype=np.uint8))
        for f in ALL_FEATURES:
            ab, ba = similarity(f, a, b), similarity(f, b, a)
            if not (ab == ba and 0.0 <= ab <= 1.0 and similarity(f, a, a) == 1.0):
                bad.append((k, f.value))
    acceptance(6, not bad, f"500 pairs x {len(ALL_FEATURES)} extractors, {len(bad)} violations")
    assert not bad


# 7 and 8 -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("mnist_format")
    assert main(["--seed", "11", "synth", "--out", str(out), "--templates", "10",
                 "--train-samples", "6000", "--test-samples", "1000"]) == 0
    data = out / "data"
    tr = load_idx_dataset(data / IDX_NAMES["train_images"], data / IDX_NAMES["train_labels"], 10)
    te = load_idx_dataset(data / IDX_NAMES["test_images"], data / IDX_NAMES["test_labels"], 10)
    return tr, te


def _run(data, seed, mode, alpha_mode="fixed", alpha_max=0.0):
    tr, te = data
    cfg = TrainConfig(loss_mode=mode, loss=LossConfig(alpha_max=alpha_max, beta=0.0),
                      alpha_mode=alpha_mode, max_iter=3000, seed=seed)
    return train(tr, cfg, test_set=te)[1]


@pytest.fixture(scope="module")
def margin_runs(toy_data):
    start = time.perf_counter()
    runs = {}
    for seed in SEEDS:
        runs[seed, "softmax"] = _run(toy_data, seed, "softmax")
        for a in FIXED_ALPHAS:
            runs[seed, a] = _run(toy_data, seed, "template_instance", "fixed", a)
    return runs, time.perf_counter() - start


@pytest.fixture(scope="module")
def sweep_runs(toy_data):
    runs = {}
    for seed in SEEDS:
        for a in SWEEP_ALPHAS:
            runs[seed, a] = _run(toy_data, seed, "template_instance", "schedule", a)
    return runs


def test_margin_effect_trend(acceptance, toy_data, margin_runs):
    runs, elapsed = margin_runs
    tr, _ = toy_data
    median_angle = [float(np.median([np.degrees(runs[s, a].min_inter_class_angle) for s in SEEDS]))
                    for a in FIXED_ALPHAS]
    std_soft = float(np.median([np.degrees(runs[s, "softmax"].mean_intra_class_std) for s in SEEDS]))
    std_04 = float(np.median([np.degrees(runs[s, 0.4].mean_intra_class_std) for s in SEEDS]))
    monotone = all(b >= a for a, b in zip(median_angle, median_angle[1:]))
    checks = {"angles non-decreasing": monotone, "std shrinks": std_04 < std_soft,
              "runtime": elapsed < 900.0, "train size": len(tr.labels) >= 5000}
    failed = [k for k, v in checks.items() if not v]
    angles = ", ".join(f"{a:.2f}" for a in median_angle)
    acceptance(7, not failed, f"median min angle over alpha_max 0.1..0.4: [{angles}] deg; "
                              f"intra std {std_04:.2f} (alpha 0.4) vs {std_soft:.2f} (softmax) deg; "
                              f"{elapsed:.0f} s" + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert not failed


def test_accuracy_trend(acceptance, margin_runs, sweep_runs):
    runs, _ = margin_runs
    wins = []
    for s in SEEDS:
        # alpha_max = 0 with beta = 0 is exactly the softmax loss
        base = runs[s, "softmax"].test_accuracy
        best = max(sweep_runs[s, a].test_accuracy for a in SWEEP_ALPHAS)
        wins.append(best >= base)
    detail = "; ".join(f"seed {s}: {max(sweep_runs[s, a].test_accuracy for a in SWEEP_ALPHAS):.3f}"
                       f" vs {runs[s, 'softmax'].test_accuracy:.3f}" for s in SEEDS)
    acceptance(8, sum(wins) >= 4, f"best nonzero alpha_max >= alpha_max 0 in {sum(wins)}/5 seeds "
                                  f"({detail})")
    assert sum(wins) >= 4


# 9 ---------------------------------------------------------------------------------

def _snapshot(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(directory.rglob("*")) if p.is_file()}


def test_cli_determinism(acceptance, tmp_path, capsys):
    data = tmp_path / "synth"
    cache = tmp_path / "affinity" / "margins.bin"
    commands = {
        "synth": ["--seed", "4", "synth", "--out", data, "--templates", "5", "--fonts", "2",
                  "--train-samples", "400", "--test-samples", "100"],
        "affinity": ["--seed", "4", "affinity", "--out", tmp_path / "affinity",
                     "--manifest", data / "templates" / "manifest.tsv"],
        "margins": ["margins", cache, "--csv", tmp_path / "margins" / "margins.csv"],
        "train": ["--seed", "4", "train", "--out", tmp_path / "train", "--data", data / "data",
                  "--loss", "template_instance", "--margins", cache, "--max-iter", "40"],
        "sweep": ["--seed", "4", "train", "--out", tmp_path / "sweep", "--data", data / "data",
                  "--max-iter", "20", "--sweep-alpha", "0.05", "0.1"],
        "gradcheck": ["--seed", "4", "gradcheck", "--out", tmp_path / "gradcheck", "--mode", "both",
                      "--trials", "5"],
    }
    differing = []
    for name, argv in commands.items():
        out = tmp_path / ("margins" if name == "margins" else argv[argv.index("--out") + 1].name)
        results = []
        for repeat in range(2):
            if repeat:
                shutil.rmtree(out)
            out.mkdir(parents=True, exist_ok=True)
            code = main([str(x) for x in argv])
            captured = capsys.readouterr()
            results.append((code, captured.out, captured.err, _snapshot(out)))
        if results[0] != results[1] or results[0][0] != 0 or not results[0][3]:
            differing.append(name)
    acceptance(9, not differing, f"{len(commands)} invocations over synth, affinity, margins, "
                                 f"train and gradcheck run twice"
               + (f"; differing: {', '.join(differing)}" if differing else ", byte-identical"))
    assert not differing
