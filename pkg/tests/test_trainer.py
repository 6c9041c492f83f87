import gzip
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tiloss.affinity import compute_affinity, prior_margin_table
from tiloss.features import build_tensor
from tiloss.glyphs import synth_glyph_samples, synth_strokes, synth_template_set
from tiloss.idx import IdxFormatError, read_idx, write_idx
from tiloss.loss import CosineBatch, LossConfig, am_softmax_loss, template_instance_loss
from tiloss.numeric import prng
from tiloss.trainer import (Dataset, ToyNetwork, TrainConfig, TrainingDivergedError, evaluate,
                            evaluate_features, export_embeddings, load_idx_dataset, lr_at,
                            read_embeddings, train)


def blobs(seed, n=200, dim=8):
    """Two well separated Gaussian blobs inside the unit cube."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    centers = np.zeros((2, dim))
    centers[0, 0] = centers[1, 1] = 0.8
    x = np.clip(centers[y] + 0.1 + rng.normal(0, 0.08, (n, dim)), 0, 1)
    return Dataset(x, y, 2)


@pytest.fixture(scope="module")
def glyph_data():
    imgs, labels = synth_glyph_samples(5, 10, 1000, side=28, bright_ink=True)
    return Dataset.from_uint8(imgs, labels, 10)


# network --------------------------------------------------------------------------

def _network_loss(net, x, y, loss_fn):
    cos, _ = net.forward(x)
    return loss_fn(CosineBatch(cos, y)).mean


@pytest.mark.parametrize("which", ["softmax", "am", "template_instance"])
def test_backprop_matches_finite_differences(which):
    rng = np.random.default_rng(0)
    net = ToyNetwork(12, 4, hidden=(9, 7), feature_dim=2, seed=3)
    x = rng.uniform(0, 1, (16, 12))
    y = rng.integers(0, 4, 16)
    cfg = LossConfig(s=5.0, gamma=0.0)  # constant margin keeps the frozen-margin check exact
    margins = np.full((4, 4), 0.2) - 0.2 * np.eye(4)
    loss_fn = {"softmax": lambda b: am_softmax_loss(b, cfg, m=0.0),
               "am": lambda b: am_softmax_loss(b, cfg),
               "template_instance": lambda b: template_instance_loss(b, cfg, margins, 0.3)}[which]
    cos, cache = net.forward(x)
    grads = net.backward(cache, loss_fn(CosineBatch(cos, y)).grad)
    h = 1e-6
    for name, param in net.params.items():
        numeric = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + h
            up = _network_loss(net, x, y, loss_fn)
            param[idx] = old - h
            down = _network_loss(net, x, y, loss_fn)
            param[idx] = old
            numeric[idx] = (up - down) / (2 * h)
        scale = max(np.abs(numeric).max(), np.abs(grads[name]).max(), 1e-12)
        assert np.abs(numeric - grads[name]).max() / scale < 1e-4, name


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_cosines_bounded_and_features_unit(seed):
    rng = np.random.default_rng(seed)
    net = ToyNetwork(10, 5, seed=seed % 1000)
    x = rng.uniform(-5, 5, (20, 10))
    cos, cache = net.forward(x)
    assert np.all(np.abs(cos) <= 1 + 1e-9)
    norms = np.linalg.norm(cache["unit"], axis=1)
    assert np.all(np.abs(norms - 1) < 1e-12)
    assert np.allclose(np.linalg.norm(net.class_weights, axis=1), 1, atol=1e-12)


# learning-rate schedule -------------------------------------------------------------

def test_learning_rate_schedule():
    cfg = TrainConfig(base_lr=0.01, max_iter=1000, warmup_fraction=0.1, lr_step_fraction=0.5)
    assert lr_at(1, cfg) == pytest.approx(0.0001)
    assert lr_at(100, cfg) == pytest.approx(0.01)
    assert lr_at(500, cfg) == pytest.approx(0.01)
    assert lr_at(501, cfg) == pytest.approx(0.001)
    flat = TrainConfig(base_lr=0.01, max_iter=10, warmup_fraction=0.0, lr_step_fraction=1.0)
    assert lr_at(1, flat) == lr_at(10, flat) == 0.01


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(base_lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(loss_mode="hinge")


# training ------------------------------------------------------------------------------

def test_same_seed_is_bit_identical(glyph_data):
    cfg = TrainConfig(loss_mode="template_instance", max_iter=30, seed=4)
    _, a = train(glyph_data, cfg)
    _, b = train(glyph_data, cfg)
    assert a.to_json() == b.to_json()
    _, c = train(glyph_data, TrainConfig(loss_mode="template_instance", max_iter=30, seed=5))
    assert c.to_json() != a.to_json()


@pytest.mark.parametrize("seed", range(5))
def test_separable_blobs_reach_full_accuracy(seed):
    data = blobs(seed)
    _, report = train(data, TrainConfig(max_iter=100, seed=seed))  # 2 iterations per epoch
    assert len(report.epochs) == 50
    assert any(e["train_accuracy"] == 1.0 for e in report.epochs)
    assert report.train_accuracy == 1.0


def test_softmax_loss_trend_on_blobs():
    curves = []
    for seed in range(5):
        losses = []
        train(blobs(seed), TrainConfig(max_iter=100, seed=seed),
              callback=lambda it, loss, alpha: losses.append(loss))
        curves.append(losses)
    # momentum makes single steps noisy; compare means over windows of 10 iterations
    windows = np.median(np.array(curves).reshape(5, 10, 10).mean(axis=2), axis=0)
    assert np.all(np.diff(windows) <= 1e-4)
    assert windows[-1] < 0.01 * windows[0]


def test_schedule_reaches_alpha_max(glyph_data):
    alphas = []
    cfg = TrainConfig(loss_mode="template_instance", loss=LossConfig(alpha_max=0.2), max_iter=20)
    train(glyph_data, cfg, callback=lambda it, loss, alpha: alphas.append(alpha))
    assert alphas[9] == pytest.approx(0.1)
    assert alphas[-1] == pytest.approx(0.2 * 0.99331, abs=1e-5)
    fixed = []
    train(glyph_data, TrainConfig(loss_mode="template_instance", alpha_mode="fixed", max_iter=5,
                                  loss=LossConfig(alpha_max=0.2)),
          callback=lambda it, loss, alpha: fixed.append(alpha))
    assert fixed == [0.2] * 5


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_divergence_is_reported(glyph_data):
    with pytest.raises(TrainingDivergedError, match=r"iteration \d+.*alpha=.*max\|cos\|"):
        train(glyph_data, TrainConfig(base_lr=1e300, max_iter=50, warmup_fraction=0.0))


def test_margin_table_must_match_classes(glyph_data):
    with pytest.raises(ValueError, match="does not match"):
        train(glyph_data, TrainConfig(max_iter=1), margins=np.zeros((3, 3)))


# evaluation ---------------------------------------------------------------------------------

def test_evaluate_identity():
    stats = evaluate_features(np.eye(3)[[0, 1, 2, 1]], [0, 1, 2, 1], np.eye(3))
    assert stats["accuracy"] == 1.0
    assert stats["intra_class_std"] == [0.0, 0.0, 0.0]


def test_untrained_network_is_at_chance(glyph_data):
    acc = evaluate(ToyNetwork(784, 10, seed=1), glyph_data)["accuracy"]
    assert abs(acc - 0.1) <= 0.05


def test_angle_statistics_brute_force():
    rng = np.random.default_rng(2)
    unit = rng.normal(size=(60, 2))
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    labels = rng.integers(0, 4, 60)
    w = rng.normal(size=(4, 2))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    stats = evaluate_features(unit, labels, w)
    smallest = math.inf
    for i in range(4):
        for j in range(4):
            dot = sum(w[i][k] * w[j][k] for k in range(2))
            angle = math.acos(max(-1.0, min(1.0, dot)))
            assert stats["weight_pair_angles"][i][j] == pytest.approx(angle, abs=1e-10)
            if i != j:
                smallest = min(smallest, angle)
    assert stats["min_inter_class_angle"] == pytest.approx(smallest, abs=1e-10)
    for c in range(4):
        members = [u for u, y in zip(unit, labels) if y == c]
        sx, sy = sum(u[0] for u in members), sum(u[1] for u in members)
        r = math.hypot(sx, sy)
        devs = [math.acos(max(-1.0, min(1.0, (u[0] * sx + u[1] * sy) / r))) for u in members]
        rms = math.sqrt(sum(d * d for d in devs) / len(devs))
        assert stats["intra_class_std"][c] == pytest.approx(rms, abs=1e-10)


def test_evaluate_empty_dataset():
    with pytest.raises(ValueError, match="empty"):
        evaluate(ToyNetwork(4, 2), Dataset(np.zeros((0, 4)), np.zeros(0, dtype=int), 2))


def test_embedding_export(tmp_path, glyph_data):
    net = ToyNetwork(784, 10, seed=0)
    path = export_embeddings(net, glyph_data, tmp_path / "emb.csv")
    labels, values = read_embeddings(path)
    assert len(labels) == len(glyph_data) + 10
    assert np.all(labels[-10:] == -1)
    raw, _ = net.features(glyph_data.images)
    assert np.array_equal(values[:-10], raw)
    np.testing.assert_allclose(np.linalg.norm(values[-10:], axis=1), 1.0, atol=1e-9)
    with pytest.raises(ValueError, match="2-D"):
        export_embeddings(ToyNetwork(784, 10, feature_dim=3), glyph_data, tmp_path / "x.csv")


# IDX ------------------------------------------------------------------------------------------

def test_idx_round_trip_and_dataset(tmp_path):
    imgs, labels = synth_glyph_samples(2, 4, 40, side=12)
    write_idx(tmp_path / "img.gz", imgs)
    write_idx(tmp_path / "lab", labels)
    assert np.array_equal(read_idx(tmp_path / "img.gz"), imgs)
    raw = (tmp_path / "lab").read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x01" and int.from_bytes(raw[4:8], "big") == 40
    assert gzip.decompress((tmp_path / "img.gz").read_bytes())[:4] == b"\x00\x00\x08\x03"
    data = load_idx_dataset(tmp_path / "img.gz", tmp_path / "lab")
    assert data.images.shape == (40, 144) and data.n_classes == 4
    assert data.images.max() <= 1.0
    write_idx(tmp_path / "img2.gz", imgs)
    assert (tmp_path / "img.gz").read_bytes() == (tmp_path / "img2.gz").read_bytes()
    write_idx(tmp_path / "f", np.arange(6, dtype=np.float64).reshape(2, 3))
    assert np.array_equal(read_idx(tmp_path / "f"), np.arange(6.0).reshape(2, 3))


def test_idx_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x01\x02\x08\x01")
    with pytest.raises(IdxFormatError, match="magic"):
        read_idx(tmp_path / "bad")
    write_idx(tmp_path / "lab", np.arange(5, dtype=np.uint8))
    (tmp_path / "short").write_bytes((tmp_path / "lab").read_bytes()[:-1])
    with pytest.raises(IdxFormatError):
        read_idx(tmp_path / "short")
    with pytest.raises(ValueError, match="3-D"):
        load_idx_dataset(tmp_path / "lab", tmp_path / "lab")


# prior margins ----------------------------------------------------------------------

def _equidistant_blobs(seed, n, per=60, dim=16):
    """``n`` classes whose centres are all equally far apart."""
    rng = prng(seed, 99)
    centres = np.eye(dim)[:n] * 0.6 + 0.2
    x = np.concatenate([centres[c] + rng.normal(0, 0.08, (per, dim)) for c in range(n)])
    return Dataset(np.clip(x, 0, 1), np.repeat(np.arange(n), per), n)


def test_prior_margins_separate_similar_classes():
    n = 8
    table = prior_margin_table(compute_affinity(build_tensor(synth_template_set(7, n, 3, side=48))))
    strokes = [set(s) for s in synth_strokes(7, n)]
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    near = tuple(np.array([p for p in pairs if len(strokes[p[0]] ^ strokes[p[1]]) == 2]).T)
    far = tuple(np.array([p for p in pairs if not strokes[p[0]] & strokes[p[1]]]).T)
    assert table.matrix[near].mean() > table.matrix[far].mean()

    gaps, shifts = [], []
    for seed in range(5):
        data = _equidistant_blobs(seed, n)
        gap = {}
        for beta in (0.0, 30.0):
            cfg = TrainConfig(loss_mode="template_instance", loss=LossConfig(beta=beta),
                              max_iter=1000, batch_size=64, feature_dim=8, seed=seed)
            _, report = train(data, cfg, margins=table)
            angles = np.array(report.weight_pair_angles)
            gap[beta] = angles[near].mean() - angles[far].mean()
        gaps.append(gap[30.0])
        # same seed, same initialisation: only the margins differ
        shifts.append(gap[30.0] - gap[0.0])
    assert np.median(gaps) > 0
    assert np.median(shifts) > 0
