"""Acceptance suite: one or more tests per criterion, summarised at the end of the run."""

import itertools
import math

import numpy as np
import pytest

from dceac import checkpoint, clustering, datapipe, evaluation, explain, synth, training
from dceac.autodiff import Tape, ops
from dceac.cli import main
from dceac.network import ArchitectureConfig, attention_gate, build_model
from dceac.training import TrainConfig

from _oracles import (best_permutation, gap_direct, kept_tiles_bruteforce, kl_direct, mse_direct,
                      numeric_grad, rel_error, soft_assign_direct, target_direct)
from _tables import MACRO, METHODS, as_per_class

criterion = pytest.mark.criterion


# 1 -----------------------------------------------------------------------------------------

@criterion(1, "averaged columns reproduced from per-class values (+-0.0005)")
@pytest.mark.parametrize("method", METHODS)
def test_c1_table_aggregation(method):
    macro = evaluation.macro_average(as_per_class(method, evaluation.auc_score))
    for key in ("SN", "SP", "FS", "ACC", "AUC"):
        assert abs(macro[key] - MACRO[method][key]) <= 5e-4, (key, macro[key], MACRO[method][key])
    print(f"{method}: ACC {macro['ACC']:.4f} AUC {macro['AUC']:.4f}")


# 2 -----------------------------------------------------------------------------------------

@criterion(2, "equation oracles on 1000 random instances (1e-9 relative)")
def test_c2_equation_oracles():
    rng = np.random.default_rng(2024)
    for trial in range(1000):
        n, k, c = rng.integers(1, 6), rng.integers(2, 5), rng.integers(1, 6)
        z, mu = rng.normal(size=(n, c)) * rng.uniform(0.1, 3), rng.normal(size=(k, c))
        q = clustering.soft_assign(z, mu).data
        assert np.allclose(q, soft_assign_direct(z, mu), rtol=1e-9, atol=0), trial
        p = clustering.target_distribution(q)
        assert np.allclose(p, target_direct(q), rtol=1e-9, atol=0), trial
        if n == 1:
            assert np.allclose(p, q, rtol=1e-12, atol=0)
        kl = clustering.kl_loss(p, q).item()
        ref = kl_direct(p, q)
        assert abs(kl - ref) <= 1e-9 * abs(ref) + 1e-15, trial
        x = rng.normal(size=(n, c, int(rng.integers(1, 5)), int(rng.integers(1, 5))))
        assert np.allclose(ops.global_avg_pool(x).data, gap_direct(x), rtol=1e-9, atol=1e-15), trial
        r = rng.normal(size=x.shape)
        assert math.isclose(ops.mse_loss(x, r).item(), mse_direct(x, r), rel_tol=1e-9), trial
    one = np.array([[0.2, 0.3, 0.5]])
    np.testing.assert_allclose(clustering.target_distribution(one), one, rtol=1e-15)


# 3 -----------------------------------------------------------------------------------------

def _fd_check(build, arrays, tol=1e-4):
    tape = Tape()
    grads = tape.backward(build({k: tape.watch(k, v) for k, v in arrays.items()}))
    worst = 0.0
    for name, arr in arrays.items():
        num = numeric_grad(lambda: float(build(arrays).data), arr)
        worst = max(worst, rel_error(grads[name], num))
    assert worst < tol, worst
    return worst


def _weighted(t, w):
    return ops.total(ops.mul(t, w))


OPERATORS = {
    "add": (lambda a, w: _weighted(ops.add(a["x"], a["y"]), w), (2, 3, 4)),
    "sub": (lambda a, w: _weighted(ops.sub(a["x"], a["y"]), w), (2, 3, 4)),
    "mul": (lambda a, w: _weighted(ops.mul(a["x"], a["y"]), w), (2, 3, 4)),
    "scale": (lambda a, w: _weighted(ops.scale(a["x"], -0.7), w), (2, 3, 4)),
    "relu": (lambda a, w: _weighted(ops.relu(a["x"]), w), (2, 3, 4)),
    "sigmoid": (lambda a, w: _weighted(ops.sigmoid(a["x"]), w), (2, 3, 4)),
    "gap": (lambda a, w: _weighted(ops.global_avg_pool(a["x"]), w[:, :, 0, 0]), (2, 3, 4, 4)),
    "mse": (lambda a, w: ops.mse_loss(a["x"], a["y"]), (2, 3, 4)),
}


@criterion(3, "finite-difference gradient checks (relative error < 1e-4)")
@pytest.mark.parametrize("name", sorted(OPERATORS))
def test_c3_elementwise_operators(name):
    build, shape = OPERATORS[name]
    rng = np.random.default_rng(3)
    w = rng.normal(size=shape)
    arrays = {"x": rng.normal(size=shape), "y": rng.normal(size=shape)}
    _fd_check(lambda a: build(a, w), arrays)


@criterion(3, "finite-difference gradient checks (relative error < 1e-4)")
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_c3_convolutions(stride, pad):
    rng = np.random.default_rng(31)
    a = {"x": rng.normal(size=(2, 3, 6, 6)), "k": rng.normal(size=(4, 3, 3, 3)), "b": rng.normal(size=4)}
    w = rng.normal(size=ops.conv2d(a["x"], a["k"], a["b"], stride, pad).shape)
    _fd_check(lambda t: _weighted(ops.conv2d(t["x"], t["k"], t["b"], stride, pad), w), a)
    op = stride - 1
    a = {"x": rng.normal(size=(2, 4, 3, 3)), "k": rng.normal(size=(4, 2, 3, 3)), "b": rng.normal(size=2)}
    w = rng.normal(size=ops.conv_transpose2d(a["x"], a["k"], a["b"], stride, pad, op).shape)
    _fd_check(lambda t: _weighted(ops.conv_transpose2d(t["x"], t["k"], t["b"], stride, pad, op), w), a)


@criterion(3, "finite-difference gradient checks (relative error < 1e-4)")
def test_c3_batch_norm_and_gate():
    rng = np.random.default_rng(32)
    a = {"x": rng.normal(size=(4, 3, 2, 2)), "s": rng.normal(size=3), "t": rng.normal(size=3)}
    w = rng.normal(size=(4, 3, 2, 2))
    for training_mode in (True, False):
        _fd_check(lambda t: _weighted(ops.batch_norm(t["x"], t["s"], t["t"], np.zeros(3), np.ones(3),
                                                     training_mode)[0], w), a)
    a = {"x": rng.normal(size=(2, 3, 2, 2)), "g": rng.normal(size=(3, 3, 1, 1)), "b": rng.normal(size=3)}
    w = rng.normal(size=(2, 3, 2, 2))
    _fd_check(lambda t: _weighted(attention_gate(t["x"], t["g"], t["b"]), w), a)


@criterion(3, "finite-difference gradient checks (relative error < 1e-4)")
def test_c3_clustering_head():
    rng = np.random.default_rng(33)
    z, mu = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
    p = clustering.target_distribution(clustering.soft_assign(z, mu).data)
    w = rng.normal(size=(5, 3))
    _fd_check(lambda t: _weighted(clustering.soft_assign(t["z"], t["mu"]), w), {"z": z, "mu": mu})
    _fd_check(lambda t: clustering.kl_loss(p, clustering.soft_assign(t["z"], t["mu"])), {"z": z, "mu": mu})


@criterion(3, "finite-difference gradient checks (relative error < 1e-4)")
def test_c3_composed_joint_loss():
    cfg = ArchitectureConfig(input_size=8, encoder_filters=(2, 3, 4), bottleneck_size=2, channels=5)
    params = build_model(cfg, seed=1).astype(np.float64)
    rng = np.random.default_rng(34)
    x = rng.random((3, 3, 8, 8))
    mu = rng.normal(size=(3, 5)) * 0.1
    q0 = training.joint_loss(params.weights, params.buffers, cfg, x, mu, 0.3)[3].data
    p = clustering.target_distribution(q0)
    arrays = dict(params.weights)
    arrays["cluster.centers"] = mu

    def build(a):
        w = {k: v for k, v in a.items() if k != "cluster.centers"}
        return training.joint_loss(w, params.buffers, cfg, x, a["cluster.centers"], 0.3, p)[0]

    worst = _fd_check(build, arrays)
    print(f"composed loss: {len(arrays)} tensors, worst relative error {worst:.2e}")


# 4 -----------------------------------------------------------------------------------------

@criterion(4, "gamma=0 joint step is bit-identical to a reconstruction step")
def test_c4_gamma_zero_degeneration():
    x, _ = synth.make_dataset(3, 128, seed=4)
    params = build_model(seed=4)
    warm = training.reconstruction_step(params, x, TrainConfig().optimizer())
    params, opt = warm.params, warm.optimizer
    params, _ = training.init_centers(params, x, TrainConfig(kmeans_restarts=2))
    a = training.reconstruction_step(params, x, opt)
    b = training.joint_step(params, x, opt, gamma=0.0)
    for k in params.weights:
        assert a.params.weights[k].tobytes() == b.params.weights[k].tobytes(), k
    for k in params.buffers:
        assert a.params.buffers[k].tobytes() == b.params.buffers[k].tobytes(), k
    # the same holds for whole stage runs from a common starting point
    cfg = TrainConfig(epochs=1, batch_size=9, gamma=0.0, kmeans_restarts=2)
    start = build_model(seed=5)
    pre, _, _ = training.pretrain_cae(x, cfg, start)
    joint = training.train_dceac(x, cfg, start)
    for k in start.weights:
        assert pre.weights[k].tobytes() == joint.params.weights[k].tobytes(), k


# 5 -----------------------------------------------------------------------------------------

@criterion(5, "synthetic 3-texture clustering: DCEAC >= AE+kmeans and >= 0.85 per seed")
@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_c5_synthetic_clustering(seed):
    x, y = synth.make_dataset(100, 128, seed=seed)
    cfg = TrainConfig(epochs=50, seed=seed)
    params, _, opt = training.pretrain_cae(x, cfg, build_model(seed=seed))
    km = training.cluster_pretrained(x, cfg.replace(variant="ae_kmeans"), params, opt)
    dc = training.cluster_pretrained(x, cfg.replace(variant="dceac"), params, opt)
    acc_km = evaluation.aligned_accuracy(km.labels, y, 3)
    acc_dc = evaluation.aligned_accuracy(dc.labels, y, 3)
    print(f"seed {seed}: ae_kmeans {acc_km:.4f} dceac {acc_dc:.4f}")
    assert acc_dc >= acc_km
    assert acc_dc >= 0.85


# 6 -----------------------------------------------------------------------------------------

@criterion(6, "target distribution sharpens 10,000 equalised rows")
def test_c6_sharpening():
    rng = np.random.default_rng(6)
    rows = 0
    for k in (2, 3, 4, 5):
        base = rng.dirichlet(np.ones(k), size=10_000 // (4 * k) + 1)
        # all cyclic shifts of every row: every column has the same total
        q = np.concatenate([np.roll(base, s, axis=1) for s in range(k)])
        f = q.sum(axis=0)
        assert np.allclose(f, f[0])
        p = clustering.target_distribution(q)
        assert np.all(p.argmax(axis=1) == q.argmax(axis=1))
        assert np.all(p.max(axis=1) >= q.max(axis=1))
        rows += len(q)
    assert rows >= 10_000


# 7 -----------------------------------------------------------------------------------------

@criterion(7, "retained tiles equal the brute-force per-tile oracle")
def test_c7_patch_pipeline():
    rng = np.random.default_rng(7)
    for trial in range(200):
        tile = int(rng.choice([4, 8]))
        h, w = int(rng.integers(tile, 6 * tile)), int(rng.integers(tile, 6 * tile))
        mask = (rng.random((h, w)) < rng.uniform(0.4, 1.0)).astype(np.uint8) * 255
        recs = datapipe.extract_patches(np.zeros((h, w, 3), np.uint8), mask, tile, 0.75)
        assert sorted((r.row, r.col) for r in recs) == kept_tiles_bruteforce(mask, tile, 0.75), trial
    # boundary: exactly 75% is dropped, one more pixel is kept
    mask = np.zeros((8, 16), np.uint8)
    mask[:6, :8] = 255
    mask[:6, 8:] = 255
    mask[6, 8] = 255
    recs = datapipe.extract_patches(np.zeros((8, 16, 3)), mask, 8, 0.75)
    assert [(r.row, r.col) for r in recs] == [(0, 8)] == kept_tiles_bruteforce(mask, 8, 0.75)


# 8 -----------------------------------------------------------------------------------------

@criterion(8, "alignment equals exhaustive 3! search on 1000 instances")
def test_c8_alignment():
    rng = np.random.default_rng(8)
    for trial in range(1000):
        n = int(rng.integers(1, 60))
        truth, pred = rng.integers(0, 3, n), rng.integers(0, 3, n)
        cm = evaluation.confusion_matrix(truth, pred, 3)
        perm = evaluation.align_clusters(pred, truth, 3)
        best, score = best_permutation(cm.tolist())
        assert sum(cm[perm[c], c] for c in range(3)) == score, trial
        scores = sorted(sum(cm[pp[c], c] for c in range(3)) for pp in itertools.permutations(range(3)))
        if scores[-1] != scores[-2]:
            assert tuple(perm) == tuple(best), trial


# 9 -----------------------------------------------------------------------------------------

@criterion(9, "seeded pipeline runs give byte-identical checkpoints; round trip is exact")
def test_c9_determinism(tmp_path):
    main(["synth", "--out-dir", str(tmp_path / "p"), "--manifest", str(tmp_path / "m.csv"),
          "--per-class", "4", "--seed", "9"])
    common = ["--manifest", str(tmp_path / "m.csv"), "--epochs", "2", "--seed", "9", "--kmeans-restarts", "3"]
    for run in ("a", "b"):
        pre, final = tmp_path / f"{run}_pre.ckpt", tmp_path / f"{run}_dceac.ckpt"
        assert main(["pretrain", "--out", str(pre)] + common) == 0
        assert main(["train", "--ckpt", str(pre), "--out", str(final)] + common) == 0
        assert main(["predict", "--ckpt", str(final), "--manifest", str(tmp_path / "m.csv"),
                     "--out", str(tmp_path / f"{run}_pred.csv")]) == 0
    for name in ("pre.ckpt", "dceac.ckpt", "pred.csv"):
        assert (tmp_path / f"a_{name}").read_bytes() == (tmp_path / f"b_{name}").read_bytes(), name
    blob = (tmp_path / "a_dceac.ckpt").read_bytes()
    params, meta, _ = checkpoint.from_bytes(blob)
    assert checkpoint.to_bytes(params, meta) == blob


# 10 ----------------------------------------------------------------------------------------

@criterion(10, "activation map peaks at the nearest fibre; constant maps are 0.5")
def test_c10_cam():
    rng = np.random.default_rng(10)
    for trial in range(200):
        c, hw, k = int(rng.integers(1, 9)), int(rng.integers(2, 9)), int(rng.integers(2, 5))
        z, mu = rng.normal(size=(c, hw, hw)), rng.normal(size=(k, c))
        j = int(rng.integers(k))
        heat = explain.cam_from_bottleneck(z, mu, j)
        dist = ((z - mu[j][:, None, None]) ** 2).sum(axis=0)
        assert dist[np.unravel_index(heat.argmax(), heat.shape)] == dist.min(), trial
        assert heat.max() == 1.0
    flat = np.ones((6, 4, 4)) * rng.normal(size=(6, 1, 1))
    np.testing.assert_array_equal(explain.cam_from_bottleneck(flat, rng.normal(size=(3, 6)), 2), 0.5)
