import os
import subprocess
import sys

import numpy as np
import pytest

from fedselect import _accel, kernels
from fedselect import fl_train as F
from fedselect.distributions import generate_federation
from fedselect.selection import SelectionConfig


def _instance(rng, n=12, d=5, C=4):
    return (rng.standard_normal((d, C)), rng.standard_normal(C), rng.standard_normal((n, d)), rng.integers(0, C, n))


def _loss(W, b, X, y):
    return kernels.softmax_xent_grad(W, b, X, y)[0]


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    h = 1e-6
    worst = 0.0
    for _ in range(50):
        W, b, X, y = _instance(rng)
        _, gW, gb = kernels.softmax_xent_grad(W, b, X, y)
        if rng.random() < 0.8:
            i, j = rng.integers(W.shape[0]), rng.integers(W.shape[1])
            Wp, Wm = W.copy(), W.copy()
            Wp[i, j] += h
            Wm[i, j] -= h
            num, ana = (_loss(Wp, b, X, y) - _loss(Wm, b, X, y)) / (2 * h), gW[i, j]
        else:
            j = rng.integers(b.size)
            bp, bm = b.copy(), b.copy()
            bp[j] += h
            bm[j] -= h
            num, ana = (_loss(W, bp, X, y) - _loss(W, bm, X, y)) / (2 * h), gb[j]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-3))
    assert worst < 1e-5


def test_softmax_is_shift_stable():
    rng = np.random.default_rng(1)
    W, b, X, y = _instance(rng)
    loss, _, _ = kernels.softmax_xent_grad(W, b + 1000.0, X, y)
    assert np.isfinite(loss)
    assert loss == pytest.approx(kernels.softmax_xent_grad(W, b, X, y)[0])


@pytest.mark.parametrize("adam", [False, True])
def test_numpy_and_compiled_kernels_agree(adam):
    if not _accel.HAVE_NUMBA:
        pytest.skip("numba not installed")
    rng = np.random.default_rng(2)
    W, b, X, y = _instance(rng, n=40, d=6, C=3)
    order = np.stack([rng.permutation(40) for _ in range(3)])
    W1, b1, W2, b2 = W.copy(), b.copy(), W.copy(), b.copy()
    kernels.train_epochs_np(W1, b1, X, y, order, 8, 0.05, adam, 0.9, 0.999, 1e-8)
    kernels.train_epochs_jit(W2, b2, X, y, order, 8, 0.05, adam, 0.9, 0.999, 1e-8)
    assert np.allclose(W1, W2, atol=1e-12) and np.allclose(b1, b2, atol=1e-12)
    cand = rng.integers(0, 9, size=(30, 5)).astype(float)
    taken = rng.random(30) < 0.2
    cur = rng.integers(1, 9, size=5).astype(float)
    s1 = kernels.greedy_kl_scores_np(cur, cand, taken)
    s2 = kernels.greedy_kl_scores_jit(cur, cand, taken)
    assert np.allclose(s1, s2, atol=1e-12, equal_nan=False)


def test_env_flag_selects_numpy_path():
    code = "from fedselect import _accel, kernels; print(_accel.USE_NUMBA, kernels.train_epochs is kernels.train_epochs_np)"
    env = dict(os.environ, FEDSELECT_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["False", "True"]


def test_task_and_materialization():
    task = F.SyntheticTask()
    assert np.allclose(task.means @ task.means.T, np.eye(10), atol=1e-12)
    with pytest.raises(ValueError):
        F.SyntheticTask(noise=0.75)
    X, y = F.materialize_client_data(task, np.eye(10, dtype=int)[3] * 16, 0, 1)
    assert (y == 3).all() and X.shape == (16, 20)
    h = np.array([5, 0, 3, 0, 0, 8, 0, 0, 1, 0])
    _, y = F.materialize_client_data(task, h, 4, 2)
    assert np.array_equal(np.bincount(y, minlength=10), h)
    a = F.materialize_client_data(task, h, 4, 2)[0]
    b = F.materialize_client_data(task, h, 4, 2)[0]
    assert np.array_equal(a, b)


def test_local_train_basics():
    task = F.SyntheticTask(C=3, d=4, noise=0.2)
    data = task.sample([20, 20, 20], np.random.default_rng(0))
    w0 = F.ModelWeights.zeros(4, 3)
    same = F.local_train(w0, data, F.TrainConfig(local_epochs=0), np.random.default_rng(0))
    assert np.array_equal(same.W, w0.W)
    losses = []
    w = w0
    rng = np.random.default_rng(1)
    for _ in range(8):
        losses.append(kernels.softmax_xent_grad(w.W, w.b, *data)[0])
        w = F.local_train(w, data, F.TrainConfig(lr=0.1), rng)
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
    with pytest.raises(F.NonFiniteLoss), np.errstate(all="ignore"):
        F.local_train(w0, (data[0] * 1e200, data[1]), F.TrainConfig(lr=1e10), rng)


def test_adam_flag_trains():
    task = F.SyntheticTask(C=3, d=4, noise=0.2)
    data = task.sample([30, 30, 30], np.random.default_rng(0))
    w = F.local_train(F.ModelWeights.zeros(4, 3), data, F.TrainConfig(optimizer="adam", lr=0.05, local_epochs=5),
                      np.random.default_rng(0))
    assert F.evaluate(w, data) > 0.9


def test_aggregate_examples():
    rng = np.random.default_rng(3)
    w = F.ModelWeights.random(5, 3, rng, scale=1.0)
    assert np.array_equal(F.aggregate([w]).W, w.W)
    neg = F.ModelWeights(-w.W, -w.b)
    assert np.allclose(F.aggregate([w, neg]).flat(), 0)
    ms = [F.ModelWeights.random(5, 3, rng, scale=1.0) for _ in range(7)]
    total = np.zeros(18)
    for m in ms:
        total += m.flat()
    assert np.allclose(F.aggregate(ms).flat(), total / 7)
    A, c = rng.standard_normal((5, 5)), rng.standard_normal((5, 3))
    mapped = F.aggregate([F.ModelWeights(A @ m.W + c, m.b) for m in ms])
    assert np.allclose(mapped.W, A @ F.aggregate(ms).W + c)
    with pytest.raises(ValueError):
        F.aggregate([w, F.ModelWeights.zeros(4, 3)])


def test_evaluate_examples():
    task = F.SyntheticTask(noise=0.0)
    perfect = F.ModelWeights(task.means.T.copy(), np.zeros(10))
    assert F.evaluate(perfect, task.test_set(20)) == 1.0
    noisy = F.SyntheticTask(noise=0.45)
    test = noisy.test_set(500)
    rng = np.random.default_rng(0)
    accs = [F.evaluate(F.ModelWeights.random(20, 10, rng, scale=1.0), test) for _ in range(50)]
    assert abs(np.mean(accs) - 0.1) < 0.02
    rnd = F.ModelWeights.random(20, 10, rng, scale=1.0)
    pred = F.predict(rnd, test[0])
    confusion = np.zeros((10, 10), dtype=int)
    np.add.at(confusion, (test[1], pred), 1)
    assert F.evaluate(rnd, test) == pytest.approx(np.trace(confusion) / confusion.sum())


def test_weight_divergence():
    w = F.ModelWeights.random(4, 3, np.random.default_rng(0))
    assert F.weight_divergence(w, w) == 0
    v = w.copy()
    v.W[1, 2] += 0.3
    assert F.weight_divergence(w, v) == pytest.approx(0.3)


def test_reference_model_is_accurate():
    task = F.SyntheticTask()
    ref = F.train_reference(task, 2560, F.TrainConfig(), seed=0, max_epochs=30)
    assert F.evaluate(ref, task.test_set()) > 0.7


def test_experiment_is_deterministic_and_traced(tmp_path):
    ds = generate_federation(N=80, n_vc=32, rho=5, emd=1.0, seed=0)
    task = F.SyntheticTask(seed=0)
    cfg = F.TrainConfig(n_vc=32, rounds=6)
    ref = F.train_reference(task, 320, cfg, max_epochs=5)
    runs = [F.run_experiment(ds, task, SelectionConfig(K=8, strategy="dubhe", seed=1), cfg, reference=ref)
            for _ in range(2)]
    assert F.trace_to_csv(runs[0]) == F.trace_to_csv(runs[1])
    assert len(runs[0]) == 6
    header = F.trace_to_csv(runs[0]).splitlines()[0]
    assert header == "round,strategy,accuracy,emd_po_pu,weight_divergence,seed"
    assert F.last_rounds_accuracy(runs[0], last=2) == pytest.approx(np.mean([r.accuracy for r in runs[0][-2:]]))
    with pytest.raises(ValueError):
        F.run_experiment(ds, F.SyntheticTask(C=5, d=5), SelectionConfig(K=8), cfg)
