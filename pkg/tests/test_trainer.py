import math

import numpy as np
import pytest

from oracles import random_probs
from selftrain.confidence import ThresholdSet, determine_k, determine_kc
from selftrain.pseudolabel import generate_cbst, generate_st
from selftrain.tensor_io import IGNORE
from selftrain.trainer import (
    ClassifierParams,
    TrainingDiverged,
    cross_entropy,
    forward,
    gradients,
    init_params,
    load_params,
    loss_selftrain,
    loss_supervised,
    save_params,
    train_epochs,
)


def _linear(w, b):
    return ClassifierParams([(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64))])


def _img(*vals):
    """D x 1 x N feature image from per-pixel feature tuples."""
    return np.array(vals, dtype=np.float64).T[:, None, :]


def test_forward_examples():
    zero = _linear(np.zeros((3, 4)), np.zeros(4))
    out = forward(zero, np.random.default_rng(0).random((3, 2, 2))).values
    assert np.allclose(out, 0.25)

    p = forward(_linear([[0.0, math.log(3)]], [0, 0]), _img((1.0,))).values[:, 0, 0]
    assert np.allclose(p, [0.25, 0.75])

    p = forward(_linear([[1000.0, 0.0]], [0, 0]), _img((1.0,))).values[:, 0, 0]
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0) and p[1] < 1e-30


def test_forward_dimension_mismatch():
    with pytest.raises(ValueError):
        forward(init_params(3, 2), np.zeros((4, 2, 2)))


def test_loss_supervised_examples():
    half = _linear([[0.0, 0.0]], [0, 0])
    rep = loss_supervised(half, [(_img((1.0,)), np.array([[0]]))])
    assert rep.total == pytest.approx(math.log(2))
    sure = _linear([[1000.0, 0.0]], [0, 0])
    assert loss_supervised(sure, [(_img((1.0,)), np.array([[0]]))]).total == pytest.approx(0.0, abs=1e-12)
    rep = loss_supervised(half, [(_img((1.0,), (2.0,)), np.array([[IGNORE, IGNORE]]))])
    assert rep.total == 0.0
    assert cross_entropy(half, _img((1.0,), (2.0,)), np.array([[IGNORE, IGNORE]]))[1] == 0


def _small_problem(rng, c=3, d=4, hidden=0):
    params = init_params(d, c, hidden, seed=int(rng.integers(1 << 30)))
    params = ClassifierParams([(w.astype(np.float64), b.astype(np.float64) + rng.normal(size=b.shape) * 0.1)
                               for w, b in params.layers])
    src = [(rng.normal(size=(d, 3, 4)), rng.integers(0, c, (3, 4)).astype(np.uint8)) for _ in range(2)]
    tgt_img = [rng.normal(size=(d, 3, 4)) for _ in range(2)]
    return params, src, tgt_img


def test_loss_selftrain_no_selection_reduces_to_source():
    rng = np.random.default_rng(0)
    params, src, tgt = _small_problem(rng)
    none = [(x, np.full((3, 4), IGNORE, np.uint8)) for x in tgt]
    rep = loss_selftrain(params, src, none, ThresholdSet.global_(0.9))
    assert rep.total == pytest.approx(loss_supervised(params, src).total)
    assert rep.target_term == 0 and rep.regularizer_term == 0


def test_loss_selftrain_pixel_at_reference_contributes_zero():
    params = _linear([[0.0, math.log(3)]], [0, 0])  # p = (0.25, 0.75)
    t = ThresholdSet.per_class([0.5, 0.75])
    rep = loss_selftrain(params, [], [(_img((1.0,)), np.array([[1]]))], t)
    assert rep.target_term + rep.regularizer_term == pytest.approx(0.0, abs=1e-12)


def test_loss_decomposition_identity():
    rng = np.random.default_rng(1)
    params, src, tgt = _small_problem(rng)
    probs = [forward(params, x).values for x in tgt]
    t = determine_kc(probs, 0.5)
    target = [(x, generate_cbst(p, t)) for x, p in zip(tgt, probs)]
    rep = loss_selftrain(params, src, target, t)
    assert rep.total == pytest.approx(rep.source_term + rep.target_term + rep.regularizer_term, rel=1e-6)
    assert rep.selected.sum() == sum((lab != IGNORE).sum() for _, lab in target)


def test_loss_selftrain_inactive_class_rejected():
    params = _linear([[0.0, 0.0]], [0, 0])
    with pytest.raises(ValueError, match="inactive"):
        loss_selftrain(params, [], [(_img((1.0,)), np.array([[1]]))], ThresholdSet.per_class([0.5, np.nan]))


def test_prior_enters_reported_term_only():
    params = _linear([[0.0, 0.0]], [0, 0])
    lab = np.array([[0]])
    q = np.full((2, 1, 1), 0.5)
    t = ThresholdSet.per_class([0.25, 0.25])
    plain = loss_selftrain(params, [], [(_img((1.0,)), lab)], t)
    with_q = loss_selftrain(params, [], [(_img((1.0,)), lab)], t, priors=[q])
    assert with_q.target_term - plain.target_term == pytest.approx(-math.log(0.5))


def _finite_difference(params, batches, eps=1e-4):
    grads = []
    for li, (w, b) in enumerate(params.layers):
        for which, arr in ((0, w), (1, b)):
            g = np.zeros(arr.shape)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + eps
                up = loss_supervised(params, batches).total
                arr[idx] = orig - eps
                down = loss_supervised(params, batches).total
                arr[idx] = orig
                g[idx] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def max_relative_error(a, b):
    num = max(np.max(np.abs(x - y)) for x, y in zip(a, b))
    den = max(max(np.max(np.abs(x)), np.max(np.abs(y))) for x, y in zip(a, b))
    return num / max(den, 1e-12)


@pytest.mark.parametrize("hidden", [0, 5])
@pytest.mark.parametrize("seed", range(4))
def test_gradient_matches_finite_differences(hidden, seed):
    rng = np.random.default_rng(seed)
    params, src, tgt = _small_problem(rng, hidden=hidden)
    batches = src + [(tgt[0], rng.integers(0, 3, (3, 4)).astype(np.uint8))]
    assert max_relative_error(gradients(params, batches), _finite_difference(params, batches)) < 1e-3


def test_gradient_zero_selection_is_supervised():
    rng = np.random.default_rng(5)
    params, src, tgt = _small_problem(rng)
    ignored = [(x, np.full((3, 4), IGNORE, np.uint8)) for x in tgt]
    for a, b in zip(gradients(params, src + ignored), gradients(params, src)):
        assert np.array_equal(a, b)


def test_gradient_duplicate_pixel_doubles():
    rng = np.random.default_rng(6)
    params = _small_problem(rng)[0]
    x = rng.normal(size=(4, 1, 1))
    lab = np.array([[2]], np.uint8)
    single = gradients(params, [(x, lab)])
    double = gradients(params, [(np.concatenate([x, x], axis=2), np.array([[2, 2]], np.uint8))])
    for a, b in zip(single, double):
        assert np.allclose(b, 2 * a, rtol=1e-12, atol=1e-15)


def _blobs(seed, n_img=4, d=2):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_img):
        lab = rng.integers(0, 2, (8, 8)).astype(np.uint8)
        x = np.where(lab == 0, -3.0, 3.0)[None] + rng.normal(size=(d, 8, 8)) * 0.5
        out.append((x.astype(np.float32), lab))
    return out


def test_zero_learning_rate_keeps_params():
    params = init_params(2, 2, lr=0.0, seed=3)
    new, trace = train_epochs(params, _blobs(0), 3, seed=1)
    for (w0, b0), (w1, b1) in zip(params.layers, new.layers):
        assert np.array_equal(w0, w1) and np.array_equal(b0, b1)
    assert len(trace) == 3


def test_separable_blobs_reach_high_accuracy():
    data = _blobs(1)
    params, _ = train_epochs(init_params(2, 2, lr=0.5, seed=0), data, 50, seed=2)
    correct = total = 0
    for x, lab in data:
        pred = forward(params, x).values.argmax(axis=0)
        correct += (pred == lab).sum()
        total += lab.size
    assert correct / total >= 0.99


def test_training_is_deterministic():
    data = _blobs(2)
    a, ta = train_epochs(init_params(2, 2, hidden=4, seed=1), data, 3, seed=9)
    b, tb = train_epochs(init_params(2, 2, hidden=4, seed=1), data, 3, seed=9)
    for x, y in zip(a.flat(), b.flat()):
        assert x.tobytes() == y.tobytes()
    assert [r.total for r in ta] == [r.total for r in tb]


def test_divergence_detected():
    data = [(x * 1e4, lab) for x, lab in _blobs(3)]
    with pytest.raises(TrainingDiverged):
        train_epochs(init_params(2, 2, lr=1e4, seed=0), data, 5, seed=0)


def test_params_roundtrip(tmp_path):
    p = init_params(5, 3, hidden=7, seed=4, lr=0.25)
    save_params(p, tmp_path / "p.bin")
    back = load_params(tmp_path / "p.bin")
    assert back.lr == 0.25 and back.seed == 4 and back.hidden == 7
    for x, y in zip(p.flat(), back.flat()):
        assert x.tobytes() == y.tobytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + (tmp_path / "p.bin").read_bytes()[4:])
    with pytest.raises(ValueError, match="magic"):
        load_params(tmp_path / "bad.bin")


def test_solver_labels_minimize_target_objective():
    """Target + regularizer under the solver output beats random feasible labelings."""
    rng = np.random.default_rng(10)
    params, src, tgt = _small_problem(rng)
    probs = [forward(params, x).values for x in tgt]
    t = determine_k(probs, 0.5)
    solved = [(x, generate_st(p, t)) for x, p in zip(tgt, probs)]
    rep = loss_selftrain(params, src, solved, t)
    best = rep.target_term + rep.regularizer_term
    for _ in range(200):
        rand = [(x, rng.integers(0, 4, (3, 4)).astype(np.uint8)) for x in tgt]
        rand = [(x, np.where(l == 3, IGNORE, l).astype(np.uint8)) for x, l in rand]
        r = loss_selftrain(params, src, rand, t)
        assert best <= r.target_term + r.regularizer_term + 1e-9


def test_round_does_not_increase_joint_objective():
    """Step (a) then one small-step epoch of step (b), thresholds held fixed."""
    rng = np.random.default_rng(11)
    data = _blobs(4, d=3)
    src = data[:2]
    tgt_x = [x + 0.5 for x, _ in data[2:]]
    params = init_params(3, 2, seed=0, lr=1e-3)
    probs = [forward(params, x).values for x in tgt_x]
    t = determine_kc(probs, 0.3)
    before = loss_selftrain(params, src, [(x, np.full((8, 8), IGNORE, np.uint8)) for x in tgt_x], t)
    labeled = [(x, generate_cbst(p, t)) for x, p in zip(tgt_x, probs)]
    after_a = loss_selftrain(params, src, labeled, t)
    assert after_a.total <= before.total + 1e-6
    new, _ = train_epochs(params, src + labeled, 1, seed=3)
    after_b = loss_selftrain(new, src, labeled, t)
    assert after_b.total <= after_a.total + 1e-6
