import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import params_fd, random_simplex, rel_error
from kd3a.domains import LabeledDataset
from kd3a.nn import (
    Classifier,
    ModelParams,
    aggregate_params,
    backward,
    clip_grad_norm,
    cosine_lr,
    cross_entropy_grad,
    cross_entropy_loss,
    deserialize,
    empirical_task_risk,
    forward,
    init_classifier,
    kl_divergence,
    kv_loss,
    load_params,
    save_params,
    serialize,
    sgd_step,
    weighted_kd_loss,
)
from kd3a.vote import ConsensusItem


def test_zero_weight_model_gives_uniform_probs(rng):
    model = init_classifier(4, 5, hidden=(3,), zero=True)
    probs, _ = forward(model, rng.normal(size=(7, 4)), "eval")
    np.testing.assert_allclose(probs, 0.2, atol=1e-12)


def test_eval_forward_is_pure(small_model, rng):
    x = rng.normal(size=(9, 5))
    before = small_model.params
    a = forward(small_model, x, "eval").probs
    b = forward(small_model, x, "eval").probs
    np.testing.assert_array_equal(a, b)
    assert small_model.params is before


def test_train_forward_moves_running_mean_by_momentum():
    model = init_classifier(2, 2, hidden=(1,), dtype=np.float64)
    p = model.params.replace({"block0.linear.weight": np.zeros((2, 1)), "block0.linear.bias": np.ones(1)})
    model = Classifier(p)
    forward(model, np.zeros((4, 2)), "train")
    assert model.params["block0.bn.running_mean"][0] == pytest.approx(0.1)


def test_softmax_rows_sum_to_one(small_model, rng):
    probs, feats = forward(small_model, rng.normal(size=(11, 5)) * 10, "train")
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    assert [f.shape for f in feats] == [(11, 6), (11, 4)]


def test_forward_rejects_wrong_width(small_model):
    with pytest.raises(ValueError):
        forward(small_model, np.zeros((3, 4)))


def test_kl_examples():
    assert kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        kl_divergence([0.7, 0.7], [0.5, 0.5])


def test_kl_nonnegative_and_pinsker(rng):
    for _ in range(1000):
        c = rng.integers(2, 6)
        p, q = random_simplex(rng, c), random_simplex(rng, c)
        kl = kl_divergence(p, q)
        assert kl >= 0
        assert np.max(np.abs(p - q)) <= math.sqrt(kl / 2) + 1e-12
        assert kl >= 2 * np.max(p - q) ** 2 - 1e-12


def test_weighted_kd_loss_examples():
    p, q = np.array([0.9, 0.1]), np.array([0.6, 0.4])
    kl = kl_divergence(p, q)
    assert weighted_kd_loss(ConsensusItem(p, 2.0), q) == pytest.approx(2 * kl)
    assert weighted_kd_loss(ConsensusItem(p, 0.001), q) == pytest.approx(0.001 * kl)
    assert weighted_kd_loss(ConsensusItem(p, 3.0), p) == 0.0


def test_cross_entropy_examples():
    assert cross_entropy_loss(np.eye(3), [0, 1, 2]) == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy_loss(np.full((4, 2), 0.5), [0, 1, 1, 0]) == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        cross_entropy_loss(np.full((1, 2), 0.5), [2])


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_cross_entropy_gradient_matches_finite_differences(small_model, rng, mode):
    x = rng.normal(size=(8, 5))
    y = rng.integers(0, 3, size=8)
    if mode == "eval":
        small_model.params = small_model.params.replace(
            {"block0.bn.running_var": rng.uniform(0.5, 2, 6), "block0.bn.running_mean": rng.normal(size=6)}
        )

    def loss(m):
        return cross_entropy_loss(forward(m, x, mode).probs, y)

    fwd = forward(small_model, x, mode)
    analytic = backward(small_model, fwd, cross_entropy_grad(fwd.probs, y))
    numeric = params_fd(small_model, loss)
    assert rel_error(analytic.flat(), numeric.flat()) < 1e-3


def test_kv_loss_gradient_matches_finite_differences(small_model, rng):
    x = rng.normal(size=(8, 5))
    p = random_simplex(rng, 3, size=8)
    n_p = rng.choice([0.001, 1.0, 2.0, 3.0], size=8)

    def loss(m):
        return kv_loss(forward(m, x, "train").probs, p, n_p)[0]

    fwd = forward(small_model, x, "train")
    _, grad = kv_loss(fwd.probs, p, n_p)
    analytic = backward(small_model, fwd, grad)
    numeric = params_fd(small_model, loss)
    assert rel_error(analytic.flat(), numeric.flat()) < 1e-3


def test_kv_loss_equals_mean_weighted_kd(rng):
    probs = random_simplex(rng, 4, size=5)
    p = random_simplex(rng, 4, size=5)
    n_p = np.array([1.0, 2.0, 0.001, 3.0, 1.0])
    expected = np.mean([weighted_kd_loss(ConsensusItem(p[i], n_p[i]), probs[i]) for i in range(5)])
    assert kv_loss(probs, p, n_p)[0] == pytest.approx(expected)


def _scalar(v):
    return ModelParams(("w",), (np.array([v], dtype=np.float32),))


def test_sgd_examples():
    p, g = _scalar(1.0), _scalar(1.0)
    same, _ = sgd_step(p, g, lr=0.0)
    assert same["w"][0] == 1.0
    same, _ = sgd_step(p, _scalar(0.0), lr=0.1)
    assert same["w"][0] == 1.0
    moved, vel = sgd_step(p, g, lr=0.1)
    assert moved["w"][0] == pytest.approx(0.9)
    moved2, _ = sgd_step(moved, g, lr=0.1, velocity=vel)
    # v = 0.9 * 1 + 1
    assert moved2["w"][0] == pytest.approx(0.9 - 0.19)


def test_sgd_leaves_running_stats_alone(small_model):
    grads = ModelParams(small_model.params.names, tuple(np.ones_like(a) for a in small_model.params.arrays))
    new, _ = sgd_step(small_model.params, grads, lr=0.5)
    np.testing.assert_array_equal(new["block0.bn.running_var"], small_model.params["block0.bn.running_var"])
    assert not np.array_equal(new["block0.bn.gamma"], small_model.params["block0.bn.gamma"])


def test_sgd_manifest_mismatch():
    with pytest.raises(ValueError):
        sgd_step(_scalar(1.0), ModelParams(("v",), (np.zeros(1),)), lr=0.1)


def test_cosine_lr_schedule():
    assert cosine_lr(0, 40) == pytest.approx(0.05)
    assert cosine_lr(40, 40) == pytest.approx(0.001)
    assert cosine_lr(20, 40) == pytest.approx((0.05 + 0.001) / 2)
    lrs = [cosine_lr(e, 40) for e in range(41)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_aggregate_examples(rng):
    m1 = init_classifier(3, 2, hidden=(4,), rng=rng).params
    m2 = init_classifier(3, 2, hidden=(4,), rng=rng).params
    copy = aggregate_params([m1, m2], [0.0, 1.0])
    for a, b in zip(copy.arrays, m2.arrays):
        np.testing.assert_array_equal(a, b)
    same = aggregate_params([m1, m1], [0.3, 0.7])
    for a, b in zip(same.arrays, m1.arrays):
        np.testing.assert_allclose(a, b, rtol=1e-6)
    assert aggregate_params([_scalar(1.0), _scalar(3.0)], [0.25, 0.75])["w"][0] == pytest.approx(2.5)


def test_aggregate_rejects_bad_input(rng):
    m1 = init_classifier(3, 2, hidden=(4,), rng=rng).params
    m2 = init_classifier(3, 2, hidden=(5,), rng=rng).params
    with pytest.raises(ValueError):
        aggregate_params([m1, m2], [0.5, 0.5])
    with pytest.raises(ValueError):
        aggregate_params([m1, m1], [0.5, 0.6])


def test_aggregate_is_linear(rng):
    a = [init_classifier(3, 2, hidden=(4,), rng=rng, dtype=np.float64).params for _ in range(3)]
    b = [init_classifier(3, 2, hidden=(4,), rng=rng, dtype=np.float64).params for _ in range(3)]
    w = np.array([0.2, 0.5, 0.3])
    lam = 0.35
    mixed = [aggregate_params([x, y], [lam, 1 - lam]) for x, y in zip(a, b)]
    lhs = aggregate_params(mixed, w)
    rhs = aggregate_params([aggregate_params(a, w), aggregate_params(b, w)], [lam, 1 - lam])
    np.testing.assert_allclose(lhs.flat(), rhs.flat(), rtol=1e-12, atol=1e-12)


def _blobs(n=40):
    x = np.concatenate([np.full((n // 2, 2), -2.0), np.full((n // 2, 2), 2.0)])
    y = np.array([0] * (n // 2) + [1] * (n // 2))
    return LabeledDataset(x, y, 2)


def test_empirical_task_risk():
    data = _blobs()
    const = init_classifier(2, 2, hidden=(2,), zero=True)
    const.params = const.params.replace({"head.bias": np.array([1.0, 0.0])})
    assert empirical_task_risk(const, data) == 0.5
    flipped = LabeledDataset(data.inputs, 1 - data.labels, 2)
    # a perfect linear separator, then the same model on flipped labels
    m = init_classifier(2, 2, hidden=(1,), dtype=np.float64)
    m.params = m.params.replace({
        "block0.linear.weight": np.array([[1.0], [1.0]]),
        "block0.bn.running_mean": np.zeros(1),
        "block0.bn.running_var": np.ones(1),
        "head.weight": np.array([[-1.0, 1.0]]),
        "head.bias": np.array([0.5, 0.0]),
    })
    assert empirical_task_risk(m, data) == 0.0
    assert empirical_task_risk(m, flipped) == 1.0
    one = LabeledDataset(data.inputs[:1], data.labels[:1], 2)
    assert empirical_task_risk(m, one) == 0.0


def test_wire_format_round_trip(rng, tmp_path):
    params = init_classifier(8, 4, rng=rng).params
    blob = serialize(params)
    assert blob[:4] == b"KD3A"
    back = deserialize(blob)
    assert back.manifest == params.manifest
    for a, b in zip(params.arrays, back.arrays):
        assert a.tobytes() == b.tobytes()
    assert serialize(back) == blob
    path = tmp_path / "m.kd3a"
    assert save_params(params, path) == len(blob)
    assert serialize(load_params(path)) == blob
    with pytest.raises(ValueError):
        deserialize(b"NOPE" + blob[4:])


finite32 = arrays(np.float32, st.integers(1, 6), elements=st.floats(-1e6, 1e6, width=32))


@settings(max_examples=50, deadline=None)
@given(st.lists(finite32, min_size=1, max_size=4))
def test_wire_format_round_trip_property(blocks):
    params = ModelParams(tuple(f"p{i}" for i in range(len(blocks))), tuple(blocks))
    back = deserialize(serialize(params))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(params.arrays, back.arrays))


def test_model_params_are_read_only(small_model):
    with pytest.raises(ValueError):
        small_model.params["head.bias"][0] = 1.0


def test_clip_grad_norm(small_model):
    grads = ModelParams(small_model.params.names, tuple(np.ones_like(a) for a in small_model.params.arrays))
    clipped = clip_grad_norm(grads, 1.0)
    trainable = [a for n, a in clipped.items() if not n.endswith(("running_mean", "running_var"))]
    assert np.sqrt(sum(np.sum(a**2) for a in trainable)) == pytest.approx(1.0)
    np.testing.assert_array_equal(clipped["block0.bn.running_var"], 1.0)
    assert clip_grad_norm(grads, 1e6) is grads
