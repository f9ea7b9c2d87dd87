import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import finite_difference_check, toy_gradient_problem
from slidecap.encoders import LOG_TEMPERATURE_MAX, init_params, normalize
from slidecap.errors import BatchTooSmallError, ShapeError, TrainingDivergedError
from slidecap.training import (
    TrainConfig,
    TrainState,
    adam_step,
    compute_gradients,
    contrastive_loss,
    contrastive_loss_from_logits,
    epoch_batches,
    format_log_line,
    train,
)


def unit_rows(rng, n, d):
    return normalize(rng.normal(size=(n, d)))


# -- loss ---------------------------------------------------------------------

def test_orthogonal_pairs_give_ln2():
    img = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
    txt = np.array([[0, 0, 1.0, 0], [0, 0, 0, 1.0]])
    loss, logits = contrastive_loss(img, txt, 0.0)
    assert np.all(logits == 0)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_two_by_two_closed_form():
    e = np.eye(2)
    loss, logits = contrastive_loss(e, e, math.log(2))
    np.testing.assert_allclose(logits, [[2, 0], [0, 2]])
    assert loss == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
    assert loss == pytest.approx(0.126928, abs=1e-6)


def test_saturated_alignment():
    e = np.eye(4)
    loss, _ = contrastive_loss(e, e, math.log(100))
    assert loss < 1e-6


@pytest.mark.parametrize("n", [2, 4, 8])
def test_uniform_logits_give_ln_n(n):
    loss, _ = contrastive_loss_from_logits(np.full((n, n), 3.7))
    assert loss == pytest.approx(math.log(n), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2**32 - 1), st.floats(-4.6, 4.6))
def test_loss_nonnegative_and_symmetric(n, seed, logt):
    rng = np.random.default_rng(seed)
    a, b = unit_rows(rng, n, 5), unit_rows(rng, n, 5)
    l1, _ = contrastive_loss(a, b, logt)
    l2, _ = contrastive_loss(b, a, logt)
    assert l1 >= 0
    assert l1 == pytest.approx(l2, rel=1e-12, abs=1e-12)


def test_loss_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        contrastive_loss(unit_rows(rng, 3, 4), unit_rows(rng, 2, 4), 0.0)
    with pytest.raises(BatchTooSmallError):
        contrastive_loss(unit_rows(rng, 1, 4), unit_rows(rng, 1, 4), 0.0)


def test_logit_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(5, 5)) * 3
    _, grad = contrastive_loss_from_logits(logits)
    h = 1e-6
    for i in range(5):
        for j in range(5):
            up, down = logits.copy(), logits.copy()
            up[i, j] += h
            down[i, j] -= h
            fd = (contrastive_loss_from_logits(up)[0] - contrastive_loss_from_logits(down)[0]) / (2 * h)
            assert grad[i, j] == pytest.approx(fd, abs=1e-8)


# -- gradients ----------------------------------------------------------------

def test_every_parameter_gets_a_matching_gradient():
    params, images, captions, cfg, ltc = toy_gradient_problem()
    loss, grads = compute_gradients(params, images, captions, cfg, ltc)
    assert math.isfinite(loss)
    assert set(grads) == set(params.names())
    for name in params:
        assert grads[name].shape == params[name].shape


@pytest.mark.parametrize("pool_kernel,before", [(1, False), (3, False), (1, True)])
def test_gradients_match_finite_differences(pool_kernel, before):
    problem = toy_gradient_problem(seed=pool_kernel, pool_kernel=pool_kernel, normalize_before_mean=before)
    errors = finite_difference_check(*problem, n_coords=60, seed=pool_kernel)
    worst = max(errors, key=lambda e: e[-1])
    assert worst[-1] < 1e-4, worst


def test_window_gradient_is_shared_by_mean():
    # the mean hands each of a caption's windows 1/count of the caption gradient
    from slidecap.longcap import caption_backward, caption_forward

    params, _, captions, cfg, ltc = toy_gradient_problem()
    out, cache = caption_forward(captions, params, cfg, ltc)
    seen = {}

    def spy(dwin, text_cache, p, c, grads):
        seen["dwin"] = dwin
        return grads

    import slidecap.longcap as lc
    real = lc.text_backward
    lc.text_backward = spy
    try:
        caption_backward(np.ones_like(out), cache, params, cfg, {})
    finally:
        lc.text_backward = real
    counts = cache[2]
    rows = np.split(seen["dwin"], np.cumsum(counts)[:-1])
    for block, count in zip(rows, counts):
        assert np.allclose(block, block[0])
        assert np.allclose(block.sum(axis=0), block[0] * count)


def test_nonfinite_loss_raises():
    params, images, captions, cfg, ltc = toy_gradient_problem()
    params["text.projection"] = params["text.projection"] * np.nan
    with pytest.raises(TrainingDivergedError):
        compute_gradients(params, images, captions, cfg, ltc)


# -- adam ---------------------------------------------------------------------

@pytest.fixture
def small_state():
    params, *_ = toy_gradient_problem()
    return TrainState.fresh(params)


def test_zero_gradient_leaves_params(small_state):
    zeros = {k: np.zeros_like(v) for k, v in small_state.params.items()}
    new = adam_step(small_state, zeros, TrainConfig(learning_rate=1e-3))
    assert new.step == 1
    for k in small_state.params:
        assert np.array_equal(new.params[k], small_state.params[k])


def test_first_step_moves_by_learning_rate(small_state):
    cfg = TrainConfig(learning_rate=1e-3)
    rng = np.random.default_rng(0)
    # keep |g| well above eps so the step is lr to within 1e-6
    grads = {k: rng.choice([-1, 1], size=v.shape) * rng.uniform(0.1, 1, size=v.shape)
             for k, v in small_state.params.items()}
    new = adam_step(small_state, grads, cfg)
    for k in small_state.params:
        if k == "log_temperature":
            continue
        g = grads[k]
        # m_hat = g and v_hat = g^2 after bias correction at t = 1
        expected = small_state.params[k] - cfg.learning_rate * g / (np.abs(g) + cfg.adam_eps)
        np.testing.assert_allclose(new.params[k], expected, rtol=0, atol=1e-15)
        np.testing.assert_allclose(np.abs(new.params[k] - small_state.params[k]), 1e-3, rtol=1e-6)


def test_adam_is_deterministic_and_pure(small_state):
    cfg = TrainConfig(learning_rate=1e-2)
    rng = np.random.default_rng(1)
    grads = {k: rng.normal(size=v.shape) for k, v in small_state.params.items()}
    before = {k: v.copy() for k, v in small_state.params.items()}
    a = adam_step(small_state, grads, cfg)
    b = adam_step(small_state, grads, cfg)
    for k in before:
        assert np.array_equal(small_state.params[k], before[k])
        assert a.params[k].tobytes() == b.params[k].tobytes()
        assert a.m[k].tobytes() == b.m[k].tobytes()


def test_temperature_is_clamped(small_state):
    grads = {k: np.zeros_like(v) for k, v in small_state.params.items()}
    grads["log_temperature"] = np.asarray(-1.0)
    small_state.params["log_temperature"] = np.asarray(LOG_TEMPERATURE_MAX - 1e-4)
    new = adam_step(small_state, grads, TrainConfig(learning_rate=1.0))
    assert new.params.log_temperature == pytest.approx(LOG_TEMPERATURE_MAX)


def test_adam_shape_mismatch(small_state):
    grads = {k: np.zeros_like(v) for k, v in small_state.params.items()}
    grads["text.projection"] = np.zeros((1, 1))
    with pytest.raises(ShapeError):
        adam_step(small_state, grads, TrainConfig())


# -- config and loop ----------------------------------------------------------

@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(batch_size=1), dict(learning_rate=0.0)])
def test_train_config_invariants(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_paper_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.epochs, cfg.batch_size) == (1e-6, 10, 50)


def test_step_count_for_hundred_samples():
    steps = sum(len(epoch_batches(100, 50, 0, e)) for e in range(10))
    assert steps == 20


def test_partial_batch_rules():
    assert [len(b) for b in epoch_batches(101, 50, 0, 0)] == [50, 50]
    assert [len(b) for b in epoch_batches(102, 50, 0, 0)] == [50, 50, 2]
    for e in range(3):
        batch = np.concatenate(epoch_batches(102, 50, 7, e))
        assert sorted(batch.tolist()) == list(range(102))


def test_log_line_format():
    line = format_log_line(3, 1.23456789123, 2.5)
    epoch, loss, secs = line.split("\t")
    assert epoch == "3" and loss == "1.23456789" and float(secs) == 2.5


def _tiny_dataset(seed=0):
    params, images, captions, cfg, ltc = toy_gradient_problem(seed)
    rng = np.random.default_rng(seed)
    images = rng.random((6, 8, 8, 3))
    captions = captions + captions[:2]
    return init_params(cfg, seed), images, captions, cfg, ltc


def test_train_runs_expected_steps_and_is_deterministic():
    params, images, captions, cfg, ltc = _tiny_dataset()
    tcfg = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=4, seed=5)
    runs = []
    for _ in range(2):
        state = train(images, captions, TrainState.fresh(params.copy()), tcfg, cfg, ltc)
        runs.append(state)
    assert runs[0].step == 3 * 2
    assert runs[0].epoch_losses == runs[1].epoch_losses
    for k in params:
        assert runs[0].params[k].tobytes() == runs[1].params[k].tobytes()


def test_train_writes_one_log_line_per_epoch():
    import io

    params, images, captions, cfg, ltc = _tiny_dataset()
    buf = io.StringIO()
    train(images, captions, TrainState.fresh(params), TrainConfig(learning_rate=1e-3, epochs=2, batch_size=3),
          cfg, ltc, log=buf)
    lines = buf.getvalue().splitlines()
    assert [ln.split("\t")[0] for ln in lines] == ["0", "1"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_last_finite_state():
    params, images, captions, cfg, ltc = _tiny_dataset()
    params["image.projection"] = params["image.projection"] * np.inf
    with pytest.raises(TrainingDivergedError) as info:
        train(images, captions, TrainState.fresh(params), TrainConfig(learning_rate=1e-3, epochs=1, batch_size=3),
              cfg, ltc)
    assert info.value.state is not None
    assert info.value.state.step == 0
