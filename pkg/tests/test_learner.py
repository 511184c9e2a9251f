from __future__ import annotations

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jlcm.learner import (
    NumericError,
    Schedule,
    SoftMapping,
    Trace,
    UpdateRule,
    finalize,
    grad_codebooks,
    grad_mapping_naive,
    grad_mapping_proximal,
    hardness_fraction,
    hardness_penalty,
    loss_total,
    optimize_layer,
    proximal_matrix,
    soft_reconstruct,
    softmax,
    standard_factor,
    upstream_gradient,
)
from jlcm.model_io import Activation, LinearLayer
from jlcm.planner import Mode
from jlcm.reorder import CodebookSet, HardMapping, group_boundaries, reconstruct

MOTIVATING_BOOK = np.array([-2.0, 0.0, 0.15, 1.3])


def single_book(values, n_o=1):
    return CodebookSet(Mode.MULTI_CODEBOOK, np.asarray(values, dtype=float)[None, :], group_boundaries(n_o, 1))


def random_instance(rng, n_o=4, n_i=4, q=4, k=2, act=Activation.GELU, mode=Mode.MULTI_CODEBOOK, batch=6):
    if mode is Mode.MULTI_CODEBOOK:
        cbs = CodebookSet(mode, np.sort(rng.normal(size=(k, q)), axis=1), group_boundaries(n_o, k))
    else:
        cbs = CodebookSet(mode, np.sort(rng.normal(size=(1, q)), axis=1), group_boundaries(n_o, k),
                          rng.uniform(0.5, 2.0, size=k))
    mapping = SoftMapping(rng.normal(size=(n_o, n_i, q)))
    layer = LinearLayer(rng.normal(size=(n_o, n_i)), rng.normal(size=n_o), act)
    x = rng.normal(size=(batch, n_i))
    x_tilde = x + 0.1 * rng.normal(size=x.shape)
    return cbs, mapping, layer, x_tilde, x


# ----------------------------------------------------------- reconstruction


def test_soft_reconstruct_examples():
    logits = np.zeros((1, 1, 4))
    logits[0, 0, 2] = 60.0
    assert soft_reconstruct(single_book(MOTIVATING_BOOK), SoftMapping(logits))[0, 0] == pytest.approx(0.15, abs=1e-6)
    assert soft_reconstruct(single_book([-1.0, 1.0]), SoftMapping(np.zeros((1, 1, 2))))[0, 0] == 0.0
    half = SoftMapping(np.array([[[0.0, np.log(3.0)]]]))
    assert soft_reconstruct(single_book([0.0, 2.0]), half)[0, 0] == pytest.approx(1.5, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_softmax_rows_sum_to_one(seed, shift):
    logits = np.random.default_rng(seed).normal(scale=20, size=(3, 5, 8)) + shift
    np.testing.assert_allclose(softmax(logits).sum(axis=-1), 1.0, atol=1e-6)


# --------------------------------------------------------------------- loss


def test_loss_zero_at_exact_assignment(rng):
    book = np.array([-1.0, 0.0, 0.5, 2.0])
    idx = rng.integers(0, 4, size=(3, 5))
    layer = LinearLayer(book[idx], None, Activation.RELU)
    mapping = SoftMapping.from_hard(HardMapping(idx), 4, scale=80.0)
    x = rng.normal(size=(7, 5))
    _, parts = loss_total(single_book(book, 3), mapping, x, x, layer, Schedule(), 0)
    assert parts["recon"] < 1e-12 and parts["l1"] < 1e-12


def test_hardness_penalty_values():
    np.testing.assert_array_equal(hardness_penalty(np.array([0.5, 1.0, 0.0]), 2.0), [1.0, 0.0, 0.0])
    p = np.random.default_rng(0).uniform(size=1000)
    for beta in (2.0, 7.3, 20.0):
        h = hardness_penalty(p, beta)
        assert np.all((h >= 0) & (h <= 1))


def test_warmup_omits_hardness_term(rng):
    cbs, mapping, layer, xt, x = random_instance(rng)
    sched = Schedule(iterations=100, lam=5.0)
    t0, p0 = loss_total(cbs, mapping, xt, x, layer, sched, 0)
    t1, p1 = loss_total(cbs, mapping, xt, x, layer, sched, 20)
    assert t0 == pytest.approx(p0["recon"] + p0["l1"])
    assert t1 == pytest.approx(p1["recon"] + p1["l1"] + 5.0 * p1["l2"])
    assert p0["beta"] == 20.0


def test_schedule():
    s = Schedule(iterations=100)
    assert s.warmup_steps == 20 and not s.regularized(19) and s.regularized(20)
    betas = [s.beta(t) for t in range(100)]
    assert betas[0] == 20.0 and betas[-1] == pytest.approx(2.0 + 18.0 / 80)
    assert all(a >= b for a, b in zip(betas[20:], betas[21:]))
    with pytest.raises(ValueError):
        Schedule(lam=-1.0)


# ------------------------------------------------------------ codebook grad


def test_grad_c_zero_upstream(rng):
    cbs, mapping, *_ = random_instance(rng)
    assert np.all(grad_codebooks(cbs, mapping.probabilities(), np.zeros((4, 4))) == 0)


def test_grad_c_one_hot_reduces_to_sums(rng):
    book = np.array([[-1.0, 0.0, 1.0]])
    cbs = CodebookSet(Mode.MULTI_CODEBOOK, book, group_boundaries(2, 1))
    idx = np.array([[0, 2, 2], [1, 0, 2]])
    p = SoftMapping.from_hard(HardMapping(idx), 3).one_hot()
    up = rng.normal(size=(2, 3))
    g = grad_codebooks(cbs, p, up)
    np.testing.assert_allclose(g[0], [up[0, 0] + up[1, 1], up[1, 0], up[0, 1] + up[0, 2] + up[1, 2]])


def _fd_codebooks(cbs, mapping, xt, x, layer, h=1e-5):
    sched = Schedule(iterations=10)
    fd = np.zeros_like(cbs.codebooks)
    for idx in np.ndindex(cbs.codebooks.shape):
        plus, minus = cbs.copy(), cbs.copy()
        plus.codebooks[idx] += h
        minus.codebooks[idx] -= h
        fd[idx] = (loss_total(plus, mapping, xt, x, layer, sched, 0)[0]
                   - loss_total(minus, mapping, xt, x, layer, sched, 0)[0]) / (2 * h)
    return fd


@pytest.mark.parametrize("mode", list(Mode))
@pytest.mark.parametrize("act", list(Activation))
def test_grad_c_matches_finite_differences(rng, mode, act):
    for _ in range(3):
        cbs, mapping, layer, xt, x = random_instance(rng, act=act, mode=mode)
        up = upstream_gradient(cbs, mapping, xt, x, layer)
        g = grad_codebooks(cbs, mapping.probabilities(), up)
        fd = _fd_codebooks(cbs, mapping, xt, x, layer)
        assert np.all(np.abs(g - fd) / (np.abs(g) + 1e-8) < 1e-4)


# ------------------------------------------------------------- mapping grad


def test_motivating_example_proximal_row():
    cbs = single_book(MOTIVATING_BOOK)
    d = proximal_matrix(cbs, np.array([[2]]))[0, 0]
    np.testing.assert_allclose(d, [1 / 3.15, 1 / 1.15, 0.0, -1 / 2.15], rtol=1e-12)
    np.testing.assert_allclose(d, [0.3175, 0.8696, 0.0, -0.4651], atol=1e-3)
    off = [j for j in range(4) if j != 2]
    assert MOTIVATING_BOOK[off[int(np.argmax(np.abs(d[off])))]] == 0.0
    std = standard_factor(MOTIVATING_BOOK, 2)
    assert MOTIVATING_BOOK[off[int(np.argmax(np.abs(std[off])))]] == -2.0


def test_proximal_diagonal_zero_and_zero_upstream(rng):
    cbs, mapping, *_ = random_instance(rng)
    d = proximal_matrix(cbs, mapping.argmax())
    np.testing.assert_array_equal(np.take_along_axis(d, mapping.argmax()[..., None], axis=-1), 0.0)
    assert np.all(grad_mapping_proximal(cbs, mapping, np.zeros((4, 4))) == 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_proximal_decreasing_with_distance(seed):
    rng = np.random.default_rng(seed)
    book = np.sort(rng.normal(scale=3, size=rng.integers(3, 17)))
    a = int(rng.integers(book.size))
    d = proximal_matrix(single_book(book), np.array([[a]]))[0, 0]
    for side in (book < book[a], book > book[a]):
        j = np.flatnonzero(side)
        order = np.argsort(np.abs(book[j] - book[a]))
        mags = np.abs(d[j][order])
        assert np.all(np.diff(mags) < 0)


def test_proximal_descends_like_chain_rule(rng):
    """First-order loss change of a small proximal step has the chain rule's sign."""
    cbs = single_book([-1.0, 0.0, 1.0], 1)
    logits = np.zeros((1, 1, 3))
    logits[0, 0, 1] = 3.0
    mapping = SoftMapping(logits)
    for up in (np.array([[0.7]]), np.array([[-0.7]])):
        g_prox = grad_mapping_proximal(cbs, mapping, up)
        g_exact = grad_mapping_naive(cbs, mapping, up)
        assert float(np.sum(g_prox * g_exact)) > 0


def _fd_logits(cbs, mapping, xt, x, layer, sched, step, h=1e-5):
    fd = np.zeros_like(mapping.logits)
    for idx in np.ndindex(mapping.logits.shape):
        plus, minus = mapping.copy(), mapping.copy()
        plus.logits[idx] += h
        minus.logits[idx] -= h
        fd[idx] = (loss_total(cbs, plus, xt, x, layer, sched, step)[0]
                   - loss_total(cbs, minus, xt, x, layer, sched, step)[0]) / (2 * h)
    return fd


def test_naive_rule_is_exact_gradient(rng):
    sched = Schedule(iterations=10, lam=0.3)
    for step in (0, 5):
        cbs, mapping, layer, xt, x = random_instance(rng, n_o=3, n_i=2, q=3, k=1)
        up = upstream_gradient(cbs, mapping, xt, x, layer)
        lam = sched.lam if sched.regularized(step) else 0.0
        g = grad_mapping_naive(cbs, mapping, up, lam, sched.beta(step))
        fd = _fd_logits(cbs, mapping, xt, x, layer, sched, step)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-9)


def test_proximal_hardness_term_is_exact(rng):
    cbs, mapping, layer, xt, x = random_instance(rng, n_o=2, n_i=2, q=3, k=1)
    zero = np.zeros((2, 2))
    g = grad_mapping_proximal(cbs, mapping, zero, lam=1.0, beta=3.0)
    h = 1e-6
    fd = np.zeros_like(g)
    for idx in np.ndindex(g.shape):
        plus, minus = mapping.copy(), mapping.copy()
        plus.logits[idx] += h
        minus.logits[idx] -= h
        fd[idx] = (hardness_penalty(plus.probabilities(), 3.0).mean()
                   - hardness_penalty(minus.probabilities(), 3.0).mean()) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-10)


# -------------------------------------------------------------- optimization


def planted_layer(rng, n_o=8, n_i=8, jitter=0.05):
    book = np.array([-1.5, -0.5, 0.5, 1.5])
    idx = rng.integers(0, 4, size=(n_o, n_i))
    layer = LinearLayer(book[idx], None, Activation.IDENTITY)
    cbs = single_book(book * (1 + jitter * rng.normal(size=4)), n_o)
    return layer, cbs, HardMapping(idx)


def test_planted_jitter_recovered(rng):
    layer, cbs, hard = planted_layer(rng)
    x = rng.normal(size=(64, 8))
    sched = Schedule(iterations=2000, lr_codebook=1e-3)
    mapping = SoftMapping.from_hard(hard, 4, 8.0)
    out_c, _, trace = optimize_layer(layer, cbs, mapping, x, x, sched, UpdateRule.PROXIMAL)
    first, last = trace.rows[0][2], trace.rows[-1][2]
    assert last < first / 10


def test_zero_iterations_unchanged(rng):
    cbs, mapping, layer, xt, x = random_instance(rng)
    c2, m2, trace = optimize_layer(layer, cbs, mapping, xt, x, Schedule(iterations=0))
    np.testing.assert_array_equal(c2.codebooks, cbs.codebooks)
    np.testing.assert_array_equal(m2.logits, mapping.logits)
    assert len(trace) == 0


def test_inputs_not_modified(rng):
    cbs, mapping, layer, xt, x = random_instance(rng)
    before = (cbs.codebooks.copy(), mapping.logits.copy())
    optimize_layer(layer, cbs, mapping, xt, x, Schedule(iterations=5))
    np.testing.assert_array_equal(cbs.codebooks, before[0])
    np.testing.assert_array_equal(mapping.logits, before[1])


def test_large_lambda_hardens(rng):
    layer, cbs, hard = planted_layer(rng, jitter=0.3)
    x = rng.normal(size=(32, 8))
    sched = Schedule(lam=10.0)
    for rule in (UpdateRule.PROXIMAL, UpdateRule.NAIVE):
        mapping = SoftMapping.from_hard(hard, 4, sched.init_logit)
        _, out, _ = optimize_layer(layer, cbs, mapping, x, x, sched, rule)
        assert hardness_fraction(out) >= 0.99


@pytest.mark.parametrize("rule", list(UpdateRule))
def test_optimize_deterministic(rng, rule):
    cbs, mapping, layer, xt, x = random_instance(rng, batch=12)
    sched = Schedule(iterations=60, batch_size=5)
    a = optimize_layer(layer, cbs, mapping, xt, x, sched, rule)
    b = optimize_layer(layer, cbs, mapping, xt, x, sched, rule)
    assert a[2].rows == b[2].rows
    assert a[1].logits.tobytes() == b[1].logits.tobytes()
    np.testing.assert_allclose(softmax(a[1].logits).sum(axis=-1), 1.0, atol=1e-6)


def test_codebook_rule_keeps_mapping(rng):
    cbs, mapping, layer, xt, x = random_instance(rng)
    _, out, _ = optimize_layer(layer, cbs, mapping, xt, x, Schedule(iterations=20), UpdateRule.CODEBOOK)
    np.testing.assert_array_equal(out.logits, mapping.logits)


def test_divergence_aborts_with_trace(rng):
    cbs, mapping, layer, xt, x = random_instance(rng)
    sched = Schedule(iterations=200, lr_codebook=1e4, warmup_fraction=0.0)
    with pytest.raises(NumericError) as err:
        optimize_layer(layer, cbs, mapping, xt, x, sched, UpdateRule.CODEBOOK)
    assert err.value.trace is not None and len(err.value.trace) >= 2


def test_trace_csv():
    t = Trace()
    t.append(0, 1.5, {"recon": 1.0, "l1": 0.5, "l2": 0.25}, 20.0)
    text = t.to_csv()
    assert text.splitlines()[0] == "step,total,recon,l1,l2,beta"
    assert text.splitlines()[1] == "0,1.5,1.0,0.5,0.25,20.0"
    buf = io.StringIO()
    t.to_csv(buf)
    assert buf.getvalue() == text


# ----------------------------------------------------------------- finalize


def test_finalize_one_hot_identity(rng):
    idx = rng.integers(0, 4, size=(3, 3))
    cbs = single_book(MOTIVATING_BOOK, 3)
    out_c, hard = finalize(cbs, SoftMapping.from_hard(HardMapping(idx), 4))
    np.testing.assert_array_equal(hard.indices, idx)
    np.testing.assert_array_equal(out_c.codebooks, MOTIVATING_BOOK.astype(np.float16)[None, :])


def test_finalize_tie_goes_low():
    _, hard = finalize(single_book(MOTIVATING_BOOK), SoftMapping(np.zeros((1, 2, 4))))
    np.testing.assert_array_equal(hard.indices, 0)


def test_finalize_softness_bound(rng):
    layer, cbs, hard = planted_layer(rng, jitter=0.2)
    x = rng.normal(size=(32, 8))
    c2, m2, _ = optimize_layer(layer, cbs, SoftMapping.from_hard(hard, 4, 1.0), x, x,
                               Schedule(iterations=800))
    soft = soft_reconstruct(c2, m2)
    fc, fh = finalize(c2, m2)
    hard_w = reconstruct(c2, fh)  # compare before f16 rounding
    p = m2.probabilities()
    residual = float(np.max(1.0 - p.max(axis=-1)))
    gap = float(np.ptp(c2.codebooks))
    assert np.max(np.abs(soft - hard_w)) <= gap * residual + 1e-12
