import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterfl.data import Dataset
from clusterfl.model import (Layout, ModelSpec, SgdConfig, UpdateTrace, forward, gradient,
                             gradient_norm_bound_estimate, init_params, local_update, loss, params_from_json,
                             params_to_json, predict, run_sgd, smoothness_bound)

SPECS = [ModelSpec("logistic", 4, 3), ModelSpec("mlp1", 4, 3, hidden_units=5)]


def _random_case(spec, seed, n=7):
    r = np.random.default_rng(seed)
    w = r.normal(scale=0.7, size=spec.layout.size)
    X = r.normal(size=(n, spec.n_features))
    y = r.integers(0, spec.n_classes, size=n)
    return w, Dataset(X, y, spec.n_classes)


def _loss_oracle(w, spec, X, y):
    # scalar loops, no shared code with the model module
    C, d = spec.n_classes, spec.n_features
    total = 0.0
    for x, t in zip(X, y):
        if spec.kind == "logistic":
            W, b = w[:C * d].reshape(C, d), w[C * d:]
            z = [sum(W[c, j] * x[j] for j in range(d)) + b[c] for c in range(C)]
        else:
            h = spec.hidden_units
            W1 = w[:h * d].reshape(h, d)
            b1 = w[h * d:h * d + h]
            W2 = w[h * d + h:h * d + h + C * h].reshape(C, h)
            b2 = w[h * d + h + C * h:]
            a = [math.tanh(sum(W1[u, j] * x[j] for j in range(d)) + b1[u]) for u in range(h)]
            z = [sum(W2[c, u] * a[u] for u in range(h)) + b2[c] for c in range(C)]
        total += -z[t] + math.log(sum(math.exp(v) for v in z))
    return total / len(y)


def test_layout_sizes_and_unpack():
    for spec in SPECS:
        lay = spec.layout
        w = np.arange(lay.size, dtype=float)
        parts = lay.unpack(w)
        assert sum(p.size for p in parts.values()) == lay.size
        assert np.concatenate([p.ravel() for p in parts.values()]).tolist() == w.tolist()


def test_layout_mask_selects_segments():
    lay = SPECS[1].layout
    m = lay.mask(["W2", "b2"])
    assert m.sum() == 3 * 5 + 3
    assert m[-(3 * 5 + 3):].all()
    with pytest.raises(ValueError):
        lay.mask(["nope"])


def test_params_json_round_trip():
    spec = SPECS[1]
    w = init_params(ModelSpec("mlp1", 4, 3, 5, init="gaussian"), seed=1)
    v, lay = params_from_json(params_to_json(w, spec.layout))
    assert v.tolist() == w.tolist() and lay == spec.layout


def test_modelspec_validation():
    with pytest.raises(ValueError):
        ModelSpec("mlp1", 3, 2, hidden_units=0)
    with pytest.raises(ValueError):
        ModelSpec("cnn", 3, 2)


def test_gaussian_init_is_seeded():
    spec = ModelSpec("logistic", 3, 2, init="gaussian", init_std=0.5)
    assert init_params(spec, 4).tolist() == init_params(spec, 4).tolist()
    assert not np.array_equal(init_params(spec, 4), init_params(spec, 5))


# --- forward / loss ---

@pytest.mark.parametrize("spec", SPECS)
def test_zero_params_uniform_and_log_c(spec):
    w = np.zeros(spec.layout.size)
    X = np.random.default_rng(0).normal(size=(5, spec.n_features))
    np.testing.assert_allclose(forward(w, spec, X), 1 / 3)
    d = Dataset(X, [0, 1, 2, 0, 1], 3)
    assert loss(w, spec, d) == pytest.approx(math.log(3), rel=1e-15)


def test_forward_two_by_two_hand_softmax():
    spec = ModelSpec("logistic", 2, 2)
    w = np.array([1.0, 2.0, -1.0, 0.5, 0.1, -0.2])  # W = [[1, 2], [-1, 0.5]], b = [0.1, -0.2]
    x = np.array([[0.5, -1.0]])
    z0, z1 = 0.5 - 2.0 + 0.1, -0.5 - 0.5 - 0.2
    p0 = math.exp(z0) / (math.exp(z0) + math.exp(z1))
    np.testing.assert_allclose(forward(w, spec, x)[0], [p0, 1 - p0], rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), scale=st.floats(0.0, 50.0))
def test_forward_rows_are_distributions(seed, scale):
    for spec in SPECS:
        w, d = _random_case(spec, seed)
        P = forward(w * scale, spec, d.features)
        np.testing.assert_allclose(P.sum(1), 1.0, atol=1e-9)
        assert (P >= 0).all() and (P <= 1).all()


def test_forward_shape_mismatch():
    with pytest.raises(ValueError):
        forward(np.zeros(SPECS[0].layout.size), SPECS[0], np.zeros((2, 5)))


def test_loss_limit_confident_correct():
    spec = ModelSpec("logistic", 1, 2)
    w = np.array([0.0, 0.0, 50.0, -50.0])  # b favours class 0
    assert loss(w, spec, Dataset(np.zeros((3, 1)), [0, 0, 0], 2)) < 1e-40


@pytest.mark.parametrize("spec", SPECS)
@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_direct_summation(spec, seed):
    w, d = _random_case(spec, seed)
    assert loss(w, spec, d) == pytest.approx(_loss_oracle(w, spec, d.features, d.labels), rel=1e-9)


def test_loss_is_order_invariant():
    spec = SPECS[1]
    w, d = _random_case(spec, 3, n=20)
    perm = np.random.default_rng(1).permutation(20)
    assert loss(w, spec, d) == pytest.approx(loss(w, spec, d.subset(perm)), rel=1e-13)


def test_predict_is_argmax():
    w, d = _random_case(SPECS[0], 2)
    assert predict(w, SPECS[0], d.features).tolist() == forward(w, SPECS[0], d.features).argmax(1).tolist()


# --- gradient ---

def _fd_directional(f, w, v, eps=1e-5):
    return (f(w + eps * v) - f(w - eps * v)) / (2 * eps)


@pytest.mark.parametrize("spec", SPECS)
@pytest.mark.parametrize("mu", [0.0, 0.95])
def test_gradient_matches_central_differences(spec, mu):
    r = np.random.default_rng(17)
    for trial in range(10):
        w, d = _random_case(spec, 100 + trial)
        anchor = r.normal(size=w.size)
        f = lambda p: loss(p, spec, d) + 0.5 * mu * float((p - anchor) @ (p - anchor))
        g = gradient(w, spec, d, prox_anchor=anchor, prox_mu=mu)
        v = r.normal(size=w.size)
        v /= np.linalg.norm(v)
        fd, an = _fd_directional(f, w, v), float(g @ v)
        assert abs(fd - an) <= 1e-5 * max(abs(an), abs(fd), 1e-3)


def test_gradient_prox_vanishes_at_anchor():
    spec = SPECS[0]
    w, d = _random_case(spec, 1)
    assert np.array_equal(gradient(w, spec, d), gradient(w, spec, d, prox_anchor=w.copy(), prox_mu=0.95))


def test_gradient_ignores_anchor_when_mu_zero():
    spec = SPECS[0]
    w, d = _random_case(spec, 1)
    assert np.array_equal(gradient(w, spec, d), gradient(w, spec, d, prox_anchor=w + 5, prox_mu=0.0))


def test_gradient_shape_errors():
    spec = SPECS[0]
    w, d = _random_case(spec, 1)
    with pytest.raises(ValueError):
        gradient(w[:-1], spec, d)
    with pytest.raises(ValueError):
        gradient(w, spec, d, prox_anchor=None, prox_mu=1.0)


def test_smoothness_bound_dominates_hessian_curvature():
    spec = SPECS[0]
    w, d = _random_case(spec, 4, n=30)
    beta = smoothness_bound(spec, d)
    r = np.random.default_rng(0)
    for _ in range(20):
        v = r.normal(size=w.size)
        v /= np.linalg.norm(v)
        h = 1e-4
        curv = (float(gradient(w + h * v, spec, d) @ v) - float(gradient(w - h * v, spec, d) @ v)) / (2 * h)
        assert curv <= beta * (1 + 1e-6)
    with pytest.raises(ValueError):
        smoothness_bound(SPECS[1], d)


# --- SGD ---

def test_sgd_defaults():
    cfg = SgdConfig()
    assert (cfg.learning_rate, cfg.momentum, cfg.batch_size, cfg.local_steps) == (0.001, 0.9, 32, 10)


@pytest.mark.parametrize("bad", [dict(momentum=1.0), dict(local_steps=0), dict(learning_rate=-1.0),
                                 dict(prox_mu=-0.1), dict(batch_size=0)])
def test_sgd_config_validation(bad):
    with pytest.raises(ValueError):
        SgdConfig(**bad)


def test_zero_learning_rate_is_a_null_step():
    spec = SPECS[1]
    w, d = _random_case(spec, 5, n=40)
    out, trace = local_update(w, spec, d, SgdConfig(learning_rate=0.0), rng_seed=1)
    assert out.tobytes() == w.tobytes()
    assert trace.displacement == 0.0 and len(trace.grad_norms) == 10


def test_one_step_on_quadratic_matches_closed_form():
    r = np.random.default_rng(2)
    A = r.normal(size=(6, 6))
    A = A @ A.T + np.eye(6)
    c = r.normal(size=6)
    w0 = r.normal(size=6)
    cfg = SgdConfig(learning_rate=0.01, momentum=0.0, local_steps=1, full_batch=True)
    out, _ = run_sgd(w0, lambda w, idx: A @ w - c, 10, cfg, rng_seed=0)
    np.testing.assert_allclose(out, w0 - 0.01 * (A @ w0 - c), rtol=0, atol=1e-12)


def test_full_batch_descent_on_quadratic():
    r = np.random.default_rng(3)
    A = np.diag(r.uniform(0.5, 4.0, size=5))
    f = lambda w: 0.5 * w @ A @ w
    cfg = SgdConfig(learning_rate=0.9 / 4.0, momentum=0.0, local_steps=1, full_batch=True)
    w = r.normal(size=5)
    vals = [f(w)]
    for q in range(15):
        w, _ = run_sgd(w, lambda p, idx: A @ p, 3, cfg, q)
        vals.append(f(w))
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_local_update_runs_exactly_q_steps_with_trace():
    spec = SPECS[0]
    w, d = _random_case(spec, 6, n=50)
    cfg = SgdConfig(learning_rate=0.1, batch_size=8, local_steps=9)
    out, trace = local_update(w, spec, d, cfg, rng_seed=3)
    assert len(trace.grad_norms) == len(trace.step_sizes) == len(trace.batch_indices) == 9
    # 50 = 6 * 8 + 2: the epoch ends on a short batch, then reshuffles
    assert [len(b) for b in trace.batch_indices] == [8] * 6 + [2] + [8] * 2
    first_epoch = np.concatenate(trace.batch_indices[:7])
    assert sorted(first_epoch.tolist()) == list(range(50))
    assert trace.displacement == pytest.approx(np.linalg.norm(out - w))


def test_local_update_bit_reproducible():
    spec = SPECS[1]
    w, d = _random_case(spec, 7, n=50)
    cfg = SgdConfig(learning_rate=0.05, batch_size=4)
    a, _ = local_update(w, spec, d, cfg, rng_seed=np.random.SeedSequence([1, 2, 3]))
    b, _ = local_update(w, spec, d, cfg, rng_seed=np.random.SeedSequence([1, 2, 3]))
    assert a.tobytes() == b.tobytes()


def test_full_batch_uses_every_index():
    spec = SPECS[0]
    w, d = _random_case(spec, 8, n=11)
    _, trace = local_update(w, spec, d, SgdConfig(full_batch=True, local_steps=3), rng_seed=0)
    assert all(b.tolist() == list(range(11)) for b in trace.batch_indices)


def test_local_update_momentum_matches_manual_recursion():
    spec = SPECS[0]
    w, d = _random_case(spec, 9, n=10)
    cfg = SgdConfig(learning_rate=0.1, momentum=0.9, local_steps=4, full_batch=True)
    out, _ = local_update(w, spec, d, cfg, rng_seed=0)
    p, v = w.copy(), np.zeros_like(w)
    for _ in range(4):
        v = 0.9 * v + gradient(p, spec, d)
        p = p - 0.1 * v
    np.testing.assert_allclose(out, p, rtol=1e-13, atol=1e-15)


def test_empty_shard_rejected():
    with pytest.raises(ValueError):
        run_sgd(np.zeros(2), lambda w, i: w, 0, SgdConfig(), 0)


# --- U estimate ---

def test_u_estimate_examples():
    assert gradient_norm_bound_estimate([UpdateTrace(grad_norms=[0.5, 0.2])]) == 0.5
    assert gradient_norm_bound_estimate([UpdateTrace(grad_norms=[0.0, 0.0])]) == 0.0
    with pytest.raises(ValueError):
        gradient_norm_bound_estimate([])


@given(st.lists(st.lists(st.floats(0, 1e6), min_size=1, max_size=5), min_size=1, max_size=5),
       st.lists(st.lists(st.floats(0, 1e6), min_size=1, max_size=5), min_size=1, max_size=5))
def test_u_estimate_concatenation(a, b):
    A = [UpdateTrace(grad_norms=x) for x in a]
    B = [UpdateTrace(grad_norms=x) for x in b]
    est = gradient_norm_bound_estimate
    assert est(A + B) == max(est(A), est(B))
    assert est(A + B) >= est(A)
