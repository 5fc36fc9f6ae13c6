import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fcgno.errors import DegenerateError
from fcgno.problems import GridDescriptor, make_diffusion_instance, make_instance, make_poisson_instance
from fcgno.sparse import a_norm, spmv
from fcgno.spectral import as_preconditioner, init_params, zero_params_like
from fcgno.training import (
    KrylovSample,
    TrainConfig,
    batch_loss,
    five_point_stencil,
    apply_stencil,
    generate_krylov_dataset,
    generate_random_dataset,
    l2_loss,
    load_dataset,
    loss_gradient,
    make_training_set,
    notay_loss,
    save_dataset,
    train,
    training_problems,
)

F64 = torch.float64


@pytest.fixture(scope="module")
def small():
    probs = [make_instance(k, GridDescriptor(7), s) for k, s in (("poisson", 0), ("diffusion", 1))]
    return probs, generate_krylov_dataset(probs, 20, seed=0)


def _zero_bias(p):
    for k in p.tensors:
        if "_b" in k:
            p.tensors[k].zero_()
    return p


def test_krylov_dataset_counts_and_consistency(small):
    probs, samples = small
    assert len(samples) == 40
    for s in samples:
        A = probs[s.problem_index].matrix
        assert np.linalg.norm(spmv(A, s.e) - s.r) <= 1e-10 * np.linalg.norm(s.r)
    assert [s.source_iteration for s in samples[:20]] == list(range(1, 21))


def test_krylov_late_residuals_smaller_than_first():
    probs = [make_poisson_instance(GridDescriptor(16), s) for s in range(3)]
    samples = generate_krylov_dataset(probs, 100, seed=0)
    for j in range(3):
        norms = [np.linalg.norm(s.r) for s in samples if s.problem_index == j]
        assert norms[-1] < norms[0]


def test_krylov_residual_norms_nonincreasing():
    # nonstrict decrease of ||r_i||_2 along each recorded CG run
    probs = [make_poisson_instance(GridDescriptor(16), s) for s in range(3)]
    samples = generate_krylov_dataset(probs, 100, seed=0)
    for j in range(3):
        norms = np.array([np.linalg.norm(s.r) for s in samples if s.problem_index == j])
        assert np.all(np.diff(norms) <= 0)


def test_krylov_error_energy_nonincreasing():
    probs = [make_diffusion_instance(GridDescriptor(16), s) for s in range(3)]
    samples = generate_krylov_dataset(probs, 100, seed=0)
    for j in range(3):
        A = probs[j].matrix
        en = np.array([a_norm(A, s.e) for s in samples if s.problem_index == j])
        assert np.all(np.diff(en) <= 1e-12 * en[0])


def test_random_dataset_larger_residuals():
    probs = [make_poisson_instance(GridDescriptor(16), s) for s in range(2)]
    kry = generate_krylov_dataset(probs, 30, seed=0)
    ran = generate_random_dataset(probs, 30, seed=0)
    assert len(ran) == 60
    assert np.median([np.linalg.norm(s.r) for s in kry]) < np.median([np.linalg.norm(s.r) for s in ran])
    for s in ran:
        A = probs[s.problem_index].matrix
        assert np.linalg.norm(spmv(A, s.e) - s.r) <= 1e-10 * np.linalg.norm(s.r)


def test_dataset_roundtrip(tmp_path, small):
    probs, samples = small
    save_dataset(tmp_path, probs, samples, {"note": "x"})
    p2, s2, meta = load_dataset(tmp_path)
    assert meta["sample_count"] == 40 and meta["grid"] == 7 and meta["note"] == "x"
    assert all(np.array_equal(a.r, b.r) and np.array_equal(a.e, b.e)
               and a.problem_index == b.problem_index and a.source_iteration == b.source_iteration
               for a, b in zip(samples, s2))
    assert all(np.array_equal(a.a, b.a) for a, b in zip(probs, p2))


def test_stencil_matches_matrix():
    p = make_diffusion_instance(GridDescriptor(9), 3)
    st_ = torch.tensor(five_point_stencil(p.matrix, 9))[None]
    v = np.random.default_rng(0).standard_normal(81)
    Av = apply_stencil(st_, torch.tensor(v.reshape(1, 9, 9)))[0].numpy().reshape(-1)
    assert np.allclose(Av, spmv(p.matrix, v), rtol=1e-13, atol=1e-10)


def test_loss_reference_outputs(small):
    probs, samples = small
    data = make_training_set(probs, samples, F64)
    p = init_params(4, 3, dtype=F64)
    assert notay_loss(p, data, output=data.e.clone()) < 1e-8
    assert l2_loss(p, data, output=data.e.clone()) < 1e-12
    assert notay_loss(p, data, output=torch.zeros_like(data.e)) == pytest.approx(1.0, abs=1e-12)
    assert l2_loss(p, data, output=torch.zeros_like(data.e)) == pytest.approx(1.0, abs=1e-12)
    assert l2_loss(p, data, output=2 * data.e) == pytest.approx(1.0, abs=1e-12)
    assert notay_loss(p, data, output=2 * data.e) == pytest.approx(1.0, abs=1e-12)


def test_notay_matches_dense_oracle(small):
    probs, samples = small
    p = init_params(6, 4, dtype=F64, seed=5)
    data = make_training_set(probs, samples, F64)
    ref = []
    for s in samples:
        prob = probs[s.problem_index]
        A = prob.matrix.to_dense()
        d = as_preconditioner(p, prob)(s.r) - s.e
        ref.append(np.sqrt(d @ A @ d) / np.sqrt(s.e @ A @ s.e))
    assert notay_loss(p, data) == pytest.approx(np.mean(ref), rel=1e-10)


def test_degenerate_sample(small):
    probs, samples = small
    data = make_training_set(probs, samples[:2], F64)
    data.e[0] = 0
    with pytest.raises(DegenerateError):
        batch_loss(init_params(4, 3, dtype=F64), data, "notay")


@pytest.mark.parametrize("kind", ["notay", "l2"])
@pytest.mark.parametrize("basis", ["sine", "fourier"])
def test_gradient_matches_finite_differences(small, kind, basis):
    probs, samples = small
    data = make_training_set(probs, samples[::5], F64)
    p = init_params(4, 3, basis=basis, dtype=F64, seed=2)
    grads = loss_gradient(p, data, kind)
    rng = np.random.default_rng(0)
    names = p.names()
    h = 1e-5
    # round-off in the difference quotient is ~1e-9 absolute; scale the floor to the gradient
    floor = 1e-6 * max(float(v.abs().max()) for v in grads.values())
    worst = 0.0
    for _ in range(50):
        name = names[rng.integers(len(names))]
        t = p.tensors[name]
        flat = int(rng.integers(t.numel()))
        view = t.view(-1)
        old = float(view[flat])
        view[flat] = old + h
        lp = float(batch_loss(p, data, kind))
        view[flat] = old - h
        lm = float(batch_loss(p, data, kind))
        view[flat] = old
        fd = (lp - lm) / (2 * h)
        g = float(grads[name].reshape(-1)[flat])
        worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), floor))
    assert worst < 1e-5


def test_stationary_at_mean_error():
    prob = make_poisson_instance(GridDescriptor(2), 0)
    r = np.array([1.0, -0.5, 2.0, 0.25])
    from fcgno.sparse import reference_solve
    e = reference_solve(prob.matrix, r)
    data = make_training_set([prob], [KrylovSample(0, r, e, 1)], F64)
    p = zero_params_like(init_params(3, 2, dtype=F64))
    p.tensors["dec_b"][0] = float(data.e.mean())
    g = loss_gradient(p, data, "l2")
    assert abs(float(g["dec_b"][0])) < 1e-12


def test_batch_gradient_is_mean_of_singletons(small):
    probs, samples = small
    data = make_training_set(probs, samples[:3], F64)
    p = init_params(4, 3, dtype=F64, seed=1)
    full = loss_gradient(p, data, "notay")
    parts = [loss_gradient(p, data.batch([i]), "notay") for i in range(3)]
    for name in full:
        assert torch.allclose(full[name], sum(q[name] for q in parts) / 3, rtol=1e-10, atol=1e-13)


@settings(max_examples=10)
@given(exp=st.integers(-8, 8))
def test_loss_scale_invariant(small, exp):
    probs, samples = small
    p = init_params(4, 3, dtype=F64, seed=3)
    base = notay_loss(p, make_training_set(probs, samples[:6], F64))
    s = 10.0**exp
    scaled = [KrylovSample(q.problem_index, s * q.r, s * q.e, q.source_iteration) for q in samples[:6]]
    assert notay_loss(p, make_training_set(probs, scaled, F64)) == pytest.approx(base, rel=1e-9)


def test_loss_scale_1e6(small):
    probs, samples = small
    p = init_params(4, 3, dtype=F64, seed=3)
    scaled = [KrylovSample(q.problem_index, 1e6 * q.r, 1e6 * q.e, 1) for q in samples]
    assert l2_loss(p, make_training_set(probs, scaled, F64)) == pytest.approx(
        l2_loss(p, make_training_set(probs, samples, F64)), rel=1e-9)


def _toy_config(**kw):
    base = dict(kind="poisson", grid=7, epochs=3, batch_size=8, n_train=2, m_cg=10,
                width=4, modes=3, layers=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_training_deterministic():
    cfg = _toy_config()
    probs = training_problems(cfg)
    a, b = train(probs, cfg), train(probs, cfg)
    assert [c[1] for c in a.curve] == [c[1] for c in b.curve]
    for name in a.params.names():
        assert torch.equal(a.params.tensors[name], b.params.tensors[name])


def test_training_curve_finite_and_improves():
    cfg = _toy_config(epochs=20, lr=3e-3)
    res = train(training_problems(cfg), cfg)
    losses = [c[1] for c in res.curve]
    assert len(losses) == 20 and all(np.isfinite(losses))
    assert min(losses) <= losses[0]
    assert res.params.is_finite()


def test_single_sample_overfit():
    prob = make_poisson_instance(GridDescriptor(7), 0)
    sample = generate_krylov_dataset([prob], 1, seed=0)
    cfg = TrainConfig(kind="poisson", grid=7, epochs=500, batch_size=1, n_train=1, width=8,
                      modes=7, layers=2, lr=1e-2, lr_step=200, seed=0)
    res = train([prob], cfg, samples=sample)
    assert res.curve[-1][1] < 0.1


def test_step_schedule():
    cfg = _toy_config(epochs=5, lr_step=2, lr_gamma=0.5, lr=1e-3)
    lrs = [c[2] for c in train(training_problems(cfg), cfg).curve]
    assert lrs == pytest.approx([1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4])


def test_recipe_tables():
    assert TrainConfig.recipe("diffusion", 64).width == 48
    assert TrainConfig.recipe("poisson", 128).batch_size == 8
    assert TrainConfig.recipe("poisson", 32).epochs == 200
    with pytest.raises(ValueError):
        TrainConfig(loss="huber")
