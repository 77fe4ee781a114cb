import itertools
import math

import numpy as np
import pytest

from vcae.distributions import BernoulliParams, bernoulli_logpmf
from vcae.estimators import (
    NvilState,
    StepResult,
    hybrid_vcae_step,
    nvil_score_grad,
    pathwise_backward,
    variance_probe,
)
from vcae.models import Model, ModelSpec
from vcae.nets import ParamStore
from vcae.numerics import (
    ContractViolation,
    Node,
    NonFiniteGradient,
    RngStream,
    backward,
    detach,
    finite_diff_grad,
    mean_all,
    sigmoid,
    softplus,
    sum_rows,
)


def flatten_grads(model, grads):
    return np.concatenate(
        [
            grads.get(n, np.zeros_like(model.store.entry(n).param)).ravel()
            for n in model.store.names()
        ]
    )


def set_flat(model, flat):
    pos = 0
    for n in model.store.names():
        p = model.store.entry(n).param
        p[...] = flat[pos : pos + p.size].reshape(p.shape)
        pos += p.size


def get_flat(model):
    return np.concatenate([model.store.entry(n).param.ravel() for n in model.store.names()])


# ---------------------------------------------------------------------------
# pathwise
# ---------------------------------------------------------------------------


def test_pathwise_kl_only_matches_analytic():
    # KL(N(mu, sigma) || N(0,1)): d/dmu = mu, d/dlog_sigma = sigma^2 - 1
    from vcae.distributions import DiagGaussianParams, gaussian_kl_to_standard

    mu = Node(np.array([[0.6, -1.1]]))
    log_std = Node(np.array([[0.3, -0.2]]))
    loss = mean_all(gaussian_kl_to_standard(DiagGaussianParams(mu, log_std)))
    grads = pathwise_backward(loss, {"mu": mu, "log_std": log_std})
    assert np.max(np.abs(grads["mu"] - detach(mu))) <= 1e-12
    expected = np.exp(2.0 * detach(log_std)) - 1.0
    assert np.max(np.abs(grads["log_std"] - expected)) <= 1e-12


def test_pathwise_full_vae_matches_finite_differences():
    spec = ModelSpec("vae", x_dim=5, z_dim=3, s_dim=2, hidden="nonlinear", hidden_width=4)
    m = Model.build(spec, init_seed=11)
    x = (RngStream(seed=1).uniform01((3, 5)) > 0.5).astype(float)
    res = m.single_sample_grads(x, RngStream(seed=50))
    flat0 = get_flat(m)

    def loss_at(flat):
        set_flat(m, flat)
        est, _ = m.bound(x, RngStream(seed=50))  # common random numbers
        return -est.total

    fd = finite_diff_grad(loss_at, flat0.copy())
    set_flat(m, flat0)
    ana = flatten_grads(m, res.grads)
    denom = np.maximum(np.abs(fd), 1e-6)
    assert np.max(np.abs(ana - fd) / denom) <= 1e-4


def test_pathwise_zero_decoder_reconstruction_gradient():
    # with decoder weights zeroed the Bernoulli head sits at logits 0 and the
    # reconstruction gradient w.r.t. the head bias is mean(sigmoid(0) - x)
    spec = ModelSpec("vae", x_dim=4, z_dim=2, s_dim=2)
    m = Model.build(spec, init_seed=2)
    for name in m.store.names():
        if name.startswith("phi."):
            m.store.entry(name).param.fill(0.0)
    x = np.array([[1.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 0.0]])
    res = m.single_sample_grads(x, RngStream(seed=3))
    expected = (0.5 - x).mean(axis=0)
    assert np.max(np.abs(res.grads["phi.head_b"] - expected)) <= 1e-12


def test_pathwise_rejects_hard_bernoulli_route():
    from vcae.estimators import GraphConstructionError

    spec = ModelSpec("vae_con", x_dim=4, s_dim=2, z_dim=2, surrogate="bernoulli", latent="bernoulli")
    m = Model.build(spec, init_seed=1)
    x = np.ones((2, 4))
    with pytest.raises(GraphConstructionError):
        m.single_sample_grads(x, RngStream(seed=1))


# ---------------------------------------------------------------------------
# NVIL score gradients
# ---------------------------------------------------------------------------


def make_nvil_state(input_dim, zero_baseline=True, seed=5):
    state = NvilState.build(input_dim, RngStream(seed=seed))
    if zero_baseline:
        for name in state.store.names():
            state.store.entry(name).param.fill(0.0)
    return state


def test_nvil_fully_explained_signal_gives_zero_gradient():
    state = make_nvil_state(2)
    state.c = 1.7  # running mean exactly explains the constant signal
    theta = Node(np.array([0.3, -0.8]))
    z = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    logq = bernoulli_logpmf(BernoulliParams(theta), z)
    signal = np.full(3, 1.7)
    x = np.zeros((3, 2))
    surrogate = nvil_score_grad(signal, logq, x, state, state.store.leaves(), update=False)
    grads = pathwise_backward(surrogate, {"theta": theta})
    assert "theta" not in grads or np.max(np.abs(grads["theta"])) <= 1e-15


def test_nvil_nonfinite_signal_aborts():
    state = make_nvil_state(2)
    theta = Node(np.zeros(2))
    logq = bernoulli_logpmf(BernoulliParams(theta), np.zeros((1, 2)))
    with pytest.raises(NonFiniteGradient):
        nvil_score_grad(np.array([np.nan]), logq, np.zeros((1, 2)), state, state.store.leaves())


def enumerated_objective(theta, f):
    states = np.array(list(itertools.product([0.0, 1.0], repeat=4)))
    log_pmf = (states * theta - softplus(theta)).sum(axis=1)
    return float(np.sum(np.exp(log_pmf) * f(states)))


def nvil_chunk_estimate(theta_val, f, state, stream, batch):
    """Mean gradient of the loss -E[f(z)] over one chunk via the score surrogate.

    The surrogate performs ascent on E[signal], so the learning signal is +f.
    """
    theta = Node(theta_val)
    logits = theta * np.ones((batch, 1))
    q = BernoulliParams(logits)
    z = (stream.uniform01((batch, 4)) < sigmoid(theta_val)).astype(float)
    logq = bernoulli_logpmf(q, z)
    surrogate = nvil_score_grad(f(z), logq, np.zeros((batch, 1)), state, state.store.leaves(), update=False)
    grads = pathwise_backward(surrogate, {"theta": theta})
    return grads["theta"]


def test_nvil_unbiased_on_enumerable_objective():
    theta0 = np.array([0.4, -0.7, 1.1, 0.0])

    def f(states):
        return states @ np.array([0.8, -0.5, 0.3, 1.2]) + 0.4 * states[:, 0] * states[:, 1]

    # oracle: finite differences on the exactly enumerated expectation
    exact = finite_diff_grad(
        lambda t: -enumerated_objective(t, f), theta0.copy()
    )
    state = make_nvil_state(1)
    root = RngStream(seed=31)
    chunks = [
        nvil_chunk_estimate(theta0, f, state, root.split(c), batch=500) for c in range(100)
    ]
    chunks = np.array(chunks)  # 100 chunks x 500 samples = 5e4 estimates
    mu = chunks.mean(axis=0)
    se = chunks.std(axis=0, ddof=1) / math.sqrt(len(chunks))
    assert np.all(np.abs(mu - exact) <= np.maximum(3.0 * se, 1e-7))


def test_nvil_baseline_reduces_variance():
    theta0 = np.array([0.2, -0.3, 0.9, -1.2])

    def f(states):
        return 3.0 + states @ np.array([1.0, 0.7, -0.4, 0.5])

    root = RngStream(seed=77)
    # without baseline: zero net, frozen statistics
    plain = make_nvil_state(1)
    est_plain = np.array(
        [nvil_chunk_estimate(theta0, f, plain, root.split(c), batch=50) for c in range(300)]
    )
    # with a trained baseline: regress toward the mean signal first
    trained = make_nvil_state(1, zero_baseline=False, seed=9)
    train_root = RngStream(seed=123)
    for step in range(300):
        stream = train_root.split(step)
        theta = Node(theta0)
        z = (stream.uniform01((100, 4)) < sigmoid(theta0)).astype(float)
        logq = bernoulli_logpmf(BernoulliParams(theta * np.ones((100, 1))), z)
        surrogate = nvil_score_grad(
            f(z), logq, np.zeros((100, 1)), trained, trained.store.leaves(), update=True
        )
        leaves = trained.store.leaves()
        surrogate2 = nvil_score_grad(
            f(z), logq, np.zeros((100, 1)), trained, leaves, update=False
        )
        grads = pathwise_backward(surrogate2, leaves)
        trained.store.zero_grads()
        trained.store.accumulate({k: v for k, v in grads.items() if k in trained.store.names()})
        trained.store.adam_apply()
    est_trained = np.array(
        [nvil_chunk_estimate(theta0, f, trained, root.split(10_000 + c), batch=50) for c in range(300)]
    )
    var_plain = est_plain.var(axis=0, ddof=1).sum()
    var_trained = est_trained.var(axis=0, ddof=1).sum()
    assert var_trained < var_plain


# ---------------------------------------------------------------------------
# hybrid composite step
# ---------------------------------------------------------------------------


def build_double(seed=3):
    spec = ModelSpec(
        "vcae_discrete", x_dim=4, s_dim=3, z_dim=3, hidden="linear", surrogate="bernoulli"
    )
    return Model.build(spec, init_seed=seed)


def test_hybrid_bound_value_ignores_nvil_state():
    m = build_double()
    x = np.repeat(np.array([[1.0, 0.0, 1.0, 1.0]]), 8, axis=0)
    r1 = m.single_sample_grads(x, RngStream(seed=4), update_nvil=False)
    m.nvil_state.c, m.nvil_state.v = 5.0, 9.0
    for name in m.nvil_state.store.names():
        m.nvil_state.store.entry(name).param[...] += 0.5
    r2 = m.single_sample_grads(x, RngStream(seed=4), update_nvil=False)
    assert r1.estimate == r2.estimate


def test_hybrid_detachment_from_latent_encoder():
    spec = ModelSpec("vcae_discrete", x_dim=6, s_dim=3, z_dim=3, hidden="linear")
    m = Model.build(spec, init_seed=8)
    x = (RngStream(seed=2).uniform01((5, 6)) > 0.5).astype(float)
    r1 = m.single_sample_grads(x, RngStream(seed=21), update_nvil=False)
    # nudge the latent encoder; the sampled z stays the same almost surely
    for name in m.store.names():
        if name.startswith("theta2."):
            m.store.entry(name).param[...] += 1e-6
    r2 = m.single_sample_grads(x, RngStream(seed=21), update_nvil=False)
    for name in m.store.names():
        if name.split(".")[0] in ("theta1", "phi"):
            assert np.array_equal(r1.grads[name], r2.grads[name]), name


def test_hybrid_frozen_latent_matches_finite_differences():
    spec = ModelSpec("vcae_discrete", x_dim=5, s_dim=3, z_dim=2, hidden="linear")
    m = Model.build(spec, init_seed=19)
    x = (RngStream(seed=7).uniform01((4, 5)) > 0.5).astype(float)
    stream_tag = 91
    res = m.single_sample_grads(x, RngStream(seed=stream_tag), update_nvil=False)

    # replay the step's draws so the finite-difference objective freezes them
    probe = RngStream(seed=stream_tag)
    q_z = m.q_z_params(x, m.store.arrays())
    z_fixed = (probe.uniform01(detach(q_z.logits).shape) < sigmoid(detach(q_z.logits))).astype(float)
    noise_fixed = probe.std_logistic((4, 3))

    from vcae.distributions import (
        BinaryConcreteParams,
        bernoulli_kl,
        concrete_kl_mc,
        concrete_sample_logit,
    )

    pathwise_names = [
        n for n in m.store.names() if n.split(".")[0] in ("theta1", "psi", "phi")
    ]

    def frozen_loss(flat):
        pos = 0
        for n in pathwise_names:
            p = m.store.entry(n).param
            p[...] = flat[pos : pos + p.size].reshape(p.shape)
            pos += p.size
        params = m.store.arrays()
        q_s = m.q_s_params(x, params)
        y = concrete_sample_logit(q_s, noise_fixed)
        recon = bernoulli_logpmf(m.p_x_params(sigmoid(y), params), x)
        kl_s = concrete_kl_mc(q_s, m.p_s_params(z_fixed, params), y)
        kl_z = bernoulli_kl(m.q_z_params(x, params), m.prior_z_params(params))
        return float(-(recon - kl_s - kl_z).mean())

    flat0 = np.concatenate([m.store.entry(n).param.ravel() for n in pathwise_names])
    fd = finite_diff_grad(frozen_loss, flat0.copy())
    frozen_loss(flat0)
    ana = np.concatenate([res.grads[n].ravel() for n in pathwise_names])
    denom = np.maximum(np.abs(fd), 1e-6)
    assert np.max(np.abs(ana - fd) / denom) <= 1e-4


def test_hybrid_unbiased_on_enumeration_double():
    m = build_double(seed=3)
    x1 = np.array([[1.0, 0.0, 1.0, 1.0]])
    names = m.store.names()
    states = np.array(list(itertools.product([0.0, 1.0], repeat=3)))

    from vcae.distributions import bernoulli_kl

    def exact_bound(params):
        q_z = m.q_z_params(x1, params)
        q_s = m.q_s_params(x1, params)
        qs_pmf = np.exp(
            bernoulli_logpmf(BernoulliParams(np.broadcast_to(q_s.logits, (8, 3))), states)
        )
        recons = np.array(
            [bernoulli_logpmf(m.p_x_params(s[None, :], params), x1)[0] for s in states]
        )
        qz_pmf = np.exp(
            bernoulli_logpmf(BernoulliParams(np.broadcast_to(q_z.logits, (8, 3))), states)
        )
        kls = np.array(
            [bernoulli_kl(q_s, m.p_s_params(z[None, :], params))[0] for z in states]
        )
        kl_prior = bernoulli_kl(q_z, BernoulliParams(m.prior_z_params(params).logits[None, :]))[0]
        return (qs_pmf * recons).sum() - (qz_pmf * kls).sum() - kl_prior

    def loss_at(flat):
        set_flat(m, flat)
        return -exact_bound(m.store.arrays())

    flat0 = get_flat(m)
    exact = finite_diff_grad(loss_at, flat0.copy())
    set_flat(m, flat0)

    root = RngStream(seed=555)
    chunks = []
    for c in range(80):
        res = m.single_sample_grads(
            np.repeat(x1, 500, axis=0), root.split(c), update_nvil=False
        )
        chunks.append(flatten_grads(m, res.grads))
    chunks = np.array(chunks)  # 80 x 500 = 4e4 single-sample estimates
    mu = chunks.mean(axis=0)
    se = chunks.std(axis=0, ddof=1) / math.sqrt(len(chunks))
    assert np.all(np.abs(mu - exact) <= np.maximum(3.0 * se, 1e-7))


# ---------------------------------------------------------------------------
# variance probe
# ---------------------------------------------------------------------------


class PathwiseSquare:
    """z = mu + eps, objective z^2: per-replica gradient 2z, variance 4 sigma^2."""

    def __init__(self):
        self.store = ParamStore()
        self.store.register("theta1.mu", (1,))

    def param_groups(self):
        return {"theta1.mu": "theta1"}

    def single_sample_grads(self, x, stream, update_nvil=True):
        mu = Node(self.store.entry("theta1.mu").param)
        z = mu + stream.std_normal((1,))
        loss = mean_all(z * z)
        grads = pathwise_backward(loss, {"theta1.mu": mu})
        return StepResult(None, grads)


class DeterministicObjective:
    def __init__(self):
        self.store = ParamStore()
        self.store.register("phi.w", (3,))
        self.store.entry("phi.w").param[...] = [1.0, -2.0, 0.5]

    def param_groups(self):
        return {"phi.w": "phi"}

    def single_sample_grads(self, x, stream, update_nvil=True):
        w = Node(self.store.entry("phi.w").param)
        loss = mean_all(w * w)
        return StepResult(None, pathwise_backward(loss, {"phi.w": w}))


def test_probe_requires_replicas():
    with pytest.raises(ContractViolation):
        variance_probe(PathwiseSquare(), np.zeros((1, 1)), 1, RngStream(seed=1))


def test_probe_deterministic_objective_zero_variance():
    report = variance_probe(DeterministicObjective(), np.zeros((1, 1)), 16, RngStream(seed=2))
    assert report.group_var["phi"] == 0.0


def test_probe_calibration_pathwise_gaussian():
    report = variance_probe(PathwiseSquare(), np.zeros((1, 1)), 10_000, RngStream(seed=3))
    assert abs(report.group_var["theta1"] - 4.0) <= 0.4


def test_probe_deterministic_and_preserves_state():
    spec = ModelSpec("vcae_discrete", x_dim=4, s_dim=2, z_dim=2, hidden="linear")
    m = Model.build(spec, init_seed=5)
    x = (RngStream(seed=6).uniform01((3, 4)) > 0.5).astype(float)
    before = {n: m.store.entry(n).param.copy() for n in m.store.names()}
    before_adam = {n: (m.store.entry(n).adam.m.copy(), m.store.entry(n).adam.t) for n in m.store.names()}
    c_before, v_before = m.nvil_state.c, m.nvil_state.v
    r1 = variance_probe(m, x, 32, RngStream(seed=7))
    r2 = variance_probe(m, x, 32, RngStream(seed=7))
    assert r1.group_var == r2.group_var
    for n in m.store.names():
        assert np.array_equal(before[n], m.store.entry(n).param)
        assert np.array_equal(before_adam[n][0], m.store.entry(n).adam.m)
        assert before_adam[n][1] == m.store.entry(n).adam.t
    assert (m.nvil_state.c, m.nvil_state.v) == (c_before, v_before)
