"""Gradient estimation strategies and the gradient-variance probe.

Three routes produce parameter gradients:

* pathwise: exact reverse-mode through reparameterized samples (Gaussian and
  Concrete draws);
* score function with NVIL control variates (input-dependent baseline,
  signal centering, variance normalization) for hard Bernoulli latents;
* the composite step for the discrete-latent hierarchy, which sends the
  reconstruction and surrogate-KL terms down the pathwise route, the
  discrete-latent channel down the score route, and the latent prior KL
  through its closed form.

Model objects are accessed through a small duck-typed protocol (channel
forwards plus ``adapt``/``store``/``nvil_state``); see ``models.Model``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import (
    bernoulli_kl,
    bernoulli_logpmf,
    bernoulli_sample,
    concrete_kl_mc,
    concrete_sample_logit,
)
from .nets import ParamStore, init_params
from .numerics import (
    ContractViolation,
    Node,
    NonFiniteGradient,
    RngStream,
    Tensor,
    affine,
    backward,
    detach,
    mean_all,
    sigmoid,
    sum_rows,
    tanh,
)


class GraphConstructionError(RuntimeError):
    """A pathwise route was requested through a non-reparameterizable node."""


def pathwise_backward(loss: Node, leaves: dict[str, Node]) -> dict[str, Tensor]:
    """Reverse-mode gradients of a scalar loss into named parameter leaves.

    Leaves that do not appear in the graph are omitted from the result.
    """
    backward(loss)
    return {name: leaf.grad for name, leaf in leaves.items() if leaf.grad is not None}


# ---------------------------------------------------------------------------
# NVIL control-variate state
# ---------------------------------------------------------------------------


@dataclass
class NvilState:
    """Input-dependent baseline net plus running signal statistics.

    The baseline is one hidden layer of 100 tanh units; c and v track the
    centered learning signal with an exponential moving average (decay 0.8).
    None of this ever enters the objective value, only the gradient.
    """

    store: ParamStore
    c: float = 0.0
    v: float = 0.0
    decay: float = 0.8

    @classmethod
    def build(
        cls, input_dim: int, rng: RngStream, lr: float = 3e-4, hidden: int = 100
    ) -> "NvilState":
        store = ParamStore(lr=lr)
        store.register("baseline.h_w", (input_dim, hidden))
        store.register("baseline.h_b", (hidden,))
        store.register("baseline.out_w", (hidden, 1))
        store.register("baseline.out_b", (1,))
        init_params(store, rng)
        return cls(store=store)

    def forward(self, x, params):
        """Baseline value per datum: [batch] (Node when params are leaves)."""
        h = tanh(affine(params["baseline.h_w"], params["baseline.h_b"], x))
        out = affine(params["baseline.out_w"], params["baseline.out_b"], h)
        return sum_rows(out)  # squeeze the trailing singleton axis


def nvil_score_grad(
    signal: Tensor,
    logq: Node,
    baseline_input: Tensor,
    state: NvilState,
    baseline_params,
    update: bool = True,
):
    """Surrogate loss term realizing the baselined score-function estimator.

    ``signal`` is the detached per-datum learning signal, ``logq`` the
    differentiable per-datum log q of the sampled latent.  Backprop through
    the returned node yields the score gradients for the inference parameters
    and the squared-error regression gradients for the baseline.  When
    ``update`` is set the running mean/variance are advanced first, matching
    the training loop; probes and estimator studies leave the state frozen.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if not np.all(np.isfinite(signal)):
        raise NonFiniteGradient(
            "non-finite learning signal "
            f"(min {np.nanmin(signal)}, max {np.nanmax(signal)})"
        )
    b = state.forward(baseline_input, baseline_params)
    centered = signal - detach(b)
    if update:
        ddof = 1 if centered.size > 1 else 0
        state.c = state.decay * state.c + (1.0 - state.decay) * float(centered.mean())
        state.v = state.decay * state.v + (1.0 - state.decay) * float(
            centered.var(ddof=ddof)
        )
    weight = (centered - state.c) / max(1.0, math.sqrt(state.v))
    score_term = mean_all(logq * weight)
    residual = (signal - state.c) - b  # regression target for the baseline
    baseline_loss = mean_all(residual * residual) * 0.5
    return baseline_loss - score_term


# ---------------------------------------------------------------------------
# Composite steps
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    estimate: object  # models.BoundEstimate
    grads: dict[str, Tensor]
    baseline_grads: dict[str, Tensor] = field(default_factory=dict)


def hybrid_vcae_step(model, x: Tensor, stream: RngStream, update_nvil: bool = True) -> StepResult:
    """One composite gradient estimate for the discrete-latent hierarchy.

    The latent z is drawn hard from its Bernoulli posterior and handled by
    the score route; the surrogate channel is drawn pathwise (Concrete) with
    the single-sample KL, or hard with the closed Bernoulli KL on the
    enumeration double; the latent prior KL contributes its analytic
    gradient.  The bound estimate itself never sees the control variates.
    """
    inp, target = model.adapt(x)
    leaves = model.store.leaves()
    state = model.nvil_state
    baseline_leaves = state.store.leaves()

    q_z = model.q_z_params(inp, leaves)
    z = bernoulli_sample(q_z, stream)
    q_s = model.q_s_params(inp, leaves)
    score_s_term = None
    if model.spec.surrogate == "concrete":
        noise = stream.std_logistic(detach(q_s.location_logits).shape)
        y = concrete_sample_logit(q_s, noise)
        s_input = sigmoid(y)
    else:  # all-Bernoulli enumeration double: hard draw, score route for theta1
        s_hard = bernoulli_sample(q_s, stream)
        s_input = s_hard
    p_s = model.p_s_params(z, leaves)
    recon = bernoulli_logpmf(model.p_x_params(s_input, leaves), target)
    if model.spec.surrogate == "concrete":
        kl_s = concrete_kl_mc(q_s, p_s, y)
    else:
        kl_s = bernoulli_kl(q_s, p_s)
        logq_s = bernoulli_logpmf(q_s, s_hard)
        score_s_term = mean_all(logq_s * detach(recon))
    kl_z = bernoulli_kl(q_z, model.prior_z_params(leaves))
    logq_z = bernoulli_logpmf(q_z, z)

    # only the middle term depends on z through sampling; the prior KL's
    # inference gradient is taken analytically through its closed form
    signal = -detach(kl_s)
    surrogate = nvil_score_grad(signal, logq_z, inp, state, baseline_leaves, update_nvil)

    bound_total = mean_all(recon - kl_s - kl_z)
    loss = -bound_total + surrogate
    if score_s_term is not None:
        loss = loss - score_s_term
    grads = pathwise_backward(loss, leaves)
    baseline_grads = {
        name: leaf.grad for name, leaf in baseline_leaves.items() if leaf.grad is not None
    }
    est = model.make_estimate(recon, kl_s, kl_z)
    return StepResult(est, grads, baseline_grads)


def nvil_sbn_step(model, x: Tensor, stream: RngStream, update_nvil: bool = True) -> StepResult:
    """Score-function training step for the single-layer sigmoid belief net.

    The full per-datum objective estimate is the learning signal; the decoder
    and the learnable prior get their exact gradients with the sampled latent
    held fixed.
    """
    inp, target = model.adapt(x)
    leaves = model.store.leaves()
    state = model.nvil_state
    baseline_leaves = state.store.leaves()

    q_z = model.q_z_params(inp, leaves)
    z = bernoulli_sample(q_z, stream)
    recon = bernoulli_logpmf(model.p_x_params(z, leaves), target)
    logp_z = bernoulli_logpmf(model.prior_z_params(leaves), z)
    logq_z = bernoulli_logpmf(q_z, z)

    signal = detach(recon) + detach(logp_z) - detach(logq_z)
    surrogate = nvil_score_grad(signal, logq_z, inp, state, baseline_leaves, update_nvil)

    loss = -mean_all(recon + logp_z) + surrogate
    grads = pathwise_backward(loss, leaves)
    baseline_grads = {
        name: leaf.grad for name, leaf in baseline_leaves.items() if leaf.grad is not None
    }
    est = model.make_estimate(recon, 0.0, logq_z - logp_z)
    return StepResult(est, grads, baseline_grads)


# ---------------------------------------------------------------------------
# Gradient-variance probe
# ---------------------------------------------------------------------------


@dataclass
class VarianceReport:
    step: int
    replicas: int
    group_var: dict[str, float]  # mean per-parameter gradient variance per group
    group_count: dict[str, int]

    def combined(self, groups) -> float:
        """Parameter-count-weighted mean variance over a set of groups."""
        total = sum(self.group_count.get(g, 0) for g in groups)
        if total == 0:
            return float("nan")
        return (
            sum(self.group_var[g] * self.group_count[g] for g in groups if g in self.group_var)
            / total
        )


def variance_probe(model, x: Tensor, replicas: int, rng: RngStream, step: int = 0) -> VarianceReport:
    """Sample variance of single-sample gradient estimates at fixed parameters.

    Runs ``replicas`` independent estimates on the same batch with fresh
    noise, then reduces per-parameter Welford statistics in replica-index
    order (the reduction order is part of the determinism contract).
    Parameters, optimizer state, and control-variate state are left
    bit-identical.
    """
    if replicas < 2:
        raise ContractViolation(f"variance probe needs >= 2 replicas, got {replicas}")
    names = model.store.names()
    mean: dict[str, Tensor] = {}
    m2: dict[str, Tensor] = {}
    for r in range(replicas):
        result = model.single_sample_grads(x, rng.split(r), update_nvil=False)
        for name in names:
            g = result.grads.get(name)
            if g is None:
                g = np.zeros_like(model.store.entry(name).param)
            if name not in mean:
                mean[name] = np.zeros_like(g)
                m2[name] = np.zeros_like(g)
            delta = g - mean[name]
            mean[name] += delta / (r + 1)
            m2[name] += delta * (g - mean[name])
    groups = model.param_groups()
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name in names:
        group = groups[name]
        var = m2[name] / (replicas - 1)
        sums[group] = sums.get(group, 0.0) + float(var.sum())
        counts[group] = counts.get(group, 0) + var.size
    group_var = {g: sums[g] / counts[g] for g in sums}
    return VarianceReport(step=step, replicas=replicas, group_var=group_var, group_count=counts)
