"""Bernoulli, diagonal Gaussian, and Binary Concrete building blocks.

All functions take batched parameters ([batch, d] or broadcastable [d]) and
return one value per batch row.  Parameter fields may be plain ndarrays or
graph Nodes; the same formulas serve evaluation and differentiation.

Concrete quantities live in logit (pre-sigmoid) space throughout: the sample
carrier is y with s = sigmoid(y), and densities are densities of y.  This
avoids saturation and log(0) at low temperature; the sigmoid change of
variables cancels in every density ratio we ever form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    ContractViolation,
    RngStream,
    Tensor,
    detach,
    exp,
    log_sigmoid,
    sigmoid,
    softplus,
    sum_rows,
)

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class BernoulliParams:
    logits: object  # ndarray or Node, log-odds per unit


@dataclass
class DiagGaussianParams:
    mean: object
    log_std: object


@dataclass
class BinaryConcreteParams:
    location_logits: object
    temperature: float

    def __post_init__(self):
        if not self.temperature > 0.0:
            raise ContractViolation(
                f"Concrete temperature must be positive, got {self.temperature}"
            )


def _require_binary(x: Tensor) -> None:
    if not np.all((x == 0.0) | (x == 1.0)):
        raise ContractViolation("expected a binary tensor with entries in {0, 1}")


# ---------------------------------------------------------------------------
# Bernoulli
# ---------------------------------------------------------------------------


def bernoulli_logpmf(params: BernoulliParams, x: Tensor):
    """Sum_i [x_i log sigma(l_i) + (1-x_i) log sigma(-l_i)], one value per row."""
    _require_binary(x)
    l = params.logits
    # x*l - softplus(l) is the same quantity with one softplus
    return sum_rows(x * l - softplus(l))


def bernoulli_sample(params: BernoulliParams, stream: RngStream) -> Tensor:
    """Hard {0,1} draw; never differentiable, returned as a plain ndarray."""
    logits = detach(params.logits)
    u = stream.uniform01(logits.shape)
    return (u < sigmoid(logits)).astype(np.float64)


def bernoulli_kl(q: BernoulliParams, p: BernoulliParams):
    """Closed-form KL(q || p) summed over units, per row."""
    lq, lp = q.logits, p.logits
    prob_q = sigmoid(lq)
    # q*(log q - log p) + (1-q)*(log(1-q) - log(1-p)) in softplus form
    term_on = prob_q * (softplus(-lp) - softplus(-lq))
    term_off = (1.0 - prob_q) * (softplus(lp) - softplus(lq))
    return sum_rows(term_on + term_off)


def bernoulli_logpmf_enumerated(logits: Tensor, states: Tensor) -> Tensor:
    """log pmf of each row of ``states`` under factorized Bernoulli(sigmoid(logits))."""
    _require_binary(states)
    return (states * logits - softplus(logits)).sum(axis=-1)


# ---------------------------------------------------------------------------
# Diagonal Gaussian
# ---------------------------------------------------------------------------


def gaussian_sample(params: DiagGaussianParams, eps: Tensor):
    """mean + exp(log_std) * eps; differentiable in both parameters."""
    if detach(params.mean).shape != eps.shape:
        raise ContractViolation(
            f"eps shape {eps.shape} does not match mean shape {detach(params.mean).shape}"
        )
    return params.mean + exp(params.log_std) * eps


def gaussian_logpdf(params: DiagGaussianParams, x):
    """Diagonal Gaussian log density, per row."""
    inv_std = exp(-params.log_std)
    delta = (x - params.mean) * inv_std
    return sum_rows((delta * delta) * -0.5 - params.log_std - _HALF_LOG_2PI)


def gaussian_kl_to_standard(q: DiagGaussianParams):
    """KL(q || N(0, I)) = 1/2 sum(mu^2 + sigma^2 - 1 - 2 log sigma), per row."""
    var = exp(q.log_std * 2.0)
    return sum_rows((q.mean * q.mean + var - 1.0 - q.log_std * 2.0) * 0.5)


def gaussian_kl(q: DiagGaussianParams, p: DiagGaussianParams):
    """General diagonal KL(q || p), per row."""
    delta = q.mean - p.mean
    inv_var_p = exp(p.log_std * -2.0)
    var_q = exp(q.log_std * 2.0)
    return sum_rows(
        (p.log_std - q.log_std) + (var_q + delta * delta) * inv_var_p * 0.5 - 0.5
    )


# ---------------------------------------------------------------------------
# Binary Concrete (logit space)
# ---------------------------------------------------------------------------


def concrete_sample_logit(params: BinaryConcreteParams, l: Tensor):
    """Pre-sigmoid sample y = (location + l) / temperature; s = sigmoid(y).

    ``l`` is standard logistic noise; the draw is pathwise-differentiable in
    the location logits.
    """
    return (params.location_logits + l) * (1.0 / params.temperature)


def concrete_log_density_logit(y, params: BinaryConcreteParams):
    """Log density of the pre-sigmoid variable y, per row.

    y = (alpha + L)/lam with L standard logistic has density
    lam * f_L(lam*y - alpha), so log p(y) = log lam - t - 2*softplus(-t)
    with t = lam*y - alpha.
    """
    lam = params.temperature
    t = y * lam - params.location_logits
    return sum_rows(math.log(lam) - t - 2.0 * softplus(-t))


def concrete_kl_mc(q: BinaryConcreteParams, p: BinaryConcreteParams, y):
    """Single-sample KL estimate log q_Y(y) - log p_Y(y), per row.

    With y drawn from q via concrete_sample_logit the expectation equals
    KL(q || p); the value is invariant under the sigmoid change of variables
    because both Jacobians cancel.
    """
    return concrete_log_density_logit(y, q) - concrete_log_density_logit(y, p)


def concrete_hard_logits(params: BinaryConcreteParams):
    """Logits of the Bernoulli that hardening 1[y > 0] induces.

    P(y > 0) = P(l > -alpha) = sigmoid(alpha), independent of temperature.
    """
    return params.location_logits


def concrete_harden(y: Tensor) -> Tensor:
    """Binarize a pre-sigmoid sample; the tie y == 0 maps to 0."""
    return (detach(y) > 0.0).astype(np.float64)
