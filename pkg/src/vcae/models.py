"""Model variants, their training objectives, and test-time evaluation.

Six production variants plus the score-function baseline:

* ``vae``            Gaussian latent, standard-normal prior, pathwise.
* ``concrete_s``     single Concrete layer (surrogate role), pathwise.
* ``concrete_z``     same architecture in the latent role; trained relaxed,
                     evaluated on hardened samples.
* ``vae_con``        sequential hierarchy q(s|x) q(z|s), fully pathwise.
* ``vcae_gaussian``  composite hierarchy with Gaussian latent, pathwise.
* ``vcae_discrete``  composite hierarchy with Bernoulli latent, hybrid
                     pathwise/score training.
* ``nvil``           single Bernoulli layer trained by the score-function
                     estimator with control variates.

The composite bound is, per datum,

    E_q(s|x)[ln p(x|s)] - E_q(z|x)[KL(q(s|x) || p(s|z))] - KL(q(z|x) || p(z))

realized with one sample per expectation; Concrete KL terms use the
single-sample estimate in logit space.  ``surrogate="bernoulli"`` swaps the
Concrete channel for hard Bernoulli draws, which makes desk-size instances
exactly enumerable (the test doubles behind the estimator-correctness and
bound-validity checks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from . import estimators
from .distributions import (
    BernoulliParams,
    BinaryConcreteParams,
    DiagGaussianParams,
    bernoulli_kl,
    bernoulli_logpmf,
    bernoulli_sample,
    concrete_harden,
    concrete_kl_mc,
    concrete_log_density_logit,
    concrete_sample_logit,
    gaussian_kl_to_standard,
    gaussian_logpdf,
    gaussian_sample,
)
from .estimators import GraphConstructionError, StepResult, NvilState
from .nets import ChannelSpec, ParamStore, build_channel, init_params
from .numerics import (
    ContractViolation,
    RngStream,
    Tensor,
    detach,
    mean_all,
    sigmoid,
)

VARIANTS = (
    "vae",
    "concrete_s",
    "concrete_z",
    "vae_con",
    "vcae_gaussian",
    "vcae_discrete",
    "nvil",
)
TASKS = ("generative", "structured")

_PATHWISE = {"vae", "concrete_s", "concrete_z", "vae_con", "vcae_gaussian"}

# latent kind per variant; vae_con may be overridden to "bernoulli" for the
# enumeration double
_Z_KIND = {
    "vae": "gaussian",
    "vae_con": "gaussian",
    "vcae_gaussian": "gaussian",
    "vcae_discrete": "bernoulli",
    "nvil": "bernoulli",
    "concrete_z": "concrete",
    "concrete_s": None,
}


@dataclass
class ModelSpec:
    variant: str
    hidden: str = "linear"
    task: str = "generative"
    x_dim: int = 784
    s_dim: int = 200
    z_dim: int = 200
    hidden_width: int = 200
    temperature: float = 0.5
    surrogate: str = "concrete"  # "bernoulli" only on enumeration doubles
    latent: str = ""  # override for vae_con doubles; empty = variant default

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown variant {self.variant!r}")
        if self.task not in TASKS:
            raise ContractViolation(f"unknown task {self.task!r}")
        if self.surrogate not in ("concrete", "bernoulli"):
            raise ContractViolation(f"unknown surrogate kind {self.surrogate!r}")
        if min(self.x_dim, self.s_dim, self.z_dim) <= 0:
            raise ContractViolation("dims must be positive")
        if self.task == "structured" and self.x_dim % 2 != 0:
            raise ContractViolation("structured task needs an even x_dim")
        default_kind = _Z_KIND[self.variant] or "concrete"
        if self.latent and self.latent != default_kind:
            if self.variant == "vae_con" and self.latent == "bernoulli":
                pass  # enumeration double
            else:
                raise ContractViolation(
                    f"variant {self.variant!r} requires a {default_kind} latent"
                )
        if self.surrogate == "bernoulli" and self.variant not in (
            "vcae_discrete",
            "vae_con",
            "vcae_gaussian",
        ):
            raise ContractViolation(
                f"variant {self.variant!r} has no Bernoulli-surrogate double"
            )

    @property
    def z_kind(self) -> str:
        if self.latent:
            return self.latent
        return _Z_KIND[self.variant] or "concrete"

    @property
    def input_dim(self) -> int:
        return self.x_dim // 2 if self.task == "structured" else self.x_dim

    @property
    def target_dim(self) -> int:
        return self.x_dim // 2 if self.task == "structured" else self.x_dim


@dataclass
class BoundEstimate:
    """Per-batch means of the bound and its three terms, in nats."""

    total: float
    term_recon: float
    term_kl_s: float
    term_kl_z: float

    def __post_init__(self):
        identity = self.term_recon - self.term_kl_s - self.term_kl_z
        if abs(self.total - identity) > 1e-10:
            raise ContractViolation(
                f"bound terms do not add up: total {self.total} vs {identity}"
            )


def task_adapt(task: str, x_full: Tensor):
    """Map a data batch to (encoder input, likelihood target) for the task."""
    if task == "generative":
        return x_full, x_full
    if task == "structured":
        d = x_full.shape[-1]
        if d % 2 != 0:
            raise ContractViolation(f"structured task needs even length, got {d}")
        half = d // 2
        return x_full[..., :half], x_full[..., half:]
    raise ContractViolation(f"unknown task {task!r}")


class Model:
    """A built variant: parameter store, channels, and objective machinery."""

    def __init__(self, spec: ModelSpec, store: ParamStore, channels: dict, nvil_state):
        self.spec = spec
        self.store = store
        self.channels = channels
        self.nvil_state = nvil_state

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, spec: ModelSpec, init_seed: int, lr: float = 3e-4) -> "Model":
        store = ParamStore(lr=lr)
        ch: dict = {}
        in_dim, out_dim = spec.input_dim, spec.target_dim
        lam = spec.temperature
        width = spec.hidden_width

        def channel(prefix, cin, cout, head, hidden=None):
            ch[prefix] = build_channel(
                ChannelSpec(
                    cin,
                    cout,
                    hidden or spec.hidden,
                    head,
                    temperature=lam,
                    hidden_width=width,
                ),
                store,
                prefix,
            )

        v = spec.variant
        s_head = "bernoulli" if spec.surrogate == "bernoulli" else "concrete"
        if v == "vae":
            channel("theta2", in_dim, spec.z_dim, "gaussian")
            channel("phi", spec.z_dim, out_dim, "bernoulli")
        elif v == "concrete_s":
            channel("theta1", in_dim, spec.s_dim, "concrete")
            channel("phi", spec.s_dim, out_dim, "bernoulli")
            store.register("psi.prior_logits", (spec.s_dim,))
        elif v == "concrete_z":
            channel("theta2", in_dim, spec.z_dim, "concrete")
            channel("phi", spec.z_dim, out_dim, "bernoulli")
            store.register("psi.prior_logits", (spec.z_dim,))
        elif v == "nvil":
            channel("theta2", in_dim, spec.z_dim, "bernoulli")
            channel("phi", spec.z_dim, out_dim, "bernoulli")
            store.register("psi.prior_logits", (spec.z_dim,))
        elif v == "vae_con":
            z_head = "bernoulli" if spec.z_kind == "bernoulli" else "gaussian"
            channel("theta1", in_dim, spec.s_dim, s_head)
            channel("theta2", spec.s_dim, spec.z_dim, z_head)
            # "one sigmoid layer" decoder for the surrogate: a single affine head
            channel("psi", spec.z_dim, spec.s_dim, s_head, hidden="linear")
            channel("phi", spec.s_dim, out_dim, "bernoulli")
            if spec.z_kind == "bernoulli":
                store.register("psi.prior_logits", (spec.z_dim,))
        elif v in ("vcae_gaussian", "vcae_discrete"):
            z_head = "gaussian" if spec.z_kind == "gaussian" else "bernoulli"
            channel("theta1", in_dim, spec.s_dim, s_head)
            channel("theta2", in_dim, spec.z_dim, z_head)
            channel("psi", spec.z_dim, spec.s_dim, s_head, hidden="linear")
            channel("phi", spec.s_dim, out_dim, "bernoulli")
            if v == "vcae_discrete":
                store.register("psi.prior_logits", (spec.z_dim,))
        rng = RngStream(seed=init_seed)
        init_params(store, rng.split(0))
        nvil_state = None
        if v in ("vcae_discrete", "nvil"):
            nvil_state = NvilState.build(in_dim, rng.split(1), lr=lr)
        return cls(spec, store, ch, nvil_state)

    # -- protocol used by estimators and evaluation --------------------------

    def adapt(self, x: Tensor):
        return task_adapt(self.spec.task, x)

    def q_s_params(self, x, params):
        return self.channels["theta1"].forward(x, params)

    def q_z_params(self, x, params):
        return self.channels["theta2"].forward(x, params)

    def p_s_params(self, z, params):
        return self.channels["psi"].forward(z, params)

    def p_x_params(self, s, params):
        return self.channels["phi"].forward(s, params)

    def prior_z_params(self, params):
        if "psi.prior_logits" in self.store:
            return BernoulliParams(params["psi.prior_logits"])
        raise ContractViolation(f"variant {self.spec.variant!r} has no learnable prior")

    def prior_concrete(self, params):
        return BinaryConcreteParams(params["psi.prior_logits"], self.spec.temperature)

    def param_groups(self) -> dict[str, str]:
        """Parameter name -> estimator group (theta1/theta2/psi/phi)."""
        return {name: name.split(".", 1)[0] for name in self.store.names()}

    def make_estimate(self, recon, kl_s, kl_z) -> BoundEstimate:
        r = float(np.mean(detach(recon)))
        s = float(np.mean(detach(kl_s)))
        z = float(np.mean(detach(kl_z)))
        return BoundEstimate(r - s - z, r, s, z)

    # -- noise layout (shared by bound and importance sampling) --------------

    def _noise(self, batch: int, k: int, stream: RngStream) -> dict[str, Tensor]:
        """Fresh sampling noise, drawn in the variant's canonical order."""
        v, spec = self.spec.variant, self.spec
        out: dict[str, Tensor] = {}
        if v == "vae":
            out["eps_z"] = stream.std_normal((batch, k, spec.z_dim))
        elif v in ("concrete_s", "concrete_z"):
            d = spec.s_dim if v == "concrete_s" else spec.z_dim
            out["l"] = stream.std_logistic((batch, k, d))
        elif v == "nvil":
            out["u_z"] = stream.uniform01((batch, k, spec.z_dim))
        elif v == "vae_con":
            if spec.surrogate == "concrete":
                out["l_s"] = stream.std_logistic((batch, k, spec.s_dim))
            else:
                out["u_s"] = stream.uniform01((batch, k, spec.s_dim))
            if spec.z_kind == "gaussian":
                out["eps_z"] = stream.std_normal((batch, k, spec.z_dim))
            else:
                out["u_z"] = stream.uniform01((batch, k, spec.z_dim))
        elif v in ("vcae_gaussian", "vcae_discrete"):
            if spec.z_kind == "gaussian":
                out["eps_z"] = stream.std_normal((batch, k, spec.z_dim))
            else:
                out["u_z"] = stream.uniform01((batch, k, spec.z_dim))
            if spec.surrogate == "concrete":
                out["l_s"] = stream.std_logistic((batch, k, spec.s_dim))
            else:
                out["u_s"] = stream.uniform01((batch, k, spec.s_dim))
        return out

    # -- bounds ---------------------------------------------------------------

    def bound(self, x: Tensor, stream: RngStream, params=None, mc_kl: bool = False):
        """Single-sample bound estimate.

        Returns (BoundEstimate, per-term graph values).  This is the value
        estimator; gradient routing for the score variants happens in
        ``single_sample_grads``, not by differentiating this graph.
        With ``mc_kl`` every KL term is the single-sample log-ratio, which is
        the K=1 importance-weight decomposition.
        """
        if params is None:
            params = self.store.arrays()
        inp, target = self.adapt(x)
        batch = inp.shape[0]
        noise = self._noise(batch, 1, stream)
        noise = {name: arr[:, 0, :] for name, arr in noise.items()}
        v, spec = self.spec.variant, self.spec

        if v == "vae":
            q_z = self.q_z_params(inp, params)
            z = gaussian_sample(q_z, noise["eps_z"])
            recon = bernoulli_logpmf(self.p_x_params(z, params), target)
            kl_z = (
                self._gaussian_ratio(q_z, z)
                if mc_kl
                else gaussian_kl_to_standard(q_z)
            )
            return self._finish(recon, 0.0, kl_z)

        if v in ("concrete_s", "concrete_z"):
            q = self.q_s_params(inp, params) if v == "concrete_s" else self.q_z_params(inp, params)
            y = concrete_sample_logit(q, noise["l"])
            recon = bernoulli_logpmf(self.p_x_params(sigmoid(y), params), target)
            kl = concrete_kl_mc(q, self.prior_concrete(params), y)
            if v == "concrete_s":
                return self._finish(recon, kl, 0.0)
            return self._finish(recon, 0.0, kl)

        if v == "nvil":
            q_z = self.q_z_params(inp, params)
            z = (noise["u_z"] < sigmoid(detach(q_z.logits))).astype(np.float64)
            recon = bernoulli_logpmf(self.p_x_params(z, params), target)
            kl_z = bernoulli_logpmf(q_z, z) - bernoulli_logpmf(self.prior_z_params(params), z)
            return self._finish(recon, 0.0, kl_z)

        if v == "vae_con":
            q_s = self.q_s_params(inp, params)
            if spec.surrogate == "concrete":
                y = concrete_sample_logit(q_s, noise["l_s"])
                s_val = sigmoid(y)
            else:
                s_val = (noise["u_s"] < sigmoid(detach(q_s.logits))).astype(np.float64)
            q_z = self.q_z_params(s_val, params)
            if spec.z_kind == "gaussian":
                z = gaussian_sample(q_z, noise["eps_z"])
                kl_z = self._gaussian_ratio(q_z, z) if mc_kl else gaussian_kl_to_standard(q_z)
            else:
                z = (noise["u_z"] < sigmoid(detach(q_z.logits))).astype(np.float64)
                prior = self.prior_z_params(params)
                kl_z = (
                    bernoulli_logpmf(q_z, z) - bernoulli_logpmf(prior, z)
                    if mc_kl
                    else bernoulli_kl(q_z, prior)
                )
            p_s = self.p_s_params(z, params)
            if spec.surrogate == "concrete":
                kl_s = concrete_kl_mc(q_s, p_s, y)
            else:
                kl_s = (
                    bernoulli_logpmf(q_s, s_val) - bernoulli_logpmf(p_s, s_val)
                    if mc_kl
                    else bernoulli_kl(q_s, p_s)
                )
            recon = bernoulli_logpmf(self.p_x_params(s_val, params), target)
            return self._finish(recon, kl_s, kl_z)

        # vcae_gaussian / vcae_discrete
        q_z = self.q_z_params(inp, params)
        if spec.z_kind == "gaussian":
            z = gaussian_sample(q_z, noise["eps_z"])
            kl_z = self._gaussian_ratio(q_z, z) if mc_kl else gaussian_kl_to_standard(q_z)
        else:
            z = (noise["u_z"] < sigmoid(detach(q_z.logits))).astype(np.float64)
            prior = self.prior_z_params(params)
            kl_z = (
                bernoulli_logpmf(q_z, z) - bernoulli_logpmf(prior, z)
                if mc_kl
                else bernoulli_kl(q_z, prior)
            )
        q_s = self.q_s_params(inp, params)
        p_s = self.p_s_params(z, params)
        if spec.surrogate == "concrete":
            y = concrete_sample_logit(q_s, noise["l_s"])
            s_val = sigmoid(y)
            kl_s = concrete_kl_mc(q_s, p_s, y)
        else:
            s_val = (noise["u_s"] < sigmoid(detach(q_s.logits))).astype(np.float64)
            kl_s = (
                bernoulli_logpmf(q_s, s_val) - bernoulli_logpmf(p_s, s_val)
                if mc_kl
                else bernoulli_kl(q_s, p_s)
            )
        recon = bernoulli_logpmf(self.p_x_params(s_val, params), target)
        return self._finish(recon, kl_s, kl_z)

    @staticmethod
    def _gaussian_ratio(q: DiagGaussianParams, z):
        standard = DiagGaussianParams(
            np.zeros_like(detach(z)), np.zeros_like(detach(z))
        )
        return gaussian_logpdf(q, z) - gaussian_logpdf(standard, z)

    def _finish(self, recon, kl_s, kl_z):
        est = self.make_estimate(recon, kl_s, kl_z)
        totals = recon - kl_s - kl_z
        return est, totals

    # -- gradients ------------------------------------------------------------

    def single_sample_grads(
        self, x: Tensor, stream: RngStream, update_nvil: bool = True
    ) -> StepResult:
        """One gradient estimate of the loss (negative bound) per parameter."""
        v = self.spec.variant
        if v == "vcae_discrete":
            return estimators.hybrid_vcae_step(self, x, stream, update_nvil)
        if v == "nvil":
            return estimators.nvil_sbn_step(self, x, stream, update_nvil)
        if self.spec.surrogate == "bernoulli" or self.spec.z_kind == "bernoulli":
            raise GraphConstructionError(
                f"variant {v!r} with hard Bernoulli draws has no pathwise route"
            )
        leaves = self.store.leaves()
        est, totals = self.bound(x, stream, params=leaves)
        loss = mean_all(totals) * -1.0
        grads = estimators.pathwise_backward(loss, leaves)
        return StepResult(est, grads)

    # -- importance-weighted evaluation ----------------------------------------

    def iwae_estimate(self, x: Tensor, k: int, stream: RngStream) -> Tensor:
        """Per-datum log-mean-exp of K joint importance weights, in nats."""
        if k < 1:
            raise ContractViolation(f"importance sample count must be >= 1, got {k}")
        params = self.store.arrays()
        inp, target = self.adapt(x)
        batch = inp.shape[0]
        noise = self._noise(batch, k, stream)
        log_w = self._log_weights(inp, target, params, noise)
        return logsumexp(log_w, axis=1) - math.log(k)

    def _log_weights(self, inp, target, params, noise) -> Tensor:
        v, spec = self.spec.variant, self.spec
        batch = inp.shape[0]

        def flat(a):  # [B,K,d] -> [B*K,d]
            return a.reshape(-1, a.shape[-1])

        def unflat(a):  # [B*K] -> [B,K]
            return a.reshape(batch, -1)

        def recon_term(s_rows):
            k = s_rows.shape[0] // batch
            rep_target = np.repeat(target, k, axis=0)
            return unflat(bernoulli_logpmf(self.p_x_params(s_rows, params), rep_target))

        if v == "vae":
            q_z = self.q_z_params(inp, params)
            z = q_z.mean[:, None, :] + np.exp(q_z.log_std)[:, None, :] * noise["eps_z"]
            log_q = unflat(
                gaussian_logpdf(_expand(q_z, z.shape[1]), flat(z))
            )
            log_prior = unflat(self._standard_logpdf(flat(z)))
            return recon_term(flat(z)) + log_prior - log_q

        if v in ("concrete_s", "concrete_z"):
            q = self.q_s_params(inp, params) if v == "concrete_s" else self.q_z_params(inp, params)
            y = (q.location_logits[:, None, :] + noise["l"]) / spec.temperature
            prior = self.prior_concrete(params)
            log_q = unflat(
                concrete_log_density_logit(
                    flat(y), BinaryConcreteParams(_rep(q.location_logits, y.shape[1]), spec.temperature)
                )
            )
            log_p = unflat(concrete_log_density_logit(flat(y), prior))
            return recon_term(sigmoid(flat(y))) + log_p - log_q

        if v == "nvil":
            q_z = self.q_z_params(inp, params)
            z = (noise["u_z"] < sigmoid(q_z.logits)[:, None, :]).astype(np.float64)
            log_q = unflat(bernoulli_logpmf(BernoulliParams(_rep(q_z.logits, z.shape[1])), flat(z)))
            log_p = unflat(bernoulli_logpmf(self.prior_z_params(params), flat(z)))
            return recon_term(flat(z)) + log_p - log_q

        if v == "vae_con":
            q_s = self.q_s_params(inp, params)
            kk = next(iter(noise.values())).shape[1]
            if spec.surrogate == "concrete":
                y = (q_s.location_logits[:, None, :] + noise["l_s"]) / spec.temperature
                s_rows = sigmoid(flat(y))
                log_q_s = unflat(
                    concrete_log_density_logit(
                        flat(y),
                        BinaryConcreteParams(_rep(q_s.location_logits, kk), spec.temperature),
                    )
                )
            else:
                s = (noise["u_s"] < sigmoid(q_s.logits)[:, None, :]).astype(np.float64)
                s_rows = flat(s)
                log_q_s = unflat(
                    bernoulli_logpmf(BernoulliParams(_rep(q_s.logits, kk)), s_rows)
                )
            q_z = self.q_z_params(s_rows, params)  # conditioned on each sample
            if spec.z_kind == "gaussian":
                z_rows = q_z.mean + np.exp(q_z.log_std) * flat(noise["eps_z"])
                log_q_z = unflat(gaussian_logpdf(q_z, z_rows))
                log_p_z = unflat(self._standard_logpdf(z_rows))
            else:
                z_rows = (flat(noise["u_z"]) < sigmoid(q_z.logits)).astype(np.float64)
                log_q_z = unflat(bernoulli_logpmf(q_z, z_rows))
                log_p_z = unflat(bernoulli_logpmf(self.prior_z_params(params), z_rows))
            p_s = self.p_s_params(z_rows, params)
            if spec.surrogate == "concrete":
                log_p_s = unflat(concrete_log_density_logit(flat(y), p_s))
            else:
                log_p_s = unflat(bernoulli_logpmf(p_s, s_rows))
            return recon_term(s_rows) + log_p_s + log_p_z - log_q_s - log_q_z

        # vcae_gaussian / vcae_discrete
        q_z = self.q_z_params(inp, params)
        q_s = self.q_s_params(inp, params)
        kk = next(iter(noise.values())).shape[1]
        if spec.z_kind == "gaussian":
            z = q_z.mean[:, None, :] + np.exp(q_z.log_std)[:, None, :] * noise["eps_z"]
            z_rows = flat(z)
            log_q_z = unflat(gaussian_logpdf(_expand(q_z, kk), z_rows))
            log_p_z = unflat(self._standard_logpdf(z_rows))
        else:
            z = (noise["u_z"] < sigmoid(q_z.logits)[:, None, :]).astype(np.float64)
            z_rows = flat(z)
            log_q_z = unflat(bernoulli_logpmf(BernoulliParams(_rep(q_z.logits, kk)), z_rows))
            log_p_z = unflat(bernoulli_logpmf(self.prior_z_params(params), z_rows))
        p_s = self.p_s_params(z_rows, params)
        if spec.surrogate == "concrete":
            y = (q_s.location_logits[:, None, :] + noise["l_s"]) / spec.temperature
            s_rows = sigmoid(flat(y))
            log_q_s = unflat(
                concrete_log_density_logit(
                    flat(y),
                    BinaryConcreteParams(_rep(q_s.location_logits, kk), spec.temperature),
                )
            )
            log_p_s = unflat(concrete_log_density_logit(flat(y), p_s))
        else:
            s = (noise["u_s"] < sigmoid(q_s.logits)[:, None, :]).astype(np.float64)
            s_rows = flat(s)
            log_q_s = unflat(bernoulli_logpmf(BernoulliParams(_rep(q_s.logits, kk)), s_rows))
            log_p_s = unflat(bernoulli_logpmf(p_s, s_rows))
        return recon_term(s_rows) + log_p_s + log_p_z - log_q_s - log_q_z

    def concrete_z_test_eval(self, x: Tensor, k: int, stream: RngStream) -> Tensor:
        """Hardened evaluation: binarize the Concrete samples, score the
        induced discrete model with importance weights."""
        if self.spec.variant != "concrete_z":
            raise ContractViolation("hardened evaluation is defined for concrete_z only")
        if k < 1:
            raise ContractViolation(f"importance sample count must be >= 1, got {k}")
        params = self.store.arrays()
        inp, target = self.adapt(x)
        batch = inp.shape[0]
        noise = self._noise(batch, k, stream)
        q = self.q_z_params(inp, params)
        y = (q.location_logits[:, None, :] + noise["l"]) / self.spec.temperature
        b = concrete_harden(y)
        b_rows = b.reshape(-1, b.shape[-1])
        rep_target = np.repeat(target, k, axis=0)
        recon = bernoulli_logpmf(self.p_x_params(b_rows, params), rep_target)
        # hardening induces Bernoulli(sigmoid(location)) regardless of temperature
        log_q = bernoulli_logpmf(BernoulliParams(_rep(q.location_logits, k)), b_rows)
        log_p = bernoulli_logpmf(BernoulliParams(params["psi.prior_logits"]), b_rows)
        log_w = (recon + log_p - log_q).reshape(batch, k)
        return logsumexp(log_w, axis=1) - math.log(k)

    @staticmethod
    def _standard_logpdf(z: Tensor) -> Tensor:
        return gaussian_logpdf(
            DiagGaussianParams(np.zeros_like(z), np.zeros_like(z)), z
        )


def _rep(arr: Tensor, k: int) -> Tensor:
    """[B,d] -> [B*K,d] repeating each row K times (matches reshape of [B,K,d])."""
    return np.repeat(arr, k, axis=0)


def _expand(q: DiagGaussianParams, k: int) -> DiagGaussianParams:
    return DiagGaussianParams(_rep(q.mean, k), _rep(q.log_std, k))
