"""Training objectives as pure functions of parameter sets and minibatches.

Conventions.  ``x`` is a data minibatch (rows from q*), ``z`` a prior
minibatch (rows from p*), ``eps`` and ``xi`` are base-noise arrays shaped like
the latent and observed draws.  Row i of every batch belongs together: the
posterior draw for ``x[i]`` uses ``eps[i]``, the likelihood draw for ``z[i]``
uses ``xi[i]``, and pairs ``(x[i], z[i])`` stand in for independent draws
from the product q*(x) p*(z).

Parameters are mappings from names to tensors.  Where an objective treats a
parameter set as frozen it detaches it internally, so gradients with respect
to it are exactly zero whatever the caller binds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

from . import tensor as T
from .divergences import FDivergence, clamp_log_ratio, dre_bound_latent, dre_bound_observed, kl_f
from .errors import ContractError, DomainError, ShapeError
from .models import LatentVariableModel, Params
from .tensor import Tensor

DIRECTIONS = ("reverse", "forward")
DM_VARIANTS = ("a", "b", "c")


def detach(params: Params) -> dict[str, Tensor]:
    return {k: T.stop_gradient(T.as_tensor(v)) for k, v in params.items()}


def _check_direction(direction):
    if direction not in DIRECTIONS:
        raise ContractError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


def _rows(op, *tensors):
    n = tensors[0].shape[0]
    if any(t.shape[0] != n for t in tensors[1:]):
        raise ShapeError(op, *(t.shape for t in tensors), detail="batch lengths differ")


# --- expected log likelihood / log posterior --------------------------------


def posterior_sample(model: LatentVariableModel, phi: Params, x, eps) -> Tensor:
    """z = G_phi(eps; x)."""
    return model.posterior(phi).rsample(x, eps)


def likelihood_sample(model: LatentVariableModel, theta: Params, z, xi) -> Tensor:
    """x = F_theta(xi; z)."""
    return model.likelihood(theta).rsample(z, xi)


def nell_at(model, theta, x, z_post) -> Tensor:
    """-E log p_theta(x | z) given posterior draws already made."""
    return -T.mean(model.likelihood(theta).log_prob(z_post, x))


def nelp_at(model, phi, z, x_model) -> Tensor:
    return -T.mean(model.posterior(phi).log_prob(x_model, z))


def nell(model: LatentVariableModel, theta: Params, phi: Params, x, eps) -> Tensor:
    """Negative expected log likelihood, reparameterized through the posterior."""
    x = T.as_tensor(x)
    return nell_at(model, theta, x, posterior_sample(model, phi, x, eps))


def nelp(model: LatentVariableModel, theta: Params, phi: Params, z, xi) -> Tensor:
    """Negative expected log posterior over prior draws pushed through the likelihood."""
    z = T.as_tensor(z)
    return nelp_at(model, phi, z, likelihood_sample(model, theta, z, xi))


# --- ratio estimation (ratio parameters free, mappings frozen) ---------------


def _ratio_latent_fn(model, alpha):
    if model.ratio_latent is None:
        raise ContractError("model has no latent ratio estimator")
    return lambda z, x: model.ratio_latent(alpha, z, x)


def _ratio_observed_fn(model, beta):
    if model.ratio_observed is None:
        raise ContractError("model has no observed ratio estimator")
    return lambda xx, z: model.ratio_observed(beta, xx, z)


def dre_latent(model, fdiv: FDivergence, alpha: Params, phi: Params, x, eps, z) -> Tensor:
    """Ratio-fitting bound for log q_phi(z|x) / p*(z); phi is frozen."""
    x = T.as_tensor(x)
    z_post = posterior_sample(model, detach(phi), x, eps)
    return dre_bound_latent(fdiv, _ratio_latent_fn(model, alpha), x, z_post, z)


def dre_observed(model, fdiv: FDivergence, beta: Params, theta: Params, z, xi, x) -> Tensor:
    """Ratio-fitting bound for log p_theta(x|z) / q*(x); theta is frozen."""
    z = T.as_tensor(z)
    x_model = likelihood_sample(model, detach(theta), z, xi)
    return dre_bound_observed(fdiv, _ratio_observed_fn(model, beta), z, x_model, x)


def kl_dre_latent(model, alpha, phi, x, eps, z) -> Tensor:
    return dre_latent(model, kl_f(), alpha, phi, x, eps, z)


def kl_dre_observed(model, beta, theta, z, xi, x) -> Tensor:
    return dre_observed(model, kl_f(), beta, theta, z, xi, x)


def kliep_objective(model, alpha, phi, x, eps, z, lagrange: float = 1.0) -> Tensor:
    """E_{q* q}[log r] - lambda E_{q* p*}[r - 1]; lambda = 1 is the KL bound."""
    if not lagrange >= 0:
        raise DomainError("Lagrange multiplier must be nonnegative")
    x = T.as_tensor(x)
    z_post = posterior_sample(model, detach(phi), x, eps)
    _rows("kliep_objective", x, z_post, T.as_tensor(z))
    ratio = _ratio_latent_fn(model, alpha)
    s_q = clamp_log_ratio(ratio(z_post, x))
    s_p = clamp_log_ratio(ratio(z, x))
    return T.mean(s_q) - T.mean(T.exp(s_p) - 1.0) * float(lagrange)


# --- divergence-minimization losses (ratio parameters frozen) ----------------


def _log_ratio_model_side(model, direction, mapping, ratio_params, batch_v, noise):
    """log r at model-side draws: (z ~ q(z|x), x) or (x ~ p(x|z), z)."""
    _check_direction(direction)
    v = T.as_tensor(batch_v)
    if direction == "reverse":
        draw = posterior_sample(model, mapping, v, noise)
        return _ratio_latent_fn(model, ratio_params)(draw, v)
    draw = likelihood_sample(model, mapping, v, noise)
    return _ratio_observed_fn(model, ratio_params)(draw, v)


def dm_terms(log_r: Tensor) -> dict[str, Tensor]:
    """DM losses from model-side log ratios.

    a = E log(1 - D) = E log sigmoid(s); b = E[-log D] = E softplus(s);
    c = a + b, which equals E s identically.
    """
    a = T.mean(T.log_sigmoid(log_r))
    b = T.mean(T.softplus(log_r))
    return {"a": a, "b": b, "c": a + b}


def _dm(log_r, variant):
    # Variant c is evaluated as E[log r] directly, the KL form it equals.
    if variant == "c":
        return T.mean(log_r)
    return dm_terms(log_r)[variant]


def dm_loss(variant, model, direction, mapping, ratio_params, batch_v, noise) -> Tensor:
    """Divergence-minimization loss of the given variant with ratio frozen.

    ``direction="reverse"``: mapping is phi, ratio is alpha, ``batch_v`` is x.
    ``direction="forward"``: mapping is theta, ratio is beta, ``batch_v`` is z.
    """
    if variant not in DM_VARIANTS:
        raise ContractError(f"dm-loss variant must be one of {DM_VARIANTS}, got {variant!r}")
    s = _log_ratio_model_side(model, direction, mapping, detach(ratio_params), batch_v, noise)
    return dm_terms(s)[variant]


def dm_loss_a(model, phi, alpha, x, eps, direction="reverse") -> Tensor:
    return dm_loss("a", model, direction, phi, alpha, x, eps)


def dm_loss_b(model, phi, alpha, x, eps, direction="reverse") -> Tensor:
    return dm_loss("b", model, direction, phi, alpha, x, eps)


def dm_loss_c(model, phi, alpha, x, eps, direction="reverse") -> Tensor:
    return dm_loss("c", model, direction, phi, alpha, x, eps)


def kl_dm_latent(model, phi, alpha, x, eps) -> Tensor:
    """E_{q* q_phi}[log r_alpha(z; x)], alpha frozen."""
    return T.mean(_log_ratio_model_side(model, "reverse", phi, detach(alpha), x, eps))


def kl_dm_observed(model, theta, beta, z, xi) -> Tensor:
    """E_{p* p_theta}[log r_beta(x; z)], beta frozen."""
    return T.mean(_log_ratio_model_side(model, "forward", theta, detach(beta), z, xi))


# --- adversarial objective ---------------------------------------------------


def gan_objective(
    model: LatentVariableModel,
    direction: str,
    ratio_params: Params,
    mapping: Params,
    batch_v,
    noise,
    real,
    deterministic: bool = False,
) -> Tensor:
    """E_real[log D] + E_model[log(1 - D)] with D = 1 - sigmoid(log r).

    Reverse: model side is z ~ q(z|x) paired with x = ``batch_v``, real side
    is the prior batch ``real`` paired with the same x.  Forward swaps roles.
    In deterministic mode the mapping is its mean and the discriminator must
    ignore its conditioning input.
    """
    _check_direction(direction)
    v, real = T.as_tensor(batch_v), T.as_tensor(real)
    _rows("gan_objective", v, real)
    net = model.ratio_latent if direction == "reverse" else model.ratio_observed
    if net is None:
        raise ContractError(f"model has no {direction} ratio estimator")
    if deterministic:
        if not net.ignore_conditioning:
            raise ContractError("deterministic objective needs an unconditional discriminator")
        mean_fn = model.encoder if direction == "reverse" else model.decoder
        s_model = net(ratio_params, mean_fn(mapping, v), None)
        s_real = net(ratio_params, real, None)
    else:
        s_model = _log_ratio_model_side(model, direction, mapping, ratio_params, v, noise)
        s_real = net(ratio_params, real, v)
    s_model, s_real = clamp_log_ratio(s_model), clamp_log_ratio(s_real)
    return T.mean(T.log1m_sigmoid(s_real)) + T.mean(T.log_sigmoid(s_model))


# --- cycle consistency -------------------------------------------------------


def _norm_rows(diff: Tensor, order: int) -> Tensor:
    if order == 2:
        return T.sum(T.square(diff), axis=1)
    if order == 1:
        return T.sum(T.absolute(diff), axis=1)
    raise ContractError(f"norm order must be 1 or 2, got {order!r}")


def cycle_loss(model, direction, theta, phi, batch_v, order: int = 2) -> Tensor:
    """Mean of ||v - roundtrip(v)||_order^order using the mean mappings only.

    Reverse reconstructs x through z = m(x); forward reconstructs z through
    x = mu(z).
    """
    _check_direction(direction)
    v = T.as_tensor(batch_v)
    if direction == "reverse":
        back = model.decoder(theta, model.encoder(phi, v))
    else:
        back = model.encoder(phi, model.decoder(theta, v))
    return T.mean(_norm_rows(v - back, order))


def limit_constants(model: LatentVariableModel, theta=None, phi=None) -> dict[str, float]:
    """gamma and delta such that nell -> gamma1 cycle_reverse + delta1 as t -> 0.

    Gaussian: gamma = 1 / (2 s^2), delta = (n/2) log(pi / gamma).
    Laplace:  gamma = 1 / s,       delta = n log(2 s), with the l1 cycle loss.
    Index 1 uses the likelihood scale and data dimension, index 2 the
    posterior scale and latent dimension.
    """
    tau, t = model.tau, model.t
    if model.learn_scales:
        if theta is None or phi is None:
            raise ContractError("learned scales need theta and phi")
        tau = math.exp(T.as_tensor(theta[model.scale_names[0]]).item())
        t = math.exp(T.as_tensor(phi[model.scale_names[1]]).item())
    out = {}
    for idx, s, n in ((1, tau, model.data_dim), (2, t, model.latent_dim)):
        if model.family == "laplace":
            gamma = 1.0 / s if s > 0 else math.inf
            delta = n * math.log(2.0 * s) if s > 0 else -math.inf
        else:
            gamma = 1.0 / (2.0 * s * s) if s > 0 else math.inf
            delta = 0.5 * n * math.log(math.pi / gamma) if s > 0 else -math.inf
        out[f"gamma{idx}"], out[f"delta{idx}"] = gamma, delta
    return out


# --- reports -----------------------------------------------------------------


@dataclass
class ObjectiveReport:
    """A scalar objective with its named additive decomposition."""

    total: Tensor
    terms: dict[str, Tensor]
    batch_sizes: dict[str, int]
    constants: dict[str, float] = field(default_factory=dict)
    omitted: tuple[str, ...] = ()

    @property
    def value(self) -> float:
        return self.total.item()

    def term_values(self) -> dict[str, float]:
        return {k: v.item() for k, v in self.terms.items()}


def _report(terms: dict[str, Tensor], weights: Mapping[str, float], sizes, constants, omitted=()):
    total = None
    for name, term in terms.items():
        w = weights.get(name, 1.0)
        contribution = term if w == 1.0 else term * w
        total = contribution if total is None else total + contribution
    return ObjectiveReport(total, terms, sizes, constants, omitted)


def symmetric_joint_report(
    model: LatentVariableModel,
    theta: Params,
    phi: Params,
    alpha: Params,
    beta: Params,
    x,
    eps,
    z,
    xi,
    weights: tuple[float, float] = (1.0, 1.0),
    dm_variant: str = "c",
) -> ObjectiveReport:
    """NELBO + NAPLBO up to the entropies of q*(x) and p*(z).

    One posterior draw per x row feeds both the likelihood term and the latent
    DM term; one likelihood draw per z row feeds both observed terms.  With
    ``weights`` (elbo side, aplbo side) each side is scaled before summing.
    """
    x, z = T.as_tensor(x), T.as_tensor(z)
    if dm_variant not in DM_VARIANTS:
        raise ContractError(f"dm-loss variant must be one of {DM_VARIANTS}, got {dm_variant!r}")
    z_post = posterior_sample(model, phi, x, eps)
    x_model = likelihood_sample(model, theta, z, xi)
    s_latent = _ratio_latent_fn(model, detach(alpha))(z_post, x)
    s_observed = _ratio_observed_fn(model, detach(beta))(x_model, z)
    terms = {
        "nell": nell_at(model, theta, x, z_post),
        "dm_latent": _dm(s_latent, dm_variant),
        "nelp": nelp_at(model, phi, z, x_model),
        "dm_observed": _dm(s_observed, dm_variant),
    }
    w_elbo, w_aplbo = weights
    w = {"nell": w_elbo, "dm_latent": w_elbo, "nelp": w_aplbo, "dm_observed": w_aplbo}
    return _report(
        terms,
        w,
        {"x": x.shape[0], "z": z.shape[0]},
        limit_constants(model, theta, phi),
        omitted=("entropy q*(x)", "entropy p*(z)"),
    )


def cycle_report(
    model: LatentVariableModel,
    theta: Params,
    phi: Params,
    alpha: Params,
    beta: Params,
    x,
    z,
    cycle_weights: tuple[float, float] | None = None,
    dm_variant: str = "c",
    order: int = 2,
) -> ObjectiveReport:
    """Deterministic-mapping target: DM losses plus weighted cycle losses.

    Default weights are the limit constants gamma1, gamma2, which make this the
    degenerate limit of :func:`symmetric_joint_report` up to additive constants.
    """
    x, z = T.as_tensor(x), T.as_tensor(z)
    constants = limit_constants(model, theta, phi)
    if cycle_weights is None:
        cycle_weights = (constants["gamma1"], constants["gamma2"])
    s_latent = model.ratio_latent(detach(alpha), model.encoder(phi, x), x)
    s_observed = model.ratio_observed(detach(beta), model.decoder(theta, z), z)
    terms = {
        "cycle_reverse": cycle_loss(model, "reverse", theta, phi, x, order),
        "dm_latent": _dm(s_latent, dm_variant),
        "cycle_forward": cycle_loss(model, "forward", theta, phi, z, order),
        "dm_observed": _dm(s_observed, dm_variant),
    }
    w = {"cycle_reverse": cycle_weights[0], "cycle_forward": cycle_weights[1]}
    return _report(terms, w, {"x": x.shape[0], "z": z.shape[0]}, constants)


def vae_report(
    model: LatentVariableModel,
    theta: Params,
    phi: Params,
    x,
    eps,
    prior_log_density: Callable[[Tensor], Tensor],
) -> ObjectiveReport:
    """NELBO with an analytic prior density: nell + E_q[log q(z|x) - log p(z)]."""
    x = T.as_tensor(x)
    z_post = posterior_sample(model, phi, x, eps)
    log_q = model.posterior(phi).log_prob(x, z_post)
    terms = {
        "nell": nell_at(model, theta, x, z_post),
        "kl": T.mean(log_q - prior_log_density(z_post)),
    }
    return _report(terms, {}, {"x": x.shape[0]}, limit_constants(model, theta, phi))


__all__ = [
    "ObjectiveReport",
    "cycle_loss",
    "cycle_report",
    "detach",
    "dm_loss",
    "dm_loss_a",
    "dm_loss_b",
    "dm_loss_c",
    "dm_terms",
    "dre_latent",
    "dre_observed",
    "gan_objective",
    "kl_dm_latent",
    "kl_dm_observed",
    "kl_dre_latent",
    "kl_dre_observed",
    "kliep_objective",
    "limit_constants",
    "nell",
    "nelp",
    "symmetric_joint_report",
    "vae_report",
]
