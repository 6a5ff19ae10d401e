"""f-divergence calculus and the variational lower bounds built on it.

Every bound here consumes *log* density ratios.  For an estimator r = q/p the
bound on D_f(p || q) = E_p[f(q/p)] is

    E_q[f'(r)] - E_p[f*(f'(r))],

tight when r is the true ratio.  Tensor forms take s = log r, so the KL
instance never materializes r itself except through one clamped ``exp``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import log_expit

from . import tensor as T
from .errors import DomainError, ShapeError
from .tensor import Tensor

LOG_RATIO_CLAMP = 30.0


@dataclass(frozen=True)
class FDivergence:
    """A convex generator f with its derivative, conjugate and composition.

    The scalar callables work on ratios u > 0 (or conjugate arguments t).
    ``fprime_log`` and ``fstar_fprime_log`` are the tensor forms evaluated at
    u = exp(s) for a log-ratio tensor s.
    """

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    fprime: Callable[[np.ndarray], np.ndarray]
    fstar: Callable[[np.ndarray], np.ndarray]
    fstar_of_fprime: Callable[[np.ndarray], np.ndarray]
    fprime_log: Callable[[Tensor], Tensor]
    fstar_fprime_log: Callable[[Tensor], Tensor]


def _xlogx(u):
    u = np.asarray(u, dtype=np.float64)
    return np.where(u > 0, u * np.log(np.where(u > 0, u, 1.0)), 0.0)


def kl_f() -> FDivergence:
    """f(u) = u log u, giving D_f(p || q) = KL(q || p)."""
    return FDivergence(
        name="kl",
        f=_xlogx,
        fprime=lambda u: 1.0 + np.log(u),
        fstar=lambda t: np.exp(np.asarray(t, dtype=np.float64) - 1.0),
        fstar_of_fprime=lambda u: np.asarray(u, dtype=np.float64),
        fprime_log=lambda s: s + 1.0,
        fstar_fprime_log=T.exp,
    )


def _gan_fstar(t):
    t = np.asarray(t, dtype=np.float64)
    if (t >= 0).any():
        raise DomainError("GAN conjugate is only defined for t < 0")
    return -np.log(-np.expm1(t))


def gan_f() -> FDivergence:
    """f(u) = u log u - (u + 1) log(u + 1); D_f = 2 JS - log 4."""
    return FDivergence(
        name="gan",
        f=lambda u: _xlogx(u) - _xlogx(np.asarray(u, dtype=np.float64) + 1.0),
        fprime=lambda u: log_expit(np.log(u)),
        fstar=_gan_fstar,
        # -log(1 - sigmoid(log u)) simplifies to log(1 + u).
        fstar_of_fprime=lambda u: np.log1p(u),
        fprime_log=T.log_sigmoid,
        fstar_fprime_log=T.softplus,
    )


def clamp_log_ratio(s: Tensor) -> Tensor:
    return T.clip(s, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)


def f_bound(fdiv: FDivergence, log_r_q: Tensor, log_r_p: Tensor) -> Tensor:
    """Monte Carlo bound from log-ratios at q-samples and at p-samples."""
    term_q = T.mean(fdiv.fprime_log(clamp_log_ratio(log_r_q)))
    term_p = T.mean(fdiv.fstar_fprime_log(clamp_log_ratio(log_r_p)))
    return term_q - term_p


def _same_length(op, *batches):
    n = batches[0].shape[0]
    for b in batches[1:]:
        if b.shape[0] != n:
            raise ShapeError(op, *(b.shape for b in batches), detail="batch lengths differ")


def dre_bound_latent(fdiv, log_ratio_fn, batch_x, batch_z_posterior, batch_z_prior) -> Tensor:
    """Lower bound on E_{q*(x)} D_f(p*(z) || q(z|x)).

    ``log_ratio_fn(z, x)`` estimates log q(z|x)/p*(z).  Row i of
    ``batch_z_posterior`` must be drawn given row i of ``batch_x``; prior rows
    are paired with the same x rows, realizing E_{q*(x) p*(z)}.
    """
    batch_x, zq, zp = (T.as_tensor(b) for b in (batch_x, batch_z_posterior, batch_z_prior))
    _same_length("dre_bound_latent", batch_x, zq, zp)
    return f_bound(fdiv, log_ratio_fn(zq, batch_x), log_ratio_fn(zp, batch_x))


def dre_bound_observed(fdiv, log_ratio_fn, batch_z, batch_x_model, batch_x_data) -> Tensor:
    """Lower bound on E_{p*(z)} D_f(q*(x) || p(x|z)).

    ``log_ratio_fn(x, z)`` estimates log p(x|z)/q*(x); model rows are drawn
    given the z rows, data rows are paired with them independently.
    """
    batch_z, xq, xp = (T.as_tensor(b) for b in (batch_z, batch_x_model, batch_x_data))
    _same_length("dre_bound_observed", batch_z, xq, xp)
    return f_bound(fdiv, log_ratio_fn(xq, batch_z), log_ratio_fn(xp, batch_z))


def gaussian_kl(mu_q: float, sigma_q: float, mu_p: float, sigma_p: float) -> float:
    """KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2)) in one dimension."""
    return (
        math.log(sigma_p / sigma_q)
        + (sigma_q**2 + (mu_q - mu_p) ** 2) / (2.0 * sigma_p**2)
        - 0.5
    )
