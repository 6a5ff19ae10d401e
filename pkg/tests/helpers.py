"""Builders shared by the objective, trainer and acceptance suites."""

import dataclasses
import math

import numpy as np

from sjmvi import objectives as O
from sjmvi.distributions import base_noise, stream
from sjmvi.models import LatentVariableModel, Mlp, MlpSpec, ParamSet, RatioNet
from sjmvi.selftest import random_setup

__all__ = ["identity_model", "limit_errors", "random_setup", "const_ratio", "with_scales"]


def identity_model(dim, family="gaussian", tau=1.0, t=1.0):
    """Linear encoder and decoder initialized to the identity map."""
    model = LatentVariableModel(
        Mlp(MlpSpec((dim, dim), linear_only=True, prefix="dec_")),
        Mlp(MlpSpec((dim, dim), linear_only=True, prefix="enc_")),
        RatioNet(dim, dim, hidden=(4,), prefix="a_"),
        RatioNet(dim, dim, hidden=(4,), prefix="b_"),
        family=family,
        tau=tau,
        t=t,
    )
    params = model.init_params(0)
    eye = {"dec_W0": np.eye(dim), "dec_b0": np.zeros(dim)}
    params["theta"] = params["theta"].replace(eye)
    params["phi"] = params["phi"].replace({"enc_W0": np.eye(dim), "enc_b0": np.zeros(dim)})
    return model, params


def const_ratio(params: ParamSet, prefix: str, value: float) -> ParamSet:
    """Ratio-net parameters whose output is the constant ``value``."""
    names = sorted(k for k in params if k.startswith(prefix + "b"))
    last = names[-1]
    return params.replace({last: np.full(params[last].shape, float(value))})


def with_scales(model, **kw):
    return dataclasses.replace(model, **kw)


def _limit_batch(direction, family, max_scale, seed, batch):
    """Fixed batch, antithetic noise, and the setup they belong to.

    For the l1 (Laplace) case the first-order expansion needs every residual
    component to stay on one side of its kink, so rows are kept only when
    the perturbation at ``max_scale`` is smaller than half the residual.
    """
    pool = batch if family == "gaussian" else 64 * batch
    s = random_setup(seed, family=family, batch=pool, tau=0.5, t=0.5)
    p = {k: v.const() for k, v in s.params.items()}
    dim = s.model.latent_dim if direction == "reverse" else s.model.data_dim
    half = base_noise(family, stream(seed, 3, 1), (pool, dim))
    v = s.x if direction == "reverse" else s.z
    if family != "gaussian":
        outer, inner = (
            (s.model.decoder, s.model.encoder) if direction == "reverse" else (s.model.encoder, s.model.decoder)
        )
        outer_p, inner_p = (p["theta"], p["phi"]) if direction == "reverse" else (p["phi"], p["theta"])
        mid = inner(inner_p, v).numpy()
        back = outer(outer_p, mid).numpy()
        resid = np.abs(v - back)
        shift = np.maximum(
            np.abs(outer(outer_p, mid + max_scale * half).numpy() - back),
            np.abs(outer(outer_p, mid - max_scale * half).numpy() - back),
        )
        keep = np.flatnonzero((shift < 0.5 * resid).all(axis=1))[:batch]
        if keep.size < batch:
            raise RuntimeError("not enough kink-free rows in the candidate pool")
        v, half = v[keep], half[keep]
    else:
        v, half = v[:batch], half[:batch]
    return s.model, p, np.vstack([v, v]), np.vstack([half, -half])


def limit_errors(direction, family, scales, seed=0, batch=16):
    """|objective - (gamma * cycle + delta)| for each scale in ``scales``.

    Antithetic noise pairs (e, -e) cancel the odd orders of the expansion, so
    a fixed batch shows the quadratic decay of the residual.
    """
    model, p, v, noise = _limit_batch(direction, family, max(scales), seed, batch)
    order = 2 if family == "gaussian" else 1
    errors = []
    for scale in scales:
        if direction == "reverse":
            m = with_scales(model, t=scale)
            value = O.nell(m, p["theta"], p["phi"], v, noise).item()
            c = O.limit_constants(m)
            gamma, delta = c["gamma1"], c["delta1"]
        else:
            m = with_scales(model, tau=scale)
            value = O.nelp(m, p["theta"], p["phi"], v, noise).item()
            c = O.limit_constants(m)
            gamma, delta = c["gamma2"], c["delta2"]
        cyc = O.cycle_loss(m, direction, p["theta"], p["phi"], v, order).item()
        errors.append(abs(value - (gamma * cyc + delta)))
    return errors


def halving_ratios(errors):
    return [a / b for a, b in zip(errors[:-1], errors[1:]) if b > 0 and math.isfinite(a / b)]
