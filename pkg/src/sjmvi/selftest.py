"""Fast identity and property checks runnable without a test runner."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import objectives as O
from . import tensor as T
from .distributions import base_noise, stream
from .divergences import dre_bound_latent, gan_f, kl_f
from .models import LatentVariableModel, Mlp, MlpSpec, RatioNet


@dataclass
class Setup:
    model: LatentVariableModel
    params: dict
    x: np.ndarray
    z: np.ndarray
    eps: np.ndarray
    xi: np.ndarray


def random_setup(
    seed: int,
    data_dim: int = 3,
    latent_dim: int = 2,
    batch: int = 8,
    hidden=(6,),
    family: str = "gaussian",
    tau: float = 0.5,
    t: float = 0.3,
    deterministic: bool = False,
    ignore_conditioning: bool = False,
) -> Setup:
    """Small random networks, parameters and matched minibatches."""
    rng = np.random.default_rng(seed)
    model = LatentVariableModel(
        Mlp(MlpSpec((latent_dim, *hidden, data_dim), "tanh", prefix="dec_")),
        Mlp(MlpSpec((data_dim, *hidden, latent_dim), "tanh", prefix="enc_")),
        RatioNet(latent_dim, data_dim, hidden, "tanh", ignore_conditioning=ignore_conditioning, prefix="a_"),
        RatioNet(data_dim, latent_dim, hidden, "tanh", ignore_conditioning=ignore_conditioning, prefix="b_"),
        family=family,
        tau=tau,
        t=t,
        deterministic=deterministic,
    )
    params = model.init_params(seed)
    # Ratio nets start at zero output; perturb so identities are not trivial.
    for group in ("alpha", "beta"):
        ps = params[group]
        params[group] = ps.replace({k: ps[k] + 0.5 * rng.standard_normal(ps[k].shape) for k in ps})
    noise_rng = stream(seed, 3)
    return Setup(
        model,
        params,
        rng.standard_normal((batch, data_dim)),
        rng.standard_normal((batch, latent_dim)),
        base_noise(family, noise_rng, (batch, latent_dim)),
        base_noise(family, noise_rng, (batch, data_dim)),
    )


def const(setup: Setup) -> dict:
    return {k: v.const() for k, v in setup.params.items()}


def check_dm_c_equals_kl_dm(seed: int) -> float:
    s = random_setup(seed)
    p = const(s)
    c = O.dm_loss_c(s.model, p["phi"], p["alpha"], s.x, s.eps).item()
    kl = O.kl_dm_latent(s.model, p["phi"], p["alpha"], s.x, s.eps).item()
    return abs(c - kl)


def check_gan_equals_bound(seed: int) -> float:
    s = random_setup(seed)
    p = const(s)
    gan = O.gan_objective(s.model, "reverse", p["alpha"], p["phi"], s.x, s.eps, s.z).item()
    z_post = O.posterior_sample(s.model, p["phi"], s.x, s.eps)
    bound = dre_bound_latent(
        gan_f(), lambda z, x: s.model.ratio_latent(p["alpha"], z, x), s.x, z_post, s.z
    ).item()
    return abs(gan - bound)


def check_stochastic_reduces(seed: int) -> float:
    s = random_setup(seed, deterministic=True, ignore_conditioning=True)
    p = const(s)
    worst = 0.0
    for direction, ratio, mapping, v, noise, real in (
        ("reverse", p["alpha"], p["phi"], s.x, s.eps, s.z),
        ("forward", p["beta"], p["theta"], s.z, s.xi, s.x),
    ):
        sto = O.gan_objective(s.model, direction, ratio, mapping, v, noise, real).item()
        det = O.gan_objective(s.model, direction, ratio, mapping, v, None, real, True).item()
        worst = max(worst, abs(sto - det))
    return worst


def check_kliep_reduces(seed: int) -> float:
    s = random_setup(seed)
    p = const(s)
    kliep = O.kliep_objective(s.model, p["alpha"], p["phi"], s.x, s.eps, s.z, 1.0).item()
    kl = O.kl_dre_latent(s.model, p["alpha"], p["phi"], s.x, s.eps, s.z).item()
    return abs(kliep - kl)


def check_gradients(seed: int) -> float:
    """Worst finite-difference error of nell w.r.t. theta and the latent DM loss w.r.t. phi."""
    s = random_setup(seed)
    p = const(s)
    names = list(s.params["theta"])

    def f_theta(*leaves):
        theta = dict(zip(names, leaves))
        return O.nell(s.model, theta, p["phi"], s.x, s.eps)

    phi_names = list(s.params["phi"])

    def f_phi(*leaves):
        phi = dict(zip(phi_names, leaves))
        return O.dm_loss_c(s.model, phi, p["alpha"], s.x, s.eps)

    return max(
        T.grad_check(f_theta, [s.params["theta"][k] for k in names]),
        T.grad_check(f_phi, [s.params["phi"][k] for k in phi_names]),
    )


def check_conjugates() -> float:
    u = np.logspace(-3, 3, 200)
    worst = 0.0
    for fdiv in (kl_f(), gan_f()):
        if fdiv.name == "kl":
            closed = u
        else:
            closed = -np.log1p(-1.0 / (1.0 + np.exp(-np.log(u))))
        worst = max(worst, float(np.max(np.abs(fdiv.fstar(fdiv.fprime(u)) - closed))))
    return worst


def _checks() -> list[tuple[str, Callable[[], float], float]]:
    seeds = range(10)
    return [
        ("dm loss c equals kl dm", lambda: max(map(check_dm_c_equals_kl_dm, seeds)), 1e-12),
        ("gan objective equals gan bound", lambda: max(map(check_gan_equals_bound, seeds)), 1e-12),
        ("stochastic reduces to deterministic", lambda: max(map(check_stochastic_reduces, seeds)), 1e-12),
        ("kliep at lambda 1 equals kl bound", lambda: max(map(check_kliep_reduces, seeds)), 1e-12),
        ("conjugate compositions", check_conjugates, 1e-10),
        ("gradient check", lambda: check_gradients(0), 1e-4),
    ]


def run(echo: Callable[[str], None] = print) -> bool:
    ok = True
    for name, fn, tol in _checks():
        err = fn()
        passed = math.isfinite(err) and err <= tol
        ok &= passed
        echo(f"{'PASS' if passed else 'FAIL'}  {name}: max error {err:.3g} (tol {tol:g})")
    return ok
