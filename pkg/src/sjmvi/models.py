"""Mean networks, amortized log-ratio estimators, and the model bundle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .distributions import Stream, conditional, stream
from .errors import ContractError, ShapeError
from .tensor import Graph, Tensor

Params = Mapping[str, Tensor]


class ParamSet(Mapping[str, np.ndarray]):
    """Named float64 arrays forming one of the trainable parameter sets.

    Shapes are fixed at construction; :meth:`replace` checks every update.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, value in (arrays or {}).items():
            if name in self._arrays:
                raise ContractError(f"duplicate parameter name {name!r}")
            arr = np.array(value, dtype=np.float64)
            arr.flags.writeable = False
            self._arrays[name] = arr

    @classmethod
    def _adopt(cls, arrays: dict[str, np.ndarray]) -> "ParamSet":
        """Take ownership of freshly computed float64 arrays without copying."""
        out = cls.__new__(cls)
        out._arrays = {}
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            arr.flags.writeable = False
            out._arrays[name] = arr
        return out

    def __getitem__(self, name):
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def __repr__(self):
        inner = ", ".join(f"{k}: {v.shape}" for k, v in self._arrays.items())
        return f"ParamSet({inner})"

    @property
    def size(self) -> int:
        return sum(a.size for a in self._arrays.values())

    def bind(self, graph: Graph) -> dict[str, Tensor]:
        """Differentiable leaves on ``graph``."""
        return {k: graph.leaf(v) for k, v in self._arrays.items()}

    def const(self) -> dict[str, Tensor]:
        """Constant tensors; gradients never reach these."""
        return {k: Tensor(v) for k, v in self._arrays.items()}

    def replace(self, arrays: Mapping[str, np.ndarray]) -> "ParamSet":
        out = dict(self._arrays)
        for k, v in arrays.items():
            if k not in out:
                raise ContractError(f"unknown parameter {k!r}")
            if np.shape(v) != out[k].shape:
                raise ShapeError("ParamSet.replace", out[k].shape, np.shape(v), detail=k)
            out[k] = v
        return ParamSet(out)

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, shapes and values."""
        if list(self) != list(other):
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
            for k in self
        )


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "tanh"
    seed: int = 0
    linear_only: bool = False
    final_activation: bool = False
    zero_last: bool = False
    prefix: str = ""

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ContractError("an MLP needs at least an input and an output width")
        if any(int(w) <= 0 for w in self.widths):
            raise ContractError(f"widths must be positive, got {self.widths}")
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")


_ACTIVATIONS = {"tanh": T.tanh, "relu": T.relu}


class Mlp:
    """Fully connected network ``x -> h_1 -> ... -> y`` with ``x @ W + b`` layers."""

    def __init__(self, spec: MlpSpec):
        self.spec = spec
        self.n_layers = len(spec.widths) - 1
        self._act = _ACTIVATIONS[spec.activation]

    @property
    def in_dim(self):
        return self.spec.widths[0]

    @property
    def out_dim(self):
        return self.spec.widths[-1]

    def names(self, i):
        return f"{self.spec.prefix}W{i}", f"{self.spec.prefix}b{i}"

    def init_params(self, seed: int | None = None, counter: int = 0) -> ParamSet:
        """Glorot-uniform weights, zero biases, deterministic in the seed."""
        rng = stream(self.spec.seed if seed is None else seed, Stream.INIT, counter)
        arrays = {}
        for i, (n_in, n_out) in enumerate(zip(self.spec.widths[:-1], self.spec.widths[1:])):
            w_name, b_name = self.names(i)
            if self.spec.zero_last and i == self.n_layers - 1:
                arrays[w_name] = np.zeros((n_in, n_out))
            else:
                limit = math.sqrt(6.0 / (n_in + n_out))
                arrays[w_name] = rng.uniform(-limit, limit, size=(n_in, n_out))
            arrays[b_name] = np.zeros(n_out)
        return ParamSet(arrays)

    def __call__(self, params: Params, x: Tensor) -> Tensor:
        h = T.as_tensor(x)
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ShapeError("mlp", h.shape, (None, self.in_dim))
        for i in range(self.n_layers):
            w_name, b_name = self.names(i)
            h = h @ params[w_name] + params[b_name]
            last = i == self.n_layers - 1
            if not self.spec.linear_only and (not last or self.spec.final_activation):
                h = self._act(h)
        return h


def build_mlp(spec: MlpSpec) -> tuple[ParamSet, Mlp]:
    """Initial parameters plus the network, called as ``net(params, x)``."""
    net = Mlp(spec)
    return net.init_params(), net


class RatioNet:
    """Amortized log density-ratio estimator ``log r(primary; conditioning)``.

    Conditioning enters by concatenation.  With ``ignore_conditioning`` the
    conditioning argument is accepted but never read, which is how the
    unconditional discriminators of the deterministic GAN objectives arise.
    """

    def __init__(
        self,
        primary_dim: int,
        cond_dim: int,
        hidden=(128, 128),
        activation="relu",
        seed=0,
        ignore_conditioning=False,
        prefix="",
    ):
        self.primary_dim = primary_dim
        self.cond_dim = cond_dim
        self.ignore_conditioning = ignore_conditioning or cond_dim == 0
        in_dim = primary_dim if self.ignore_conditioning else primary_dim + cond_dim
        self.mlp = Mlp(
            MlpSpec(
                (in_dim, *hidden, 1),
                activation=activation,
                seed=seed,
                zero_last=True,
                prefix=prefix,
            )
        )

    def init_params(self, seed: int | None = None, counter: int = 0) -> ParamSet:
        return self.mlp.init_params(seed, counter)

    def __call__(self, params: Params, primary: Tensor, conditioning: Tensor | None) -> Tensor:
        primary = T.as_tensor(primary)
        if self.ignore_conditioning or conditioning is None:
            if not self.ignore_conditioning:
                raise ContractError("this ratio estimator needs a conditioning input")
            inp = primary
        else:
            conditioning = T.as_tensor(conditioning)
            if conditioning.shape[0] != primary.shape[0]:
                raise ShapeError("ratio_log", primary.shape, conditioning.shape)
            inp = T.concat([primary, conditioning], axis=1)
        out = self.mlp(params, inp)
        return T.reshape(out, (out.shape[0],))


def ratio_log(net: RatioNet, params: Params, primary, conditioning) -> Tensor:
    """Per-row log-ratio estimate."""
    return net(params, primary, conditioning)


def discriminator_from_ratio(log_r) -> Tensor:
    """D = 1 - sigmoid(log r), i.e. the probability a sample is real."""
    return T.sigmoid(-T.as_tensor(log_r))


def log_discriminator(log_r) -> Tensor:
    """log D = -softplus(log r)."""
    return T.log1m_sigmoid(log_r)


def log1m_discriminator(log_r) -> Tensor:
    """log(1 - D) = -softplus(-log r)."""
    return T.log_sigmoid(log_r)


@dataclass
class LatentVariableModel:
    """Generative mapping, recognition mapping and the two ratio estimators.

    ``decoder`` is the likelihood mean z -> x, ``encoder`` the posterior mean
    x -> z.  ``deterministic`` makes both conditionals ignore their noise.
    """

    decoder: Mlp
    encoder: Mlp
    ratio_latent: RatioNet | None = None
    ratio_observed: RatioNet | None = None
    family: str = "gaussian"
    tau: float = 0.1
    t: float = 0.1
    learn_scales: bool = False
    deterministic: bool = False
    scale_names: tuple[str, str] = field(default=("log_tau", "log_t"))

    @property
    def data_dim(self) -> int:
        return self.decoder.out_dim

    @property
    def latent_dim(self) -> int:
        return self.encoder.out_dim

    def _scale(self, params, name, fixed):
        if self.learn_scales:
            return T.exp(params[name])
        return fixed

    def likelihood(self, theta: Params):
        """p(x | z) with mean decoder(z) and scale tau."""
        return conditional(
            self.family,
            lambda z: self.decoder(theta, z),
            self._scale(theta, self.scale_names[0], self.tau),
            self.data_dim,
            self.deterministic,
        )

    def posterior(self, phi: Params):
        """q(z | x) with mean encoder(x) and scale t."""
        return conditional(
            self.family,
            lambda x: self.encoder(phi, x),
            self._scale(phi, self.scale_names[1], self.t),
            self.latent_dim,
            self.deterministic,
        )

    def init_params(self, seed: int = 0) -> dict[str, ParamSet]:
        theta = self.decoder.init_params(seed, 0)
        phi = self.encoder.init_params(seed, 1)
        if self.learn_scales:
            theta = ParamSet({**theta, self.scale_names[0]: np.array(math.log(self.tau))})
            phi = ParamSet({**phi, self.scale_names[1]: np.array(math.log(self.t))})
        out = {"theta": theta, "phi": phi}
        out["alpha"] = (
            self.ratio_latent.init_params(seed, 2) if self.ratio_latent else ParamSet()
        )
        out["beta"] = (
            self.ratio_observed.init_params(seed, 3) if self.ratio_observed else ParamSet()
        )
        return out
