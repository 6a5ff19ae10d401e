"""Prescribed conditionals, sample banks, and the banana-shaped prior."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ContractError, DomainError, EmptyBankError, ShapeError
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)


class Stream(IntEnum):
    """Identifiers for the independent random streams of one experiment."""

    INIT = 0
    DATA = 1
    PRIOR = 2
    NOISE_EPS = 3
    NOISE_XI = 4
    SPLIT = 5
    EVAL = 6
    BANK = 7


def stream(seed: int, stream_id: int, counter: int = 0) -> np.random.Generator:
    """Generator keyed by ``(seed, stream_id, counter)``.

    Philox is counter based, so distinct keys never share a sequence and a
    run can be resumed at any counter without replaying earlier draws.
    """
    ss = np.random.SeedSequence([int(seed), int(stream_id), int(counter)])
    return np.random.Generator(np.random.Philox(ss))


class _Conditional:
    family = ""

    def __init__(self, mean_fn: Callable[[Tensor], Tensor], scale, dim: int, noise_free=False):
        if isinstance(scale, Tensor):
            if scale.shape != ():
                raise ShapeError("scale", scale.shape, ())
            if scale.item() < 0:
                raise DomainError("scale must be nonnegative")
        else:
            scale = float(scale)
            if scale < 0:
                raise DomainError("scale must be nonnegative")
        self.mean_fn = mean_fn
        self.scale = scale
        self.dim = int(dim)
        # Ignores the noise argument entirely: G(eps; x) = m(x).
        self.noise_free = noise_free

    @property
    def scale_value(self) -> float:
        return self.scale.item() if isinstance(self.scale, Tensor) else self.scale

    def rsample(self, cond: Tensor, noise) -> Tensor:
        """Location-scale reparameterization ``mean(cond) + scale * noise``."""
        mean = self.mean_fn(T.as_tensor(cond))
        if self.noise_free:
            return mean
        noise = T.as_tensor(noise)
        if noise.shape != mean.shape:
            raise ShapeError("rsample", mean.shape, noise.shape)
        return mean + noise * self.scale

    def _check(self, cond, value):
        if cond.shape[0] != value.shape[0]:
            raise ShapeError("log_prob", cond.shape, value.shape, detail="batch lengths differ")
        if self.scale_value <= 0:
            raise DomainError("log_prob needs a strictly positive scale")


class ConditionalGaussian(_Conditional):
    """N(value | mean_fn(cond), scale^2 I)."""

    family = "gaussian"

    @staticmethod
    def base_noise(rng: np.random.Generator, shape) -> np.ndarray:
        return rng.standard_normal(shape)

    def log_prob(self, cond: Tensor, value: Tensor) -> Tensor:
        cond, value = T.as_tensor(cond), T.as_tensor(value)
        self._check(cond, value)
        mean = self.mean_fn(cond)
        if mean.shape != value.shape:
            raise ShapeError("log_prob", mean.shape, value.shape)
        sq = T.sum(T.square(value - mean), axis=1)
        if isinstance(self.scale, Tensor):
            log_s = T.log(self.scale)
            return sq * T.exp(log_s * -2.0) * -0.5 - (log_s * 2.0 + LOG_2PI) * (0.5 * self.dim)
        s2 = self.scale * self.scale
        return sq * (-0.5 / s2) - 0.5 * self.dim * (LOG_2PI + math.log(s2))

    def entropy(self) -> float:
        return 0.5 * self.dim * (1.0 + LOG_2PI + 2.0 * math.log(self.scale_value))


class ConditionalLaplace(_Conditional):
    """Product of Laplace(mean_fn(cond)_i, scale) densities."""

    family = "laplace"

    @staticmethod
    def base_noise(rng: np.random.Generator, shape) -> np.ndarray:
        # Inverse CDF of the standard Laplace on u ~ U(-1/2, 1/2).
        u = rng.random(shape) - 0.5
        return -np.sign(u) * np.log1p(-2.0 * np.abs(u))

    def log_prob(self, cond: Tensor, value: Tensor) -> Tensor:
        cond, value = T.as_tensor(cond), T.as_tensor(value)
        self._check(cond, value)
        mean = self.mean_fn(cond)
        if mean.shape != value.shape:
            raise ShapeError("log_prob", mean.shape, value.shape)
        l1 = T.sum(T.absolute(value - mean), axis=1)
        if isinstance(self.scale, Tensor):
            log_s = T.log(self.scale)
            return -(l1 * T.exp(-log_s)) - (log_s + math.log(2.0)) * self.dim
        return l1 * (-1.0 / self.scale) - self.dim * math.log(2.0 * self.scale)

    def entropy(self) -> float:
        return self.dim * (1.0 + math.log(2.0 * self.scale_value))


def conditional(family: str, mean_fn, scale, dim, noise_free=False) -> _Conditional:
    if family == "gaussian":
        return ConditionalGaussian(mean_fn, scale, dim, noise_free)
    if family == "laplace":
        return ConditionalLaplace(mean_fn, scale, dim, noise_free)
    raise ContractError(f"unknown conditional family {family!r}")


def base_noise(family: str, rng: np.random.Generator, shape) -> np.ndarray:
    if family == "laplace":
        return ConditionalLaplace.base_noise(rng, shape)
    return ConditionalGaussian.base_noise(rng, shape)


@dataclass(frozen=True, eq=False)
class SampleBank:
    """Finite sample set standing in for an implicit distribution."""

    samples: np.ndarray
    seed: int = 0
    labels: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise EmptyBankError(f"sample bank needs at least one row, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)

    @property
    def count(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def __len__(self):
        return self.count

    def draw_minibatch(self, size: int, rng: np.random.Generator) -> Tensor:
        """``size`` rows drawn uniformly with replacement."""
        if size < 1:
            raise ContractError("minibatch size must be at least 1")
        idx = rng.integers(0, self.count, size=size)
        return Tensor(self.samples[idx])

    def subset(self, idx) -> "SampleBank":
        labels = None if self.labels is None else self.labels[idx]
        return SampleBank(self.samples[idx], self.seed, labels)

    @classmethod
    def from_csv(cls, path, seed: int = 0) -> "SampleBank":
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#"):
                    continue
                try:
                    rows.append([float(v) for v in row])
                except ValueError:
                    if rows:
                        raise
                    continue  # header line
        if not rows:
            raise EmptyBankError(f"{path}: no sample rows")
        return cls(np.array(rows), seed)

    def to_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in self.samples:
                writer.writerow([repr(float(v)) for v in row])


def banana_transform(g: np.ndarray) -> np.ndarray:
    """H(z1, z2) = [z1, z2 - z1^2 - 1]."""
    g = np.asarray(g, dtype=np.float64)
    return np.stack([g[:, 0], g[:, 1] - g[:, 0] ** 2 - 1.0], axis=1)


def correlated_normal(n: int, correlation: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance bivariate normal draws via the Cholesky factor."""
    if not abs(correlation) < 1.0:
        raise DomainError("correlation must satisfy |rho| < 1")
    chol = np.linalg.cholesky(np.array([[1.0, correlation], [correlation, 1.0]]))
    return rng.standard_normal((n, 2)) @ chol.T


def banana_sample(n: int, correlation: float = 0.95, seed: int = 0, counter: int = 0) -> SampleBank:
    g = correlated_normal(n, correlation, stream(seed, Stream.BANK, counter))
    return SampleBank(banana_transform(g), seed)


def banana_log_density(z, correlation: float = 0.95) -> Tensor:
    """Per-row log density of the banana distribution.

    H is a shear with unit Jacobian, so the density is the correlated normal
    evaluated at H^{-1}(z) = [z1, z2 + z1^2 + 1].
    """
    if not abs(correlation) < 1.0:
        raise DomainError("correlation must satisfy |rho| < 1")
    z = T.as_tensor(z)
    if z.ndim != 2 or z.shape[1] != 2:
        raise ShapeError("banana_log_density", z.shape, (None, 2))
    u1 = z[:, 0]
    u2 = z[:, 1] + T.square(u1) + 1.0
    one_m = 1.0 - correlation * correlation
    quad = (T.square(u1) + T.square(u2) - (u1 * u2) * (2.0 * correlation)) * (-0.5 / one_m)
    return quad - (LOG_2PI + 0.5 * math.log(one_m))
