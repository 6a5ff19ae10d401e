"""Alternating ratio/model optimization, optimizers, metrics and checkpoints.

Each step first takes ``ratio_steps`` ascent updates on the ratio estimators
(alpha, beta) with the mappings frozen, then one descent update on the
mappings (theta, phi) with the ratio estimators frozen.

Randomness is counter based.  The draws of sub-iteration ``j`` of step ``n``
come from streams keyed by ``(seed, stream, n * (ratio_steps + 1) + j)``, so
the RNG cursor of a run is fully described by its seed and step counter and
a resumed run replays exactly the draws an uninterrupted one would make.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import objectives as O
from . import tensor as T
from .distributions import SampleBank, Stream, banana_log_density, base_noise, stream
from .divergences import gan_f, kl_f
from .errors import CheckpointError, ContractError, NonFiniteError, ShapeError, TrainingAborted
from .models import LatentVariableModel, Mlp, MlpSpec, ParamSet, RatioNet
from .tensor import Graph

log = logging.getLogger(__name__)

MODES = ("sjmvi", "cyclegan", "vae")
MODEL_GROUPS = ("theta", "phi")
RATIO_GROUPS = ("alpha", "beta")
METRIC_COLUMNS = (
    "step",
    "nell",
    "nelp",
    "dre_latent",
    "dre_observed",
    "dm_latent",
    "dm_observed",
    "total",
)
CHECKPOINT_FORMAT = "sjmvi-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run besides the data."""

    mode: str = "sjmvi"
    dm_loss: str = "c"
    dre: str = "gan"
    steps: int = 20000
    batch_size: int = 64
    lr_model: float = 1e-3
    lr_ratio: float = 2e-4
    optimizer: str = "adam"
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ratio_steps: int = 1
    tau: float = 0.1
    t: float = 0.1
    learn_scales: bool = False
    family: str = "gaussian"
    norm_order: int = 2
    seed: int = 0
    elbo_weight: float = 1.0
    aplbo_weight: float = 1.0
    cycle_weights: tuple[float, float] | None = None
    log_interval: int = 100
    hidden: tuple[int, ...] = (256, 256)
    activation: str = "tanh"
    ratio_hidden: tuple[int, ...] = (128, 128)
    ratio_activation: str = "relu"
    linear: bool = False
    ignore_conditioning: bool | None = None
    prior_density: str = "banana"
    prior_correlation: float = 0.95

    def __post_init__(self):
        def need(cond, msg):
            if not cond:
                raise ContractError(f"invalid TrainConfig: {msg}")

        need(self.mode in MODES, f"mode must be one of {MODES}")
        need(self.dm_loss in O.DM_VARIANTS, "dm_loss must be a, b or c")
        need(self.dre in ("gan", "kl"), "dre must be gan or kl")
        need(self.optimizer in ("sgd", "adam"), "optimizer must be sgd or adam")
        need(isinstance(self.steps, int) and self.steps >= 0, "steps must be >= 0")
        need(self.batch_size >= 1, "batch_size must be positive")
        need(self.lr_model > 0 and self.lr_ratio > 0, "learning rates must be positive")
        need(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "Adam betas must lie in [0, 1)")
        need(self.adam_eps > 0, "adam_eps must be positive")
        need(self.ratio_steps >= 1, "ratio_steps must be >= 1")
        need(self.tau > 0 and self.t > 0, "scales must be positive")
        need(self.family in ("gaussian", "laplace"), "family must be gaussian or laplace")
        need(self.norm_order in (1, 2), "norm_order must be 1 or 2")
        need(self.log_interval >= 1, "log_interval must be positive")
        need(self.prior_density in ("banana", "standard-normal"), "unknown prior_density")
        if self.cycle_weights is not None:
            need(len(self.cycle_weights) == 2, "cycle_weights needs two values")

    @property
    def conditioning_ignored(self) -> bool:
        if self.ignore_conditioning is None:
            return self.mode == "cyclegan"
        return self.ignore_conditioning

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractError(f"unknown TrainConfig fields: {sorted(unknown)}")
        data = dict(data)
        for key in ("hidden", "ratio_hidden", "cycle_weights"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)


def build_model(config: TrainConfig, data_dim: int, latent_dim: int) -> LatentVariableModel:
    """Networks sized for the data and prior dimensions."""
    hidden = () if config.linear else tuple(config.hidden)
    lin = dict(linear_only=config.linear)
    decoder = Mlp(MlpSpec((latent_dim, *hidden, data_dim), config.activation, prefix="dec_", **lin))
    encoder = Mlp(MlpSpec((data_dim, *hidden, latent_dim), config.activation, prefix="enc_", **lin))
    ratio_latent = ratio_observed = None
    if config.mode != "vae":
        kw = dict(
            hidden=tuple(config.ratio_hidden),
            activation=config.ratio_activation,
            ignore_conditioning=config.conditioning_ignored,
        )
        ratio_latent = RatioNet(latent_dim, data_dim, prefix="a_", **kw)
        ratio_observed = RatioNet(data_dim, latent_dim, prefix="b_", **kw)
    return LatentVariableModel(
        decoder,
        encoder,
        ratio_latent,
        ratio_observed,
        family=config.family,
        tau=config.tau,
        t=config.t,
        learn_scales=config.learn_scales,
        deterministic=config.mode == "cyclegan",
    )


# --- optimizers ----------------------------------------------------------------


@dataclass(frozen=True)
class Moments:
    """Adam first and second moments plus the update count."""

    m: ParamSet
    v: ParamSet
    count: int = 0

    @classmethod
    def zeros_like(cls, params: ParamSet) -> "Moments":
        zeros = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(ParamSet(zeros), ParamSet(zeros), 0)


def optimizer_step(
    kind: str,
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    moments: Moments | None,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamSet, Moments | None]:
    """One descent update; returns new parameters and moments."""
    if set(grads) != set(params):
        raise ContractError("gradient names do not match parameter names")
    for k in params:
        if np.shape(grads[k]) != params[k].shape:
            raise ShapeError("optimizer_step", params[k].shape, np.shape(grads[k]), detail=k)
    if kind == "sgd":
        return ParamSet._adopt({k: params[k] - lr * np.asarray(grads[k]) for k in params}), moments
    if kind != "adam":
        raise ContractError(f"unknown optimizer {kind!r}")
    if moments is None:
        moments = Moments.zeros_like(params)
    count = moments.count + 1
    c1, c2 = 1.0 - beta1**count, 1.0 - beta2**count
    new, m, v = {}, {}, {}
    for k in params:
        g = np.asarray(grads[k], dtype=np.float64)
        m[k] = moments.m[k] * beta1 + g * (1.0 - beta1)
        v[k] = moments.v[k] * beta2 + np.square(g) * (1.0 - beta2)
        denom = np.sqrt(v[k] * (1.0 / c2))
        denom += eps
        step = m[k] * (lr / c1)
        step /= denom
        new[k] = params[k] - step
    return ParamSet._adopt(new), Moments(ParamSet._adopt(m), ParamSet._adopt(v), count)


# --- state ---------------------------------------------------------------------


@dataclass
class TrainState:
    """Parameters, optimizer moments and the step counter of a run.

    Together with the config seed the step counter is the RNG cursor.
    """

    params: dict[str, ParamSet]
    moments: dict[str, Moments | None] = field(default_factory=dict)
    step: int = 0
    seed: int = 0

    def equal(self, other: "TrainState") -> bool:
        if self.step != other.step or self.seed != other.seed:
            return False
        if set(self.params) != set(other.params) or set(self.moments) != set(other.moments):
            return False
        if not all(self.params[k].equal(other.params[k]) for k in self.params):
            return False
        for k, a in self.moments.items():
            b = other.moments[k]
            if (a is None) != (b is None):
                return False
            if a is not None and not (a.count == b.count and a.m.equal(b.m) and a.v.equal(b.v)):
                return False
        return True


def initial_state(config: TrainConfig, model: LatentVariableModel) -> TrainState:
    params = model.init_params(config.seed)
    return TrainState(params, {k: None for k in params}, 0, config.seed)


# --- metric log ----------------------------------------------------------------


@dataclass
class MetricLog:
    rows: list[dict[str, float]] = field(default_factory=list)
    extra: dict[str, str] = field(default_factory=dict)

    def append(self, row: Mapping[str, float]) -> None:
        self.rows.append({c: row.get(c, math.nan) for c in METRIC_COLUMNS})

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(METRIC_COLUMNS) + "\n")
        for r in self.rows:
            cells = [str(int(r["step"]))] + [repr(float(r[c])) for c in METRIC_COLUMNS[1:]]
            buf.write(",".join(cells) + "\n")
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_csv_text())


# --- one training step -----------------------------------------------------------


@dataclass(frozen=True)
class Draws:
    x: T.Tensor
    z: T.Tensor
    eps: np.ndarray
    xi: np.ndarray


def draw_batch(config, data: SampleBank, prior: SampleBank, counter: int) -> Draws:
    n, seed = config.batch_size, config.seed
    x = data.draw_minibatch(n, stream(seed, Stream.DATA, counter))
    z = prior.draw_minibatch(n, stream(seed, Stream.PRIOR, counter))
    eps = base_noise(config.family, stream(seed, Stream.NOISE_EPS, counter), (n, prior.dim))
    xi = base_noise(config.family, stream(seed, Stream.NOISE_XI, counter), (n, data.dim))
    return Draws(x, z, eps, xi)


def prior_log_density_fn(config: TrainConfig) -> Callable:
    if config.prior_density == "banana":
        return lambda z: banana_log_density(z, config.prior_correlation)

    def standard_normal(z):
        k = z.shape[1]
        return T.sum(T.square(z), axis=1) * -0.5 - 0.5 * k * math.log(2.0 * math.pi)

    return standard_normal


def ratio_objective(config, model, alpha, beta, theta, phi, d: Draws) -> dict[str, T.Tensor]:
    """Bounds maximized by the ratio estimators; mappings are frozen inside."""
    fdiv = gan_f() if config.dre == "gan" else kl_f()
    return {
        "dre_latent": O.dre_latent(model, fdiv, alpha, phi, d.x, d.eps, d.z),
        "dre_observed": O.dre_observed(model, fdiv, beta, theta, d.z, d.xi, d.x),
    }


def model_report(config, model, theta, phi, alpha, beta, d: Draws) -> O.ObjectiveReport:
    """The mode's minimization target for the mappings."""
    if config.mode == "sjmvi":
        return O.symmetric_joint_report(
            model,
            theta,
            phi,
            alpha,
            beta,
            d.x,
            d.eps,
            d.z,
            d.xi,
            (config.elbo_weight, config.aplbo_weight),
            config.dm_loss,
        )
    if config.mode == "cyclegan":
        return O.cycle_report(
            model,
            theta,
            phi,
            alpha,
            beta,
            d.x,
            d.z,
            config.cycle_weights,
            config.dm_loss,
            config.norm_order,
        )
    return O.vae_report(model, theta, phi, d.x, d.eps, prior_log_density_fn(config))


def _metric_row(config, report: O.ObjectiveReport, ratio_vals: Mapping[str, float]) -> dict:
    v = report.term_values()
    row = dict(ratio_vals)
    if config.mode == "sjmvi":
        row.update({k: v[k] for k in ("nell", "nelp", "dm_latent", "dm_observed")})
    elif config.mode == "cyclegan":
        # Weighted cycle losses stand in for the degenerate-limit nell and nelp.
        w = config.cycle_weights or (report.constants["gamma1"], report.constants["gamma2"])
        row.update(
            nell=w[0] * v["cycle_reverse"],
            nelp=w[1] * v["cycle_forward"],
            dm_latent=v["dm_latent"],
            dm_observed=v["dm_observed"],
        )
    else:
        row.update(nell=v["nell"], dm_latent=v["kl"])
    row["total"] = report.value
    return row


def _apply(config, state, groups, grads, lr, ascend=False):
    for name in groups:
        g = grads[name]
        if ascend:
            g = {k: -v for k, v in g.items()}
        state.params[name], state.moments[name] = optimizer_step(
            config.optimizer,
            state.params[name],
            g,
            state.moments.get(name),
            lr,
            config.beta1,
            config.beta2,
            config.adam_eps,
        )


def _grads(graph: Graph, root, bound: Mapping[str, Mapping[str, T.Tensor]]):
    names = [(g, k) for g in bound for k in bound[g]]
    values = graph.grad(root, [bound[g][k] for g, k in names])
    out: dict[str, dict[str, np.ndarray]] = {g: {} for g in bound}
    for (g, k), v in zip(names, values):
        out[g][k] = v
    return out


def train_step(config, model, state: TrainState, data, prior) -> dict[str, float]:
    """Advance ``state`` by one step in place; returns the step's metrics."""
    n = state.step
    base = n * (config.ratio_steps + 1)
    ratio_vals = {}
    if config.mode != "vae":
        for j in range(config.ratio_steps):
            d = draw_batch(config, data, prior, base + j)
            graph = Graph()
            bound = {g: state.params[g].bind(graph) for g in RATIO_GROUPS}
            theta, phi = state.params["theta"].const(), state.params["phi"].const()
            try:
                terms = ratio_objective(config, model, bound["alpha"], bound["beta"], theta, phi, d)
                root = terms["dre_latent"] + terms["dre_observed"]
                grads = _grads(graph, root, bound)
            except NonFiniteError as err:
                raise TrainingAborted(n + 1, "ratio objective", str(err)) from err
            _check_grads(n + 1, grads)
            _apply(config, state, RATIO_GROUPS, grads, config.lr_ratio, ascend=True)
            ratio_vals = {k: v.item() for k, v in terms.items()}

    d = draw_batch(config, data, prior, base + config.ratio_steps)
    graph = Graph()
    bound = {g: state.params[g].bind(graph) for g in MODEL_GROUPS}
    alpha, beta = state.params["alpha"].const(), state.params["beta"].const()
    try:
        report = model_report(config, model, bound["theta"], bound["phi"], alpha, beta, d)
        grads = _grads(graph, report.total, bound)
    except NonFiniteError as err:
        raise TrainingAborted(n + 1, "model objective", str(err)) from err
    _check_grads(n + 1, grads)
    _apply(config, state, MODEL_GROUPS, grads, config.lr_model)
    state.step = n + 1
    row = _metric_row(config, report, ratio_vals)
    row["step"] = state.step
    return row


def _check_grads(step, grads):
    for group, g in grads.items():
        for k, v in g.items():
            if not np.isfinite(v).all():
                raise TrainingAborted(step, f"gradient of {group}.{k}")


def train(
    config: TrainConfig,
    data_bank: SampleBank,
    prior_bank: SampleBank,
    state: TrainState | None = None,
    model: LatentVariableModel | None = None,
) -> tuple[TrainState, MetricLog]:
    """Run until ``config.steps`` steps have been taken.

    Passing a checkpointed ``state`` resumes from its step counter.  Metrics
    are logged after every step whose number is a multiple of
    ``config.log_interval``.
    """
    if model is None:
        model = build_model(config, data_bank.dim, prior_bank.dim)
    if data_bank.dim != model.data_dim or prior_bank.dim != model.latent_dim:
        raise ShapeError(
            "train",
            (data_bank.dim, prior_bank.dim),
            (model.data_dim, model.latent_dim),
            detail="bank dimensions disagree with the model",
        )
    if state is None:
        state = initial_state(config, model)
    elif state.seed != config.seed:
        raise ContractError("resumed state was trained with a different seed")
    state = TrainState(dict(state.params), dict(state.moments), state.step, state.seed)
    metrics = MetricLog()
    while state.step < config.steps:
        row = train_step(config, model, state, data_bank, prior_bank)
        if state.step % config.log_interval == 0:
            metrics.append(row)
            log.info("step %d total %.6g", state.step, row["total"])
    return state, metrics


# --- checkpoints -----------------------------------------------------------------


def _encode(arr: np.ndarray) -> dict:
    le = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(le.tobytes()).decode("ascii")}


def _decode(entry) -> np.ndarray:
    raw = base64.b64decode(entry["data"], validate=True)
    shape = tuple(int(s) for s in entry["shape"])
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != math.prod(shape):
        raise CheckpointError("array payload does not match its shape")
    return arr.reshape(shape).astype(np.float64)


def _encode_set(ps: ParamSet) -> dict:
    return {"names": list(ps), "arrays": [_encode(ps[k]) for k in ps]}


def _decode_set(doc) -> ParamSet:
    return ParamSet({k: _decode(a) for k, a in zip(doc["names"], doc["arrays"])})


def _payload(state: TrainState) -> dict:
    moments = {}
    for k, mo in state.moments.items():
        moments[k] = None if mo is None else {
            "count": mo.count,
            "m": _encode_set(mo.m),
            "v": _encode_set(mo.v),
        }
    return {
        "step": state.step,
        "seed": state.seed,
        "params": {k: _encode_set(v) for k, v in state.params.items()},
        "moments": moments,
    }


def checkpoint_bytes(state: TrainState) -> bytes:
    payload = _payload(state)
    body = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    doc = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "sha256": hashlib.sha256(body.encode()).hexdigest(),
        "payload": payload,
    }
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode()


def checkpoint_save(state: TrainState, path) -> None:
    """Write ``state`` atomically as a versioned, checksummed JSON document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)


def checkpoint_load(path) -> TrainState:
    try:
        doc = json.loads(Path(path).read_bytes())
    except FileNotFoundError as err:
        raise CheckpointError(f"{path}: no such checkpoint") from err
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt checkpoint ({err})") from err
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {doc.get('format_version')!r}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    payload = doc.get("payload")
    body = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    if hashlib.sha256(body.encode()).hexdigest() != doc.get("sha256"):
        raise CheckpointError(f"{path}: checksum mismatch")
    try:
        params = {k: _decode_set(v) for k, v in payload["params"].items()}
        moments = {}
        for k, mo in payload["moments"].items():
            moments[k] = None if mo is None else Moments(
                _decode_set(mo["m"]), _decode_set(mo["v"]), int(mo["count"])
            )
        return TrainState(params, moments, int(payload["step"]), int(payload["seed"]))
    except (KeyError, TypeError, ValueError) as err:
        raise CheckpointError(f"{path}: malformed checkpoint ({err})") from err


# --- standalone ratio fitting ------------------------------------------------------


def fit_log_ratio(
    net: RatioNet,
    sample_q: Callable[[np.random.Generator, int], np.ndarray],
    sample_p: Callable[[np.random.Generator, int], np.ndarray],
    fdiv=None,
    steps: int = 2000,
    batch_size: int = 256,
    lr: float = 1e-3,
    seed: int = 0,
    params: ParamSet | None = None,
) -> ParamSet:
    """Fit an unconditional ``log r = log q/p`` by ascending an f-bound.

    ``sample_q`` and ``sample_p`` map a generator and a count to draws.
    """
    from .divergences import f_bound

    fdiv = fdiv or gan_f()
    params = params if params is not None else net.init_params(seed)
    moments = None
    for step in range(steps):
        gq, gp = stream(seed, Stream.DATA, step), stream(seed, Stream.PRIOR, step)
        q, p = sample_q(gq, batch_size), sample_p(gp, batch_size)
        graph = Graph()
        bound = params.bind(graph)
        value = f_bound(fdiv, net(bound, q, None), net(bound, p, None))
        names = list(bound)
        grads = graph.grad(value, [bound[k] for k in names])
        params, moments = optimizer_step(
            "adam", params, {k: -g for k, g in zip(names, grads)}, moments, lr
        )
    return params
