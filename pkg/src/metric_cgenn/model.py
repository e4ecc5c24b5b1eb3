"""CGENN with a learnable symmetric metric.

The forward pass follows the eigendecomposition pipeline: diagonalise ``M``,
move point and volume inputs into the eigenbasis, run the network under the
eigenvalue metric, then map the readout back to the input basis.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import metric as metric_mod
from .algebra import DiagonalMetric
from .autodiff import Parameter, Tape, Tensor
from .errors import ActivationError, ConfigError, NonFiniteLossError
from .layers import AlgebraContext, GatedNonlinearity, GeometricProduct, Linear, Norm, embed
from .metric import OUTPUT_KINDS, MetricMatrix, init_metric
from .tasks import RawInput


@dataclass
class ModelConfig:
    dim: int = 3
    q_signature: tuple = (1.0, 1.0, 1.0)
    epsilon: float = 1e-3
    num_blocks: int = 2
    hidden_channels: int = 16
    output_kind: str = "volume"
    seed: int = 0
    input_points: int = 4
    input_scalars: int = 0
    input_volumes: int = 0
    out_channels: int = 1

    def __post_init__(self):
        self.q_signature = tuple(float(q) for q in self.q_signature)
        if self.num_blocks < 1 or self.hidden_channels < 1:
            raise ConfigError("num_blocks and hidden_channels must be at least 1")
        if len(self.q_signature) != self.dim:
            raise ConfigError(f"q_signature has {len(self.q_signature)} entries for dim {self.dim}")
        if self.output_kind not in OUTPUT_KINDS:
            raise ConfigError(f"unknown output kind {self.output_kind!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("model needs at least one input and one output channel")

    @property
    def in_channels(self) -> int:
        return self.input_points + self.input_scalars + self.input_volumes

    @property
    def q(self) -> DiagonalMetric:
        return DiagonalMetric(self.q_signature)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["q_signature"] = list(self.q_signature)
        return d


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    learning_rate: float = 1e-3
    metric_activation_fraction: float = 0.0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if not 0.0 <= self.metric_activation_fraction <= 1.0:
            raise ConfigError("metric_activation_fraction must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.log_every < 1:
            raise ConfigError("log_every must be at least 1")

    @property
    def activation_step(self) -> int:
        return math.floor(self.metric_activation_fraction * self.steps)

    def to_dict(self) -> dict:
        return asdict(self)


class Block:
    """``a = L(x), b = L'(x); a + NonLinear(Norm(GP(a, b)))``."""

    def __init__(self, name: str, in_channels: int, channels: int, dim: int, rng):
        self.left = Linear(f"{name}.left", in_channels, channels, dim, rng)
        self.right = Linear(f"{name}.right", in_channels, channels, dim, rng)
        self.gp = GeometricProduct(f"{name}.gp", channels, dim, rng)
        self.norm = Norm(f"{name}.norm", dim)
        self.act = GatedNonlinearity(f"{name}.act", channels, dim)

    @property
    def layers(self):
        return [self.left, self.right, self.gp, self.norm, self.act]

    def __call__(self, x: Tensor, ctx: AlgebraContext) -> Tensor:
        a = self.left(x, ctx)
        b = self.right(x, ctx)
        h = self.act(self.norm(self.gp(a, b, ctx), ctx), ctx)
        return a + h


class CGENN:
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
        n = config.dim
        self.blocks = []
        cin = config.in_channels
        for i in range(config.num_blocks):
            self.blocks.append(Block(f"blocks[{i}]", cin, config.hidden_channels, n, rng))
            cin = config.hidden_channels
        self.readout = Linear("readout", cin, config.out_channels, n, rng)
        self.metric = Parameter("metric.M", np.diag(config.q.as_array()))

    @property
    def layers(self):
        out = []
        for b in self.blocks:
            out.extend(b.layers)
        out.append(self.readout)
        return out

    def parameters(self, include_metric: bool = True):
        ps = [p for layer in self.layers for p in layer.parameters()]
        if include_metric:
            ps.append(self.metric)
        return ps

    def metric_matrix(self) -> MetricMatrix:
        return MetricMatrix(self.metric.value)


@dataclass
class ForwardResult:
    tape: Tape
    output: Tensor
    decomp: object = None


def forward(model: CGENN, raw: RawInput, activated: bool) -> ForwardResult:
    """One recorded forward pass.

    Before activation the metric is ``Q`` and both basis changes are the
    identity, so nothing about ``M`` is recorded.
    """
    cfg = model.config
    n = cfg.dim
    tape = Tape()
    points, volumes = raw.points, raw.volumes
    decomp = None
    if activated:
        lam, u = ad.eig(tape.watch(model.metric))
        decomp = metric_mod.EigenDecomposition(lam.data, u.data)
        delta = lam
        if points is not None:
            points = tape.constant(points) @ u
        if volumes is not None:
            volumes = metric_mod.transform_volume_input(np.asarray(volumes), decomp)
    else:
        delta = tape.constant(cfg.q.as_array())
    ctx = AlgebraContext(tape, n, delta)
    x = embed(ctx, points=points, scalars=raw.scalars, volumes=volumes)
    for block in model.blocks:
        x = block(x, ctx)
    y = model.readout(x, ctx)

    kind = cfg.output_kind
    if kind == "point":
        out = y[:, :, [1 << i for i in range(n)]]
        if activated:
            out = out @ u.T
    elif kind == "volume":
        out = y[:, :, (1 << n) - 1]
        if activated:
            out = out * (1.0 / decomp.det_c)
    elif kind == "scalar":
        out = y[:, :, 0]
    else:
        out = ad.sigmoid(y[:, :, 0])
    return ForwardResult(tape, out, decomp)


def predict(model: CGENN, dataset, activated: bool, chunk: int = 512) -> np.ndarray:
    outs = []
    for start in range(0, len(dataset), chunk):
        part = dataset.subset(slice(start, start + chunk))
        res = forward(model, part.raw(), activated)
        outs.append(res.output.data + part.offset())
    return np.concatenate(outs, axis=0)


def loss_fn(pred: Tensor, target, kind: str) -> Tensor:
    if kind == "probability":
        t = np.asarray(target, dtype=np.float64)
        p = ad.clamp_abs(pred, 1e-12)
        q = ad.clamp_abs(1.0 - pred, 1e-12)
        return -(ad.log(p) * t + ad.log(q) * (1.0 - t)).mean()
    diff = pred - target
    return (diff * diff).mean()


def loss_value(pred: np.ndarray, target: np.ndarray, kind: str) -> float:
    if kind == "probability":
        p = np.clip(pred, 1e-12, 1 - 1e-12)
        return float(-np.mean(target * np.log(p) + (1 - target) * np.log(1 - p)))
    return float(np.mean((pred - target) ** 2))


class SGD:
    name = "sgd"

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params):
        for p in params:
            p.value = p.value - self.lr * p.grad

    def state_dict(self):
        return {}

    def load_state_dict(self, state):
        pass


class Adam:
    name = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, params):
        for p in params:
            m = self.m.get(p.name, np.zeros_like(p.value))
            v = self.v.get(p.name, np.zeros_like(p.value))
            t = self.t.get(p.name, 0) + 1
            m = self.beta1 * m + (1 - self.beta1) * p.grad
            v = self.beta2 * v + (1 - self.beta2) * p.grad * p.grad
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            self.m[p.name], self.v[p.name], self.t[p.name] = m, v, t

    def state_dict(self):
        return {
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
            "t": dict(self.t),
        }

    def load_state_dict(self, state):
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state.get("m", {}).items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state.get("v", {}).items()}
        self.t = {k: int(v) for k, v in state.get("t", {}).items()}


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)


@dataclass
class TrainState:
    step: int = 0
    metric_activated: bool = False
    activation_step: int | None = None
    optimizer: object = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)


def new_state(train_cfg: TrainConfig) -> TrainState:
    return TrainState(
        optimizer=make_optimizer(train_cfg),
        rng=np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 1])),
    )


def activate_metric(model: CGENN, state: TrainState) -> TrainState:
    """Replace ``M`` by the perturbed ``Q + eps (R + R^T)`` and start learning it."""
    if state.metric_activated:
        raise ActivationError("metric is already active")
    cfg = model.config
    model.metric.value = np.array(init_metric(cfg.q, cfg.epsilon, cfg.seed).values)
    model.metric.zero_grad()
    state.metric_activated = True
    state.activation_step = state.step
    return state


def train_step(model: CGENN, state: TrainState, batch, loss_kind: str | None = None) -> float:
    """One optimisation step on ``batch``; returns the pre-update batch loss."""
    if len(batch) == 0:
        raise ConfigError("empty batch")
    kind = loss_kind or model.config.output_kind
    params = model.parameters(include_metric=state.metric_activated)
    for p in model.parameters():
        p.zero_grad()
    res = forward(model, batch.raw(), state.metric_activated)
    pred = res.output + batch.offset()
    loss = loss_fn(pred, batch.targets(), kind)
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}",
            {"step": state.step, "loss": value, "metric": model.metric.value.tolist()},
        )
    ad.backward(res.tape, loss)
    if state.metric_activated and metric_mod.SYMMETRIZE_GRADIENTS:
        g = model.metric.grad
        model.metric.grad = 0.5 * (g + g.T)
    state.optimizer.step(params)
    state.step += 1
    return value


def evaluate(model: CGENN, state: TrainState, dataset) -> dict:
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    kind = model.config.output_kind
    pred = predict(model, dataset, state.metric_activated)
    target = dataset.targets()
    out = {"loss": loss_value(pred, target, kind), "count": len(dataset)}
    if kind == "probability":
        out["accuracy"] = float(np.mean((pred >= 0.5) == (target >= 0.5)))
    return out
