"""A small SGD trainer for fully connected residual networks.

Gradients are computed by hand-written reverse-mode differentiation over
a flat dictionary of parameters. Each block contributes ``blockN.w1``,
``blockN.b1``, ``blockN.w2``, ``blockN.b2``, a trainable scalar
``blockN.alpha`` and, for Type C blocks, ``blockN.w_skip`` and
``blockN.b_skip``. The first layer ``w0`` has no bias; the output layer
is ``w_out``, ``b_out``.
"""

import math
import time
from enum import Enum
from typing import Any, Optional, Sequence

import attrs
import numpy as np
import numpy.typing as npt
from attrs import define
from humanize import precisedelta
from scipy import stats

from risotto.datasets import Dataset
from risotto.initializers import InitScheme
from risotto.linalg import Array, RngStream, relu
from risotto.network import NetworkSpec, NetworkWeights, build_network
from risotto.work import WorkContext, mean_and_stderr


DIVERGENCE_LOSS = 1e6

Params = dict[str, Array]


class ConfigError(ValueError):
    pass


class Schedule(Enum):
    CONSTANT = "constant"
    COSINE = "cosine"


@define(frozen=True)
class TrainConfig:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: Schedule = attrs.field(default=Schedule.COSINE, converter=Schedule)
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    max_steps: Optional[int] = None

    def __attrs_post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(
                f"epochs and batch_size must be positive, got {self.epochs}, {self.batch_size}"
            )
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be positive, got {self.max_steps}")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        fields = {f.name for f in attrs.fields(cls)}
        unknown = set(data) - fields
        if unknown:
            raise ConfigError(f"Unknown training options: {', '.join(sorted(unknown))}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"Invalid training options {data!r}: {e}") from e


def schedule_multiplier(schedule: Schedule, step: int, total: int) -> float:
    if schedule == Schedule.CONSTANT:
        return 1.0
    return (1 + math.cos(math.pi * step / total)) / 2


def _is_weight(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in ("w0", "w1", "w2", "w_skip", "w_out")


@define
class FCNetwork:
    """A fully connected residual network with mutable parameters."""

    params: Params
    betas: tuple[float, ...]
    skips: tuple[bool, ...]

    @classmethod
    def from_weights(cls, spec: NetworkSpec, weights: NetworkWeights) -> "FCNetwork":
        if spec.spatial is not None or not all(b.fully_connected for b in spec.blocks):
            raise ConfigError("Training supports fully connected networks only")
        params: Params = {"w0": weights.w0.center.copy()}
        for i, w in enumerate(weights.blocks):
            params[f"block{i}.w1"] = w.w1.center.copy()
            params[f"block{i}.b1"] = w.b1.copy()
            params[f"block{i}.w2"] = w.w2.center.copy()
            params[f"block{i}.b2"] = w.b2.copy()
            params[f"block{i}.alpha"] = np.array(w.alpha)
            if w.w_skip is not None:
                params[f"block{i}.w_skip"] = w.w_skip.center.copy()
                assert w.b_skip is not None
                params[f"block{i}.b_skip"] = w.b_skip.copy()
        params["w_out"] = np.array(weights.w_out)
        params["b_out"] = np.array(weights.b_out)
        return cls(
            params=params,
            betas=tuple(w.beta for w in weights.blocks),
            skips=tuple(w.w_skip is not None for w in weights.blocks),
        )

    @property
    def depth(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> tuple[float, ...]:
        return tuple(float(self.params[f"block{i}.alpha"]) for i in range(self.depth))

    def copy(self) -> "FCNetwork":
        return FCNetwork(
            params={k: v.copy() for k, v in self.params.items()},
            betas=self.betas,
            skips=self.skips,
        )

    def _forward(self, x: Array) -> tuple[Array, list[dict[str, Array]]]:
        p = self.params
        z0 = x @ p["w0"].T
        cache = [{"z": z0, "x": x}]
        h = relu(z0)
        for i in range(self.depth):
            a = h @ p[f"block{i}.w1"].T + p[f"block{i}.b1"]
            m = relu(a)
            f = m @ p[f"block{i}.w2"].T + p[f"block{i}.b2"]
            if self.skips[i]:
                s = h @ p[f"block{i}.w_skip"].T + p[f"block{i}.b_skip"]
            else:
                s = h
            z = p[f"block{i}.alpha"] * f + self.betas[i] * s
            cache.append({"x": h, "a": a, "m": m, "f": f, "z": z})
            h = relu(z)
        logits = h @ p["w_out"].T + p["b_out"]
        cache.append({"x": h})
        return logits, cache

    def logits(self, x: npt.ArrayLike) -> Array:
        return self._forward(np.asarray(x, dtype=np.float64))[0]

    def masks(self, x: npt.ArrayLike) -> list[Array]:
        """Every ReLU's on/off pattern on ``x``."""
        _, cache = self._forward(np.asarray(x, dtype=np.float64))
        result = [cache[0]["z"] > 0]
        for entry in cache[1:-1]:
            result.append(entry["a"] > 0)
            result.append(entry["z"] > 0)
        return result

    def loss(self, x: npt.ArrayLike, y: npt.ArrayLike) -> float:
        return cross_entropy(self.logits(x), np.asarray(y))[0]

    def loss_and_grads(self, x: npt.ArrayLike, y: npt.ArrayLike) -> tuple[float, Params]:
        x = np.asarray(x, dtype=np.float64)
        logits, cache = self._forward(x)
        loss, d_logits = cross_entropy(logits, np.asarray(y))
        p = self.params
        grads: Params = {}
        h = cache[-1]["x"]
        grads["w_out"] = d_logits.T @ h
        grads["b_out"] = d_logits.sum(axis=0)
        d_h = d_logits @ p["w_out"]
        for i in reversed(range(self.depth)):
            entry = cache[i + 1]
            alpha = p[f"block{i}.alpha"]
            beta = self.betas[i]
            d_z = d_h * (entry["z"] > 0)
            grads[f"block{i}.alpha"] = np.array(np.sum(d_z * entry["f"]))
            d_f = alpha * d_z
            grads[f"block{i}.w2"] = d_f.T @ entry["m"]
            grads[f"block{i}.b2"] = d_f.sum(axis=0)
            d_a = (d_f @ p[f"block{i}.w2"]) * (entry["a"] > 0)
            grads[f"block{i}.w1"] = d_a.T @ entry["x"]
            grads[f"block{i}.b1"] = d_a.sum(axis=0)
            d_h = d_a @ p[f"block{i}.w1"]
            if self.skips[i]:
                d_s = beta * d_z
                grads[f"block{i}.w_skip"] = d_s.T @ entry["x"]
                grads[f"block{i}.b_skip"] = d_s.sum(axis=0)
                d_h = d_h + d_s @ p[f"block{i}.w_skip"]
            else:
                d_h = d_h + beta * d_z
        d_z0 = d_h * (cache[0]["z"] > 0)
        grads["w0"] = d_z0.T @ x
        return loss, grads

    def accuracy(self, data: Dataset) -> float:
        if not len(data):
            return math.nan
        return float(np.mean(np.argmax(self.logits(data.features), axis=1) == data.labels))


def cross_entropy(logits: Array, labels: npt.NDArray[np.int64]) -> tuple[float, Array]:
    """Mean softmax cross-entropy and its gradient with respect to the
    logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(np.mean(log_probs[np.arange(n), labels]))
    d_logits = np.exp(log_probs)
    d_logits[np.arange(n), labels] -= 1
    return loss, d_logits / n


@define(frozen=True)
class GradientCheck:
    max_relative_error: float
    checked: int
    skipped_kinks: int


def gradient_check(
    net: FCNetwork,
    x: npt.ArrayLike,
    y: npt.ArrayLike,
    rng: RngStream,
    n_params: int = 50,
    step: float = 1e-5,
) -> GradientCheck:
    """Compares analytic gradients with central differences on
    ``n_params`` randomly chosen coordinates.

    A coordinate whose perturbation switches any ReLU is skipped: the loss
    is not differentiable there, which happens at exact zeros (a Type B
    Risotto block at initialization has many).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    _, grads = net.loss_and_grads(x, y)
    names = sorted(net.params)
    sizes = np.array([net.params[name].size for name in names])
    gen = rng.generator()
    picks = gen.choice(int(sizes.sum()), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.cumsum(sizes) - sizes
    base_masks = net.masks(x)

    worst = 0.0
    checked = skipped = 0
    for pick in picks:
        k = int(np.searchsorted(offsets, pick, side="right")) - 1
        name, index = names[k], int(pick - offsets[k])
        values = []
        kink = False
        for sign in (1, -1):
            shifted = net.copy()
            shifted.params[name].reshape(-1)[index] += sign * step
            if any(np.any(a != b) for a, b in zip(base_masks, shifted.masks(x))):
                kink = True
                break
            values.append(shifted.loss(x, y))
        if kink:
            skipped += 1
            continue
        numeric = (values[0] - values[1]) / (2 * step)
        analytic = float(grads[name].reshape(-1)[index])
        error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, error)
        checked += 1
    return GradientCheck(max_relative_error=worst, checked=checked, skipped_kinks=skipped)


@define
class TrainLog:
    losses: list[float] = attrs.Factory(list)
    learning_rates: list[float] = attrs.Factory(list)
    train_accuracy: list[float] = attrs.Factory(list)
    test_accuracy: list[float] = attrs.Factory(list)
    alpha_trajectory: list[tuple[float, ...]] = attrs.Factory(list)
    epoch_seconds: list[float] = attrs.Factory(list)
    diverged: bool = False
    final_loss: float = math.nan

    @property
    def steps(self) -> int:
        return len(self.losses)

    @property
    def final_alphas(self) -> tuple[float, ...]:
        return self.alpha_trajectory[-1] if self.alpha_trajectory else ()

    @property
    def final_accuracy(self) -> float:
        return self.train_accuracy[-1] if self.train_accuracy else math.nan

    def summary(self) -> dict[str, Any]:
        return {
            "steps": self.steps,
            "diverged": self.diverged,
            "final_loss": self.final_loss,
            "final_train_accuracy": self.final_accuracy,
            "final_test_accuracy": self.test_accuracy[-1] if self.test_accuracy else None,
            "final_alphas": list(self.final_alphas),
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "epoch_seconds": self.epoch_seconds,
        }


def sgd_step(
    params: Params,
    grads: Params,
    velocity: Params,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """Updates ``params`` and ``velocity`` in place. Weight decay is an L2
    term added to the gradient of weight matrices before the momentum
    update; alphas and biases are not decayed."""
    for name, value in params.items():
        g = grads[name]
        if weight_decay and _is_weight(name):
            g = g + weight_decay * value
        velocity[name] = momentum * velocity[name] + g
        value -= lr * velocity[name]


def sgd_train(
    spec: NetworkSpec,
    scheme: InitScheme,
    data: Dataset,
    cfg: TrainConfig,
    test: Optional[Dataset] = None,
    rng: Optional[RngStream] = None,
    work: Optional[WorkContext] = None,
) -> TrainLog:
    """Trains a freshly initialized network with mini-batch SGD with
    momentum. Weights are drawn from substream 0 of ``rng`` (which defaults
    to the config's seed) and epoch ``e`` is shuffled with substream
    ``(1, e)``."""
    rng = rng or RngStream(cfg.seed)
    work = work or WorkContext()
    if data.dim != spec.input_dim or data.n_classes > spec.output_dim:
        raise ConfigError(
            f"Network maps {spec.input_dim} features to {spec.output_dim} classes, "
            f"data has {data.dim} features and {data.n_classes} classes"
        )
    net = FCNetwork.from_weights(spec, build_network(spec, scheme, rng.substream(0)))
    batches_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * batches_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    velocity = {name: np.zeros_like(value) for name, value in net.params.items()}
    log = TrainLog()

    step = 0
    for epoch in range(cfg.epochs):
        if step >= total:
            break
        start = time.monotonic()
        order = rng.substream(1).substream(epoch).generator().permutation(len(data))
        for b in range(batches_per_epoch):
            if step >= total:
                break
            batch = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            loss, grads = net.loss_and_grads(data.features[batch], data.labels[batch])
            lr = cfg.learning_rate * schedule_multiplier(cfg.schedule, step, total)
            log.losses.append(loss)
            log.learning_rates.append(lr)
            if not math.isfinite(loss) or loss > DIVERGENCE_LOSS:
                log.diverged = True
                work.warn(f"Training diverged at step {step} with loss {loss}")
                break
            sgd_step(net.params, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
            step += 1
        log.epoch_seconds.append(time.monotonic() - start)
        log.train_accuracy.append(net.accuracy(data))
        if test is not None:
            log.test_accuracy.append(net.accuracy(test))
        log.alpha_trajectory.append(net.alphas)
        work.debug(
            f"Epoch {epoch}: loss {log.losses[-1]:.4g}, train accuracy "
            f"{log.train_accuracy[-1]:.3f}, took "
            f"{precisedelta(log.epoch_seconds[-1])}"
        )
        if log.diverged:
            break
    if not log.diverged:
        log.final_loss = net.loss(data.features, data.labels)
    return log


@define(frozen=True)
class SweepRow:
    alpha: float
    final_loss: float
    final_accuracy: float
    diverged: bool


async def alpha_sweep(
    spec: NetworkSpec,
    scheme: InitScheme,
    alphas: Sequence[float],
    data: Dataset,
    cfg: TrainConfig,
    work: WorkContext,
) -> list[SweepRow]:
    """One training run per initial alpha, all from the same seed."""
    if not scheme.is_risotto:
        raise ConfigError(f"The alpha sweep needs a Risotto scheme, got {scheme.name}")

    def run(alpha: float) -> SweepRow:
        log = sgd_train(spec, attrs.evolve(scheme, alpha=alpha), data, cfg, work=work)
        return SweepRow(alpha, log.final_loss, log.final_accuracy, log.diverged)

    rows = await work.map_threads(list(alphas), run)
    by_alpha = {row.alpha: row for row in rows}
    if 0.0 in by_alpha and 1.0 in by_alpha:
        if by_alpha[1.0].final_loss > by_alpha[0.0].final_loss:
            work.warn(
                f"alpha=1 ended with a higher loss ({by_alpha[1.0].final_loss:.4g}) "
                f"than alpha=0 ({by_alpha[0.0].final_loss:.4g})"
            )
    return rows


@define(frozen=True)
class RunSummary:
    """Mean final accuracy over independent runs with a Student-t 95%
    confidence half-width."""

    accuracies: tuple[float, ...]
    mean: float
    half_width: float
    diverged: int


async def repeat_runs(
    spec: NetworkSpec,
    scheme: InitScheme,
    data: Dataset,
    cfg: TrainConfig,
    runs: int,
    work: WorkContext,
    test: Optional[Dataset] = None,
) -> RunSummary:
    """Trains ``runs`` networks, run ``i`` on substream ``i`` of the
    config's seed, and summarizes their final test (or train) accuracy."""
    if runs < 2:
        raise ConfigError(f"Need at least two runs for a confidence interval, got {runs}")
    root = RngStream(cfg.seed)

    def run(i: int) -> TrainLog:
        return sgd_train(spec, scheme, data, cfg, test=test, rng=root.substream(i), work=work)

    logs = await work.map_threads(range(runs), run)
    accuracies = [
        log.test_accuracy[-1] if test is not None else log.final_accuracy for log in logs
    ]
    mean, stderr = mean_and_stderr(accuracies)
    half_width = float(stats.t.ppf(0.975, runs - 1)) * stderr
    return RunSummary(
        accuracies=tuple(accuracies),
        mean=mean,
        half_width=half_width,
        diverged=sum(log.diverged for log in logs),
    )
