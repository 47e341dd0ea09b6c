"""Residual networks built from `BlockSpec` blocks: forward propagation,
the split of a state into its looks-linear halves, and the raw and
effective Jacobians of a block.

A network maps ``x`` to ``x1 = relu(W0 * x)``, pushes it through its
blocks, pools (optionally) and finishes with a dense output layer.
"""

import json
import math
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Optional

import attrs
import numpy as np
import numpy.typing as npt
from attrs import define

from risotto.initializers import (
    BlockKind,
    BlockSpec,
    BlockWeights,
    InitScheme,
    SpecError,
    delta_embed,
    first_layer_looks_linear,
    init_block,
)
from risotto.linalg import (
    Array,
    ConvKernel,
    DimensionError,
    Matrix,
    RngStream,
    conv2d_same,
    conv_matrix,
    frozen_array,
    haar_orthogonal,
    relu,
    svd_values,
)


class NetworkConfigError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


class Pooling(Enum):
    NONE = "none"
    AVERAGE = "average"


def _optional_pair(value: Any) -> Optional[tuple[int, int]]:
    if value is None:
        return None
    if isinstance(value, int):
        return (value, value)
    a, b = value
    return (int(a), int(b))


def _pair(value: Any) -> tuple[int, int]:
    result = _optional_pair(value)
    assert result is not None
    return result


@define(frozen=True)
class NetworkSpec:
    input_dim: int
    first_layer_out: int
    output_dim: int
    blocks: tuple[BlockSpec, ...] = attrs.field(default=(), converter=tuple)
    spatial: Optional[tuple[int, int]] = attrs.field(
        default=None, converter=_optional_pair
    )
    pooling: Pooling = Pooling.NONE
    first_layer_kernel: tuple[int, int] = attrs.field(default=(1, 1), converter=_pair)

    def __attrs_post_init__(self) -> None:
        if min(self.input_dim, self.first_layer_out, self.output_dim) < 1:
            raise NetworkConfigError(
                "input_dim, first_layer_out and output_dim must be positive, got "
                f"{self.input_dim}, {self.first_layer_out}, {self.output_dim}"
            )
        width = self.first_layer_out
        for i, block in enumerate(self.blocks):
            if block.n_in != width:
                raise NetworkConfigError(
                    f"Block {i} expects {block.n_in} input channels but receives {width}"
                )
            width = block.n_out
        if self.spatial is not None and min(self.spatial) < 1:
            raise NetworkConfigError(f"Invalid spatial size {self.spatial}")
        if any(k < 1 or k % 2 == 0 for k in self.first_layer_kernel):
            raise NetworkConfigError(
                f"First layer kernel must have odd dimensions, got {self.first_layer_kernel}"
            )

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def width(self) -> int:
        """Channels of the last state."""
        return self.blocks[-1].n_out if self.blocks else self.first_layer_out

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.spatial is None:
            return (self.input_dim,)
        return (self.input_dim,) + self.spatial

    @property
    def output_fan_in(self) -> int:
        if self.spatial is None or self.pooling == Pooling.AVERAGE:
            return self.width
        return self.width * self.spatial[0] * self.spatial[1]

    @classmethod
    def uniform(
        cls,
        kind: BlockKind,
        depth: int,
        width: int,
        input_dim: int,
        output_dim: int,
        alpha: float = 1.0,
        beta: float = 1.0,
        kernel: int = 1,
        spatial: Optional[tuple[int, int]] = None,
        pooling: Pooling = Pooling.NONE,
    ) -> "NetworkSpec":
        """``depth`` identical ``width``-channel blocks."""
        if depth < 0:
            raise NetworkConfigError(f"Depth must be non-negative, got {depth}")
        try:
            block = BlockSpec(
                kind, width, width, width, k1=kernel, k2=kernel, alpha=alpha, beta=beta
            )
        except SpecError as e:
            raise NetworkConfigError(str(e)) from e
        return cls(
            input_dim=input_dim,
            first_layer_out=width,
            output_dim=output_dim,
            blocks=(block,) * depth,
            spatial=spatial,
            pooling=pooling,
            first_layer_kernel=(kernel, kernel),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_dim": self.input_dim,
            "spatial": None if self.spatial is None else list(self.spatial),
            "first_layer_out": self.first_layer_out,
            "first_layer_kernel": list(self.first_layer_kernel),
            "blocks": [b.to_dict() for b in self.blocks],
            "pooling": self.pooling.value,
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NetworkSpec":
        try:
            pooling = data.get("pooling") or "none"
            return cls(
                input_dim=int(data["input_dim"]),
                first_layer_out=int(data["first_layer_out"]),
                output_dim=int(data["output_dim"]),
                blocks=[BlockSpec.from_dict(b) for b in data.get("blocks", [])],
                spatial=data.get("spatial"),
                pooling=Pooling(str(pooling).lower()),
                first_layer_kernel=data.get("first_layer_kernel", 1),
            )
        except NetworkConfigError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise NetworkConfigError(f"Invalid network description: {e}") from e

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise NetworkConfigError(f"Network description is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise NetworkConfigError("Network description must be a JSON object")
        # Config files may nest the network next to "train" and "dataset".
        return cls.from_dict(data.get("network", data))

    @classmethod
    def load(cls, path: Path | str) -> "NetworkSpec":
        return cls.from_json(Path(path).read_text())


@define(frozen=True)
class NetworkWeights:
    scheme: InitScheme
    w0: ConvKernel
    blocks: tuple[BlockWeights, ...] = attrs.field(converter=tuple)
    w_out: Matrix = attrs.field(converter=frozen_array)
    b_out: Array = attrs.field(converter=frozen_array)
    u0: Optional[Matrix] = attrs.field(
        default=None, converter=attrs.converters.optional(frozen_array)
    )


@define(frozen=True)
class Activations:
    """Everything `forward` computed. ``states[0]`` is the output of the
    first layer and ``states[l]`` the output of block ``l``."""

    preactivations: tuple[Array, ...]
    states: tuple[Array, ...]
    pooled: Array
    output: Array
    effective: tuple[Array, ...]


@define(frozen=True)
class SignalSplit:
    plus: Array
    minus: Array
    u: Array


@define(frozen=True)
class LocalJacobian:
    """A Jacobian together with whether any ReLU sat exactly at its kink,
    where the zero derivative is a convention rather than a fact."""

    matrix: Matrix
    ambiguous: bool


@define(frozen=True)
class JacobianReport:
    raw_singular_values: Array = attrs.field(converter=frozen_array)
    effective_singular_values: Optional[Array] = attrs.field(
        converter=attrs.converters.optional(frozen_array)
    )
    effective_residual: Optional[float]
    analytic_vs_fd_gap: float
    ambiguous: bool


def _bias(b: Array, like: Array) -> Array:
    return b.reshape((-1,) + (1,) * (like.ndim - 1))


def _check_input(spec: BlockSpec, w: BlockWeights, x: Array) -> None:
    if x.ndim not in (1, 3):
        raise DimensionError(f"States are 1-D or (C, H, W), got shape {x.shape}")
    if x.shape[0] != spec.n_in or w.n_in != spec.n_in:
        raise DimensionError(
            f"Block expects {spec.n_in} channels, got input with {x.shape[0]} "
            f"and weights with {w.n_in}"
        )


def _block_preactivations(w: BlockWeights, x: Array) -> tuple[Array, Array]:
    z_mid = conv2d_same(w.w1, x) + _bias(w.b1, x)
    residual = conv2d_same(w.w2, relu(z_mid)) + _bias(w.b2, x)
    if w.w_skip is None:
        skip = x
    else:
        skip = conv2d_same(w.w_skip, x)
        if w.b_skip is not None:
            skip = skip + _bias(w.b_skip, x)
    return z_mid, w.alpha * residual + w.beta * skip


def block_forward(w: BlockWeights, spec: BlockSpec, x: npt.ArrayLike) -> Array:
    x = np.asarray(x, dtype=np.float64)
    _check_input(spec, w, x)
    return relu(_block_preactivations(w, x)[1])


def signal_split(x: npt.ArrayLike) -> SignalSplit:
    """Halves a state along its channel axis into ``x_plus`` and
    ``x_minus`` and returns their difference ``u`` alongside."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] % 2:
        raise DimensionError(f"Signal split needs an even channel count, got {x.shape}")
    half = x.shape[0] // 2
    plus, minus = x[:half], x[half:]
    return SignalSplit(plus=plus, minus=minus, u=plus - minus)


def lift(u: npt.ArrayLike) -> Array:
    """The complementary state ``[relu(u); relu(-u)]`` whose split is ``u``."""
    u = np.asarray(u, dtype=np.float64)
    return np.concatenate([relu(u), relu(-u)], axis=0)


def is_complementary(x: npt.ArrayLike) -> bool:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] % 2 or np.any(x < 0):
        return False
    split = signal_split(x)
    return not np.any(split.plus * split.minus)


def _pool(net: NetworkSpec, x: Array) -> Array:
    if net.pooling == Pooling.AVERAGE and x.ndim == 3:
        return x.mean(axis=(1, 2))
    return x.ravel()


def forward(net: NetworkSpec, weights: NetworkWeights, x: npt.ArrayLike) -> Activations:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != net.input_shape:
        raise DimensionError(f"Network expects input of shape {net.input_shape}, got {x.shape}")
    if len(weights.blocks) != net.depth:
        raise DimensionError(
            f"Network has {net.depth} blocks but weights for {len(weights.blocks)}"
        )
    z = conv2d_same(weights.w0, x)
    preactivations = [z]
    states = [relu(z)]
    for spec, w in zip(net.blocks, weights.blocks):
        _check_input(spec, w, states[-1])
        z = _block_preactivations(w, states[-1])[1]
        preactivations.append(z)
        states.append(relu(z))
    pooled = _pool(net, states[-1])
    output = weights.w_out @ pooled + weights.b_out
    preactivations.append(output)
    effective: tuple[Array, ...] = ()
    if all(s.shape[0] % 2 == 0 for s in states):
        effective = tuple(signal_split(s).u for s in states)
    return Activations(
        preactivations=tuple(preactivations),
        states=tuple(states),
        pooled=pooled,
        output=output,
        effective=effective,
    )


def _dense(kernel: ConvKernel, x: Array) -> Matrix:
    if x.ndim == 1:
        return kernel.center
    return conv_matrix(kernel, x.shape[1], x.shape[2])


def block_jacobian(w: BlockWeights, spec: BlockSpec, x: npt.ArrayLike) -> LocalJacobian:
    """The Jacobian of `block_forward` at ``x`` with respect to the
    flattened (channel-major) state.

    A ReLU whose input is exactly zero is treated as inactive and the
    result is marked ambiguous.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_input(spec, w, x)
    z_mid, z_out = _block_preactivations(w, x)
    d_mid = (z_mid > 0).ravel().astype(np.float64)
    d_out = (z_out > 0).ravel().astype(np.float64)
    if w.w_skip is None:
        skip = np.eye(x.size)
    else:
        skip = _dense(w.w_skip, x)
    branch = _dense(w.w2, relu(z_mid)) @ (d_mid[:, None] * _dense(w.w1, x))
    matrix = d_out[:, None] * (w.alpha * branch + w.beta * skip)
    ambiguous = bool(np.any(z_mid == 0) or np.any(z_out == 0))
    return LocalJacobian(matrix=matrix, ambiguous=ambiguous)


def _lift_derivative(u: Array) -> Matrix:
    flat = u.ravel()
    positive = (flat > 0).astype(np.float64)
    negative = (flat < 0).astype(np.float64)
    return np.vstack([np.diag(positive), -np.diag(negative)])


def effective_jacobian(
    w: BlockWeights, spec: BlockSpec, x: npt.ArrayLike
) -> LocalJacobian:
    """The Jacobian of the output signal ``u_out`` with respect to the
    input signal ``u_in``, at a complementary input ``x``.

    Computed as ``[I, -I] . J(x) . d lift(u) / du``. Entries of ``u`` that
    are exactly zero make the result ambiguous.
    """
    x = np.asarray(x, dtype=np.float64)
    if not is_complementary(x):
        raise PreconditionError(
            "The effective Jacobian needs a complementary input: even width, "
            "non-negative and x_plus * x_minus == 0"
        )
    if spec.n_out % 2:
        raise DimensionError(f"Block output width {spec.n_out} is odd")
    raw = block_jacobian(w, spec, x)
    u = signal_split(x).u
    half = raw.matrix.shape[0] // 2
    difference = raw.matrix[:half] - raw.matrix[half:]
    matrix = difference @ _lift_derivative(u)
    return LocalJacobian(matrix=matrix, ambiguous=raw.ambiguous or bool(np.any(u == 0)))


def finite_difference_jacobian(
    fn: Callable[[Array], Array], x: npt.ArrayLike, step: float = 1e-6
) -> Matrix:
    """Central differences of ``fn`` around ``x``, flattening input and
    output."""
    x = np.asarray(x, dtype=np.float64)
    base = np.asarray(fn(x)).ravel()
    result = np.zeros((base.size, x.size))
    flat = x.ravel()
    for j in range(x.size):
        up = flat.copy()
        down = flat.copy()
        up[j] += step
        down[j] -= step
        result[:, j] = (
            np.asarray(fn(up.reshape(x.shape))).ravel()
            - np.asarray(fn(down.reshape(x.shape))).ravel()
        ) / (2 * step)
    return result


def expected_effective_map(w: BlockWeights, x: npt.ArrayLike) -> Optional[Matrix]:
    """The map a Risotto block applies to the signal: ``M`` for Type C and
    ``alpha * M`` for Type B, expanded over the spatial positions of
    ``x``. None for blocks without a recorded ``M``."""
    if w.record is None:
        return None
    m = w.record.m if w.kind == BlockKind.TYPE_C else w.alpha * w.record.m
    x = np.asarray(x)
    if x.ndim == 3:
        m = np.kron(m, np.eye(x.shape[1] * x.shape[2]))
    return m


def jacobian_report(
    w: BlockWeights, spec: BlockSpec, x: npt.ArrayLike, step: float = 1e-6
) -> JacobianReport:
    """Raw and effective spectra of one block at ``x``.

    The finite-difference gap is measured on the raw map when no ReLU is
    at a kink, and on the effective map (in ``u`` coordinates) otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    raw = block_jacobian(w, spec, x)
    gaps = []
    if not raw.ambiguous:
        fd = finite_difference_jacobian(lambda v: block_forward(w, spec, v), x, step)
        gaps.append(float(np.max(np.abs(fd - raw.matrix))))

    effective_values = None
    residual = None
    ambiguous = raw.ambiguous
    if is_complementary(x) and spec.n_out % 2 == 0:
        effective = effective_jacobian(w, spec, x)
        effective_values = svd_values(effective.matrix)
        ambiguous = ambiguous or effective.ambiguous
        u = signal_split(x).u

        def through_signal(v: Array) -> Array:
            return signal_split(block_forward(w, spec, lift(v))).u

        fd = finite_difference_jacobian(through_signal, u, step)
        gaps.append(float(np.max(np.abs(fd - effective.matrix))))
        expected = expected_effective_map(w, x)
        if expected is not None:
            residual = float(np.max(np.abs(effective.matrix - expected)))

    return JacobianReport(
        raw_singular_values=svd_values(raw.matrix),
        effective_singular_values=effective_values,
        effective_residual=residual,
        analytic_vs_fd_gap=max(gaps) if gaps else math.nan,
        ambiguous=ambiguous,
    )


def network_jacobian_reports(
    net: NetworkSpec, weights: NetworkWeights, x: npt.ArrayLike
) -> list[JacobianReport]:
    """One report per block, probing each block at the complementary lift
    of the signal it receives (which is the state itself for Risotto
    networks)."""
    states = forward(net, weights, x).states
    reports = []
    for spec, w, state in zip(net.blocks, weights.blocks, states):
        point = lift(signal_split(state).u) if state.shape[0] % 2 == 0 else state
        reports.append(jacobian_report(w, spec, point))
    return reports


def build_network(
    spec: NetworkSpec, scheme: InitScheme, rng: RngStream
) -> NetworkWeights:
    """Initializes every layer of ``spec`` under ``scheme``. The first
    layer draws from substream 0, block ``l`` from substream ``l`` and the
    output layer from substream ``L + 1``."""
    k1, k2 = spec.first_layer_kernel
    u0 = None
    if scheme.is_risotto:
        if spec.first_layer_out % 2:
            raise NetworkConfigError(
                f"A looks-linear first layer needs an even width, got {spec.first_layer_out}"
            )
        u0 = haar_orthogonal(spec.first_layer_out // 2, spec.input_dim, rng.substream(0))
        w0 = delta_embed(first_layer_looks_linear(u0), k1, k2)
    else:
        sigma = math.sqrt(2.0 / (spec.first_layer_out * k1 * k2))
        w0 = ConvKernel(
            rng.substream(0)
            .generator()
            .normal(0.0, sigma, size=(spec.first_layer_out, spec.input_dim, k1, k2))
        )
    blocks = tuple(
        init_block(block, scheme, rng.substream(i + 1), total_depth=spec.depth)
        for i, block in enumerate(spec.blocks)
    )
    fan_in = spec.output_fan_in
    w_out = (
        rng.substream(spec.depth + 1)
        .generator()
        .normal(0.0, math.sqrt(2.0 / fan_in), size=(spec.output_dim, fan_in))
    )
    return NetworkWeights(
        scheme=scheme,
        w0=w0,
        blocks=blocks,
        w_out=w_out,
        b_out=np.zeros(spec.output_dim),
        u0=u0,
    )
