"""Constructors for one residual block's weights under every
initialization scheme we compare: Risotto for Type B and Type C blocks
and the independent-entry baselines (He normal/uniform, balanced normal,
SkipInit, a Fixup-like scheme).

A block computes ``x -> relu(alpha * f(x) + beta * h(x))`` with the
residual branch ``f(x) = W2 * relu(W1 * x + b1) + b2`` and the skip
branch ``h`` either the identity (Type B) or a 1x1 convolution (Type C).
"""

import math
from abc import ABC, abstractmethod
from enum import Enum
from typing import Any, Optional

import attrs
import numpy as np
from attrs import define

from risotto.linalg import (
    Array,
    ConvKernel,
    Matrix,
    RngStream,
    frozen_array,
    haar_orthogonal,
)


class SpecError(ValueError):
    pass


class KindError(SpecError):
    pass


class BlockKind(Enum):
    TYPE_B = "B"
    TYPE_C = "C"


class SchemeKind(Enum):
    HE_NORMAL = "he-normal"
    HE_UNIFORM = "he-uniform"
    BALANCED = "balanced"
    SKIPINIT = "skipinit"
    FIXUP_LIKE = "fixup-like"
    RISOTTO_B = "risotto-b"
    RISOTTO_C = "risotto-c"


SQRT_HALF = math.sqrt(0.5)


def _kernel_dims(value: Any) -> tuple[int, int]:
    if isinstance(value, int):
        return (value, value)
    k1, k2 = value
    return (int(k1), int(k2))


@define(frozen=True)
class BlockSpec:
    kind: BlockKind
    n_in: int
    n_mid: int
    n_out: int
    k1: tuple[int, int] = attrs.field(default=(1, 1), converter=_kernel_dims)
    k2: tuple[int, int] = attrs.field(default=(1, 1), converter=_kernel_dims)
    alpha: float = 1.0
    beta: float = 1.0

    def __attrs_post_init__(self) -> None:
        if min(self.n_in, self.n_mid, self.n_out) < 1:
            raise SpecError(f"Block widths must be positive: {self}")
        if self.kind == BlockKind.TYPE_B and not (
            self.n_in == self.n_mid == self.n_out
        ):
            raise SpecError(
                "Type B blocks need n_in == n_mid == n_out, got "
                f"{self.n_in}, {self.n_mid}, {self.n_out}"
            )
        for k in self.k1 + self.k2:
            if k < 1 or k % 2 == 0:
                raise SpecError(f"Kernel dimensions must be odd: {self.k1}, {self.k2}")

    @property
    def fully_connected(self) -> bool:
        return self.k1 == (1, 1) and self.k2 == (1, 1)

    @property
    def even(self) -> bool:
        return self.n_in % 2 == 0 and self.n_mid % 2 == 0 and self.n_out % 2 == 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "n_in": self.n_in,
            "n_mid": self.n_mid,
            "n_out": self.n_out,
            "k1": list(self.k1),
            "k2": list(self.k2),
            "alpha": self.alpha,
            "beta": self.beta,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "BlockSpec":
        try:
            kind = BlockKind(str(data["kind"]).upper().removeprefix("TYPE").strip("_ "))
            return cls(
                kind=kind,
                n_in=int(data["n_in"]),
                n_mid=int(data.get("n_mid", data["n_in"])),
                n_out=int(data["n_out"]),
                k1=data.get("k1", 1),
                k2=data.get("k2", 1),
                alpha=float(data.get("alpha", 1.0)),
                beta=float(data.get("beta", 1.0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, SpecError):
                raise
            raise SpecError(f"Invalid block description {data!r}: {e}") from e


@define(frozen=True)
class Sigmas:
    sigma_1: float
    sigma_2: float
    sigma_skip: float


def default_sigmas(spec: BlockSpec) -> Sigmas:
    """Standard deviations making every block preserve the expected
    squared signal norm when ``alpha**2 + beta**2 == 1``."""
    return Sigmas(
        sigma_1=math.sqrt(2.0 / (spec.n_mid * spec.k1[0] * spec.k1[1])),
        sigma_2=math.sqrt(2.0 / (spec.n_out * spec.k2[0] * spec.k2[1])),
        sigma_skip=math.sqrt(2.0 / spec.n_out),
    )


@define(frozen=True)
class InitScheme:
    kind: SchemeKind
    alpha: Optional[float] = None
    beta: Optional[float] = None
    total_depth: Optional[int] = None
    sigma_1: Optional[float] = None
    sigma_2: Optional[float] = None
    sigma_skip: Optional[float] = None

    @classmethod
    def parse(cls, name: str, **kwargs: Any) -> "InitScheme":
        try:
            kind = SchemeKind(name)
        except ValueError:
            choices = ", ".join(k.value for k in SchemeKind)
            raise SpecError(
                f"Unknown scheme {name!r}. Choose one of: {choices}"
            ) from None
        return cls(kind=kind, **kwargs)

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def is_risotto(self) -> bool:
        return self.kind in (SchemeKind.RISOTTO_B, SchemeKind.RISOTTO_C)

    @property
    def block_kind(self) -> BlockKind:
        """The block type a uniform network should use for this scheme."""
        if self.kind in (
            SchemeKind.RISOTTO_B,
            SchemeKind.SKIPINIT,
            SchemeKind.FIXUP_LIKE,
        ):
            return BlockKind.TYPE_B
        return BlockKind.TYPE_C

    @property
    def overrides_sigmas(self) -> bool:
        return any(
            s is not None for s in (self.sigma_1, self.sigma_2, self.sigma_skip)
        )

    def sigmas(self, spec: BlockSpec) -> Sigmas:
        defaults = default_sigmas(spec)
        return Sigmas(
            sigma_1=defaults.sigma_1 if self.sigma_1 is None else self.sigma_1,
            sigma_2=defaults.sigma_2 if self.sigma_2 is None else self.sigma_2,
            sigma_skip=(
                defaults.sigma_skip if self.sigma_skip is None else self.sigma_skip
            ),
        )

    def branch_weights(self, spec: BlockSpec) -> tuple[float, float]:
        """The (alpha, beta) pair a block gets under this scheme."""
        match self.kind:
            case SchemeKind.HE_NORMAL | SchemeKind.HE_UNIFORM:
                return SQRT_HALF, SQRT_HALF
            case SchemeKind.SKIPINIT:
                return 0.0, 1.0
            case SchemeKind.FIXUP_LIKE:
                return 1.0, 1.0
            case SchemeKind.RISOTTO_B | SchemeKind.RISOTTO_C:
                return (spec.alpha if self.alpha is None else self.alpha), 1.0
            case SchemeKind.BALANCED:
                return (
                    spec.alpha if self.alpha is None else self.alpha,
                    spec.beta if self.beta is None else self.beta,
                )
        raise AssertionError(self.kind)  # pragma: no cover


@define(frozen=True)
class Submatrices:
    """The matrices a Risotto block was built from. ``u1`` and ``u_skip``
    are absent for Type B blocks."""

    u2: Matrix = attrs.field(converter=frozen_array)
    m: Matrix = attrs.field(converter=frozen_array)
    u1: Optional[Matrix] = attrs.field(
        default=None, converter=attrs.converters.optional(frozen_array)
    )
    u_skip: Optional[Matrix] = attrs.field(
        default=None, converter=attrs.converters.optional(frozen_array)
    )


@define(frozen=True)
class BlockWeights:
    """One initialized block. ``w_skip is None`` marks the identity skip
    of a Type B block."""

    scheme: SchemeKind
    kind: BlockKind
    w1: ConvKernel
    w2: ConvKernel
    w_skip: Optional[ConvKernel]
    b1: Array = attrs.field(converter=frozen_array)
    b2: Array = attrs.field(converter=frozen_array)
    b_skip: Optional[Array] = attrs.field(
        converter=attrs.converters.optional(frozen_array)
    )
    alpha: float
    beta: float
    record: Optional[Submatrices] = None

    @property
    def n_in(self) -> int:
        return self.w1.in_channels

    @property
    def n_out(self) -> int:
        return self.w2.out_channels


def _zero_biases(spec: BlockSpec) -> dict[str, Any]:
    return dict(
        b1=np.zeros(spec.n_mid),
        b2=np.zeros(spec.n_out),
        b_skip=np.zeros(spec.n_out) if spec.kind == BlockKind.TYPE_C else None,
    )


def delta_embed(h: Matrix, k1: int, k2: int) -> ConvKernel:
    """A ``k1 x k2`` kernel whose center tap is ``h`` and every other tap 0."""
    if k1 < 1 or k2 < 1 or k1 % 2 == 0 or k2 % 2 == 0:
        raise SpecError(f"Delta kernels need odd dimensions, got {k1}x{k2}")
    h = np.asarray(h, dtype=np.float64)
    data = np.zeros(h.shape + (k1, k2))
    data[:, :, k1 // 2, k2 // 2] = h
    return ConvKernel(data)


def looks_linear(u: Matrix) -> Matrix:
    """The block matrix ``[[U, -U], [-U, U]]``."""
    u = np.asarray(u, dtype=np.float64)
    return np.block([[u, -u], [-u, u]])


def first_layer_looks_linear(u0: Matrix) -> Matrix:
    """The vertical stack ``[U0; -U0]``."""
    u0 = np.asarray(u0, dtype=np.float64)
    return np.vstack([u0, -u0])


def _require_kind(spec: BlockSpec, kind: BlockKind, scheme: SchemeKind) -> None:
    if spec.kind != kind:
        raise KindError(
            f"{scheme.value} initializes Type {kind.value} blocks, got Type {spec.kind.value}"
        )


def _require_even(spec: BlockSpec) -> None:
    if not spec.even:
        raise SpecError(
            "Looks-linear weights need even widths, got "
            f"n_in={spec.n_in}, n_mid={spec.n_mid}, n_out={spec.n_out}"
        )


def init_risotto_c(
    spec: BlockSpec, rng: RngStream, alpha: Optional[float] = None
) -> BlockWeights:
    _require_kind(spec, BlockKind.TYPE_C, SchemeKind.RISOTTO_C)
    _require_even(spec)
    if alpha is None:
        alpha = spec.alpha
    half_in, half_mid, half_out = spec.n_in // 2, spec.n_mid // 2, spec.n_out // 2
    u1 = haar_orthogonal(half_mid, half_in, rng.substream(0))
    u2 = haar_orthogonal(half_out, half_mid, rng.substream(1))
    m = haar_orthogonal(half_out, half_in, rng.substream(2))
    u_skip = m - alpha * (u2 @ u1)
    return BlockWeights(
        scheme=SchemeKind.RISOTTO_C,
        kind=BlockKind.TYPE_C,
        w1=delta_embed(looks_linear(u1), *spec.k1),
        w2=delta_embed(looks_linear(u2), *spec.k2),
        w_skip=delta_embed(looks_linear(u_skip), 1, 1),
        alpha=alpha,
        beta=1.0,
        record=Submatrices(u1=u1, u2=u2, m=m, u_skip=u_skip),
        **_zero_biases(spec),
    )


def init_risotto_b(
    spec: BlockSpec, rng: RngStream, alpha: Optional[float] = None
) -> BlockWeights:
    _require_kind(spec, BlockKind.TYPE_B, SchemeKind.RISOTTO_B)
    _require_even(spec)
    if alpha is None:
        alpha = spec.alpha
    if alpha == 0:
        raise ZeroDivisionError("Risotto Type B divides by alpha, which must not be 0")
    n = spec.n_in
    m = haar_orthogonal(n // 2, n // 2, rng.substream(2))
    identity = np.eye(n // 2)
    # Diagonal blocks M - I/alpha, off-diagonal blocks -M: the identity
    # skip then cancels exactly against the residual branch.
    w2_center = looks_linear(m) - np.eye(n) / alpha
    return BlockWeights(
        scheme=SchemeKind.RISOTTO_B,
        kind=BlockKind.TYPE_B,
        w1=delta_embed(np.eye(n), *spec.k1),
        w2=delta_embed(w2_center, *spec.k2),
        w_skip=None,
        alpha=alpha,
        beta=1.0,
        record=Submatrices(u2=m - identity / alpha, m=m),
        **_zero_biases(spec),
    )


def reconstruct_skip(record: Submatrices, alpha: float) -> Matrix:
    """``M - alpha * U2 U1``, recomputed from a Type C record."""
    if record.u1 is None:
        raise KindError("Only Type C records carry U1")
    return record.m - alpha * (record.u2 @ record.u1)


def _check_balance(scheme: InitScheme, alpha: float, beta: float) -> None:
    if scheme.overrides_sigmas:
        return
    if not math.isclose(alpha**2 + beta**2, 1.0, rel_tol=0, abs_tol=1e-12):
        raise SpecError(
            f"Balanced initialization needs alpha**2 + beta**2 == 1, got alpha={alpha}, beta={beta}"
        )


class Sampler(ABC):
    @abstractmethod
    def __call__(self, rng: RngStream, shape: tuple[int, ...], sigma: float) -> Array:
        ...


class GaussianSampler(Sampler):
    def __call__(self, rng: RngStream, shape: tuple[int, ...], sigma: float) -> Array:
        return rng.generator().normal(0.0, sigma, size=shape)


class UniformSampler(Sampler):
    """Uniform on ``[-sigma * sqrt(3), sigma * sqrt(3)]``, which has
    variance ``sigma**2``."""

    def __call__(self, rng: RngStream, shape: tuple[int, ...], sigma: float) -> Array:
        bound = sigma * math.sqrt(3.0)
        return rng.generator().uniform(-bound, bound, size=shape)


def _weight_shapes(spec: BlockSpec) -> tuple[tuple[int, ...], ...]:
    return (
        (spec.n_mid, spec.n_in) + spec.k1,
        (spec.n_out, spec.n_mid) + spec.k2,
        (spec.n_out, spec.n_in, 1, 1),
    )


def _independent_block(
    spec: BlockSpec,
    scheme: SchemeKind,
    rng: RngStream,
    draw: Sampler,
    sigmas: Sigmas,
    alpha: float,
    beta: float,
) -> BlockWeights:
    shape_1, shape_2, shape_skip = _weight_shapes(spec)
    w_skip = None
    if spec.kind == BlockKind.TYPE_C:
        w_skip = ConvKernel(draw(rng.substream(2), shape_skip, sigmas.sigma_skip))
    return BlockWeights(
        scheme=scheme,
        kind=spec.kind,
        w1=ConvKernel(draw(rng.substream(0), shape_1, sigmas.sigma_1)),
        w2=ConvKernel(draw(rng.substream(1), shape_2, sigmas.sigma_2)),
        w_skip=w_skip,
        alpha=alpha,
        beta=beta,
        **_zero_biases(spec),
    )


def init_normal(spec: BlockSpec, scheme: InitScheme, rng: RngStream) -> BlockWeights:
    if scheme.kind not in (SchemeKind.HE_NORMAL, SchemeKind.BALANCED):
        raise KindError(f"init_normal does not build {scheme.name} blocks")
    alpha, beta = scheme.branch_weights(spec)
    _check_balance(scheme, alpha, beta)
    return _independent_block(
        spec, scheme.kind, rng, GaussianSampler(), scheme.sigmas(spec), alpha, beta
    )


def init_he_uniform(
    spec: BlockSpec, rng: RngStream, scheme: Optional[InitScheme] = None
) -> BlockWeights:
    scheme = scheme or InitScheme(SchemeKind.HE_UNIFORM)
    alpha, beta = scheme.branch_weights(spec)
    return _independent_block(
        spec,
        SchemeKind.HE_UNIFORM,
        rng,
        UniformSampler(),
        scheme.sigmas(spec),
        alpha,
        beta,
    )


def init_skipinit(spec: BlockSpec, rng: RngStream) -> BlockWeights:
    _require_kind(spec, BlockKind.TYPE_B, SchemeKind.SKIPINIT)
    return _independent_block(
        spec,
        SchemeKind.SKIPINIT,
        rng,
        GaussianSampler(),
        default_sigmas(spec),
        alpha=0.0,
        beta=1.0,
    )


def init_fixup_like(spec: BlockSpec, total_depth: int, rng: RngStream) -> BlockWeights:
    _require_kind(spec, BlockKind.TYPE_B, SchemeKind.FIXUP_LIKE)
    if total_depth < 1:
        raise SpecError(f"Fixup-like scaling needs a positive depth, got {total_depth}")
    shape_1, shape_2, _ = _weight_shapes(spec)
    sigma_1 = default_sigmas(spec).sigma_1
    w1 = GaussianSampler()(rng.substream(0), shape_1, sigma_1) / math.sqrt(total_depth)
    return BlockWeights(
        scheme=SchemeKind.FIXUP_LIKE,
        kind=spec.kind,
        w1=ConvKernel(w1),
        w2=ConvKernel(np.zeros(shape_2)),
        w_skip=None,
        alpha=1.0,
        beta=1.0,
        **_zero_biases(spec),
    )


def init_block(
    spec: BlockSpec, scheme: InitScheme, rng: RngStream, total_depth: int = 1
) -> BlockWeights:
    match scheme.kind:
        case SchemeKind.RISOTTO_C:
            return init_risotto_c(spec, rng, alpha=scheme.alpha)
        case SchemeKind.RISOTTO_B:
            return init_risotto_b(spec, rng, alpha=scheme.alpha)
        case SchemeKind.HE_NORMAL | SchemeKind.BALANCED:
            return init_normal(spec, scheme, rng)
        case SchemeKind.HE_UNIFORM:
            return init_he_uniform(spec, rng, scheme)
        case SchemeKind.SKIPINIT:
            return init_skipinit(spec, rng)
        case SchemeKind.FIXUP_LIKE:
            return init_fixup_like(spec, scheme.total_depth or total_depth, rng)
    raise AssertionError(scheme.kind)  # pragma: no cover


def _nested(value: Optional[Array]) -> Optional[list[Any]]:
    return None if value is None else np.asarray(value).tolist()


def block_weights_to_json(
    weights: BlockWeights, spec: BlockSpec, seed: int
) -> dict[str, Any]:
    """The document written by ``risotto init-dump``."""
    result: dict[str, Any] = {
        "scheme": weights.scheme.value,
        "spec": spec.to_dict(),
        "seed": seed,
        "alpha": weights.alpha,
        "beta": weights.beta,
        "w1_center": _nested(weights.w1.center),
        "w2_center": _nested(weights.w2.center),
        "w_skip_center": (
            None if weights.w_skip is None else _nested(weights.w_skip.center)
        ),
    }
    if weights.record is not None:
        result["submatrices"] = {
            "u1": _nested(weights.record.u1),
            "u2": _nested(weights.record.u2),
            "m": _nested(weights.record.m),
            "u_skip": _nested(weights.record.u_skip),
        }
    return result

