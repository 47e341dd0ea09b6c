"""Signal propagation: what theory predicts for the squared norm and the
covariance of signals through random residual networks, and Monte-Carlo
estimators that measure the same quantities over fresh initializations.
"""

import math
import time
from datetime import timedelta
from typing import Optional, Sequence

import attrs
import numpy as np
import numpy.typing as npt
from attrs import define
from humanize import precisedelta
from scipy import integrate
from scipy.stats import norm

from risotto.initializers import (
    BlockKind,
    BlockSpec,
    InitScheme,
    SchemeKind,
    init_block,
)
from risotto.linalg import Array, RngStream, relu
from risotto.network import NetworkSpec, build_network, forward
from risotto.work import WorkContext, mean_and_stderr


class InvalidCovariance(ValueError):
    pass


# Minimum over [-1, 1] of the lemma constant c(rho), attained at rho = 0.
LEMMA_C_MIN = 1.0 / (2.0 * math.pi)

DEFAULT_BOUND_C = 0.24

# Schemes whose weights are independent, symmetric and zero mean, for
# which the expected norm formula is exact.
INDEPENDENT_SCHEMES = (SchemeKind.HE_NORMAL, SchemeKind.HE_UNIFORM, SchemeKind.BALANCED)


@define(frozen=True)
class BlockTheory:
    sigma_1: float
    sigma_2: float
    sigma_skip: float
    alpha: float
    beta: float
    n_mid: int
    n_out: int

    def __attrs_post_init__(self) -> None:
        if min(self.sigma_1, self.sigma_2, self.sigma_skip) < 0:
            raise ValueError(f"Standard deviations must be non-negative: {self}")
        if min(self.n_mid, self.n_out) < 1:
            raise ValueError(f"Widths must be positive: {self}")

    @property
    def factor(self) -> float:
        """Expected growth of the squared norm through this block."""
        residual = self.alpha**2 * self.sigma_2**2 * self.sigma_1**2 * self.n_mid / 2
        return self.n_out / 2 * (residual + self.beta**2 * self.sigma_skip**2)


@define(frozen=True)
class PropTheoryParams:
    n_1: int
    sigma_0: float
    blocks: tuple[BlockTheory, ...] = attrs.field(default=(), converter=tuple)

    def __attrs_post_init__(self) -> None:
        if self.n_1 < 1 or self.sigma_0 < 0:
            raise ValueError(f"Invalid first layer: n_1={self.n_1}, sigma_0={self.sigma_0}")

    @classmethod
    def from_network(
        cls, spec: NetworkSpec, scheme: InitScheme
    ) -> Optional["PropTheoryParams"]:
        """The parameters of ``spec`` under ``scheme``, or None when the
        formula does not describe that network: it needs fully connected
        Type C blocks with independent symmetric weights."""
        if scheme.kind not in INDEPENDENT_SCHEMES or spec.spatial is not None:
            return None
        blocks = []
        for block in spec.blocks:
            if block.kind != BlockKind.TYPE_C or not block.fully_connected:
                return None
            sigmas = scheme.sigmas(block)
            alpha, beta = scheme.branch_weights(block)
            blocks.append(
                BlockTheory(
                    sigma_1=sigmas.sigma_1,
                    sigma_2=sigmas.sigma_2,
                    sigma_skip=sigmas.sigma_skip,
                    alpha=alpha,
                    beta=beta,
                    n_mid=block.n_mid,
                    n_out=block.n_out,
                )
            )
        k1, k2 = spec.first_layer_kernel
        sigma_0 = math.sqrt(2.0 / (spec.first_layer_out * k1 * k2))
        return cls(n_1=spec.first_layer_out, sigma_0=sigma_0, blocks=blocks)


def expected_norm(p: PropTheoryParams, input_sq_norm: float) -> float:
    result = p.n_1 / 2 * p.sigma_0**2 * input_sq_norm
    for block in p.blocks:
        result *= block.factor
    return result


def g_rho(rho: float) -> float:
    if abs(rho) > 1:
        raise InvalidCovariance(f"Correlation must lie in [-1, 1], got {rho}")
    if rho == 1:
        return 0.5
    if rho == -1:
        return 0.0
    slope = rho / math.sqrt(1 - rho**2)
    value, _ = integrate.quad(
        lambda u: norm.cdf(slope * u) * norm.pdf(u), 0.0, 12.0, epsabs=1e-10
    )
    return float(value)


def g_rho_closed_form(rho: float) -> float:
    """``g_rho`` via the arc-sine identity, for cross-checking."""
    if abs(rho) > 1:
        raise InvalidCovariance(f"Correlation must lie in [-1, 1], got {rho}")
    return 0.25 + math.asin(rho) / (2 * math.pi)


def _h(rho: float, g: float) -> float:
    return g * rho + math.sqrt(max(1 - rho**2, 0.0)) / (2 * math.pi)


@define(frozen=True)
class LemmaEval:
    v11: float
    v22: float
    v12: float
    rho: float
    g_of_rho: float
    exact_cov: float
    bound_c: float


def _correlation(v11: float, v22: float, v12: float) -> float:
    if v11 <= 0 or v22 <= 0:
        raise InvalidCovariance(f"Variances must be positive, got {v11} and {v22}")
    scale = math.sqrt(v11 * v22)
    rho = v12 / scale
    if abs(rho) > 1 + 1e-12:
        raise InvalidCovariance(
            f"Covariance matrix [[{v11}, {v12}], [{v12}, {v22}]] is not positive semi-definite"
        )
    return min(max(rho, -1.0), 1.0)


def relu_gauss_cov(v11: float, v22: float, v12: float) -> LemmaEval:
    """``E[relu(z1) relu(z2)]`` for a centered Gaussian pair with the given
    covariance."""
    rho = _correlation(v11, v22, v12)
    g = g_rho(rho)
    h = _h(rho, g)
    scale = math.sqrt(v11 * v22)
    return LemmaEval(
        v11=v11,
        v22=v22,
        v12=v12,
        rho=rho,
        g_of_rho=g,
        exact_cov=scale * h,
        bound_c=h - rho / 4,
    )


def lemma_mc_check(
    v11: float, v22: float, v12: float, n_samples: int, rng: RngStream
) -> tuple[float, float]:
    _correlation(v11, v22, v12)
    gen = rng.generator()
    a = gen.standard_normal(n_samples)
    b = gen.standard_normal(n_samples)
    l11 = math.sqrt(v11)
    l21 = v12 / l11
    l22 = math.sqrt(max(v22 - l21**2, 0.0))
    z1 = l11 * a
    z2 = l21 * a + l22 * b
    return mean_and_stderr(relu(z1) * relu(z2))


@define(frozen=True)
class LemmaRow:
    rho: float
    g: float
    h: float
    c: float
    mc_mean: Optional[float] = None
    mc_stderr: Optional[float] = None


@define(frozen=True)
class LemmaScan:
    rows: tuple[LemmaRow, ...] = attrs.field(converter=tuple)

    @property
    def min_c(self) -> float:
        return min(row.c for row in self.rows)

    @property
    def max_c(self) -> float:
        return max(row.c for row in self.rows)


def _lemma_row(i: int, rho: float, mc_samples: int, rng: RngStream) -> LemmaRow:
    if abs(rho) > 1:
        raise InvalidCovariance(f"Correlation grid must lie in [-1, 1], got {rho}")
    g = g_rho(rho)
    h = _h(rho, g)
    mc_mean = mc_stderr = None
    if mc_samples:
        mc_mean, mc_stderr = lemma_mc_check(1.0, 1.0, rho, mc_samples, rng.substream(i))
    return LemmaRow(rho, g, h, h - rho / 4, mc_mean, mc_stderr)


def lemma_constant_scan(
    rho_grid: Sequence[float],
    mc_samples: int = 0,
    rng: Optional[RngStream] = None,
) -> LemmaScan:
    """Tabulates ``g``, ``h`` and ``c`` over ``rho_grid``. With
    ``mc_samples`` each row also gets a Monte-Carlo estimate of
    ``E[relu(z1) relu(z2)]`` at unit variances, which should equal ``h``.
    Row ``i`` samples from substream ``i`` of ``rng``."""
    if not rho_grid:
        raise ValueError("Empty correlation grid")
    if mc_samples:
        _check_samples(mc_samples)
    rng = rng or RngStream(0)
    return LemmaScan(
        _lemma_row(i, rho, mc_samples, rng) for i, rho in enumerate(rho_grid)
    )


async def lemma_scan_parallel(
    rho_grid: Sequence[float], mc_samples: int, work: WorkContext
) -> LemmaScan:
    """`lemma_constant_scan` with the rows computed on worker threads,
    sampling from ``work.rng``. The result does not depend on the number
    of threads."""
    if not rho_grid:
        raise ValueError("Empty correlation grid")
    if mc_samples:
        _check_samples(mc_samples)
    for rho in rho_grid:
        if abs(rho) > 1:
            raise InvalidCovariance(f"Correlation grid must lie in [-1, 1], got {rho}")
    rows = await work.map_threads(
        list(enumerate(rho_grid)),
        lambda item: _lemma_row(item[0], item[1], mc_samples, work.rng),
    )
    return LemmaScan(rows)


@define(frozen=True)
class CovBoundParams:
    gamma1: float
    gamma2: float
    c: float = DEFAULT_BOUND_C
    depth: int = 0
    cov0: float = 0.0

    @classmethod
    def from_branch_weights(
        cls,
        alpha: float,
        beta: float,
        depth: int,
        cov0: float,
        c: float = DEFAULT_BOUND_C,
    ) -> "CovBoundParams":
        return cls(
            gamma1=(1 + beta**2) / 4,
            gamma2=c * (alpha**2 + 2),
            c=c,
            depth=depth,
            cov0=cov0,
        )


def cov_bound_recursion(p: CovBoundParams) -> list[float]:
    """Lower bounds on the expected inner product of two signals after
    ``l`` blocks, for ``l = 0 .. depth``."""
    if p.gamma1 >= 1:
        raise InvalidCovariance(f"The bound needs gamma1 < 1, got {p.gamma1}")
    if p.depth < 0:
        raise ValueError(f"Depth must be non-negative, got {p.depth}")
    limit = p.gamma2 / (1 - p.gamma1)
    return [
        p.gamma1**layer * p.cov0 + limit * (1 - p.gamma1**layer)
        for layer in range(p.depth + 1)
    ]


@define(frozen=True)
class NormEstimate:
    mean: float
    stderr: float
    n_samples: int
    theory: Optional[float] = None


def _check_samples(n_samples: int) -> None:
    if n_samples < 2:
        raise ValueError(f"Need at least two samples, got {n_samples}")


async def mc_norm_ratio(
    spec: NetworkSpec,
    scheme: InitScheme,
    x: npt.ArrayLike,
    n_samples: int,
    work: WorkContext,
) -> NormEstimate:
    """Mean of ``|x^L|^2 / |x|^2`` over ``n_samples`` initializations, the
    i-th drawn from substream ``i`` of the context's stream."""
    _check_samples(n_samples)
    x = np.asarray(x, dtype=np.float64)
    input_sq_norm = float(np.sum(x * x))
    if input_sq_norm == 0:
        raise ValueError("The input must be nonzero")

    def sample(i: int) -> float:
        weights = build_network(spec, scheme, work.rng.substream(i))
        final = forward(spec, weights, x).states[-1]
        return float(np.sum(final * final)) / input_sq_norm

    start = time.monotonic()
    ratios = await work.map_threads(range(n_samples), sample)
    mean, stderr = mean_and_stderr(ratios)
    work.info(
        f"{n_samples} {scheme.name} networks sampled in "
        f"{precisedelta(timedelta(seconds=time.monotonic() - start))}"
    )
    params = PropTheoryParams.from_network(spec, scheme)
    theory = None if params is None else expected_norm(params, 1.0)
    return NormEstimate(mean=mean, stderr=stderr, n_samples=n_samples, theory=theory)


@define(frozen=True)
class CovLayer:
    layer: int
    mean_cov: float
    stderr: float
    mean_corr: float
    corr_stderr: float
    effective_corr: Optional[float] = None
    bound: Optional[float] = None


@define(frozen=True)
class CovTrace:
    """Per-layer statistics of two signals. ``effective_drift`` is the
    largest change, over samples and layers, of the effective correlation
    relative to the first layer."""

    scheme: str
    n_samples: int
    input_corr: float
    layers: tuple[CovLayer, ...] = attrs.field(converter=tuple)
    effective_drift: Optional[float] = None


def _cosine(a: Array, b: Array) -> float:
    denominator = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denominator == 0:
        return math.nan
    return float(np.sum(a * b)) / denominator


def _unit(x: npt.ArrayLike) -> Array:
    x = np.asarray(x, dtype=np.float64)
    length = float(np.linalg.norm(x))
    if length == 0:
        raise ValueError("Inputs must be nonzero")
    return x / length


async def mc_cov_trace(
    spec: NetworkSpec,
    scheme: InitScheme,
    x: npt.ArrayLike,
    x_tilde: npt.ArrayLike,
    n_samples: int,
    work: WorkContext,
    c: float = DEFAULT_BOUND_C,
) -> CovTrace:
    """Traces ``<x^l, x~^l>`` through the layers of random networks. Both
    inputs are scaled to unit norm first."""
    _check_samples(n_samples)
    x = _unit(x)
    x_tilde = _unit(x_tilde)

    def sample(i: int) -> tuple[list[float], list[float], Optional[list[float]]]:
        weights = build_network(spec, scheme, work.rng.substream(i))
        a = forward(spec, weights, x)
        b = forward(spec, weights, x_tilde)
        covs = [float(np.sum(s * t)) for s, t in zip(a.states, b.states)]
        corrs = [_cosine(s, t) for s, t in zip(a.states, b.states)]
        effective = None
        if a.effective:
            effective = [_cosine(u, v) for u, v in zip(a.effective, b.effective)]
        return covs, corrs, effective

    samples = await work.map_threads(range(n_samples), sample)
    covs = np.array([s[0] for s in samples])
    corrs = np.array([s[1] for s in samples])
    effective = None
    drift = None
    if all(s[2] is not None for s in samples):
        effective = np.array([s[2] for s in samples])
        drift = float(np.max(np.abs(effective - effective[:, :1])))

    bounds: Optional[list[float]] = None
    if spec.blocks:
        alpha, beta = scheme.branch_weights(spec.blocks[0])
        params = CovBoundParams.from_branch_weights(
            alpha, beta, spec.depth, float(np.mean(covs[:, 0])), c
        )
        if params.gamma1 < 1:
            bounds = cov_bound_recursion(params)

    layers = []
    for layer in range(covs.shape[1]):
        mean, stderr = mean_and_stderr(covs[:, layer])
        mean_corr, corr_stderr = mean_and_stderr(corrs[:, layer])
        layers.append(
            CovLayer(
                layer=layer,
                mean_cov=mean,
                stderr=stderr,
                mean_corr=mean_corr,
                corr_stderr=corr_stderr,
                effective_corr=(
                    None if effective is None else float(np.mean(effective[:, layer]))
                ),
                bound=None if bounds is None else bounds[layer],
            )
        )
    if drift is not None and scheme.is_risotto and drift > 1e-9:
        work.warn(f"Effective correlation drifted by {drift:.3g} under {scheme.name}")
    return CovTrace(
        scheme=scheme.name,
        n_samples=n_samples,
        input_corr=_cosine(x, x_tilde),
        layers=layers,
        effective_drift=drift,
    )


@define(frozen=True)
class InequalityCheck:
    """Both sides of the lower bound on the expected inner product after
    one block, estimated from the same weight draws."""

    lhs_mean: float
    lhs_stderr: float
    rhs_mean: float
    rhs_stderr: float
    gap_mean: float
    gap_stderr: float

    @property
    def holds(self) -> bool:
        return self.gap_mean >= -3 * self.gap_stderr


async def covariance_inequality_check(
    spec: BlockSpec,
    scheme: InitScheme,
    x: npt.ArrayLike,
    x_tilde: npt.ArrayLike,
    n_samples: int,
    work: WorkContext,
    c: float = LEMMA_C_MIN,
) -> InequalityCheck:
    """Checks ``E<x', x~'> >= n_out * E_W1[v12 / 4 + c sqrt(v11 v22)]`` for
    one fully connected Type C block with independent weights, where the
    ``v`` are the output covariances conditional on ``W1``."""
    _check_samples(n_samples)
    if spec.kind != BlockKind.TYPE_C or not spec.fully_connected:
        raise ValueError("The spot check needs a fully connected Type C block")
    if scheme.kind not in INDEPENDENT_SCHEMES:
        raise ValueError(f"The spot check needs independent weights, not {scheme.name}")
    x = np.asarray(x, dtype=np.float64)
    x_tilde = np.asarray(x_tilde, dtype=np.float64)
    sigmas = scheme.sigmas(spec)

    def sample(i: int) -> tuple[float, float]:
        w = init_block(spec, scheme, work.rng.substream(i))
        assert w.w_skip is not None
        w1, w2, w_skip = w.w1.center, w.w2.center, w.w_skip.center
        hidden, hidden_tilde = relu(w1 @ x), relu(w1 @ x_tilde)
        out = relu(w.alpha * (w2 @ hidden) + w.beta * (w_skip @ x))
        out_tilde = relu(w.alpha * (w2 @ hidden_tilde) + w.beta * (w_skip @ x_tilde))
        residual = w.alpha**2 * sigmas.sigma_2**2
        skip = w.beta**2 * sigmas.sigma_skip**2
        v11 = residual * float(hidden @ hidden) + skip * float(x @ x)
        v22 = residual * float(hidden_tilde @ hidden_tilde) + skip * float(x_tilde @ x_tilde)
        v12 = residual * float(hidden @ hidden_tilde) + skip * float(x @ x_tilde)
        rhs = spec.n_out * (v12 / 4 + c * math.sqrt(v11 * v22))
        return float(out @ out_tilde), rhs

    samples = np.array(await work.map_threads(range(n_samples), sample))
    lhs_mean, lhs_stderr = mean_and_stderr(samples[:, 0])
    rhs_mean, rhs_stderr = mean_and_stderr(samples[:, 1])
    gap_mean, gap_stderr = mean_and_stderr(samples[:, 0] - samples[:, 1])
    return InequalityCheck(
        lhs_mean=lhs_mean,
        lhs_stderr=lhs_stderr,
        rhs_mean=rhs_mean,
        rhs_stderr=rhs_stderr,
        gap_mean=gap_mean,
        gap_stderr=gap_stderr,
    )
