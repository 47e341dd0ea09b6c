import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from risotto.initializers import (
    SQRT_HALF,
    BlockKind,
    BlockSpec,
    BlockWeights,
    InitScheme,
    SchemeKind,
    init_block,
    init_risotto_b,
    init_risotto_c,
    init_skipinit,
)
from risotto.linalg import DimensionError, RngStream, gram_residual
from risotto.network import (
    NetworkConfigError,
    NetworkSpec,
    Pooling,
    PreconditionError,
    block_forward,
    block_jacobian,
    build_network,
    effective_jacobian,
    finite_difference_jacobian,
    forward,
    is_complementary,
    jacobian_report,
    lift,
    network_jacobian_reports,
    signal_split,
)

from tests.helpers import (
    alphas,
    central_difference,
    common_settings,
    looks_linear_input,
    random_signal,
    risotto_b_specs,
    risotto_c_specs,
    seeds,
)


def test_signal_split_of_a_vector() -> None:
    split = signal_split([3.0, 0.0, 0.0, 2.0])
    assert list(split.plus) == [3.0, 0.0]
    assert list(split.minus) == [0.0, 2.0]
    assert list(split.u) == [3.0, -2.0]


def test_signal_split_of_zero() -> None:
    assert list(signal_split(np.zeros(4)).u) == [0.0, 0.0]


def test_signal_split_needs_even_width() -> None:
    with pytest.raises(DimensionError):
        signal_split([1.0, 2.0, 3.0])


def test_lift_inverts_the_split() -> None:
    u = np.array([1.5, -2.0, 0.0])
    x = lift(u)
    assert list(x) == [1.5, 0.0, 0.0, 0.0, 2.0, 0.0]
    assert is_complementary(x)
    assert np.array_equal(signal_split(x).u, u)
    assert not is_complementary(np.ones(4))
    assert not is_complementary(np.array([-1.0, 0.0]))


def test_skipinit_is_the_identity_at_initialization() -> None:
    spec = BlockSpec(BlockKind.TYPE_B, 6, 6, 6)
    w = init_skipinit(spec, RngStream(0))
    x = np.abs(random_signal((6,), 1))
    assert np.array_equal(block_forward(w, spec, x), x)
    jacobian = block_jacobian(w, spec, x)
    assert np.array_equal(jacobian.matrix, np.eye(6))
    assert not jacobian.ambiguous


@pytest.mark.parametrize("alpha", [0.25, 0.5, 1.0, 2.0])
@pytest.mark.parametrize("kernel", [1, 3])
def test_risotto_c_maps_signal_through_m(alpha: float, kernel: int) -> None:
    spec = BlockSpec(BlockKind.TYPE_C, 8, 12, 8, k1=kernel, k2=kernel, alpha=alpha)
    w = init_risotto_c(spec, RngStream(5))
    assert w.record is not None
    if kernel == 1:
        u = random_signal((4,), 2)
        expected = w.record.m @ u
    else:
        u = random_signal((4, 5, 5), 2)
        expected = np.einsum("oc,chw->ohw", w.record.m, u)
    out = block_forward(w, spec, lift(u))
    assert np.allclose(signal_split(out).u, expected, atol=1e-12)
    assert is_complementary(out)


def test_risotto_b_is_exact_at_unit_alpha() -> None:
    spec = BlockSpec(BlockKind.TYPE_B, 8, 8, 8)
    w = init_risotto_b(spec, RngStream(5))
    assert w.record is not None
    u = random_signal((4,), 3)
    out = block_forward(w, spec, lift(u))
    assert np.allclose(signal_split(out).u, w.record.m @ u, atol=1e-12)


def assert_isometric(w: BlockWeights, spec: BlockSpec, input_seed: int) -> None:
    shape: tuple[int, ...] = (spec.n_in // 2,)
    if not spec.fully_connected:
        shape += (3, 3)
    report = jacobian_report(w, spec, lift(random_signal(shape, input_seed)))
    assert report.effective_singular_values is not None
    assert np.all(np.abs(report.effective_singular_values - 1) <= 1e-9)
    assert report.effective_residual is not None
    assert report.effective_residual < 1e-10


@settings(common_settings, max_examples=200)
@given(st.sampled_from([1, 3]).flatmap(risotto_c_specs), seeds, seeds)
def test_every_risotto_c_block_is_an_effective_isometry(
    spec: BlockSpec, seed: int, input_seed: int
) -> None:
    assert_isometric(init_risotto_c(spec, RngStream(seed)), spec, input_seed)


@settings(common_settings, max_examples=50)
@given(st.sampled_from([1, 3]).flatmap(risotto_b_specs), seeds, seeds)
def test_every_risotto_b_block_at_unit_alpha_is_an_effective_isometry(
    spec: BlockSpec, seed: int, input_seed: int
) -> None:
    assert_isometric(init_risotto_b(spec, RngStream(seed)), spec, input_seed)


@common_settings
@given(risotto_c_specs(), seeds, seeds)
def test_risotto_c_preserves_norms_and_similarity(
    spec: BlockSpec, seed: int, input_seed: int
) -> None:
    w = init_risotto_c(spec, RngStream(seed))
    u = random_signal((spec.n_in // 2,), input_seed)
    v = random_signal((spec.n_in // 2,), input_seed + 1)
    out_u = signal_split(block_forward(w, spec, lift(u))).u
    out_v = signal_split(block_forward(w, spec, lift(v))).u
    assert np.linalg.norm(out_u) == pytest.approx(np.linalg.norm(u), rel=1e-10)
    assert out_u @ out_v == pytest.approx(u @ v, rel=1e-9, abs=1e-9)


@common_settings
@given(st.integers(1, 6), alphas, seeds)
def test_risotto_c_network_composes_block_maps(depth: int, alpha: float, seed: int) -> None:
    net = NetworkSpec.uniform(BlockKind.TYPE_C, depth, 8, 3, 2, alpha=alpha)
    weights = build_network(net, InitScheme(SchemeKind.RISOTTO_C), RngStream(seed))
    x = random_signal((3,), seed)
    activations = forward(net, weights, x)
    assert weights.u0 is not None
    product = np.eye(4)
    for w in weights.blocks:
        assert w.record is not None
        product = w.record.m @ product
    expected = product @ weights.u0 @ x
    assert np.allclose(activations.effective[-1], expected, atol=1e-10)
    assert np.linalg.norm(activations.states[-1]) == pytest.approx(np.linalg.norm(x))


def test_risotto_c_is_positively_homogeneous() -> None:
    spec = BlockSpec(BlockKind.TYPE_C, 6, 6, 6, alpha=0.5)
    w = init_risotto_c(spec, RngStream(2))
    x = looks_linear_input(random_signal((3,), 8))
    assert np.allclose(block_forward(w, spec, 3.5 * x), 3.5 * block_forward(w, spec, x))


def test_risotto_c_raw_spectrum_is_half_sqrt2_half_zero() -> None:
    spec = BlockSpec(BlockKind.TYPE_C, 16, 16, 16, alpha=0.5)
    w = init_risotto_c(spec, RngStream(9))
    report = jacobian_report(w, spec, lift(random_signal((8,), 4)))
    assert not report.ambiguous
    values = report.raw_singular_values
    assert np.allclose(values[:8], math.sqrt(2), atol=1e-10)
    assert np.allclose(values[8:], 0, atol=1e-10)
    assert report.effective_singular_values is not None
    assert np.allclose(report.effective_singular_values, 1, atol=1e-10)
    assert report.effective_residual is not None
    assert report.effective_residual < 1e-10
    assert report.analytic_vs_fd_gap < 1e-6


def test_effective_jacobian_is_m() -> None:
    spec = BlockSpec(BlockKind.TYPE_C, 8, 8, 8, alpha=2.0)
    w = init_risotto_c(spec, RngStream(1))
    assert w.record is not None
    jacobian = effective_jacobian(w, spec, lift(random_signal((4,), 0)))
    assert np.allclose(jacobian.matrix, w.record.m, atol=1e-12)
    assert gram_residual(jacobian.matrix) < 1e-10


def test_risotto_b_report_uses_signal_space() -> None:
    spec = BlockSpec(BlockKind.TYPE_B, 8, 8, 8, alpha=0.5)
    w = init_risotto_b(spec, RngStream(1))
    assert w.record is not None
    report = jacobian_report(w, spec, lift(random_signal((4,), 0)))
    # The hidden layer is the identity, so half its ReLUs sit at zero.
    assert report.ambiguous
    assert report.effective_residual is not None
    assert report.effective_residual < 1e-10
    assert report.effective_singular_values is not None
    assert np.allclose(report.effective_singular_values, 0.5, atol=1e-10)
    assert report.analytic_vs_fd_gap < 1e-6


def test_he_normal_spectrum_is_spread_out() -> None:
    spec = BlockSpec(BlockKind.TYPE_C, 32, 32, 32, alpha=SQRT_HALF, beta=SQRT_HALF)
    w = init_block(spec, InitScheme(SchemeKind.HE_NORMAL), RngStream(2))
    report = jacobian_report(w, spec, lift(random_signal((16,), 6)))
    assert report.effective_singular_values is not None
    values = report.effective_singular_values
    assert values[0] - values[-1] > 0.1
    assert report.effective_residual is None


def test_block_jacobian_matches_central_differences() -> None:
    spec = BlockSpec(BlockKind.TYPE_C, 6, 10, 4, alpha=SQRT_HALF, beta=SQRT_HALF)
    w = init_block(spec, InitScheme(SchemeKind.HE_NORMAL), RngStream(7))
    x = random_signal((6,), 7)
    jacobian = block_jacobian(w, spec, x)
    assert not jacobian.ambiguous
    fd = central_difference(lambda v: block_forward(w, spec, v), x)
    assert np.allclose(jacobian.matrix, fd, atol=1e-6)
    assert np.allclose(
        finite_difference_jacobian(lambda v: block_forward(w, spec, v), x), fd, atol=1e-9
    )


def test_conv_block_jacobian_matches_central_differences() -> None:
    spec = BlockSpec(BlockKind.TYPE_C, 2, 3, 2, k1=3, k2=3, alpha=SQRT_HALF, beta=SQRT_HALF)
    w = init_block(spec, InitScheme(SchemeKind.HE_UNIFORM), RngStream(7))
    x = random_signal((2, 3, 4), 7)
    jacobian = block_jacobian(w, spec, x)
    assert jacobian.matrix.shape == (24, 24)
    fd = central_difference(lambda v: block_forward(w, spec, v), x)
    assert np.allclose(jacobian.matrix, fd, atol=1e-6)


def test_conv_effective_jacobian_is_m_at_every_position() -> None:
    spec = BlockSpec(BlockKind.TYPE_C, 4, 4, 4, k1=3, k2=3, alpha=0.5)
    w = init_risotto_c(spec, RngStream(3))
    assert w.record is not None
    report = jacobian_report(w, spec, lift(random_signal((2, 3, 3), 1)))
    assert report.effective_residual is not None
    assert report.effective_residual < 1e-10


def test_effective_jacobian_needs_a_complementary_input() -> None:
    spec = BlockSpec(BlockKind.TYPE_C, 4, 4, 4)
    w = init_risotto_c(spec, RngStream(0))
    with pytest.raises(PreconditionError):
        effective_jacobian(w, spec, np.ones(4))


def test_block_forward_checks_width() -> None:
    spec = BlockSpec(BlockKind.TYPE_C, 4, 4, 4)
    w = init_risotto_c(spec, RngStream(0))
    with pytest.raises(DimensionError):
        block_forward(w, spec, np.ones(6))


def test_network_reports_cover_every_block() -> None:
    net = NetworkSpec.uniform(BlockKind.TYPE_C, 3, 8, 4, 2, alpha=0.5)
    weights = build_network(net, InitScheme(SchemeKind.RISOTTO_C), RngStream(1))
    reports = network_jacobian_reports(net, weights, random_signal((4,), 2))
    assert len(reports) == 3
    for report in reports:
        assert report.effective_residual is not None
        assert report.effective_residual < 1e-10


def test_build_network_is_deterministic() -> None:
    net = NetworkSpec.uniform(BlockKind.TYPE_C, 2, 6, 3, 2)
    scheme = InitScheme(SchemeKind.HE_NORMAL)
    a = build_network(net, scheme, RngStream(4))
    b = build_network(net, scheme, RngStream(4))
    c = build_network(net, scheme, RngStream(5))
    assert np.array_equal(a.w0.data, b.w0.data)
    assert np.array_equal(a.w_out, b.w_out)
    assert all(np.array_equal(x.w1.data, y.w1.data) for x, y in zip(a.blocks, b.blocks))
    assert not np.array_equal(a.w0.data, c.w0.data)
    assert a.u0 is None


def test_risotto_first_layer_is_looks_linear() -> None:
    net = NetworkSpec.uniform(BlockKind.TYPE_C, 1, 8, 3, 2)
    weights = build_network(net, InitScheme(SchemeKind.RISOTTO_C), RngStream(4))
    assert weights.u0 is not None
    assert weights.u0.shape == (4, 3)
    assert gram_residual(weights.u0) < 1e-12
    assert np.array_equal(weights.w0.center, np.vstack([weights.u0, -weights.u0]))


def test_risotto_first_layer_needs_even_width() -> None:
    net = NetworkSpec(input_dim=3, first_layer_out=5, output_dim=2)
    with pytest.raises(NetworkConfigError):
        build_network(net, InitScheme(SchemeKind.RISOTTO_C), RngStream(0))


def test_forward_with_average_pooling() -> None:
    net = NetworkSpec.uniform(
        BlockKind.TYPE_C, 2, 4, 3, 5, kernel=3, spatial=(4, 4), pooling=Pooling.AVERAGE
    )
    weights = build_network(net, InitScheme(SchemeKind.RISOTTO_C), RngStream(0))
    activations = forward(net, weights, random_signal((3, 4, 4), 0))
    assert activations.states[-1].shape == (4, 4, 4)
    assert activations.pooled.shape == (4,)
    assert activations.output.shape == (5,)
    assert len(activations.preactivations) == 4


def test_forward_checks_input_shape() -> None:
    net = NetworkSpec.uniform(BlockKind.TYPE_C, 1, 4, 3, 2)
    weights = build_network(net, InitScheme(SchemeKind.RISOTTO_C), RngStream(0))
    with pytest.raises(DimensionError):
        forward(net, weights, np.ones(4))


def test_network_spec_json_round_trip(tmp_path: Path) -> None:
    net = NetworkSpec.uniform(BlockKind.TYPE_B, 2, 6, 3, 2, kernel=3, spatial=(5, 5))
    path = tmp_path / "net.json"
    path.write_text(json.dumps({"network": net.to_dict(), "train": {}}))
    assert NetworkSpec.load(path) == net


def test_network_spec_rejects_mismatched_blocks() -> None:
    with pytest.raises(NetworkConfigError):
        NetworkSpec(
            input_dim=3,
            first_layer_out=4,
            output_dim=2,
            blocks=(BlockSpec(BlockKind.TYPE_C, 6, 6, 6),),
        )


BAD_NETWORKS = [
    "not json",
    "[1, 2]",
    '{"input_dim": 3}',
    '{"input_dim": 3, "first_layer_out": 4, "output_dim": 2, "pooling": "max"}',
]


@pytest.mark.parametrize("text", BAD_NETWORKS)
def test_network_spec_rejects_bad_json(text: str) -> None:
    with pytest.raises(NetworkConfigError):
        NetworkSpec.from_json(text)


def test_uniform_rejects_even_kernels() -> None:
    with pytest.raises(NetworkConfigError):
        NetworkSpec.uniform(BlockKind.TYPE_C, 2, 4, 3, 2, kernel=2)
