import math

import numpy as np
import pytest
from hypothesis import given

from risotto.initializers import (
    SQRT_HALF,
    BlockKind,
    BlockSpec,
    InitScheme,
    KindError,
    SchemeKind,
    SpecError,
    block_weights_to_json,
    default_sigmas,
    delta_embed,
    first_layer_looks_linear,
    init_block,
    init_fixup_like,
    init_he_uniform,
    init_normal,
    init_risotto_b,
    init_risotto_c,
    init_skipinit,
    looks_linear,
    reconstruct_skip,
)
from risotto.linalg import RngStream, gram_residual

from tests.helpers import common_settings, risotto_c_specs, seeds


def type_b(n: int = 8, **kwargs: object) -> BlockSpec:
    return BlockSpec(BlockKind.TYPE_B, n, n, n, **kwargs)  # type: ignore[arg-type]


def type_c(n_in: int = 8, n_mid: int = 8, n_out: int = 8, **kwargs: object) -> BlockSpec:
    return BlockSpec(BlockKind.TYPE_C, n_in, n_mid, n_out, **kwargs)  # type: ignore[arg-type]


def test_type_b_needs_equal_widths() -> None:
    with pytest.raises(SpecError):
        BlockSpec(BlockKind.TYPE_B, 4, 6, 4)


@pytest.mark.parametrize("k", [0, 2, 4])
def test_kernels_must_be_odd(k: int) -> None:
    with pytest.raises(SpecError):
        type_c(k1=k)


@pytest.mark.parametrize("kind", ["C", "c", "TypeC", "type_c", "Type C"])
def test_block_spec_parses_kind_names(kind: str) -> None:
    spec = BlockSpec.from_dict({"kind": kind, "n_in": 4, "n_out": 4})
    assert spec.kind == BlockKind.TYPE_C
    assert spec.n_mid == 4
    assert BlockSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize(
    "data", [{"kind": "D", "n_in": 4, "n_out": 4}, {"kind": "C", "n_in": 4}, {"n_in": 2}]
)
def test_block_spec_rejects_bad_descriptions(data: dict[str, object]) -> None:
    with pytest.raises(SpecError):
        BlockSpec.from_dict(data)


def test_unknown_scheme_names_are_rejected() -> None:
    with pytest.raises(SpecError):
        InitScheme.parse("orthogonal")


def test_default_sigmas_use_fan_out() -> None:
    sigmas = default_sigmas(type_c(4, 6, 8, k1=3, k2=5))
    assert sigmas.sigma_1 == pytest.approx(math.sqrt(2 / (6 * 9)))
    assert sigmas.sigma_2 == pytest.approx(math.sqrt(2 / (8 * 25)))
    assert sigmas.sigma_skip == pytest.approx(math.sqrt(2 / 8))


def test_looks_linear_structure() -> None:
    u = np.arange(6.0).reshape(2, 3)
    ll = looks_linear(u)
    assert ll.shape == (4, 6)
    assert np.array_equal(ll[:2, :3], u)
    assert np.array_equal(ll[2:, :3], -u)
    assert np.array_equal(ll[:2, 3:], -u)
    assert np.array_equal(ll[2:, 3:], u)
    assert np.array_equal(first_layer_looks_linear(u), np.vstack([u, -u]))


def test_delta_embed_places_center_tap() -> None:
    kernel = delta_embed(np.ones((2, 3)), 3, 5)
    assert kernel.data.shape == (2, 3, 3, 5)
    assert kernel.is_delta()
    assert np.array_equal(kernel.center, np.ones((2, 3)))
    with pytest.raises(SpecError):
        delta_embed(np.ones((2, 2)), 2, 3)


@common_settings
@given(risotto_c_specs(kernel=3), seeds)
def test_risotto_c_records_its_construction(spec: BlockSpec, seed: int) -> None:
    w = init_risotto_c(spec, RngStream(seed))
    record = w.record
    assert record is not None and record.u1 is not None and record.u_skip is not None
    assert record.u1.shape == (spec.n_mid // 2, spec.n_in // 2)
    assert record.u2.shape == (spec.n_out // 2, spec.n_mid // 2)
    assert gram_residual(record.u1) < 1e-10
    assert gram_residual(record.m) < 1e-10
    assert np.array_equal(record.u_skip, reconstruct_skip(record, spec.alpha))
    assert w.w1.is_delta() and w.w2.is_delta()
    assert np.array_equal(w.w1.center, looks_linear(record.u1))
    assert w.w_skip is not None
    assert np.array_equal(w.w_skip.center, looks_linear(record.u_skip))
    assert w.alpha == spec.alpha
    assert w.beta == 1.0
    assert not np.any(w.b1) and not np.any(w.b2)


def test_risotto_c_alpha_argument_overrides_spec() -> None:
    w = init_risotto_c(type_c(alpha=2.0), RngStream(0), alpha=0.5)
    assert w.alpha == 0.5
    assert w.record is not None
    assert np.allclose(w.record.u_skip, reconstruct_skip(w.record, 0.5))


def test_risotto_c_needs_even_widths() -> None:
    with pytest.raises(SpecError):
        init_risotto_c(type_c(4, 5, 4), RngStream(0))


def test_risotto_c_needs_type_c() -> None:
    with pytest.raises(KindError):
        init_risotto_c(type_b(), RngStream(0))


@pytest.mark.parametrize("alpha", [1.0, 0.5, 2.0])
def test_risotto_b_weights(alpha: float) -> None:
    w = init_risotto_b(type_b(8, k1=3, k2=3), RngStream(4), alpha=alpha)
    assert w.record is not None
    m = w.record.m
    assert np.array_equal(w.w1.center, np.eye(8))
    assert np.allclose(w.w2.center[:4, :4], m - np.eye(4) / alpha, atol=1e-15)
    assert np.allclose(w.w2.center[:4, 4:], -m, atol=1e-15)
    assert np.allclose(w.record.u2, m - np.eye(4) / alpha)
    assert w.w_skip is None
    with pytest.raises(KindError):
        reconstruct_skip(w.record, alpha)


def test_risotto_b_rejects_zero_alpha() -> None:
    with pytest.raises(ZeroDivisionError):
        init_risotto_b(type_b(), RngStream(0), alpha=0.0)


def test_risotto_b_needs_type_b() -> None:
    with pytest.raises(KindError):
        init_risotto_b(type_c(), RngStream(0))


def test_he_normal_variances() -> None:
    spec = type_c(1024, 1024, 1024)
    w = init_normal(spec, InitScheme(SchemeKind.HE_NORMAL), RngStream(8))
    sigmas = default_sigmas(spec)
    assert w.alpha == w.beta == SQRT_HALF
    assert w.w_skip is not None
    for kernel, sigma in [
        (w.w1, sigmas.sigma_1),
        (w.w2, sigmas.sigma_2),
        (w.w_skip, sigmas.sigma_skip),
    ]:
        assert kernel.data.size >= 10**6
        assert abs(np.mean(kernel.data)) <= 4 * sigma / math.sqrt(kernel.data.size)
        assert np.var(kernel.data) == pytest.approx(sigma**2, rel=0.02)


def test_he_uniform_is_bounded_with_matching_moments() -> None:
    spec = type_c(1024, 1024, 1024)
    w = init_he_uniform(spec, RngStream(8))
    sigma = default_sigmas(spec).sigma_1
    data = w.w1.data
    assert data.size >= 10**6
    assert np.max(np.abs(data)) <= sigma * math.sqrt(3)
    assert abs(np.mean(data)) <= 4 * sigma / math.sqrt(data.size)
    assert np.var(data) == pytest.approx(sigma**2, rel=0.02)
    assert w.scheme == SchemeKind.HE_UNIFORM


def test_balanced_needs_unit_branch_weights() -> None:
    with pytest.raises(SpecError):
        init_normal(type_c(), InitScheme(SchemeKind.BALANCED, alpha=1.0, beta=1.0), RngStream(0))
    w = init_normal(type_c(), InitScheme(SchemeKind.BALANCED, alpha=0.6, beta=0.8), RngStream(0))
    assert (w.alpha, w.beta) == (0.6, 0.8)


def test_balanced_with_explicit_sigmas_skips_balance_check() -> None:
    scheme = InitScheme(
        SchemeKind.BALANCED, alpha=1.0, beta=0.0, sigma_1=0.0, sigma_2=0.0, sigma_skip=0.0
    )
    w = init_normal(type_c(), scheme, RngStream(0))
    assert not np.any(w.w1.data)


def test_init_normal_rejects_other_schemes() -> None:
    with pytest.raises(KindError):
        init_normal(type_c(), InitScheme(SchemeKind.RISOTTO_C), RngStream(0))


def test_skipinit_disables_residual_branch() -> None:
    w = init_skipinit(type_b(), RngStream(0))
    assert (w.alpha, w.beta) == (0.0, 1.0)
    assert w.w_skip is None


@pytest.mark.parametrize("depth", [4, 16, 64])
def test_fixup_like_scaling(depth: int) -> None:
    spec = type_b(512)
    w = init_fixup_like(spec, depth, RngStream(depth))
    assert not np.any(w.w2.data)
    sigma = default_sigmas(spec).sigma_1
    assert np.std(w.w1.data) * math.sqrt(depth) == pytest.approx(sigma, rel=0.02)


def test_fixup_like_needs_a_depth() -> None:
    with pytest.raises(SpecError):
        init_fixup_like(type_b(), 0, RngStream(0))


@pytest.mark.parametrize("kind", list(SchemeKind))
def test_init_block_dispatches_every_scheme(kind: SchemeKind) -> None:
    scheme = InitScheme(kind)
    if scheme.block_kind == BlockKind.TYPE_C:
        spec = type_c(alpha=SQRT_HALF, beta=SQRT_HALF)
    else:
        spec = type_b()
    w = init_block(spec, scheme, RngStream(1), total_depth=4)
    assert w.scheme == kind
    assert w.kind == spec.kind
    again = init_block(spec, scheme, RngStream(1), total_depth=4)
    assert np.array_equal(w.w1.data, again.w1.data)
    assert np.array_equal(w.w2.data, again.w2.data)


def test_weights_are_read_only() -> None:
    w = init_block(type_c(), InitScheme(SchemeKind.HE_NORMAL), RngStream(1))
    with pytest.raises(ValueError):
        w.w1.data[0, 0, 0, 0] = 1.0


def test_json_dump_of_risotto_b() -> None:
    spec = type_b(4)
    w = init_risotto_b(spec, RngStream(2))
    document = block_weights_to_json(w, spec, seed=2)
    assert document["scheme"] == "risotto-b"
    assert document["w_skip_center"] is None
    m = np.array(document["submatrices"]["m"])
    assert np.allclose(np.array(document["submatrices"]["u2"]), m - np.eye(2))
    assert document["submatrices"]["u1"] is None
    assert np.allclose(np.array(document["w2_center"])[:2, :2], m - np.eye(2))


def test_json_dump_of_independent_block_has_no_submatrices() -> None:
    spec = type_c()
    w = init_block(spec, InitScheme(SchemeKind.HE_NORMAL), RngStream(2))
    document = block_weights_to_json(w, spec, seed=2)
    assert "submatrices" not in document
    assert document["spec"] == spec.to_dict()
