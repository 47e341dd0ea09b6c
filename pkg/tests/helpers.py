import math
from typing import Callable

import numpy as np
from hypothesis import settings, strategies as st

from risotto.initializers import BlockKind, BlockSpec
from risotto.linalg import Array, RngStream


common_settings = settings(deadline=None, max_examples=25, report_multiple_bugs=False)


def central_difference(fn: Callable[[Array], Array], x: Array, step: float = 1e-6) -> Array:
    x = np.asarray(x, dtype=np.float64)
    columns = []
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = step
        up = np.asarray(fn((x.ravel() + e).reshape(x.shape))).ravel()
        down = np.asarray(fn((x.ravel() - e).reshape(x.shape))).ravel()
        columns.append((up - down) / (2 * step))
    return np.stack(columns, axis=1)


def brute_force_conv(kernel: Array, x: Array) -> Array:
    """Zero padded "same" cross-correlation, one output entry at a time."""
    c_out, c_in, k1, k2 = kernel.shape
    _, height, width = x.shape
    result = np.zeros((c_out, height, width))
    for o in range(c_out):
        for i in range(height):
            for j in range(width):
                total = 0.0
                for c in range(c_in):
                    for a in range(k1):
                        for b in range(k2):
                            r, s = i + a - k1 // 2, j + b - k2 // 2
                            if 0 <= r < height and 0 <= s < width:
                                total += kernel[o, c, a, b] * x[c, r, s]
                result[o, i, j] = total
    return result


def jacobi_singular_values(m: Array, sweeps: int = 100) -> Array:
    """Singular values from cyclic Jacobi rotations of the Gram matrix."""
    m = np.asarray(m, dtype=np.float64)
    a = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    a = a.copy()
    n = a.shape[0]
    for _ in range(sweeps):
        off = math.sqrt(float(np.sum(a**2) - np.sum(np.diag(a) ** 2)))
        if off < 1e-15 * max(1.0, float(np.abs(a).max())):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta**2 + 1))
                c = 1 / math.sqrt(t**2 + 1)
                s = t * c
                rotation = np.eye(n)
                rotation[p, p] = rotation[q, q] = c
                rotation[p, q] = s
                rotation[q, p] = -s
                a = rotation.T @ a @ rotation
    return np.sqrt(np.clip(np.sort(np.diag(a))[::-1], 0, None))


def looks_linear_input(u: Array) -> Array:
    """``[relu(u); relu(-u)]``."""
    return np.concatenate([np.maximum(u, 0), np.maximum(-u, 0)], axis=0)


def random_signal(shape: tuple[int, ...], seed: int) -> Array:
    return RngStream(seed, (99,)).generator().standard_normal(shape)


even_widths = st.integers(2, 32).map(lambda n: 2 * n)
alphas = st.sampled_from([0.25, 0.5, 1.0, 2.0])
seeds = st.integers(0, 2**32)


@st.composite
def risotto_c_specs(draw: st.DrawFn, kernel: int = 1) -> BlockSpec:
    n = draw(even_widths)
    return BlockSpec(
        BlockKind.TYPE_C, n, draw(even_widths), n, k1=kernel, k2=kernel, alpha=draw(alphas)
    )


@st.composite
def risotto_b_specs(draw: st.DrawFn, kernel: int = 1) -> BlockSpec:
    n = draw(even_widths)
    return BlockSpec(BlockKind.TYPE_B, n, n, n, k1=kernel, k2=kernel, alpha=1.0)
