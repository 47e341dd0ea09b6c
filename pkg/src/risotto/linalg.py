"""Dense numeric kernels: matrices, 4-D convolution kernels, Haar
orthogonal sampling, singular values and replayable random streams.

Everything here works on float64 numpy arrays. A ``Matrix`` is just a
2-D array; a state is either a 1-D vector (fully connected layers) or a
``(channels, height, width)`` feature map.
"""

from typing import Any

import attrs
import numpy as np
import numpy.typing as npt
from attrs import define


Matrix = npt.NDArray[np.float64]
Array = npt.NDArray[np.float64]

SEED_MASK = (1 << 64) - 1


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def frozen_array(value: Any) -> Array:
    """Copies ``value`` into a read-only float64 array."""
    result = np.array(value, dtype=np.float64)
    result.flags.writeable = False
    return result


def check_finite(value: Array, what: str = "array") -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"{what} contains NaN or Inf entries")


@define(frozen=True)
class RngStream:
    """A replayable random stream.

    The sequence produced by `generator` is a pure function of
    ``(master_seed, path, counter)``. Streams that differ in any element of
    ``path`` are statistically independent, because they are derived with
    numpy's ``SeedSequence`` spawn keys and fed to a counter-based
    ``Philox`` bit generator.
    """

    master_seed: int = attrs.field(converter=lambda s: int(s) & SEED_MASK)
    path: tuple[int, ...] = attrs.field(default=(), converter=tuple)
    counter: int = 0

    @property
    def stream_id(self) -> int:
        return self.path[-1] if self.path else 0

    def substream(self, stream_id: int) -> "RngStream":
        return RngStream(self.master_seed, self.path + (int(stream_id),))

    def advanced(self, steps: int) -> "RngStream":
        return attrs.evolve(self, counter=self.counter + steps)

    def generator(self) -> np.random.Generator:
        bits = np.random.Philox(
            np.random.SeedSequence(self.master_seed, spawn_key=self.path)
        )
        if self.counter:
            bits = bits.advance(self.counter)
        return np.random.Generator(bits)


def haar_orthogonal(n_rows: int, n_cols: int, rng: RngStream) -> Matrix:
    """Samples a Haar distributed matrix with orthonormal rows (if wide)
    or orthonormal columns (if tall or square).

    QR of a Gaussian matrix is only Haar distributed after flipping each
    column of Q by the sign of the matching diagonal entry of R.
    """
    if n_rows < 1 or n_cols < 1:
        raise DimensionError(
            f"Cannot sample an orthogonal matrix of shape {n_rows}x{n_cols}"
        )
    tall, short = max(n_rows, n_cols), min(n_rows, n_cols)
    gaussian = rng.generator().standard_normal((tall, short))
    q, r = np.linalg.qr(gaussian)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    if n_rows < n_cols:
        q = q.T
    return frozen_array(q)


def svd_values(m: Matrix) -> Array:
    """Singular values of ``m`` in descending order."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"Expected a matrix, got an array of shape {m.shape}")
    check_finite(m, "matrix")
    if m.size == 0:
        return np.zeros(0)
    return np.linalg.svd(m, compute_uv=False)


def relu(x: npt.ArrayLike) -> Array:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def _check_odd(k1: int, k2: int) -> None:
    if k1 < 1 or k2 < 1 or k1 % 2 == 0 or k2 % 2 == 0:
        raise DimensionError(f"Kernel dimensions must be odd, got {k1}x{k2}")


@define(frozen=True)
class ConvKernel:
    """A ``(out_channels, in_channels, k1, k2)`` convolution kernel."""

    data: Array = attrs.field(converter=frozen_array)

    def __attrs_post_init__(self) -> None:
        if self.data.ndim != 4:
            raise DimensionError(
                f"A convolution kernel needs four axes, got shape {self.data.shape}"
            )
        _check_odd(self.k1, self.k2)
        check_finite(self.data, "kernel")

    @classmethod
    def zeros(cls, out_channels: int, in_channels: int, k1: int, k2: int) -> "ConvKernel":
        return cls(np.zeros((out_channels, in_channels, k1, k2)))

    @property
    def out_channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def in_channels(self) -> int:
        return int(self.data.shape[1])

    @property
    def k1(self) -> int:
        return int(self.data.shape[2])

    @property
    def k2(self) -> int:
        return int(self.data.shape[3])

    @property
    def center(self) -> Matrix:
        return self.data[:, :, self.k1 // 2, self.k2 // 2]

    def is_delta(self) -> bool:
        """True if every off-center tap is exactly zero."""
        off_center = np.ones((self.k1, self.k2), dtype=bool)
        off_center[self.k1 // 2, self.k2 // 2] = False
        return not np.any(self.data[:, :, off_center])


def conv2d_same(kernel: ConvKernel, x: npt.ArrayLike) -> Array:
    """Cross-correlation of a ``(C_in, H, W)`` map with zero "same" padding.

    A 1-D input is treated as a 1x1 feature map, for which only the
    center tap of the kernel contributes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != kernel.in_channels:
            raise DimensionError(
                f"Kernel expects {kernel.in_channels} channels, input has {x.shape[0]}"
            )
        return kernel.center @ x
    if x.ndim != 3 or x.shape[0] != kernel.in_channels:
        raise DimensionError(
            f"Kernel expects {kernel.in_channels} input channels, got input of shape {x.shape}"
        )
    _, height, width = x.shape
    p1, p2 = kernel.k1 // 2, kernel.k2 // 2
    padded = np.pad(x, ((0, 0), (p1, p1), (p2, p2)))
    out = np.zeros((kernel.out_channels, height, width))
    for a in range(kernel.k1):
        for b in range(kernel.k2):
            tap = kernel.data[:, :, a, b]
            if not tap.any():
                continue
            out += np.einsum(
                "oi,ihw->ohw", tap, padded[:, a : a + height, b : b + width]
            )
    return out


def conv_matrix(kernel: ConvKernel, height: int, width: int) -> Matrix:
    """The dense matrix of `conv2d_same` on ``height x width`` maps, acting
    on channel-major flattened states."""
    n_in = kernel.in_channels * height * width
    result = np.zeros((kernel.out_channels * height * width, n_in))
    basis = np.zeros(n_in)
    for j in range(n_in):
        basis[j] = 1.0
        result[:, j] = conv2d_same(
            kernel, basis.reshape(kernel.in_channels, height, width)
        ).ravel()
        basis[j] = 0.0
    return result


def gram_residual(m: Matrix) -> float:
    """Largest deviation of ``m``'s Gram matrix from the identity, taken
    along whichever side is orthonormal for its shape."""
    m = np.asarray(m, dtype=np.float64)
    gram = m @ m.T if m.shape[0] <= m.shape[1] else m.T @ m
    return float(np.max(np.abs(gram - np.eye(gram.shape[0]))))
