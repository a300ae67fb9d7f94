"""Dense float32 tensor primitives and the seeded random generator.

All activations, weights and gradients are plain numpy arrays in row-major
batch x channels x height x width layout. Training runs in float32; gradient
checking rebuilds the same computations in float64, so every function here
derives its working dtype from its inputs instead of forcing float32.

Reductions accumulate in float64 and cast back, and matrix products go
through a single BLAS call per operation, so repeated runs on the same
machine are bit-identical.
"""

import numpy as np

DTYPE = np.float32

MAX_RANK = 4


def check_shape(shape):
    """Validate a shape tuple: rank 1..4, every extent >= 1."""
    dims = tuple(int(d) for d in shape)
    if not 1 <= len(dims) <= MAX_RANK:
        raise ValueError(f"shape rank must be 1..{MAX_RANK}, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ValueError(f"shape extents must be >= 1, got {dims}")
    n = 1
    for d in dims:
        n *= d
        if n > np.iinfo(np.intp).max:
            raise ValueError(f"element count overflows for shape {dims}")
    return dims


def zeros(shape, dtype=DTYPE):
    return np.zeros(check_shape(shape), dtype=dtype)


def require_finite(arr, name="tensor"):
    """Raise if arr holds NaN/Inf. Used at module boundaries, not per-op."""
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {name}")
    return arr


def _coerce_operand(b, a):
    """Accept a same-shape array, a scalar, or a per-channel vector of
    length N against a 4-D operand laid out batch x N x h x w."""
    if np.isscalar(b):
        return b
    b = np.asarray(b)
    if b.shape == a.shape:
        return b
    if a.ndim == 4 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return b.reshape(1, -1, 1, 1)
    raise ValueError(f"operand shape {b.shape} does not match {a.shape}")


def add(a, b):
    return a + _coerce_operand(b, a)


def sub(a, b):
    return a - _coerce_operand(b, a)


def mul(a, b):
    return a * _coerce_operand(b, a)


def scale(a, c):
    return a * float(c)


def relu(a):
    return np.maximum(a, 0)


def relu_mask(grad, pre_activation):
    """Backward of relu: pass gradient only where the forward input was > 0."""
    return grad * (pre_activation > 0)


def per_channel(v):
    """Reshape a length-N vector so it broadcasts over m x N x h x w."""
    return np.asarray(v).reshape(1, -1, 1, 1)


def matmul(a, b):
    """2-D matrix product. Summation order is the BLAS kernel's fixed
    blocking for the given shapes, identical across runs on one build."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dims disagree: {a.shape} x {b.shape}")
    return a @ b


def conv_out_extent(extent, kernel, stride, pad):
    span = extent + 2 * pad - kernel
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"non-integral conv output extent for size={extent} k={kernel} "
            f"s={stride} p={pad}"
        )
    return span // stride + 1


def im2col(x, kernel, stride, pad):
    """Unfold b x c x h x w into a (c*k*k, b*oh*ow) patch matrix.

    Column j holds the receptive field of output position j, positions
    enumerated in row-major (batch, out_row, out_col) order; zero padding
    contributes zeros. col2im is the exact accumulating inverse.
    """
    b, c, h, w = x.shape
    oh = conv_out_extent(h, kernel, stride, pad)
    ow = conv_out_extent(w, kernel, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (b, c, oh, ow, k, k)
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * kernel * kernel, b * oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols, input_shape, kernel, stride, pad):
    """Accumulate a patch matrix back onto the input grid (adjoint of im2col)."""
    b, c, h, w = input_shape
    oh = conv_out_extent(h, kernel, stride, pad)
    ow = conv_out_extent(w, kernel, stride, pad)
    hp, wp = h + 2 * pad, w + 2 * pad
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    patches = cols.reshape(c, kernel, kernel, b, oh, ow)
    # Overlapping windows must accumulate, not overwrite.
    for ki in range(kernel):
        for kj in range(kernel):
            out[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += \
                patches[:, ki, kj].transpose(1, 0, 2, 3)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def channel_moments(x):
    """Per-channel mean and raw second moment of an m x N x h x w tensor.

    Each channel reduces over all m' = m*h*w positions. Accumulation runs
    in float64; results are cast back to the input dtype.
    """
    if x.ndim != 4:
        raise ValueError(f"channel_moments needs a 4-D input, got {x.ndim}-D")
    mean = np.mean(x, axis=(0, 2, 3), dtype=np.float64)
    second = np.mean(np.square(x, dtype=np.float64), axis=(0, 2, 3), dtype=np.float64)
    return mean.astype(x.dtype), second.astype(x.dtype)


class Rng:
    """Deterministic random source: PCG64 seeded from a (seed, *tags) key.

    The same key yields the same stream on every platform. split() derives
    an independent child stream from a tag, so consumers (init, sampler,
    augmentation, ...) cannot perturb each other's draws.
    """

    def __init__(self, seed, _key=None):
        self.seed = int(seed)
        self._key = _key if _key is not None else (self.seed,)
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._key)))

    def split(self, tag):
        return Rng(self.seed, self._key + (int(tag),))

    def uniform(self, size=None, low=0.0, high=1.0):
        return self.gen.uniform(low, high, size)

    def gaussian(self, size=None):
        return self.gen.standard_normal(size)

    def shuffle(self, seq):
        """In-place Fisher-Yates shuffle."""
        self.gen.shuffle(seq)
        return seq

    def permutation(self, n):
        return self.gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, seq):
        return seq[int(self.gen.integers(len(seq)))]
