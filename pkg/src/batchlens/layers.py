"""Forward/backward passes for the non-BN layers and the residual block.

Every layer follows one protocol: forward(x, mode) -> (y, cache) and
backward(cache, grad_out) -> (grad_in, grads) where grads maps local
parameter names to gradient arrays. The cache holds whatever the exact
backward pass needs; forward is never recomputed. mode is only meaningful
for layers containing batch normalization, the rest ignore it.

Convolutions are bias-free (the following BN's shift subsumes a bias) and
realized as im2col + matmul. Max pooling windows that overrun the input are
padded with -inf so the 3x3/stride-2 rule halves odd extents (e.g. 36 -> 18).
"""

import numpy as np

from .tensor import col2im, conv_out_extent, im2col, matmul, relu, relu_mask


class Conv:
    """Cross-correlation with zero padding, no bias. weight: out x in x k x k."""

    def __init__(self, weight, stride=1, pad=0):
        if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
            raise ValueError(f"conv weight must be out x in x k x k, got {weight.shape}")
        if weight.shape[2] not in (1, 3, 5):
            raise ValueError(f"unsupported kernel size {weight.shape[2]}")
        self.w = weight
        self.stride = stride
        self.pad = pad

    def params(self):
        return {"w": self.w}

    def buffers(self):
        return {}

    def forward(self, x, mode=None):
        out_c, in_c, k, _ = self.w.shape
        if x.shape[1] != in_c:
            raise ValueError(f"conv expects {in_c} input channels, got {x.shape[1]}")
        b = x.shape[0]
        cols = im2col(x, k, self.stride, self.pad)
        out2 = matmul(self.w.reshape(out_c, -1), cols)  # (out_c, b*oh*ow)
        oh = conv_out_extent(x.shape[2], k, self.stride, self.pad)
        ow = conv_out_extent(x.shape[3], k, self.stride, self.pad)
        y = np.ascontiguousarray(out2.reshape(out_c, b, oh, ow).transpose(1, 0, 2, 3))
        return y, (x.shape, cols)

    def backward(self, cache, grad_out):
        x_shape, cols = cache
        out_c, in_c, k, _ = self.w.shape
        g2 = grad_out.transpose(1, 0, 2, 3).reshape(out_c, -1)
        grad_w = matmul(g2, cols.T).reshape(self.w.shape)
        grad_cols = matmul(self.w.reshape(out_c, -1).T, g2)
        grad_in = col2im(grad_cols, x_shape, k, self.stride, self.pad)
        return grad_in, {"w": grad_w}


class Relu:
    def params(self):
        return {}

    def buffers(self):
        return {}

    def forward(self, x, mode=None):
        return relu(x), x

    def backward(self, cache, grad_out):
        return relu_mask(grad_out, cache), {}


def _pool_extent(extent, kernel, stride):
    # ceil division so overrunning windows are allowed (-inf padded)
    return max(1, -(-(extent - kernel) // stride) + 1)


class MaxPool:
    """kernel x kernel max pooling; ties go to the first window position in
    row-major scan; gradient routes to the recorded argmax."""

    def __init__(self, kernel=3, stride=2):
        self.kernel = kernel
        self.stride = stride

    def params(self):
        return {}

    def buffers(self):
        return {}

    def forward(self, x, mode=None):
        b, c, h, w = x.shape
        k, s = self.kernel, self.stride
        oh, ow = _pool_extent(h, k, s), _pool_extent(w, k, s)
        hp, wp = (oh - 1) * s + k, (ow - 1) * s + k
        padded = np.full((b, c, hp, wp), -np.inf, dtype=x.dtype)
        padded[:, :, :h, :w] = x
        win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(2, 3))
        win = win[:, :, ::s, ::s].reshape(b, c, oh, ow, k * k)
        arg = win.argmax(axis=-1)
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return np.ascontiguousarray(y), (x.shape, arg)

    def backward(self, cache, grad_out):
        x_shape, arg = cache
        b, c, h, w = x_shape
        k, s = self.kernel, self.stride
        oh, ow = arg.shape[2], arg.shape[3]
        hp, wp = (oh - 1) * s + k, (ow - 1) * s + k
        grad_pad = np.zeros((b, c, hp, wp), dtype=grad_out.dtype)
        bi, ci, oi, oj = np.indices(arg.shape, sparse=False)
        rows = oi * s + arg // k
        cols = oj * s + arg % k
        np.add.at(grad_pad, (bi, ci, rows, cols), grad_out)
        return np.ascontiguousarray(grad_pad[:, :, :h, :w]), {}


class GlobalAvgPool:
    """Spatial mean per channel: m x c x h x w -> m x c."""

    def params(self):
        return {}

    def buffers(self):
        return {}

    def forward(self, x, mode=None):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, cache, grad_out):
        b, c, h, w = cache
        grad_in = np.empty(cache, dtype=grad_out.dtype)
        grad_in[:] = grad_out[:, :, None, None] / (h * w)
        return grad_in, {}


class Fc:
    """Affine map x @ W.T + b. weight: out x in, bias: out."""

    def __init__(self, weight, bias):
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ValueError(f"inconsistent fc shapes {weight.shape} / {bias.shape}")
        self.w = weight
        self.b = bias

    def params(self):
        return {"w": self.w, "b": self.b}

    def buffers(self):
        return {}

    def forward(self, x, mode=None):
        if x.shape[1] != self.w.shape[1]:
            raise ValueError(f"fc expects {self.w.shape[1]} features, got {x.shape[1]}")
        return matmul(x, self.w.T) + self.b, x

    def backward(self, cache, grad_out):
        x = cache
        grad_in = matmul(grad_out, self.w)
        grad_w = matmul(grad_out.T, x)
        grad_b = grad_out.sum(axis=0)
        return grad_in, {"w": grad_w, "b": grad_b}


def softmax_xent(logits, labels):
    """Stabilized softmax cross-entropy, mean over the batch.

    Returns (loss, grad_logits, probabilities); grad = (p - onehot)/m.
    """
    m, c = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    probs = exp / total
    log_likelihood = shifted[np.arange(m), labels] - np.log(total[:, 0])
    loss = float(-log_likelihood.mean())
    grad = probs.copy()
    grad[np.arange(m), labels] -= 1
    grad /= m
    return loss, grad.astype(logits.dtype), probs


class ResidualBlock:
    """conv-BN-relu-conv-BN stack added to an identity skip, then relu.

    Spatial shape is preserved (stride-1, k//2-padded convs). When the block
    widens the channel count, the skip is the input zero-padded with extra
    channels, so the shortcut stays parameter-free.
    """

    def __init__(self, conv1, bn1, conv2, bn2):
        self.conv1 = conv1
        self.bn1 = bn1
        self.conv2 = conv2
        self.bn2 = bn2
        self.in_channels = conv1.w.shape[1]
        self.out_channels = conv2.w.shape[0]
        if self.out_channels < self.in_channels:
            raise ValueError("residual block cannot shrink channels")

    def params(self):
        out = {}
        for name, sub in self._stages():
            for key, val in sub.params().items():
                out[f"{name}.{key}"] = val
        return out

    def buffers(self):
        out = {}
        for name, sub in self._stages():
            for key, val in sub.buffers().items():
                out[f"{name}.{key}"] = val
        return out

    def _stages(self):
        return (("conv1", self.conv1), ("bn1", self.bn1),
                ("conv2", self.conv2), ("bn2", self.bn2))

    def forward(self, x, mode):
        a1, c_conv1 = self.conv1.forward(x)
        n1, c_bn1 = self.bn1.forward(a1, mode)
        r1 = relu(n1)
        a2, c_conv2 = self.conv2.forward(r1)
        n2, c_bn2 = self.bn2.forward(a2, mode)
        if n2.shape[2:] != x.shape[2:] or n2.shape[0] != x.shape[0]:
            raise ValueError(f"inner stack changed shape: {x.shape} -> {n2.shape}")
        if self.out_channels > self.in_channels:
            skip = np.zeros(n2.shape, dtype=x.dtype)
            skip[:, :self.in_channels] = x
        else:
            skip = x
        pre = skip + n2
        y = relu(pre)
        cache = (c_conv1, c_bn1, n1, c_conv2, c_bn2, pre)
        return y, cache

    def backward(self, cache, grad_out):
        c_conv1, c_bn1, n1, c_conv2, c_bn2, pre = cache
        grad_pre = relu_mask(grad_out, pre)
        grad_n2, g_bn2 = self.bn2.backward(c_bn2, grad_pre)
        grad_r1, g_conv2 = self.conv2.backward(c_conv2, grad_n2)
        grad_n1 = relu_mask(grad_r1, n1)
        grad_a1, g_bn1 = self.bn1.backward(c_bn1, grad_n1)
        grad_stack, g_conv1 = self.conv1.backward(c_conv1, grad_a1)
        grad_in = grad_pre[:, :self.in_channels] + grad_stack
        grads = {}
        for name, sub in (("conv1", g_conv1), ("bn1", g_bn1),
                          ("conv2", g_conv2), ("bn2", g_bn2)):
            for key, val in sub.items():
                grads[f"{name}.{key}"] = val
        return grad_in, grads
