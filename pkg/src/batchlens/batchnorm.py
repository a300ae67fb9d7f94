"""Per-channel batch normalization with three inference modes.

A convolution output channel of spatial size h x w over a batch of m images
is normalized over all m' = m*h*w positions: subtract the channel mean,
divide by sqrt(variance + eps), then apply the trainable affine y = g*xhat + b.

The mode decides which statistics normalize the batch:

* TRAIN            -- current batch statistics; running averages updated.
* EVAL_POPULATION  -- frozen running statistics; each image's output is
                      independent of the rest of the batch.
* EVAL_BATCH_STATS -- current batch statistics, nothing updated; outputs
                      are coupled across the batch through the shared
                      mean/variance.

Variance is computed two-pass (mean of squared deviations) for robustness
against cancellation; the one-pass raw-second-moment form is equivalent on
well-scaled data and kept as a test oracle. Running variance stores the
biased (population) estimate, no m'/(m'-1) correction.
"""

from enum import Enum

import numpy as np

from .tensor import DTYPE, channel_moments, per_channel


class BnMode(Enum):
    TRAIN = "train"
    EVAL_POPULATION = "population"
    EVAL_BATCH_STATS = "batch"


def batch_stats(x):
    """Two-pass per-channel mean and variance over all m*h*w positions."""
    mean, _ = channel_moments(x)
    centered = x - per_channel(mean)
    var = np.mean(np.square(centered, dtype=np.float64), axis=(0, 2, 3),
                  dtype=np.float64).astype(x.dtype)
    np.maximum(var, 0, out=var)
    return mean, var


class BatchNorm:
    """Batch normalization over channels with running population statistics."""

    def __init__(self, channels, eps=1e-5, momentum=0.99, dtype=DTYPE):
        self.channels = channels
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.num_batches_tracked = 0

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, mode):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(
                f"expected m x {self.channels} x h x w input, got {x.shape}")
        if mode is BnMode.EVAL_POPULATION:
            mean, var = self.running_mean, self.running_var
        else:
            m, _, h, w = x.shape
            if m * h * w < 2:
                raise ValueError("batch statistics need m*h*w >= 2 positions")
            mean, var = batch_stats(x)
            if mode is BnMode.TRAIN:
                k = self.momentum
                self.running_mean[:] = k * self.running_mean + (1 - k) * mean
                self.running_var[:] = k * self.running_var + (1 - k) * var
                self.num_batches_tracked += 1
        inv_std = 1.0 / np.sqrt(var + np.asarray(self.eps, dtype=x.dtype))
        xhat = (x - per_channel(mean)) * per_channel(inv_std)
        y = xhat * per_channel(self.gamma) + per_channel(self.beta)
        cache = (xhat, inv_std, mode, (mean, var))
        return y, cache

    def backward(self, cache, grad_out):
        """Exact gradient of forward, jointly over all batch positions.

        The grad_input terms include the dependence of the batch mean and
        variance on every x_i, so perturbing one input moves the gradient
        of every other position in the same channel.
        """
        xhat, inv_std, mode, _ = cache
        if mode is BnMode.EVAL_POPULATION:
            raise ValueError("backward needs a batch-statistics cache, "
                             "not an EVAL_POPULATION one")
        m, _, h, w = xhat.shape
        mprime = m * h * w
        grad_beta = grad_out.sum(axis=(0, 2, 3))
        grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
        gxhat = grad_out * per_channel(self.gamma)
        # Batch-coupled form: dx = inv_std/m' * (m'*gxhat - sum(gxhat)
        #                                        - xhat * sum(gxhat*xhat))
        sum_g = gxhat.sum(axis=(0, 2, 3))
        sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3))
        grad_in = (per_channel(inv_std) / mprime) * (
            mprime * gxhat - per_channel(sum_g) - xhat * per_channel(sum_gx))
        return grad_in, {"gamma": grad_gamma.astype(self.gamma.dtype),
                         "beta": grad_beta.astype(self.beta.dtype)}

    def set_population(self, mean, var):
        self.running_mean[:] = mean
        self.running_var[:] = var
