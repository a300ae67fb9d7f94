"""Central finite-difference verification of every backward pass.

Each check rebuilds a small layer instance in float64, computes analytic
gradients, then probes every input/parameter position with a central
difference of step 1e-3 and compares. A check passes when the worst
relative error over all instances stays under its tolerance (1e-4 for
single layers, 1e-3 for the end-to-end micro network).

ReLU kinks and pooling ties make finite differences lie, so instance
generators redraw until every pre-activation sits a safe margin away from
zero and every pooling window has a clear winner. The redraw loop is
deterministic under the seed.
"""

from dataclasses import dataclass

import numpy as np

from .batchnorm import BatchNorm, BnMode
from .layers import Conv, Fc, GlobalAvgPool, MaxPool, ResidualBlock, softmax_xent
from .tensor import Rng, relu

FD_STEP = 1e-3
LAYER_TOL = 1e-4
NETWORK_TOL = 1e-3
_KINK_MARGIN = 4e-3  # pre-activations must clear zero by this much


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def central_diff(objective, arr, h=FD_STEP):
    """Numeric d objective / d arr, probing every position of arr in place."""
    num = np.zeros_like(arr)
    flat = arr.reshape(-1)
    out = num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = objective()
        flat[i] = orig - h
        down = objective()
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return num


def rel_err(analytic, numeric):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _compare(pairs, corrupt=False):
    worst = 0.0
    for analytic, numeric in pairs:
        if corrupt:
            analytic = analytic * 1.02
        worst = max(worst, rel_err(analytic, numeric))
    return worst


def _safe_gauss(rng, shape, margin=_KINK_MARGIN):
    """Gaussian draw pushed away from zero so relu masks cannot flip."""
    x = rng.gaussian(shape)
    tiny = np.abs(x) < margin
    x[tiny] = np.sign(x[tiny] + 1e-12) * margin
    return x


def check_conv(rng, corrupt=False):
    x = rng.gaussian((2, 3, 4, 4))
    layer = Conv(rng.gaussian((4, 3, 3, 3)) * 0.5, stride=1, pad=1)
    weight = rng.gaussian((2, 4, 4, 4))
    y, cache = layer.forward(x)
    grad_in, grads = layer.backward(cache, weight)

    def objective():
        return float((layer.forward(x)[0] * weight).sum())

    return _compare([(grad_in, central_diff(objective, x)),
                     (grads["w"], central_diff(objective, layer.w))], corrupt)


def check_maxpool(rng, corrupt=False):
    # permuted spaced values: every window has a unique winner with a gap
    # far larger than the probe step
    shape = (2, 2, 5, 5)
    vals = rng.permutation(int(np.prod(shape))).astype(np.float64)
    x = (vals * 0.1).reshape(shape)
    layer = MaxPool(3, 2)
    weight = rng.gaussian(layer.forward(x)[0].shape)
    y, cache = layer.forward(x)
    grad_in, _ = layer.backward(cache, weight)

    def objective():
        return float((layer.forward(x)[0] * weight).sum())

    return _compare([(grad_in, central_diff(objective, x))], corrupt)


def check_gap(rng, corrupt=False):
    x = rng.gaussian((3, 4, 3, 3))
    layer = GlobalAvgPool()
    weight = rng.gaussian((3, 4))
    y, cache = layer.forward(x)
    grad_in, _ = layer.backward(cache, weight)

    def objective():
        return float((layer.forward(x)[0] * weight).sum())

    return _compare([(grad_in, central_diff(objective, x))], corrupt)


def check_fc(rng, corrupt=False):
    x = rng.gaussian((3, 5))
    layer = Fc(rng.gaussian((4, 5)), rng.gaussian(4))
    weight = rng.gaussian((3, 4))
    y, cache = layer.forward(x)
    grad_in, grads = layer.backward(cache, weight)

    def objective():
        return float((layer.forward(x)[0] * weight).sum())

    return _compare([(grad_in, central_diff(objective, x)),
                     (grads["w"], central_diff(objective, layer.w)),
                     (grads["b"], central_diff(objective, layer.b))], corrupt)


def check_softmax(rng, corrupt=False):
    logits = rng.gaussian((3, 4))
    labels = np.array([0, 2, 3])
    _, grad, _ = softmax_xent(logits, labels)

    def objective():
        return softmax_xent(logits, labels)[0]

    return _compare([(grad, central_diff(objective, logits))], corrupt)


def check_batchnorm(rng, corrupt=False):
    """All-position probe: the numeric gradient sees the full coupling of
    every output to every input through the shared batch statistics."""
    layer = BatchNorm(2, dtype=np.float64)
    layer.gamma[:] = rng.gaussian(2) * 0.5 + 1.0
    layer.beta[:] = rng.gaussian(2) * 0.2
    x = rng.gaussian((2, 2, 2, 2)) * 1.5 + rng.gaussian((1, 2, 1, 1))
    weight = rng.gaussian(x.shape)
    y, cache = layer.forward(x, BnMode.TRAIN)
    grad_in, grads = layer.backward(cache, weight)

    def objective():
        out, _ = layer.forward(x, BnMode.EVAL_BATCH_STATS)
        return float((out * weight).sum())

    return _compare([(grad_in, central_diff(objective, x)),
                     (grads["gamma"], central_diff(objective, layer.gamma)),
                     (grads["beta"], central_diff(objective, layer.beta))], corrupt)


def _draw_residual(rng):
    block = ResidualBlock(Conv(rng.gaussian((4, 3, 3, 3)) * 0.4, pad=1),
                          BatchNorm(4, dtype=np.float64),
                          Conv(rng.gaussian((4, 4, 3, 3)) * 0.4, pad=1),
                          BatchNorm(4, dtype=np.float64))
    x = rng.gaussian((2, 3, 3, 3))
    _, cache = block.forward(x, BnMode.EVAL_BATCH_STATS)
    n1, pre = cache[2], cache[5]
    safe = min(np.min(np.abs(n1)), np.min(np.abs(pre)))
    return block, x, safe


def check_residual(rng, corrupt=False):
    for _ in range(80):
        block, x, safe = _draw_residual(rng)
        if safe > _KINK_MARGIN:
            break
    weight = rng.gaussian((2, 4, 3, 3))
    y, cache = block.forward(x, BnMode.TRAIN)
    grad_in, grads = block.backward(cache, weight)

    def objective():
        out, _ = block.forward(x, BnMode.EVAL_BATCH_STATS)
        return float((out * weight).sum())

    pairs = [(grad_in, central_diff(objective, x))]
    params = block.params()
    for name in sorted(params):
        pairs.append((grads[name], central_diff(objective, params[name])))
    return _compare(pairs, corrupt)


def _draw_micro_net(rng):
    conv = Conv(rng.gaussian((4, 3, 3, 3)) * 0.5, pad=1)
    bn = BatchNorm(4, dtype=np.float64)
    bn.gamma[:] = rng.gaussian(4) * 0.3 + 1.0
    bn.beta[:] = rng.gaussian(4) * 0.2
    fc = Fc(rng.gaussian((3, 4)), rng.gaussian(3))
    x = rng.gaussian((3, 3, 4, 4))
    labels = np.array([0, 1, 2])
    return conv, bn, fc, x, labels


def check_network(rng, corrupt=False):
    """End-to-end conv-BN-relu-gap-fc-softmax gradient, all parameters and
    every input position."""
    gap = GlobalAvgPool()
    for _ in range(80):
        conv, bn, fc, x, labels = _draw_micro_net(rng)
        a, _ = conv.forward(x)
        n, _ = bn.forward(a, BnMode.EVAL_BATCH_STATS)
        if np.min(np.abs(n)) > _KINK_MARGIN:
            break

    def run(mode):
        a, c1 = conv.forward(x)
        n, c2 = bn.forward(a, mode)
        r = relu(n)
        p, c3 = gap.forward(r)
        logits, c4 = fc.forward(p)
        loss, grad_logits, _ = softmax_xent(logits, labels)
        return loss, (c1, c2, n, c3, c4), grad_logits

    loss, caches, grad_logits = run(BnMode.TRAIN)
    c1, c2, n, c3, c4 = caches
    g, g_fc = fc.backward(c4, grad_logits)
    g, _ = gap.backward(c3, g)
    g = g * (n > 0)
    g, g_bn = bn.backward(c2, g)
    grad_in, g_conv = conv.backward(c1, g)

    def objective():
        return run(BnMode.EVAL_BATCH_STATS)[0]

    pairs = [(grad_in, central_diff(objective, x)),
             (g_conv["w"], central_diff(objective, conv.w)),
             (g_bn["gamma"], central_diff(objective, bn.gamma)),
             (g_bn["beta"], central_diff(objective, bn.beta)),
             (g_fc["w"], central_diff(objective, fc.w)),
             (g_fc["b"], central_diff(objective, fc.b))]
    return _compare(pairs, corrupt)


CHECKS = (
    ("conv", check_conv, LAYER_TOL),
    ("maxpool", check_maxpool, LAYER_TOL),
    ("gap", check_gap, LAYER_TOL),
    ("fc", check_fc, LAYER_TOL),
    ("softmax", check_softmax, LAYER_TOL),
    ("batchnorm", check_batchnorm, LAYER_TOL),
    ("residual", check_residual, LAYER_TOL),
    ("network", check_network, NETWORK_TOL),
)


def run_suite(seed=0, instances=5, corrupt=None):
    """Run every check on `instances` fresh random instances each.

    corrupt names a check whose analytic gradients get deliberately scaled,
    a negative-control hook for verifying the suite can fail.
    """
    results = []
    for check_index, (name, fn, tol) in enumerate(CHECKS):
        worst = 0.0
        for i in range(instances):
            rng = Rng(seed).split(check_index).split(i)
            worst = max(worst, fn(rng, corrupt=(corrupt == name)))
        results.append(CheckResult(name, worst, tol))
    return results
