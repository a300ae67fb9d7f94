"""Parameter update rules and piecewise-constant learning-rate schedules.

Updates mutate the parameter arrays in place (the one sanctioned mutation
in the framework) and are purely elementwise per parameter, so iteration
order never affects results. Weight decay applies only to the names listed
in decay_names: convolution and fully-connected weights, never BN scale or
shift and never biases.
"""

import numpy as np


class Sgd:
    """Gradient descent with weight decay and optional momentum.

    g <- grad + wd * param (decayed names only); v <- momentum*v + g;
    param <- param - lr * v. momentum=0 is the plain rule.
    """

    def __init__(self, lr, weight_decay=0.0, momentum=0.0, decay_names=()):
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.momentum = float(momentum)
        self.decay_names = frozenset(decay_names)
        self.velocity = {}
        self.steps = 0

    def step(self, params, grads):
        for name, param in params.items():
            g = _checked_grad(grads, name, param)
            if self.weight_decay and name in self.decay_names:
                g = g + self.weight_decay * param
            if self.momentum:
                v = self.velocity.get(name)
                if v is None:
                    v = np.zeros_like(param)
                    self.velocity[name] = v
                v *= self.momentum
                v += g
                param -= self.lr * v
            else:
                param -= self.lr * g
        self.steps += 1


class Rmsprop:
    """Per-parameter running average of squared gradients.

    s <- decay*s + (1-decay)*g^2; param <- param - lr * g / sqrt(s + eps).
    Weight decay folds into g first.
    """

    def __init__(self, lr, weight_decay=0.0, decay=0.999, eps=1e-8, decay_names=()):
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must lie in (0,1), got {decay}")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.decay = float(decay)
        self.eps = float(eps)
        self.decay_names = frozenset(decay_names)
        self.square_avg = {}
        self.steps = 0

    def step(self, params, grads):
        for name, param in params.items():
            g = _checked_grad(grads, name, param)
            if self.weight_decay and name in self.decay_names:
                g = g + self.weight_decay * param
            s = self.square_avg.get(name)
            if s is None:
                s = np.zeros_like(param)
                self.square_avg[name] = s
            s *= self.decay
            s += (1.0 - self.decay) * np.square(g)
            param -= self.lr * g / np.sqrt(s + self.eps)
        self.steps += 1


def _checked_grad(grads, name, param):
    if name not in grads:
        raise KeyError(f"missing gradient for parameter {name!r}")
    g = grads[name]
    if g.shape != param.shape:
        raise ValueError(f"gradient shape {g.shape} != parameter shape "
                         f"{param.shape} for {name!r}")
    if not np.all(np.isfinite(g)):
        raise ValueError(f"non-finite gradient for {name!r}")
    return g


class LrSchedule:
    """Piecewise-constant schedule over (epoch boundary, lr) points.

    lr_at(e) is the lr of the last boundary <= e (boundary inclusive);
    epochs beyond the last boundary keep the last lr.
    """

    def __init__(self, points):
        points = [(int(b), float(lr)) for b, lr in points]
        if not points:
            raise ValueError("empty schedule")
        boundaries = [b for b, _ in points]
        if any(b2 <= b1 for b1, b2 in zip(boundaries, boundaries[1:])):
            raise ValueError(f"boundaries must strictly increase: {boundaries}")
        self.points = points

    def lr_at(self, epoch):
        lr = self.points[0][1]
        for boundary, value in self.points:
            if epoch >= boundary:
                lr = value
        return lr

    @classmethod
    def parse(cls, text):
        """Parse "0:0.1,15:0.01" into a schedule."""
        points = []
        for part in text.split(","):
            boundary, _, lr = part.partition(":")
            points.append((int(boundary.strip()), float(lr)))
        return cls(points)

    def __str__(self):
        return ",".join(f"{b}:{lr:g}" for b, lr in self.points)
