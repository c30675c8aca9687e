"""Adam optimizer over named parameter dictionaries."""

import numpy as np


class Adam:
    """Standard Adam with bias correction.

    step() returns fresh parameter arrays and never mutates its inputs;
    the moment accumulators live on the optimizer.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, params, grads):
        """Apply one update; params and grads are dicts keyed by parameter name."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise ValueError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self._m.get(name)
            v = self._v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self._m[name] = m
            self._v[name] = v
            out[name] = p - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return out
