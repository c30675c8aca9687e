"""Fixed-architecture meta networks with hand-written reverse-mode gradients.

A MetaNet is an m-layer MLP mapping width-d vectors to width-d vectors
through hidden width h. Each layer computes

    y = Linear(GELU(Norm(x)))  [+ x  when a residual link is active]

where Norm is row-grouped layer normalization: the L subvectors of one
source row are concatenated back into the full row, normalized to zero
mean / unit variance, re-split, and given a per-position affine (gain,
bias) shared across the L slots. With group size 1 this degenerates to
standard layer normalization over the layer width.

Residual links are requested by a schedule ("after_first" for encoders,
"except_last" for decoders) and are actually applied only on layers whose
input and output widths match; d->h and h->d boundary layers carry no
skip path because that would require projection parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

NORM_EPS = 1e-5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

RESIDUAL_SCHEDULES = ("after_first", "except_last", "all", "none")
NORM_MODES = ("rln", "ln", "none")
ACTIVATIONS = ("gelu", "identity")


def gelu(x):
    """x * Phi(x) with the exact standard normal CDF."""
    x = np.asarray(x)
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    """Phi(x) + x * phi(x)."""
    x = np.asarray(x)
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * pdf


def rln_forward(x, group, gain, bias, eps=NORM_EPS):
    """Normalize each group of `group` consecutive rows as one concatenated vector.

    Returns (out, cache) where cache feeds rln_backward.
    """
    x = np.asarray(x)
    n, w = x.shape
    if group < 1 or n % group != 0:
        raise ValueError(f"batch of {n} rows cannot be grouped by {group}")
    v = x.reshape(n // group, group * w)
    mu = v.mean(axis=1, keepdims=True)
    var = v.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((v - mu) * inv).reshape(n, w)
    out = xhat * gain + bias
    return out, (xhat, inv, group)


def rln_backward(g, cache, gain):
    """Gradients of rln_forward: returns (dx, dgain, dbias)."""
    xhat, inv, group = cache
    n, w = g.shape
    dgain = (g * xhat).sum(axis=0)
    dbias = g.sum(axis=0)
    gh = (g * gain).reshape(n // group, group * w)
    xh = xhat.reshape(n // group, group * w)
    m1 = gh.mean(axis=1, keepdims=True)
    m2 = (gh * xh).mean(axis=1, keepdims=True)
    dx = ((gh - m1 - xh * m2) * inv).reshape(n, w)
    return dx, dgain, dbias


@dataclass
class MetaNetConfig:
    """Architecture of one meta network.

    width: in/out vector width d. hidden defaults to round(2.5 * width),
    which for width 8 gives the 3-layer linear-parameter count of 768.
    """

    width: int
    layers: int = 3
    hidden: int | None = None
    bias: bool = True
    residual: str = "after_first"
    norm: str = "rln"
    activation: str = "gelu"

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.hidden is None:
            self.hidden = max(1, round(2.5 * self.width))
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.residual not in RESIDUAL_SCHEDULES:
            raise ValueError(f"residual must be one of {RESIDUAL_SCHEDULES}")
        if self.norm not in NORM_MODES:
            raise ValueError(f"norm must be one of {NORM_MODES}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    def layer_widths(self):
        """Widths per layer boundary: [d, h, ..., h, d] with layers+1 entries."""
        if self.layers == 1:
            return [self.width, self.width]
        return [self.width] + [self.hidden] * (self.layers - 1) + [self.width]

    def residual_mask(self):
        widths = self.layer_widths()
        mask = []
        for i in range(self.layers):
            if self.residual == "after_first":
                wanted = i >= 1
            elif self.residual == "except_last":
                wanted = i < self.layers - 1
            elif self.residual == "all":
                wanted = True
            else:
                wanted = False
            mask.append(wanted and widths[i] == widths[i + 1])
        return mask

    def linear_param_count(self):
        widths = self.layer_widths()
        total = 0
        for i in range(self.layers):
            total += widths[i] * widths[i + 1]
            if self.bias:
                total += widths[i + 1]
        return total

    def norm_param_count(self):
        if self.norm == "none":
            return 0
        return 2 * sum(self.layer_widths()[: self.layers])

    def param_count(self):
        return self.linear_param_count() + self.norm_param_count()


class MetaNet:
    """An m-layer MLP with explicit forward/backward passes.

    Parameters live in plain numpy arrays; forward and backward never
    mutate them, so a net can be shared across concurrent evaluations.
    """

    def __init__(self, config, seed=0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        widths = config.layer_widths()
        self.weights = []
        self.biases = []
        self.gains = []
        self.norm_biases = []
        for i in range(config.layers):
            fan_in, fan_out = widths[i], widths[i + 1]
            scale = math.sqrt(2.0 / (fan_in + fan_out))
            self.weights.append(rng.normal(0.0, scale, (fan_in, fan_out)).astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype) if config.bias else None)
            if config.norm != "none":
                self.gains.append(np.ones(fan_in, dtype=self.dtype))
                self.norm_biases.append(np.zeros(fan_in, dtype=self.dtype))
            else:
                self.gains.append(None)
                self.norm_biases.append(None)
        self._residual_mask = config.residual_mask()

    # -- parameter bookkeeping -------------------------------------------------

    def param_items(self):
        """Canonical (name, array) order: layer-major, weight, bias, gain, norm bias."""
        items = []
        for i in range(self.config.layers):
            items.append((f"layer{i}.weight", self.weights[i]))
            if self.biases[i] is not None:
                items.append((f"layer{i}.bias", self.biases[i]))
            if self.gains[i] is not None:
                items.append((f"layer{i}.gain", self.gains[i]))
                items.append((f"layer{i}.norm_bias", self.norm_biases[i]))
        return items

    def set_param(self, name, value):
        layer, kind = name.split(".")
        i = int(layer.removeprefix("layer"))
        arr = np.asarray(value, dtype=self.dtype)
        if kind == "weight":
            self.weights[i] = arr
        elif kind == "bias":
            self.biases[i] = arr
        elif kind == "gain":
            self.gains[i] = arr
        elif kind == "norm_bias":
            self.norm_biases[i] = arr
        else:
            raise KeyError(name)

    def n_params(self):
        return sum(a.size for _, a in self.param_items())

    def flatten(self):
        """All parameters as one float vector in canonical order."""
        return np.concatenate([a.ravel() for _, a in self.param_items()])

    def load_flat(self, flat):
        flat = np.asarray(flat, dtype=self.dtype)
        if flat.size != self.n_params():
            raise ValueError(f"expected {self.n_params()} parameters, got {flat.size}")
        pos = 0
        for name, a in self.param_items():
            chunk = flat[pos : pos + a.size].reshape(a.shape).copy()
            self.set_param(name, chunk)
            pos += a.size
        return self

    def copy(self):
        dup = MetaNet.__new__(MetaNet)
        dup.config = self.config
        dup.dtype = self.dtype
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [None if b is None else b.copy() for b in self.biases]
        dup.gains = [None if g is None else g.copy() for g in self.gains]
        dup.norm_biases = [None if b is None else b.copy() for b in self.norm_biases]
        dup._residual_mask = list(self._residual_mask)
        return dup

    # -- forward / backward ----------------------------------------------------

    def forward(self, x, group=1):
        """Run the net on an (n, width) batch whose rows form groups of `group`.

        Returns (out, cache); feed the cache to backward().
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.config.width:
            raise ValueError(
                f"batch shape {x.shape} does not match net width {self.config.width}"
            )
        cfg = self.config
        cur = x
        layer_caches = []
        for i in range(cfg.layers):
            if cfg.norm != "none":
                g = group if cfg.norm == "rln" else 1
                normed, ncache = rln_forward(cur, g, self.gains[i], self.norm_biases[i])
            else:
                normed, ncache = cur, None
            act = gelu(normed) if cfg.activation == "gelu" else normed
            out = act @ self.weights[i]
            if self.biases[i] is not None:
                out = out + self.biases[i]
            if self._residual_mask[i]:
                out = out + cur
            layer_caches.append((cur, normed, ncache, act))
            cur = out
        return cur, layer_caches

    def backward(self, upstream, cache):
        """Gradients for every parameter plus the input batch.

        Returns (grads, dx) with grads keyed like param_items().
        """
        cfg = self.config
        g = np.asarray(upstream, dtype=self.dtype)
        if len(cache) != cfg.layers:
            raise ValueError("cache does not match this net's layer count")
        grads = {}
        for i in reversed(range(cfg.layers)):
            x_in, normed, ncache, act = cache[i]
            if g.shape != (x_in.shape[0], self.weights[i].shape[1]):
                raise ValueError("upstream gradient shape does not match cached forward")
            grads[f"layer{i}.weight"] = act.T @ g
            if self.biases[i] is not None:
                grads[f"layer{i}.bias"] = g.sum(axis=0)
            dact = g @ self.weights[i].T
            dnormed = dact * gelu_grad(normed) if cfg.activation == "gelu" else dact
            if cfg.norm != "none":
                dx, dgain, dnbias = rln_backward(dnormed, ncache, self.gains[i])
                grads[f"layer{i}.gain"] = dgain
                grads[f"layer{i}.norm_bias"] = dnbias
            else:
                dx = dnormed
            if self._residual_mask[i]:
                dx = dx + g
            g = dx
        return grads, g
