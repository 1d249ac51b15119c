"""Layer building blocks: parameter containers, conv layers, and batch
normalization with per-domain running statistics."""

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter/buffer container with named traversal."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def set_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def buffer_owner(self, path):
        """Resolve a dotted buffer path to (module, leaf_name)."""
        mod = self
        parts = path.split(".")
        for part in parts[:-1]:
            mod = mod._children[part]
        return mod, parts[-1]

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Conv2d(Module):
    """3x3/1x1 convolution with He fan-in initialization."""

    def __init__(self, cin, cout, k, rng, stride=1, padding=None, bias=True, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        std = np.sqrt(2.0 / (cin * k * k))
        w = rng.standard_normal((cout, cin, k, k)) * std
        self.weight = Tensor(w.astype(dtype), requires_grad=True, name="weight")
        self.bias = None
        if bias:
            self.bias = Tensor(np.zeros((1, cout, 1, 1), dtype=dtype), requires_grad=True, name="bias")

    def forward(self, x):
        out = T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class DomainBatchNorm(Module):
    """Batch normalization keeping one running-statistics set per domain.

    Training mode normalizes by batch statistics and updates only the
    active domain's running averages; eval mode normalizes by the active
    domain's stored statistics. Affine parameters are shared.
    """

    DOMAINS = ("labeled", "unlabeled")

    def __init__(self, c, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones((1, c, 1, 1), dtype=dtype), requires_grad=True, name="gamma")
        self.beta = Tensor(np.zeros((1, c, 1, 1), dtype=dtype), requires_grad=True, name="beta")
        for dom in self.DOMAINS:
            self.register_buffer(f"mean_{dom}", np.zeros((1, c, 1, 1), dtype=dtype))
            self.register_buffer(f"var_{dom}", np.ones((1, c, 1, 1), dtype=dtype))

    def forward(self, x, domain):
        if domain not in self.DOMAINS:
            raise ValueError(f"unknown domain {domain!r}")
        if self.training:
            out, mean, var = T.batchnorm_train(x, self.gamma, self.beta, eps=self.eps)
            m = self.momentum
            self.set_buffer(f"mean_{domain}", ((1 - m) * self._buffers[f"mean_{domain}"] + m * mean).astype(x.dtype))
            self.set_buffer(f"var_{domain}", ((1 - m) * self._buffers[f"var_{domain}"] + m * var).astype(x.dtype))
            return out
        rm = self._buffers[f"mean_{domain}"]
        rv = self._buffers[f"var_{domain}"]
        inv = (1.0 / np.sqrt(rv + self.eps)).astype(x.dtype)
        xhat = T.multiply(T.subtract(x, Tensor(rm)), Tensor(inv))
        return T.add(T.multiply(xhat, self.gamma), self.beta)


class ConvNormRelu(Module):
    def __init__(self, cin, cout, rng, stride=1, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng, stride=stride, bias=False, dtype=dtype)
        self.norm = DomainBatchNorm(cout, dtype=dtype)

    def forward(self, x, domain):
        return T.relu(self.norm.forward(self.conv.forward(x), domain))
