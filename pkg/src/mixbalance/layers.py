"""Parameterised layers built on :mod:`mixbalance.tensor`."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import ShapeError, Tensor, batch_norm, conv2d, matmul, tmax, tmean


def kaiming_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """He-normal draw: N(0, sqrt(2 / fan_in)), computed in f64 then cast."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    std = np.sqrt(2.0 / fan_in)
    data = rng.normal(0.0, std, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


class Module:
    """Container with ordered parameters, buffers and child modules.

    Attribute assignment order fixes the parameter naming and iteration
    order, which keeps optimiser state and checkpoints deterministic.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        if name not in self._buffers:
            raise KeyError(name)
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state) -> None:
        params = dict(self.named_parameters())
        expected = set(params)
        owners = {}
        for m_prefix, m in self._prefixed_modules():
            for bname in m._buffers:
                owners[m_prefix + bname] = (m, bname)
        expected |= set(owners)
        missing = expected - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for name, (m, bname) in owners.items():
            m.set_buffer(bname, np.asarray(state[name]).copy())

    def _prefixed_modules(self, prefix: str = ""):
        yield prefix, self
        for cname, child in self._children.items():
            yield from child._prefixed_modules(f"{prefix}{cname}.")

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self):
        return iter(self._children.values())

    def forward(self, x):
        for layer in self:
            x = layer(x)
        return x


def linear_forward(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias for x of shape (N, d) and weight of shape (out, d)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = matmul(x, weight.transpose())
    if bias is not None:
        out = out + bias
    return out


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        super().__init__()
        self.weight = kaiming_init((out_features, in_features), in_features, rng, dtype)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear_forward(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, pad=0, bias: bool = False,
                 exact: bool = True, dtype=np.float32):
        super().__init__()
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = kaiming_init((out_channels, in_channels, kernel_size, kernel_size),
                                   fan_in, rng, dtype)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.pad = pad
        self.exact = exact

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, self.stride, self.pad, self.exact)
        if self.bias is not None:
            out = out + self.bias.reshape(1, -1, 1, 1)
        return out


def batchnorm_forward(x: Tensor, bn: "BatchNorm", mode: str) -> Tensor:
    """Normalise with batch statistics (``train``) or running statistics (``eval``).

    Train mode updates the running mean and the unbiased running variance by
    an exponential moving average with the layer's momentum.
    """
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        out, mu, var = batch_norm(x, bn.weight, bn.bias, bn.running_mean, bn.running_var,
                                  bn.eps, batch_stats=True)
        m = x.data.size // x.shape[1]
        unbiased = var * (m / (m - 1))
        mom = bn.momentum
        bn.set_buffer("running_mean", (1 - mom) * bn.running_mean + mom * mu.astype(np.float64))
        bn.set_buffer("running_var", (1 - mom) * bn.running_var + mom * unbiased.astype(np.float64))
        return out
    if mode == "eval":
        out, _, _ = batch_norm(x, bn.weight, bn.bias, bn.running_mean, bn.running_var,
                               bn.eps, batch_stats=False)
        return out
    raise ValueError(f"unknown batch-norm mode {mode!r}")


class BatchNorm(Module):
    """Batch normalisation over channel axis 1; works for (N, C) and (N, C, H, W).

    Running statistics are kept in f64 and never receive gradients.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm_forward(x, self, "train" if self.training else "eval")


def global_avg_pool(x: Tensor) -> Tensor:
    return tmean(x, axis=(2, 3))


def global_max_pool(x: Tensor) -> Tensor:
    n, c = x.shape[:2]
    return tmax(x.reshape(n, c, -1), axis=2)
