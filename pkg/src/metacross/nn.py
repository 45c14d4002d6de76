"""Parameter containers, basic layers, and the optimizer.

Modules discover parameters by walking attributes in construction order, so
``named_parameters`` is deterministic for a deterministically built model.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def parameter(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Module:
    """Base class: anything holding Tensors, child Modules, or lists of them."""

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []

        def walk(key: str, value) -> None:
            if isinstance(value, Tensor):
                if value.needs_grad:
                    out.append((key, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    walk(f"{key}.{i}", item)
            elif isinstance(value, dict):
                for k, item in value.items():
                    walk(f"{key}.{k}", item)

        for name, value in vars(self).items():
            walk(f"{prefix}{name}", value)
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """Affine map ``x @ weight + bias`` on rank-2 inputs."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.weight = parameter(rng, (self.in_features, self.out_features), 1.0 / np.sqrt(self.in_features))
        self.bias = Tensor(np.zeros(self.out_features), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y

    def cost_rows(self, input_shape: tuple[int, ...], name: str = "linear"):
        from .complexity import LayerCost, linear_flops

        if len(input_shape) != 2 or input_shape[1] != self.in_features:
            raise ShapeError(f"linear cost: input {input_shape} incompatible with in_features {self.in_features}")
        n = input_shape[0]
        params = self.weight.size + (self.bias.size if self.bias is not None else 0)
        return [LayerCost(name, "linear", params, linear_flops(n, self.in_features, self.out_features, self.bias is not None))]


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel, self.stride, self.padding = int(kernel), int(stride), int(padding)
        fan_in = self.in_ch * self.kernel ** 2
        self.weight = parameter(rng, (self.out_ch, self.in_ch, self.kernel, self.kernel), 1.0 / np.sqrt(fan_in))
        self.bias = Tensor(np.zeros(self.out_ch), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def output_extent(self, extent: int) -> int:
        return T.conv_output_extent(extent, self.kernel, self.stride, self.padding)

    def cost_rows(self, input_shape: tuple[int, ...], name: str = "conv2d"):
        from .complexity import LayerCost, conv_flops

        _, _, h, w = input_shape
        oh, ow = self.output_extent(h), self.output_extent(w)
        params = self.weight.size + self.bias.size
        flops = conv_flops(input_shape[0] * oh * ow, self.out_ch, self.in_ch, self.kernel ** 2, bias=True)
        return [LayerCost(name, "conv", params, flops)]


class Conv3d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch = int(in_ch), int(out_ch)
        self.kernel, self.stride, self.padding = int(kernel), int(stride), int(padding)
        fan_in = self.in_ch * self.kernel ** 3
        self.weight = parameter(rng, (self.out_ch, self.in_ch, self.kernel, self.kernel, self.kernel), 1.0 / np.sqrt(fan_in))
        self.bias = Tensor(np.zeros(self.out_ch), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def output_extent(self, extent: int) -> int:
        return T.conv_output_extent(extent, self.kernel, self.stride, self.padding)

    def cost_rows(self, input_shape: tuple[int, ...], name: str = "conv3d"):
        from .complexity import LayerCost, conv_flops

        _, _, d, h, w = input_shape
        od, oh, ow = (self.output_extent(e) for e in (d, h, w))
        params = self.weight.size + self.bias.size
        flops = conv_flops(input_shape[0] * od * oh * ow, self.out_ch, self.in_ch, self.kernel ** 3, bias=True)
        return [LayerCost(name, "conv", params, flops)]


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.width = int(width)
        self.eps = float(eps)
        self.gain = Tensor(np.ones(self.width), requires_grad=True)
        self.bias = Tensor(np.zeros(self.width), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, eps=self.eps)

    def cost_rows(self, input_shape: tuple[int, ...], name: str = "layer_norm"):
        from .complexity import LayerCost, LN_FLOPS_PER_ELEMENT

        n = 1
        for e in input_shape:
            n *= e
        return [LayerCost(name, "norm", 2 * self.width, LN_FLOPS_PER_ELEMENT * n)]


class Sequential(Module):
    """Chain of modules; cost rows concatenate in order."""

    def __init__(self, layers: list[Module]):
        self.layers = list(layers)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def cost_rows(self, input_shape: tuple[int, ...], name: str = "sequential"):
        rows = []
        shape = tuple(input_shape)
        for i, layer in enumerate(self.layers):
            rows.extend(layer.cost_rows(shape, name=f"{name}.{i}"))
            shape = layer.output_shape(shape) if hasattr(layer, "output_shape") else shape
        return rows


def global_grad_norm(params: list[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


class Adam:
    """Adam with decoupled weight decay, keyed by parameter name.

    Decay is applied directly to the weights before the moment update, so a
    step with all-zero gradients moves parameters by the decay term alone.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, named_params: list[tuple[str, Tensor]], lr: float, weight_decay: float = 0.0) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in named_params:
            if weight_decay:
                p.data -= lr * weight_decay * p.data
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
