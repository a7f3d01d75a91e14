"""Layers with frozen base weights and optional per-task slots.

A weight layer carries at most one per-task slot: a modulation grid (the
effective weight is ``base * upsample(grid)``) or a binary mask (the effective
weight is ``base * 1[scores > tau]``). Base weights and biases are plain
non-trainable tensors unless a policy such as full fine-tuning flips them.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BatchNormError, GeometryError, SnapshotMismatchError
from .interp import InterpMethod, ModGrid, grid_dims, upsample_mod

cross_entropy = ad.cross_entropy


@dataclass
class MaskSlot:
    """Real-valued scores realised as a {0,1} mask by thresholding at ``tau``."""

    scores: Tensor
    tau: float = 0.0

    def realize(self) -> np.ndarray:
        return (self.scores.data > self.tau).astype(self.scores.dtype)


class WeightLayer:
    """Shared slot handling for convolution and linear layers."""

    weight: Tensor
    bias: Tensor | None
    mod_slot: ModGrid | None
    mask_slot: MaskSlot | None

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_per_group(self) -> int:
        return self.weight.shape[1]

    def grid_shape(self, m1: int, m2: int) -> tuple[int, ...]:
        g_out, g_in = grid_dims(self.out_channels, self.in_per_group, m1, m2)
        return (g_out, g_in) + tuple(self.weight.shape[2:])

    def attach_grid(self, values: np.ndarray, method, trainable: bool = True) -> None:
        if tuple(values.shape[2:]) != tuple(self.weight.shape[2:]):
            raise GeometryError(f"grid kernel dims {values.shape[2:]} differ from weight {self.weight.shape[2:]}")
        vals = Tensor(np.asarray(values, dtype=self.weight.dtype), requires_grad=trainable)
        self.mod_slot = ModGrid(vals, self.out_channels, self.in_per_group, InterpMethod.parse(method))
        self.mask_slot = None

    def attach_mask(self, scores: np.ndarray, tau: float = 0.0, trainable: bool = True) -> None:
        if tuple(scores.shape) != self.weight.shape:
            raise GeometryError(f"mask scores {scores.shape} do not match weight {self.weight.shape}")
        self.mask_slot = MaskSlot(Tensor(np.asarray(scores, dtype=self.weight.dtype), requires_grad=trainable), tau)
        self.mod_slot = None

    def clear_slots(self) -> None:
        self.mod_slot = None
        self.mask_slot = None

    def effective_weight(self) -> Tensor:
        if self.mod_slot is not None:
            return ad.mul(self.weight, upsample_mod(self.mod_slot))
        if self.mask_slot is not None:
            return ad.mul(self.weight, ad.straight_through_binarize(self.mask_slot.scores, self.mask_slot.tau))
        return self.weight


class ModulatedConv(WeightLayer):
    def __init__(self, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1):
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight)
        self.bias = None if bias is None else (bias if isinstance(bias, Tensor) else Tensor(bias))
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.mod_slot = None
        self.mask_slot = None

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.in_per_group * self.groups:
            raise GeometryError(
                f"conv expects (B, {self.in_per_group * self.groups}, H, W) input, got {x.shape}"
            )
        return ad.conv2d(x, self.effective_weight(), self.bias, self.stride, self.padding, self.groups)


class ModulatedLinear(WeightLayer):
    def __init__(self, weight, bias=None):
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight)
        self.bias = None if bias is None else (bias if isinstance(bias, Tensor) else Tensor(bias))
        self.mod_slot = None
        self.mask_slot = None

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.weight.shape[1]:
            raise GeometryError(f"linear expects (B, {self.weight.shape[1]}) input, got {x.shape}")
        return ad.linear(x, self.effective_weight(), self.bias)


def modulated_forward(layer: WeightLayer, x: Tensor) -> Tensor:
    return layer(x)


class BatchNorm:
    """Batch normalisation with frozen affine parameters and per-task statistics.

    Running variance is updated with the unbiased batch variance, while the
    batch itself is normalised with the biased one.
    """

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(width, dtype=dtype))
        self.beta = Tensor(np.zeros(width, dtype=dtype))
        self.running_mean = np.zeros(width, dtype=dtype)
        self.running_var = np.ones(width, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.training = False

    @property
    def width(self) -> int:
        return self.gamma.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return bn_forward(self, x, "train" if self.training else "eval")


def bn_forward(bn: BatchNorm, x: Tensor, mode: str = "eval") -> Tensor:
    if x.data.ndim < 2 or x.shape[1] != bn.width:
        raise GeometryError(f"batch norm of width {bn.width} got input {x.shape}")
    if mode == "eval":
        out, _, _ = ad.batch_norm(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, bn.eps)
        return out
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.shape[0] < 2:
        raise BatchNormError("train-mode batch norm needs a batch of at least 2")
    out, mu, var = ad.batch_norm(x, bn.gamma, bn.beta, eps=bn.eps)
    n = x.size // x.shape[1]
    m = bn.running_mean.dtype.type(bn.momentum)
    unbiased = var * (n / (n - 1)) if n > 1 else var
    bn.running_mean = ((1 - m) * bn.running_mean + m * mu).astype(bn.running_mean.dtype)
    bn.running_var = ((1 - m) * bn.running_var + m * unbiased).astype(bn.running_var.dtype)
    return out


class ReLU:
    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(x)


class GlobalAvgPool:
    def __call__(self, x: Tensor) -> Tensor:
        return ad.global_avg_pool(x)


class Flatten:
    def __call__(self, x: Tensor) -> Tensor:
        return ad.reshape(x, (x.shape[0], -1))


@dataclass
class BNSnapshot:
    entries: tuple[tuple[str, np.ndarray, np.ndarray], ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def element_count(self) -> int:
        return sum(m.size + v.size for _, m, v in self.entries)


@dataclass
class Network:
    """An ordered backbone of named layers followed by a linear head."""

    layers: list[tuple[str, object]]
    head: ModulatedLinear
    arch: dict = field(default_factory=dict)

    def features(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        for _, layer in self.layers:
            x = layer(x)
        return x

    def __call__(self, x) -> Tensor:
        return self.head(self.features(x))

    forward = __call__

    @property
    def dtype(self):
        return self.head.weight.dtype

    def weight_layers(self) -> Iterator[tuple[str, WeightLayer]]:
        for name, layer in self.layers:
            if isinstance(layer, WeightLayer):
                yield name, layer

    def bn_layers(self) -> Iterator[tuple[str, BatchNorm]]:
        for name, layer in self.layers:
            if isinstance(layer, BatchNorm):
                yield name, layer

    def layer(self, name: str):
        for n, layer in self.layers:
            if n == name:
                return layer
        if name == "head":
            return self.head
        raise KeyError(name)

    def train(self, flag: bool = True) -> "Network":
        for _, bn in self.bn_layers():
            bn.training = flag
        return self

    def eval(self) -> "Network":
        return self.train(False)

    @property
    def training(self) -> bool:
        return any(bn.training for _, bn in self.bn_layers())

    def base_tensors(self) -> list[tuple[str, Tensor]]:
        """Every frozen parameter tensor, in a fixed order (head last)."""
        out = []
        for name, layer in self.layers:
            if isinstance(layer, WeightLayer):
                out.append((f"{name}.weight", layer.weight))
                if layer.bias is not None:
                    out.append((f"{name}.bias", layer.bias))
            elif isinstance(layer, BatchNorm):
                out.append((f"{name}.gamma", layer.gamma))
                out.append((f"{name}.beta", layer.beta))
        out.append(("head.weight", self.head.weight))
        if self.head.bias is not None:
            out.append(("head.bias", self.head.bias))
        return out

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Frozen parameters plus BN running statistics."""
        arrays = [(n, t.data) for n, t in self.base_tensors()]
        for name, bn in self.bn_layers():
            arrays.append((f"{name}.running_mean", bn.running_mean))
            arrays.append((f"{name}.running_var", bn.running_var))
        return arrays

    def content_hash(self) -> str:
        return ad.parameters_hash(self.state_arrays())

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, tensor in self.base_tensors():
            tensor.data = np.array(arrays[name], dtype=tensor.dtype)
        for name, bn in self.bn_layers():
            bn.running_mean = np.array(arrays[f"{name}.running_mean"], dtype=bn.running_mean.dtype)
            bn.running_var = np.array(arrays[f"{name}.running_var"], dtype=bn.running_var.dtype)

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    def set_base_trainable(self, flag: bool) -> None:
        for _, t in self.base_tensors():
            t.requires_grad = flag

    def clear_slots(self) -> None:
        for _, layer in self.weight_layers():
            layer.clear_slots()


def bn_snapshot(model: Network) -> BNSnapshot:
    return BNSnapshot(
        tuple((name, bn.running_mean.copy(), bn.running_var.copy()) for name, bn in model.bn_layers())
    )


def bn_restore(model: Network, snap: BNSnapshot) -> None:
    layers = list(model.bn_layers())
    if [n for n, _ in layers] != [n for n, _, _ in snap.entries]:
        raise SnapshotMismatchError(
            f"snapshot layers {[n for n, _, _ in snap.entries]} != model layers {[n for n, _ in layers]}"
        )
    for (name, bn), (_, mu, var) in zip(layers, snap.entries):
        if mu.shape != (bn.width,) or var.shape != (bn.width,):
            raise SnapshotMismatchError(f"{name}: snapshot width {mu.shape} != layer width {bn.width}")
    for (_, bn), (_, mu, var) in zip(layers, snap.entries):
        bn.running_mean = mu.astype(bn.running_mean.dtype, copy=True)
        bn.running_var = var.astype(bn.running_var.dtype, copy=True)


# ---------------------------------------------------------------------------
# construction


def init_linear(fan_out: int, fan_in: int, rng: np.random.Generator, dtype=np.float32):
    """Uniform(+-sqrt(1/fan_in)) weights and zero bias."""
    bound = np.sqrt(1.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
    return w, np.zeros(fan_out, dtype=dtype)


def small_cnn(
    in_channels: int = 1,
    num_classes: int = 10,
    widths: tuple[int, ...] = (16, 32, 64),
    hidden: int = 64,
    seed: int = 0,
    dtype=np.float32,
) -> Network:
    """conv-BN-ReLU blocks (stride 2 after the first), global pooling, an MLP layer and a head."""
    rng = np.random.default_rng(seed)
    layers: list[tuple[str, object]] = []
    cin = in_channels
    for i, cout in enumerate(widths, start=1):
        fan_in = cin * 9
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, 3, 3)).astype(dtype)
        layers.append((f"conv{i}", ModulatedConv(w, None, stride=1 if i == 1 else 2, padding=1)))
        layers.append((f"bn{i}", BatchNorm(cout, dtype=dtype)))
        layers.append((f"relu{i}", ReLU()))
        cin = cout
    layers.append(("pool", GlobalAvgPool()))
    w, b = init_linear(hidden, cin, rng, dtype)
    w *= np.sqrt(6.0).astype(dtype)  # He-uniform scale for the ReLU layer
    layers.append(("fc", ModulatedLinear(w, b)))
    layers.append(("fc_relu", ReLU()))
    hw, hb = init_linear(num_classes, hidden, rng, dtype)
    arch = {
        "kind": "small_cnn",
        "in_channels": in_channels,
        "num_classes": num_classes,
        "widths": list(widths),
        "hidden": hidden,
        "dtype": np.dtype(dtype).name,
    }
    return Network(layers, ModulatedLinear(hw, hb), arch)


def build_from_arch(arch: dict) -> Network:
    if arch.get("kind") != "small_cnn":
        raise ValueError(f"unknown architecture {arch.get('kind')!r}")
    net = small_cnn(
        arch["in_channels"], arch["num_classes"], tuple(arch["widths"]), arch["hidden"],
        dtype=np.dtype(arch.get("dtype", "float32")),
    )
    net.arch = dict(arch)
    return net
