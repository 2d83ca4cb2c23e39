"""Desk-scale detector architectures behind one forward/parameter interface.

Three families are provided, keyed by stable string ids that also appear in
config files and ticket headers:

``meso_lite``
    four conv blocks (8/8/16/16 filters, 3x3 then 5x5 kernels) with batch
    norm and max pooling, followed by a two-layer MLP head.
``cnn5_desk``
    five conv + batch-norm + relu layers (16/32/64/64/128), global average
    pool, linear head.
``resnet_mini``
    stem conv, three stages of two basic residual blocks (16/32/64),
    stride-2 downsampling, global average pool, linear head.
"""

from __future__ import annotations

import copy
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

ARCH_IDS = ("meso_lite", "cnn5_desk", "resnet_mini")
SUPPORTED_SIZES = (32, 64)
SUPPORTED_CHANNELS = (1, 3)


@dataclass(frozen=True)
class ArchSpec:
    arch_id: str
    input_shape: tuple[int, int, int] = (3, 64, 64)
    num_classes: int = 2


@dataclass
class Param:
    tensor: Tensor
    prunable: bool
    mask: np.ndarray | None  # bool, same shape as the weight; None when not prunable
    init: np.ndarray  # initial weights, captured at construction

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


class ParamStore(OrderedDict):
    """Ordered ``name -> Param`` registry.

    Order is insertion order and is part of the on-disk format: masks are
    bit-packed layer by layer in this order.
    """

    def add(self, name: str, data: np.ndarray, prunable: bool) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        data = np.asarray(data, dtype=np.float32)
        t = Tensor(data.copy(), requires_grad=True, name=name)
        mask = np.ones(data.shape, dtype=bool) if prunable else None
        init = data.copy()
        init.setflags(write=False)
        self[name] = Param(t, prunable, mask, init)
        return t

    def prunable(self) -> list[tuple[str, Param]]:
        return [(n, p) for n, p in self.items() if p.prunable]

    def zero_grad(self) -> None:
        for p in self.values():
            p.tensor.zero_grad()

    def effective(self, name: str) -> Tensor:
        p = self[name]
        return ag.apply_mask(p.tensor, p.mask)

    def masks(self) -> dict[str, np.ndarray]:
        return {n: p.mask.copy() for n, p in self.prunable()}

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.items():
            arr = state[n]
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {p.data.shape}")
            p.tensor.data[...] = arr

    def set_masks(self, masks: dict[str, np.ndarray]) -> None:
        for n, p in self.prunable():
            m = np.asarray(masks[n], dtype=bool)
            if m.shape != p.data.shape:
                raise ValueError(f"mask shape mismatch for {n}: {m.shape} vs {p.data.shape}")
            p.mask = m.copy()
            p.data[...] *= p.mask


@dataclass
class Census:
    layers: list[tuple[str, int, int]]  # (name, total, unpruned)
    total: int
    unpruned: int
    all_params: int  # every parameter, prunable or not, with masked entries removed

    @property
    def sparsity(self) -> float:
        return 1.0 - self.unpruned / self.total if self.total else 0.0


def param_census(model_or_store) -> Census:
    store = model_or_store.store if isinstance(model_or_store, Model) else model_or_store
    layers = []
    total = unpruned = other = 0
    for n, p in store.items():
        if p.prunable:
            t, u = p.data.size, int(p.mask.sum())
            layers.append((n, t, u))
            total += t
            unpruned += u
        else:
            other += p.data.size
    return Census(layers, total, unpruned, unpruned + other)


# ---------------------------------------------------------------------------
# layer helpers
# ---------------------------------------------------------------------------


@dataclass
class Conv:
    name: str
    cin: int
    cout: int
    k: int
    stride: int = 1
    padding: int = 0

    def register(self, store: ParamStore, rng: np.random.Generator) -> None:
        fan_in = self.cin * self.k * self.k
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(self.cout, self.cin, self.k, self.k))
        store.add(f"{self.name}.weight", w, prunable=True)
        store.add(f"{self.name}.bias", np.zeros(self.cout), prunable=False)

    def __call__(self, model: "Model", x: Tensor) -> Tensor:
        s = model.store
        return ag.conv2d(
            x, s.effective(f"{self.name}.weight"), s[f"{self.name}.bias"].tensor, self.stride, self.padding
        )

    def out_hw(self, h: int) -> int:
        return (h + 2 * self.padding - self.k) // self.stride + 1

    def count(self) -> int:
        return self.cout * self.cin * self.k * self.k + self.cout


@dataclass
class Dense:
    name: str
    din: int
    dout: int

    def register(self, store: ParamStore, rng: np.random.Generator) -> None:
        bound = math.sqrt(6.0 / self.din)
        store.add(f"{self.name}.weight", rng.uniform(-bound, bound, size=(self.dout, self.din)), prunable=True)
        store.add(f"{self.name}.bias", np.zeros(self.dout), prunable=False)

    def __call__(self, model: "Model", x: Tensor) -> Tensor:
        s = model.store
        return ag.linear(x, s.effective(f"{self.name}.weight"), s[f"{self.name}.bias"].tensor)

    def count(self) -> int:
        return self.dout * self.din + self.dout


@dataclass
class BN:
    name: str
    c: int

    def register(self, store: ParamStore, rng: np.random.Generator) -> None:
        store.add(f"{self.name}.gamma", np.ones(self.c), prunable=False)
        store.add(f"{self.name}.beta", np.zeros(self.c), prunable=False)

    def __call__(self, model: "Model", x: Tensor) -> Tensor:
        s = model.store
        rm, rv = model.buffers[f"{self.name}.running_mean"], model.buffers[f"{self.name}.running_var"]
        return ag.batchnorm2d(x, s[f"{self.name}.gamma"].tensor, s[f"{self.name}.beta"].tensor, rm, rv, model.training)

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{self.name}.running_mean": np.zeros(self.c, dtype=np.float32),
            f"{self.name}.running_var": np.ones(self.c, dtype=np.float32),
        }

    def count(self) -> int:
        return 2 * self.c


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


class Model:
    """Graph + parameters. Subclasses define ``_layers`` and ``_forward``."""

    arch_id: str = ""
    #: conv outputs that can be used as Grad-CAM targets, in forward order
    conv_taps: tuple[str, ...] = ()

    def __init__(self, spec: ArchSpec, seed: int):
        c, h, w = spec.input_shape
        if h != w or h not in SUPPORTED_SIZES or c not in SUPPORTED_CHANNELS:
            raise ValueError(
                f"{spec.arch_id}: unsupported input shape {spec.input_shape}; "
                f"need (C, H, H) with C in {SUPPORTED_CHANNELS}, H in {SUPPORTED_SIZES}"
            )
        if spec.num_classes != 2:
            raise ValueError("only binary detectors are supported")
        self.spec = spec
        self.seed = seed
        self.training = False
        self.layers = self._layers(c, h)
        self._by_name = {layer.name: layer for layer in self.layers}
        self.store = ParamStore()
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.register(self.store, rng)
            if isinstance(layer, BN):
                self.buffers.update(layer.buffers())
        self._init_buffers = {k: v.copy() for k, v in self.buffers.items()}
        self.taps: dict[str, Tensor] = {}
        self._retain: set[str] = set()

    def _layers(self, c: int, h: int) -> list:
        raise NotImplementedError

    def _forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def layer(self, name: str):
        return self._by_name[name]

    def train(self, mode: bool = True) -> "Model":
        self.training = mode
        return self

    def eval(self) -> "Model":
        return self.train(False)

    def _tap(self, name: str, x: Tensor) -> Tensor:
        if name in self._retain:
            x.retain_grad()
        self.taps[name] = x
        return x

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ValueError(f"{self.arch_id}: batch shape {x.shape} does not match input {self.spec.input_shape}")
        self.taps = {}
        return self._forward(x)

    __call__ = forward

    def closed_form_count(self) -> int:
        return sum(layer.count() for layer in self.layers)

    def reset_buffers(self) -> None:
        for k, v in self._init_buffers.items():
            self.buffers[k][...] = v

    def clone(self) -> "Model":
        return copy.deepcopy(self)


class MesoLite(Model):
    arch_id = "meso_lite"
    conv_taps = ("block1", "block2", "block3", "block4")

    def _layers(self, c, h):
        final = h // (2 * 2 * 2 * 4)
        return [
            Conv("conv1", c, 8, 3, padding=1),
            BN("bn1", 8),
            Conv("conv2", 8, 8, 5, padding=2),
            BN("bn2", 8),
            Conv("conv3", 8, 16, 5, padding=2),
            BN("bn3", 16),
            Conv("conv4", 16, 16, 5, padding=2),
            BN("bn4", 16),
            Dense("fc1", 16 * final * final, 16),
            Dense("fc2", 16, 2),
        ]

    def _forward(self, x):
        for i, pool in zip(range(1, 5), (2, 2, 2, 4)):
            x = self.layer(f"conv{i}")(self, x)
            x = ag.relu(self.layer(f"bn{i}")(self, x))
            x = self._tap(f"block{i}", x)
            x = ag.maxpool2d(x, pool)
        x = ag.flatten(x)
        x = ag.leaky_relu(self.layer("fc1")(self, x), 0.1)
        return self.layer("fc2")(self, x)


class CNN5Desk(Model):
    arch_id = "cnn5_desk"
    conv_taps = ("block1", "block2", "block3", "block4", "block5")
    widths = (16, 32, 64, 64, 128)
    strides = (2, 2, 2, 1, 2)

    def _layers(self, c, h):
        layers = []
        cin = c
        for i, (w, s) in enumerate(zip(self.widths, self.strides), start=1):
            layers += [Conv(f"conv{i}", cin, w, 3, stride=s, padding=1), BN(f"bn{i}", w)]
            cin = w
        layers.append(Dense("fc", cin, 2))
        return layers

    def _forward(self, x):
        for i in range(1, 6):
            x = self.layer(f"conv{i}")(self, x)
            x = ag.relu(self.layer(f"bn{i}")(self, x))
            x = self._tap(f"block{i}", x)
        return self.layer("fc")(self, ag.global_avg_pool(x))


class ResNetMini(Model):
    arch_id = "resnet_mini"
    conv_taps = ("stem", "stage1", "stage2", "stage3")
    widths = (16, 32, 64)

    def _layers(self, c, h):
        layers = [Conv("stem", c, 16, 3, stride=2, padding=1), BN("stem_bn", 16)]
        cin = 16
        for s, w in enumerate(self.widths, start=1):
            for b in (1, 2):
                p = f"s{s}b{b}"
                stride = 2 if (b == 1 and s > 1) else 1
                layers += [
                    Conv(f"{p}.conv1", cin, w, 3, stride=stride, padding=1),
                    BN(f"{p}.bn1", w),
                    Conv(f"{p}.conv2", w, w, 3, padding=1),
                    BN(f"{p}.bn2", w),
                ]
                if stride != 1 or cin != w:
                    layers += [Conv(f"{p}.down", cin, w, 1, stride=stride), BN(f"{p}.down_bn", w)]
                cin = w
        layers.append(Dense("fc", cin, 2))
        return layers

    def block(self, p: str, x: Tensor) -> Tensor:
        out = ag.relu(self.layer(f"{p}.bn1")(self, self.layer(f"{p}.conv1")(self, x)))
        out = self.layer(f"{p}.bn2")(self, self.layer(f"{p}.conv2")(self, out))
        down = self._by_name.get(f"{p}.down")
        shortcut = x if down is None else self.layer(f"{p}.down_bn")(self, down(self, x))
        return ag.relu(ag.add(out, shortcut))

    def _forward(self, x):
        x = ag.relu(self.layer("stem_bn")(self, self.layer("stem")(self, x)))
        x = self._tap("stem", ag.maxpool2d(x, 2))
        for s in range(1, 4):
            for b in (1, 2):
                x = self.block(f"s{s}b{b}", x)
            x = self._tap(f"stage{s}", x)
        return self.layer("fc")(self, ag.global_avg_pool(x))


_REGISTRY = {cls.arch_id: cls for cls in (MesoLite, CNN5Desk, ResNetMini)}


def build_model(spec: ArchSpec | str, seed: int = 0, input_shape=(3, 64, 64)) -> Model:
    """Build a model with all-ones masks and a frozen snapshot of the initial weights."""
    if isinstance(spec, str):
        spec = ArchSpec(spec, tuple(input_shape))
    try:
        cls = _REGISTRY[spec.arch_id]
    except KeyError:
        raise ValueError(f"unknown architecture {spec.arch_id!r}; choose from {ARCH_IDS}") from None
    return cls(spec, seed)
