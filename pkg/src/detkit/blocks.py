"""Forward-only YOLOv8-style blocks: Conv, Bottleneck, C2f, SPPF, EMA, C2f-EMA.

Blocks are frozen dataclasses holding float64 parameter arrays. Build them
with the ``create`` classmethods (or :func:`init_params`), which draw weights
from a seeded generator so identical seeds give bit-identical blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import tensor as T
from .tensor import DimensionError

Seed = Union[int, np.random.Generator]


def _rng(seed: Seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _uniform_weight(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    # PyTorch-style kaiming-uniform bound, 1/sqrt(fan_in)
    bound = 1.0 / np.sqrt(c_in * k * k)
    return rng.uniform(-bound, bound, size=(c_out, c_in, k, k))


@dataclass(frozen=True)
class ConvBlock:
    """Conv2d -> BatchNorm (inference) -> activation."""

    weight: np.ndarray
    bias: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    stride: int = 1
    padding: int = 0
    act: str = "silu"
    eps: float = 1e-5

    def __post_init__(self):
        c_out = self.weight.shape[0]
        for name in ("bias", "bn_mean", "bn_var", "bn_gamma", "bn_beta"):
            if getattr(self, name).shape != (c_out,):
                raise DimensionError(
                    f"{name} has shape {getattr(self, name).shape}, conv has {c_out} output channels",
                    (name, "C_out"),
                )

    @classmethod
    def create(cls, c_in: int, c_out: int, k: int = 1, s: int = 1, seed: Seed = 0, act: str = "silu"):
        rng = _rng(seed)
        if c_in < 1 or c_out < 1:
            raise DimensionError(f"channel counts must be positive, got {c_in}->{c_out}", ("C",))
        w = _uniform_weight(rng, c_out, c_in, k)
        return cls(
            weight=w,
            bias=np.zeros(c_out),
            bn_mean=rng.normal(0.0, 0.05, size=c_out),
            bn_var=rng.uniform(0.8, 1.2, size=c_out),
            bn_gamma=rng.uniform(0.8, 1.2, size=c_out),
            bn_beta=rng.normal(0.0, 0.05, size=c_out),
            stride=s,
            padding=k // 2,
            act=act,
        )

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)
        y = T.batch_norm_inference(y, self.bn_mean, self.bn_var, self.bn_gamma, self.bn_beta, self.eps)
        return T.activation(y, self.act)

    def zeroed(self) -> "ConvBlock":
        """Copy whose output is identically zero (zero weights, identity BN)."""
        c = self.c_out
        return ConvBlock(
            np.zeros_like(self.weight), np.zeros(c), np.zeros(c), np.ones(c), np.ones(c), np.zeros(c),
            self.stride, self.padding, self.act, self.eps,
        )


@dataclass(frozen=True)
class Bottleneck:
    cv1: ConvBlock
    cv2: ConvBlock
    shortcut: bool = True
    ema: "EMABlock | None" = None

    @classmethod
    def create(cls, c: int, shortcut: bool = True, seed: Seed = 0, ema_groups: int | None = None):
        rng = _rng(seed)
        cv1 = ConvBlock.create(c, c, 3, seed=rng)
        cv2 = ConvBlock.create(c, c, 3, seed=rng)
        ema = EMABlock.create(c, ema_groups, seed=rng) if ema_groups else None
        return cls(cv1, cv2, shortcut, ema)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = self.cv2(self.cv1(x))
        if self.ema is not None:
            y = self.ema(y)
        return x + y if self.shortcut and self.cv1.c_in == self.cv2.c_out else y


@dataclass(frozen=True)
class C2fBlock:
    """Entry 1x1 conv, split in halves, chained bottlenecks, concat, exit 1x1 conv.

    The exit conv sees ``(2 + n) * hidden`` channels: both halves plus the
    output of every bottleneck.
    """

    cv1: ConvBlock
    bottlenecks: tuple[Bottleneck, ...]
    cv2: ConvBlock
    shortcut: bool = False

    def __post_init__(self):
        hidden = self.hidden
        if self.cv1.c_out != 2 * hidden:
            raise DimensionError(f"entry conv emits {self.cv1.c_out}, expected {2 * hidden}", ("C",))
        expected = (2 + len(self.bottlenecks)) * hidden
        if self.cv2.c_in != expected:
            raise DimensionError(f"exit conv takes {self.cv2.c_in} channels, expected {expected}", ("C",))

    @property
    def hidden(self) -> int:
        return self.cv1.c_out // 2

    @property
    def c_in(self) -> int:
        return self.cv1.c_in

    @property
    def c_out(self) -> int:
        return self.cv2.c_out

    @classmethod
    def create(
        cls,
        c_in: int,
        c_out: int,
        n: int = 1,
        shortcut: bool = False,
        expansion: float = 0.5,
        seed: Seed = 0,
        ema_groups: int | None = None,
    ):
        rng = _rng(seed)
        hidden = max(1, int(c_out * expansion))
        cv1 = ConvBlock.create(c_in, 2 * hidden, 1, seed=rng)
        blocks = tuple(Bottleneck.create(hidden, shortcut, seed=rng, ema_groups=ema_groups) for _ in range(n))
        cv2 = ConvBlock.create((2 + n) * hidden, c_out, 1, seed=rng)
        return cls(cv1, blocks, cv2, shortcut)

    def stages(self, x: np.ndarray) -> list[np.ndarray]:
        """Feature list fed to the exit conv: [half_a, half_b, m1, m2, ...]."""
        x = T.as_tensor(x)
        if x.shape[1] != self.c_in:
            raise DimensionError(f"input has {x.shape[1]} channels, block expects {self.c_in}", ("C",))
        ys = T.split(self.cv1(x), 2, axis=1)
        for m in self.bottlenecks:
            ys.append(m(ys[-1]))
        return ys

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.cv2(T.concat(self.stages(x), axis=1))


@dataclass(frozen=True)
class SPPFBlock:
    cv1: ConvBlock
    cv2: ConvBlock
    k: int = 5

    @classmethod
    def create(cls, c_in: int, c_out: int, k: int = 5, seed: Seed = 0):
        rng = _rng(seed)
        hidden = max(1, c_in // 2)
        return cls(ConvBlock.create(c_in, hidden, 1, seed=rng), ConvBlock.create(4 * hidden, c_out, 1, seed=rng), k)

    @property
    def c_in(self) -> int:
        return self.cv1.c_in

    @property
    def c_out(self) -> int:
        return self.cv2.c_out

    def pyramid(self, x: np.ndarray) -> list[np.ndarray]:
        """Entry-conv output followed by three cascaded max-pools."""
        y = [self.cv1(x)]
        for _ in range(3):
            y.append(T.pool(y[-1], "max2d", kernel=self.k, stride=1, padding=self.k // 2))
        return y

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = T.as_tensor(x)
        if x.shape[1] != self.c_in:
            raise DimensionError(f"input has {x.shape[1]} channels, block expects {self.c_in}", ("C",))
        return self.cv2(T.concat(self.pyramid(x), axis=1))


@dataclass(frozen=True)
class EMABlock:
    """Efficient multi-scale attention over channel groups.

    Every group of ``C // groups`` channels is processed with the same
    1x1 and 3x3 weights. No normalization is applied inside the block.
    """

    groups: int
    w1x1: np.ndarray
    b1x1: np.ndarray
    w3x3: np.ndarray
    b3x3: np.ndarray

    @property
    def channels_per_group(self) -> int:
        return self.w1x1.shape[0]

    @classmethod
    def create(cls, channels: int, groups: int | None = 8, seed: Seed = 0):
        groups = 8 if groups is None else groups
        if groups < 1 or channels % groups:
            raise DimensionError(f"channels {channels} not divisible by groups {groups}", ("C", "groups"))
        rng = _rng(seed)
        cg = channels // groups
        b1 = 1.0 / np.sqrt(cg)
        b3 = 1.0 / np.sqrt(cg * 9)
        return cls(
            groups,
            _uniform_weight(rng, cg, cg, 1),
            rng.uniform(-b1, b1, size=cg),
            _uniform_weight(rng, cg, cg, 3),
            rng.uniform(-b3, b3, size=cg),
        )

    def forward(self, x: np.ndarray, return_parts: bool = False):
        x = T.as_tensor(x)
        b, c, h, w = x.shape
        g = self.groups
        if c % g or c // g != self.channels_per_group:
            raise DimensionError(
                f"input has {c} channels; block expects {g} groups of {self.channels_per_group}", ("C", "groups")
            )
        cg = c // g
        gx = x.reshape(b * g, cg, h, w)

        # 1x1 branch: directional pooling, shared 1x1 conv, per-direction gates
        x_h = T.pool(gx, "avg_along_w")  # (BG, cg, H, 1)
        x_w = T.transpose(T.pool(gx, "avg_along_h"), (0, 1, 3, 2))  # (BG, cg, W, 1)
        hw = T.conv2d(T.concat([x_h, x_w], axis=2), self.w1x1, self.b1x1)
        gate_h, gate_w = (T.sigmoid(t) for t in T.split(hw, [h, w], axis=2))
        x1 = gx * gate_h * T.transpose(gate_w, (0, 1, 3, 2))

        # 3x3 branch
        x2 = T.conv2d(gx, self.w3x3, self.b3x3, padding=1)

        # cross-spatial fusion: channel softmax of one branch against the other's pixels
        a1 = T.softmax(T.pool(x1, "global_avg2d").reshape(b * g, 1, cg), axis=-1)
        a2 = T.softmax(T.pool(x2, "global_avg2d").reshape(b * g, 1, cg), axis=-1)
        map1 = T.matmul(a1, x2.reshape(b * g, cg, h * w))
        map2 = T.matmul(a2, x1.reshape(b * g, cg, h * w))
        weights = T.sigmoid((map1 + map2).reshape(b * g, 1, h, w))
        out = (gx * weights).reshape(b, c, h, w)
        if not return_parts:
            return out
        return out, {
            "gate_h": gate_h,
            "gate_w": gate_w,
            "softmax_1x1": a1,
            "softmax_3x3": a2,
            "map_1x1": map1.reshape(b * g, 1, h, w),
            "map_3x3": map2.reshape(b * g, 1, h, w),
            "spatial_gate": weights,
        }

    __call__ = forward


def c2f_ema(c_in: int, c_out: int, n: int = 1, shortcut: bool = False, groups: int = 8, seed: Seed = 0) -> C2fBlock:
    """C2f whose bottlenecks apply EMA to their residual branch before the add."""
    return C2fBlock.create(c_in, c_out, n=n, shortcut=shortcut, seed=seed, ema_groups=groups)


def c2f_forward(block: C2fBlock, x: np.ndarray) -> np.ndarray:
    return block(x)


def sppf_forward(block: SPPFBlock, x: np.ndarray) -> np.ndarray:
    return block(x)


def ema_forward(block: EMABlock, x: np.ndarray) -> np.ndarray:
    return block(x)


def c2f_ema_forward(block: C2fBlock, x: np.ndarray) -> np.ndarray:
    if not any(m.ema is not None for m in block.bottlenecks) and block.bottlenecks:
        raise ValueError("block has no EMA stage; use c2f_forward")
    return block(x)


_FACTORIES = {
    "conv": ConvBlock.create,
    "c2f": C2fBlock.create,
    "c2f_ema": c2f_ema,
    "sppf": SPPFBlock.create,
    "ema": EMABlock.create,
}


def init_params(kind: str, seed: int = 0, **config):
    """Build a block of the given kind with deterministic weights from ``seed``.

    >>> init_params("ema", seed=1, channels=64, groups=8).groups
    8
    """
    try:
        factory = _FACTORIES[kind]
    except KeyError:
        raise ValueError(f"unknown block kind {kind!r}; expected one of {sorted(_FACTORIES)}") from None
    return factory(seed=seed, **config)


def parameters(block) -> list[np.ndarray]:
    """Flat list of every parameter array in a block tree, in field order."""
    out: list[np.ndarray] = []
    if isinstance(block, np.ndarray):
        return [block]
    if isinstance(block, (tuple, list)):
        for item in block:
            out.extend(parameters(item))
        return out
    fields = getattr(block, "__dataclass_fields__", None)
    if fields:
        for name in fields:
            out.extend(parameters(getattr(block, name)))
    return out
