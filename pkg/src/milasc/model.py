"""CNN multi-instance network: instance generator, MTS, SD/MD heads, max aggregator."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import (BatchNorm, Conv1d, Conv2d, MaxPool2d, Module, ReLU, Sequential, ShapeError,
                 Sigmoid, Softmax)

HEADS = ("SD", "MD")

# name -> (head, mts)
VARIANTS = {
    "CNN-MIL": ("SD", False),
    "CNN-MTS-MIL": ("SD", True),
    "CNN-MD-MIL": ("MD", False),
    "CNN-MTS-MD-MIL": ("MD", True),
}

INSTANCE_STRIDE = 8
MTS_DILATIONS = (1, 2, 4)


@dataclass
class ModelConfig:
    head: str = "SD"
    mts: bool = False
    k: int = 4
    n_classes: int = 10
    channels: tuple[int, ...] = (32, 64, 128)
    instance_dim: int = 256
    input_shape: tuple[int, int] = (40, 500)
    seed: int = 0

    def __post_init__(self):
        self.head = self.head.upper()
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        self.channels = tuple(int(c) for c in self.channels)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if len(self.channels) != 3:
            raise ValueError("channels must list the three block widths")
        bands, frames = self.input_shape
        if bands // INSTANCE_STRIDE < 1 or frames // INSTANCE_STRIDE < 1:
            raise ValueError(f"input shape {self.input_shape} too small for three 2x2 pools")

    @property
    def name(self) -> str:
        parts = ["CNN"] + (["MTS"] if self.mts else []) + (["MD"] if self.head == "MD" else [])
        return "-".join(parts + ["MIL"])

    @property
    def n_instances(self) -> int:
        return self.input_shape[1] // INSTANCE_STRIDE

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def variant(cls, name: str, **kw) -> "ModelConfig":
        head, mts = VARIANTS[name]
        return cls(head=head, mts=mts, **kw)


@dataclass
class Prediction:
    """Bag scores (B, C), instance scores (B, C, m) and the argmax instance per class."""

    bag_scores: np.ndarray
    instance_scores: np.ndarray
    argmax: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.argmax is None:
            self.argmax = self.instance_scores.argmax(axis=-1)

    def __len__(self):
        return self.bag_scores.shape[0]


def _conv_bn_relu(conv: Module, width: int) -> list[Module]:
    return [conv, BatchNorm(width), ReLU()]


class InstanceGenerator(Module):
    """(B, 1, bands, frames) -> bag of instances (B, instance_dim, frames // 8)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.bands = config.input_shape[0]
        # the spectrogram itself gets BN + ReLU, like every conv output
        self.input_stage = self.add("input", Sequential(BatchNorm(1), ReLU()))
        layers: list[Module] = []
        prev = 1
        for width in config.channels:
            layers += _conv_bn_relu(Conv2d(prev, width, (3, 3), (1, 1), rng), width)
            layers += _conv_bn_relu(Conv2d(width, width, (3, 3), (1, 1), rng), width)
            layers.append(MaxPool2d())
            prev = width
        height = self.bands // INSTANCE_STRIDE
        layers += _conv_bn_relu(Conv2d(prev, config.instance_dim, (height, 1), (0, 0), rng),
                                config.instance_dim)
        self.body = self.add("body", Sequential(*layers))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.bands:
            raise ShapeError(f"instance generator expects (batch, 1, {self.bands}, T), "
                             f"got {x.shape}")
        h = self.input_stage.forward(x)
        h = self.body.forward(h)
        return h[:, :, 0, :]

    def backward(self, g):
        g = self.body.backward(g[:, :, None, :])
        return self.input_stage.backward(g)


class MTS(Module):
    """Dilated conv stack (r = 1, 2, 4) whose input and three outputs are
    concatenated on the feature axis and fused by a size-1 convolution."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.dim = dim
        self.stages = [self.add(f"dilated{r}", Sequential(
            Conv1d(dim, dim, 3, r, "same", rng), BatchNorm(dim), ReLU())) for r in MTS_DILATIONS]
        self.fuse = self.add("fuse", Conv1d(dim * (len(MTS_DILATIONS) + 1), dim, 1, rng=rng))

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] < 9:
            raise ShapeError(f"MTS expects (batch, dim, m>=9), got {x.shape}")
        maps = [x]
        for stage in self.stages:
            maps.append(stage.forward(maps[-1]))
        return self.fuse.forward(np.concatenate(maps, axis=1))

    def backward(self, g):
        gcat = self.fuse.backward(g)
        parts = np.split(gcat, len(self.stages) + 1, axis=1)
        carry = parts[-1]
        for i in range(len(self.stages) - 1, -1, -1):
            carry = self.stages[i].backward(carry) + parts[i]
        return carry


class SDHead(Module):
    """One sigmoid detector per class: a size-1 conv with C filters."""

    def __init__(self, dim: int, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.body = self.add("body", Sequential(Conv1d(dim, n_classes, 1, rng=rng), Sigmoid()))

    def forward(self, x):
        return self.body.forward(x)

    def backward(self, g):
        return self.body.backward(g)


class MDHead(Module):
    """K affine sub-detectors per class, max over K, softmax over classes."""

    def __init__(self, dim: int, n_classes: int, k: int, rng: np.random.Generator):
        super().__init__()
        self.n_classes, self.k = n_classes, k
        self.detectors = self.add("detectors", Conv1d(dim, n_classes * k, 1, rng=rng))
        self.softmax = self.add("softmax", Softmax(axis=1))

    def forward(self, x):
        a = self.detectors.forward(x)
        b, _, m = a.shape
        a = a.reshape(b, self.n_classes, self.k, m)
        self._best = a.argmax(axis=2)
        evidence = np.take_along_axis(a, self._best[:, :, None, :], axis=2)[:, :, 0, :]
        return self.softmax.forward(evidence)

    def backward(self, g):
        ge = self.softmax.backward(g)
        b, c, m = ge.shape
        ga = np.zeros((b, c, self.k, m))
        np.put_along_axis(ga, self._best[:, :, None, :], ge[:, :, None, :], axis=2)
        return self.detectors.backward(ga.reshape(b, c * self.k, m))

    def pattern(self):
        return [self._best]


class MaxAggregator(Module):
    """Bag score per class = max over instances; gradient goes to the argmax."""

    def forward(self, inst):
        self._shape = inst.shape
        self._argmax = inst.argmax(axis=-1)
        return np.take_along_axis(inst, self._argmax[..., None], axis=-1)[..., 0]

    def backward(self, g):
        out = np.zeros(self._shape)
        np.put_along_axis(out, self._argmax[..., None], g[..., None], axis=-1)
        return out

    def pattern(self):
        return [self._argmax]


def aggregate(instance_scores: np.ndarray) -> Prediction:
    inst = np.asarray(instance_scores, dtype=np.float64)
    argmax = inst.argmax(axis=-1)
    bag = np.take_along_axis(inst, argmax[..., None], axis=-1)[..., 0]
    return Prediction(bag, inst, argmax)


def classify(pred: Prediction | np.ndarray) -> np.ndarray:
    """Argmax over bag scores; ties go to the lowest class index."""
    scores = pred.bag_scores if isinstance(pred, Prediction) else np.asarray(pred)
    return scores.argmax(axis=-1)


class MILNetwork(Module):
    """Full network for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.instance_dim
        self.generator = self.add("generator", InstanceGenerator(config, rng))
        self.mts = self.add("mts", MTS(d, rng)) if config.mts else None
        if config.head == "SD":
            self.head = self.add("head", SDHead(d, config.n_classes, rng))
        else:
            self.head = self.add("head", MDHead(d, config.n_classes, config.k, rng))
        self.aggregator = self.add("aggregator", MaxAggregator())

    def instances(self, x) -> np.ndarray:
        x = self._prep(x)
        bag = self.generator.forward(x)
        return self.mts.forward(bag) if self.mts is not None else bag

    def forward(self, x) -> Prediction:
        inst = self.head.forward(self.instances(x))
        bag = self.aggregator.forward(inst)
        return Prediction(bag, inst, self.aggregator._argmax)

    def backward(self, grad_bag: np.ndarray) -> np.ndarray:
        g = self.aggregator.backward(grad_bag)
        g = self.head.backward(g)
        if self.mts is not None:
            g = self.mts.backward(g)
        return self.generator.backward(g)

    @staticmethod
    def _prep(x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[:, None]
        return x

    def n_parameters(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())
