"""Convolutional-recurrent recognizer with a train-only CTC shortcut branch.

Backbone: 7×7 stem, then three cascades of 3×3 residual blocks separated by
2×2/2 max-pools (overall downscale 8). The feature map is flattened into a
sequence along the width, fed to stacked BiLSTMs and a linear projection.
"""
from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor

DOWNSCALE = 8


class ShortcutError(RuntimeError):
    """The auxiliary branch was used outside of training."""


@dataclass
class NetworkConfig:
    n_classes: int = 28
    canvas: tuple[int, int] = (128, 1024)
    in_channels: int = 1
    stem_kernel: int = 7
    stem_channels: int = 32
    block_counts: tuple[int, ...] = (2, 4, 4)
    block_channels: tuple[int, ...] = (64, 128, 256)
    dropout: float = 0.1
    flatten: str = "maxpool"  # or "concat"
    lstm_layers: int = 3
    hidden: int = 256
    shortcut: bool = True
    shortcut_input: str = "maxpool"  # sequence the shortcut reads; "main" follows `flatten`
    # conv weights use He (fan-in) normal
    conv_init: str = "he_normal"
    forget_bias: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        self.canvas = tuple(self.canvas)
        self.block_counts = tuple(self.block_counts)
        self.block_channels = tuple(self.block_channels)
        if len(self.block_counts) != len(self.block_channels) or len(self.block_counts) != 3:
            raise ValueError("three cascades are required (block_counts and block_channels of length 3)")
        h, w = self.canvas
        if h % DOWNSCALE or w % DOWNSCALE or h <= 0 or w <= 0:
            raise ValueError(f"canvas {h}x{w} is not divisible by the backbone downscale {DOWNSCALE}")
        if self.flatten not in ("maxpool", "concat"):
            raise ValueError(f"flatten must be 'maxpool' or 'concat', got {self.flatten!r}")
        if self.shortcut_input not in ("maxpool", "main"):
            raise ValueError(f"shortcut_input must be 'maxpool' or 'main', got {self.shortcut_input!r}")
        if self.n_classes < 2:
            raise ValueError("n_classes must count the blank plus at least one character")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def feature_height(self) -> int:
        return self.canvas[0] // DOWNSCALE

    @property
    def seq_len(self) -> int:
        return self.canvas[1] // DOWNSCALE

    @property
    def feature_dim(self) -> int:
        return self.block_channels[-1]

    def head_input(self) -> int:
        d = self.feature_dim
        return d * self.feature_height if self.flatten == "concat" else d

    def shortcut_dim(self) -> int:
        if self.shortcut_input == "main":
            return self.head_input()
        return self.feature_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "NetworkConfig":
        if name == "line":
            base = dict(canvas=(128, 1024))
        elif name == "word":
            base = dict(canvas=(64, 256))
        elif name == "tiny":
            base = dict(
                canvas=(32, 256),
                stem_channels=16,
                block_counts=(1, 1, 1),
                block_channels=(16, 32, 64),
                hidden=64,
                lstm_layers=1,
            )
        else:
            raise ValueError(f"unknown preset {name!r}")
        base.update(overrides)
        return cls(**base)


class Network:
    """Parameters, batch-norm statistics and the forward passes."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.bn: "OrderedDict[str, BatchNormState]" = OrderedDict()
        self.training = True
        self.rng = np.random.default_rng(seed)
        self.dropout_rng = np.random.default_rng([seed, 1])
        self._build()

    # ------------------------------------------------------------ construction
    def _add(self, name: str, arr: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _conv(self, name: str, cin: int, cout: int, k: int) -> None:
        fan_in = cin * k * k
        if self.cfg.conv_init == "he_normal":
            w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        elif self.cfg.conv_init == "he_uniform":
            lim = np.sqrt(6.0 / fan_in)
            w = self.rng.uniform(-lim, lim, size=(cout, cin, k, k))
        else:
            raise ValueError(f"unknown conv_init {self.cfg.conv_init!r}")
        self._add(name + ".weight", w)
        self._add(name + ".bias", np.zeros(cout))

    def _bn(self, name: str, ch: int) -> None:
        self._add(name + ".gamma", np.ones(ch))
        self._add(name + ".beta", np.zeros(ch))
        self.bn[name] = BatchNormState(ch, dtype=self.dtype)

    def _lstm(self, name: str, din: int, hidden: int) -> None:
        lim = 1.0 / np.sqrt(hidden)
        self._add(name + ".w_ih", self.rng.uniform(-lim, lim, size=(4 * hidden, din)))
        self._add(name + ".w_hh", self.rng.uniform(-lim, lim, size=(4 * hidden, hidden)))
        b = self.rng.uniform(-lim, lim, size=4 * hidden)
        b[hidden : 2 * hidden] = self.cfg.forget_bias
        self._add(name + ".bias", b)

    def _build(self) -> None:
        cfg = self.cfg
        self._conv("stem.conv", cfg.in_channels, cfg.stem_channels, cfg.stem_kernel)
        self._bn("stem.bn", cfg.stem_channels)
        cin = cfg.stem_channels
        self.blocks: list[tuple[str, bool]] = []
        for s, (count, cout) in enumerate(zip(cfg.block_counts, cfg.block_channels)):
            for b in range(count):
                name = f"stage{s}.block{b}"
                self._conv(name + ".conv1", cin, cout, 3)
                self._bn(name + ".bn1", cout)
                self._conv(name + ".conv2", cout, cout, 3)
                self._bn(name + ".bn2", cout)
                project = cin != cout
                if project:
                    self._conv(name + ".proj", cin, cout, 1)
                self.blocks.append((name, project))
                cin = cout
        din = cfg.head_input()
        for layer in range(cfg.lstm_layers):
            self._lstm(f"head.lstm{layer}.fwd", din, cfg.hidden)
            self._lstm(f"head.lstm{layer}.bwd", din, cfg.hidden)
            din = 2 * cfg.hidden
        lim = 1.0 / np.sqrt(din)
        self._add("head.proj.weight", self.rng.uniform(-lim, lim, size=(cfg.n_classes, din)))
        self._add("head.proj.bias", self.rng.uniform(-lim, lim, size=cfg.n_classes))
        if cfg.shortcut:
            d = cfg.shortcut_dim()
            lim = 1.0 / np.sqrt(3 * d)
            self._add("shortcut.weight", self.rng.uniform(-lim, lim, size=(cfg.n_classes, d, 3)))
            self._add("shortcut.bias", self.rng.uniform(-lim, lim, size=cfg.n_classes))

    # ------------------------------------------------------------ bookkeeping
    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    @property
    def has_shortcut(self) -> bool:
        return "shortcut.weight" in self.params

    def strip_shortcut(self) -> None:
        self.params.pop("shortcut.weight", None)
        self.params.pop("shortcut.bias", None)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def group(self, prefix: str) -> list[Tensor]:
        return [p for n, p in self.params.items() if n.startswith(prefix)]

    # ------------------------------------------------------------ forward
    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _conv_bn(self, x: Tensor, name: str, bn: str, padding: int) -> Tensor:
        x = T.conv2d(x, self._p(name + ".weight"), self._p(name + ".bias"), stride=1, padding=padding)
        return T.batchnorm(x, self._p(bn + ".gamma"), self._p(bn + ".beta"), self.bn[bn], self.training)

    def _dropout(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.cfg.dropout, self.training, self.dropout_rng)

    def _block(self, x: Tensor, name: str, project: bool) -> Tensor:
        y = T.relu(self._conv_bn(x, name + ".conv1", name + ".bn1", 1))
        y = self._conv_bn(y, name + ".conv2", name + ".bn2", 1)
        skip = x
        if project:
            skip = T.conv2d(x, self._p(name + ".proj.weight"), self._p(name + ".proj.bias"))
        return self._dropout(T.relu(T.add(y, skip)))

    def backbone_forward(self, images) -> Tensor:
        """B×1×H×W images -> B×d×H/8×W/8 feature map."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected B×{self.cfg.in_channels}×H×W images, got {x.shape}")
        if tuple(x.shape[2:]) != self.cfg.canvas:
            raise ValueError(f"image canvas {x.shape[2:]} does not match configured canvas {self.cfg.canvas}")
        pad = self.cfg.stem_kernel // 2
        x = self._dropout(T.relu(self._conv_bn(x, "stem.conv", "stem.bn", pad)))
        stage = -1
        for name, project in self.blocks:
            s = int(name[5 : name.index(".")])
            if s != stage:
                x = T.maxpool2d(x)
                stage = s
            x = self._block(x, name, project)
        return x

    def flatten(self, fmap: Tensor, mode: Optional[str] = None) -> Tensor:
        mode = mode or self.cfg.flatten
        return flatten_maxpool(fmap) if mode == "maxpool" else flatten_concat(fmap)

    def recurrent_head_forward(self, seq: Tensor) -> Tensor:
        """B×w×D sequence -> B×w×n_classes raw logits."""
        if seq.shape[-1] != self.cfg.head_input():
            raise ValueError(f"head expects {self.cfg.head_input()} features, got {seq.shape[-1]}")
        x = T.transpose(seq, (1, 0, 2))  # T×B×D
        for layer in range(self.cfg.lstm_layers):
            pre = f"head.lstm{layer}"
            fwd = [self._p(f"{pre}.fwd.{k}") for k in ("w_ih", "w_hh", "bias")]
            bwd = [self._p(f"{pre}.bwd.{k}") for k in ("w_ih", "w_hh", "bias")]
            x = T.bilstm_layer(x, fwd, bwd)
        x = T.transpose(x, (1, 0, 2))
        return T.linear(x, self._p("head.proj.weight"), self._p("head.proj.bias"))

    def shortcut_forward(self, seq: Tensor) -> Tensor:
        """B×w×d sequence -> B×w×n_classes logits via one kernel-3 conv; training only."""
        if not self.training:
            raise ShortcutError("the CTC shortcut is a training-only branch; it is never used for evaluation")
        if not self.has_shortcut:
            raise ShortcutError("this network has no shortcut parameters")
        x = T.transpose(seq, (0, 2, 1))
        y = T.conv1d(x, self._p("shortcut.weight"), self._p("shortcut.bias"), padding=1)
        return T.transpose(y, (0, 2, 1))

    def forward(self, images, with_shortcut: bool = False) -> tuple[Tensor, Optional[Tensor]]:
        fmap = self.backbone_forward(images)
        seq = self.flatten(fmap)
        main = self.recurrent_head_forward(seq)
        aux = None
        if with_shortcut:
            if self.cfg.shortcut_input == "maxpool" and self.cfg.flatten != "maxpool":
                aux_seq = flatten_maxpool(fmap)
            else:
                aux_seq = seq
            aux = self.shortcut_forward(aux_seq)
        return main, aux


def flatten_maxpool(fmap: Tensor) -> Tensor:
    """B×d×h×w -> B×w×d by taking the maximum down each column."""
    return T.transpose(T.max_over(fmap, axis=2), (0, 2, 1))


def flatten_concat(fmap: Tensor) -> Tensor:
    """B×d×h×w -> B×w×(h·d); features ordered row-major as (row, channel)."""
    b, d, h, w = fmap.shape
    x = T.transpose(fmap, (0, 3, 2, 1))  # B×w×h×d
    return T.reshape(x, (b, w, h * d))


def build_model(cfg: NetworkConfig, seed: int = 0) -> Network:
    return Network(cfg, seed)
