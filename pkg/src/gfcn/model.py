"""GFCN topology: ConvBlocks, GateBlocks, height collapse, gated ending stack."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import functional as F
from .functional import NormKind, INSTANCE
from .tensor import Tensor

# GateBlock widths closest to the published ending-gate parameter sweep
# (16 parameters short per row; see audit.calibrate_channels).
TABLE_V_GATEBLOCK_FILTERS = (64, 64, 256, 128, 256)


def gateblock_count(input_height: int) -> int:
    """Number of GateBlocks needed so the collapse convolution sees height 2."""
    return int(np.log2(input_height)) - 1


def pool_schedule(n_gateblocks: int) -> list[tuple[int, int]]:
    return [(2, 2) if i < 2 else (2, 1) for i in range(n_gateblocks)]


@dataclass
class ArchitectureConfig:
    input_height: int = 64
    convblock_filters: tuple[int, ...] = (32, 64)
    gateblock_filters: tuple[int, ...] = TABLE_V_GATEBLOCK_FILTERS
    ending_gate_count: int = 6
    ending_channels: int = 256
    ending_kernel_width: int = 8
    charset_size: int = 79
    dropout_p: float = 0.4
    noise_std: float = 0.01
    norm_kind: NormKind = INSTANCE
    group_fallback: bool = False
    convblock_norm_affine: bool = True
    gateblock_norm_affine: bool = True
    convblock_bias: bool = True
    gateblock_bias: bool = True
    collapse_bias: bool = True
    head_bias: bool = False

    def __post_init__(self):
        self.convblock_filters = tuple(int(c) for c in self.convblock_filters)
        self.gateblock_filters = tuple(int(c) for c in self.gateblock_filters)
        if isinstance(self.norm_kind, str):
            self.norm_kind = NormKind.parse(self.norm_kind)

    @classmethod
    def for_height(cls, input_height: int, **kwargs) -> "ArchitectureConfig":
        """Config whose GateBlock count matches ``input_height``.

        Extra GateBlocks (e.g. the one added for 128-px input) repeat the last
        width; fewer GateBlocks keep the leading widths.
        """
        n = gateblock_count(input_height)
        base = tuple(kwargs.pop("gateblock_filters", TABLE_V_GATEBLOCK_FILTERS))
        widths = base[:n] + (base[-1],) * max(0, n - len(base))
        return cls(input_height=input_height, gateblock_filters=widths, **kwargs)

    @property
    def num_classes(self) -> int:
        return self.charset_size + 1

    def validate(self) -> None:
        if not 1 <= self.ending_gate_count <= 6:
            raise ValueError(f"ending_gate_count must be in [1, 6], got {self.ending_gate_count}")
        h = self.input_height
        if h < 8 or h & (h - 1):
            raise ValueError(f"input_height must be a power of two >= 8, got {h}")
        if len(self.convblock_filters) < 1:
            raise ValueError("at least one ConvBlock is required")
        if self.charset_size < 1:
            raise ValueError("charset_size must be >= 1")
        for i, c in enumerate(self.gateblock_filters):
            if c < 1:
                raise ValueError(f"gateblock {i + 1} width must be positive")
        # walk the height schedule; it must leave exactly height 2 for the collapse DSC
        height = h
        for i, (ph, _) in enumerate(pool_schedule(len(self.gateblock_filters))):
            if height < ph:
                raise ValueError(f"gb{i + 1}.pool: height {height} cannot be pooled by {ph}")
            height //= ph
        if height != 2:
            raise ValueError(
                f"collapse: height schedule with {len(self.gateblock_filters)} GateBlocks leaves "
                f"height {height} before the 2x1 collapse convolution (need 2, i.e. "
                f"{gateblock_count(h)} GateBlocks for input height {h})"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    # -- serialisation -----------------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["norm_kind"] = str(self.norm_kind)
        d["convblock_filters"] = list(self.convblock_filters)
        d["gateblock_filters"] = list(self.gateblock_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown architecture keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_text(self) -> str:
        """Human-readable ``key = value`` document."""
        parser = configparser.ConfigParser()
        parser["architecture"] = {k: _format_value(v) for k, v in self.to_dict().items()}
        lines = []
        for k, v in parser["architecture"].items():
            lines.append(f"{k} = {v}")
        return "[architecture]\n" + "\n".join(lines) + "\n"

    @classmethod
    def from_section(cls, section) -> "ArchitectureConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        out = {}
        for key, raw in section.items():
            if key not in types:
                raise ValueError(f"unknown architecture key {key!r}")
            out[key] = _parse_value(key, raw, cls)
        return cls(**out)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def _parse_value(key: str, raw: str, cls):
    default = {f.name: f.default for f in dataclasses.fields(cls)}[key]
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "yes", "on", "1"):
            return True
        if raw.lower() in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.replace("[", "").replace("]", "").split(",") if x.strip())
    if isinstance(default, NormKind):
        return NormKind.parse(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


# -- layers ---------------------------------------------------------------------------


@dataclass
class LayerSpec:
    """Geometry of one layer, enough to audit parameters and receptive fields."""

    name: str
    kind: str
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int, int, int] = (0, 0, 0, 0)
    in_channels: int = 0
    out_channels: int = 0


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, Tensor] = {}
        self.training = True

    def spec(self) -> LayerSpec:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    # Kaiming-uniform with negative slope sqrt(5), i.e. bound 1/sqrt(fan_in).
    # Biases use the same bound: zero biases leave the sigmoid branch of every
    # gate zero-mean per channel, and training barely moves (see README).
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv(Layer):
    kind = "conv"

    def __init__(self, name, cin, cout, kernel, padding, rng, dtype, bias=True):
        super().__init__(name)
        self.kernel, self.padding = tuple(kernel), F._padding4(padding)
        self.cin, self.cout = cin, cout
        kh, kw = self.kernel
        fan_in = cin * kh * kw
        self.params["weight"] = Tensor(_fan_in_uniform(rng, (cout, cin, kh, kw), fan_in, dtype), True)
        if bias:
            self.params["bias"] = Tensor(_fan_in_uniform(rng, (cout,), fan_in, dtype), True)

    def forward(self, x):
        return F.conv2d(x, self.params["weight"], self.params.get("bias"), 1, self.padding)

    def spec(self):
        return LayerSpec(self.name, self.kind, self.kernel, (1, 1), self.padding, self.cin, self.cout)


class SeparableConv(Layer):
    kind = "dsc"

    def __init__(self, name, cin, cout, kernel, padding, rng, dtype, bias=True):
        super().__init__(name)
        self.kernel, self.padding = tuple(kernel), F._padding4(padding)
        self.cin, self.cout = cin, cout
        kh, kw = self.kernel
        p = self.params
        p["depthwise_weight"] = Tensor(_fan_in_uniform(rng, (cin, 1, kh, kw), kh * kw, dtype), True)
        if bias:
            p["depthwise_bias"] = Tensor(_fan_in_uniform(rng, (cin,), kh * kw, dtype), True)
        p["pointwise_weight"] = Tensor(_fan_in_uniform(rng, (cout, cin, 1, 1), cin, dtype), True)
        if bias:
            p["pointwise_bias"] = Tensor(_fan_in_uniform(rng, (cout,), cin, dtype), True)

    def forward(self, x):
        p = self.params
        return F.depthwise_separable_conv(
            x, p["depthwise_weight"], p.get("depthwise_bias"),
            p["pointwise_weight"], p.get("pointwise_bias"), 1, self.padding,
        )

    def spec(self):
        return LayerSpec(self.name, self.kind, self.kernel, (1, 1), self.padding, self.cin, self.cout)


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, name, kernel, channels):
        super().__init__(name)
        self.kernel, self.channels = tuple(kernel), channels

    def forward(self, x):
        return F.maxpool2d(x, self.kernel)

    def spec(self):
        return LayerSpec(self.name, self.kind, self.kernel, self.kernel, (0, 0, 0, 0), self.channels, self.channels)


class Activation(Layer):
    kind = "activation"

    def __init__(self, name, fn, channels):
        super().__init__(name)
        self.fn, self.channels = fn, channels

    def forward(self, x):
        return F.activation(x, self.fn)

    def spec(self):
        return LayerSpec(self.name, self.kind, in_channels=self.channels, out_channels=self.channels)


class Norm(Layer):
    kind = "norm"

    def __init__(self, name, channels, norm_kind: NormKind, affine, dtype, group_fallback=False):
        super().__init__(name)
        self.channels, self.norm_kind, self.group_fallback = channels, norm_kind, group_fallback
        if norm_kind.kind == "group":
            F.resolve_groups(channels, norm_kind.groups, group_fallback)
        if affine:
            self.params["weight"] = Tensor(np.ones(channels, dtype), True)
            self.params["bias"] = Tensor(np.zeros(channels, dtype), True)
        self.running_mean = np.zeros(channels, dtype) if norm_kind.kind == "batch" else None
        self.running_var = np.ones(channels, dtype) if norm_kind.kind == "batch" else None

    def forward(self, x):
        return F.normalize(
            x, self.norm_kind, self.params.get("weight"), self.params.get("bias"),
            training=self.training, running_mean=self.running_mean, running_var=self.running_var,
            group_fallback=self.group_fallback,
        )

    def spec(self):
        return LayerSpec(self.name, self.kind, in_channels=self.channels, out_channels=self.channels)


class Gate(Layer):
    kind = "gate"

    def __init__(self, name, channels):
        super().__init__(name)
        if channels % 2:
            raise ValueError(f"{name}: gate needs an even channel count, got {channels}")
        self.channels = channels

    def forward(self, x):
        return F.gate(x)

    def spec(self):
        return LayerSpec(self.name, self.kind, in_channels=self.channels, out_channels=self.channels // 2)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, name, p, channels, rng):
        super().__init__(name)
        self.p, self.channels, self.rng = p, channels, rng

    def forward(self, x):
        return F.dropout(x, self.p, self.training, self.rng)

    def spec(self):
        return LayerSpec(self.name, self.kind, in_channels=self.channels, out_channels=self.channels)


class GaussianNoise(Layer):
    kind = "noise"

    def __init__(self, name, std, channels, rng):
        super().__init__(name)
        self.std, self.channels, self.rng = std, channels, rng

    def forward(self, x):
        return F.gaussian_noise(x, self.std, self.training, self.rng)

    def spec(self):
        return LayerSpec(self.name, self.kind, in_channels=self.channels, out_channels=self.channels)


class LogSoftmax(Layer):
    """Softmax over channels, emitted in log space for CTC."""

    kind = "softmax"

    def __init__(self, name, channels):
        super().__init__(name)
        self.channels = channels

    def forward(self, x):
        return F.log_softmax_over_channels(x)

    def spec(self):
        return LayerSpec(self.name, self.kind, in_channels=self.channels, out_channels=self.channels)


# -- model ----------------------------------------------------------------------------


@dataclass
class Model:
    config: ArchitectureConfig
    layers: list[Layer]
    rng: np.random.Generator
    dtype: type = np.float32
    training: bool = field(default=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        """Log-probabilities of shape (B, charset_size + 1, 1, W // 4); blank is the last class."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"model input must be (B, 1, H, W), got {x.shape}")
        if x.shape[2] != self.config.input_height:
            raise ValueError(
                f"input height {x.shape[2]} does not match configured height {self.config.input_height}"
            )
        if x.shape[3] < 4:
            raise ValueError(f"input width {x.shape[3]} too small: at least 4 pixels give one frame")
        for layer in self.layers:
            x = layer(x)
        return x

    @property
    def blank_index(self) -> int:
        return self.config.charset_size

    def train(self) -> "Model":
        self.training = True
        for layer in self.layers:
            layer.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        for layer in self.layers:
            layer.training = False
        return self

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for layer in self.layers:
            for pname, p in layer.params.items():
                yield f"{layer.name}.{pname}", p

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            if isinstance(layer, Norm) and layer.running_mean is not None:
                out[f"{layer.name}.running_mean"] = layer.running_mean
                out[f"{layer.name}.running_var"] = layer.running_var
        return out

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def specs(self) -> list[LayerSpec]:
        return [layer.spec() for layer in self.layers]

    def layer_names(self) -> list[str]:
        return [layer.name for layer in self.layers]


def build_model(config: ArchitectureConfig | None = None, seed: int = 0, dtype=np.float32) -> Model:
    """Assemble the GFCN described by ``config``.

    Layer order: noise, ConvBlocks, GateBlocks, 2x1 height-collapse DSC,
    ``ending_gate_count`` x (1x8 DSC, gate, dropout), 1x1 conv, softmax.
    """
    config = config or ArchitectureConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    cfg = config
    layers: list[Layer] = [GaussianNoise("noise", cfg.noise_std, 1, rng)]
    c = 1
    for b, width in enumerate(cfg.convblock_filters, start=1):
        for k in (1, 2):
            layers.append(Conv(f"cb{b}.conv{k}", c, width, (3, 3), 1, rng, dtype, cfg.convblock_bias))
            layers.append(Activation(f"cb{b}.relu{k}", "relu", width))
            c = width
        layers.append(Norm(f"cb{b}.norm", c, cfg.norm_kind, cfg.convblock_norm_affine, dtype, cfg.group_fallback))
        layers.append(Dropout(f"cb{b}.dropout", cfg.dropout_p, c, rng))
    for b, (width, pool) in enumerate(zip(cfg.gateblock_filters, pool_schedule(len(cfg.gateblock_filters))), start=1):
        layers.append(SeparableConv(f"gb{b}.dsc1", c, width, (3, 3), 1, rng, dtype, cfg.gateblock_bias))
        layers.append(Activation(f"gb{b}.relu1", "relu", width))
        # second DSC doubles the width so the gate halves it back
        layers.append(SeparableConv(f"gb{b}.dsc2", width, 2 * width, (3, 3), 1, rng, dtype, cfg.gateblock_bias))
        layers.append(Activation(f"gb{b}.relu2", "relu", 2 * width))
        layers.append(Norm(f"gb{b}.norm", 2 * width, cfg.norm_kind, cfg.gateblock_norm_affine, dtype, cfg.group_fallback))
        layers.append(MaxPool(f"gb{b}.pool", pool, 2 * width))
        layers.append(Gate(f"gb{b}.gate", 2 * width))
        layers.append(Dropout(f"gb{b}.dropout", cfg.dropout_p, width, rng))
        c = width
    e = cfg.ending_channels
    layers.append(SeparableConv("collapse.dsc", c, e, (2, 1), 0, rng, dtype, cfg.collapse_bias))
    kw = cfg.ending_kernel_width
    # asymmetric "same" padding keeps W // 4 frames through the even-width kernels
    same = (0, 0, (kw - 1) // 2, kw // 2)
    for g in range(1, cfg.ending_gate_count + 1):
        layers.append(SeparableConv(f"end{g}.dsc", e, 2 * e, (1, kw), same, rng, dtype, True))
        layers.append(Gate(f"end{g}.gate", 2 * e))
        layers.append(Dropout(f"end{g}.dropout", cfg.dropout_p, e, rng))
    layers.append(Conv("head.conv", e, cfg.num_classes, (1, 1), 0, rng, dtype, cfg.head_bias))
    layers.append(LogSoftmax("head.softmax", cfg.num_classes))
    return Model(cfg, layers, rng, dtype)


def frames_for_width(width: int) -> int:
    return (width // 2) // 2


def conv_layer_count(specs: Sequence[LayerSpec]) -> int:
    """Convolutional layers, counting each separable conv once."""
    return sum(1 for s in specs if s.kind in ("conv", "dsc"))
