"""The 18-layer video ResNets (R3D, MC3, R(2+1)D), their attention
variants, parameter audits and checkpoints."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, fields
from decimal import ROUND_DOWN, ROUND_HALF_UP, Decimal
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, container, rng
from .attention import CBAMBlock, MultiHeadAttn, SEBlock, TCNBlock
from .errors import CheckpointError, ConfigError, ContainerError, NumericError, ShapeError
from .nn.functional import midplanes
from .nn.layers import BatchNorm3d, Conv3d, Dropout, Linear, ReLU, pool_linear_dropout
from .nn.module import Module, Sequential
from .tensor import Tensor, add, relu

BASE_WIDTHS = (64, 128, 256, 512)
STEM_MIDPLANES = 45


class Backbone(str, Enum):
    R3D = "r3d"
    MC3 = "mc3"
    R2PLUS1D = "r2plus1d"

    @property
    def display(self) -> str:
        return {"r3d": "M-R3D", "mc3": "M-MC3", "r2plus1d": "M-R(2+1)D"}[self.value]


class Variant(str, Enum):
    BACKBONE = "backbone"
    FC_SPATIAL = "fc-spatial"
    FC_TEMPORAL = "fc-temporal"
    THREE_SE = "3-se"
    THREE_TEMPORAL = "3-temporal"
    THREE_BOTH = "3-both"
    THREE_CBAM = "3-cbam"
    THREE_TCN = "3-tcn"
    ALL_SE = "all-se"
    ALL_TEMPORAL = "all-temporal"
    ALL_TOGETHER = "all-together"

    @property
    def display(self) -> str:
        return _DISPLAY[self]


_DISPLAY = {
    Variant.BACKBONE: None,
    Variant.FC_SPATIAL: "FC-Spatial",
    Variant.FC_TEMPORAL: "FC-Temporal",
    Variant.THREE_SE: "3-SE",
    Variant.THREE_TEMPORAL: "3-Temporal",
    Variant.THREE_BOTH: "3-Both",
    Variant.THREE_CBAM: "3-CBAM",
    Variant.THREE_TCN: "3-TCN",
    Variant.ALL_SE: "All-SE",
    Variant.ALL_TEMPORAL: "All-Temporal",
    Variant.ALL_TOGETHER: "All-Together",
}

# Convolution kind per residual stage.
STAGE_KINDS = {
    Backbone.R3D: ("3d", "3d", "3d", "3d"),
    Backbone.MC3: ("3d", "2d", "2d", "2d"),
    Backbone.R2PLUS1D: ("2plus1d",) * 4,
}

# Declared (t, h, w) strides: stem, layer1..layer4.
STRIDE_TABLE = {
    Backbone.R3D: ((1, 2, 2), (1, 1, 1), (2, 2, 2), (2, 2, 2), (2, 2, 2)),
    Backbone.MC3: ((1, 2, 2), (1, 1, 1), (1, 2, 2), (1, 2, 2), (1, 2, 2)),
    Backbone.R2PLUS1D: ((1, 2, 2), (1, 1, 1), (2, 2, 2), (2, 2, 2), (2, 2, 2)),
}


def _parse_scale(value) -> Fraction:
    if isinstance(value, str):
        return Fraction(value)
    if isinstance(value, float):
        return Fraction(value).limit_denominator(1 << 16)
    return Fraction(value)


@dataclass(frozen=True)
class ModelConfig:
    backbone: Backbone
    variant: Variant = Variant.BACKBONE
    classes: int = 101
    width_scale: Fraction = Fraction(1)
    frames: int = 16
    side: int = 224
    heads: int = 4
    se_reduction: int = 2
    cbam_reduction: int = 16
    cbam_kernel: tuple[int, int, int] = (7, 7, 7)
    mha_layer_norm: bool = False
    mha_positional: bool = False
    dropout: float = 0.4
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "backbone", Backbone(self.backbone))
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "width_scale", _parse_scale(self.width_scale))
        object.__setattr__(self, "cbam_kernel", tuple(int(k) for k in self.cbam_kernel))
        if self.classes < 1:
            raise ConfigError("classes must be positive")
        if not 0 < self.width_scale <= 1:
            raise ConfigError(f"width_scale must lie in (0, 1], got {self.width_scale}")
        if self.frames < 1 or self.side < 1:
            raise ConfigError("frames and side must be positive")
        for w in self.widths:
            if w < 8:
                raise ConfigError(f"scaled width {w} is below 8")
            if w % self.heads:
                raise ConfigError(f"scaled width {w} is not divisible by {self.heads} heads")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(_round_half_up(self.width_scale * w) for w in BASE_WIDTHS)

    @property
    def stem_midplanes(self) -> int:
        return max(1, _round_half_up(self.width_scale * STEM_MIDPLANES))

    @property
    def name(self) -> str:
        return self.backbone.display if self.variant is Variant.BACKBONE else self.variant.display

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Enum):
                v = v.value
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out[f.name] = str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.name in ("backbone", "variant"):
                kwargs[f.name] = raw
            elif f.name == "width_scale":
                kwargs[f.name] = Fraction(raw)
            elif f.name == "cbam_kernel":
                kwargs[f.name] = tuple(int(x) for x in str(raw).split(","))
            elif f.name in ("mha_layer_norm", "mha_positional"):
                kwargs[f.name] = str(raw).lower() in ("1", "true", "yes")
            elif f.name in ("dropout", "bn_eps", "bn_momentum"):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**kwargs)


def _round_half_up(x) -> int:
    return math.floor(Fraction(x) + Fraction(1, 2))


# -- building blocks ---------------------------------------------------

def conv_unit(kind: str, cin: int, cout: int, mid: int, stride: int, bn: dict) -> Module:
    if kind == "3d":
        return Conv3d(cin, cout, 3, stride=stride, padding=1)
    if kind == "2d":
        return Conv3d(cin, cout, (1, 3, 3), stride=(1, stride, stride), padding=(0, 1, 1))
    if kind == "2plus1d":
        return Sequential(
            Conv3d(cin, mid, (1, 3, 3), stride=(1, stride, stride), padding=(0, 1, 1)),
            BatchNorm3d(mid, **bn),
            ReLU(),
            Conv3d(mid, cout, (3, 1, 1), stride=(stride, 1, 1), padding=(1, 0, 0)),
        )
    raise ConfigError(f"unknown conv kind {kind!r}")


class BasicBlock(Module):
    """Two convolution units with a residual connection; a strided 1x1x1
    projection shortcut when the shape changes."""

    def __init__(self, inplanes: int, planes: int, kind: str, stride: int = 1, bn: dict | None = None):
        super().__init__()
        bn = bn or {}
        mid = midplanes(3, 3, inplanes, planes)
        self.conv1 = Sequential(conv_unit(kind, inplanes, planes, mid, stride, bn), BatchNorm3d(planes, **bn), ReLU())
        self.conv2 = Sequential(conv_unit(kind, planes, planes, mid, 1, bn), BatchNorm3d(planes, **bn))
        self.downsample = None
        if stride != 1 or inplanes != planes:
            ds = (1, stride, stride) if kind == "2d" else (stride,) * 3
            self.downsample = Sequential(Conv3d(inplanes, planes, 1, stride=ds), BatchNorm3d(planes, **bn))

    def forward(self, x):
        residual = self.downsample(x) if self.downsample is not None else x
        return relu(add(self.conv2(self.conv1(x)), residual))

    def output_shape(self, shape):
        out = self.conv2.output_shape(self.conv1.output_shape(shape))
        res = self.downsample.output_shape(shape) if self.downsample is not None else shape
        if out != res:
            raise ShapeError(f"residual shape {res} does not match block output {out}")
        return out


def make_stem(cfg: ModelConfig, bn: dict) -> Sequential:
    w0 = cfg.widths[0]
    if cfg.backbone is Backbone.R2PLUS1D:
        mid = cfg.stem_midplanes
        return Sequential(
            Conv3d(3, mid, (1, 7, 7), stride=(1, 2, 2), padding=(0, 3, 3)),
            BatchNorm3d(mid, **bn),
            ReLU(),
            Conv3d(mid, w0, (3, 1, 1), stride=1, padding=(1, 0, 0)),
            BatchNorm3d(w0, **bn),
            ReLU(),
        )
    return Sequential(
        Conv3d(3, w0, (3, 7, 7), stride=(1, 2, 2), padding=(1, 3, 3)),
        BatchNorm3d(w0, **bn),
        ReLU(),
    )


def inserted_blocks(cfg: ModelConfig) -> dict[str, list[Module]]:
    """Attention modules per insertion site for ``cfg.variant``.

    Sites: ``attn1``..``attn3`` sit after the second residual block of
    layer1..layer3; ``attn_final`` sits after layer4, before pooling.
    """
    w = cfg.widths
    v = cfg.variant
    sites: dict[str, list[Module]] = {"attn1": [], "attn2": [], "attn3": [], "attn_final": []}
    if v is Variant.BACKBONE:
        return sites

    def se(c):
        return SEBlock(c, cfg.se_reduction)

    def mha(c, mode="temporal"):
        return MultiHeadAttn(c, cfg.heads, mode, cfg.mha_layer_norm, cfg.mha_positional)

    sites["attn_final"] = [mha(w[3], "spatial" if v is Variant.FC_SPATIAL else "temporal")]
    three = {
        Variant.THREE_SE: lambda c: [se(c)],
        Variant.THREE_TEMPORAL: lambda c: [mha(c)],
        Variant.THREE_BOTH: lambda c: [se(c), mha(c)],
        Variant.THREE_CBAM: lambda c: [CBAMBlock(c, cfg.cbam_reduction, cfg.cbam_kernel)],
        Variant.THREE_TCN: lambda c: [TCNBlock(c)],
    }
    every = {
        Variant.ALL_SE: lambda c: [se(c)],
        Variant.ALL_TEMPORAL: lambda c: [mha(c)],
        Variant.ALL_TOGETHER: lambda c: [se(c), mha(c)],
    }
    if v in three:
        sites["attn3"] = three[v](w[2])
    elif v in every:
        for i in range(3):
            sites[f"attn{i + 1}"] = every[v](w[i])
    return sites


def inserted_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of the attention blocks of ``cfg``,
    computed without building any module."""
    w = cfg.widths
    v = cfg.variant
    if v is Variant.BACKBONE:
        return 0
    se = lambda c: SEBlock.param_count(c, cfg.se_reduction)  # noqa: E731
    mha = lambda c: MultiHeadAttn.param_count(c, cfg.mha_layer_norm)  # noqa: E731
    total = mha(w[3])
    per_site = {
        Variant.THREE_SE: lambda c: se(c),
        Variant.THREE_TEMPORAL: lambda c: mha(c),
        Variant.THREE_BOTH: lambda c: se(c) + mha(c),
        Variant.THREE_CBAM: lambda c: CBAMBlock.param_count(c, cfg.cbam_reduction, cfg.cbam_kernel),
        Variant.THREE_TCN: lambda c: TCNBlock.param_count(c),
        Variant.ALL_SE: lambda c: se(c),
        Variant.ALL_TEMPORAL: lambda c: mha(c),
        Variant.ALL_TOGETHER: lambda c: se(c) + mha(c),
    }
    if v in per_site:
        sites = w[:3] if v.value.startswith("all-") else (w[2],)
        total += sum(per_site[v](c) for c in sites)
    return total


class VideoNet(Module):
    STAGES = ("stem", "layer1", "attn1", "layer2", "attn2", "layer3", "attn3", "layer4", "attn_final")

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        bn = {"eps": cfg.bn_eps, "momentum": cfg.bn_momentum}
        w = cfg.widths
        kinds = STAGE_KINDS[cfg.backbone]
        sites = inserted_blocks(cfg)
        self.stem = make_stem(cfg, bn)
        inplanes = w[0]
        for i in range(4):
            stride = 1 if i == 0 else 2
            blocks = Sequential(
                BasicBlock(inplanes, w[i], kinds[i], stride, bn),
                BasicBlock(w[i], w[i], kinds[i], 1, bn),
            )
            setattr(self, f"layer{i + 1}", blocks)
            inplanes = w[i]
            if i < 3:
                setattr(self, f"attn{i + 1}", Sequential(*sites[f"attn{i + 1}"]))
        self.attn_final = Sequential(*sites["attn_final"])
        self.dropout = Dropout(cfg.dropout)
        self.fc = Linear(w[3], cfg.classes)
        self.stage_shapes = self._assert_geometry()

    def _assert_geometry(self) -> dict[str, tuple[int, ...]]:
        cfg = self.cfg
        shape = (1, 3, cfg.frames, cfg.side, cfg.side)
        declared = STRIDE_TABLE[cfg.backbone]
        shapes = {}
        expect = shape[2:]
        for name in self.STAGES:
            shape = getattr(self, name).output_shape(shape)
            shapes[name] = shape
            if name == "stem" or name.startswith("layer"):
                k = 0 if name == "stem" else int(name[-1])
                expect = tuple(-(-e // s) for e, s in zip(expect, declared[k]))
                if shape[2:] != expect:
                    raise ShapeError(f"{name} produces {shape[2:]}, stride table declares {expect}")
        return shapes

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        expected = (3, cfg.frames, cfg.side, cfg.side)
        if x.ndim != 5 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"model expects [N, {', '.join(map(str, expected))}], got {x.shape}")
        for name in self.STAGES:
            x = getattr(self, name)(x)
            if not np.isfinite(x.data).all():
                raise NumericError(f"non-finite activation after {name}", stage=name)
        logits = pool_linear_dropout(x, self.fc, self.dropout)
        if not np.isfinite(logits.data).all():
            raise NumericError("non-finite logits", stage="fc")
        return logits


def build_model(cfg: ModelConfig, seed: int = 0, init: bool = True) -> VideoNet:
    """Instantiate ``cfg``.  With ``init`` every conv/linear weight is
    Kaiming-uniform from its own stream ``(seed, INIT, module_index)``;
    without it parameters stay zero (enough for audits)."""
    model = VideoNet(cfg)
    model.dropout.gen = rng.stream(seed, rng.DROPOUT)
    if init:
        for i, (_, m) in enumerate(model.named_modules()):
            if hasattr(m, "reset_parameters"):
                m.reset_parameters((seed, rng.INIT, i))
    return model


def forward(model: VideoNet, batch, mode: str = "eval") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    if not isinstance(batch, Tensor):
        batch = Tensor(np.asarray(batch, dtype=np.float32))
    return model(batch)


# -- audit -------------------------------------------------------------

@dataclass
class ParamAudit:
    total: int
    millions: Decimal
    per_stage: dict[str, int] = field(default_factory=dict)

    @property
    def millions_str(self) -> str:
        return f"{self.millions:.2f}"


def millions_2dp(total: int, rounding: str = "half-up") -> Decimal:
    """Parameter count in millions with two decimals.

    ``half-up`` rounds half away from zero; ``truncate`` drops the rest.
    """
    mode = {"half-up": ROUND_HALF_UP, "truncate": ROUND_DOWN}[rounding]
    return (Decimal(total) / Decimal(1_000_000)).quantize(Decimal("0.01"), rounding=mode)


def param_audit(model: Module, rounding: str = "half-up") -> ParamAudit:
    per_stage: dict[str, int] = {}
    for name, p in model.named_parameters():
        stage = name.split(".", 1)[0]
        per_stage[stage] = per_stage.get(stage, 0) + p.size
    total = sum(per_stage.values())
    return ParamAudit(total, millions_2dp(total, rounding), per_stage)


# -- checkpoints -------------------------------------------------------

CKPT_MAGIC = b"AT3DCKPT\n"


def checkpoint_bytes(model: VideoNet, extra: dict[str, str] | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(f"# at3d {__version__}\n".encode())
    for k, v in (extra or {}).items():
        buf.write(f"# {k}={v}\n".encode())
    for k, v in model.cfg.to_dict().items():
        buf.write(f"{k}={v}\n".encode())
    buf.write(b"\n")
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        container.write_tensor(buf, arr)
    return buf.getvalue()


def checkpoint_save(model: VideoNet, path, extra: dict[str, str] | None = None) -> None:
    container.atomic_write(path, checkpoint_bytes(model, extra))


def _read_checkpoint(blob: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    fh = io.BytesIO(blob)
    if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise ContainerError("not an at3d checkpoint")
    header: dict[str, str] = {}
    while True:
        line = fh.readline()
        if not line.endswith(b"\n"):
            raise ContainerError("truncated checkpoint header")
        text = line.decode().rstrip("\n")
        if not text:
            break
        if text.startswith("#"):
            continue
        key, sep, value = text.partition("=")
        if not sep:
            raise ContainerError(f"malformed header line {text!r}")
        header[key] = value
    (count,) = struct.unpack("<I", container._read_exact(fh, 4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", container._read_exact(fh, 2))
        name = container._read_exact(fh, n).decode()
        tensors[name] = container.read_tensor(fh)
    if fh.read(1):
        raise ContainerError("trailing bytes after checkpoint")
    return header, tensors


def checkpoint_load(path, cfg: ModelConfig | None = None) -> VideoNet:
    """Rebuild a model from ``path``.  With ``cfg`` the stored tensors must
    match its topology exactly; otherwise the header config is used."""
    header, tensors = _read_checkpoint(Path(path).read_bytes())
    if cfg is None:
        cfg = ModelConfig.from_dict(header)
    model = build_model(cfg, init=False)
    own = model.state_dict()
    offending = sorted(
        set(own) ^ set(tensors)
        | {k for k in set(own) & set(tensors) if own[k].shape != tensors[k].shape}
    )
    if offending:
        raise CheckpointError(
            "checkpoint does not match model topology: " + ", ".join(offending), offending
        )
    model.load_state_dict(tensors)
    return model


def checkpoint_header(path) -> dict[str, str]:
    return _read_checkpoint(Path(path).read_bytes())[0]


def checkpoint_meta(path) -> dict[str, str]:
    """The ``# key=value`` comment lines of a checkpoint header (run
    settings recorded by the trainer)."""
    meta: dict[str, str] = {}
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ContainerError("not an at3d checkpoint")
        for line in fh:
            text = line.decode().rstrip("\n")
            if not text:
                break
            if text.startswith("# "):
                key, sep, value = text[2:].partition("=")
                if sep:
                    meta[key] = value
    return meta


__all__ = [
    "Backbone",
    "Variant",
    "ModelConfig",
    "VideoNet",
    "build_model",
    "forward",
    "param_audit",
    "millions_2dp",
    "inserted_blocks",
    "inserted_param_count",
    "checkpoint_save",
    "checkpoint_load",
    "checkpoint_header",
    "checkpoint_meta",
]
