"""Network assembly, deploy conversion, parameter accounting and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .blocks import (
    DilatedReparamBlock,
    DySampleUpsampler,
    GatedUniPoseBlock,
    GlaceEmbed,
    PlainDownsample,
)
from .exceptions import CheckpointError, ConfigError, ShapeError, StateError
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Module
from .tensor import ConvSpec, Tensor

HEATMAP_STRIDE = 4
DECODER_ENTRY_STRIDE = 16


@dataclass
class ModelConfig:
    """Complete architectural description; ``build_model`` is a pure function of it."""

    input_size: tuple = (256, 192)
    joints: int = 17
    stem_channels: int | None = None
    stem_stride: int = 4
    stage_channels: tuple = (16, 32, 64, 128)
    stage_depths: tuple = (1, 1, 1, 1)
    stage_kernels: tuple = (7, 7, 5, 3)
    decoder_channels: int = 256
    heatmap_size: tuple | None = None
    use_gconv: bool = True
    use_glace: bool = True
    use_dysample: bool = True
    offset_range: float = 0.25
    se_ratio: int = 4
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.stage_channels = tuple(int(v) for v in self.stage_channels)
        self.stage_depths = tuple(int(v) for v in self.stage_depths)
        kernels = []
        for k in self.stage_kernels:
            kernels.append(tuple(int(v) for v in k) if isinstance(k, (list, tuple)) else int(k))
        self.stage_kernels = tuple(kernels)
        if self.heatmap_size is None and len(self.input_size) == 2:
            self.heatmap_size = tuple(v // HEATMAP_STRIDE for v in self.input_size)
        elif self.heatmap_size is not None:
            self.heatmap_size = tuple(int(v) for v in self.heatmap_size)
        if self.stem_channels is None and self.stage_channels:
            self.stem_channels = self.stage_channels[0]

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def total_stride(self) -> int:
        return self.stem_stride * 2 ** (self.num_stages - 1)

    def block_kernels(self, stage: int) -> tuple:
        k = self.stage_kernels[stage]
        if isinstance(k, tuple):
            return k
        return (k,) * self.stage_depths[stage]

    def validate(self) -> "ModelConfig":
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigError("input_size", f"expected two positive extents, got {self.input_size}")
        if self.joints < 1:
            raise ConfigError("joints", "must be >= 1")
        n = self.num_stages
        if n < 1:
            raise ConfigError("stage_channels", "at least one stage is required")
        if len(self.stage_depths) != n:
            raise ConfigError("stage_depths", f"expected {n} entries, got {len(self.stage_depths)}")
        if len(self.stage_kernels) != n:
            raise ConfigError("stage_kernels", f"expected {n} entries, got {len(self.stage_kernels)}")
        if min(self.stage_depths) < 1:
            raise ConfigError("stage_depths", "every stage needs at least one block")
        if min(self.stage_channels) < 1:
            raise ConfigError("stage_channels", "channel counts must be positive")
        if any(b < a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigError("stage_channels", f"must be non-decreasing, got {self.stage_channels}")
        if self.stem_channels != self.stage_channels[0]:
            raise ConfigError("stem_channels", "must equal the first stage's channel count")
        for i in range(n):
            ks = self.block_kernels(i)
            if len(ks) != self.stage_depths[i]:
                raise ConfigError("stage_kernels", f"stage {i}: {len(ks)} kernels for depth {self.stage_depths[i]}")
            for k in ks:
                if k < 1 or k % 2 == 0:
                    raise ConfigError("stage_kernels", f"kernel sizes must be odd, got {k} in stage {i}")
        if self.stem_stride not in (2, 4, 8, 16):
            raise ConfigError("stem_stride", f"must be one of 2, 4, 8, 16, got {self.stem_stride}")
        step = max(self.total_stride, DECODER_ENTRY_STRIDE)
        for extent in self.input_size:
            if extent % step:
                raise ConfigError("input_size", f"{self.input_size} not divisible by total stride {step}")
        expected = tuple(v // HEATMAP_STRIDE for v in self.input_size)
        if self.heatmap_size != expected:
            raise ConfigError("heatmap_size", f"must equal input_size / {HEATMAP_STRIDE} = {expected}")
        if self.decoder_channels < 1:
            raise ConfigError("decoder_channels", "must be positive")
        if self.offset_range <= 0:
            raise ConfigError("offset_range", "must be positive")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown model key")
        return cls(**data)


PRESETS = {
    "toy": dict(
        input_size=(64, 64), joints=4, stem_stride=4,
        stage_channels=(16, 32, 64, 128), stage_depths=(1, 1, 1, 1),
        stage_kernels=(7, 7, 5, 3), decoder_channels=32,
    ),
    "paper": dict(
        input_size=(256, 192), joints=17, stem_stride=2,
        stage_channels=(768, 768, 768, 768), stage_depths=(1, 1, 1, 1),
        stage_kernels=(13, 13, 13, 13), decoder_channels=256,
    ),
}


class Stage(Module):
    def __init__(self, down, blocks):
        self.down = down
        self.blocks = blocks

    def forward(self, x):
        if self.down is not None:
            x = self.down(x)
        for block in self.blocks:
            x = block(x)
        return x


class Head(Module):
    """Bring every stage output to stage-1 resolution, concatenate, fuse with a 1x1 conv."""

    def __init__(self, config: ModelConfig):
        self.use_dysample = config.use_dysample
        self.factors = [2 ** i for i in range(config.num_stages)]
        if config.use_dysample:
            self.up = [DySampleUpsampler(c, f, config.offset_range)
                       for c, f in zip(config.stage_channels[1:], self.factors[1:])]
        self.fuse = Conv2d(ConvSpec(sum(config.stage_channels), config.decoder_channels, 1))

    def upsample(self, i: int, x: Tensor) -> Tensor:
        if i == 0:
            return x
        if self.use_dysample:
            return self.up[i - 1](x)
        return T.bilinear_upsample(x, self.factors[i])

    def forward(self, features):
        if len(features) != len(self.factors):
            raise ShapeError(f"head expects {len(self.factors)} stage maps, got {len(features)}")
        ups = [self.upsample(i, f) for i, f in enumerate(features)]
        target = ups[0].shape[2:]
        for i, u in enumerate(ups):
            if u.shape[2:] != target:
                raise ShapeError(f"stage {i} upsampled to {u.shape[2:]}, expected {target}")
        return self.fuse(T.concat_channels(ups))


class Decoder(Module):
    """Deconv -> Deconv -> 1x1 conv, BN + GELU after each deconv."""

    def __init__(self, in_channels: int, channels: int, joints: int):
        self.deconv1 = ConvTranspose2d(ConvSpec(in_channels, channels, 4, 2, 1, has_bias=False))
        self.norm1 = BatchNorm2d(channels)
        self.deconv2 = ConvTranspose2d(ConvSpec(channels, channels, 4, 2, 1, has_bias=False))
        self.norm2 = BatchNorm2d(channels)
        self.final = Conv2d(ConvSpec(channels, joints, 1))

    def forward(self, x):
        x = T.gelu(self.norm1(self.deconv1(x)))
        x = T.gelu(self.norm2(self.deconv2(x)))
        return self.final(x)


class GatedUniPoseModel(Module):
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.deployed = False
        c = config.stage_channels
        if config.use_glace:
            self.stem = GlaceEmbed(3, c[0], config.stem_stride, stem=True)
        else:
            self.stem = PlainDownsample(3, c[0], config.stem_stride)
        stages = []
        for i in range(config.num_stages):
            down = None
            if i > 0:
                down = GlaceEmbed(c[i - 1], c[i], 2, stem=False) if config.use_glace else PlainDownsample(c[i - 1], c[i], 2)
            blocks = [GatedUniPoseBlock(c[i], k, config.use_gconv, config.se_ratio) for k in config.block_kernels(i)]
            stages.append(Stage(down, blocks))
        self.stages = stages
        self.head = Head(config)
        self.pool = DECODER_ENTRY_STRIDE // config.stem_stride
        self.decoder = Decoder(config.decoder_channels, config.decoder_channels, config.joints)

    def features(self, images: Tensor):
        expected = (3,) + self.config.input_size
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ShapeError(f"expected images of shape [N, {', '.join(map(str, expected))}], got {images.shape}")
        x = self.stem(images)
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out

    def forward(self, images: Tensor) -> Tensor:
        fused = self.head(self.features(images))
        return self.decoder(T.avg_pool2d(fused, self.pool))

    def predict(self, images) -> np.ndarray:
        """Eval-mode heatmaps for an array of images, without graph recording."""
        images = images if isinstance(images, Tensor) else Tensor(images)
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                return self(images).data
        finally:
            self.train(was_training)


def build_model(config: ModelConfig) -> GatedUniPoseModel:
    model = GatedUniPoseModel(config)
    model.reset_parameters(config.seed)
    return model


def head_fuse(model: GatedUniPoseModel, stage_features) -> Tensor:
    return model.head(stage_features)


def forward(model: GatedUniPoseModel, images: Tensor) -> Tensor:
    return model(images)


def reparam_blocks(model: Module):
    return [m for _, m in model.named_modules() if isinstance(m, DilatedReparamBlock)]


def switch_to_deploy(model: GatedUniPoseModel) -> GatedUniPoseModel:
    """Merge every dilated re-parameterisable block in place (eval mode only)."""
    if model.training:
        raise StateError("switch_to_deploy requires eval mode; call model.eval() first")
    for block in reparam_blocks(model):
        if not block.deployed:
            block.merge()
    model.deployed = True
    return model


def parameter_breakdown(model: Module) -> dict:
    """Parameter counts grouped by top-level submodule, plus ``total``."""
    counts: dict = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        counts[top] = counts.get(top, 0) + p.size
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"GUPZ"
VERSION = 1
_DTYPE_TAGS = {0: "<f4", 1: "<f8", 2: "u1", 3: "<i8"}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2, np.dtype("int64"): 3}
CONFIG_RECORD = "__config__"
DEPLOYED_RECORD = "__deployed__"


def _records(model: GatedUniPoseModel):
    text = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    yield CONFIG_RECORD, np.frombuffer(text, dtype=np.uint8)
    yield DEPLOYED_RECORD, np.array([int(model.deployed)], dtype=np.uint8)
    for name, p in model.named_parameters():
        yield name, p.data
    for name, arr in model.named_buffers():
        yield name, arr


def write_records(path, records) -> None:
    """Serialise (name, array) pairs in the checkpoint container format."""
    records = list(records)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records:
        arr = np.ascontiguousarray(arr)
        key = name.encode()
        tag = _TAG_OF[arr.dtype]
        chunks.append(struct.pack("<I", len(key)) + key)
        chunks.append(struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype(_DTYPE_TAGS[tag], copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def save_checkpoint(model: GatedUniPoseModel, path) -> None:
    write_records(path, _records(model))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> dict:
    """Parse a checkpoint file into an ordered {name: array} mapping."""
    blob = Path(path).read_bytes()
    r = _Reader(blob, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (expected {VERSION})")
    out = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I", "record name length")
        name = r.take(name_len, "record name").decode()
        tag, rank = r.unpack("<BB", f"header of {name}")
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{path}: record {name} has unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}I", f"extents of {name}")
        dtype = np.dtype(_DTYPE_TAGS[tag])
        nbytes = int(np.prod(shape)) * dtype.itemsize
        out[name] = np.frombuffer(r.take(nbytes, f"data of {name}"), dtype=dtype).reshape(shape).copy()
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return out


def load_checkpoint(path) -> GatedUniPoseModel:
    records = read_checkpoint(path)
    for key in (CONFIG_RECORD, DEPLOYED_RECORD):
        if key not in records:
            raise CheckpointError(f"{path}: missing record {key}")
    config = ModelConfig.from_dict(json.loads(records.pop(CONFIG_RECORD).tobytes().decode()))
    deployed = bool(records.pop(DEPLOYED_RECORD)[0])
    model = GatedUniPoseModel(config)
    if deployed:
        model.eval()
        switch_to_deploy(model)
    params = dict(model.named_parameters())
    buffers = {}
    for mod_name, module in model.named_modules():
        for key, _ in module._local_buffers():
            buffers[f"{mod_name}.{key}" if mod_name else key] = (module, key)
    for name, arr in records.items():
        if name in params:
            p = params.pop(name)
            if arr.shape != p.shape:
                raise CheckpointError(f"{path}: parameter {name} has shape {arr.shape}, model expects {p.shape}")
            p.data = arr.astype(T.get_dtype(), copy=True)
        elif name in buffers:
            module, key = buffers.pop(name)
            module.set_buffer(key, arr)
        else:
            raise CheckpointError(f"{path}: unknown parameter name {name}")
    missing = sorted(params) + sorted(buffers)
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks {missing[0]}" + (f" and {len(missing) - 1} more" if len(missing) > 1 else ""))
    model.eval()
    return model
