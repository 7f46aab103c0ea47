"""Model configurations, the three detector variants, and checkpoint IO.

All variants share one pipeline: channel-chirp merge, temporal
downsampling to a single frame, a two-convolution stem with ascending
kernel sizes, a variant-specific 2-D trunk with a plain element-wise
residual around it, a single head convolution, temporal upsampling with
skip additions back to T frames, and a final sigmoid so confidence maps
live in [0,1].

Trunks: ``cnn2d`` stacks plain conv blocks, ``transformer2d`` runs a
patch-token encoder with a paired upsample block, and ``radarformer``
stacks MBConv + window/grid attention blocks at full resolution.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataFormatError, ShapeError
from .layers import (
    BatchNorm2d,
    Conv2d,
    Conv3d,
    MaxVitBlock,
    MNetMerge,
    Module,
    PatchEmbed,
    SeedStream,
    TemporalDownsample,
    TemporalUpsample,
    VitBlock,
    VitUpsample,
    ConvBlock2d,
    space_to_depth3d,
)

VARIANTS = ("cnn2d", "transformer2d", "radarformer")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "radarformer"
    frames: int = 32              # temporal window T
    chirps: int = 4               # chirps per frame C
    height: int = 128             # range bins H
    width: int = 128              # azimuth bins W
    merge_channels: int = 16      # merged channel width C_h
    num_classes: int = 3
    stem_kernels: tuple[int, ...] = (3, 5)
    head_kernel: int = 5
    stage_widths: tuple[int, ...] = (48,)
    stage_depths: tuple[int, ...] = (2,)
    stage_kernel: int = 3         # MBConv middle kernel
    window_size: int = 7          # attention window P
    grid_size: int = 7            # attention grid G
    heads: int = 4
    mlp_ratio: float = 20.0       # MLP hidden width = ratio * stage width
    patch_size: int = 16          # transformer2d patch edge
    vit_dim: int = 0              # transformer2d token width; 0 = stage width
    init_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not (20.0 <= self.mlp_ratio <= 150.0):
            raise ConfigError(f"mlp_ratio must lie in [20, 150], got {self.mlp_ratio}")
        if any(k % 2 == 0 or k < 1 for k in self.stem_kernels) or self.head_kernel % 2 == 0:
            raise ConfigError("stem/head kernels must be odd and positive")
        if list(self.stem_kernels) != sorted(self.stem_kernels):
            raise ConfigError(f"stem kernels must be non-decreasing, got {self.stem_kernels}")
        if len(self.stem_kernels) != 2:
            raise ConfigError("the stem uses exactly two convolutions")
        t = self.frames
        if t < 2 or (t & (t - 1)) != 0:
            raise ConfigError(f"frames must be a power of two >= 2, got {t}")
        if len(self.stage_widths) != len(self.stage_depths) or not self.stage_widths:
            raise ConfigError("stage_widths and stage_depths must be non-empty and equal length")
        if self.stage_widths[0] != self.stage_widths[-1]:
            raise ConfigError("first and last stage widths must match for the trunk residual")
        for w in self.stage_widths:
            if w % self.heads != 0:
                raise ConfigError(f"stage width {w} not divisible by {self.heads} heads")
        if self.window_size <= 0 or self.grid_size <= 0:
            raise ConfigError("window/grid sizes must be positive")
        if min(self.height, self.width, self.chirps, self.merge_channels, self.num_classes) < 1:
            raise ConfigError("extent fields must be >= 1")
        if self.variant == "transformer2d":
            if self.height % self.patch_size or self.width % self.patch_size:
                raise ConfigError(
                    f"patch size {self.patch_size} must divide {self.height}x{self.width}"
                )

    @property
    def temporal_stages(self) -> int:
        return int(math.log2(self.frames))

    def head_dim(self, width: int) -> int:
        return width // self.heads

    def mlp_hidden(self, width: int) -> int:
        return int(round(self.mlp_ratio * width))

    def effective_vit_dim(self) -> int:
        return self.vit_dim if self.vit_dim > 0 else self.stage_widths[0]


_CFG_INT_TUPLES = {"stem_kernels", "stage_widths", "stage_depths"}


def config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _CFG_INT_TUPLES:
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    known = {f.name: f.type for f in fields(ModelConfig)}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"model config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise DataFormatError(f"model config line {lineno}: unknown key {key!r}")
        if key in _CFG_INT_TUPLES:
            kwargs[key] = tuple(int(x) for x in value.split(",") if x)
        elif key == "variant":
            kwargs[key] = value
        elif key == "mlp_ratio":
            kwargs[key] = float(value)
        else:
            kwargs[key] = int(value)
    return ModelConfig(**kwargs)


# ---------------------------------------------------------------------------
# trunks


class CnnTrunk(Module):
    def __init__(self, cfg: ModelConfig, seeds, dtype):
        super().__init__()
        self.blocks = []
        prev = cfg.stage_widths[0]
        for width, depth in zip(cfg.stage_widths, cfg.stage_depths):
            if width != prev:
                self.blocks.append(Conv2d(prev, width, 1, seeds, dtype))
                prev = width
            for _ in range(depth):
                self.blocks.append(ConvBlock2d(width, cfg.stage_kernel, seeds, dtype))

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def profile(self, in_shape, prefix=""):
        entries, s = [], in_shape
        for i, block in enumerate(self.blocks):
            e, s = block.profile(s, f"{prefix}block{i}.")
            entries += e
        return entries, s


class MaxVitTrunk(Module):
    def __init__(self, cfg: ModelConfig, seeds, dtype):
        super().__init__()
        self.blocks = []
        prev = cfg.stage_widths[0]
        for width, depth in zip(cfg.stage_widths, cfg.stage_depths):
            if width != prev:
                self.blocks.append(Conv2d(prev, width, 1, seeds, dtype))
                prev = width
            for _ in range(depth):
                self.blocks.append(
                    MaxVitBlock(
                        width,
                        cfg.heads,
                        cfg.mlp_hidden(width),
                        cfg.window_size,
                        cfg.grid_size,
                        cfg.stage_kernel,
                        seeds,
                        dtype,
                    )
                )

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def profile(self, in_shape, prefix=""):
        entries, s = [], in_shape
        for i, block in enumerate(self.blocks):
            e, s = block.profile(s, f"{prefix}block{i}.")
            entries += e
        return entries, s


class VitTrunk(Module):
    """Patch-token encoder plus the paired upsample block restoring H, W."""

    def __init__(self, cfg: ModelConfig, seeds, dtype):
        super().__init__()
        dim = cfg.effective_vit_dim()
        if dim % cfg.heads:
            raise ConfigError(f"vit token width {dim} not divisible by {cfg.heads} heads")
        w0 = cfg.stage_widths[0]
        self.embed = PatchEmbed(w0, cfg.patch_size, cfg.height, cfg.width, dim, seeds, dtype)
        depth = sum(cfg.stage_depths)
        self.blocks = [
            VitBlock(dim, cfg.heads, cfg.mlp_hidden(dim), seeds, dtype) for _ in range(depth)
        ]
        self.upsample = VitUpsample(
            dim, cfg.patch_size, w0, self.embed.tokens_h, self.embed.tokens_w, seeds, dtype
        )

    def encode(self, x, with_pos=True):
        tok = self.embed(x, with_pos=with_pos)
        for block in self.blocks:
            tok = block(tok)
        return tok

    def forward(self, x):
        return self.upsample(self.encode(x))

    def profile(self, in_shape, prefix=""):
        entries, s = self.embed.profile(in_shape, prefix + "embed.")
        for i, block in enumerate(self.blocks):
            e, s = block.profile(s, f"{prefix}block{i}.")
            entries += e
        e, s = self.upsample.profile(s, prefix + "upsample.")
        entries += e
        return entries, s


_TRUNKS = {"cnn2d": CnnTrunk, "transformer2d": VitTrunk, "radarformer": MaxVitTrunk}


class RadarDetector(Module):
    """Full detector: (B,2,T,C,H,W) cube in, (B,K,T,H,W) ConfMap sequence out."""

    def __init__(self, cfg: ModelConfig, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        seeds = SeedStream(cfg.init_seed)
        ch, w0 = cfg.merge_channels, cfg.stage_widths[0]
        self.merge = MNetMerge(cfg.chirps, ch, seeds, self.dtype)
        self.down = TemporalDownsample(ch, cfg.temporal_stages, seeds, self.dtype)
        self.stem1 = Conv2d(ch, w0, cfg.stem_kernels[0], seeds, self.dtype)
        self.stem_bn1 = BatchNorm2d(w0, self.dtype)
        self.stem2 = Conv2d(w0, w0, cfg.stem_kernels[1], seeds, self.dtype)
        self.stem_bn2 = BatchNorm2d(w0, self.dtype)
        self.trunk = _TRUNKS[cfg.variant](cfg, seeds, self.dtype)
        self.head = Conv2d(w0, ch, cfg.head_kernel, seeds, self.dtype)
        self.head_bn = BatchNorm2d(ch, self.dtype)
        self.up = TemporalUpsample(ch, cfg.num_classes, cfg.temporal_stages, seeds, self.dtype)

    def _check_input(self, cube):
        cfg = self.cfg
        if cube.ndim != 6:
            raise ShapeError(f"expected rank-6 cube, got {cube.shape}")
        b, two, t, c, h, w = cube.shape
        if two != 2 or c != cfg.chirps or t != cfg.frames:
            raise ShapeError(
                f"cube {cube.shape} incompatible with config "
                f"(2,{cfg.frames},{cfg.chirps},H,W)"
            )
        if cfg.variant == "transformer2d" and (h, w) != (cfg.height, cfg.width):
            raise ShapeError(
                f"transformer2d is resolution-bound to {cfg.height}x{cfg.width}, got {h}x{w}"
            )

    def forward_logits(self, cube: T.Tensor) -> T.Tensor:
        self._check_input(cube)
        x = self.merge(cube)
        y2d, skips = self.down(x)
        s = T.relu(self.stem_bn1(self.stem1(y2d)))
        s = T.relu(self.stem_bn2(self.stem2(s)))
        t = self.trunk(s)
        t = T.add(t, s)
        h = T.relu(self.head_bn(self.head(t)))
        return self.up(h, skips)

    def forward(self, cube: T.Tensor) -> T.Tensor:
        return T.sigmoid(self.forward_logits(cube))

    def profile(self, in_shape, prefix=""):
        entries, s = self.merge.profile(in_shape, prefix + "merge.")
        e, s2d = self.down.profile(s, prefix + "down.")
        entries += e
        e, s2d = self.stem1.profile(s2d, prefix + "stem1.")
        entries += e
        e, s2d = self.stem_bn1.profile(s2d, prefix + "stem_bn1.")
        entries += e
        e, s2d = self.stem2.profile(s2d, prefix + "stem2.")
        entries += e
        e, s2d = self.stem_bn2.profile(s2d, prefix + "stem_bn2.")
        entries += e
        e, s2d = self.trunk.profile(s2d, prefix + "trunk.")
        entries += e
        e, s2d = self.head.profile(s2d, prefix + "head.")
        entries += e
        e, s2d = self.head_bn.profile(s2d, prefix + "head_bn.")
        entries += e
        e, out = self.up.profile(s2d, prefix + "up.")
        entries += e
        return entries, out


def build_model(cfg: ModelConfig, dtype=np.float64) -> RadarDetector:
    return RadarDetector(cfg, dtype)


# ---------------------------------------------------------------------------
# 3-D hourglass reference (profiler baseline; runnable but deliberately heavy)


class Hourglass3d(Module):
    """Skeletal encoder/bottleneck/decoder of full 3-D convolutions kept at
    high temporal/spatial resolution.  Serves as the complexity baseline the
    lightweight models are measured against; same IO contract as the
    detector variants."""

    def __init__(self, chirps=4, num_classes=3, base=32,
                 bottleneck_width=544, bottleneck_depth=8, seed=0, dtype=np.float32):
        super().__init__()
        self.chirps, self.num_classes = chirps, num_classes
        dt = np.dtype(dtype).type
        seeds = SeedStream(seed)
        self.merge = MNetMerge(chirps, base, seeds, dt)
        # one stride-2 temporal stage and one spatial halving (space-to-depth);
        # the bottleneck stack runs at (T/2, H/2, W/2)
        self.enc_t = Conv3d(base, 2 * base, (2, 3, 3), seeds, dt, stride=(2, 1, 1), padding=(0, 1, 1))
        self.enc_s = Conv3d(8 * base, bottleneck_width, (1, 3, 3), seeds, dt, padding=(0, 1, 1))
        self.bottleneck = [
            Conv3d(bottleneck_width, bottleneck_width, (3, 3, 3), seeds, dt, padding=(1, 1, 1))
            for _ in range(bottleneck_depth)
        ]
        self.dec_s = Conv3d(bottleneck_width, 2 * base, (1, 3, 3), seeds, dt, padding=(0, 1, 1))
        self.dec_t = Conv3d(2 * base, base, (3, 3, 3), seeds, dt, padding=(1, 1, 1))
        self.head = Conv3d(base, num_classes, (1, 3, 3), seeds, dt, padding=(0, 1, 1))

    def forward_logits(self, cube):
        x = self.merge(cube)
        x = T.relu(self.enc_t(x))
        x = space_to_depth3d(x, 2)
        x = T.relu(self.enc_s(x))
        for conv in self.bottleneck:
            x = T.add(T.relu(conv(x)), x)
        x = T.relu(self.dec_s(x))
        x = T.repeat(T.repeat(x, axis=3, factor=2), axis=4, factor=2)
        x = T.relu(self.dec_t(T.repeat(x, axis=2, factor=2)))
        return self.head(x)

    def forward(self, cube):
        return T.sigmoid(self.forward_logits(cube))

    def profile(self, in_shape, prefix=""):
        entries, s = self.merge.profile(in_shape, prefix + "merge.")
        e, s = self.enc_t.profile(s, prefix + "enc_t.")
        entries += e
        b, c, t, h, w = s
        s = (b, 4 * c, t, h // 2, w // 2)
        e, s = self.enc_s.profile(s, prefix + "enc_s.")
        entries += e
        for i, conv in enumerate(self.bottleneck):
            e, s = conv.profile(s, f"{prefix}bottleneck{i}.")
            entries += e
        e, s = self.dec_s.profile(s, prefix + "dec_s.")
        entries += e
        b, c, t, h, w = s
        s = (b, c, 2 * t, 2 * h, 2 * w)
        e, s = self.dec_t.profile(s, prefix + "dec_t.")
        entries += e
        e, s = self.head.profile(s, prefix + "head.")
        entries += e
        return entries, s


# ---------------------------------------------------------------------------
# reference configurations


def reference_config(name: str) -> ModelConfig:
    try:
        return dict(
            (
                ("radarformer-ref", ModelConfig(
                    variant="radarformer",
                    merge_channels=16,
                    stage_widths=(64, 64),
                    stage_depths=(8, 8),
                    heads=4,
                    mlp_ratio=20.0,
                )),
                ("cnn2d-ref", ModelConfig(
                    variant="cnn2d",
                    merge_channels=16,
                    stage_widths=(136,),
                    stage_depths=(12,),
                    heads=4,
                    mlp_ratio=20.0,
                )),
                ("transformer2d-ref", ModelConfig(
                    variant="transformer2d",
                    merge_channels=16,
                    stage_widths=(48,),
                    stage_depths=(4,),
                    heads=4,
                    mlp_ratio=20.0,
                    patch_size=16,
                    vit_dim=288,
                )),
                ("radarformer-tiny", ModelConfig(
                    variant="radarformer",
                    frames=8,
                    height=32,
                    width=32,
                    merge_channels=8,
                    stem_kernels=(3, 5),
                    head_kernel=5,
                    stage_widths=(16,),
                    stage_depths=(2,),
                    window_size=4,
                    grid_size=4,
                    heads=2,
                    mlp_ratio=20.0,
                )),
            )
        )[name]
    except KeyError:
        raise ConfigError(f"unknown reference config {name!r}") from None


def build_reference(name: str, dtype=np.float32):
    """Build a model by reference name; includes the hourglass baseline."""
    if name == "hourglass3d-ref":
        return Hourglass3d(dtype=dtype)
    return build_model(reference_config(name), dtype=dtype)


REFERENCE_NAMES = (
    "radarformer-ref",
    "cnn2d-ref",
    "transformer2d-ref",
    "radarformer-tiny",
    "hourglass3d-ref",
)


# ---------------------------------------------------------------------------
# checkpoint serialization

_MAGIC = b"RFCK"
_VERSION = 1


def save_checkpoint(model: RadarDetector, path) -> None:
    """Write magic, version, the serialized config, then one named f32 blob
    per parameter (name u16-length-prefixed, rank u8, extents u32, data LE)."""
    cfg_blob = config_to_text(model.cfg).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        for name, param in model.named_params():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", param.ndim))
            fh.write(struct.pack(f"<{param.ndim}I", *param.shape))
            fh.write(np.ascontiguousarray(param.data, dtype="<f4").tobytes())


def _read_exact(fh, n, path, what):
    data = fh.read(n)
    if len(data) != n:
        raise DataFormatError(
            f"{path}: truncated while reading {what} at offset {fh.tell() - len(data)}"
        )
    return data


def load_checkpoint(path, dtype=np.float64) -> RadarDetector:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path, "magic")
        if magic != _MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r} at offset 0")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, path, "version"))
        if version != _VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "config length"))
        try:
            cfg = config_from_text(_read_exact(fh, cfg_len, path, "config").decode("utf-8"))
        except (ConfigError, UnicodeDecodeError) as e:
            raise DataFormatError(f"{path}: invalid embedded config: {e}") from None
        model = build_model(cfg, dtype=dtype)
        params = dict(model.named_params())
        seen = set()
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise DataFormatError(f"{path}: truncated blob header at offset {fh.tell() - len(head)}")
            (name_len,) = struct.unpack("<H", head)
            name = _read_exact(fh, name_len, path, "blob name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, path, "blob rank"))
            extents = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, path, "blob extents"))
            count = int(np.prod(extents, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, 4 * count, path, f"blob data for {name!r}")
            if name not in params:
                raise DataFormatError(f"{path}: unknown weight blob {name!r}")
            param = params[name]
            if tuple(extents) != tuple(param.shape):
                raise DataFormatError(
                    f"{path}: blob {name!r} extents {extents} != model shape {param.shape}"
                )
            arr = np.frombuffer(raw, dtype="<f4").reshape(extents)
            param.data = np.ascontiguousarray(arr, dtype=model.dtype)
            seen.add(name)
        missing = set(params) - seen
        if missing:
            raise DataFormatError(f"{path}: checkpoint missing weights {sorted(missing)[:3]}...")
    return model
