"""Architecture building blocks for the range-azimuth detection models.

Modules own their parameters (seeded deterministic init), a forward pass
built from tensor-engine ops, and a ``profile`` method that reports exact
parameter and multiply-accumulate counts for a given input shape.

MAC conventions (shared with the profiler): convolutions count
out_elems * Cin * prod(kernel); matmuls count m*k*n per batch item;
normalization, softmax, activations, elementwise adds, and data movement
count zero.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError


class SeedStream:
    """Hands out well-mixed child seeds in a deterministic order."""

    def __init__(self, base: int):
        self.base = int(base)
        self.counter = 0

    def next(self) -> int:
        seed = int(np.random.SeedSequence((self.base, self.counter)).generate_state(1)[0])
        self.counter += 1
        return seed


class Module:
    """Minimal container: tracks parameters, buffers, children, train mode."""

    def __init__(self):
        self._params: dict[str, T.Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    def add_param(self, name: str, tensor: T.Tensor) -> T.Tensor:
        self._params[name] = tensor
        return tensor

    def children(self):
        for name, value in self.__dict__.items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_params(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self.children():
            yield from child.named_params(prefix + cname + ".")

    def params(self):
        for _, p in self.named_params():
            yield p

    def set_training(self, mode: bool) -> None:
        self.training = mode
        for _, child in self.children():
            child.set_training(mode)

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def profile(self, in_shape, prefix: str = ""):
        """Return ([(name, param_count, mac_count)], out_shape)."""
        raise NotImplementedError(type(self).__name__)


def _init_uniform(shape, fan_in, seeds: SeedStream, dtype) -> T.Tensor:
    bound = math.sqrt(1.0 / max(1, fan_in))
    return T.uniform(shape, seeds.next(), -bound, bound, requires_grad=True, dtype=dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, seeds, dtype, stride=1, padding=None, bias=True):
        super().__init__()
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding
        fan = cin * kernel * kernel
        self.w = self.add_param("w", _init_uniform((cout, cin, kernel, kernel), fan, seeds, dtype))
        self.b = self.add_param("b", _init_uniform((cout,), fan, seeds, dtype)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def profile(self, in_shape, prefix=""):
        b, _, h, w = in_shape
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        params = self.cout * self.cin * self.kernel ** 2 + (self.cout if self.b is not None else 0)
        macs = b * self.cout * ho * wo * self.cin * self.kernel ** 2
        return [(prefix + "conv", params, macs)], (b, self.cout, ho, wo)


class Conv3d(Module):
    def __init__(self, cin, cout, kernel, seeds, dtype, stride=(1, 1, 1), padding=(0, 0, 0), bias=True):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.kernel, self.stride, self.padding = tuple(kernel), tuple(stride), tuple(padding)
        fan = cin * int(np.prod(self.kernel))
        self.w = self.add_param("w", _init_uniform((cout, cin) + self.kernel, fan, seeds, dtype))
        self.b = self.add_param("b", _init_uniform((cout,), fan, seeds, dtype)) if bias else None

    def forward(self, x):
        return T.conv3d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def profile(self, in_shape, prefix=""):
        b = in_shape[0]
        out_sp = tuple(
            (n + 2 * p - k) // s + 1
            for n, k, s, p in zip(in_shape[2:], self.kernel, self.stride, self.padding)
        )
        kprod = int(np.prod(self.kernel))
        params = self.cout * self.cin * kprod + (self.cout if self.b is not None else 0)
        macs = b * self.cout * int(np.prod(out_sp)) * self.cin * kprod
        return [(prefix + "conv", params, macs)], (b, self.cout) + out_sp


class Linear(Module):
    def __init__(self, nin, nout, seeds, dtype, bias=True):
        super().__init__()
        self.nin, self.nout = nin, nout
        self.w = self.add_param("w", _init_uniform((nin, nout), nin, seeds, dtype))
        self.b = self.add_param("b", _init_uniform((nout,), nin, seeds, dtype)) if bias else None

    def forward(self, x):
        lead = x.shape[:-1]
        if len(lead) > 1:
            # one 2-D GEMM instead of a loop of small batched ones
            x = T.reshape(x, (int(np.prod(lead)), self.nin))
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = T.add_bcast(out, self.b)
        if len(lead) > 1:
            out = T.reshape(out, lead + (self.nout,))
        return out

    def profile(self, in_shape, prefix=""):
        lead = int(np.prod(in_shape[:-1]))
        params = self.nin * self.nout + (self.nout if self.b is not None else 0)
        macs = lead * self.nin * self.nout
        return [(prefix + "linear", params, macs)], in_shape[:-1] + (self.nout,)


class LayerNorm(Module):
    """Normalizes the last axis of token tensors (..., S)."""

    def __init__(self, dim, dtype, eps=1e-5):
        super().__init__()
        self.dim, self.eps = dim, eps
        self.gamma = self.add_param("gamma", T.full((dim,), 1.0, requires_grad=True, dtype=dtype))
        self.beta = self.add_param("beta", T.zeros((dim,), requires_grad=True, dtype=dtype))

    def forward(self, x):
        return T.normalize(x, self.gamma, self.beta, axes=-1, eps=self.eps)

    def profile(self, in_shape, prefix=""):
        return [(prefix + "norm", 2 * self.dim, 0)], in_shape


class BatchNorm2d(Module):
    """Per-channel normalization over (B,H,W); keeps running statistics
    for inference mode."""

    def __init__(self, channels, dtype, eps=1e-5, momentum=0.1):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        shape = (1, channels, 1, 1)
        self.gamma = self.add_param("gamma", T.full(shape, 1.0, requires_grad=True, dtype=dtype))
        self.beta = self.add_param("beta", T.zeros(shape, requires_grad=True, dtype=dtype))
        self._buffers["running_mean"] = np.zeros(shape)
        self._buffers["running_var"] = np.ones(shape)

    def forward(self, x):
        if self.training:
            mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
            var = x.data.var(axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self._buffers["running_mean"] = (1 - m) * self._buffers["running_mean"] + m * mu
            self._buffers["running_var"] = (1 - m) * self._buffers["running_var"] + m * var
            return T.normalize(x, self.gamma, self.beta, axes=(0, 2, 3), eps=self.eps)
        inv = 1.0 / np.sqrt(self._buffers["running_var"] + self.eps)
        a = self.gamma.data * inv
        b = self.beta.data - self._buffers["running_mean"] * a
        return T.affine_const(x, a.astype(x.data.dtype), b.astype(x.data.dtype))

    def profile(self, in_shape, prefix=""):
        return [(prefix + "norm", 2 * self.channels, 0)], in_shape


class Mlp(Module):
    def __init__(self, dim, hidden, seeds, dtype):
        super().__init__()
        self.fc1 = Linear(dim, hidden, seeds, dtype)
        self.fc2 = Linear(hidden, dim, seeds, dtype)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))

    def profile(self, in_shape, prefix=""):
        p1, mid = self.fc1.profile(in_shape, prefix + "fc1.")
        p2, out = self.fc2.profile(mid, prefix + "fc2.")
        return p1 + p2, out


class MultiheadSelfAttention(Module):
    """Per head: [q,k,v] from one fused projection; scores scaled by the
    per-head width; softmax weights applied to v; heads concatenated and
    projected back to the token width."""

    def __init__(self, dim, heads, seeds, dtype):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"token width {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.qkv = Linear(dim, 3 * dim, seeds, dtype)
        self.out = Linear(dim, dim, seeds, dtype)

    def forward(self, tokens):
        bw, n, s = tokens.shape
        if s != self.dim:
            raise ShapeError(f"token width {s} != attention width {self.dim}")
        m, sl = self.heads, self.head_dim
        qkv = self.qkv(tokens)                              # (Bw, N, 3S)
        qkv = T.reshape(qkv, (bw, n, 3, m, sl))
        q = T.reshape(T.crop(qkv, [(0, bw), (0, n), (0, 1), (0, m), (0, sl)]), (bw, n, m, sl))
        k = T.reshape(T.crop(qkv, [(0, bw), (0, n), (1, 2), (0, m), (0, sl)]), (bw, n, m, sl))
        v = T.reshape(T.crop(qkv, [(0, bw), (0, n), (2, 3), (0, m), (0, sl)]), (bw, n, m, sl))
        q = T.permute(q, (0, 2, 1, 3))                      # (Bw, m, N, Sl)
        k = T.permute(k, (0, 2, 3, 1))                      # (Bw, m, Sl, N)
        v = T.permute(v, (0, 2, 1, 3))
        scores = T.scale(T.matmul(q, k), 1.0 / math.sqrt(sl))
        attn = T.softmax(scores, axis=-1)
        mixed = T.matmul(attn, v)                           # (Bw, m, N, Sl)
        mixed = T.reshape(T.permute(mixed, (0, 2, 1, 3)), (bw, n, s))
        return self.out(mixed)

    def profile(self, in_shape, prefix=""):
        bw, n, s = in_shape
        params = (s * 3 * s + 3 * s) + (s * s + s)
        macs = bw * (3 * n * s * s + n * n * s + n * n * s + n * s * s)
        return [(prefix + "msa", params, macs)], in_shape


class PartitionAttention(Module):
    """Window or grid partition, learned token position embedding, then a
    pre-norm MSA + MLP transformer sub-block, then the exact reverse."""

    def __init__(self, dim, heads, mlp_hidden, mode, size, seeds, dtype):
        super().__init__()
        if mode not in ("window", "grid"):
            raise ConfigError(f"unknown partition mode {mode!r}")
        self.mode, self.size, self.dim = mode, size, dim
        self.pos = self.add_param("pos", T.zeros((size * size, dim), requires_grad=True, dtype=dtype))
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiheadSelfAttention(dim, heads, seeds, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = Mlp(dim, mlp_hidden, seeds, dtype)

    def forward(self, x):
        b, c, h, w = x.shape
        if self.mode == "window":
            tokens = T.window_partition(x, self.size)
        else:
            tokens = T.grid_partition(x, self.size)
        tokens = T.add_bcast(tokens, self.pos)
        tokens = T.add(tokens, self.attn(self.norm1(tokens)))
        tokens = T.add(tokens, self.mlp(self.norm2(tokens)))
        if self.mode == "window":
            return T.window_reverse(tokens, self.size, b, c, h, w)
        return T.grid_reverse(tokens, self.size, b, c, h, w)

    def profile(self, in_shape, prefix=""):
        b, c, h, w = in_shape
        m = self.size
        hp, wp = h + (-h) % m, w + (-w) % m
        groups = b * (hp // m) * (wp // m)
        tok_shape = (groups, m * m, c)
        entries = [(prefix + "pos", m * m * c, 0)]
        e, _ = self.norm1.profile(tok_shape, prefix + "norm1.")
        entries += e
        e, _ = self.attn.profile(tok_shape, prefix + "attn.")
        entries += e
        e, _ = self.norm2.profile(tok_shape, prefix + "norm2.")
        entries += e
        e, _ = self.mlp.profile(tok_shape, prefix + "mlp.")
        entries += e
        return entries, in_shape


class MBConv(Module):
    """Three convolutions with wide-narrow-wide channel widths (C, C/4, C)
    and small-large-small kernels (1, k, 1); the residual adds the first
    convolution's output to the last convolution's output."""

    def __init__(self, channels, kernel, seeds, dtype):
        super().__init__()
        narrow = max(1, channels // 4)
        self.conv1 = Conv2d(channels, channels, 1, seeds, dtype)
        self.bn1 = BatchNorm2d(channels, dtype)
        self.conv2 = Conv2d(channels, narrow, kernel, seeds, dtype)
        self.bn2 = BatchNorm2d(narrow, dtype)
        self.conv3 = Conv2d(narrow, channels, 1, seeds, dtype)

    def forward(self, x):
        wide = self.conv1(x)
        h = T.gelu(self.bn1(wide))
        h = T.gelu(self.bn2(self.conv2(h)))
        return T.add(wide, self.conv3(h))

    def profile(self, in_shape, prefix=""):
        entries, s = self.conv1.profile(in_shape, prefix + "conv1.")
        e, s = self.bn1.profile(s, prefix + "bn1.")
        entries += e
        e, s = self.conv2.profile(s, prefix + "conv2.")
        entries += e
        e, s = self.bn2.profile(s, prefix + "bn2.")
        entries += e
        e, s = self.conv3.profile(s, prefix + "conv3.")
        entries += e
        return entries, in_shape


class MaxVitBlock(Module):
    """MBConv, then windowed local attention, then dilated grid attention;
    shape preserving."""

    def __init__(self, channels, heads, mlp_hidden, window, grid, kernel, seeds, dtype):
        super().__init__()
        self.mbconv = MBConv(channels, kernel, seeds, dtype)
        self.window_attn = PartitionAttention(channels, heads, mlp_hidden, "window", window, seeds, dtype)
        self.grid_attn = PartitionAttention(channels, heads, mlp_hidden, "grid", grid, seeds, dtype)

    def forward(self, x):
        x = self.mbconv(x)
        x = self.window_attn(x)
        return self.grid_attn(x)

    def profile(self, in_shape, prefix=""):
        entries, s = self.mbconv.profile(in_shape, prefix + "mbconv.")
        e, s = self.window_attn.profile(s, prefix + "window.")
        entries += e
        e, s = self.grid_attn.profile(s, prefix + "grid.")
        entries += e
        return entries, in_shape


class ConvBlock2d(Module):
    def __init__(self, channels, kernel, seeds, dtype):
        super().__init__()
        self.conv = Conv2d(channels, channels, kernel, seeds, dtype)
        self.bn = BatchNorm2d(channels, dtype)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))

    def profile(self, in_shape, prefix=""):
        entries, s = self.conv.profile(in_shape, prefix + "conv.")
        e, s = self.bn.profile(s, prefix + "bn.")
        return entries + e, s


class PatchEmbed(Module):
    """Flatten non-overlapping PxP patches into tokens, project linearly,
    and add a learned (zero-initialized) position embedding."""

    def __init__(self, in_channels, patch, height, width, dim, seeds, dtype):
        super().__init__()
        if height % patch != 0 or width % patch != 0:
            raise ConfigError(f"patch size {patch} must divide resolution {height}x{width}")
        self.patch, self.in_channels = patch, in_channels
        self.tokens_h, self.tokens_w = height // patch, width // patch
        n = self.tokens_h * self.tokens_w
        self.proj = Linear(patch * patch * in_channels, dim, seeds, dtype)
        self.pos = self.add_param("pos", T.zeros((n, dim), requires_grad=True, dtype=dtype))

    def forward(self, x, with_pos=True):
        b, c, h, w = x.shape
        if h != self.tokens_h * self.patch or w != self.tokens_w * self.patch:
            raise ShapeError(f"input {h}x{w} does not match embed resolution")
        tok = T.window_partition(x, self.patch)             # (B*N, P*P, C)
        n = self.tokens_h * self.tokens_w
        tok = T.reshape(tok, (b, n, self.patch * self.patch * c))
        tok = self.proj(tok)
        if with_pos:
            tok = T.add_bcast(tok, self.pos)
        return tok

    def profile(self, in_shape, prefix=""):
        b = in_shape[0]
        n = self.tokens_h * self.tokens_w
        flat = (b, n, self.patch * self.patch * self.in_channels)
        entries, out = self.proj.profile(flat, prefix + "proj.")
        entries.append((prefix + "pos", self.pos.size, 0))
        return entries, out


class VitBlock(Module):
    def __init__(self, dim, heads, mlp_hidden, seeds, dtype):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiheadSelfAttention(dim, heads, seeds, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = Mlp(dim, mlp_hidden, seeds, dtype)

    def forward(self, tokens):
        tokens = T.add(tokens, self.attn(self.norm1(tokens)))
        return T.add(tokens, self.mlp(self.norm2(tokens)))

    def profile(self, in_shape, prefix=""):
        entries, s = self.norm1.profile(in_shape, prefix + "norm1.")
        e, s = self.attn.profile(s, prefix + "attn.")
        entries += e
        e, s = self.norm2.profile(s, prefix + "norm2.")
        entries += e
        e, s = self.mlp.profile(s, prefix + "mlp.")
        entries += e
        return entries, in_shape


class VitUpsample(Module):
    """Expand each token back to a PxP pixel block (a stride-P transposed
    convolution expressed as a linear map plus rearrange)."""

    def __init__(self, dim, patch, out_channels, tokens_h, tokens_w, seeds, dtype):
        super().__init__()
        self.patch, self.out_channels = patch, out_channels
        self.tokens_h, self.tokens_w = tokens_h, tokens_w
        self.expand = Linear(dim, patch * patch * out_channels, seeds, dtype)

    def forward(self, tokens):
        b, n, _ = tokens.shape
        if n != self.tokens_h * self.tokens_w:
            raise ShapeError("token count does not match target grid")
        p, c = self.patch, self.out_channels
        x = self.expand(tokens)                              # (B, N, P*P*C)
        x = T.reshape(x, (b * n, p * p, c))
        return T.window_reverse(x, p, b, c, self.tokens_h * p, self.tokens_w * p)

    def profile(self, in_shape, prefix=""):
        entries, _ = self.expand.profile(in_shape, prefix + "expand.")
        b = in_shape[0]
        out = (b, self.out_channels, self.tokens_h * self.patch, self.tokens_w * self.patch)
        return entries, out


class MNetMerge(Module):
    """Fuse the two RF channels and the chirp axis into learned channels:
    (B,2,T,C,H,W) -> (B,C_h,T,H,W)."""

    def __init__(self, chirps, merged, seeds, dtype):
        super().__init__()
        self.chirps, self.merged = chirps, merged
        self.conv1 = Conv3d(2 * chirps, merged, (1, 3, 3), seeds, dtype, padding=(0, 1, 1))
        self.conv2 = Conv3d(merged, merged, (1, 3, 3), seeds, dtype, padding=(0, 1, 1))

    def forward(self, cube):
        if cube.ndim != 6 or cube.shape[1] != 2:
            raise ShapeError(f"expected (B,2,T,C,H,W) cube, got {cube.shape}")
        b, two, t, c, h, w = cube.shape
        if c != self.chirps:
            raise ShapeError(f"cube has {c} chirps, model expects {self.chirps}")
        x = T.permute(cube, (0, 1, 3, 2, 4, 5))             # (B,2,C,T,H,W)
        x = T.reshape(x, (b, 2 * c, t, h, w))
        x = T.relu(self.conv1(x))
        return T.relu(self.conv2(x))

    def profile(self, in_shape, prefix=""):
        b, two, t, c, h, w = in_shape
        entries, s = self.conv1.profile((b, 2 * c, t, h, w), prefix + "conv1.")
        e, s = self.conv2.profile(s, prefix + "conv2.")
        return entries + e, s


class TemporalDownsample(Module):
    """Stride-2 temporal convolutions reduce T to 1; each stage's pre-stride
    activation is saved as the skip state for the upsampling stream."""

    def __init__(self, channels, stages, seeds, dtype):
        super().__init__()
        self.stages = stages
        self.convs = [
            Conv3d(channels, channels, (2, 3, 3), seeds, dtype, stride=(2, 1, 1), padding=(0, 1, 1))
            for _ in range(stages)
        ]

    def forward(self, x):
        if x.shape[2] != 2 ** self.stages:
            raise ConfigError(
                f"temporal extent {x.shape[2]} not reducible by {self.stages} stride-2 stages"
            )
        skips = []
        for conv in self.convs:
            skips.append(x)
            x = T.relu(conv(x))
        b, c, t, h, w = x.shape
        return T.reshape(x, (b, c, h, w)), skips

    def profile(self, in_shape, prefix=""):
        entries = []
        s = in_shape
        for i, conv in enumerate(self.convs):
            e, s = conv.profile(s, f"{prefix}stage{i}.")
            entries += e
        b, c, t, h, w = s
        return entries, (b, c, h, w)


class TemporalUpsample(Module):
    """Mirror of the downsampling stream: nearest-repeat doubling along T,
    element-wise addition of the saved skip, then a 3-D convolution.  The
    final stage emits the requested output width."""

    def __init__(self, channels, out_channels, stages, seeds, dtype):
        super().__init__()
        self.stages = stages
        self.convs = [
            Conv3d(
                channels,
                out_channels if i == stages - 1 else channels,
                (3, 3, 3),
                seeds,
                dtype,
                padding=(1, 1, 1),
            )
            for i in range(stages)
        ]

    def forward(self, y, skips):
        if len(skips) != self.stages:
            raise ShapeError(f"expected {self.stages} skip tensors, got {len(skips)}")
        b, c, h, w = y.shape
        x = T.reshape(y, (b, c, 1, h, w))
        for i, conv in enumerate(self.convs):
            x = T.repeat(x, axis=2, factor=2)
            skip = skips[self.stages - 1 - i]
            if skip.shape != x.shape:
                raise ShapeError(f"skip shape {skip.shape} does not match stream shape {x.shape}")
            x = T.add(x, skip)
            x = conv(x)
            if i != self.stages - 1:
                x = T.relu(x)
        return x

    def profile(self, in_shape, prefix=""):
        b, c, h, w = in_shape
        entries = []
        s = (b, c, 1, h, w)
        for i, conv in enumerate(self.convs):
            s = (s[0], s[1], s[2] * 2, s[3], s[4])
            e, s = conv.profile(s, f"{prefix}stage{i}.")
            entries += e
        return entries, s


def space_to_depth3d(x, factor: int = 2):
    """(B,C,T,H,W) -> (B, C*factor^2, T, H/factor, W/factor), exact rearrange."""
    b, c, t, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"spatial extents {h}x{w} not divisible by {factor}")
    f = factor
    y = T.reshape(x, (b, c, t, h // f, f, w // f, f))
    y = T.permute(y, (0, 1, 4, 6, 2, 3, 5))
    return T.reshape(y, (b, c * f * f, t, h // f, w // f))
