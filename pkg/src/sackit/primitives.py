"""Normalization and low-rank adapter math, plus a small ViT-style segmenter.

The array functions accept either NumPy arrays or torch tensors and return
the same kind they were given.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DegenerateInputError, ParameterError, ShapeError

NORM_KINDS = ("layer", "batch", "group")
DEFAULT_EPS = 1e-5


def _default_channel_axis(kind: str) -> int:
    return -1 if kind == "layer" else 1


def _check_kind(kind):
    if kind not in NORM_KINDS:
        raise ParameterError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")


@dataclass
class NormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_EPS
    kind: str = "layer"
    groups: int = 1

    def __post_init__(self):
        _check_kind(self.kind)
        if len(self.gamma) != len(self.beta):
            raise ShapeError(f"gamma has {len(self.gamma)} entries, beta has {len(self.beta)}")
        # eps = 0 is allowed so the bare transform can be checked by hand
        if not self.eps >= 0:
            raise ParameterError(f"eps must be non-negative, got {self.eps}")
        if self.kind == "group" and (self.groups < 1 or len(self.gamma) % self.groups):
            raise ParameterError(f"{self.groups} groups do not divide {len(self.gamma)} channels")

    @property
    def channels(self) -> int:
        return len(self.gamma)


def compute_stats(x, kind: str = "layer", groups: int = 1, channel_axis: Optional[int] = None):
    """Mean and (population) standard deviation over the axes ``kind`` reduces.

    * ``layer``: over the feature axis at every position (``channel_axis``,
      default last).
    * ``batch``: over every axis except the channel axis (default 1), i.e.
      batch and spatial positions per channel.
    * ``group``: per sample, over each group of ``C/groups`` channels and
      all spatial positions; needs ``x`` shaped ``(N, C, ...)``.

    Both outputs keep reduced axes so they broadcast against ``x``.
    """
    _check_kind(kind)
    is_torch = isinstance(x, torch.Tensor)
    if not is_torch:
        x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or _numel(x) == 0:
        raise DegenerateInputError("cannot normalize an empty input")
    axis = _default_channel_axis(kind) if channel_axis is None else channel_axis
    axis = axis % x.ndim

    if kind == "layer":
        axes = (axis,)
    elif kind == "batch":
        axes = tuple(a for a in range(x.ndim) if a != axis)
        if not axes:
            raise DegenerateInputError("batch statistics need at least one non-channel axis")
    else:
        if x.ndim < 2 or axis != 1:
            raise ShapeError("group statistics expect input shaped (N, C, ...)")
        n, c = x.shape[:2]
        if groups < 1 or c % groups:
            raise ParameterError(f"{groups} groups do not divide {c} channels")
        grouped = x.reshape(n, groups, -1)
        mu, sigma = _mean_std(grouped, (2,), is_torch)
        rest = (1,) * (x.ndim - 2)
        if is_torch:
            mu = mu.repeat_interleave(c // groups, dim=1).reshape(n, c, *rest)
            sigma = sigma.repeat_interleave(c // groups, dim=1).reshape(n, c, *rest)
        else:
            mu = np.repeat(mu, c // groups, axis=1).reshape(n, c, *rest)
            sigma = np.repeat(sigma, c // groups, axis=1).reshape(n, c, *rest)
        return mu, sigma

    if any(x.shape[a] == 0 for a in axes):
        raise DegenerateInputError("empty reduction axis")
    return _mean_std(x, axes, is_torch)


def _numel(x):
    return x.numel() if isinstance(x, torch.Tensor) else x.size


def _mean_std(x, axes, is_torch):
    if is_torch:
        mu = x.mean(dim=axes, keepdim=True)
        sigma = ((x - mu) ** 2).mean(dim=axes, keepdim=True).sqrt()
    else:
        mu = x.mean(axis=axes, keepdims=True)
        sigma = np.sqrt(((x - mu) ** 2).mean(axis=axes, keepdims=True))
    return mu, sigma


def _affine_shape(ndim: int, channel_axis: int, channels: int):
    shape = [1] * ndim
    shape[channel_axis % ndim] = channels
    return shape


def normalize_affine(x, mu, sigma, params: NormParams, channel_axis: Optional[int] = None):
    """``gamma * (x - mu) / (sigma + eps) + beta``.

    ``eps`` is added to the standard deviation, not to the variance.
    ``gamma``/``beta`` are laid along ``channel_axis`` (default: last axis for
    layer norm, axis 1 otherwise).
    """
    is_torch = isinstance(x, torch.Tensor)
    if not is_torch:
        x = np.asarray(x, dtype=np.float64)
    axis = _default_channel_axis(params.kind) if channel_axis is None else channel_axis
    ndim = max(x.ndim, 1)
    shape = _affine_shape(ndim, axis, len(params.gamma))
    if is_torch:
        gamma = torch.as_tensor(params.gamma, dtype=x.dtype).reshape(shape)
        beta = torch.as_tensor(params.beta, dtype=x.dtype).reshape(shape)
        mu = torch.as_tensor(mu, dtype=x.dtype)
        sigma = torch.as_tensor(sigma, dtype=x.dtype)
        broadcast = torch.broadcast_shapes
    else:
        gamma = np.asarray(params.gamma, dtype=np.float64).reshape(shape)
        beta = np.asarray(params.beta, dtype=np.float64).reshape(shape)
        mu = np.asarray(mu, dtype=np.float64)
        sigma = np.asarray(sigma, dtype=np.float64)
        broadcast = np.broadcast_shapes
    try:
        out_shape = broadcast(tuple(x.shape), tuple(mu.shape), tuple(sigma.shape), tuple(gamma.shape))
    except (ValueError, RuntimeError) as exc:
        raise ShapeError(f"cannot broadcast statistics/affine parameters against {tuple(x.shape)}") from exc
    if tuple(out_shape) != tuple(x.shape):
        raise ShapeError(f"parameters would change output shape {tuple(x.shape)} -> {tuple(out_shape)}")
    x_hat = (x - mu) / (sigma + params.eps)
    return gamma * x_hat + beta


def normalize_affine_grad(x, mu, sigma, params: NormParams, grad_out, channel_axis: Optional[int] = None):
    """Closed-form gradients of ``sum(grad_out * normalize_affine(...))`` w.r.t. gamma and beta.

    Statistics are treated as constants. Returns NumPy arrays of length C.
    """
    x = np.asarray(x, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    axis = (_default_channel_axis(params.kind) if channel_axis is None else channel_axis) % max(x.ndim, 1)
    x_hat = np.broadcast_to((x - np.asarray(mu)) / (np.asarray(sigma) + params.eps), x.shape)
    others = tuple(a for a in range(x.ndim) if a != axis)
    dgamma = (grad_out * x_hat).sum(axis=others)
    dbeta = grad_out.sum(axis=others)
    if len(params.gamma) == 1:
        return np.atleast_1d(dgamma.sum()), np.atleast_1d(dbeta.sum())
    return np.atleast_1d(dgamma), np.atleast_1d(dbeta)


# -- low-rank adapters ----------------------------------------------------------


@dataclass
class LoRAAdapter:
    A: np.ndarray  # rank x d_in
    B: np.ndarray  # d_out x rank
    scale: float = 1.0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.A.ndim != 2 or self.B.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise ShapeError(f"A is {self.A.shape}, B is {self.B.shape}: ranks disagree")
        if not self.scale > 0:
            raise ParameterError("adapter scale must be positive")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def num_params(self) -> int:
        return self.A.size + self.B.size

    @classmethod
    def init(cls, d_in: int, d_out: int, rank: int, seed: int = 0, std: float = 0.02, scale: float = 1.0):
        """Gaussian ``A``, zero ``B``: the adapter starts as an exact no-op."""
        if min(d_in, d_out, rank) < 0:
            raise ParameterError("adapter dimensions must be non-negative")
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std, (rank, d_in)), np.zeros((d_out, rank)), scale)


def lora_forward(x, base_output, adapter: LoRAAdapter):
    x = np.asarray(x, dtype=np.float64)
    base_output = np.asarray(base_output, dtype=np.float64)
    if x.shape[-1] != adapter.d_in or base_output.shape[-1] != adapter.d_out:
        raise ShapeError(
            f"adapter maps {adapter.d_in}->{adapter.d_out}, got input {x.shape} and base {base_output.shape}"
        )
    if adapter.rank == 0:
        return base_output.copy()
    return base_output + adapter.scale * (x @ adapter.A.T) @ adapter.B.T


def lora_param_count(d_in: int, d_out: int, r: int, n_sites: int = 1) -> int:
    if min(d_in, d_out, r, n_sites) < 0:
        raise ParameterError("counts must be non-negative")
    return n_sites * r * (d_in + d_out)


# -- torch layers -----------------------------------------------------------------


class AffineNorm(nn.Module):
    """Layer, batch or group normalization with eps added to the standard deviation.

    ``weight`` is gamma and ``bias`` is beta. Batch kind keeps running mean
    and standard deviation buffers used in eval mode; whether training-mode
    passes refresh them is controlled by ``update_running_stats``.
    """

    def __init__(self, num_channels, kind="layer", groups=1, eps=DEFAULT_EPS, channel_axis=None, momentum=0.1):
        super().__init__()
        _check_kind(kind)
        if kind == "group" and num_channels % groups:
            raise ConfigurationError(f"{groups} groups do not divide {num_channels} channels")
        self.kind = kind
        self.groups = groups
        self.eps = eps
        self.channel_axis = _default_channel_axis(kind) if channel_axis is None else channel_axis
        self.momentum = momentum
        self.update_running_stats = True
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        if kind == "batch":
            self.register_buffer("running_mean", torch.zeros(num_channels))
            self.register_buffer("running_std", torch.ones(num_channels))

    @property
    def num_channels(self):
        return self.weight.shape[0]

    def forward(self, x):
        shape = _affine_shape(x.ndim, self.channel_axis, self.num_channels)
        if self.kind == "batch" and not self.training:
            mu = self.running_mean.reshape(shape)
            sigma = self.running_std.reshape(shape)
        else:
            mu, sigma = compute_stats(x, self.kind, self.groups, self.channel_axis)
            if self.kind == "batch" and self.update_running_stats:
                with torch.no_grad():
                    m = self.momentum
                    self.running_mean.mul_(1 - m).add_(m * mu.reshape(-1))
                    self.running_std.mul_(1 - m).add_(m * sigma.reshape(-1))
        x_hat = (x - mu) / (sigma + self.eps)
        return self.weight.reshape(shape) * x_hat + self.bias.reshape(shape)

    def extra_repr(self):
        return f"{self.num_channels}, kind={self.kind}, eps={self.eps}"


class LoRALinear(nn.Linear):
    """A linear layer carrying a rank-``r`` update ``scale * B @ A`` (weights only).

    Base ``weight``/``bias`` keep their names so parameter groups stay stable
    after injection.
    """

    def __init__(self, in_features, out_features, rank, bias=True, scale=1.0, std=0.02):
        super().__init__(in_features, out_features, bias=bias)
        self.rank = rank
        self.scale = scale
        self.lora_A = nn.Parameter(torch.randn(rank, in_features) * std)
        self.lora_B = nn.Parameter(torch.zeros(out_features, rank))

    @classmethod
    def from_linear(cls, linear: nn.Linear, rank: int, generator: Optional[torch.Generator] = None):
        layer = cls(linear.in_features, linear.out_features, rank, bias=linear.bias is not None)
        with torch.no_grad():
            layer.weight.copy_(linear.weight)
            if linear.bias is not None:
                layer.bias.copy_(linear.bias)
            layer.lora_A.normal_(0.0, 0.02, generator=generator)
        return layer

    def forward(self, x):
        out = F.linear(x, self.weight, self.bias)
        if self.rank == 0:
            return out
        return out + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)


# -- toy segmenter ---------------------------------------------------------------


@dataclass
class ToySegmenterSpec:
    input_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: int = 2
    decoder_channels: tuple = (32, 16)
    skip_channels: int = 8
    encoder_norm: str = "layer"
    decoder_norms: tuple = ("batch", "batch")
    skip_norm: Optional[str] = "batch"
    norm_groups: int = 4

    def __post_init__(self):
        self.decoder_channels = tuple(self.decoder_channels)
        self.decoder_norms = tuple(self.decoder_norms)

    def validate(self):
        if min(self.input_size, self.patch_size, self.embed_dim, self.depth, self.num_heads) < 1:
            raise ConfigurationError("toy segmenter dimensions must be positive")
        if self.input_size % self.patch_size:
            raise ConfigurationError(f"patch {self.patch_size} does not tile input {self.input_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(f"{self.num_heads} heads do not divide embed dim {self.embed_dim}")
        if len(self.decoder_channels) != len(self.decoder_norms) or not self.decoder_channels:
            raise ConfigurationError("need one decoder norm kind per decoder stage")
        if self.encoder_norm != "layer":
            raise ConfigurationError("transformer blocks use layer normalization")
        for kind in self.decoder_norms + ((self.skip_norm,) if self.skip_norm else ()):
            _check_kind(kind)
        grid = self.input_size // self.patch_size
        if grid * 2 ** (len(self.decoder_channels) - 1) > self.input_size:
            raise ConfigurationError("too many decoder stages for the token grid")
        for c, kind in zip(self.decoder_channels, self.decoder_norms):
            if kind == "group" and c % self.norm_groups:
                raise ConfigurationError(f"{self.norm_groups} groups do not divide {c} channels")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        d["decoder_norms"] = list(self.decoder_norms)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ToySegmenterSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(f"bad toy segmenter spec: {exc}") from exc


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        n, length, dim = x.shape
        qkv = self.qkv(x).reshape(n, length, 3, self.num_heads, dim // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(n, length, dim))


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.lin1 = nn.Linear(dim, hidden)
        self.lin2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.lin2(F.gelu(self.lin1(x)))


class Block(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        self.norm1 = AffineNorm(dim, "layer")
        self.attn = Attention(dim, num_heads)
        self.norm2 = AffineNorm(dim, "layer")
        self.mlp = Mlp(dim, dim * mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, spec: ToySegmenterSpec):
        super().__init__()
        grid = spec.input_size // spec.patch_size
        self.patch_embed = nn.Conv2d(3, spec.embed_dim, spec.patch_size, stride=spec.patch_size)
        self.pos_embed = nn.Parameter(torch.randn(1, grid * grid, spec.embed_dim) * 0.02)
        self.blocks = nn.ModuleList(Block(spec.embed_dim, spec.num_heads, spec.mlp_ratio) for _ in range(spec.depth))
        self.grid = grid

    def forward(self, x):
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        n, _, dim = tokens.shape
        return tokens.transpose(1, 2).reshape(n, dim, self.grid, self.grid)


def _decoder_norm(channels, kind, groups):
    return AffineNorm(channels, kind, groups=groups, channel_axis=1)


class Decoder(nn.Module):
    """Upsampling conv stages; the last stage also sees a full-resolution skip branch."""

    def __init__(self, spec: ToySegmenterSpec):
        super().__init__()
        chans = (spec.embed_dim,) + spec.decoder_channels
        self.stages = nn.ModuleList()
        self.norms = nn.ModuleList()
        n_stages = len(spec.decoder_channels)
        for i in range(n_stages):
            c_in = chans[i] + (spec.skip_channels if i == n_stages - 1 else 0)
            self.stages.append(nn.Conv2d(c_in, chans[i + 1], 3, padding=1))
            self.norms.append(_decoder_norm(chans[i + 1], spec.decoder_norms[i], spec.norm_groups))
        self.skip = nn.Conv2d(3, spec.skip_channels, 3, padding=1)
        self.skip_norm = (
            _decoder_norm(spec.skip_channels, spec.skip_norm, spec.norm_groups) if spec.skip_norm else nn.Identity()
        )
        self.head = nn.Conv2d(chans[-1], 1, 1)
        self.size = spec.input_size

    def forward(self, features, image):
        x = features
        last = len(self.stages) - 1
        for i, (conv, norm) in enumerate(zip(self.stages, self.norms)):
            if i == last:
                x = F.interpolate(x, size=(self.size, self.size), mode="bilinear", align_corners=False)
                x = torch.cat([x, F.gelu(self.skip_norm(self.skip(image)))], dim=1)
            else:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = F.gelu(norm(conv(x)))
        return self.head(x)[:, 0]


class ToySegmenter(nn.Module):
    """Maps ``N x 3 x H x W`` images to ``N x H x W`` crack probabilities."""

    def __init__(self, spec: ToySegmenterSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.decoder = Decoder(spec)

    def forward(self, x):
        if x.shape[-2:] != (self.spec.input_size, self.spec.input_size):
            raise ShapeError(f"model expects {self.spec.input_size}px inputs, got {tuple(x.shape[-2:])}")
        return torch.sigmoid(self.decoder(self.encoder(x), x))

    @torch.no_grad()
    def predict(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Probability maps for ``N x H x W x 3`` images in [0, 1]."""
        was_training = self.training
        self.eval()
        out = []
        for start in range(0, len(images), batch_size):
            chunk = torch.from_numpy(np.ascontiguousarray(images[start:start + batch_size], dtype=np.float32))
            out.append(self(chunk.permute(0, 3, 1, 2)).numpy())
        self.train(was_training)
        if not out:
            return np.zeros((0, self.spec.input_size, self.spec.input_size), np.float32)
        return np.concatenate(out)


def build_toy_segmenter(spec: Optional[ToySegmenterSpec] = None, seed: int = 0) -> ToySegmenter:
    spec = spec or ToySegmenterSpec()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ToySegmenter(spec)


def iter_norm_layers(model: nn.Module):
    for name, module in model.named_modules():
        if isinstance(module, AffineNorm):
            yield name, module
