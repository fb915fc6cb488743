"""Small transformer substrate: dense layers, attention, norms, conv tokenizer.

All functional ops act on the trailing two dimensions ``(tokens, width)`` and
broadcast over any leading batch dimensions. Nothing here uses statistics
across batch elements, so sample ``i`` of a batch is computed exactly as it
would be on its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up."""


class ConfigurationError(ValueError):
    """Raised for invalid hyperparameters."""


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise ``x @ weight + bias`` with ``weight`` of shape ``(in, out)``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    y = x @ weight
    if bias is not None:
        if bias.shape[-1] != weight.shape[1]:
            raise ShapeError("linear: bias width does not match weight columns")
        y = y + bias
    return y


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive")
    if gain.shape[-1] != x.shape[-1] or shift.shape[-1] != x.shape[-1]:
        raise ShapeError("layer_norm: gain/shift width mismatch")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + shift


def multi_head_attention(
    queries: Tensor,
    keys_values: Tensor,
    head_count: int,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    b_q: Tensor | None = None,
    b_k: Tensor | None = None,
    b_v: Tensor | None = None,
    b_o: Tensor | None = None,
    key_padding_mask: Tensor | None = None,
) -> Tensor:
    """Scaled dot-product attention split over ``head_count`` heads.

    ``key_padding_mask`` is boolean ``(..., n_keys)``; True marks keys to ignore.
    """
    d = queries.shape[-1]
    if head_count < 1 or d % head_count:
        raise ConfigurationError(f"width {d} not divisible by head_count {head_count}")
    if keys_values.shape[-1] != d:
        raise ShapeError(f"attention: memory width {keys_values.shape[-1]} != query width {d}")
    d_head = d // head_count

    q = linear(queries, w_q, b_q)
    k = linear(keys_values, w_k, b_k)
    v = linear(keys_values, w_v, b_v)

    def split(t: Tensor) -> Tensor:
        # (..., n, d) -> (..., h, n, d_head)
        return t.unflatten(-1, (head_count, d_head)).transpose(-3, -2)

    q, k, v = split(q), split(k), split(v)
    logits = (q @ k.transpose(-1, -2)) / math.sqrt(d_head)
    if key_padding_mask is not None:
        logits = logits.masked_fill(key_padding_mask[..., None, None, :], float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    out = (weights @ v).transpose(-3, -2).flatten(-2)
    return linear(out, w_o, b_o)


def positional_embed(seq_len: int, d: int, dtype: torch.dtype = torch.float64) -> Tensor:
    """Sinusoidal table: even columns ``sin(p / 10000**(2i/d))``, odd columns cos."""
    if seq_len < 1 or d < 1:
        raise ConfigurationError("positional_embed needs seq_len >= 1 and d >= 1")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    pair = np.arange(d) // 2
    angles = pos / np.power(10000.0, 2.0 * pair / d)[None, :]
    table = np.where(np.arange(d) % 2 == 0, np.sin(angles), np.cos(angles))
    return torch.from_numpy(table).to(dtype)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


def _uniform_(t: Tensor, fan_in: int, generator: torch.Generator | None) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)


def initialize(model: nn.Module, seed: int) -> nn.Module:
    """Re-draw every learned table and projection from a private generator seeded with ``seed``."""
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        reset = getattr(module, "reset_parameters", None)
        if callable(reset):
            reset(gen)
    return model


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_in, d_out))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        self.reset_parameters(torch.Generator().manual_seed(0))

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        _uniform_(self.weight, self.weight.shape[0], generator)
        if self.bias is not None:
            with torch.no_grad():
                self.bias.zero_()

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.shift = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift, self.eps)


class Attention(nn.Module):
    def __init__(self, d: int, head_count: int):
        super().__init__()
        if d % head_count:
            raise ConfigurationError(f"width {d} not divisible by head_count {head_count}")
        self.head_count = head_count
        self.q = Linear(d, d)
        # a key bias only adds a per-query constant to the logits, which softmax ignores
        self.k = Linear(d, d, bias=False)
        self.v = Linear(d, d)
        self.out = Linear(d, d)

    def forward(self, queries: Tensor, keys_values: Tensor, key_padding_mask: Tensor | None = None) -> Tensor:
        return multi_head_attention(
            queries, keys_values, self.head_count,
            self.q.weight, self.k.weight, self.v.weight, self.out.weight,
            self.q.bias, self.k.bias, self.v.bias, self.out.bias,
            key_padding_mask=key_padding_mask,
        )


class FeedForward(nn.Module):
    def __init__(self, d: int, d_ff: int):
        super().__init__()
        self.fc1 = Linear(d, d_ff)
        self.fc2 = Linear(d_ff, d)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Post-norm self-attention + feed-forward block."""

    def __init__(self, d: int, head_count: int, d_ff: int):
        super().__init__()
        self.attn = Attention(d, head_count)
        self.norm1 = LayerNorm(d)
        self.ff = FeedForward(d, d_ff)
        self.norm2 = LayerNorm(d)

    def forward(self, x: Tensor, key_padding_mask: Tensor | None = None) -> Tensor:
        x = self.norm1(x + self.attn(x, x, key_padding_mask))
        return self.norm2(x + self.ff(x))


class DecoderBlock(nn.Module):
    """Self-attention over queries, cross-attention into memory, feed-forward."""

    def __init__(self, d: int, head_count: int, d_ff: int):
        super().__init__()
        self.self_attn = Attention(d, head_count)
        self.norm1 = LayerNorm(d)
        self.cross_attn = Attention(d, head_count)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, d_ff)
        self.norm3 = LayerNorm(d)

    def forward(self, queries: Tensor, memory: Tensor) -> Tensor:
        if memory.shape[-1] != queries.shape[-1]:
            raise ShapeError(f"decoder: memory width {memory.shape[-1]} != query width {queries.shape[-1]}")
        x = self.norm1(queries + self.self_attn(queries, queries))
        x = self.norm2(x + self.cross_attn(x, memory))
        return self.norm3(x + self.ff(x))


class Encoder(nn.Module):
    def __init__(self, d: int, head_count: int, d_ff: int, depth: int):
        super().__init__()
        self.blocks = nn.ModuleList(EncoderBlock(d, head_count, d_ff) for _ in range(depth))

    def forward(self, x: Tensor, key_padding_mask: Tensor | None = None) -> Tensor:
        for block in self.blocks:
            x = block(x, key_padding_mask)
        return x


class Decoder(nn.Module):
    def __init__(self, d: int, head_count: int, d_ff: int, depth: int):
        super().__init__()
        self.blocks = nn.ModuleList(DecoderBlock(d, head_count, d_ff) for _ in range(depth))

    def forward(self, queries: Tensor, memory: Tensor) -> Tensor:
        for block in self.blocks:
            queries = block(queries, memory)
        return queries


class Conv2d(nn.Module):
    """Plain strided convolution over NCHW input with 1/sqrt(fan_in) init."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int = 0):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.stride = stride
        self.padding = padding
        self.reset_parameters(torch.Generator().manual_seed(0))

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        _, c_in, kh, kw = self.weight.shape
        _uniform_(self.weight, c_in * kh * kw, generator)
        with torch.no_grad():
            self.bias.zero_()

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTokenizer(nn.Module):
    """Three strided convolutions (total stride 16) followed by a projection to width ``d``.

    Takes images as ``(..., H, W, C)`` in [0, 1] and returns ``(..., (H/16)*(W/16), d)``
    tokens in row-major grid order.
    """

    stride = 16

    def __init__(self, d: int, image_shape: tuple[int, int, int] = (48, 48, 3), channels: tuple[int, int, int] = (16, 32, 32)):
        super().__init__()
        h, w, c = image_shape
        if h % self.stride or w % self.stride:
            raise ConfigurationError(f"image size {h}x{w} not divisible by stride {self.stride}")
        self.image_shape = tuple(image_shape)
        c1, c2, c3 = channels
        self.conv1 = Conv2d(c, c1, kernel=5, stride=2, padding=2)
        self.conv2 = Conv2d(c1, c2, kernel=3, stride=2, padding=1)
        self.conv3 = Conv2d(c2, c3, kernel=4, stride=4)
        self.proj = Linear(c3, d)

    @property
    def token_count(self) -> int:
        h, w, _ = self.image_shape
        return (h // self.stride) * (w // self.stride)

    def forward(self, image: Tensor) -> Tensor:
        if tuple(image.shape[-3:]) != self.image_shape:
            raise ShapeError(f"expected image shape {self.image_shape}, got {tuple(image.shape[-3:])}")
        lead = image.shape[:-3]
        x = image.reshape(-1, *self.image_shape).permute(0, 3, 1, 2)
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        x = F.gelu(self.conv3(x))
        x = x.flatten(2).transpose(1, 2)  # (N, tokens, c3)
        return self.proj(x).reshape(*lead, self.token_count, -1)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    epsilon: float
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    coords_checked: dict[str, int] = field(default_factory=dict)
    failure: str | None = None

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.failure is None and self.worst < self.tolerance


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def grad_check(
    model: nn.Module,
    loss_fn,
    epsilon: float = 1e-6,
    tolerance: float = 1e-4,
    coords_per_tensor: int = 32,
    seed: int = 0,
    corrupt: str | None = None,
) -> GradCheckReport:
    """Compare autograd gradients with central differences.

    ``loss_fn(model)`` must return a scalar tensor. Up to ``coords_per_tensor``
    coordinates of each parameter are sampled (all of them for small tensors).
    ``corrupt`` names a parameter whose analytic gradient is deliberately
    perturbed, to exercise the failure path.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ConfigurationError(f"epsilon must lie in [1e-7, 1e-4], got {epsilon}")
    params = dict(model.named_parameters())
    if any(p.dtype != torch.float64 for p in params.values()):
        raise ConfigurationError("grad_check requires a float64 model")

    report = GradCheckReport(epsilon=epsilon, tolerance=tolerance)
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    if not torch.isfinite(loss):
        report.failure = "non-finite loss at unperturbed parameters"
        return report
    loss.backward()

    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, p in params.items():
            grad = p.grad if p.grad is not None else torch.zeros_like(p)
            flat_grad = grad.reshape(-1).clone()
            if name == corrupt:
                flat_grad += 1.0 + flat_grad.abs()
            n = p.numel()
            idx = np.arange(n) if n <= coords_per_tensor else rng.choice(n, coords_per_tensor, replace=False)
            flat = p.data.view(-1)
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = loss_fn(model).item()
                flat[i] = orig - epsilon
                down = loss_fn(model).item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    report.failure = f"non-finite loss while perturbing {name}"
                    return report
                numeric = (up - down) / (2 * epsilon)
                worst = max(worst, relative_error(flat_grad[i].item(), numeric))
            report.max_rel_error[name] = worst
            report.coords_checked[name] = len(idx)
    return report
