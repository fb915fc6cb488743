"""Segment-structured bimanual policy network.

Token layout per sample (``+style`` only when a latent is supplied)::

    left   : [CLS_l, joints_l, wrist_left x9, (style)]
    right  : [CLS_r, joints_r, wrist_right x9, (style)]
    global : [CLS_g, joints_l, joints_r, top x9, front x9, (style)]

Each arm has its own local encoder. The inter-arm coordination encoder (IACE)
runs over the global segment; its output joins the decoder memory only when the
variant enables it. With split decoders and no IACE, an arm's output columns
are computed from that arm's joints and wrist camera alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import Tensor, nn

from .nn import ConfigurationError, ConvTokenizer, Decoder, Encoder, Linear, ShapeError, initialize, positional_embed

CAMERAS = ("wrist_left", "wrist_right", "top", "front")
SIDES = ("left", "right")


class ContractViolation(RuntimeError):
    pass


class ObservationError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyVariant:
    decoder_mode: str = "split"
    iace_enabled: bool = True

    def __post_init__(self):
        if self.decoder_mode not in ("single", "split"):
            raise ConfigurationError(f"decoder_mode must be 'single' or 'split', got {self.decoder_mode!r}")
        if not isinstance(self.iace_enabled, (bool, np.bool_)):
            raise ConfigurationError("iace_enabled must be a bool")

    @property
    def name(self) -> str:
        return f"{self.decoder_mode}{'+iace' if self.iace_enabled else ''}"

    @classmethod
    def parse(cls, name: str) -> "PolicyVariant":
        mode, _, rest = name.partition("+")
        return cls(mode, rest == "iace")


VARIANTS = tuple(PolicyVariant(mode, iace) for iace in (True, False) for mode in ("single", "split"))


@dataclass
class ObservationFrame:
    joints_left: np.ndarray
    joints_right: np.ndarray
    images: dict[str, np.ndarray]

    def validate(self, image_shape: tuple[int, int, int] | None = None) -> None:
        jl, jr = np.asarray(self.joints_left), np.asarray(self.joints_right)
        if jl.ndim != 1 or jl.shape != jr.shape or len(jl) < 2:
            raise ObservationError("joint vectors must be 1-D, equal length, with J >= 2")
        for cam in CAMERAS:
            if cam not in self.images:
                raise ObservationError(f"missing camera {cam!r}")
            img = np.asarray(self.images[cam])
            if image_shape is not None and img.shape != tuple(image_shape):
                raise ObservationError(f"camera {cam!r} has shape {img.shape}, expected {tuple(image_shape)}")
            if img.size and (img.min() < 0.0 or img.max() > 1.0):
                raise ObservationError(f"camera {cam!r} pixel values outside [0, 1]")

    def joints(self) -> np.ndarray:
        return np.concatenate([self.joints_left, self.joints_right])

    def image_stack(self) -> np.ndarray:
        return np.stack([np.asarray(self.images[cam]) for cam in CAMERAS])

    @classmethod
    def from_arrays(cls, joints: np.ndarray, images: np.ndarray) -> "ObservationFrame":
        J = len(joints) // 2
        return cls(np.asarray(joints[:J]), np.asarray(joints[J:]), dict(zip(CAMERAS, images)))


@dataclass
class SegmentedTokens:
    left: Tensor
    right: Tensor
    global_: Tensor | None
    has_style: bool = False


@dataclass
class LatentStyle:
    mu: Tensor
    logvar: Tensor
    z: Tensor | None = None


@dataclass
class PolicyConfig:
    joint_dim: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    local_layers: int = 2
    iace_layers: int = 2
    decoder_layers: int = 3
    cvae_layers: int = 1
    chunk_size: int = 20
    z_dim: int = 32
    image_shape: tuple[int, int, int] = (48, 48, 3)
    conv_channels: tuple[int, int, int] = (16, 32, 32)
    variant: PolicyVariant = field(default_factory=PolicyVariant)

    def __post_init__(self):
        if isinstance(self.variant, dict):
            self.variant = PolicyVariant(**self.variant)
        self.image_shape = tuple(self.image_shape)
        self.conv_channels = tuple(self.conv_channels)
        for name in ("joint_dim", "d_model", "n_heads", "d_ff", "local_layers", "decoder_layers", "chunk_size", "z_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.joint_dim < 2:
            raise ConfigurationError("joint_dim must be >= 2 (joints plus gripper)")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.variant.iace_enabled and self.iace_layers < 1:
            raise ConfigurationError("iace_layers must be positive when IACE is enabled")

    def to_dict(self) -> dict:
        return asdict(self)


class TokenTable(nn.Module):
    """Learned token rows (CLS tokens, decoder queries)."""

    def __init__(self, n: int, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n, d))
        self.reset_parameters(torch.Generator().manual_seed(0))

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            self.weight.uniform_(-1.0, 1.0, generator=generator)


def _squash_gripper(raw: Tensor, joint_dim: int) -> Tensor:
    """Logistic on every ``joint_dim``-th column (the gripper of each arm)."""
    grip = torch.zeros(raw.shape[-1], dtype=torch.bool, device=raw.device)
    grip[joint_dim - 1::joint_dim] = True
    return torch.where(grip, torch.sigmoid(raw), raw)


class IACEPolicyNetwork(nn.Module):
    def __init__(self, cfg: PolicyConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d, J, k = cfg.d_model, cfg.joint_dim, cfg.chunk_size
        variant = cfg.variant

        self.tokenizer = ConvTokenizer(d, cfg.image_shape, cfg.conv_channels)
        n_img = self.tokenizer.token_count
        self.joint_proj = nn.ModuleDict({s: Linear(J, d) for s in SIDES})
        self.cls = TokenTable(3, d)  # left, right, global
        self.style_proj = Linear(cfg.z_dim, d)
        self.local = nn.ModuleDict({s: Encoder(d, cfg.n_heads, cfg.d_ff, cfg.local_layers) for s in SIDES})
        self.iace = Encoder(d, cfg.n_heads, cfg.d_ff, cfg.iace_layers) if variant.iace_enabled else None

        if variant.decoder_mode == "single":
            self.queries = TokenTable(k, d)
            self.decoder = Decoder(d, cfg.n_heads, cfg.d_ff, cfg.decoder_layers)
            self.head = Linear(d, 2 * J)
        else:
            self.split_queries = nn.ModuleDict({s: TokenTable(k, d) for s in SIDES})
            self.split_decoders = nn.ModuleDict({s: Decoder(d, cfg.n_heads, cfg.d_ff, cfg.decoder_layers) for s in SIDES})
            self.split_heads = nn.ModuleDict({s: Linear(d, J) for s in SIDES})

        self.cvae_cls = TokenTable(1, d)
        self.cvae_joint = Linear(2 * J, d)
        self.cvae_action = Linear(2 * J, d)
        self.cvae_encoder = Encoder(d, cfg.n_heads, cfg.d_ff, cfg.cvae_layers)
        self.cvae_head = Linear(d, 2 * cfg.z_dim)

        longest = max(3 + 2 * n_img, 2 + k) + 1
        self.register_buffer("pos", positional_embed(longest, d, torch.float32), persistent=False)
        initialize(self, seed)

    # -- tokens ------------------------------------------------------------

    @property
    def variant(self) -> PolicyVariant:
        return self.cfg.variant

    def _pos(self, n: int) -> Tensor:
        return self.pos[:n]

    def assemble_tokens(self, joints: Tensor, images: Tensor, z: Tensor | None = None, include_global: bool = True) -> SegmentedTokens:
        """``joints`` (B, 2J), ``images`` (B, 4, H, W, C) in ``CAMERAS`` order, ``z`` (B, z_dim)."""
        J = self.cfg.joint_dim
        if joints.shape[-1] != 2 * J:
            raise ShapeError(f"expected {2 * J} joint values, got {joints.shape[-1]}")
        if images.shape[-4] != len(CAMERAS):
            raise ObservationError(f"expected {len(CAMERAS)} cameras, got {images.shape[-4]}")
        B = joints.shape[0]
        cls = self.cls.weight.expand(B, -1, -1)
        j_tok = {
            "left": self.joint_proj["left"](joints[:, :J])[:, None],
            "right": self.joint_proj["right"](joints[:, J:])[:, None],
        }
        style = self.style_proj(z)[:, None] if z is not None else None

        def seg(parts: list[Tensor]) -> Tensor:
            if style is not None:
                parts = parts + [style]
            x = torch.cat(parts, dim=1)
            return x + self._pos(x.shape[1])

        # one tokenizer call per camera keeps each camera's tokens independent of the others
        left = seg([cls[:, 0:1], j_tok["left"], self.tokenizer(images[:, 0])])
        right = seg([cls[:, 1:2], j_tok["right"], self.tokenizer(images[:, 1])])
        glob = None
        if include_global:
            glob = seg([cls[:, 2:3], j_tok["left"], j_tok["right"], self.tokenizer(images[:, 2]), self.tokenizer(images[:, 3])])
        return SegmentedTokens(left, right, glob, style is not None)

    # -- encoders ----------------------------------------------------------

    def encode_local(self, segment: Tensor, side: str) -> Tensor:
        return self.local[side](segment)

    def encode_iace(self, global_segment: Tensor) -> Tensor:
        if self.iace is None:
            raise ContractViolation("encode_iace called on a variant without IACE")
        return self.iace(global_segment)

    # -- decoders ----------------------------------------------------------

    def decode_single(self, mem_left: Tensor, mem_right: Tensor, mem_iace: Tensor | None = None) -> Tensor:
        if self.variant.decoder_mode != "single":
            raise ContractViolation("decode_single called on a split-decoder variant")
        parts = [mem_left, mem_right] + ([mem_iace] if mem_iace is not None else [])
        if len({p.shape[-1] for p in parts}) != 1:
            raise ShapeError("decoder memories must share the model width")
        memory = torch.cat(parts, dim=1)
        q = self.queries.weight.expand(memory.shape[0], -1, -1)
        out = self.head(self.decoder(q, memory))
        return _squash_gripper(out, self.cfg.joint_dim)

    def decode_split(self, mem_arm: Tensor, mem_iace: Tensor | None, side: str) -> Tensor:
        if self.variant.decoder_mode != "split":
            raise ContractViolation("decode_split called on a single-decoder variant")
        if mem_iace is not None and mem_iace.shape[-1] != mem_arm.shape[-1]:
            raise ShapeError("decoder memories must share the model width")
        memory = mem_arm if mem_iace is None else torch.cat([mem_arm, mem_iace], dim=1)
        q = self.split_queries[side].weight.expand(memory.shape[0], -1, -1)
        out = self.split_heads[side](self.split_decoders[side](q, memory))
        return _squash_gripper(out, self.cfg.joint_dim)

    # -- CVAE --------------------------------------------------------------

    def cvae_encode(self, target_chunk: Tensor, joints: Tensor) -> LatentStyle:
        """Posterior over the style latent from ``(B, k', 2J)`` targets and current joints.

        Chunks shorter than the horizon are padded with their last action; the
        padded positions are masked out of attention.
        """
        B, n, _ = target_chunk.shape
        k = self.cfg.chunk_size
        if n < 1:
            raise ShapeError("target chunk must contain at least one action")
        if n > k:
            raise ShapeError(f"target chunk longer than horizon {k}")
        mask = None
        if n < k:
            pad = target_chunk[:, -1:].expand(B, k - n, -1)
            target_chunk = torch.cat([target_chunk, pad], dim=1)
            mask = torch.zeros(B, k + 2, dtype=torch.bool, device=target_chunk.device)
            mask[:, 2 + n:] = True
        x = torch.cat([
            self.cvae_cls.weight.expand(B, -1, -1),
            self.cvae_joint(joints)[:, None],
            self.cvae_action(target_chunk),
        ], dim=1)
        x = x + self._pos(x.shape[1])
        h = self.cvae_encoder(x, mask)[:, 0]
        stats = self.cvae_head(h)
        z_dim = self.cfg.z_dim
        return LatentStyle(stats[:, :z_dim], stats[:, z_dim:])

    # -- full pass ---------------------------------------------------------

    def forward(self, joints: Tensor, images: Tensor, z: Tensor | None = None) -> Tensor:
        """Action chunk ``(B, k, 2J)``; split outputs are concatenated left then right."""
        iace_on = self.variant.iace_enabled
        tokens = self.assemble_tokens(joints, images, z, include_global=iace_on)
        mem_l = self.encode_local(tokens.left, "left")
        mem_r = self.encode_local(tokens.right, "right")
        mem_g = self.encode_iace(tokens.global_) if iace_on else None
        if self.variant.decoder_mode == "single":
            return self.decode_single(mem_l, mem_r, mem_g)
        return torch.cat([self.decode_split(mem_l, mem_g, "left"), self.decode_split(mem_r, mem_g, "right")], dim=-1)


def sample_latent(style: LatentStyle, mode: str, generator: torch.Generator | None = None) -> Tensor:
    """Reparameterized draw in ``train`` mode, the zero vector in ``infer`` mode."""
    if mode == "infer":
        return torch.zeros_like(style.mu)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    eps = torch.randn(style.mu.shape, generator=generator, dtype=style.mu.dtype, device=style.mu.device)
    return style.mu + torch.exp(style.logvar / 2) * eps


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dims, per sample."""
    # expm1(x) >= x survives rounding, so every term stays non-negative
    return 0.5 * (mu * mu + (torch.expm1(logvar) - logvar)).sum(-1)


def loss(pred: Tensor, target: Tensor, style: LatentStyle | None, kl_weight: float = 10.0) -> Tensor:
    """Mean absolute error over every chunk entry plus ``kl_weight`` times the batch-mean KL."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    recon = (pred - target).abs().mean()
    if style is None:
        return recon
    return recon + kl_weight * kl_divergence(style.mu, style.logvar).mean()
