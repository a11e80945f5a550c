"""Dual-branch transform: patch embedding, per-window semantic branch with
1-D aggregation tokens, detail branch (shifted-window attention + conv
blocks), cross-branch interactive attention, latent adaptor, pixel generator
and the frozen auxiliary encoder used as the latent-alignment target.

Geometry: images pad to multiples of 256 pixels so the 16x16-token windows
are complete; every window carries 256 grid tokens plus 32 one-dimensional
tokens (sequence length 288), and the interactive modules attend over the
544-token concatenation of both branches' window sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor, nn

from .config import ModelConfig
from .entropy_model import QuadtreeContext
from .quantization import ScalarQuantizer, VectorQuantizer


@dataclass
class ImagePlane:
    """Padded pixels (3, H, W) in [0, 1] plus the pre-padding size."""

    pixels: Tensor
    orig_h: int
    orig_w: int


def pad_to_multiple(image: Tensor, multiple: int = 16) -> ImagePlane:
    """Replication-pad so H and W are the smallest multiples of ``multiple``."""
    if image.dim() != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {tuple(image.shape)}")
    h0, w0 = int(image.shape[1]), int(image.shape[2])
    if h0 < 1 or w0 < 1:
        raise ValueError("empty image")
    pad_h = (-h0) % multiple
    pad_w = (-w0) % multiple
    if pad_h or pad_w:
        image = F.pad(image.unsqueeze(0), (0, pad_w, 0, pad_h), mode="replicate").squeeze(0)
    return ImagePlane(pixels=image, orig_h=h0, orig_w=w0)


def window_partition(x: Tensor, ws: int) -> Tensor:
    """(B, C, h, w) -> (B, N, ws*ws, C) with row-major windows and tokens."""
    if x.shape[-2] % ws or x.shape[-1] % ws:
        raise ValueError(f"grid {tuple(x.shape[-2:])} not divisible by window {ws}")
    return rearrange(x, "b c (gh p) (gw q) -> b (gh gw) (p q) c", p=ws, q=ws)


def window_merge(x: Tensor, ws: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    return rearrange(
        x, "b (gh gw) (p q) c -> b c (gh p) (gw q)", gh=h // ws, gw=w // ws, p=ws, q=ws
    )


class ChannelLayerNorm(nn.Module):
    """LayerNorm over channels at every spatial position.

    Unlike GroupNorm(1, C) this uses no spatial statistics, so the semantic
    branch stays strictly window-local when the interactive modules are off.
    """

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, l, c = x.shape
        qkv = self.qkv(x).reshape(b, l, 3, self.num_heads, c // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, l, c))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class ViTBlock(nn.Module):
    """Pre-norm transformer block on (B*, L, C) sequences."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class SemanticBlock(nn.Module):
    """ViT block applied independently to every window sequence."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.block = ViTBlock(dim, num_heads, mlp_ratio)

    def forward(self, f_s: Tensor) -> Tensor:  # (B, N, L, C)
        b, n, l, c = f_s.shape
        return self.block(f_s.reshape(b * n, l, c)).reshape(b, n, l, c)


class WindowAttention(nn.Module):
    """Shifted-window self-attention on a (B, C, h, w) grid (cyclic shift)."""

    def __init__(self, dim: int, num_heads: int, window: int, shift: int):
        super().__init__()
        self.window = window
        self.shift = shift
        self.norm = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        y = x
        if self.shift:
            y = torch.roll(y, shifts=(-self.shift, -self.shift), dims=(-2, -1))
        win = window_partition(y, self.window)  # (B, N, ws*ws, C)
        b, n, l, c = win.shape
        win = win.reshape(b * n, l, c)
        win = win + self.attn(self.norm(win))
        y = window_merge(win.reshape(b, n, l, c), self.window, h, w)
        if self.shift:
            y = torch.roll(y, shifts=(self.shift, self.shift), dims=(-2, -1))
        return y


class ConvNeXtBlock(nn.Module):
    def __init__(self, dim: int, ratio: float = 2.0):
        super().__init__()
        hidden = int(dim * ratio)
        self.dw = nn.Conv2d(dim, dim, 7, padding=3, groups=dim)
        self.norm = nn.GroupNorm(1, dim)
        self.pw1 = nn.Conv2d(dim, hidden, 1)
        self.pw2 = nn.Conv2d(hidden, dim, 1)
        self.gamma = nn.Parameter(torch.full((dim, 1, 1), 1e-2))

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.dw(x))
        y = self.pw2(F.gelu(self.pw1(y)))
        return x + self.gamma * y


class DetailBlock(nn.Module):
    """One detail-branch stage: (shifted-)window attention + ConvNeXt block."""

    def __init__(self, dim: int, num_heads: int, window: int, shift: int):
        super().__init__()
        self.attn = WindowAttention(dim, num_heads, window, shift)
        self.conv = ConvNeXtBlock(dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(self.attn(x))


class InteractiveTransform(nn.Module):
    """Joint self-attention over the concatenated semantic (288) and detail
    (256) window sequences.  Output projections are zero-initialized, so a
    fresh module is an exact identity (residual form)."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, window: int):
        super().__init__()
        self.window = window
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        nn.init.zeros_(self.attn.proj.weight)
        nn.init.zeros_(self.attn.proj.bias)
        nn.init.zeros_(self.mlp.fc2.weight)
        nn.init.zeros_(self.mlp.fc2.bias)

    def forward(self, f_s: Tensor, f_d: Tensor) -> tuple[Tensor, Tensor]:
        b, n, l_s, c = f_s.shape
        h, w = f_d.shape[-2:]
        fd_win = window_partition(f_d, self.window)  # (B, N_d, 256, C)
        if fd_win.shape[1] != n:
            raise ValueError(
                f"window count mismatch: semantic {n} vs detail {fd_win.shape[1]}"
            )
        joint = torch.cat([f_s, fd_win], dim=2).reshape(b * n, l_s + fd_win.shape[2], c)
        joint = joint + self.attn(self.norm1(joint))
        joint = joint + self.mlp(self.norm2(joint))
        joint = joint.reshape(b, n, -1, c)
        out_s = joint[:, :, :l_s]
        out_d = window_merge(joint[:, :, l_s:], self.window, h, w)
        return out_s, out_d


class Stage(nn.Module):
    """[semantic block, detail block, interactive module] triplet."""

    def __init__(self, cfg: ModelConfig, shift: int):
        super().__init__()
        self.semantic = SemanticBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio)
        self.detail = DetailBlock(cfg.embed_dim, cfg.num_heads, cfg.detail_window, shift)
        self.interactive = InteractiveTransform(
            cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, cfg.window
        )

    def forward(self, f_s: Tensor, f_d: Tensor, use_it: bool) -> tuple[Tensor, Tensor]:
        f_s = self.semantic(f_s)
        f_d = self.detail(f_d)
        if use_it:
            f_s, f_d = self.interactive(f_s, f_d)
        return f_s, f_d


class LatentAdaptor(nn.Module):
    """Fuses (h_d, h_s) by channel concatenation + learned mixing blocks."""

    def __init__(self, dim: int):
        super().__init__()
        self.merge = nn.Conv2d(2 * dim, dim, 1)
        self.mix = nn.Sequential(ConvNeXtBlock(dim), ConvNeXtBlock(dim))

    def forward(self, h_d: Tensor, h_s: Tensor) -> Tensor:
        if h_d.shape != h_s.shape:
            raise ValueError(f"shape mismatch {tuple(h_d.shape)} vs {tuple(h_s.shape)}")
        return self.mix(self.merge(torch.cat([h_d, h_s], dim=1)))


class _ResBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(F.gelu(self.conv1(x)))


class AuxiliaryEncoder(nn.Module):
    """Plain conv encoder (16x downsample) producing the latent target."""

    def __init__(self, dim: int, base: int = 64):
        super().__init__()
        c1, c2 = base // 2, base
        self.net = nn.Sequential(
            nn.Conv2d(3, c1, 4, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(c1, c1, 4, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(c1, c2, 4, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(c2, c2, 4, stride=2, padding=1), nn.GELU(),
            _ResBlock(c2),
            nn.Conv2d(c2, dim, 3, padding=1),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class PixelGenerator(nn.Module):
    """16x upsampling generator; sigmoid output keeps pixels in [0, 1]."""

    def __init__(self, dim: int, base: int = 64):
        super().__init__()
        widths = [base, base, base // 2, base // 4]
        layers: list[nn.Module] = [nn.Conv2d(dim, widths[0], 3, padding=1), _ResBlock(widths[0])]
        in_c = widths[0]
        for i, out_c in enumerate(widths):
            layers += [nn.Conv2d(in_c, out_c * 4, 3, padding=1), nn.PixelShuffle(2), nn.GELU()]
            if i < 2:
                layers.append(_ResBlock(out_c))
            in_c = out_c
        layers.append(nn.Conv2d(in_c, 3, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, h: Tensor) -> Tensor:
        return torch.sigmoid(self.net(h))


class DualBranchCodec(nn.Module):
    """The full model: both transform branches, quantizers, entropy model,
    latent adaptor, pixel generator and auxiliary encoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.embed_dim
        self.patch_proj = nn.Conv2d(3, c, cfg.patch, stride=cfg.patch)
        self.patch_norm = ChannelLayerNorm(c)

        self.query_tokens = nn.Parameter(torch.randn(1, 1, cfg.num_semantic_tokens, c) * 0.02)
        self.placeholder_tokens = nn.Parameter(
            torch.randn(1, 1, cfg.tokens_per_window, c) * 0.02
        )
        self.enc_pos = nn.Parameter(torch.randn(1, 1, cfg.seq_len, c) * 0.02)
        self.dec_pos = nn.Parameter(torch.randn(1, 1, cfg.seq_len, c) * 0.02)

        shifts = [0 if i % 2 == 0 else cfg.detail_window // 2 for i in range(cfg.num_stages)]
        self.enc_stages = nn.ModuleList(Stage(cfg, s) for s in shifts)
        self.dec_stages = nn.ModuleList(Stage(cfg, s) for s in shifts)
        self.sem_out_norm = nn.LayerNorm(c)

        self.detail_down = nn.Conv2d(c, cfg.detail_dim, 3, stride=2, padding=1)
        self.detail_up = nn.Sequential(
            nn.Conv2d(cfg.detail_dim, 4 * c, 3, padding=1), nn.PixelShuffle(2)
        )

        self.adaptor = LatentAdaptor(c)
        self.generator = PixelGenerator(c, cfg.gen_base)
        self.auxiliary = AuxiliaryEncoder(c, cfg.aux_base)

        self.vq = VectorQuantizer(cfg.codebook_size, c)
        self.sq = ScalarQuantizer(cfg.detail_dim)
        self.entropy = QuadtreeContext(cfg.detail_dim, cfg.entropy_hidden)
        self.detail_vq = VectorQuantizer(cfg.detail_codebook_size, cfg.detail_dim)

    # -- helpers ---------------------------------------------------------

    @property
    def use_interactive_default(self) -> bool:
        return self.cfg.variant not in ("no_interactive", "no_detail")

    @property
    def use_detail(self) -> bool:
        return self.cfg.variant != "no_detail"

    def _check_grid(self, h: int, w: int) -> None:
        ws = self.cfg.window
        if h % ws or w % ws or h < ws or w < ws:
            raise ValueError(
                f"token grid {h}x{w} must be a positive multiple of {ws} in both dims"
            )

    # -- operations ------------------------------------------------------

    def patch_embed(self, x: Tensor) -> Tensor:
        """(B, 3, H, W) -> (B, C, H/16, W/16)."""
        if x.shape[-2] % self.cfg.patch or x.shape[-1] % self.cfg.patch:
            raise ValueError("image dims must be multiples of the patch size")
        return self.patch_norm(self.patch_proj(x))

    def dual_encode(
        self, emb: Tensor, use_interactive: bool | None = None
    ) -> tuple[Tensor, Tensor | None]:
        """(B, C, h, w) -> semantic tokens (B, N, 32, C) and detail latent
        (B, C_d, h/2, w/2) (None for the no_detail variant)."""
        use_it = self.use_interactive_default if use_interactive is None else use_interactive
        b, c, h, w = emb.shape
        self._check_grid(h, w)
        f_s = window_partition(emb, self.cfg.window)
        n = f_s.shape[1]
        f_s = torch.cat([f_s, self.query_tokens.expand(b, n, -1, -1)], dim=2) + self.enc_pos
        f_d = emb
        if not self.use_detail:
            for stage in self.enc_stages:
                f_s = stage.semantic(f_s)
            y_s = self.sem_out_norm(f_s[:, :, self.cfg.tokens_per_window :, :])
            return y_s, None
        for stage in self.enc_stages:
            f_s, f_d = stage(f_s, f_d, use_it)
        y_s = self.sem_out_norm(f_s[:, :, self.cfg.tokens_per_window :, :])
        y_d = self.detail_down(f_d)
        return y_s, y_d

    def dual_decode(
        self,
        y_s_hat: Tensor,
        y_d_hat: Tensor | None,
        grid: tuple[int, int],
        use_interactive: bool | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Quantized latents -> intermediate features (h_s, h_d), both (B, C, h, w).

        ``y_s_hat`` may carry fewer than 32 tokens per window (truncated-token
        encodes); ``y_d_hat=None`` or zeros exercises the detail-free path.
        """
        use_it = self.use_interactive_default if use_interactive is None else use_interactive
        h, w = grid
        self._check_grid(h, w)
        b, n = y_s_hat.shape[0], y_s_hat.shape[1]
        if n * self.cfg.tokens_per_window != h * w:
            raise ValueError(
                f"{n} windows inconsistent with grid {h}x{w}"
            )
        if y_d_hat is None:
            y_d_hat = y_s_hat.new_zeros(b, self.cfg.detail_dim, h // 2, w // 2)
        if y_d_hat.shape[-2:] != (h // 2, w // 2):
            raise ValueError(
                f"detail latent {tuple(y_d_hat.shape[-2:])} != half-resolution grid "
                f"{(h // 2, w // 2)}"
            )
        keep = y_s_hat.shape[2]
        pos = torch.cat(
            [
                self.dec_pos[:, :, : self.cfg.tokens_per_window],
                self.dec_pos[:, :, self.cfg.tokens_per_window : self.cfg.tokens_per_window + keep],
            ],
            dim=2,
        )
        g_s = torch.cat(
            [self.placeholder_tokens.expand(b, n, -1, -1), y_s_hat], dim=2
        ) + pos
        g_d = self.detail_up(y_d_hat)
        use_branch_it = use_it and self.use_detail
        for stage in self.dec_stages:
            g_s, g_d = stage(g_s, g_d, use_branch_it)
        h_s = window_merge(g_s[:, :, : self.cfg.tokens_per_window], self.cfg.window, h, w)
        return h_s, g_d

    def fuse(self, h_d: Tensor, h_s: Tensor) -> Tensor:
        return self.adaptor(h_d, h_s)

    def generate(self, h: Tensor, orig: tuple[int, int] | None = None) -> Tensor:
        """(B, C, h, w) -> pixels (B, 3, 16h, 16w) in [0, 1], cropped to orig."""
        x = self.generator(h)
        if orig is not None:
            x = x[..., : orig[0], : orig[1]]
        return x.clamp(0.0, 1.0)

    def auxiliary_encode(self, x: Tensor) -> Tensor:
        return self.auxiliary(x)

    # -- parameter groups (freeze contracts) ------------------------------

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        sem: list[nn.Parameter] = [
            self.query_tokens,
            self.placeholder_tokens,
            self.enc_pos,
            self.dec_pos,
        ]
        det: list[nn.Parameter] = list(self.detail_down.parameters()) + list(
            self.detail_up.parameters()
        )
        it: list[nn.Parameter] = []
        for stage in list(self.enc_stages) + list(self.dec_stages):
            sem += list(stage.semantic.parameters())
            det += list(stage.detail.parameters())
            it += list(stage.interactive.parameters())
        sem += list(self.sem_out_norm.parameters())
        return {
            "patch_embed": list(self.patch_proj.parameters()) + list(self.patch_norm.parameters()),
            "semantic": sem,
            "detail": det,
            "interactive": it,
            "adaptor": list(self.adaptor.parameters()),
            "generator": list(self.generator.parameters()),
            "auxiliary": list(self.auxiliary.parameters()),
            "codebook": list(self.vq.parameters()),
            "detail_codebook": list(self.detail_vq.parameters()),
            "sq_steps": list(self.sq.parameters()),
            "entropy": list(self.entropy.parameters()),
        }

    def set_trainable_groups(self, names: set[str]) -> None:
        for name, params in self.parameter_groups().items():
            flag = name in names
            for p in params:
                p.requires_grad_(flag)
