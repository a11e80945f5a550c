"""Image <-> container pipeline and checkpoint persistence.

``compress`` and ``decompress`` share :func:`encode_latents` /
:func:`decode_latents`, so the bitstream path is bit-identical to the
in-memory quantized forward pass by construction: the payloads only transport
the integer latents losslessly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

from . import bitstream
from .bitstream import Container
from .config import LAMBDA_INDEX_NONE, ModelConfig, model_config_hash
from .data import atomic_torch_save
from .entropy_model import decode_detail, encode_detail, estimated_detail_bits
from .network import DualBranchCodec, ImagePlane, pad_to_multiple

CHECKPOINT_VERSION = 1


class CheckpointMismatchError(RuntimeError):
    """Checkpoint does not match the container or requested configuration."""


@dataclass
class EncodedLatents:
    """Integer latents of one image plus the geometry needed to decode them."""

    indices: Tensor                  # (N, T) semantic codebook indices
    detail_symbols: Tensor | None    # (C_d, h2, w2) SQ symbols (full model)
    detail_indices: Tensor | None    # (h2, w2) codebook indices (vq_detail)
    grid: tuple[int, int]            # token grid (h, w) of the padded image
    orig: tuple[int, int]            # (orig_h, orig_w) pixels


@dataclass
class DecodeResult:
    image: Tensor                    # (3, orig_h, orig_w) in [0, 1]
    fused: Tensor                    # latent fed to the generator (1, C, h, w)
    latents: EncodedLatents


def padded_grid(cfg: ModelConfig, orig_h: int, orig_w: int) -> tuple[int, int]:
    wp = cfg.window_pixels
    return (
        ((orig_h + wp - 1) // wp) * wp // cfg.patch,
        ((orig_w + wp - 1) // wp) * wp // cfg.patch,
    )


@torch.no_grad()
def encode_latents(
    model: DualBranchCodec, plane: ImagePlane, token_keep: int | None = None
) -> EncodedLatents:
    cfg = model.cfg
    model.eval()
    x = plane.pixels.unsqueeze(0)
    h, w = x.shape[-2] // cfg.patch, x.shape[-1] // cfg.patch
    emb = model.patch_embed(x)
    y_s, y_d = model.dual_encode(emb)
    keep = cfg.num_semantic_tokens if token_keep is None else int(token_keep)
    if not 1 <= keep <= cfg.num_semantic_tokens:
        raise ValueError(f"token_keep must be in [1, {cfg.num_semantic_tokens}]")
    indices = model.vq.assign(y_s[0, :, :keep, :])
    detail_symbols = detail_indices = None
    if cfg.variant == "vq_detail":
        vecs = y_d[0].permute(1, 2, 0)  # (h2, w2, C_d)
        detail_indices = model.detail_vq.assign(vecs)
    elif cfg.variant != "no_detail":
        detail_symbols = model.sq.quantize(y_d[0], mode="round", sym_max=cfg.sym_max)
    return EncodedLatents(
        indices=indices,
        detail_symbols=detail_symbols,
        detail_indices=detail_indices,
        grid=(h, w),
        orig=(plane.orig_h, plane.orig_w),
    )


@torch.no_grad()
def decode_latents(model: DualBranchCodec, lat: EncodedLatents) -> DecodeResult:
    cfg = model.cfg
    model.eval()
    h, w = lat.grid
    y_s_hat = model.vq.lookup(lat.indices).unsqueeze(0)
    if lat.detail_symbols is not None:
        y_d_hat = model.sq.dequantize(lat.detail_symbols).unsqueeze(0)
    elif lat.detail_indices is not None:
        y_d_hat = model.detail_vq.lookup(lat.detail_indices).permute(2, 0, 1).unsqueeze(0)
    else:
        y_d_hat = None
    h_s, h_d = model.dual_decode(y_s_hat, y_d_hat, (h, w))
    fused = model.fuse(h_d, h_s)
    image = model.generate(fused, orig=lat.orig)[0]
    return DecodeResult(image=image, fused=fused, latents=lat)


@torch.no_grad()
def compress(
    model: DualBranchCodec,
    image: Tensor,
    lambda_index: int = LAMBDA_INDEX_NONE,
    token_keep: int | None = None,
) -> bytes:
    """(3, H, W) float image in [0, 1] -> container bytes."""
    cfg = model.cfg
    plane = pad_to_multiple(image, multiple=cfg.window_pixels)
    lat = encode_latents(model, plane, token_keep=token_keep)
    semantic = bitstream.pack_vq_indices(lat.indices.reshape(-1).cpu().numpy(),
                                         cfg.codebook_size)
    if lat.detail_symbols is not None:
        detail = encode_detail(model.entropy, lat.detail_symbols, cfg.sym_max)
    elif lat.detail_indices is not None:
        detail = bitstream.pack_vq_indices(lat.detail_indices.reshape(-1).cpu().numpy(),
                                           cfg.detail_codebook_size)
    else:
        detail = b""
    return bitstream.write_container(
        Container(
            lambda_index=lambda_index,
            orig_w=plane.orig_w,
            orig_h=plane.orig_h,
            semantic=semantic,
            detail=detail,
        )
    )


def _infer_token_keep(cfg: ModelConfig, n_windows: int, slen: int) -> int:
    bpi = bitstream.bits_per_index(cfg.codebook_size)
    keep = (slen * 8) // (bpi * n_windows)
    keep = min(keep, cfg.num_semantic_tokens)
    if keep < 1 or (n_windows * keep * bpi + 7) // 8 != slen:
        raise bitstream.LengthError(
            f"semantic payload of {slen} bytes inconsistent with {n_windows} windows"
        )
    return keep


@torch.no_grad()
def decompress(
    model: DualBranchCodec, blob: bytes, expected_lambda: int | None = None
) -> DecodeResult:
    """Container bytes -> decoded image (exact inverse of :func:`compress`)."""
    cfg = model.cfg
    c = bitstream.read_container(blob)
    if expected_lambda is not None and c.lambda_index != expected_lambda:
        raise CheckpointMismatchError(
            f"container was produced at rate point {c.lambda_index}, "
            f"checkpoint is rate point {expected_lambda}"
        )
    if c.orig_h < 1 or c.orig_w < 1:
        raise bitstream.LengthError("container declares an empty image")
    h, w = padded_grid(cfg, c.orig_h, c.orig_w)
    n = (h * w) // cfg.tokens_per_window
    keep = _infer_token_keep(cfg, n, len(c.semantic))
    idx = bitstream.unpack_vq_indices(c.semantic, cfg.codebook_size, n * keep)
    indices = torch.from_numpy(idx).reshape(n, keep)
    detail_symbols = detail_indices = None
    h2, w2 = h // 2, w // 2
    if cfg.variant == "no_detail" or len(c.detail) == 0:
        if len(c.detail):
            raise CheckpointMismatchError("no_detail checkpoint cannot decode a detail payload")
    elif cfg.variant == "vq_detail":
        didx = bitstream.unpack_vq_indices(c.detail, cfg.detail_codebook_size, h2 * w2)
        detail_indices = torch.from_numpy(didx).reshape(h2, w2)
    else:
        detail_symbols = decode_detail(
            model.entropy, c.detail, (cfg.detail_dim, h2, w2), cfg.sym_max
        )
    lat = EncodedLatents(
        indices=indices,
        detail_symbols=detail_symbols,
        detail_indices=detail_indices,
        grid=(h, w),
        orig=(c.orig_h, c.orig_w),
    )
    return decode_latents(model, lat)


@torch.no_grad()
def quantized_forward(
    model: DualBranchCodec, image: Tensor, token_keep: int | None = None
) -> DecodeResult:
    """In-memory quantized path (no bitstream); reference for transparency checks."""
    plane = pad_to_multiple(image, multiple=model.cfg.window_pixels)
    return decode_latents(model, encode_latents(model, plane, token_keep=token_keep))


@torch.no_grad()
def estimated_bits(model: DualBranchCodec, lat: EncodedLatents) -> float:
    """Coder-side estimate of the detail payload in bits."""
    if lat.detail_symbols is None:
        return 0.0
    return estimated_detail_bits(model.entropy, lat.detail_symbols, model.cfg.sym_max)


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    model: DualBranchCodec,
    stage: int,
    lambda_index: int = LAMBDA_INDEX_NONE,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    cfg = model.cfg
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(cfg),
        "config_hash": model_config_hash(cfg),
        "stage": stage,
        "lambda_index": lambda_index,
        "variant": cfg.variant,
        "codebook_size": cfg.codebook_size,
        "step": step,
        "model_state": model.state_dict(),
        "extra": extra or {},
    }
    atomic_torch_save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[DualBranchCodec, dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointMismatchError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(f"unsupported checkpoint format in {path}")
    cfg = ModelConfig(**payload["config"])
    if model_config_hash(cfg) != payload["config_hash"]:
        raise CheckpointMismatchError("checkpoint config hash mismatch")
    model = DualBranchCodec(cfg)
    model.load_state_dict(payload["model_state"])
    model.eval()
    manifest = {k: payload[k] for k in
                ("version", "config", "config_hash", "stage", "lambda_index",
                 "variant", "codebook_size", "step", "extra")}
    return model, manifest
