"""The two bottlenecks: vector quantization of semantic tokens and scalar
quantization of detail latents.

VQ maps each token to its nearest codebook entry under Euclidean distance
(lowest index wins ties) and passes gradients straight through.  SQ rounds
half away from zero with a learnable positive step per channel in eval mode
and adds uniform noise of the same width in training mode.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn


def nearest_codebook_indices(tokens: Tensor, codebook: Tensor) -> Tensor:
    """Index of the nearest codebook row for every token vector.

    tokens: (..., C), codebook: (K, C).  Ties break to the lowest index
    (argmin returns the first minimum).
    """
    if codebook.numel() == 0:
        raise ValueError("codebook is empty")
    if tokens.shape[-1] != codebook.shape[-1]:
        raise ValueError(
            f"token width {tokens.shape[-1]} != codebook width {codebook.shape[-1]}"
        )
    flat = tokens.reshape(-1, tokens.shape[-1])
    d = (
        flat.pow(2).sum(1, keepdim=True)
        - 2.0 * flat @ codebook.t()
        + codebook.pow(2).sum(1)[None, :]
    )
    return d.argmin(dim=1).reshape(tokens.shape[:-1])


class VectorQuantizer(nn.Module):
    """Learned codebook with straight-through assignment.

    ``forward`` returns (indices, straight_through, lookup): the straight-
    through tensor feeds the decoder; the raw lookup feeds
    :func:`codebook_loss` so the codebook itself receives gradients.
    """

    def __init__(self, num_entries: int, dim: int):
        super().__init__()
        self.num_entries = num_entries
        self.dim = dim
        self.codebook = nn.Parameter(torch.randn(num_entries, dim))
        # Dead-entry bookkeeping: epochs since an entry was last assigned.
        self.register_buffer("unused_epochs", torch.zeros(num_entries, dtype=torch.long))
        self._epoch_used = torch.zeros(num_entries, dtype=torch.bool)

    def assign(self, tokens: Tensor) -> Tensor:
        return nearest_codebook_indices(tokens, self.codebook)

    def lookup(self, indices: Tensor) -> Tensor:
        return self.codebook[indices]

    def forward(self, tokens: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        indices = self.assign(tokens)
        looked = self.lookup(indices)
        st = tokens + (looked - tokens).detach()
        return indices, st, looked

    # -- dead-entry reseeding (used by stage-2 training) --

    def note_usage(self, indices: Tensor) -> None:
        self._epoch_used[indices.reshape(-1).cpu()] = True

    def end_epoch(self, samples: Tensor, generator: torch.Generator | None = None,
                  patience: int = 5) -> int:
        """Close an epoch; reseed entries unused for ``patience`` consecutive
        epochs to random token vectors from ``samples`` ((M, C), detached).
        Returns the number of reseeded entries."""
        used = self._epoch_used.to(self.unused_epochs.device)
        self.unused_epochs[used] = 0
        self.unused_epochs[~used] += 1
        dead = self.unused_epochs >= patience
        n_dead = int(dead.sum())
        if n_dead and samples.numel():
            pick = torch.randint(0, samples.shape[0], (n_dead,), generator=generator)
            with torch.no_grad():
                self.codebook[dead] = samples[pick].detach().to(self.codebook.dtype)
            self.unused_epochs[dead] = 0
        self._epoch_used = torch.zeros(self.num_entries, dtype=torch.bool)
        return n_dead


def _l2(x: Tensor) -> Tensor:
    # Unsquared L2 norm with an exact zero (and zero gradient) at x == 0.
    sq = x.pow(2).sum()
    return torch.where(sq > 0, sq.clamp_min(1e-30).sqrt(), sq)


def codebook_loss(y: Tensor, quantized: Tensor, beta: float = 0.25) -> Tensor:
    """||sg(y) - q|| + beta * ||sg(q) - y|| with unsquared L2 norms.

    The first term moves the codebook toward the encoder output, the second
    (commitment, weight beta) moves the encoder toward its assigned entry.
    ``quantized`` must be the raw lookup, not the straight-through tensor.
    """
    if y.shape != quantized.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(quantized.shape)}")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return _l2(y.detach() - quantized) + beta * _l2(quantized.detach() - y)


def round_away(z: Tensor) -> Tensor:
    """Round half away from zero (torch.round rounds half to even)."""
    return torch.sign(z) * torch.floor(z.abs() + 0.5)


def _broadcast_steps(steps: Tensor, values: Tensor) -> Tensor:
    if steps.dim() != 1:
        raise ValueError("steps must be a 1-D per-channel vector")
    if torch.any(steps <= 0):
        raise ValueError("quantization steps must be strictly positive")
    if values.shape[-3] != steps.shape[0]:
        raise ValueError(
            f"values have {values.shape[-3]} channels, steps have {steps.shape[0]}"
        )
    return steps.view(-1, 1, 1)


def sq_quantize(values: Tensor, steps: Tensor, mode: str = "round",
                sym_max: int = 127,
                generator: torch.Generator | None = None) -> Tensor:
    """Scalar-quantize ``values`` (..., C, h, w) with per-channel steps.

    mode "round": integer symbols, clipped to [-sym_max, sym_max].
    mode "noise": values + u*step with u ~ U[-1/2, 1/2) (training relaxation);
    no integer symbols are produced.
    """
    s = _broadcast_steps(steps, values)
    if mode == "round":
        sym = round_away(values / s)
        return sym.clamp(-sym_max, sym_max).to(torch.long)
    if mode == "noise":
        u = torch.rand(values.shape, generator=generator, device=values.device) - 0.5
        return values + u * s
    raise ValueError(f"unknown mode {mode!r}")


def sq_dequantize(symbols: Tensor, steps: Tensor) -> Tensor:
    """symbols * step, broadcast per channel."""
    s = _broadcast_steps(steps, symbols)
    return symbols.to(steps.dtype) * s


class ScalarQuantizer(nn.Module):
    """Per-channel learnable steps, parameterized as exp(s) for positivity."""

    def __init__(self, channels: int, init_step: float = 1.0):
        super().__init__()
        self.log_steps = nn.Parameter(torch.full((channels,), math.log(init_step)))

    @property
    def steps(self) -> Tensor:
        return torch.exp(self.log_steps)

    def quantize(self, values: Tensor, mode: str = "round", sym_max: int = 127,
                 generator: torch.Generator | None = None) -> Tensor:
        return sq_quantize(values, self.steps, mode=mode, sym_max=sym_max,
                           generator=generator)

    def dequantize(self, symbols: Tensor) -> Tensor:
        return sq_dequantize(symbols, self.steps)
