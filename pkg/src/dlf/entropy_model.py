"""Quadtree-context entropy model for the quantized detail latents.

Spatial positions of the detail grid are split into four groups by their
(y mod 2, x mod 2) pattern inside each 2x2 cell.  Groups are coded in a fixed
order; the distribution of every symbol in group k is predicted from the
already-decoded groups < k only, so encoder and decoder always see identical
context.  Per-symbol distributions are discretized Laplace with predicted
(mu, b), renormalized over the clipped symbol alphabet and floored at
``P_MIN`` before being turned into integer CDF tables for the range coder.

Two rate figures exist on purpose:

* :func:`interval_rate_bits` integrates the raw Laplace density over
  [v - 1/2, v + 1/2] (step units).  Differentiable; used by the training loss
  (noise-mode relaxation) and matching the analytic CDF-difference convention.
* :func:`coded_rate_bits` uses the alphabet-renormalized PMF, i.e. the exact
  probabilities handed to the arithmetic coder, so payload-vs-estimate
  accounting is tight.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .bitstream import CDF_TOTAL, RangeDecoder, RangeEncoder

P_MIN = 2.0 ** -16

# Coding order of the (y mod 2, x mod 2) patterns: anchor corner first, then
# its diagonal opposite, then the two remaining half-diagonal positions.
PATTERNS = ((0, 0), (1, 1), (0, 1), (1, 0))


class CausalityError(ValueError):
    """Context for a group was queried before all earlier groups were filled."""


def quadtree_schedule(h2: int, w2: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Four disjoint groups of (y, x) positions covering the h2 x w2 grid.

    Every channel of a spatial position belongs to that position's group.
    Positions inside a group are listed in row-major order.
    """
    if h2 < 1 or w2 < 1:
        raise ValueError("detail grid must be at least 1x1")
    ys, xs = np.mgrid[0:h2, 0:w2]
    groups = []
    for py, px in PATTERNS:
        sel = (ys % 2 == py) & (xs % 2 == px)
        groups.append((ys[sel].ravel(), xs[sel].ravel()))
    return groups


def group_masks(h2: int, w2: int) -> Tensor:
    """(4, 1, h2, w2) float masks, one per group."""
    masks = torch.zeros(4, 1, h2, w2)
    for k, (ys, xs) in enumerate(quadtree_schedule(h2, w2)):
        masks[k, 0, ys, xs] = 1.0
    return masks


def laplace_cdf(x: Tensor, mu: Tensor, b: Tensor) -> Tensor:
    z = (x - mu) / b
    # Both branches are evaluated by torch.where; clamping the exponents keeps
    # the unselected branch finite so gradients stay NaN-free.
    below = 0.5 * torch.exp(z.clamp(max=0.0))
    above = 1.0 - 0.5 * torch.exp((-z).clamp(max=0.0))
    return torch.where(z < 0, below, above)


def interval_rate_bits(values: Tensor, mu: Tensor, b: Tensor) -> Tensor:
    """Sum of -log2 P([v-1/2, v+1/2]) under Laplace(mu, b), floored at P_MIN.

    ``values`` are in step units: integers in round mode, continuous in
    noise mode (the training relaxation).
    """
    mass = laplace_cdf(values + 0.5, mu, b) - laplace_cdf(values - 0.5, mu, b)
    return (-torch.log2(mass.clamp_min(P_MIN))).sum()


def alphabet_pmf(mu: np.ndarray, b: np.ndarray, sym_max: int) -> np.ndarray:
    """Renormalized PMF over symbols [-sym_max, sym_max]; rows sum to 1 and
    every entry is >= P_MIN.

    mu, b: shape (n,); returns (n, 2*sym_max+1) float64.
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 1)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 1)
    k = np.arange(-sym_max, sym_max + 1, dtype=np.float64)[None, :]

    def cdf(x):
        z = (x - mu) / b
        return np.where(z < 0, 0.5 * np.exp(np.minimum(z, 0.0)),
                        1.0 - 0.5 * np.exp(np.minimum(-z, 0.0)))

    mass = cdf(k + 0.5) - cdf(k - 0.5)
    mass = np.clip(mass, 0.0, None)
    total = mass.sum(axis=1, keepdims=True)
    # Degenerate rows (all mass outside the alphabet) fall back to uniform.
    uniform = 1.0 / mass.shape[1]
    mass = np.where(total > 0, mass / np.where(total > 0, total, 1.0), uniform)
    alpha = mass.shape[1] * P_MIN
    return (1.0 - alpha) * mass + P_MIN


def coded_rate_bits(symbols: np.ndarray, pmf: np.ndarray, sym_max: int) -> float:
    """Estimate in bits under the exact coder-side PMF (renormalized)."""
    sym = np.asarray(symbols, dtype=np.int64).reshape(-1)
    p = pmf[np.arange(sym.size), sym + sym_max]
    return float(-np.log2(p).sum())


def build_cdf(pmf: np.ndarray, precision_bits: int = 16) -> np.ndarray:
    """Integer CDF tables with total 2**precision_bits and min width 1.

    Widths are floor(p * (T - A)) + 1 with the leftover distributed to the
    largest fractional parts (lowest index wins ties), which keeps the result
    deterministic and exact for dyadic PMFs.
    """
    p = np.asarray(pmf, dtype=np.float64)
    squeeze = p.ndim == 1
    p = np.atleast_2d(p)
    total = 1 << precision_bits
    n, a = p.shape
    if a > total:
        raise ValueError("alphabet larger than CDF precision allows")
    p = p / p.sum(axis=1, keepdims=True)
    scaled = p * (total - a)
    base = np.floor(scaled).astype(np.int64)
    width = base + 1
    rem = total - width.sum(axis=1)
    frac = scaled - base
    order = np.argsort(-frac, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(a), (n, a)).copy(), axis=1)
    width += ranks < rem[:, None]
    cdf = np.zeros((n, a + 1), dtype=np.int64)
    np.cumsum(width, axis=1, out=cdf[:, 1:])
    return cdf[0] if squeeze else cdf


class QuadtreeContext(nn.Module):
    """Causal context network predicting (mu, b) per detail symbol.

    Input is the partially decoded symbol grid (step units, zeros where not
    yet decoded) plus the fill mask; masking before the convolutions is what
    enforces causality.  With an all-zero mask (group 0) the output reduces to
    the network's learned bias, i.e. a context-free prior.
    """

    def __init__(self, channels: int, hidden: int = 48):
        super().__init__()
        self.channels = channels
        self.body = nn.Sequential(
            nn.Conv2d(channels + 1, hidden, 5, padding=2),
            nn.GELU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.GELU(),
        )
        self.head = nn.Conv2d(hidden, 2 * channels, 3, padding=1)
        self.group_bias = nn.Embedding(4, 2 * channels)
        # Small but non-zero head so fresh models are already context-sensitive.
        nn.init.normal_(self.head.weight, std=0.01)
        nn.init.zeros_(self.head.bias)
        nn.init.normal_(self.group_bias.weight, std=0.02)

    def predict(self, values: Tensor, filled: Tensor, group_index: int) -> tuple[Tensor, Tensor]:
        """(mu, b) maps of shape (B, C, h2, w2) for coding group ``group_index``.

        ``values``: (B, C, h2, w2) symbols in step units; entries outside
        ``filled`` are ignored.  ``filled``: (B, 1, h2, w2) in {0, 1}.
        """
        if not 0 <= group_index < 4:
            raise ValueError("group_index must be in [0, 4)")
        x = torch.cat([values * filled, filled.expand_as(values[:, :1])], dim=1)
        out = self.head(self.body(x))
        out = out + self.group_bias.weight[group_index].view(1, -1, 1, 1)
        mu, log_b = out.chunk(2, dim=1)
        return mu, torch.exp(log_b.clamp(-6.0, 6.0))

    def predict_group(
        self, values: Tensor, filled: Tensor, group_index: int
    ) -> tuple[Tensor, Tensor]:
        """Like :meth:`predict`, but validates the causality precondition:
        all groups < group_index filled, all groups >= group_index empty."""
        h2, w2 = values.shape[-2:]
        masks = group_masks(h2, w2).to(values.device)
        expected = masks[:group_index].sum(dim=0, keepdim=False) if group_index else torch.zeros_like(masks[0])
        if not torch.equal(filled[0].bool(), expected.bool()):
            raise CausalityError(
                f"fill mask does not match groups < {group_index} of the schedule"
            )
        return self.predict(values, filled, group_index)

    def rate_bits(self, values: Tensor, sym_max: int) -> Tensor:
        """Differentiable total bits for a batch of (relaxed) symbol grids.

        ``values``: (B, C, h2, w2) in step units.  Uses teacher forcing: the
        context for group k is the true (or noised) values of groups < k,
        exactly what the decoder will have.
        """
        b_, c, h2, w2 = values.shape
        masks = group_masks(h2, w2).to(values.device)
        bits = values.new_zeros(())
        filled = torch.zeros(b_, 1, h2, w2, device=values.device)
        for k in range(4):
            gm = masks[k]
            if gm.sum() == 0:
                continue
            mu, lap_b = self.predict(values, filled, k)
            sel = gm.squeeze(0).squeeze(0).bool()
            bits = bits + interval_rate_bits(
                values[:, :, sel], mu[:, :, sel], lap_b[:, :, sel]
            )
            filled = filled + gm
        _ = sym_max  # alphabet only matters for the integer coding path
        return bits


def _group_tables(
    model: QuadtreeContext,
    values: Tensor,
    filled: Tensor,
    k: int,
    ys: np.ndarray,
    xs: np.ndarray,
    sym_max: int,
    trace: list | None = None,
) -> np.ndarray:
    """Integer CDF tables for group k, ordered (position row-major, channel)."""
    mu, b = model.predict_group(values, filled, k)
    mu_g = mu[0, :, ys, xs].transpose(0, 1).detach().cpu().numpy().reshape(-1)
    b_g = b[0, :, ys, xs].transpose(0, 1).detach().cpu().numpy().reshape(-1)
    if trace is not None:
        trace.append((k, mu_g.copy(), b_g.copy()))
    pmf = alphabet_pmf(mu_g, b_g, sym_max)
    return build_cdf(pmf)


def encode_detail(model: QuadtreeContext, symbols: Tensor, sym_max: int,
                  trace: list | None = None) -> bytes:
    """Arithmetic-code an integer symbol grid (C, h2, w2) to bytes."""
    c, h2, w2 = symbols.shape
    schedule = quadtree_schedule(h2, w2)
    masks = group_masks(h2, w2)
    enc = RangeEncoder()
    values = symbols.float().unsqueeze(0)
    filled = torch.zeros(1, 1, h2, w2)
    with torch.no_grad():
        for k, (ys, xs) in enumerate(schedule):
            if len(ys) == 0:
                continue
            cdfs = _group_tables(model, values * filled, filled, k, ys, xs, sym_max,
                                 trace=trace)
            syms = symbols[:, ys, xs].transpose(0, 1).reshape(-1).cpu().numpy()
            for i, s in enumerate(syms):
                enc.encode(int(s) + sym_max, cdfs[i].tolist())
            filled = filled + masks[k]
    return enc.finish()


def decode_detail(
    model: QuadtreeContext, payload: bytes, shape: tuple[int, int, int], sym_max: int,
    trace: list | None = None,
) -> Tensor:
    """Exact inverse of :func:`encode_detail` given the same model."""
    c, h2, w2 = shape
    schedule = quadtree_schedule(h2, w2)
    masks = group_masks(h2, w2)
    dec = RangeDecoder(payload)
    symbols = torch.zeros(c, h2, w2, dtype=torch.long)
    filled = torch.zeros(1, 1, h2, w2)
    with torch.no_grad():
        for k, (ys, xs) in enumerate(schedule):
            if len(ys) == 0:
                continue
            values = symbols.float().unsqueeze(0)
            cdfs = _group_tables(model, values * filled, filled, k, ys, xs, sym_max,
                                 trace=trace)
            m = len(ys)
            out = np.empty(m * c, dtype=np.int64)
            for i in range(m * c):
                out[i] = dec.decode(cdfs[i].tolist()) - sym_max
            grid = torch.from_numpy(out.reshape(m, c)).transpose(0, 1)
            symbols[:, ys, xs] = grid
            filled = filled + masks[k]
    return symbols


def estimated_detail_bits(model: QuadtreeContext, symbols: Tensor, sym_max: int) -> float:
    """Coder-side estimate (renormalized PMF) for an integer symbol grid."""
    c, h2, w2 = symbols.shape
    schedule = quadtree_schedule(h2, w2)
    masks = group_masks(h2, w2)
    values = symbols.float().unsqueeze(0)
    filled = torch.zeros(1, 1, h2, w2)
    bits = 0.0
    with torch.no_grad():
        for k, (ys, xs) in enumerate(schedule):
            if len(ys) == 0:
                continue
            mu, b = model.predict_group(values * filled, filled, k)
            mu_g = mu[0, :, ys, xs].transpose(0, 1).cpu().numpy().reshape(-1)
            b_g = b[0, :, ys, xs].transpose(0, 1).cpu().numpy().reshape(-1)
            pmf = alphabet_pmf(mu_g, b_g, sym_max)
            syms = symbols[:, ys, xs].transpose(0, 1).reshape(-1).cpu().numpy()
            bits += coded_rate_bits(syms, pmf, sym_max)
            filled = filled + masks[k]
    return bits
