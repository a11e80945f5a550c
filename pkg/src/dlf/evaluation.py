"""Rate-distortion evaluation: bpp accounting from real containers, PSNR and
MS-SSIM, BD-rate between RD curves, and the end-to-end eval harness with its
CSV/Markdown/figure outputs.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.interpolate import PchipInterpolator
from torch import Tensor

from . import bitstream, codec
from .bitstream import Container
from .config import DatasetSpec
from .data import atomic_write_text, build_crops, to_float
from .network import pad_to_multiple

PSNR_CAP_DB = 100.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_WIN = 11
MSSSIM_SIGMA = 1.5

# Metric orientation for BD-rate: True means lower values are better.
METRIC_LOWER_BETTER = {"psnr_db": False, "ms_ssim": False, "latent_mse": True}


def psnr(x: Tensor, y: Tensor, cap: float = PSNR_CAP_DB) -> float:
    """10*log10(1/MSE) for [0,1] images; identical inputs report the cap."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = float(F.mse_loss(x.float(), y.float()))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def _gaussian_1d(size: int, sigma: float) -> Tensor:
    coords = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return (g / g.sum()).float()


def _blur_valid(x: Tensor, win: Tensor) -> Tensor:
    c = x.shape[1]
    k = win.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    x = F.conv2d(x, k, groups=c)
    return F.conv2d(x, k.transpose(2, 3), groups=c)


def _ssim_cs(x: Tensor, y: Tensor, data_range: float, win: Tensor) -> tuple[Tensor, Tensor]:
    k1, k2 = 0.01, 0.03
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x = _blur_valid(x, win)
    mu_y = _blur_valid(y, win)
    sigma_x = _blur_valid(x * x, win) - mu_x * mu_x
    sigma_y = _blur_valid(y * y, win) - mu_y * mu_y
    sigma_xy = _blur_valid(x * y, win) - mu_x * mu_y
    cs_map = (2 * sigma_xy + c2) / (sigma_x + sigma_y + c2)
    ssim_map = ((2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)) * cs_map
    return ssim_map.mean(dim=(1, 2, 3)), cs_map.mean(dim=(1, 2, 3))


def msssim_levels(min_dim: int, max_levels: int = 5, win: int = MSSSIM_WIN) -> int:
    """Largest level count m <= max_levels with min_dim >= (win-1)*2^(m-1)+1."""
    m = 0
    while m < max_levels and min_dim >= (win - 1) * (1 << m) + 1:
        m += 1
    return m


def ms_ssim(x: Tensor, y: Tensor, data_range: float = 1.0) -> float:
    """5-scale MS-SSIM (standard weights); small images fall back to fewer
    scales with the leading weights renormalized to sum 1."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    levels = msssim_levels(min(x.shape[-2:]))
    if levels == 0:
        raise ValueError(
            f"image min dim {min(x.shape[-2:])} too small for MS-SSIM (needs >= {MSSSIM_WIN})"
        )
    weights = torch.tensor(MSSSIM_WEIGHTS[:levels], dtype=torch.float64)
    weights = weights / weights.sum()
    win = _gaussian_1d(MSSSIM_WIN, MSSSIM_SIGMA)
    x, y = x.float(), y.float()
    vals = []
    for lvl in range(levels):
        ssim_v, cs_v = _ssim_cs(x, y, data_range, win)
        vals.append(ssim_v if lvl == levels - 1 else cs_v)
        if lvl < levels - 1:
            pad = (x.shape[-2] % 2, x.shape[-1] % 2)
            x = F.avg_pool2d(x, kernel_size=2, padding=pad)
            y = F.avg_pool2d(y, kernel_size=2, padding=pad)
    stack = torch.stack([v.clamp_min(0.0).double() for v in vals])  # (levels, B)
    score = torch.prod(stack ** weights.view(-1, 1), dim=0)
    return float(score.mean())


def compute_bpp(container: Container) -> float:
    """Total container bits (header included) per original pixel."""
    area = container.orig_h * container.orig_w
    if area <= 0:
        raise ValueError("container has zero-area image dimensions")
    return container.num_bytes * 8.0 / area


# -- RD curves and BD-rate -------------------------------------------------------

@dataclass
class RDPoint:
    bpp: float
    metrics: dict[str, float] = field(default_factory=dict)


@dataclass
class RDCurve:
    label: str
    points: list[RDPoint] = field(default_factory=list)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)

    @property
    def bpps(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points], dtype=np.float64)

    def metric(self, name: str) -> np.ndarray:
        return np.array([p.metrics[name] for p in self.points], dtype=np.float64)

    def metric_names(self) -> list[str]:
        names: list[str] = []
        for p in self.points:
            for k in p.metrics:
                if k not in names:
                    names.append(k)
        return names

    def to_csv(self) -> str:
        names = self.metric_names()
        lines = ["label,bpp," + ",".join(names)]
        for p in self.points:
            vals = ",".join(repr(p.metrics.get(n, float("nan"))) for n in names)
            lines.append(f"{self.label},{p.bpp!r},{vals}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv(text: str) -> "RDCurve":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        header = lines[0].split(",")
        if header[:2] != ["label", "bpp"]:
            raise ValueError("not an RD curve CSV")
        names = header[2:]
        label = None
        points = []
        for ln in lines[1:]:
            parts = ln.split(",")
            label = parts[0]
            points.append(
                RDPoint(bpp=float(parts[1]),
                        metrics={n: float(v) for n, v in zip(names, parts[2:])})
            )
        return RDCurve(label=label or "curve", points=points)


def bd_rate_values(
    anchor_rate: np.ndarray,
    anchor_quality: np.ndarray,
    test_rate: np.ndarray,
    test_quality: np.ndarray,
    lower_better: bool = False,
) -> float:
    """Bjontegaard delta rate in percent (negative = test saves bitrate).

    Log-rate is PCHIP-interpolated against quality and integrated exactly
    (polynomial antiderivative) over the overlapping quality interval.
    """
    ar, aq = np.asarray(anchor_rate, float), np.asarray(anchor_quality, float)
    tr, tq = np.asarray(test_rate, float), np.asarray(test_quality, float)
    for r, q in ((ar, aq), (tr, tq)):
        if len(r) < 2 or len(r) != len(q):
            raise ValueError("each curve needs >= 2 (rate, quality) points")
        if np.any(r <= 0) or not np.all(np.isfinite(r)) or not np.all(np.isfinite(q)):
            raise ValueError("rates must be positive and all values finite")
    if lower_better:
        aq, tq = -aq, -tq

    def _fit(q, r):
        order = np.argsort(q)
        q, lr = q[order], np.log(r[order])
        if np.any(np.diff(q) <= 0):
            raise ValueError("quality values must be strictly monotone along the curve")
        return PchipInterpolator(q, lr)

    pa, pt = _fit(aq, ar), _fit(tq, tr)
    lo = max(aq.min(), tq.min())
    hi = min(aq.max(), tq.max())
    if hi <= lo:
        raise ValueError("curves have no overlapping quality range")
    ia = pa.antiderivative()
    it = pt.antiderivative()
    avg_log_diff = ((it(hi) - it(lo)) - (ia(hi) - ia(lo))) / (hi - lo)
    return float((math.exp(avg_log_diff) - 1.0) * 100.0)


def bd_rate(anchor: RDCurve, test: RDCurve, metric: str,
            lower_better: bool | None = None) -> float:
    """BD-rate of ``test`` vs ``anchor`` on a named metric."""
    if lower_better is None:
        lower_better = METRIC_LOWER_BETTER.get(metric, False)
    return bd_rate_values(
        anchor.bpps, anchor.metric(metric), test.bpps, test.metric(metric),
        lower_better=lower_better,
    )


# -- end-to-end evaluation -------------------------------------------------------

@dataclass
class ImageEvalRow:
    image_index: int
    label: str
    bpp: float
    bpp_semantic: float
    bpp_detail: float
    semantic_bytes: int
    detail_bytes: int
    psnr_db: float
    ms_ssim: float
    latent_mse: float


def evaluate_image(model, image: Tensor, label: str, index: int,
                   lambda_index: int, token_keep: int | None = None) -> ImageEvalRow:
    """Encode through the real bitstream, decode, and score one image."""
    blob = codec.compress(model, image, lambda_index=lambda_index, token_keep=token_keep)
    container = bitstream.read_container(blob)
    result = codec.decompress(model, blob, expected_lambda=lambda_index)
    area = container.orig_h * container.orig_w
    plane = pad_to_multiple(image, multiple=model.cfg.window_pixels)
    with torch.no_grad():
        target = model.auxiliary_encode(plane.pixels.unsqueeze(0))
        latent_mse = float(F.mse_loss(result.fused, target))
    return ImageEvalRow(
        image_index=index,
        label=label,
        bpp=compute_bpp(container),
        bpp_semantic=len(container.semantic) * 8.0 / area,
        bpp_detail=len(container.detail) * 8.0 / area,
        semantic_bytes=len(container.semantic),
        detail_bytes=len(container.detail),
        psnr_db=psnr(image, result.image),
        ms_ssim=ms_ssim(image, result.image),
        latent_mse=latent_mse,
    )


NO_DETAIL_TOKEN_GRID = (8, 16, 24, 32)


def run_eval(
    checkpoint_paths: list[str | Path],
    dataset: DatasetSpec,
    variant: str,
    out_dir: str | Path,
    anchor_csv: str | Path | None = None,
    label: str | None = None,
    workers: int = 1,
    per_image_log: bool = True,
) -> RDCurve:
    """Encode/decode every image at every rate point; write CSV, Markdown and
    figure outputs under ``out_dir`` and return the RD curve.

    Rate points: one per checkpoint, except the no_detail variant where one
    checkpoint is swept over the token-count grid (8, 16, 24, 32).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    crops = build_crops(dataset)
    if crops.shape[0] == 0:
        raise ValueError("empty dataset")
    images = [to_float(crops[i]) for i in range(crops.shape[0])]

    runs: list[tuple[object, int, int | None, str]] = []
    for path in checkpoint_paths:
        model, manifest = codec.load_checkpoint(path)
        if manifest["variant"] != variant:
            raise codec.CheckpointMismatchError(
                f"checkpoint {path} is variant {manifest['variant']!r}, requested {variant!r}"
            )
        lam_idx = manifest["lambda_index"]
        if variant == "no_detail":
            for keep in NO_DETAIL_TOKEN_GRID:
                runs.append((model, lam_idx, keep, f"{variant}/t{keep}"))
        else:
            runs.append((model, lam_idx, None, f"{variant}/l{lam_idx}"))

    curve_label = label or variant
    points: list[RDPoint] = []
    all_rows: list[ImageEvalRow] = []
    for model, lam_idx, keep, point_label in runs:
        def work(i: int) -> ImageEvalRow:
            return evaluate_image(model, images[i], point_label, i, lam_idx, keep)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(work, range(len(images))))
        else:
            rows = [work(i) for i in range(len(images))]
        all_rows.extend(rows)
        points.append(
            RDPoint(
                bpp=float(np.mean([r.bpp for r in rows])),
                metrics={
                    "psnr_db": float(np.mean([r.psnr_db for r in rows])),
                    "ms_ssim": float(np.mean([r.ms_ssim for r in rows])),
                    "latent_mse": float(np.mean([r.latent_mse for r in rows])),
                },
            )
        )

    curve = RDCurve(label=curve_label, points=points)
    atomic_write_text(out_dir / "rd_curve.csv", curve.to_csv())
    if per_image_log:
        header = ("image,label,bpp,bpp_semantic,bpp_detail,semantic_bytes,"
                  "detail_bytes,psnr_db,ms_ssim,latent_mse")
        lines = [header] + [
            f"{r.image_index},{r.label},{r.bpp!r},{r.bpp_semantic!r},{r.bpp_detail!r},"
            f"{r.semantic_bytes},{r.detail_bytes},{r.psnr_db!r},{r.ms_ssim!r},{r.latent_mse!r}"
            for r in all_rows
        ]
        atomic_write_text(out_dir / "per_image.csv", "\n".join(lines) + "\n")

    anchor = None
    if anchor_csv is not None:
        anchor = RDCurve.from_csv(Path(anchor_csv).read_text())
    atomic_write_text(out_dir / "report.md", render_report(curve, anchor))

    from .plotting import plot_rd_curves  # lazy: matplotlib import is slow

    curves = [curve] if anchor is None else [anchor, curve]
    for metric in ("psnr_db", "ms_ssim", "latent_mse"):
        plot_rd_curves(curves, metric, out_dir / f"rd_{metric}.png")
    return curve


def _bd_cell(anchor: RDCurve, test: RDCurve, metric: str) -> str:
    if anchor.label == test.label and anchor.points == test.points:
        return "0.00%"
    try:
        return f"{bd_rate(anchor, test, metric):.2f}%"
    except ValueError as exc:
        return f"n/a ({exc})"


def render_report(curve: RDCurve, anchor: RDCurve | None = None) -> str:
    """Markdown RD report; includes a BD-rate table when an anchor is given.

    Distortion columns are PSNR / MS-SSIM / latent MSE (desk-scale proxies;
    no pretrained perceptual metrics are involved).
    """
    names = curve.metric_names()
    lines = [f"# Rate-distortion report: {curve.label}", ""]
    lines.append("| label | bpp | " + " | ".join(names) + " |")
    lines.append("|---" * (2 + len(names)) + "|")
    for p in curve.points:
        cells = " | ".join(f"{p.metrics.get(n, float('nan')):.6g}" for n in names)
        lines.append(f"| {curve.label} | {p.bpp:.6g} | {cells} |")
    if anchor is not None:
        lines += ["", f"## BD-rate vs anchor `{anchor.label}`", ""]
        lines.append("| curve | " + " | ".join(names) + " |")
        lines.append("|---" * (1 + len(names)) + "|")
        cells = " | ".join(_bd_cell(anchor, curve, n) for n in names)
        lines.append(f"| {curve.label} | {cells} |")
    return "\n".join(lines) + "\n"


def render_ablation_report(anchor: RDCurve, tests: list[RDCurve]) -> str:
    """Markdown table of BD-rates for several variants against one anchor."""
    names = anchor.metric_names()
    lines = [f"# BD-rate of model variants (anchor: {anchor.label})", ""]
    lines.append("| variant | " + " | ".join(names) + " |")
    lines.append("|---" * (1 + len(names)) + "|")
    lines.append("| " + anchor.label + " | " + " | ".join("0.00%" for _ in names) + " |")
    for t in tests:
        cells = " | ".join(_bd_cell(anchor, t, n) for n in names)
        lines.append(f"| {t.label} | {cells} |")
    return "\n".join(lines) + "\n"
