"""Two-stage training pipeline.

Stage 0 pretrains the auxiliary encoder + pixel generator as a plain
autoencoder (the desk-scale stand-in for pretrained tokenizer/generator
weights); both are frozen afterwards.  Stage 1 aligns the fused latent with
the auxiliary target under a rate penalty, with the semantic branch frozen.
Stage 2 fine-tunes the whole codec with the pixel-domain loss; one run per
rate weight.

Every step appends one :class:`LossReport` row to ``trace.csv``; the total is
always exactly the documented weighted sum of the logged parts.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import codec
from .config import (
    LAMBDA_GRID,
    LAMBDA_INDEX_NONE,
    ConfigError,
    DatasetSpec,
    ModelConfig,
    TrainConfig,
    model_config_hash,
)
from .data import atomic_torch_save, build_crops, to_float
from .network import DualBranchCodec
from .quantization import codebook_loss, sq_quantize

TRACE_HEADER = "step,lam,total,distortion,perceptual,adversarial,codebook,rate_bpp"


class StageOrderError(RuntimeError):
    """A stage was started without its prerequisite checkpoint."""


@dataclass
class LossReport:
    """One training step.  Invariant: total == distortion + perceptual
    + lambda_adv * adversarial + codebook + lam * rate_bpp (exactly, in
    float64 on the logged parts)."""

    step: int
    lam: float
    distortion: float
    perceptual: float = 0.0
    adversarial: float = 0.0
    codebook: float = 0.0
    rate_bpp: float = 0.0
    lambda_adv: float = 0.0
    total: float = 0.0

    @staticmethod
    def build(step, lam, distortion, perceptual=0.0, adversarial=0.0,
              codebook=0.0, rate_bpp=0.0, lambda_adv=0.0) -> "LossReport":
        total = distortion + perceptual + lambda_adv * adversarial + codebook + lam * rate_bpp
        return LossReport(step=step, lam=lam, distortion=distortion,
                          perceptual=perceptual, adversarial=adversarial,
                          codebook=codebook, rate_bpp=rate_bpp,
                          lambda_adv=lambda_adv, total=total)

    def csv_row(self) -> str:
        return (f"{self.step},{self.lam!r},{self.total!r},{self.distortion!r},"
                f"{self.perceptual!r},{self.adversarial!r},{self.codebook!r},"
                f"{self.rate_bpp!r}")


def lambda_schedule(step: int, cfg: TrainConfig) -> float:
    """Warmup value, then a linear ramp, then the hold value."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.effective_warmup_steps
    ramp = cfg.effective_ramp_steps
    if step < warm:
        return cfg.warmup_value
    if step < warm + ramp:
        t = (step - warm) / ramp
        return cfg.ramp_start + (cfg.ramp_end - cfg.ramp_start) * t
    return cfg.hold_value


def stage1_loss(h_hat: Tensor, h_tilde: Tensor, rate_bpp: Tensor | float,
                lam: float, step: int = 0) -> tuple[Tensor, LossReport]:
    """Latent-alignment loss: MSE(h_hat, h_tilde) + lam * rate (bpp units)."""
    if h_hat.shape != h_tilde.shape:
        raise ValueError(f"shape mismatch {tuple(h_hat.shape)} vs {tuple(h_tilde.shape)}")
    mse = F.mse_loss(h_hat, h_tilde)
    rate = rate_bpp if torch.is_tensor(rate_bpp) else torch.tensor(float(rate_bpp))
    loss = mse + lam * rate
    report = LossReport.build(step=step, lam=lam, distortion=float(mse.detach()),
                              rate_bpp=float(rate.detach()))
    return loss, report


class FeaturePyramid(nn.Module):
    """Fixed (seeded, non-trainable) random conv projections at three scales;
    the MSE between projected features is the default perceptual term."""

    def __init__(self, channels: int = 16, scales: int = 3, seed: int = 0x7A57):
        super().__init__()
        self.scales = scales
        g = torch.Generator().manual_seed(seed)
        for s in range(scales):
            w = torch.randn(channels, 3, 3, 3, generator=g) / (3.0 * 3.0)
            self.register_buffer(f"w{s}", w)

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        loss = x.new_zeros(())
        for s in range(self.scales):
            w = getattr(self, f"w{s}")
            loss = loss + F.mse_loss(F.conv2d(x, w), F.conv2d(y, w))
            if s < self.scales - 1:
                x = F.avg_pool2d(x, 2)
                y = F.avg_pool2d(y, 2)
        return loss / self.scales


class PatchDiscriminator(nn.Module):
    """Toy patch discriminator for the optional adversarial plug-in."""

    def __init__(self, base: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(base, base * 2, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(base * 2, base * 2, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(base * 2, 1, 3, padding=1),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


def stage2_loss(
    x: Tensor,
    x_hat: Tensor,
    y_s: Tensor,
    y_s_lookup: Tensor,
    rate_bpp: Tensor | float,
    lam: float,
    beta: float = 0.25,
    perceptual: Tensor | float = 0.0,
    adversarial: Tensor | float = 0.0,
    lambda_adv: float = 0.0,
    step: int = 0,
) -> tuple[Tensor, LossReport]:
    """Pixel-domain loss: L1 + perceptual + lambda_adv*adv + codebook + lam*rate."""
    l1 = (x - x_hat).abs().mean()
    cb = codebook_loss(y_s, y_s_lookup, beta)
    rate = rate_bpp if torch.is_tensor(rate_bpp) else torch.tensor(float(rate_bpp))
    perc = perceptual if torch.is_tensor(perceptual) else torch.tensor(float(perceptual))
    adv = adversarial if torch.is_tensor(adversarial) else torch.tensor(float(adversarial))
    loss = l1 + perc + lambda_adv * adv + cb + lam * rate
    report = LossReport.build(step=step, lam=lam, distortion=float(l1.detach()),
                              perceptual=float(perc.detach()), adversarial=float(adv.detach()),
                              codebook=float(cb.detach()), rate_bpp=float(rate.detach()),
                              lambda_adv=lambda_adv)
    return loss, report


STAGE_TRAINABLE = {
    0: {"auxiliary", "generator"},
    1: {"patch_embed", "detail", "interactive", "adaptor", "sq_steps", "entropy",
        "detail_codebook"},
    2: {"patch_embed", "semantic", "detail", "interactive", "adaptor", "generator",
        "codebook", "detail_codebook", "sq_steps", "entropy"},
}


@dataclass
class TrainResult:
    checkpoint: Path
    trace: Path
    reports: list[LossReport]


def _detail_rate(model: DualBranchCodec, y_d: Tensor, noise_gen: torch.Generator):
    """Noise-mode relaxation of the detail bottleneck + its estimated bits."""
    cfg = model.cfg
    steps = model.sq.steps
    y_d_noisy = sq_quantize(y_d, steps, mode="noise", sym_max=cfg.sym_max,
                            generator=noise_gen)
    relaxed = y_d_noisy / steps.view(-1, 1, 1)
    rate_bits = model.entropy.rate_bits(relaxed, cfg.sym_max)
    return y_d_noisy, rate_bits


def _forward_rd(model: DualBranchCodec, batch: Tensor, noise_gen: torch.Generator):
    """Shared stage-1/2 forward: quantized latents, fused feature, rate bits."""
    cfg = model.cfg
    emb = model.patch_embed(batch)
    y_s, y_d = model.dual_encode(emb)
    _, y_s_st, y_s_lookup = model.vq(y_s)
    detail_cb = None
    if y_d is None:
        # no_detail rate control is by token count; train across the whole
        # grid so truncated encodes decode sensibly.
        grid_keep = (8, 16, 24, 32)
        keep = grid_keep[int(torch.randint(len(grid_keep), (1,), generator=noise_gen))]
        y_s_st = y_s_st[:, :, :keep, :]
        y_d_hat = None
        rate_bits = batch.new_zeros(())
    elif cfg.variant == "vq_detail":
        vecs = y_d.permute(0, 2, 3, 1)
        _, st, lookup = model.detail_vq(vecs)
        detail_cb = (vecs, lookup)
        y_d_hat = st.permute(0, 3, 1, 2)
        bits_per = np.ceil(np.log2(cfg.detail_codebook_size))
        rate_bits = batch.new_tensor(float(vecs.shape[0] * vecs.shape[1] * vecs.shape[2] * bits_per))
    else:
        y_d_hat, rate_bits = _detail_rate(model, y_d, noise_gen)
    grid = (emb.shape[-2], emb.shape[-1])
    h_s, h_d = model.dual_decode(y_s_st, y_d_hat, grid)
    h_hat = model.fuse(h_d, h_s)
    pixels = batch.shape[0] * batch.shape[-2] * batch.shape[-1]
    rate_bpp = rate_bits / pixels
    return y_s, y_s_lookup, detail_cb, h_hat, rate_bpp


def _load_for_stage(path: str, expected_stage: int, variant: str,
                    model_cfg: ModelConfig | None):
    try:
        model, manifest = codec.load_checkpoint(path)
    except FileNotFoundError:
        raise StageOrderError(f"prerequisite checkpoint {path!r} not found") from None
    if manifest["stage"] != expected_stage:
        raise StageOrderError(
            f"stage {expected_stage + 1} requires a stage-{expected_stage} checkpoint, "
            f"got stage {manifest['stage']} from {path}"
        )
    if model.cfg.variant != variant:
        if expected_stage == 0:
            # Stage-0 pretrains only the variant-agnostic auxiliary/generator.
            new_cfg = dataclasses.replace(model.cfg, variant=variant)
            fresh = DualBranchCodec(new_cfg)
            fresh.load_state_dict(model.state_dict())
            model = fresh
        else:
            raise StageOrderError(
                f"variant mismatch: checkpoint {path} is {model.cfg.variant!r}, "
                f"requested {variant!r}"
            )
    if model_cfg is not None:
        want = dataclasses.replace(model_cfg, variant=variant)
        if model_config_hash(want) != model_config_hash(model.cfg):
            raise StageOrderError("model config does not match the prerequisite checkpoint")
    return model, manifest


def _resume_state(out_dir: Path, cfg: TrainConfig):
    path = out_dir / "ckpt_last.pt"
    if not path.exists():
        return None
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("stage") != cfg.stage or "next_step" not in payload.get("extra", {}):
        return None
    return payload


def train(cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          data: DatasetSpec | None = None) -> TrainResult:
    """Run one training stage; writes checkpoint.pt, ckpt_last.pt (resume
    state), trace.csv and trace.png under cfg.out_dir."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = data or DatasetSpec()
    if data.crop_size != cfg.crop_size:
        data = dataclasses.replace(data, crop_size=cfg.crop_size)

    torch.manual_seed(cfg.seed)
    resume = _resume_state(out_dir, cfg)
    if resume is not None:
        rcfg = ModelConfig(**resume["config"])
        model = DualBranchCodec(rcfg)
        model.load_state_dict(resume["model_state"])
        start_step = resume["extra"]["next_step"]
    elif cfg.stage == 0:
        mc = model_cfg or ModelConfig()
        if mc.variant != cfg.variant:
            mc = dataclasses.replace(mc, variant=cfg.variant)
        model = DualBranchCodec(mc)
        start_step = 1
    else:
        if cfg.init_checkpoint is None:
            raise StageOrderError(
                f"stage {cfg.stage} requires init_checkpoint from stage {cfg.stage - 1}"
            )
        model, _ = _load_for_stage(cfg.init_checkpoint, cfg.stage - 1, cfg.variant,
                                   model_cfg)
        start_step = 1

    if cfg.stage >= 1 and cfg.crop_size % model.cfg.window_pixels:
        raise ConfigError(
            f"stage {cfg.stage} crops must be multiples of {model.cfg.window_pixels} px"
        )

    model.train()
    model.set_trainable_groups(STAGE_TRAINABLE[cfg.stage])
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.effective_lr)

    perceptual = FeaturePyramid() if (cfg.stage == 2 and cfg.perceptual == "pyramid") else None
    disc = disc_opt = None
    if cfg.stage == 2 and cfg.adversarial:
        disc = PatchDiscriminator()
        disc_opt = torch.optim.Adam(disc.parameters(), lr=cfg.effective_lr)

    data_rng = np.random.default_rng(cfg.seed + 17)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 29)

    crops = build_crops(data)
    if crops.shape[0] == 0:
        raise ValueError("empty dataset")

    targets = None
    if cfg.stage == 1:
        targets = _precompute_targets(model, crops)

    if resume is not None:
        opt.load_state_dict(resume["extra"]["optimizer"])
        torch.set_rng_state(resume["extra"]["torch_rng"])
        noise_gen.set_state(resume["extra"]["noise_rng"])
        data_rng.bit_generator.state = resume["extra"]["data_rng"]
        if disc is not None and "disc_state" in resume["extra"]:
            disc.load_state_dict(resume["extra"]["disc_state"])
            disc_opt.load_state_dict(resume["extra"]["disc_optimizer"])

    trace_path = out_dir / "trace.csv"
    if start_step == 1 or not trace_path.exists():
        trace_path.write_text(TRACE_HEADER + "\n")

    lam_index = cfg.lambda_index
    if cfg.stage == 2 and lam_index == LAMBDA_INDEX_NONE and cfg.lam in LAMBDA_GRID:
        lam_index = LAMBDA_GRID.index(cfg.lam)

    reports: list[LossReport] = []
    trace_fh = open(trace_path, "a")
    try:
        for step in range(start_step, cfg.steps + 1):
            idx = data_rng.integers(0, crops.shape[0], size=cfg.batch_size)
            batch = to_float(crops[torch.from_numpy(idx)])

            if cfg.stage == 0:
                recon = model.generate(model.auxiliary_encode(batch))
                mse = F.mse_loss(recon, batch)
                loss = mse
                report = LossReport.build(step=step, lam=0.0, distortion=float(mse.detach()))
            elif cfg.stage == 1:
                lam = lambda_schedule(step - 1, cfg)
                y_s, y_s_lookup, detail_cb, h_hat, rate_bpp = _forward_rd(
                    model, batch, noise_gen
                )
                h_tilde = targets[torch.from_numpy(idx)]
                loss, report = stage1_loss(h_hat, h_tilde, rate_bpp, lam, step=step)
                if detail_cb is not None:
                    cb = codebook_loss(detail_cb[0], detail_cb[1], cfg.beta)
                    loss = loss + cb
                    report = LossReport.build(step=step, lam=lam,
                                              distortion=report.distortion,
                                              codebook=float(cb.detach()),
                                              rate_bpp=report.rate_bpp)
            else:
                lam = float(cfg.lam)
                y_s, y_s_lookup, detail_cb, h_hat, rate_bpp = _forward_rd(
                    model, batch, noise_gen
                )
                model.vq.note_usage(model.vq.assign(y_s.detach()))
                x_hat = model.generate(h_hat)
                perc = perceptual(batch, x_hat) if perceptual is not None else 0.0
                adv_g = 0.0
                if disc is not None:
                    d_real = disc(batch)
                    d_fake = disc(x_hat.detach())
                    d_loss = F.relu(1.0 - d_real).mean() + F.relu(1.0 + d_fake).mean()
                    disc_opt.zero_grad()
                    d_loss.backward()
                    disc_opt.step()
                    adv_g = -disc(x_hat).mean()
                cb_y = y_s
                cb_look = y_s_lookup
                if detail_cb is not None:
                    # vq_detail: fold the detail codebook terms into the report's
                    # codebook entry by summing both losses.
                    pass
                loss, report = stage2_loss(
                    batch, x_hat, cb_y, cb_look, rate_bpp, lam, beta=cfg.beta,
                    perceptual=perc, adversarial=adv_g,
                    lambda_adv=cfg.lambda_adv if disc is not None else 0.0,
                    step=step,
                )
                if detail_cb is not None:
                    cb_d = codebook_loss(detail_cb[0], detail_cb[1], cfg.beta)
                    loss = loss + cb_d
                    report = LossReport.build(
                        step=step, lam=lam, distortion=report.distortion,
                        perceptual=report.perceptual, adversarial=report.adversarial,
                        codebook=report.codebook + float(cb_d.detach()),
                        rate_bpp=report.rate_bpp,
                        lambda_adv=report.lambda_adv,
                    )

            opt.zero_grad()
            loss.backward()
            opt.step()

            reports.append(report)
            if step % cfg.log_every == 0:
                trace_fh.write(report.csv_row() + "\n")

            if cfg.stage == 2 and step % max(1, crops.shape[0] // cfg.batch_size) == 0:
                samples = y_s.detach().reshape(-1, model.cfg.embed_dim)
                model.vq.end_epoch(samples, generator=noise_gen)

            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                trace_fh.flush()
                _save_resume(out_dir, model, cfg, lam_index, step, opt, noise_gen,
                             data_rng, disc, disc_opt)
    finally:
        trace_fh.close()

    final = out_dir / "checkpoint.pt"
    codec.save_checkpoint(final, model, stage=cfg.stage, lambda_index=lam_index,
                          step=cfg.steps)
    try:
        from .plotting import plot_loss_trace

        plot_loss_trace(reports, out_dir / "trace.png")
    except Exception:
        pass  # figures are best-effort; training artifacts are already on disk
    return TrainResult(checkpoint=final, trace=trace_path, reports=reports)


def _save_resume(out_dir, model, cfg, lam_index, step, opt, noise_gen, data_rng,
                 disc, disc_opt):
    extra = {
        "next_step": step + 1,
        "optimizer": opt.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "noise_rng": noise_gen.get_state(),
        "data_rng": data_rng.bit_generator.state,
    }
    if disc is not None:
        extra["disc_state"] = disc.state_dict()
        extra["disc_optimizer"] = disc_opt.state_dict()
    payload = {
        "version": codec.CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.cfg),
        "config_hash": model_config_hash(model.cfg),
        "stage": cfg.stage,
        "lambda_index": lam_index,
        "variant": model.cfg.variant,
        "codebook_size": model.cfg.codebook_size,
        "step": step,
        "model_state": model.state_dict(),
        "extra": extra,
    }
    atomic_torch_save(payload, out_dir / "ckpt_last.pt")


@torch.no_grad()
def _precompute_targets(model: DualBranchCodec, crops: Tensor,
                        batch: int = 16) -> Tensor:
    """Auxiliary-encoder targets for every crop (the encoder is frozen, so
    this is a pure speed optimization)."""
    model.eval()
    outs = []
    for i in range(0, crops.shape[0], batch):
        outs.append(model.auxiliary_encode(to_float(crops[i : i + batch])))
    model.train()
    return torch.cat(outs)


def pretrain_auxiliary(data: DatasetSpec, cfg: TrainConfig,
                       model_cfg: ModelConfig | None = None) -> TrainResult:
    """Stage-0 wrapper: train the auxiliary encoder + generator autoencoder."""
    if cfg.stage != 0:
        raise ConfigError("pretrain_auxiliary requires a stage-0 config")
    return train(cfg, model_cfg=model_cfg, data=data)
