"""MIC / MPC pretraining loop with warmup schedule, validation-based early
stopping, checkpointing and a per-step JSON-lines metrics log."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import frontend as fe
from ._seeding import derive_seed
from .errors import ConfigError, DataError, NumericError
from .mixkit import Manifest, WaveCache, sample_domain_batch
from .objectives import MmdConfig, NceConfig, mic_loss

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    lr: float = 5e-4
    warmup_steps: int = 32000
    schedule_scale: float = 1.0
    weight_decay: float = 0.01
    max_epochs: int = 100
    patience_epochs: int = 50
    batch_size: int = 4
    crop_seconds: float = 15.6
    sample_rate: int = 16000
    val_fraction: float = 0.1
    grad_clip: Optional[float] = None
    seed: int = 0
    nce: NceConfig = field(default_factory=NceConfig)
    mmd: MmdConfig = field(default_factory=MmdConfig)
    frontend: fe.FrontendConfig = field(default_factory=fe.FrontendConfig)

    @property
    def crop_samples(self) -> int:
        return int(round(self.crop_seconds * self.sample_rate))

    @property
    def scaled_warmup(self) -> int:
        return max(1, int(round(self.warmup_steps * self.schedule_scale)))

    @classmethod
    def preset(cls, name: str) -> "PretrainConfig":
        if name == "paper":
            return cls(frontend=fe.FrontendConfig.preset("paper"))
        if name == "toy":
            return cls(
                frontend=fe.FrontendConfig.preset("toy"),
                lr=5e-3,
                batch_size=1,
                crop_seconds=4.0,
                sample_rate=8000,
                schedule_scale=0.005,
                max_epochs=50,
                patience_epochs=50,
            )
        raise ConfigError(f"unknown preset {name!r}; expected 'toy' or 'paper'")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["frontend"] = self.frontend.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        d = dict(d)
        nce = NceConfig(**d.pop("nce", {}))
        mmd = MmdConfig(**d.pop("mmd", {}))
        front = fe.FrontendConfig.from_dict(d.pop("frontend", {}))
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown PretrainConfig fields: {sorted(extra)}")
        return cls(nce=nce, mmd=mmd, frontend=front, **d)


def steps_per_epoch(cfg: PretrainConfig, real: Manifest, syn: Manifest) -> int:
    """An epoch is one pass over the smaller manifest's record count."""
    return max(1, math.ceil(min(len(real), len(syn)) / cfg.batch_size))


def temperature_at(step: int, cfg: PretrainConfig) -> float:
    """Gumbel temperature after ``step`` updates, on the same compressed clock
    as the learning-rate schedule."""
    return fe.anneal_temperature(step / cfg.schedule_scale)


def lr_at(step: int, cfg: PretrainConfig, total_steps: Optional[int] = None) -> float:
    """Linear warmup to ``cfg.lr`` then linear decay to zero at ``total_steps``
    (constant after warmup if ``total_steps`` is None)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.scaled_warmup
    if step <= warm:
        return cfg.lr * step / warm
    if total_steps is None:
        return cfg.lr
    if total_steps <= warm:
        return 0.0
    return cfg.lr * max(0.0, (total_steps - step) / (total_steps - warm))


def _holdout(man: Manifest, fraction: float):
    return man.split(max(1, int(round(len(man) * fraction))))


def validate(model, real_val: Manifest, syn_val: Manifest, cfg: PretrainConfig, cache: Optional[WaveCache] = None) -> float:
    """Mean L_MIC over fixed validation batches (fixed crops and masks)."""
    if isinstance(model, (str, Path)):
        model, _ = fe.load_checkpoint(model)
    cache = cache or WaveCache()
    n_batches = steps_per_epoch(cfg, real_val, syn_val)
    was_training = model.training
    model.eval()
    vals = []
    with torch.no_grad():
        for i in range(n_batches):
            seed = derive_seed(cfg.seed, "val", i)
            xb, yb = sample_domain_batch(real_val, syn_val, cfg.batch_size, cfg.crop_samples,
                                         derive_seed(seed, "batch"), cache)
            bx, by = fe.forward_siamese(model, xb, yb, derive_seed(seed, "mask"))
            _, bd = mic_loss(bx, by, cfg.nce, cfg.mmd, derive_seed(seed, "loss"))
            vals.append(bd.mic)
    model.train(was_training)
    return float(np.mean(vals))


@dataclass
class PretrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    metrics_log: Path
    best_val: float
    epochs_run: int
    steps: int
    stopped_early: bool


def pretrain(
    cfg: PretrainConfig,
    real: Manifest,
    syn: Manifest,
    out_dir,
    real_val: Optional[Manifest] = None,
    syn_val: Optional[Manifest] = None,
) -> PretrainResult:
    """Siamese MIC pretraining. Without explicit validation manifests a tail
    holdout of ``val_fraction`` of each manifest is used."""
    if len(real) == 0 or len(syn) == 0:
        raise DataError("pretraining needs nonempty real and synthetic manifests")
    for man, tag in ((real, "real"), (syn, "synthetic")):
        rates = {r.sample_rate for r in man}
        if rates != {cfg.sample_rate}:
            raise DataError(f"{tag} manifest sample rates {sorted(rates)} != configured {cfg.sample_rate}")
    if cfg.crop_samples < cfg.frontend.receptive_field:
        raise ConfigError(f"crop of {cfg.crop_samples} samples is shorter than the encoder receptive field {cfg.frontend.receptive_field}")
    if real_val is None:
        real, real_val = _holdout(real, cfg.val_fraction)
    if syn_val is None:
        syn, syn_val = _holdout(syn, cfg.val_fraction)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    best_path, last_path = out / "checkpoint_best.pt", out / "checkpoint_last.pt"
    metrics_path, val_path = out / "metrics.jsonl", out / "validation.jsonl"

    torch.manual_seed(derive_seed(cfg.seed, "init"))
    model = fe.DIPFrontend(cfg.frontend)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    per_epoch = steps_per_epoch(cfg, real, syn)
    total = per_epoch * cfg.max_epochs
    cache = WaveCache()
    extra = {"pretrain_config": cfg.to_dict()}

    step, best, stale, epochs_run, stopped = 0, math.inf, 0, 0, False
    model.gumbel_temperature = temperature_at(0, cfg)
    fe.save_checkpoint(last_path, model, opt, step, extra)
    with open(metrics_path, "w") as mlog, open(val_path, "w") as vlog:
        for epoch in range(cfg.max_epochs):
            model.train()
            for _ in range(per_epoch):
                seed = derive_seed(cfg.seed, "step", step)
                xb, yb = sample_domain_batch(real, syn, cfg.batch_size, cfg.crop_samples,
                                             derive_seed(seed, "batch"), cache)
                lr = lr_at(step, cfg, total)
                for group in opt.param_groups:
                    group["lr"] = lr
                torch.manual_seed(seed)
                bx, by = fe.forward_siamese(model, xb, yb, derive_seed(seed, "mask"))
                loss, bd = mic_loss(bx, by, cfg.nce, cfg.mmd, derive_seed(seed, "loss"))
                if not torch.isfinite(loss):
                    raise NumericError(
                        f"non-finite MIC loss at step {step} (epoch {epoch}): {bd.to_dict()}; "
                        f"last good checkpoint: {last_path}"
                    )
                opt.zero_grad()
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                row = {"step": step, "lr": lr, "gumbel_temperature": model.gumbel_temperature, **bd.to_dict()}
                mlog.write(json.dumps(row) + "\n")
                step += 1
                model.gumbel_temperature = temperature_at(step, cfg)
            mlog.flush()
            epochs_run = epoch + 1
            val = validate(model, real_val, syn_val, cfg, cache)
            if not math.isfinite(val):
                raise NumericError(f"non-finite validation loss after epoch {epoch}; last good checkpoint: {last_path}")
            fe.save_checkpoint(last_path, model, opt, step, extra)
            improved = val < best
            if improved:
                best, stale = val, 0
                fe.save_checkpoint(best_path, model, opt, step, {**extra, "val_loss": val, "epoch": epoch})
            else:
                stale += 1
            vlog.write(json.dumps({"epoch": epoch, "step": step, "val_mic": val, "improved": improved}) + "\n")
            vlog.flush()
            log.info("epoch %d step %d val %.5f%s", epoch, step, val, " *" if improved else "")
            if stale >= cfg.patience_epochs:
                stopped = True
                break
    return PretrainResult(best_path, last_path, metrics_path, best, epochs_run, step, stopped)
