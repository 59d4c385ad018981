"""Frozen-frontend separation pipeline: waveform encoder, cue adaptation
(upsample + projection), sum fusion, mask estimation, decoder, PIT training."""
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
import torch.nn as nn
import torch.nn.functional as F

from . import frontend as fe
from ._seeding import derive_seed
from .errors import ConfigError, DataError, NumericError
from .metrics import CLAMP_DB, best_permutation
from .mixkit import Manifest, Waveform, WaveCache

log = logging.getLogger(__name__)

SEPARATOR_FORMAT_VERSION = 1


@dataclass
class SeparatorConfig:
    enc_kernel: int = 32
    enc_stride: int = 16
    enc_channels: int = 64
    separator_kind: str = "tcn"
    num_speakers: int = 2
    fusion: str = "sum"
    upsample: str = "nearest"
    layer_policy: str = "last"
    tcn_bottleneck: int = 64
    tcn_hidden: int = 128
    tcn_kernel: int = 3
    tcn_blocks: int = 4
    tcn_repeats: int = 2
    blstm_hidden: int = 128
    blstm_layers: int = 3
    n_fft: int = 256
    hop: int = 64

    def __post_init__(self):
        if self.separator_kind not in ("tcn", "blstm_psm"):
            raise ConfigError(f"unknown separator_kind {self.separator_kind!r}")
        if self.fusion != "sum":
            raise ConfigError(f"unsupported fusion {self.fusion!r}")
        if self.upsample not in ("nearest", "linear"):
            raise ConfigError(f"unknown upsample {self.upsample!r}")
        if self.layer_policy not in ("last", "weighted-sum"):
            raise ConfigError(f"unknown layer_policy {self.layer_policy!r}")

    @property
    def frame_stride(self) -> int:
        return self.enc_stride if self.separator_kind == "tcn" else self.hop


@dataclass
class SepTrainConfig:
    separator: SeparatorConfig = field(default_factory=SeparatorConfig)
    lr: float = 1e-3
    batch_size: int = 2
    max_epochs: int = 200
    max_steps: Optional[int] = None
    lr_patience: int = 5
    early_stop_patience: int = 30
    crop_seconds: float = 4.0
    grad_clip: float = 5.0
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SepTrainConfig":
        d = dict(d)
        sep = SeparatorConfig(**d.pop("separator", {}))
        return cls(separator=sep, **d)


@dataclass
class SeparationOutput:
    masks: torch.Tensor  # (num_speakers, frames, channels)
    estimates: list


# ------------------------------------------------------------- building blocks


def encoder_frames(num_samples: int, cfg: SeparatorConfig) -> int:
    return (num_samples - cfg.enc_kernel) // cfg.enc_stride + 1


class GlobalLayerNorm(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-8):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(1, channels, 1))
        self.beta = nn.Parameter(torch.zeros(1, channels, 1))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=(1, 2), keepdim=True)
        var = (x - mean).pow(2).mean(dim=(1, 2), keepdim=True)
        return self.gamma * (x - mean) / torch.sqrt(var + self.eps) + self.beta


class TemporalBlock(nn.Module):
    def __init__(self, bottleneck: int, hidden: int, kernel: int, dilation: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(bottleneck, hidden, 1),
            nn.PReLU(),
            GlobalLayerNorm(hidden),
            nn.Conv1d(hidden, hidden, kernel, dilation=dilation,
                      padding=dilation * (kernel - 1) // 2, groups=hidden),
            nn.PReLU(),
            GlobalLayerNorm(hidden),
            nn.Conv1d(hidden, bottleneck, 1),
        )

    def forward(self, x):
        return x + self.net(x)


class TCNMaskNet(nn.Module):
    """Reduced ConvTasNet temporal convolution stack."""

    def __init__(self, cfg: SeparatorConfig):
        super().__init__()
        n, b = cfg.enc_channels, cfg.tcn_bottleneck
        blocks = [
            TemporalBlock(b, cfg.tcn_hidden, cfg.tcn_kernel, 2**x)
            for _ in range(cfg.tcn_repeats)
            for x in range(cfg.tcn_blocks)
        ]
        self.net = nn.Sequential(GlobalLayerNorm(n), nn.Conv1d(n, b, 1), *blocks, nn.PReLU(),
                                 nn.Conv1d(b, cfg.num_speakers * n, 1))
        self.num_speakers = cfg.num_speakers

    def forward(self, x):
        bsz, n, t = x.shape
        return torch.sigmoid(self.net(x)).view(bsz, self.num_speakers, n, t)


class TasNet(nn.Module):
    """Plain encoder / mask network / decoder separator.

    ``extra`` features, when given, are summed into the encoder output before
    mask estimation; masks are always applied to the encoder output itself.
    """

    def __init__(self, cfg: SeparatorConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = nn.Conv1d(1, cfg.enc_channels, cfg.enc_kernel, stride=cfg.enc_stride, bias=False)
        self.masknet = TCNMaskNet(cfg)
        self.decoder = nn.ConvTranspose1d(cfg.enc_channels, 1, cfg.enc_kernel, stride=cfg.enc_stride, bias=False)

    def encode(self, wav):
        if wav.shape[-1] < self.cfg.enc_kernel:
            raise DataError(f"input has {wav.shape[-1]} samples; the encoder needs at least {self.cfg.enc_kernel}")
        return F.relu(self.encoder(wav.unsqueeze(1)))

    def num_frames(self, num_samples: int) -> int:
        return encoder_frames(num_samples, self.cfg)

    def features_dim(self) -> int:
        return self.cfg.enc_channels

    def forward(self, wav, extra=None):
        feats = self.encode(wav)
        fused = feats if extra is None else feats + extra.transpose(1, 2)
        masks = self.masknet(fused)
        bsz, c, n, t = masks.shape
        est = self.decoder((feats.unsqueeze(1) * masks).view(bsz * c, n, t)).view(bsz, c, -1)
        return masks.transpose(2, 3), _fit_length(est, wav.shape[-1])


class BLSTMPSM(nn.Module):
    """Three-layer BLSTM estimating phase-sensitive magnitude masks."""

    def __init__(self, cfg: SeparatorConfig):
        super().__init__()
        self.cfg = cfg
        self.freq = cfg.n_fft // 2 + 1
        self.blstm = nn.LSTM(self.freq, cfg.blstm_hidden, num_layers=cfg.blstm_layers,
                             bidirectional=True, batch_first=True)
        self.head = nn.Linear(2 * cfg.blstm_hidden, cfg.num_speakers * self.freq)
        self.register_buffer("window", torch.hann_window(cfg.n_fft), persistent=False)

    def stft(self, wav):
        return torch.stft(wav, self.cfg.n_fft, self.cfg.hop, window=self.window.to(wav.dtype),
                          center=True, return_complex=True)

    def num_frames(self, num_samples: int) -> int:
        return num_samples // self.cfg.hop + 1

    def features_dim(self) -> int:
        return self.freq

    def masks_and_stft(self, wav, extra=None):
        spec = self.stft(wav)  # (B, F, T)
        feats = torch.log1p(spec.abs()).transpose(1, 2)
        fused = feats if extra is None else feats + extra
        h, _ = self.blstm(fused)
        bsz, t, _ = h.shape
        masks = torch.sigmoid(self.head(h)).view(bsz, t, self.cfg.num_speakers, self.freq)
        return masks.permute(0, 2, 1, 3), spec

    def forward(self, wav, extra=None):
        masks, spec = self.masks_and_stft(wav, extra)
        masked = masks.transpose(2, 3) * spec.unsqueeze(1)  # mixture phase kept
        bsz, c, f, t = masked.shape
        est = torch.istft(masked.reshape(bsz * c, f, t), self.cfg.n_fft, self.cfg.hop,
                          window=self.window.to(wav.dtype), center=True, length=wav.shape[-1])
        return masks, est.view(bsz, c, -1)


def _fit_length(x, length: int):
    if x.shape[-1] >= length:
        return x[..., :length]
    return F.pad(x, (0, length - x.shape[-1]))


def adapt_upsample(cues, cue_stride: int, target_frames: int, frame_stride: int, mode: str = "nearest"):
    """Time-align (B, T_c, D) cue frames to a ``target_frames`` grid with hop ``frame_stride``.

    ``nearest`` maps output frame t to cue frame floor(t * frame_stride / cue_stride),
    i.e. repeats each cue frame by the stride ratio, padding the tail with the last frame.
    """
    if cues.shape[-2] == 0:
        raise ValueError("no cue frames to upsample")
    if target_frames < 1:
        raise ValueError("target_frames must be >= 1")
    t_c = cues.shape[-2]
    pos = torch.arange(target_frames, dtype=torch.float64) * (frame_stride / cue_stride)
    if mode == "nearest":
        idx = torch.floor(pos).long().clamp_(0, t_c - 1)
        return cues[..., idx, :]
    if mode == "linear":
        lo = torch.floor(pos).long().clamp_(0, t_c - 1)
        hi = (lo + 1).clamp_(max=t_c - 1)
        frac = (pos - torch.floor(pos)).clamp_(0, 1).to(cues.dtype).unsqueeze(-1)
        frac = torch.where((lo == hi).unsqueeze(-1), torch.zeros_like(frac), frac)
        return cues[..., lo, :] * (1 - frac) + cues[..., hi, :] * frac
    raise ConfigError(f"unknown upsample mode {mode!r}")


class CueAdapter(nn.Module):
    """Upsampling plus a bare linear projection from cue dim to separator features."""

    def __init__(self, cue_dim: int, out_dim: int, mode: str):
        super().__init__()
        self.proj = nn.Linear(cue_dim, out_dim)
        self.mode = mode

    def forward(self, cues, cue_stride: int, target_frames: int, frame_stride: int):
        return self.proj(adapt_upsample(cues, cue_stride, target_frames, frame_stride, self.mode))


def _rms_normalize(wav):
    rms = wav.pow(2).mean(-1, keepdim=True).sqrt()
    return wav / torch.where(rms > 0, rms, torch.ones_like(rms))


class FrontendSeparator(nn.Module):
    """Separator with an optional frozen frontend whose cues are fused by sum.

    Without a frontend the forward pass is exactly the core separator's.
    """

    def __init__(self, cfg: SeparatorConfig, frontend: Optional[fe.DIPFrontend] = None):
        super().__init__()
        self.cfg = cfg
        self.core = TasNet(cfg) if cfg.separator_kind == "tcn" else BLSTMPSM(cfg)
        self.frontend = frontend
        if frontend is not None:
            frontend.requires_grad_(False)
            frontend.eval()
            d = frontend.cfg.model_dim
            self.adapter = CueAdapter(d, self.core.features_dim(), cfg.upsample)
            n_hidden = frontend.cfg.num_transformer_layers + 1
            if cfg.layer_policy == "weighted-sum":
                self.layer_weights = nn.Parameter(torch.ones(n_hidden))
            else:
                self.layer_weights = None

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frontend is not None:
            self.frontend.eval()
        return self

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("frontend.")]

    def separator_state(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("frontend.")}

    def cue_features(self, wav):
        with torch.no_grad():
            hidden = self.frontend.contextualize(self.frontend.encode(_rms_normalize(wav)), return_all=True)
        cues = fe.combine_layers(hidden, self.cfg.layer_policy, self.layer_weights)
        return self.adapter(cues, self.frontend.cfg.frame_stride,
                            self.core.num_frames(wav.shape[-1]), self.cfg.frame_stride)

    def forward(self, wav):
        extra = self.cue_features(wav) if self.frontend is not None else None
        return self.core(wav, extra)


# ------------------------------------------------------------------- losses


def si_sdr_torch(est, ref, eps: float = 1e-8):
    """Differentiable clamped SI-SDR (dB) along the last axis."""
    est = est - est.mean(-1, keepdim=True)
    ref = ref - ref.mean(-1, keepdim=True)
    alpha = (est * ref).sum(-1, keepdim=True) / (ref.pow(2).sum(-1, keepdim=True) + eps)
    target = alpha * ref
    noise = est - target
    val = 10 * torch.log10((target.pow(2).sum(-1) + eps) / (noise.pow(2).sum(-1) + eps))
    return val.clamp(-CLAMP_DB, CLAMP_DB)


def _pit_select(pairwise):
    """``pairwise[b, i, j]`` is the loss of estimate j for reference i."""
    losses, perms = [], []
    for b in range(pairwise.shape[0]):
        perm, _ = best_permutation(-pairwise[b].detach().cpu().double().numpy())
        idx = torch.arange(len(perm))
        losses.append(pairwise[b, idx, torch.as_tensor(perm)].mean())
        perms.append(perm)
    return torch.stack(losses).mean(), perms


def pit_si_sdr_loss(estimates, references):
    """Negative SI-SDR under the best speaker permutation.

    Accepts (C, L) or (B, C, L). Returns ``(loss, permutation)`` (a list of
    permutations for batched input); ties resolve to the lexicographically
    smallest permutation.
    """
    batched = estimates.dim() == 3
    if not batched:
        estimates, references = estimates.unsqueeze(0), references.unsqueeze(0)
    if estimates.shape != references.shape:
        raise ValueError(f"estimates {tuple(estimates.shape)} vs references {tuple(references.shape)}")
    pairwise = -si_sdr_torch(estimates.unsqueeze(1), references.unsqueeze(2))
    loss, perms = _pit_select(pairwise)
    return loss, (perms if batched else perms[0])


def psm_pit_loss(masks, mix_spec, ref_specs):
    """PIT MSE between masked mixture magnitudes and phase-sensitive targets.

    ``masks``: (B, C, T, F); ``mix_spec``: (B, F, T) complex; ``ref_specs``: (B, C, F, T) complex.
    """
    mag = mix_spec.abs().transpose(1, 2).unsqueeze(1)  # (B, 1, T, F)
    ref = ref_specs.transpose(2, 3)
    cos = torch.cos(torch.angle(ref) - torch.angle(mix_spec.transpose(1, 2)).unsqueeze(1))
    target = (ref.abs() * cos).clamp(min=0).minimum(mag)  # PSM clipped to [0, 1] times |X|
    est = masks * mag
    pairwise = (est.unsqueeze(1) - target.unsqueeze(2)).pow(2).mean(dim=(-1, -2))
    return _pit_select(pairwise)


# ---------------------------------------------------------------- inference


def separate(model: FrontendSeparator, w: Waveform) -> SeparationOutput:
    """Separate one mixture. Input is RMS-normalized for the network and the
    estimates are scaled back, so outputs are in the input's units."""
    model.eval()
    x = torch.tensor(w.samples, dtype=torch.float32).unsqueeze(0)
    rms = float(x.pow(2).mean().sqrt())
    scale = rms if rms > 0 else 1.0
    with torch.no_grad():
        masks, est = model(x / scale)
    est = est[0].double() * scale
    return SeparationOutput(masks[0], [Waveform(e.numpy(), w.sample_rate) for e in est])


# ----------------------------------------------------------------- training


def save_separator(path, model: FrontendSeparator, train_cfg: SepTrainConfig, step: int, extra: Optional[dict] = None):
    front = None
    if model.frontend is not None:
        front = {"config": model.frontend.cfg.to_dict(), "hash": fe.parameter_hash(model.frontend)}
    fe.write_torch({
        "format_version": SEPARATOR_FORMAT_VERSION,
        "config": json.dumps(train_cfg.to_dict(), sort_keys=True),
        "state_dict": model.separator_state(),
        "frontend": front,
        "step": int(step),
        "extra": extra or {},
    }, path)


def load_separator(path, frontend=None) -> FrontendSeparator:
    """Rebuild a trained separator. ``frontend`` (checkpoint path or model) must
    be the one it was trained with, or ``None`` for a frontend-free separator."""
    try:
        blob = torch.load(str(path), map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise DataError(f"separator checkpoint not found: {path}") from exc
    if blob.get("format_version") != SEPARATOR_FORMAT_VERSION:
        raise DataError(f"{path}: not a separator checkpoint")
    cfg = SepTrainConfig.from_dict(json.loads(blob["config"]))
    if isinstance(frontend, (str, Path)):
        frontend, _ = fe.load_checkpoint(frontend)
    stored = blob["frontend"]
    if stored is None and frontend is not None:
        raise ConfigError("separator was trained without a frontend; pass --frontend none")
    if stored is not None:
        if frontend is None:
            raise ConfigError("separator was trained with a frontend; pass its checkpoint via --frontend")
        if fe.parameter_hash(frontend) != stored["hash"]:
            raise ConfigError("frontend checkpoint differs from the one the separator was trained with")
    model = FrontendSeparator(cfg.separator, frontend)
    missing, unexpected = model.load_state_dict(blob["state_dict"], strict=False)
    missing = [k for k in missing if not k.startswith("frontend.")]
    if missing or unexpected:
        raise ConfigError(f"separator checkpoint mismatch: missing {missing}, unexpected {unexpected}")
    return model


@dataclass
class _Example:
    id: str
    mix: np.ndarray
    refs: np.ndarray  # (C, L)


def load_examples(manifest: Manifest, num_speakers: int) -> list:
    if not manifest.has_references:
        raise DataError("separator training/evaluation needs a manifest whose records carry source_paths")
    cache = WaveCache()
    out = []
    for r in manifest:
        if len(r.source_paths) != num_speakers:
            raise DataError(f"record {r.id!r} has {len(r.source_paths)} sources, expected {num_speakers}")
        mix = cache.get(r.path)
        refs = [cache.get(p) for p in r.source_paths]
        if any(len(s) != len(mix) for s in refs):
            raise DataError(f"record {r.id!r}: source lengths differ from the mixture")
        out.append(_Example(r.id, mix.samples, np.stack([s.samples for s in refs])))
    return out


def _make_batch(examples, crop: int, rng: np.random.Generator):
    length = min(crop, max(e.mix.size for e in examples))
    mixes, refs = [], []
    for e in examples:
        if e.mix.size > length:
            start = int(rng.integers(0, e.mix.size - length + 1))
            m, r = e.mix[start : start + length], e.refs[:, start : start + length]
        else:
            pad = length - e.mix.size
            m, r = np.pad(e.mix, (0, pad)), np.pad(e.refs, ((0, 0), (0, pad)))
        scale = np.sqrt(np.mean(m**2))
        scale = scale if scale > 0 else 1.0
        mixes.append(m / scale)
        refs.append(r / scale)
    return torch.as_tensor(np.stack(mixes), dtype=torch.float32), torch.as_tensor(np.stack(refs), dtype=torch.float32)


def _batch_loss(model: FrontendSeparator, mix, refs):
    if model.cfg.separator_kind == "tcn":
        _, est = model(mix)
        loss, _ = pit_si_sdr_loss(est, refs)
        return loss
    extra = model.cue_features(mix) if model.frontend is not None else None
    masks, spec = model.core.masks_and_stft(mix, extra)
    ref_specs = model.core.stft(refs.reshape(-1, refs.shape[-1])).view(refs.shape[0], refs.shape[1], spec.shape[1], spec.shape[2])
    loss, _ = psm_pit_loss(masks, spec, ref_specs)
    return loss


def evaluate_loss(model: FrontendSeparator, examples) -> float:
    model.eval()
    vals = []
    with torch.no_grad():
        for e in examples:
            mix, refs = _make_batch([e], e.mix.size, np.random.default_rng(0))
            vals.append(float(_batch_loss(model, mix, refs)))
    return float(np.mean(vals))


def train_separator(
    cfg: SepTrainConfig,
    train_manifest: Manifest,
    frontend=None,
    out_dir=None,
    val_manifest: Optional[Manifest] = None,
):
    """Train the separator (the frontend, if any, stays frozen).

    Returns ``(checkpoint_path, model, history)``; the checkpoint holds the
    best-validation weights. Validation falls back to the training set.
    """
    if isinstance(frontend, (str, Path)):
        frontend, _ = fe.load_checkpoint(frontend)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = load_examples(train_manifest, cfg.separator.num_speakers)
    val = load_examples(val_manifest, cfg.separator.num_speakers) if val_manifest is not None else train
    rate = train_manifest.records[0].sample_rate
    crop = max(int(round(cfg.crop_seconds * rate)), cfg.separator.enc_kernel)

    torch.manual_seed(derive_seed(cfg.seed, "sep-init"))
    model = FrontendSeparator(cfg.separator, frontend)
    front_hash = fe.parameter_hash(frontend) if frontend is not None else None
    opt = torch.optim.Adam(model.trainable_parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, mode="min", factor=0.5,
                                                      patience=cfg.lr_patience, threshold=0.0)
    ckpt = out / "separator_best.pt"
    log_path = out / "train_log.jsonl"
    history = []
    best, stale, step = math.inf, 0, 0
    with open(log_path, "w") as logf:
        for epoch in range(cfg.max_epochs):
            model.train()
            rng = np.random.default_rng(derive_seed(cfg.seed, "epoch", epoch))
            order = rng.permutation(len(train))
            train_losses = []
            for i in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                mix, refs = _make_batch([train[j] for j in order[i : i + cfg.batch_size]], crop, rng)
                torch.manual_seed(derive_seed(cfg.seed, "step", step))
                loss = _batch_loss(model, mix, refs)
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite separator loss at step {step} (epoch {epoch})")
                opt.zero_grad()
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), cfg.grad_clip)
                opt.step()
                train_losses.append(float(loss.detach()))
                step += 1
            if not train_losses:
                break
            val_loss = evaluate_loss(model, val)
            sched.step(val_loss)
            improved = val_loss < best
            if improved:
                best, stale = val_loss, 0
                save_separator(ckpt, model, cfg, step, {"epoch": epoch, "val_loss": val_loss})
            else:
                stale += 1
            row = {"epoch": epoch, "step": step, "train_loss": float(np.mean(train_losses)),
                   "val_loss": val_loss, "lr": opt.param_groups[0]["lr"]}
            history.append(row)
            logf.write(json.dumps(row) + "\n")
            if stale >= cfg.early_stop_patience:
                break
    if front_hash is not None and fe.parameter_hash(frontend) != front_hash:
        raise NumericError("frontend parameters changed during separator training")
    best_model = load_separator(ckpt, frontend)
    return ckpt, best_model, history
