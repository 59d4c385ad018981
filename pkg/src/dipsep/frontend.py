"""Siamese contrastive frontend: conv encoder, Gumbel product quantizer,
span masking and a transformer context network, shared across domains."""
from __future__ import annotations

import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._seeding import derive_seed
from .errors import ConfigError, DataError

CHECKPOINT_FORMAT_VERSION = 1

TEMP_MAX = 2.0
TEMP_MIN = 0.5
TEMP_DECAY = 0.999995


@dataclass
class FrontendConfig:
    conv_channels: int = 64
    conv_strides: tuple = (5, 4, 2)
    conv_kernels: tuple = (10, 8, 4)
    num_codebooks: int = 2
    entries_per_codebook: int = 16
    model_dim: int = 64
    num_transformer_layers: int = 2
    num_heads: int = 4
    inner_dim: int = 128
    mask_start_prob: float = 0.65
    mask_span: int = 10
    dropout: float = 0.1
    # Dropout on attention weights. Kept apart from ``dropout`` because it
    # forces the slow attention kernel on CPU; the toy preset turns it off.
    attention_dropout: float = 0.0
    layerdrop: float = 0.05
    pos_conv_kernel: int = 16
    pos_conv_groups: int = 4
    # "independent": every frame is a span start with prob mask_start_prob.
    # "proportional": int(mask_start_prob * T / mask_span + U[0, 1)) distinct starts.
    mask_policy: str = "proportional"

    def __post_init__(self):
        self.conv_strides = tuple(int(s) for s in self.conv_strides)
        self.conv_kernels = tuple(int(k) for k in self.conv_kernels)
        if len(self.conv_strides) != len(self.conv_kernels):
            raise ConfigError("conv_strides and conv_kernels must have equal length")
        if self.num_codebooks * self.entries_per_codebook < 2:
            raise ConfigError("num_codebooks * entries_per_codebook must be >= 2")
        if self.model_dim % self.num_heads:
            raise ConfigError("model_dim must be divisible by num_heads")
        if self.model_dim % self.num_codebooks:
            raise ConfigError("model_dim must be divisible by num_codebooks")
        if not 0.0 <= self.mask_start_prob <= 1.0:
            raise ConfigError("mask_start_prob must lie in [0, 1]")
        if self.mask_policy not in ("independent", "proportional"):
            raise ConfigError(f"unknown mask_policy {self.mask_policy!r}")

    @classmethod
    def preset(cls, name: str) -> "FrontendConfig":
        if name == "toy":
            return cls()
        if name == "paper":
            return cls(
                conv_channels=512,
                conv_strides=(5, 2, 2, 2, 2, 2, 2),
                conv_kernels=(10, 3, 3, 3, 3, 2, 2),
                num_codebooks=2,
                entries_per_codebook=320,
                model_dim=768,
                num_transformer_layers=12,
                num_heads=8,
                inner_dim=3072,
                pos_conv_kernel=128,
                pos_conv_groups=16,
                attention_dropout=0.1,
            )
        raise ConfigError(f"unknown frontend preset {name!r}; expected 'toy' or 'paper'")

    @property
    def frame_stride(self) -> int:
        return int(np.prod(self.conv_strides))

    @property
    def receptive_field(self) -> int:
        rf = 1
        for k, s in zip(reversed(self.conv_kernels), reversed(self.conv_strides)):
            rf = (rf - 1) * s + k
        return rf

    def num_frames(self, num_samples: int) -> int:
        n = num_samples
        for k, s in zip(self.conv_kernels, self.conv_strides):
            n = (n - k) // s + 1
        return n

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_strides"] = list(self.conv_strides)
        d["conv_kernels"] = list(self.conv_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FrontendConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown FrontendConfig fields: {sorted(extra)}")
        return cls(**d)


@dataclass
class LatentSequence:
    """Frame matrix (T x D) with its hop size in samples and an optional mask."""

    frames: torch.Tensor
    frame_stride_samples: int
    mask: Optional[torch.Tensor] = None

    @property
    def num_frames(self) -> int:
        return self.frames.shape[-2]


@dataclass
class QuantizedSequence:
    codes: torch.Tensor  # (..., T, G) integer entry indices
    vectors: torch.Tensor  # (..., T, D)
    probs: torch.Tensor  # (G, V) batch-time average of the pre-Gumbel softmax


@dataclass
class BranchOutput:
    local: torch.Tensor  # E, (B, T, D)
    quantized: QuantizedSequence
    mask: torch.Tensor  # (B, T) bool
    context: torch.Tensor  # C, (B, T, D)


def anneal_temperature(step: float) -> float:
    """Gumbel temperature after ``step`` updates: 2.0 decayed by 0.999995, floored at 0.5."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return max(TEMP_MIN, TEMP_MAX * TEMP_DECAY**step)


# ---------------------------------------------------------------------- masking


def sample_mask(num_frames: int, cfg: FrontendConfig, seed: int) -> np.ndarray:
    """Union of length-``mask_span`` spans; never empty.

    Up to 10 redraws are made when a draw masks nothing, after which frame 0 is
    forced (a contrastive loss over zero targets is undefined).
    """
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    rng = np.random.default_rng(seed)
    mask = np.zeros(num_frames, dtype=bool)
    for _ in range(10):
        if cfg.mask_policy == "independent":
            starts = np.flatnonzero(rng.random(num_frames) < cfg.mask_start_prob)
        else:
            n_starts = int(cfg.mask_start_prob * num_frames / cfg.mask_span + rng.random())
            n_starts = min(n_starts, num_frames)
            starts = rng.choice(num_frames, size=n_starts, replace=False)
        for s in starts:
            mask[s : s + cfg.mask_span] = True
        if mask.any():
            return mask
    mask[0] = True
    return mask


# -------------------------------------------------------------------- quantizer


class _StraightThrough(torch.autograd.Function):
    """Forward: exact one-hot of the argmax. Backward: identity onto the soft input."""

    @staticmethod
    def forward(ctx, soft):
        idx = soft.argmax(dim=-1, keepdim=True)
        return torch.zeros_like(soft).scatter_(-1, idx, 1.0)

    @staticmethod
    def backward(ctx, grad):
        return grad


def gumbel_select(logits, temperature, hard=True, noise=None):
    """Gumbel-softmax selection over the last axis.

    ``noise`` is the additive Gumbel sample; ``None`` means noiseless (eval).
    """
    z = logits if noise is None else logits + noise
    soft = torch.softmax(z / temperature, dim=-1)
    return _StraightThrough.apply(soft) if hard else soft


def sample_gumbel(shape, dtype=torch.float32, generator=None):
    u = torch.rand(shape, dtype=dtype, generator=generator)
    return -torch.log((-torch.log(u.clamp_min(1e-10))).clamp_min(1e-10))


class GumbelQuantizer(nn.Module):
    def __init__(self, dim: int, num_codebooks: int, entries: int):
        super().__init__()
        self.num_codebooks = num_codebooks
        self.entries = entries
        self.to_logits = nn.Linear(dim, num_codebooks * entries)
        nn.init.normal_(self.to_logits.weight, std=1.0)
        nn.init.zeros_(self.to_logits.bias)
        self.codewords = nn.Parameter(torch.empty(num_codebooks, entries, dim // num_codebooks))
        nn.init.uniform_(self.codewords)
        self.out_proj = nn.Linear(dim, dim)
        self.temperature = TEMP_MAX

    def forward(self, x, hard: bool = True) -> QuantizedSequence:
        *lead, _ = x.shape
        logits = self.to_logits(x).view(*lead, self.num_codebooks, self.entries)
        probs = torch.softmax(logits, dim=-1).reshape(-1, self.num_codebooks, self.entries).mean(0)
        noise = sample_gumbel(logits.shape, logits.dtype) if self.training else None
        sel = gumbel_select(logits, self.temperature, hard=hard, noise=noise)
        codes = sel.argmax(dim=-1)
        # (..., G, V) x (G, V, D/G) -> (..., G, D/G) -> (..., D)
        vec = torch.einsum("...gv,gvd->...gd", sel, self.codewords).reshape(*lead, -1)
        return QuantizedSequence(codes=codes, vectors=self.out_proj(vec), probs=probs)


# ----------------------------------------------------------------------- model


class _ChannelLayerNorm(nn.LayerNorm):
    """LayerNorm over the channel axis of a (B, C, L) tensor."""

    def forward(self, x):
        return super().forward(x.transpose(1, 2)).transpose(1, 2)


class LocalEncoder(nn.Module):
    def __init__(self, cfg: FrontendConfig):
        super().__init__()
        layers = []
        in_ch = 1
        for k, s in zip(cfg.conv_kernels, cfg.conv_strides):
            layers += [
                nn.Conv1d(in_ch, cfg.conv_channels, k, stride=s, bias=False),
                _ChannelLayerNorm(cfg.conv_channels),
                nn.GELU(),
            ]
            in_ch = cfg.conv_channels
        self.convs = nn.Sequential(*layers)
        self.norm = nn.LayerNorm(cfg.conv_channels)
        self.proj = nn.Linear(cfg.conv_channels, cfg.model_dim)

    def forward(self, wav):
        feats = self.convs(wav.unsqueeze(1)).transpose(1, 2)
        return self.proj(self.norm(feats))


class ConvPositionalEmbedding(nn.Module):
    def __init__(self, dim: int, kernel: int, groups: int):
        super().__init__()
        self.conv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=groups)
        nn.init.normal_(self.conv.weight, mean=0.0, std=math.sqrt(4.0 / (kernel * dim)))
        nn.init.zeros_(self.conv.bias)
        self.trim = 1 if kernel % 2 == 0 else 0

    def forward(self, x):
        y = self.conv(x.transpose(1, 2))
        if self.trim:
            y = y[..., : -self.trim]
        return F.gelu(y).transpose(1, 2)


class ContextNetwork(nn.Module):
    """Bidirectional transformer over masked local features."""

    def __init__(self, cfg: FrontendConfig):
        super().__init__()
        self.pos = ConvPositionalEmbedding(cfg.model_dim, cfg.pos_conv_kernel, cfg.pos_conv_groups)
        self.norm = nn.LayerNorm(cfg.model_dim)
        self.dropout = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                cfg.model_dim,
                cfg.num_heads,
                cfg.inner_dim,
                dropout=cfg.dropout,
                activation="gelu",
                batch_first=True,
            )
            for _ in range(cfg.num_transformer_layers)
        )
        for layer in self.layers:
            layer.self_attn.dropout = cfg.attention_dropout
        self.layerdrop = cfg.layerdrop

    def forward(self, x, return_all: bool = False):
        x = self.dropout(self.norm(x + self.pos(x)))
        hidden = [x]
        for layer in self.layers:
            if self.training and self.layerdrop > 0 and float(torch.rand(())) < self.layerdrop:
                hidden.append(x)
                continue
            x = layer(x)
            hidden.append(x)
        return hidden if return_all else x


class DIPFrontend(nn.Module):
    """One parameter set; both Siamese branches call the same module."""

    def __init__(self, cfg: FrontendConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = LocalEncoder(cfg)
        self.quantizer = GumbelQuantizer(cfg.model_dim, cfg.num_codebooks, cfg.entries_per_codebook)
        self.mask_embedding = nn.Parameter(torch.empty(cfg.model_dim).uniform_())
        self.context = ContextNetwork(cfg)
        self.dropout_input = nn.Dropout(cfg.dropout)
        self.dropout_features = nn.Dropout(cfg.dropout)

    @property
    def gumbel_temperature(self) -> float:
        return self.quantizer.temperature

    @gumbel_temperature.setter
    def gumbel_temperature(self, value: float):
        if not TEMP_MIN <= value <= TEMP_MAX:
            raise ValueError(f"gumbel temperature {value} outside [{TEMP_MIN}, {TEMP_MAX}]")
        self.quantizer.temperature = float(value)

    def encode(self, wav):
        """(B, L) samples -> (B, T, D) local features."""
        if wav.shape[-1] < self.cfg.receptive_field:
            raise DataError(
                f"input has {wav.shape[-1]} samples; the encoder needs at least "
                f"{self.cfg.receptive_field}"
            )
        return self.encoder(wav)

    def quantize(self, local, hard: bool = True) -> QuantizedSequence:
        return self.quantizer(local, hard=hard)

    def apply_mask(self, local, mask):
        if mask.shape != local.shape[:-1]:
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match frames {tuple(local.shape[:-1])}")
        return torch.where(mask.unsqueeze(-1), self.mask_embedding.to(local.dtype), local)

    def contextualize(self, masked, return_all: bool = False):
        return self.context(masked, return_all=return_all)

    def make_masks(self, batch: int, num_frames: int, seed: int, device=None):
        masks = [sample_mask(num_frames, self.cfg, derive_seed(seed, b)) for b in range(batch)]
        return torch.as_tensor(np.stack(masks), device=device)

    def forward_branch(self, wav, seed: int, mask=None) -> BranchOutput:
        local = self.encode(wav)
        if mask is None:
            mask = self.make_masks(local.shape[0], local.shape[1], seed, local.device)
        targets = self.quantize(self.dropout_features(local))
        context = self.contextualize(self.apply_mask(self.dropout_input(local), mask))
        return BranchOutput(local=local, quantized=targets, mask=mask, context=context)

    def forward(self, wav, seed: int = 0) -> BranchOutput:
        return self.forward_branch(wav, seed)


def as_batch(waves: Sequence, dtype=torch.float32) -> torch.Tensor:
    """Stack equally long Waveforms (or arrays) into a (B, L) tensor."""
    arrs = [np.asarray(getattr(w, "samples", w)) for w in waves]
    lengths = {a.shape[0] for a in arrs}
    if len(lengths) != 1:
        raise ValueError(f"batch waveforms differ in length: {sorted(lengths)}")
    return torch.as_tensor(np.stack(arrs), dtype=dtype)


def forward_siamese(model: DIPFrontend, x_batch, y_batch, seed: int, tie_masks: bool = False):
    """Run the real (x) and synthetic (y) batches through the shared model.

    Masks use independent sub-seeds unless ``tie_masks`` is set.
    """
    x = x_batch if torch.is_tensor(x_batch) else as_batch(x_batch)
    y = y_batch if torch.is_tensor(y_batch) else as_batch(y_batch)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError("real and synthetic crops must have equal length")
    seed_x = derive_seed(seed, "real")
    seed_y = seed_x if tie_masks else derive_seed(seed, "synthetic")
    return model.forward_branch(x, seed_x), model.forward_branch(y, seed_y)


# ----------------------------------------------------------- functional helpers


def encode_local(model: DIPFrontend, w) -> LatentSequence:
    frames = model.encode(as_batch([w]))[0]
    return LatentSequence(frames, model.cfg.frame_stride)


def extract_cues(model: DIPFrontend, w, layer_policy: str = "last", layer_weights=None) -> LatentSequence:
    """Unmasked contextual cues from a frozen frontend; never tracks gradients."""
    model.eval()
    with torch.no_grad():
        x = w if torch.is_tensor(w) else as_batch([w])
        hidden = model.contextualize(model.encode(x), return_all=True)
        cues = combine_layers(hidden, layer_policy, layer_weights)
    return LatentSequence(cues[0] if not torch.is_tensor(w) else cues, model.cfg.frame_stride)


def combine_layers(hidden, layer_policy: str, layer_weights=None):
    """``last`` takes the top layer; ``weighted-sum`` mixes all hidden states
    (input to layer 1 included) with nonnegative normalized weights."""
    if layer_policy == "last":
        return hidden[-1]
    if layer_policy == "weighted-sum":
        if layer_weights is None:
            layer_weights = torch.ones(len(hidden))
        w = layer_weights.clamp_min(0.0)
        w = w / w.sum().clamp_min(1e-12)
        return sum(wi * h for wi, h in zip(w, hidden))
    raise ConfigError(f"unknown layer_policy {layer_policy!r}; expected 'last' or 'weighted-sum'")


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(path, model: DIPFrontend, optimizer=None, step: int = 0, extra: Optional[dict] = None):
    blob = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": json.dumps(model.cfg.to_dict(), sort_keys=True),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": int(step),
        "gumbel_temperature": float(model.gumbel_temperature),
        "extra": extra or {},
    }
    write_torch(blob, path)


def write_torch(obj, path) -> None:
    """torch.save through a buffer, so the archive's internal name (and with it
    the file bytes) does not depend on the destination file name."""
    buf = io.BytesIO()
    torch.save(obj, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, expected: Optional[FrontendConfig] = None):
    """Return ``(model, blob)``. ``expected`` must match the stored config field by field."""
    try:
        blob = torch.load(str(path), map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise DataError(f"frontend checkpoint not found: {path}") from exc
    if blob.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format_version {blob.get('format_version')}")
    cfg = FrontendConfig.from_dict(json.loads(blob["config"]))
    if expected is not None:
        for f in dataclasses.fields(FrontendConfig):
            a, b = getattr(cfg, f.name), getattr(expected, f.name)
            if a != b:
                raise ConfigError(f"checkpoint/config mismatch in field {f.name!r}: checkpoint has {a!r}, config has {b!r}")
    model = DIPFrontend(cfg)
    state = blob["state_dict"]
    own = model.state_dict()
    for name, tensor in own.items():
        if name not in state:
            raise ConfigError(f"checkpoint {path} lacks parameter {name!r}")
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise ConfigError(f"checkpoint parameter {name!r} has shape {tuple(state[name].shape)}, model expects {tuple(tensor.shape)}")
    model.load_state_dict(state)
    model.gumbel_temperature = blob["gumbel_temperature"]
    return model, blob


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over serialized parameters and buffers, in state-dict order."""
    import hashlib

    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
