"""Contrastive, diversity and kernel-MMD objectives and their MIC combination.

All functions are dtype-agnostic torch code, so they can be gradient-checked
in float64.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from scipy.spatial.distance import pdist

from ._seeding import derive_seed
from .errors import ConfigError


@dataclass
class NceConfig:
    temperature: float = 0.1
    num_negatives: int = 100
    similarity: str = "cosine"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("NCE temperature must be > 0")
        if self.num_negatives < 0:
            raise ConfigError("num_negatives must be >= 0")
        if self.similarity != "cosine":
            raise ConfigError(f"unsupported similarity {self.similarity!r}")


@dataclass
class MmdConfig:
    alpha: float = 10.0
    K: int = 100
    kernel: str = "gaussian_rbf"
    bandwidth_policy: str = "median_heuristic"
    fixed_bandwidth: Optional[float] = None
    max_samples_per_domain: int = 256
    pooling: str = "frame"  # or "utterance": mean-pool cues per utterance

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.K < 0:
            raise ConfigError("K must be >= 0")
        if self.kernel != "gaussian_rbf":
            raise ConfigError(f"unsupported kernel {self.kernel!r}")
        if self.bandwidth_policy not in ("median_heuristic", "fixed"):
            raise ConfigError(f"unknown bandwidth_policy {self.bandwidth_policy!r}")
        if self.bandwidth_policy == "fixed" and not (self.fixed_bandwidth and self.fixed_bandwidth > 0):
            raise ConfigError("bandwidth_policy 'fixed' needs a positive fixed_bandwidth")
        if self.pooling not in ("frame", "utterance"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")


@dataclass
class LossBreakdown:
    nce_x: float
    nce_y: float
    diversity_x: float
    diversity_y: float
    mpc_x: float
    mpc_y: float
    mmd: float
    mic: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ------------------------------------------------------------------------ NCE


def cosine(a, b, eps: float = 1e-8):
    """Cosine similarity along the last axis, broadcasting."""
    num = (a * b).sum(-1)
    return num / (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(eps)


def _unit(x, eps: float = 1e-8):
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def nce_from_candidates(query, positive, negatives, temperature: float):
    """-log softmax of the positive among {positive} U negatives.

    ``query``/``positive``: (N, D); ``negatives``: (N, K, D) with K >= 0.
    """
    cands = torch.cat([positive.unsqueeze(1), negatives], dim=1)
    logits = cosine(query.unsqueeze(1), cands) / temperature
    return -torch.log_softmax(logits, dim=-1)[:, 0]


def _nce_indexed(query, targets, neg, temperature: float):
    """Same as ``nce_from_candidates`` with negatives given as row indices into
    ``targets``; reads them from one similarity matrix."""
    sims = _unit(query) @ _unit(targets).T
    logits = torch.cat([sims.diagonal().unsqueeze(1), sims.gather(1, neg)], dim=1) / temperature
    return -torch.log_softmax(logits, dim=-1)[:, 0]


def _distractor_indices(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """For each i < n, ``k`` distinct indices from range(n) without i."""
    if k == 0:
        return np.zeros((n, 0), dtype=np.int64)
    keys = rng.random((n, n))
    np.fill_diagonal(keys, np.inf)
    return np.argpartition(keys, k - 1, axis=1)[:, :k]


def nce_loss(context, targets, mask, cfg: NceConfig, seed: int):
    """Mean InfoNCE over masked frames.

    ``context``/``targets``: (T, D) or (B, T, D); ``mask``: (T,) or (B, T).
    Distractors are other masked frames of the same utterance, drawn without
    replacement (fewer than ``num_negatives`` when not enough exist).
    """
    if context.dim() == 2:
        context, targets, mask = context.unsqueeze(0), targets.unsqueeze(0), mask.unsqueeze(0)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if not bool(mask.any()):
        raise ValueError("nce_loss needs at least one masked frame")
    losses = []
    for b in range(context.shape[0]):
        idx = torch.nonzero(mask[b]).squeeze(-1)
        n = idx.numel()
        if n == 0:
            continue
        c, z = context[b, idx], targets[b, idx]
        k = min(cfg.num_negatives, n - 1)
        neg = _distractor_indices(n, k, np.random.default_rng(derive_seed(seed, b)))
        losses.append(_nce_indexed(c, z, torch.as_tensor(neg), cfg.temperature))
    return torch.cat(losses).mean()


# ------------------------------------------------------------------ diversity


def diversity_loss(probs):
    """(GV - sum_g exp(H_g)) / GV for a (G, V) matrix of selection probabilities.

    A literal -log(mean p log p) would take the log of a nonpositive number, so
    the perplexity form is used instead. It is zero when every codebook is used
    uniformly.
    """
    row_sums = probs.detach().sum(-1)
    if torch.any((row_sums - 1.0).abs() > 1e-4) or torch.any(probs.detach() < 0):
        raise ValueError(f"diversity_loss rows must be probability vectors, row sums {row_sums.tolist()}")
    g, v = probs.shape
    entropy = -torch.special.xlogy(probs, probs).sum(-1)
    return (g * v - torch.exp(entropy).sum()) / (g * v)


def mpc_loss(context, targets, mask, probs, cfg: NceConfig, seed: int):
    """Diversity + InfoNCE; returns ``(total, {"nce": ..., "diversity": ...})``."""
    nce = nce_loss(context, targets, mask, cfg, seed)
    div = diversity_loss(probs)
    return div + nce, {"nce": nce, "diversity": div}


# ---------------------------------------------------------------------- MMD


def estimate_cue_probs(cues, targets, K: int, seed: int):
    """NCE estimate of each cue's marginal probability within one domain.

    ``cues``/``targets``: (M, D), aligned by index. Returns ``(joint, conditional)``
    where conditional[j] = exp(psi(C_j, Z_j)) / sum over {C_j} U distractors of
    exp(psi(C, Z_j)) with no temperature, and joint = conditional / M.
    """
    m = cues.shape[0]
    if m == 0:
        raise ValueError("estimate_cue_probs needs a nonempty cue set")
    k = min(K, m - 1)
    neg = torch.as_tensor(_distractor_indices(m, k, np.random.default_rng(seed)))
    sims = _unit(targets) @ _unit(cues).T  # sims[j, i] = psi(C_i, Z_j)
    cond = torch.softmax(torch.cat([sims.diagonal().unsqueeze(1), sims.gather(1, neg)], dim=1), dim=-1)[:, 0]
    return cond / m, cond


def gaussian_kernel(a, b, bandwidth: float):
    if bandwidth <= 0:
        raise ValueError("kernel bandwidth must be > 0")
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"kernel inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.exp(-((a - b) ** 2).sum() / (2.0 * bandwidth**2))


def _weighted_gram_sum(a, wa, b, wb, bandwidth):
    sq = (a.pow(2).sum(-1)[:, None] + b.pow(2).sum(-1)[None, :] - 2.0 * a @ b.T).clamp_min(0.0)
    return wa @ torch.exp(-sq / (2.0 * bandwidth**2)) @ wb


def median_bandwidth(pooled) -> float:
    """Median Euclidean distance over distinct pairs (1.0 if all points coincide)."""
    vals = pdist(pooled.detach().double().cpu().numpy())
    if vals.size == 0:
        return 1.0
    med = float(np.median(vals))
    return med if med > 0 else 1.0


def _subsample(x, w, cap: int, rng: np.random.Generator):
    if x.shape[0] <= cap:
        return x, w
    idx = torch.as_tensor(np.sort(rng.choice(x.shape[0], size=cap, replace=False)))
    ws = w[idx]
    return x[idx], ws * (w.sum() / ws.sum().clamp_min(1e-30))


def mmd_loss(cues_x, cues_y, p_x, p_y, cfg: MmdConfig, seed: int = 0, bandwidth: Optional[float] = None):
    """Weighted kernel MMD: sum px px k(x,x) - 2 sum px py k(x,y) + sum py py k(y,y).

    The cross term is averaged over both argument orders so that swapping the
    domains gives a bit-identical value.
    """
    if cues_x.shape[0] == 0 or cues_y.shape[0] == 0:
        raise ValueError("mmd_loss needs nonempty cue sets for both domains")
    if p_x.shape[0] != cues_x.shape[0] or p_y.shape[0] != cues_y.shape[0]:
        raise ValueError("MMD weights must align with their cue sets")
    if torch.any(p_x.detach() < 0) or torch.any(p_y.detach() < 0):
        raise ValueError("MMD weights must be nonnegative")
    cap = cfg.max_samples_per_domain
    cues_x, p_x = _subsample(cues_x, p_x, cap, np.random.default_rng(derive_seed(seed, "subsample")))
    cues_y, p_y = _subsample(cues_y, p_y, cap, np.random.default_rng(derive_seed(seed, "subsample")))
    if bandwidth is None:
        if cfg.bandwidth_policy == "fixed":
            bandwidth = float(cfg.fixed_bandwidth)
        else:
            bandwidth = median_bandwidth(torch.cat([cues_x, cues_y]))
    xx = _weighted_gram_sum(cues_x, p_x, cues_x, p_x, bandwidth)
    yy = _weighted_gram_sum(cues_y, p_y, cues_y, p_y, bandwidth)
    xy = 0.5 * (_weighted_gram_sum(cues_x, p_x, cues_y, p_y, bandwidth) + _weighted_gram_sum(cues_y, p_y, cues_x, p_x, bandwidth))
    return (xx + yy) - 2.0 * xy


def domain_cue_set(context, targets, cfg: MmdConfig):
    """Flatten (B, T, D) cues into the per-domain sample set used by the MMD."""
    if cfg.pooling == "utterance":
        return context.mean(1), targets.mean(1)
    d = context.shape[-1]
    return context.reshape(-1, d), targets.reshape(-1, d)


def mic_loss(branch_x, branch_y, nce_cfg: NceConfig, mmd_cfg: MmdConfig, seed: int):
    """MPC on both branches plus alpha-weighted MMD between their cues.

    Both branches draw distractors from the same seed, so identical branches
    give identical MPC terms.

    Returns ``(total_tensor, LossBreakdown)``. The breakdown's derived fields are
    summed in double precision from the logged components.
    """
    mpc_x, parts_x = mpc_loss(branch_x.context, branch_x.quantized.vectors, branch_x.mask,
                              branch_x.quantized.probs, nce_cfg, derive_seed(seed, "nce"))
    mpc_y, parts_y = mpc_loss(branch_y.context, branch_y.quantized.vectors, branch_y.mask,
                              branch_y.quantized.probs, nce_cfg, derive_seed(seed, "nce"))
    cx, zx = domain_cue_set(branch_x.context, branch_x.quantized.vectors, mmd_cfg)
    cy, zy = domain_cue_set(branch_y.context, branch_y.quantized.vectors, mmd_cfg)
    px, _ = estimate_cue_probs(cx, zx, mmd_cfg.K, derive_seed(seed, "probs"))
    py, _ = estimate_cue_probs(cy, zy, mmd_cfg.K, derive_seed(seed, "probs"))
    mmd = mmd_loss(cx, cy, px, py, mmd_cfg, seed=derive_seed(seed, "mmd"))
    total = mpc_x + mpc_y + mmd_cfg.alpha * mmd

    nce_x, nce_y = float(parts_x["nce"].detach()), float(parts_y["nce"].detach())
    div_x, div_y = float(parts_x["diversity"].detach()), float(parts_y["diversity"].detach())
    m_x, m_y, m = nce_x + div_x, nce_y + div_y, float(mmd.detach())
    breakdown = LossBreakdown(
        nce_x=nce_x, nce_y=nce_y, diversity_x=div_x, diversity_y=div_y,
        mpc_x=m_x, mpc_y=m_y, mmd=m, mic=m_x + m_y + mmd_cfg.alpha * m,
    )
    return total, breakdown
