"""SI-SDR, SDR and their improvements, with permutation handling."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

CLAMP_DB = 60.0


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def _ratio_db(signal_energy: float, noise_energy: float) -> float:
    if noise_energy <= 0.0:
        return CLAMP_DB if signal_energy > 0.0 else -CLAMP_DB
    if signal_energy <= 0.0:
        return -CLAMP_DB
    return float(np.clip(10.0 * np.log10(signal_energy / noise_energy), -CLAMP_DB, CLAMP_DB))


def _prepare(est, ref):
    e, r = _as_array(est), _as_array(ref)
    if e.shape != r.shape:
        raise ValueError(f"estimate and reference lengths differ: {e.shape} vs {r.shape}")
    e = e - e.mean()
    r = r - r.mean()
    if not np.any(r):
        raise ValueError("reference has zero energy after mean removal")
    return e, r


def si_sdr(est, ref) -> float:
    """Scale-invariant SDR in dB on zero-meaned signals, clamped to [-60, 60]."""
    e, r = _prepare(est, ref)
    target = (np.dot(e, r) / np.dot(r, r)) * r
    noise = e - target
    return _ratio_db(float(np.dot(target, target)), float(np.dot(noise, noise)))


def snr(est, ref) -> float:
    """Plain SNR (zero-meaned, no projection) in dB, clamped to [-60, 60]."""
    e, r = _prepare(est, ref)
    noise = e - r
    return _ratio_db(float(np.dot(r, r)), float(np.dot(noise, noise)))


def si_sdri(est, mix, ref) -> float:
    return si_sdr(est, ref) - si_sdr(mix, ref)


def sdri(est, mix, ref) -> float:
    """SDR improvement, using plain SNR as the SDR (not the BSS-eval decomposition)."""
    return snr(est, ref) - snr(mix, ref)


def best_permutation(scores) -> tuple[tuple, float]:
    """Maximize the mean of scores[i, perm[i]]; ties go to the lexicographically
    smallest permutation. ``scores[i, j]`` scores estimate j against reference i."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    best, best_val = None, -np.inf
    for perm in itertools.permutations(range(n)):
        val = float(np.mean([scores[i, perm[i]] for i in range(n)]))
        if val > best_val:
            best, best_val = perm, val
    return best, best_val


def pairwise_si_sdr(estimates, references) -> np.ndarray:
    return np.array([[si_sdr(e, r) for e in estimates] for r in references])


@dataclass
class UtteranceResult:
    id: str
    si_sdr: Optional[float] = None
    si_sdri: Optional[float] = None
    sdri: Optional[float] = None
    permutation: Optional[list] = None
    error: Optional[str] = None


def score_utterance(uid: str, estimates, mixture, references) -> UtteranceResult:
    """Best-permutation (by SI-SDR) metrics for one utterance, averaged over speakers."""
    if len(estimates) != len(references):
        raise ValueError(f"{len(estimates)} estimates for {len(references)} references")
    scores = pairwise_si_sdr(estimates, references)
    perm, mean_si = best_permutation(scores)
    si_i = np.mean([si_sdri(estimates[perm[i]], mixture, references[i]) for i in range(len(perm))])
    sd_i = np.mean([sdri(estimates[perm[i]], mixture, references[i]) for i in range(len(perm))])
    return UtteranceResult(uid, float(mean_si), float(si_i), float(sd_i), list(perm))


def histogram(values, bin_width: float = 1.0) -> list[tuple[float, float, int]]:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return []
    lo = np.floor(values.min() / bin_width) * bin_width
    hi = np.floor(values.max() / bin_width) * bin_width + bin_width
    edges = np.arange(lo, hi + bin_width / 2, bin_width)
    counts, _ = np.histogram(values, bins=edges)
    return [(float(a), float(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts)]


@dataclass
class EvalReport:
    per_utterance: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    histogram: list = field(default_factory=list)
    sdr_variant: str = "plain-snr"

    @classmethod
    def from_results(cls, results: Sequence[UtteranceResult]) -> "EvalReport":
        rows = sorted(results, key=lambda r: r.id)
        ok = [r for r in rows if r.error is None]
        agg = {"num_utterances": len(rows), "num_failed": len(rows) - len(ok)}
        for key in ("si_sdr", "si_sdri", "sdri"):
            vals = [getattr(r, key) for r in ok]
            agg[f"mean_{key}"] = float(np.mean(vals)) if vals else None
            agg[f"median_{key}"] = float(np.median(vals)) if vals else None
        return cls(rows, agg, histogram([r.si_sdri for r in ok]))

    def to_dict(self) -> dict:
        return {
            "per_utterance": [r.__dict__ for r in self.per_utterance],
            "aggregate": self.aggregate,
            "histogram": [list(h) for h in self.histogram],
            "sdr_variant": self.sdr_variant,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        rows = [UtteranceResult(**r) for r in d["per_utterance"]]
        return cls(rows, d["aggregate"], [tuple(h) for h in d["histogram"]], d.get("sdr_variant", "plain-snr"))

    def write_histogram_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("bin_low_db,bin_high_db,count\n")
            for lo, hi, c in self.histogram:
                fh.write(f"{lo:g},{hi:g},{c}\n")


def evaluate_set(model, manifest) -> EvalReport:
    """Separate and score every record of a reference-carrying manifest.

    A record that fails to load or separate becomes a row with ``error`` set;
    the remaining rows are still scored.
    """
    from .mixkit import WaveCache
    from .separator import separate

    if not manifest.has_references:
        from .errors import DataError

        raise DataError("evaluation needs a manifest whose records carry source_paths")
    cache = WaveCache()
    results = []
    for rec in manifest:
        try:
            mix = cache.get(rec.path)
            refs = [cache.get(p).samples for p in rec.source_paths]
            est = [e.samples for e in separate(model, mix).estimates]
            results.append(score_utterance(rec.id, est, mix.samples, refs))
        except Exception as exc:  # recorded per utterance, never aborts the set
            results.append(UtteranceResult(rec.id, error=f"{type(exc).__name__}: {exc}"))
    return EvalReport.from_results(results)
