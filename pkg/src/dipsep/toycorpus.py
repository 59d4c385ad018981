"""Synthetic speech-like corpora for desk-scale runs and tests.

Sources are harmonic phrases whose formants and pitch move smoothly along
random trajectories, with speaker-specific pitch range and vocal-tract scale.
The perturbed ("real"-like) domain adds level changes, a random channel
colouration and additive coloured noise to simulated mixtures.
"""
from __future__ import annotations

import argparse
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import lfilter

from ._seeding import derive_seed
from .mixkit import Domain, Manifest, ManifestRecord, WaveCache, simulate_mixtures, to_pcm16, write_wav, Waveform

_FORMANT_RANGES = np.array([[250.0, 850.0], [800.0, 2400.0], [2200.0, 3200.0]])
_BANDWIDTHS = np.array([80.0, 120.0, 180.0])


@dataclass(frozen=True)
class Speaker:
    f0: float
    formant_scale: float
    brightness: float


def random_speaker(rng) -> Speaker:
    return Speaker(float(rng.uniform(90, 260)), float(rng.uniform(0.85, 1.2)), float(rng.uniform(0.6, 1.4)))


def _trajectory(rng, n: int, sr: int, knot_seconds, low, high) -> np.ndarray:
    """Piecewise-linear random path through knots spaced ``knot_seconds`` apart."""
    knots = [0]
    while knots[-1] < n - 1:
        knots.append(min(n - 1, knots[-1] + max(1, int(rng.uniform(*knot_seconds) * sr))))
    vals = rng.uniform(low, high, size=len(knots))
    return np.interp(np.arange(n), knots, vals)


def synth_phrase(rng, spk: Speaker, n: int, sr: int, knot_seconds=(0.15, 0.35)) -> np.ndarray:
    """Voiced phrase with smoothly moving formants and pitch."""
    nyq = 0.45 * sr
    formants = np.stack([
        _trajectory(rng, n, sr, knot_seconds, lo * spk.formant_scale, min(hi * spk.formant_scale, nyq))
        for lo, hi in _FORMANT_RANGES
    ])
    f0 = spk.f0 * _trajectory(rng, n, sr, (0.2, 0.4), 0.8, 1.25)
    phase = 2 * np.pi * np.cumsum(f0) / sr
    out = np.zeros(n)
    for k in range(1, int(nyq / f0.min()) + 1):
        fk = k * f0
        amp = np.sum(1.0 / (1.0 + ((fk[None] - formants) / _BANDWIDTHS[:, None]) ** 2), axis=0)
        amp *= fk ** (-0.3 * spk.brightness) * (fk < nyq)
        out += amp * np.sin(k * phase)
    energy = _trajectory(rng, n, sr, knot_seconds, 0.3, 1.0)
    fade = min(n // 2, int(0.02 * sr))
    ramp = np.ones(n)
    if fade:
        ramp[:fade] = np.linspace(0, 1, fade)
        ramp[n - fade :] = np.linspace(1, 0, fade)
    return out * energy * ramp


def synth_utterance(rng, spk: Speaker, seconds: float, sr: int, phrase_seconds=(0.8, 2.0)) -> np.ndarray:
    """Phrases separated by short pauses, with occasional fricative-like bursts."""
    n = int(seconds * sr)
    out = np.zeros(n)
    pos = int(rng.integers(0, int(0.1 * sr)))
    while pos < n:
        seg = min(int(rng.uniform(*phrase_seconds) * sr), n - pos)
        if seg > 8:
            phrase = synth_phrase(rng, spk, seg, sr)
            for _ in range(rng.poisson(seg / sr)):
                burst = min(int(rng.uniform(0.03, 0.08) * sr), seg)
                at = int(rng.integers(0, seg - burst + 1))
                noise = lfilter([1, -0.95], [1], rng.standard_normal(burst))
                phrase[at : at + burst] += 0.3 * np.std(phrase) * noise * np.hanning(burst)
            out[pos : pos + seg] = phrase
        pos += seg + int(rng.uniform(0.05, 0.15) * sr)
    peak = np.max(np.abs(out))
    return 0.5 * out / peak if peak > 0 else out


def write_sources(out_dir, num_speakers: int, utts_per_speaker: int, seconds: float, sr: int, seed: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(derive_seed(seed, "sources"))
    for s in range(num_speakers):
        spk = random_speaker(rng)
        for u in range(utts_per_speaker):
            x = synth_utterance(rng, spk, seconds, sr)
            write_wav(out / f"spk{s:02d}_utt{u:03d}.wav", Waveform(x, sr))
    return out


def colored_noise(rng, n: int) -> np.ndarray:
    return lfilter([1.0], [1.0, -0.9], rng.standard_normal(n))


def perturb(mix: np.ndarray, rng, noise_snr=(5.0, 15.0), gain_db=(-12.0, 6.0)) -> tuple[np.ndarray, float, np.ndarray]:
    """Channel colouration, level change and additive noise.

    Returns ``(perturbed, linear_gain, filter_b)`` so references can be put
    through the same channel and gain.
    """
    b = np.array([1.0, rng.uniform(-0.6, 0.6), rng.uniform(-0.2, 0.2)])
    coloured = lfilter(b, [1.0], mix)
    gain = 10 ** (rng.uniform(*gain_db) / 20)
    noise = colored_noise(rng, mix.size)
    snr = rng.uniform(*noise_snr)
    noise *= np.sqrt(np.mean(coloured**2) / (np.mean(noise**2) * 10 ** (snr / 10)))
    return gain * (coloured + noise), gain, b


def make_perturbed_set(mix_manifest: Manifest, out_dir, seed: int, keep_references: bool,
                       noise_snr=(5.0, 15.0)) -> Manifest:
    """Perturbed copies of simulated mixtures, tagged ``real``.

    With ``keep_references`` the references are the channel- and gain-matched
    clean sources; the additive noise is left out of them.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = WaveCache()
    records = []
    for i, r in enumerate(mix_manifest):
        rng = np.random.default_rng(derive_seed(seed, "perturb", i))
        mix = cache.get(r.path)
        y, gain, b = perturb(mix.samples, rng, noise_snr=noise_snr)
        peak = np.max(np.abs(y))
        norm = min(1.0, 0.9 / peak) if peak > 0 else 1.0
        name = f"{r.id}_pert.wav"
        wavfile.write(str(out / name), mix.sample_rate, to_pcm16(y * norm))
        srcs = ()
        if keep_references:
            names = []
            for k, sp in enumerate(r.source_paths):
                s = cache.get(sp).samples
                ref = gain * norm * lfilter(b, [1.0], s)
                names.append(f"{r.id}_pert_s{k + 1}.wav")
                wavfile.write(str(out / names[-1]), mix.sample_rate, to_pcm16(ref))
            srcs = tuple(names)
        records.append(ManifestRecord(r.id, name, r.num_samples, r.sample_rate, Domain.REAL, srcs))
    man = Manifest(records)
    man.save(out / "manifest.jsonl")
    return Manifest.load(out / "manifest.jsonl")


def build_toy_corpus(root, minutes_per_domain: float = 10.0, mixture_seconds: float = 8.0,
                     sr: int = 8000, num_speakers: int = 12, seed: int = 0,
                     eval_mixtures: int = 0) -> dict:
    """Sources, a clean synthetic domain and a perturbed real-like domain of
    ``minutes_per_domain`` each. With ``eval_mixtures`` > 0, held-out clean
    (domain A) and perturbed (domain B) evaluation sets with references are
    added, built from speakers unseen in training."""
    root = Path(root)
    n_mix = int(round(minutes_per_domain * 60 / mixture_seconds))
    utts = max(2, int(np.ceil(2 * n_mix / num_speakers)))
    write_sources(root / "sources", num_speakers, utts, mixture_seconds, sr, seed)
    syn = simulate_mixtures(root / "sources", root / "synthetic", n_mix, seed=derive_seed(seed, "syn"))
    base = simulate_mixtures(root / "sources", root / "real_base", n_mix, seed=derive_seed(seed, "real"))
    real = make_perturbed_set(base, root / "real", derive_seed(seed, "real-pert"), keep_references=False)
    out = {"synthetic": syn, "real": real}
    if eval_mixtures:
        write_sources(root / "eval_sources", 4, max(2, int(np.ceil(2 * eval_mixtures / 4))),
                      mixture_seconds, sr, derive_seed(seed, "eval"))
        a = simulate_mixtures(root / "eval_sources", root / "eval_a", eval_mixtures, seed=derive_seed(seed, "eval-a"))
        out["eval_a"] = a
        out["eval_b"] = make_perturbed_set(a, root / "eval_b", derive_seed(seed, "eval-b"), keep_references=True)
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description="Write a synthetic toy corpus (sources + two domains).")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--minutes-per-domain", type=float, default=10.0)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--eval-mixtures", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)
    mans = build_toy_corpus(a.out_dir, a.minutes_per_domain, sr=a.sample_rate, seed=a.seed, eval_mixtures=a.eval_mixtures)
    print(json.dumps({k: len(v) for k, v in mans.items()}))


if __name__ == "__main__":
    main()
