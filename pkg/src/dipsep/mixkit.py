"""Waveforms, additive mixture simulation, manifests and training crops."""
from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.io import wavfile

from ._seeding import derive_seed
from .errors import DataError

log = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = 1
DEFAULT_SAMPLE_RATE = 16000
_PCM16_MAX = 32767.0


class Domain(str, Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class Waveform:
    """Mono signal with its sample rate. The sample buffer is read-only."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError(f"waveform must be 1-d, got shape {arr.shape}")
        if arr.size < 1:
            raise ValueError("waveform must hold at least one sample")
        if not np.all(np.isfinite(arr)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size

    @property
    def power(self) -> float:
        return float(np.mean(self.samples**2))

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)


@dataclass(frozen=True)
class MixtureExample:
    mixture: Waveform
    sources: tuple = ()
    snr_db: Optional[float] = None
    domain: Domain = Domain.SYNTHETIC

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "domain", Domain(self.domain))
        if self.sources:
            for i, s in enumerate(self.sources):
                if len(s) != len(self.mixture) or s.sample_rate != self.mixture.sample_rate:
                    raise ValueError(f"source {i} does not match the mixture length/rate")
            total = np.sum([s.samples for s in self.sources], axis=0)
            if np.max(np.abs(total - self.mixture.samples)) > 1e-6:
                raise ValueError("mixture is not the sum of its sources")


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    num_samples: int
    sample_rate: int
    domain: Domain
    source_paths: tuple = ()

    def to_json(self) -> dict:
        d = {
            "id": self.id,
            "path": self.path,
            "num_samples": self.num_samples,
            "sample_rate": self.sample_rate,
            "domain": self.domain.value,
        }
        if self.source_paths:
            d["source_paths"] = list(self.source_paths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ManifestRecord":
        return cls(
            id=str(d["id"]),
            path=str(d["path"]),
            num_samples=int(d["num_samples"]),
            sample_rate=int(d["sample_rate"]),
            domain=Domain(d["domain"]),
            source_paths=tuple(d.get("source_paths", ())),
        )


@dataclass(frozen=True)
class Manifest:
    records: tuple = ()
    format_version: int = MANIFEST_FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate utterance ids in manifest: {dupes[:5]}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def has_references(self) -> bool:
        return bool(self.records) and all(r.source_paths for r in self.records)

    def total_seconds(self) -> float:
        return sum(r.num_samples / r.sample_rate for r in self.records)

    def split(self, holdout: int) -> tuple["Manifest", "Manifest"]:
        """Deterministic tail holdout. With a single record both halves share it."""
        if len(self.records) <= 1:
            return self, self
        holdout = min(max(1, holdout), len(self.records) - 1)
        return Manifest(self.records[:-holdout]), Manifest(self.records[-holdout:])

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(json.dumps({"format_version": self.format_version}) + "\n")
            for r in self.records:
                fh.write(json.dumps(r.to_json()) + "\n")

    @classmethod
    def load(cls, path, check_files: bool = True) -> "Manifest":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"manifest not found: {path}")
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
        if not lines:
            raise DataError(f"manifest {path} is empty (missing format_version header)")
        try:
            header = json.loads(lines[0])
            version = int(header["format_version"])
            records = [ManifestRecord.from_json(json.loads(ln)) for ln in lines[1:]]
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed manifest {path}: {exc}") from exc
        if version != MANIFEST_FORMAT_VERSION:
            raise DataError(f"manifest {path} has unsupported format_version {version}")
        base = path.parent
        resolved = []
        for r in records:
            p = _resolve(base, r.path)
            srcs = tuple(_resolve(base, s) for s in r.source_paths)
            if check_files:
                for f in (p,) + srcs:
                    if not os.path.isfile(f):
                        raise DataError(f"manifest {path}: record {r.id!r} references missing file {f}")
            resolved.append(
                ManifestRecord(r.id, p, r.num_samples, r.sample_rate, r.domain, srcs)
            )
        return cls(resolved, version)


def _resolve(base: Path, p: str) -> str:
    return p if os.path.isabs(p) else str(base / p)


# --------------------------------------------------------------------- audio io


def read_wav(path) -> Waveform:
    """Read a mono WAV file as float samples in [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    if samples.size == 0:
        raise DataError(f"{path}: no samples")
    return Waveform(samples, rate)


def to_pcm16(samples) -> np.ndarray:
    return np.round(np.clip(np.asarray(samples, dtype=np.float64), -1.0, _PCM16_MAX / 32768.0) * 32768.0).astype(np.int16)


def write_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM; samples outside [-1, 1) are clipped."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), w.sample_rate, to_pcm16(w.samples))


class WaveCache:
    """Memoizes decoded files; toy corpora fit in memory comfortably."""

    def __init__(self):
        self._store = {}

    def get(self, path) -> Waveform:
        w = self._store.get(path)
        if w is None:
            w = self._store[path] = read_wav(path)
        return w


# -------------------------------------------------------------------- operations


def mix_additive(sources: Sequence[Waveform]) -> Waveform:
    """Sample-wise sum of equally long sources; no normalization."""
    if len(sources) == 0:
        raise ValueError("mix_additive needs at least one source")
    ref = sources[0]
    for i, s in enumerate(sources[1:], start=1):
        if len(s) != len(ref):
            raise ValueError(f"source {i} has length {len(s)}, expected {len(ref)} (source 0)")
        if s.sample_rate != ref.sample_rate:
            raise ValueError(f"source {i} has sample rate {s.sample_rate}, expected {ref.sample_rate}")
    total = np.zeros(len(ref))
    for s in sources:
        total = total + s.samples
    return Waveform(total, ref.sample_rate)


def snr_db(target: Waveform, interferer: Waveform) -> float:
    return 10.0 * np.log10(target.power / interferer.power)


def scale_to_snr(target: Waveform, interferer: Waveform, snr_db: float) -> tuple[Waveform, Waveform]:
    """Rescale ``interferer`` so that 10 log10(P_target / P_interferer) == snr_db."""
    pt, pi = target.power, interferer.power
    if pt <= 0.0 or pi <= 0.0:
        raise ValueError("SNR is undefined for a zero-power signal")
    gain = np.sqrt(pt / (pi * 10.0 ** (snr_db / 10.0)))
    return target, interferer.with_samples(interferer.samples * gain)


def prepare_crop(w: Waveform, crop_samples: int, seed: int) -> Waveform:
    """Random contiguous crop (or zero-padded tail) of exactly ``crop_samples``, RMS-normalized."""
    if crop_samples < 1:
        raise ValueError("crop_samples must be >= 1")
    x = w.samples
    if x.size > crop_samples:
        start = int(np.random.default_rng(seed).integers(0, x.size - crop_samples + 1))
        x = x[start : start + crop_samples]
    elif x.size < crop_samples:
        x = np.concatenate([x, np.zeros(crop_samples - x.size)])
    rms = np.sqrt(np.mean(x**2))
    if rms > 0.0:
        x = x / rms
    return Waveform(x, w.sample_rate)


AUDIO_EXTENSIONS = (".wav",)


def build_manifest(root_dir, domain) -> Manifest:
    """One record per readable audio file under ``root_dir``, sorted by path.

    Unreadable files are skipped with a ``UserWarning`` naming the path.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"not a readable directory: {root}")
    domain = Domain(domain)
    paths = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in AUDIO_EXTENSIONS)
    records = []
    for p in paths:
        try:
            w = read_wav(p)
        except Exception as exc:  # noqa: BLE001 - any decoder failure means "corrupt"
            warnings.warn(f"skipping unreadable audio file {p}: {exc}", stacklevel=2)
            continue
        rel = p.relative_to(root)
        uid = str(rel.with_suffix("")).replace(os.sep, "/")
        records.append(ManifestRecord(uid, str(p.resolve()), len(w), w.sample_rate, domain))
    return Manifest(records)


def sample_domain_batch(
    real: Manifest,
    syn: Manifest,
    batch_size: int,
    crop_samples: int,
    seed: int,
    cache: Optional[WaveCache] = None,
) -> tuple[list[Waveform], list[Waveform]]:
    """Draw ``batch_size`` prepared crops from each domain, with replacement."""
    if len(real) == 0 or len(syn) == 0:
        raise DataError("sample_domain_batch needs two nonempty manifests")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    cache = cache or WaveCache()
    out = []
    for tag, man in (("real", real), ("synthetic", syn)):
        rng = np.random.default_rng(derive_seed(seed, tag))
        picks = rng.integers(0, len(man), size=batch_size)
        crops = []
        for slot, idx in enumerate(picks):
            w = cache.get(man.records[int(idx)].path)
            crops.append(prepare_crop(w, crop_samples, derive_seed(seed, tag, slot)))
        out.append(crops)
    return out[0], out[1]


# -------------------------------------------------------------------- simulation


def simulate_mixtures(
    sources_dir,
    out_dir,
    num_mixtures: int,
    snr_low: float = -5.0,
    snr_high: float = 5.0,
    seed: int = 0,
    peak: float = 0.9,
) -> Manifest:
    """Write ``num_mixtures`` two-speaker mixtures plus references and a manifest.

    Sources are quantized to 16-bit before summing, so the mixture file is the
    exact integer sum of the two reference files.
    """
    src_man = build_manifest(sources_dir, Domain.SYNTHETIC)
    if len(src_man) < 2:
        raise DataError(f"need at least two source files in {sources_dir}, found {len(src_man)}")
    rates = {r.sample_rate for r in src_man}
    if len(rates) != 1:
        raise DataError(f"source files have mixed sample rates {sorted(rates)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(derive_seed(seed, "simulate"))
    cache = WaveCache()
    records = []
    for n in range(num_mixtures):
        i, j = rng.choice(len(src_man), size=2, replace=False)
        a, b = cache.get(src_man.records[i].path), cache.get(src_man.records[j].path)
        length = min(len(a), len(b))
        s1 = a.with_samples(a.samples[:length])
        s2 = b.with_samples(b.samples[:length])
        snr = float(rng.uniform(snr_low, snr_high))
        if s1.power == 0.0 or s2.power == 0.0:
            raise DataError(f"silent source among {src_man.records[i].id}, {src_man.records[j].id}")
        s1, s2 = scale_to_snr(s1, s2, snr)
        mix = mix_additive([s1, s2])
        gain = peak / max(np.max(np.abs(mix.samples)), 1e-12)
        # mixture peak below full scale leaves room for per-source rounding
        q1 = to_pcm16(s1.samples * gain).astype(np.int32)
        q2 = to_pcm16(s2.samples * gain).astype(np.int32)
        qm = np.clip(q1 + q2, -32768, 32767).astype(np.int16)
        uid = f"mix{n:05d}"
        paths = [out / f"{uid}_mix.wav", out / f"{uid}_s1.wav", out / f"{uid}_s2.wav"]
        for p, q in zip(paths, (qm, q1.astype(np.int16), q2.astype(np.int16))):
            wavfile.write(str(p), s1.sample_rate, q)
        records.append(
            ManifestRecord(
                uid, paths[0].name, length, s1.sample_rate, Domain.SYNTHETIC,
                (paths[1].name, paths[2].name),
            )
        )
    man = Manifest(records)
    man.save(out / "manifest.jsonl")
    return Manifest.load(out / "manifest.jsonl")
