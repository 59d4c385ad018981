import numpy as np
import pytest
import torch

from dipsep.mixkit import Domain, Manifest, ManifestRecord, Waveform, write_wav


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


def write_tone_set(root, n, seconds=0.5, sr=8000, seed=0, prefix="utt"):
    """A few short nonsilent wav files with distinct content."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    t = np.arange(int(seconds * sr)) / sr
    paths = []
    for i in range(n):
        f = rng.uniform(100, 1000)
        x = 0.3 * np.sin(2 * np.pi * f * t) + 0.05 * rng.standard_normal(t.size)
        p = root / f"{prefix}{i:02d}.wav"
        write_wav(p, Waveform(x, sr))
        paths.append(p)
    return paths


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small toy corpus with references: sources, two domains and eval sets."""
    from dipsep.toycorpus import build_toy_corpus

    root = tmp_path_factory.mktemp("tiny_corpus")
    mans = build_toy_corpus(root, minutes_per_domain=0.5, mixture_seconds=2.0, num_speakers=4,
                            seed=3, eval_mixtures=3)
    mans["root"] = root
    return mans


# acceptance outcomes, filled in by test_acceptance.py: number -> (passed, title, detail)
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
