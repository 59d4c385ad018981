"""Exact enumeration oracles on small discrete systems.

Alphabets are capped at 8 symbols so every quantity is computed by brute force
in well under a millisecond.  The mixture lower bound

    I(C; s_i) >= (H(s_i) - H(m)) + I(C; m),   m = s1 + s2

is measured here, not assumed: it fails for some channels (``C = m`` with two
iid uniform bits is the textbook case), and :func:`audit_mi_bound` reports how
often and by how much.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import kernels

MAX_ALPHABET = 8
_PMF_TOL = 1e-9


def _check_pmf(p, name="pmf"):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError(f"{name} has negative mass")
    if abs(p.sum() - 1.0) > _PMF_TOL:
        raise ValueError(f"{name} sums to {p.sum():.12g}, not 1")
    return p


def entropy(pmf) -> float:
    """Shannon entropy in bits, with 0 log 0 = 0."""
    return kernels.entropy_bits(_check_pmf(pmf).ravel())


def mutual_information(joint) -> float:
    """I(A; B) = H(A) + H(B) - H(A, B) in bits for a 2-d joint pmf."""
    j = _check_pmf(joint, "joint")
    if j.ndim != 2:
        raise ValueError("joint pmf must be 2-d")
    h_ab = kernels.joint_entropy_bits(j)
    mi = kernels.entropy_bits(j.sum(1)) + kernels.entropy_bits(j.sum(0)) - h_ab
    return max(mi, 0.0) if mi > -1e-12 else mi


@dataclass
class DiscreteSystem:
    """Independent sources s1, s2 over {0..n-1}, mixture m = s1 + s2, and a
    cue channel p(C | m) with one row per mixture value."""

    s1_pmf: np.ndarray
    s2_pmf: np.ndarray
    channel: np.ndarray

    def __post_init__(self):
        self.s1_pmf = _check_pmf(self.s1_pmf, "s1_pmf")
        self.s2_pmf = _check_pmf(self.s2_pmf, "s2_pmf")
        self.channel = np.asarray(self.channel, dtype=np.float64)
        n_m = self.s1_pmf.size + self.s2_pmf.size - 1
        if self.channel.shape[0] != n_m:
            raise ValueError(f"channel needs {n_m} rows (one per mixture value), has {self.channel.shape[0]}")
        for i, row in enumerate(self.channel):
            _check_pmf(row, f"channel row {i}")
        if max(self.s1_pmf.size, self.s2_pmf.size, n_m, self.channel.shape[1]) > MAX_ALPHABET:
            raise ValueError(f"alphabets are capped at {MAX_ALPHABET} symbols")

    def to_dict(self) -> dict:
        return {
            "s1_pmf": self.s1_pmf.tolist(),
            "s2_pmf": self.s2_pmf.tolist(),
            "channel": self.channel.tolist(),
        }


def mixture_pmf(system: DiscreteSystem) -> np.ndarray:
    return np.convolve(system.s1_pmf, system.s2_pmf)


def check_mi_bound(system: DiscreteSystem) -> dict:
    """Both sides of the mixture lower bound for each source, by enumeration."""
    s1c, s2c, mc = kernels.cue_joints(system.s1_pmf, system.s2_pmf, system.channel)
    h_m = kernels.entropy_bits(mc.sum(1))
    i_cm = mutual_information(mc)
    out = {"H_m": h_m, "I_C_m": i_cm, "sources": []}
    for name, joint, pmf in (("s1", s1c, system.s1_pmf), ("s2", s2c, system.s2_pmf)):
        lhs = mutual_information(joint)
        rhs = (kernels.entropy_bits(pmf) - h_m) + i_cm
        out["sources"].append({
            "source": name,
            "lhs": lhs,
            "rhs": rhs,
            "gap": lhs - rhs,
            "holds": bool(lhs >= rhs - 1e-12),
        })
    out["holds"] = all(s["holds"] for s in out["sources"])
    return out


def iid_binary_counterexample() -> DiscreteSystem:
    """s1, s2 iid fair bits, C = m exactly."""
    return DiscreteSystem(np.array([0.5, 0.5]), np.array([0.5, 0.5]), np.eye(3))


def random_system(rng: np.random.Generator) -> DiscreteSystem:
    n1 = int(rng.integers(2, 5))
    n2 = int(rng.integers(2, MAX_ALPHABET + 2 - n1))
    n_m = n1 + n2 - 1
    n_c = int(rng.integers(2, MAX_ALPHABET + 1))
    # sparse-ish Dirichlet draws so near-deterministic channels show up too
    channel = rng.dirichlet(np.full(n_c, 0.3), size=n_m)
    return DiscreteSystem(rng.dirichlet(np.ones(n1)), rng.dirichlet(np.ones(n2)), channel)


def audit_mi_bound(num_systems: int, seed: int) -> dict:
    """Violation statistics of the bound over random systems, plus the fixed
    iid-binary counterexample (flagged on every run)."""
    rng = np.random.default_rng(seed)
    gaps, violations = [], 0
    worst = None
    for _ in range(num_systems):
        system = random_system(rng)
        res = check_mi_bound(system)
        for s in res["sources"]:
            gaps.append(s["gap"])
            if worst is None or s["gap"] < worst["gap"]:
                worst = {"gap": s["gap"], "source": s["source"], "system": system.to_dict(), "check": res}
        violations += not res["holds"]
    counter = check_mi_bound(iid_binary_counterexample())
    return {
        "num_systems": num_systems,
        "seed": seed,
        "violation_rate": violations / num_systems if num_systems else 0.0,
        "mean_gap": float(np.mean(gaps)) if gaps else 0.0,
        "worst_case": worst,
        "counterexample": {
            "system": iid_binary_counterexample().to_dict(),
            "check": counter,
            "violated": not counter["holds"],
        },
        "backend": kernels.BACKEND,
    }


def median_pairwise_distance(points) -> float:
    """Median over unordered pairs of Euclidean distances (1.0 if none or zero)."""
    d = kernels.pairwise_distances(np.atleast_2d(np.asarray(points, dtype=np.float64)))
    if d.size == 0:
        return 1.0
    med = float(np.median(d))
    return med if med > 0 else 1.0


def mmd_bruteforce(cues_x, cues_y, p_x, p_y, kernel: str = "gaussian_rbf", bandwidth: float = 1.0) -> float:
    """Literal three-double-sum weighted MMD with a Gaussian kernel."""
    if kernel != "gaussian_rbf":
        raise ValueError(f"unsupported kernel {kernel!r}")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    return kernels.mmd_triple_sum(cues_x, cues_y, p_x, p_y, bandwidth)


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
