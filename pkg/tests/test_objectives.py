import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dipsep import objectives as ob
from dipsep.errors import ConfigError
from dipsep.infoanalysis import mmd_bruteforce


def _mmd_instance(rng, m=None, n=None, d=None):
    m = m or int(rng.integers(1, 33))
    n = n or int(rng.integers(1, 33))
    d = d or int(rng.integers(1, 9))
    cx, cy = rng.normal(size=(m, d)), rng.normal(size=(n, d))
    px, py = rng.random(m), rng.random(n)
    return cx, cy, px, py


def _t(*arrays):
    return [torch.as_tensor(a, dtype=torch.float64) for a in arrays]


# ----------------------------------------------------------------- configs


def test_config_defaults():
    assert ob.NceConfig().temperature == 0.1
    assert ob.NceConfig().num_negatives == 100
    m = ob.MmdConfig()
    assert (m.alpha, m.K, m.max_samples_per_domain) == (10.0, 100, 256)


@pytest.mark.parametrize("kwargs", [{"temperature": 0.0}, {"num_negatives": -1}, {"similarity": "dot"}])
def test_nce_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        ob.NceConfig(**kwargs)


@pytest.mark.parametrize("kwargs", [
    {"alpha": -1.0}, {"K": -2}, {"kernel": "laplace"}, {"bandwidth_policy": "silverman"},
    {"bandwidth_policy": "fixed"}, {"pooling": "max"},
])
def test_mmd_config_rejects(kwargs):
    with pytest.raises(ConfigError):
        ob.MmdConfig(**kwargs)


# --------------------------------------------------------------------- NCE


def test_nce_single_candidate_is_zero():
    c = torch.randn(5, 4)
    mask = torch.ones(5, dtype=torch.bool)
    loss = ob.nce_loss(c, torch.randn(5, 4), mask, ob.NceConfig(num_negatives=0), seed=0)
    assert float(loss) == 0.0


def test_nce_identical_candidates_give_log_count():
    z = torch.ones(6, 3, dtype=torch.float64)
    mask = torch.ones(6, dtype=torch.bool)
    loss = ob.nce_loss(z.clone(), z, mask, ob.NceConfig(num_negatives=3), seed=1)
    assert abs(float(loss) - math.log(4)) < 1e-12


def test_nce_hand_example():
    q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    pos = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    neg = torch.tensor([[[0.0, 1.0]]], dtype=torch.float64)
    loss = ob.nce_from_candidates(q, pos, neg, 0.1)
    assert abs(float(loss) - math.log1p(math.exp(-10))) < 1e-9
    # same thing through nce_loss: two masked frames, one negative each
    z = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    loss2 = ob.nce_loss(z.clone(), z, torch.ones(2, dtype=torch.bool), ob.NceConfig(num_negatives=1), seed=0)
    assert abs(float(loss2) - math.log1p(math.exp(-10))) < 1e-9


def test_nce_rejects_empty_mask():
    with pytest.raises(ValueError):
        ob.nce_loss(torch.randn(4, 3), torch.randn(4, 3), torch.zeros(4, dtype=torch.bool), ob.NceConfig(), 0)


def test_nce_deterministic_given_seed():
    c, z = torch.randn(2, 40, 8), torch.randn(2, 40, 8)
    mask = torch.rand(2, 40) < 0.6
    cfg = ob.NceConfig(num_negatives=10)
    a = ob.nce_loss(c, z, mask, cfg, seed=7)
    b = ob.nce_loss(c, z, mask, cfg, seed=7)
    assert torch.equal(a, b)


def test_distractors_distinct_and_exclude_self():
    idx = ob._distractor_indices(30, 12, np.random.default_rng(0))
    for i, row in enumerate(idx):
        assert i not in row
        assert len(set(row.tolist())) == 12


def test_nce_uniform_baseline_with_random_vectors():
    g = torch.Generator().manual_seed(0)
    c, z = torch.randn(1, 400, 64, generator=g), torch.randn(1, 400, 64, generator=g)
    mask = torch.ones(1, 400, dtype=torch.bool)
    loss = float(ob.nce_loss(c, z, mask, ob.NceConfig(), seed=0))
    assert abs(loss - math.log(101)) < 0.2 * math.log(101)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_nce_invariant_to_rescaling_a_cue(seed, scale):
    g = torch.Generator().manual_seed(seed)
    c, z = torch.randn(12, 5, generator=g, dtype=torch.float64), torch.randn(12, 5, generator=g, dtype=torch.float64)
    mask = torch.ones(12, dtype=torch.bool)
    cfg = ob.NceConfig(num_negatives=6)
    c2 = c.clone()
    c2[seed % 12] *= scale
    assert abs(float(ob.nce_loss(c, z, mask, cfg, seed)) - float(ob.nce_loss(c2, z, mask, cfg, seed))) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_nce_bounds_when_positive_is_best(seed):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(10, 4, generator=g, dtype=torch.float64)
    mask = torch.ones(10, dtype=torch.bool)
    cfg = ob.NceConfig(num_negatives=5)
    loss = float(ob.nce_loss(z.clone(), z, mask, cfg, seed))
    assert 0.0 <= loss <= math.log(6) + 1e-9
    rand = float(ob.nce_loss(torch.randn(10, 4, generator=g), z.float(), mask, cfg, seed))
    assert rand >= 0.0


# --------------------------------------------------------------- diversity


def test_diversity_uniform_is_zero():
    assert abs(float(ob.diversity_loss(torch.full((2, 8), 1 / 8, dtype=torch.float64)))) < 1e-12
    assert abs(float(ob.diversity_loss(torch.tensor([[0.5, 0.5]], dtype=torch.float64)))) < 1e-12


def test_diversity_one_hot():
    p = torch.zeros(3, 5, dtype=torch.float64)
    p[:, 2] = 1.0
    assert abs(float(ob.diversity_loss(p)) - 4 / 5) < 1e-12


def test_diversity_rejects_bad_rows():
    with pytest.raises(ValueError):
        ob.diversity_loss(torch.tensor([[0.6, 0.6]]))
    with pytest.raises(ValueError):
        ob.diversity_loss(torch.tensor([[1.5, -0.5]]))


def test_mpc_components_sum():
    c, z = torch.randn(20, 6, dtype=torch.float64), torch.randn(20, 6, dtype=torch.float64)
    probs = torch.softmax(torch.randn(2, 4, dtype=torch.float64), -1)
    mask = torch.rand(20) < 0.5
    mask[0] = True
    total, parts = ob.mpc_loss(c, z, mask, probs, ob.NceConfig(num_negatives=5), seed=3)
    assert abs(float(total) - float(parts["nce"] + parts["diversity"])) < 1e-9


def test_mpc_zero_inputs():
    z = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    probs = torch.full((1, 4), 0.25, dtype=torch.float64)
    total, _ = ob.mpc_loss(z, z, torch.tensor([True]), probs, ob.NceConfig(), seed=0)
    assert abs(float(total)) < 1e-12


# -------------------------------------------------------------- cue probs


def test_cue_probs_k0_is_sample_distribution():
    joint, cond = ob.estimate_cue_probs(torch.randn(7, 3), torch.randn(7, 3), K=0, seed=0)
    assert torch.allclose(cond, torch.ones(7))
    assert torch.allclose(joint, torch.full((7,), 1 / 7))


def test_cue_probs_equal_similarities():
    c = torch.ones(2, 3, dtype=torch.float64)
    joint, cond = ob.estimate_cue_probs(c, c.clone(), K=1, seed=0)
    assert torch.allclose(cond, torch.full((2,), 0.5, dtype=torch.float64))
    assert torch.allclose(joint, torch.full((2,), 0.25, dtype=torch.float64))


def test_cue_probs_hand_example():
    c = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    z = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    joint, cond = ob.estimate_cue_probs(c, z, K=1, seed=0)
    e = math.e
    assert abs(float(cond[0]) - e / (e + 1)) < 1e-12
    assert abs(float(joint[0]) - e / (e + 1) / 2) < 1e-12


def test_cue_probs_rejects_empty():
    with pytest.raises(ValueError):
        ob.estimate_cue_probs(torch.zeros(0, 3), torch.zeros(0, 3), K=3, seed=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 50), st.integers(0, 2**31 - 1))
def test_cue_probs_ranges(m, k, seed):
    g = torch.Generator().manual_seed(seed)
    c, z = torch.randn(m, 4, generator=g, dtype=torch.float64), torch.randn(m, 4, generator=g, dtype=torch.float64)
    joint, cond = ob.estimate_cue_probs(c, z, K=k, seed=seed)
    assert torch.all(cond > 0) and torch.all(cond <= 1.0)
    assert float(joint.sum()) <= 1.0 + 1e-12


def test_cue_prob_candidate_set_sums_to_one():
    # softmax over {C_j} U distractors; rebuild every candidate's share and sum it
    m, k = 9, 4
    c, z = torch.randn(m, 3, dtype=torch.float64), torch.randn(m, 3, dtype=torch.float64)
    neg = ob._distractor_indices(m, k, np.random.default_rng(11))
    _, cond = ob.estimate_cue_probs(c, z, K=k, seed=11)
    for j in range(m):
        cands = [j] + neg[j].tolist()
        sims = torch.stack([ob.cosine(c[i], z[j]) for i in cands])
        shares = torch.softmax(sims, 0)
        assert abs(float(shares.sum()) - 1.0) < 1e-6
        assert abs(float(shares[0]) - float(cond[j])) < 1e-12


# --------------------------------------------------------------------- MMD


def test_gaussian_kernel_examples():
    a = torch.tensor([0.3, -1.0])
    assert float(ob.gaussian_kernel(a, a, 1.0)) == 1.0
    assert abs(float(ob.gaussian_kernel(torch.tensor([0.0]), torch.tensor([2.0]), 1.0)) - math.exp(-2)) < 1e-7
    with pytest.raises(ValueError):
        ob.gaussian_kernel(a, a, 0.0)
    with pytest.raises(ValueError):
        ob.gaussian_kernel(a, torch.zeros(3), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.floats(0.1, 10))
def test_gaussian_kernel_symmetric(a, b, s):
    a, b = torch.tensor(a, dtype=torch.float64), torch.tensor(b, dtype=torch.float64)
    assert float(ob.gaussian_kernel(a, b, s)) == float(ob.gaussian_kernel(b, a, s))


def test_mmd_hand_example():
    cfg = ob.MmdConfig(bandwidth_policy="fixed", fixed_bandwidth=1.0)
    cx, cy, px, py = _t([[0.0]], [[2.0]], [1.0], [1.0])
    val = float(ob.mmd_loss(cx, cy, px, py, cfg))
    assert abs(val - (2 - 2 * math.exp(-2))) < 1e-12
    assert abs(val - 1.72932) < 1e-5


def test_mmd_identical_sets_zero():
    rng = np.random.default_rng(0)
    cx, _, px, _ = _mmd_instance(rng, 10, 10, 3)
    a, w = _t(cx, px)
    assert abs(float(ob.mmd_loss(a, a.clone(), w, w.clone(), ob.MmdConfig()))) < 1e-9


def test_mmd_rejects():
    cfg = ob.MmdConfig()
    x = torch.randn(3, 2, dtype=torch.float64)
    w = torch.rand(3, dtype=torch.float64)
    with pytest.raises(ValueError):
        ob.mmd_loss(x[:0], x, w[:0], w, cfg)
    with pytest.raises(ValueError):
        ob.mmd_loss(x, x, w[:2], w, cfg)
    with pytest.raises(ValueError):
        ob.mmd_loss(x, x, -w, w, cfg)


def test_mmd_matches_bruteforce_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        cx, cy, px, py = _mmd_instance(rng)
        bw = ob.median_bandwidth(torch.as_tensor(np.concatenate([cx, cy])))
        ref = mmd_bruteforce(cx, cy, px, py, bandwidth=bw)
        got = float(ob.mmd_loss(*_t(cx, cy, px, py), ob.MmdConfig()))
        assert abs(got - ref) < 1e-10


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mmd_nonnegative_and_symmetric(seed):
    cx, cy, px, py = _mmd_instance(np.random.default_rng(seed))
    cfg = ob.MmdConfig()
    a = float(ob.mmd_loss(*_t(cx, cy, px, py), cfg))
    b = float(ob.mmd_loss(*_t(cy, cx, py, px), cfg))
    assert a >= -1e-9
    assert a == b


def test_mmd_subsample_preserves_weight_sum():
    x = torch.randn(50, 3, dtype=torch.float64)
    w = torch.rand(50, dtype=torch.float64)
    xs, ws = ob._subsample(x, w, 20, np.random.default_rng(0))
    assert xs.shape[0] == 20
    assert abs(float(ws.sum()) - float(w.sum())) < 1e-12


def test_mmd_subsample_is_seeded():
    cx, cy = torch.randn(300, 3, dtype=torch.float64), torch.randn(280, 3, dtype=torch.float64)
    px, py = torch.rand(300, dtype=torch.float64), torch.rand(280, dtype=torch.float64)
    cfg = ob.MmdConfig(max_samples_per_domain=64)
    assert float(ob.mmd_loss(cx, cy, px, py, cfg, seed=5)) == float(ob.mmd_loss(cx, cy, px, py, cfg, seed=5))


def test_median_bandwidth_degenerate():
    assert ob.median_bandwidth(torch.zeros(4, 2)) == 1.0
    assert ob.median_bandwidth(torch.zeros(1, 2)) == 1.0
    assert ob.median_bandwidth(torch.tensor([[0.0], [3.0]])) == 3.0


# ---------------------------------------------------------- gradient checks


def _fd_check(fn, x, h=1e-5, tol=1e-4):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().clone()
    numeric = torch.zeros_like(x)
    flat = x.detach().view(-1)
    for i in range(flat.numel()):
        xp, xm = flat.clone(), flat.clone()
        xp[i] += h
        xm[i] -= h
        numeric.view(-1)[i] = (fn(xp.view_as(x)) - fn(xm.view_as(x))) / (2 * h)
    err = (analytic - numeric).norm() / max(float(numeric.norm()), float(analytic.norm()), 1e-12)
    assert float(err) < tol, float(err)


@pytest.mark.parametrize("seed", range(20))
def test_grad_nce(seed):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(5, 4, generator=g, dtype=torch.float64)
    mask = torch.ones(5, dtype=torch.bool)
    cfg = ob.NceConfig(temperature=0.5, num_negatives=3)
    _fd_check(lambda c: ob.nce_loss(c, z, mask, cfg, seed), torch.randn(5, 4, generator=g, dtype=torch.float64))


@pytest.mark.parametrize("seed", range(20))
def test_grad_diversity(seed):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, 4, generator=g, dtype=torch.float64)
    _fd_check(lambda l: ob.diversity_loss(torch.softmax(l, -1)), logits)


@pytest.mark.parametrize("seed", range(20))
def test_grad_mmd(seed):
    rng = np.random.default_rng(seed)
    cx, cy, px, py = _t(*_mmd_instance(rng, int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 5))))
    cfg = ob.MmdConfig(bandwidth_policy="fixed", fixed_bandwidth=1.5)
    _fd_check(lambda c: ob.mmd_loss(c, cy, px, py, cfg), cx)
    # median bandwidth is held fixed (no gradient through it)
    bw = ob.median_bandwidth(torch.cat([cx, cy]))
    _fd_check(lambda c: ob.mmd_loss(c, cy, px, py, ob.MmdConfig(), bandwidth=bw), cx)


# --------------------------------------------------------------------- MIC


class _Q:
    def __init__(self, vectors, probs):
        self.vectors, self.probs = vectors, probs


class _Branch:
    def __init__(self, context, vectors, mask, probs):
        self.context, self.mask, self.quantized = context, mask, _Q(vectors, probs)


def _branch(seed, b=2, t=30, d=8):
    g = torch.Generator().manual_seed(seed)
    mask = torch.rand(b, t, generator=g) < 0.5
    mask[:, 0] = True
    return _Branch(torch.randn(b, t, d, generator=g, dtype=torch.float64),
                   torch.randn(b, t, d, generator=g, dtype=torch.float64), mask,
                   torch.softmax(torch.randn(2, 5, generator=g, dtype=torch.float64), -1))


@pytest.mark.parametrize("alpha", [0.0, 1.0, 10.0])
def test_mic_breakdown_identity(alpha):
    x, y = _branch(1), _branch(2)
    total, bd = ob.mic_loss(x, y, ob.NceConfig(num_negatives=10), ob.MmdConfig(alpha=alpha), seed=4)
    assert abs(bd.mic - (bd.mpc_x + bd.mpc_y + alpha * bd.mmd)) < 1e-6
    assert abs(bd.mpc_x - (bd.nce_x + bd.diversity_x)) < 1e-6
    assert abs(float(total) - bd.mic) < 1e-9
    if alpha == 0.0:
        assert abs(bd.mic - (bd.mpc_x + bd.mpc_y)) < 1e-9
    assert set(bd.to_dict()) == {"nce_x", "nce_y", "diversity_x", "diversity_y", "mpc_x", "mpc_y", "mmd", "mic"}


def test_mic_identical_branches():
    x = _branch(3)
    _, bd = ob.mic_loss(x, x, ob.NceConfig(num_negatives=10), ob.MmdConfig(), seed=0)
    assert abs(bd.mmd) < 1e-9
    assert abs(bd.mic - 2 * bd.mpc_x) < 1e-9


def test_mpc_terms_independent_of_mmd_config():
    x, y = _branch(5), _branch(6)
    _, a = ob.mic_loss(x, y, ob.NceConfig(num_negatives=10), ob.MmdConfig(alpha=0.0, K=3), seed=9)
    _, b = ob.mic_loss(x, y, ob.NceConfig(num_negatives=10), ob.MmdConfig(alpha=10.0, K=50), seed=9)
    assert (a.mpc_x, a.mpc_y) == (b.mpc_x, b.mpc_y)


def test_domain_cue_set_pooling():
    c, z = torch.randn(3, 7, 4), torch.randn(3, 7, 4)
    fc, fz = ob.domain_cue_set(c, z, ob.MmdConfig())
    assert fc.shape == (21, 4) and fz.shape == (21, 4)
    uc, _ = ob.domain_cue_set(c, z, ob.MmdConfig(pooling="utterance"))
    assert torch.allclose(uc, c.mean(1))


def test_mmd_subsampled_symmetry_and_null():
    g = torch.Generator().manual_seed(0)
    cx, cy = torch.randn(300, 3, generator=g, dtype=torch.float64), torch.randn(300, 3, generator=g, dtype=torch.float64)
    px, py = torch.rand(300, generator=g, dtype=torch.float64), torch.rand(300, generator=g, dtype=torch.float64)
    cfg = ob.MmdConfig(max_samples_per_domain=64)
    assert float(ob.mmd_loss(cx, cy, px, py, cfg, seed=2)) == float(ob.mmd_loss(cy, cx, py, px, cfg, seed=2))
    assert abs(float(ob.mmd_loss(cx, cx.clone(), px, px.clone(), cfg, seed=2))) < 1e-9
