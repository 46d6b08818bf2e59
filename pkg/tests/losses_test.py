import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from advcl_toolkit.exceptions import ValidationError
from advcl_toolkit.losses import (ProjectedFeatures, cross_entropy, ntxent_multi_view, ntxent_two_view, trades_kl,
                                  trades_loss)


def brute_force_ntxent(views, t):
    """Enumerates every (anchor, positive) pair; denominators run over all other rows."""
    m, b = len(views), views[0].shape[0]
    rows = [(v, s, views[v][s] / views[v][s].norm()) for v in range(m) for s in range(b)]
    total = 0.0
    for i, (_, si, zi) in enumerate(rows):
        denominator = sum(math.exp(float(zi @ zk) / t) for k, (_, _, zk) in enumerate(rows) if k != i)
        for j, (_, sj, zj) in enumerate(rows):
            if j != i and sj == si:
                total -= math.log(math.exp(float(zi @ zj) / t) / denominator)
    return total / b


def random_views(seed, m, b, d):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(b, d, generator=g, dtype=torch.float64) for _ in range(m)]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 16), m=st.integers(2, 4), b=st.integers(1, 4), d=st.integers(1, 8),
       t=st.sampled_from([0.1, 0.5, 1.0]))
def test_multi_view_matches_enumeration(seed, m, b, d, t):
    views = random_views(seed, m, b, d)
    expected = brute_force_ntxent(views, t)
    assert ntxent_multi_view(ProjectedFeatures.from_views(views), t).item() == pytest.approx(expected, abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 16), b=st.integers(1, 4), d=st.integers(1, 8))
def test_two_view_is_multi_view_with_two_views(seed, b, d):
    z1, z2 = random_views(seed, 2, b, d)
    two = ntxent_two_view(z1, z2, 0.5)
    multi = ntxent_multi_view(ProjectedFeatures.from_views([z1, z2]), 0.5)
    assert two.item() == pytest.approx(multi.item(), abs=1e-7)
    assert two.item() == pytest.approx(brute_force_ntxent([z1, z2], 0.5), abs=1e-6)


def test_single_sample_two_view_is_zero():
    z1, z2 = random_views(0, 2, 1, 5)
    assert ntxent_two_view(z1, z2).item() == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("b", [1, 2, 5])
def test_identical_embeddings_two_view(b):
    z = torch.ones(b, 3, dtype=torch.float64)
    assert ntxent_two_view(z, z.clone()).item() == pytest.approx(2 * math.log(2 * b - 1), abs=1e-9)


@pytest.mark.parametrize("b,m", [(1, 3), (2, 3), (3, 4)])
def test_identical_embeddings_multi_view(b, m):
    views = [torch.ones(b, 3, dtype=torch.float64) for _ in range(m)]
    expected = m * (m - 1) * math.log(b * m - 1)
    assert ntxent_multi_view(ProjectedFeatures.from_views(views)).item() == pytest.approx(expected, abs=1e-9)


def test_hand_fixed_two_sample_instance():
    z1 = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
    z2 = torch.tensor([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]], dtype=torch.float64)
    assert ntxent_two_view(z1, z2, 0.5).item() == pytest.approx(brute_force_ntxent([z1, z2], 0.5), abs=1e-6)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 16), scale=st.floats(0.1, 10.0))
def test_scale_invariance(seed, scale):
    views = random_views(seed, 3, 3, 4)
    base = ntxent_multi_view(ProjectedFeatures.from_views(views))
    scaled = ntxent_multi_view(ProjectedFeatures.from_views([scale * v for v in views]))
    assert scaled.item() == pytest.approx(base.item(), abs=1e-6)


def test_batch_permutation_invariance():
    views = random_views(1, 3, 4, 5)
    perm = torch.tensor([2, 0, 3, 1])
    base = ntxent_multi_view(ProjectedFeatures.from_views(views))
    permuted = ntxent_multi_view(ProjectedFeatures.from_views([v[perm] for v in views]))
    assert permuted.item() == pytest.approx(base.item(), abs=1e-9)


def test_gradient_matches_finite_differences():
    views = [v.requires_grad_(True) for v in random_views(2, 3, 2, 4)]
    assert torch.autograd.gradcheck(
        lambda a, b, c: ntxent_multi_view(ProjectedFeatures.from_views([a, b, c]), 0.5), views, eps=1e-6, atol=1e-5)


def test_ntxent_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        ntxent_two_view(torch.zeros(2, 3), torch.zeros(3, 3))
    with pytest.raises(ValidationError):
        ntxent_multi_view(ProjectedFeatures.from_views([torch.ones(2, 3)]))
    with pytest.raises(ValidationError):
        ntxent_two_view(torch.ones(2, 3), torch.ones(2, 3), t=0.0)
    with pytest.raises(ValidationError):
        ProjectedFeatures(torch.zeros(3, 2), torch.tensor([0, 0, 1]), torch.tensor([0, 0, 0]))


@pytest.mark.parametrize("k", [2, 10, 100])
def test_cross_entropy_uniform_logits(k):
    logits = torch.zeros(4, k, dtype=torch.float64)
    assert cross_entropy(logits, torch.zeros(4, dtype=torch.long)).item() == pytest.approx(math.log(k), abs=1e-12)


def test_cross_entropy_hand_value():
    logits = torch.tensor([[3.0, 1.0, 0.0]], dtype=torch.float64)
    expected = -3.0 + math.log(math.exp(3.0) + math.exp(1.0) + 1.0)
    assert cross_entropy(logits, torch.tensor([0])).item() == pytest.approx(expected, abs=1e-6)


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(ValidationError):
        cross_entropy(torch.zeros(2, 3), torch.tensor([0, 3]))


def test_trades_identical_logits_is_ce():
    logits = torch.randn(5, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 3, 0])
    assert trades_loss(logits, logits.clone(), labels).item() == pytest.approx(
        cross_entropy(logits, labels).item(), abs=1e-12)
    assert trades_kl(logits, logits).item() == pytest.approx(0.0, abs=1e-12)


def test_trades_beta_zero_is_ce():
    g = torch.Generator().manual_seed(1)
    clean = torch.randn(3, 2, generator=g, dtype=torch.float64)
    adv = torch.randn(3, 2, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 1, 1])
    assert trades_loss(clean, adv, labels, beta=0).item() == cross_entropy(clean, labels).item()


def test_trades_hand_value():
    clean = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    adv = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    e = math.e
    ce = math.log(1 + math.exp(-1.0))
    kl = (e - 1) / (e + 1)
    assert trades_loss(clean, adv, torch.tensor([0]), beta=6.0).item() == pytest.approx(ce + 6 * kl, abs=1e-6)


def test_trades_rejects_negative_beta():
    with pytest.raises(ValidationError):
        trades_loss(torch.zeros(1, 2), torch.zeros(1, 2), torch.tensor([0]), beta=-1.0)
