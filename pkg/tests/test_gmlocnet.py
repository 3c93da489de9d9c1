import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stmdtrack.data import Box3D
from stmdtrack.gmlocnet import (
    GMLocNet,
    HoughVote,
    Proposal,
    ProposalHead,
    VoteOutput,
    fuse_features,
    gaussian_mask,
    hough_vote,
    normalize_mask,
    proposal_head,
    sample_proposals,
    select_best,
    topk_indices,
)


@pytest.fixture(autouse=True)
def _double():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    torch.manual_seed(0)
    yield
    torch.set_default_dtype(old)


def test_mask_values():
    y = np.array([1.0, -2.0, 0.5])
    assert gaussian_mask(y[None], y, 2.0)[0] == 1.0
    w = gaussian_mask(np.array([[3.0, -2.0, 0.5]]), y, 2.0)[0]
    assert abs(w - math.exp(-0.5)) <= 1e-12
    wt = gaussian_mask(torch.tensor([[3.0, -2.0, 0.5]]), torch.tensor(y), 2.0)
    assert abs(float(wt[0]) - math.exp(-0.5)) <= 1e-12
    pts = np.random.default_rng(0).uniform(-10, 10, (100, 3))
    assert np.all(np.abs(gaussian_mask(pts, y, 1e6) - 1) <= 1e-9)
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            gaussian_mask(pts, y, bad)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 10.0), st.floats(0.0, 10.0), st.floats(0.5, 5.0))
def test_mask_monotone(d1, d2, sigma):
    # ranges keep d^2 / 2 sigma^2 <= 200, well clear of float64 underflow
    if abs(d1 - d2) < 1e-6:
        return
    w = gaussian_mask(np.array([[d1, 0, 0], [0, d2, 0]]), np.zeros(3), sigma)
    assert ((w > 0) & (w <= 1)).all()
    assert (w[0] > w[1]) == (d1 < d2)


def test_normalize_examples():
    np.testing.assert_allclose(normalize_mask(np.array([0.2, 0.4])), [0.5, 1.0], rtol=0, atol=1e-15)
    assert normalize_mask(np.array([0.3])).tolist() == [1.0]
    g = np.array([1.0, 0.3, 0.7])
    assert np.array_equal(normalize_mask(g), g)
    z = np.zeros(3)
    assert np.array_equal(normalize_mask(z), z)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=20), st.floats(0.01, 100.0))
def test_normalize_idempotent_and_scale_free(vals, c):
    g = np.array(vals)
    n = normalize_mask(g)
    np.testing.assert_allclose(normalize_mask(n), n, rtol=1e-15)
    np.testing.assert_allclose(normalize_mask(c * g), n, rtol=1e-12)


def test_fuse_oracle_and_errors():
    g = torch.Generator().manual_seed(0)
    FG, FM, w = torch.randn(7, 5, generator=g), torch.randn(7, 5, generator=g), torch.rand(7, generator=g)
    out = fuse_features(FG, FM, w)
    for i in range(7):
        for c in range(5):
            assert out[i, c].item() == w[i].item() * (FG[i, c].item() + FM[i, c].item())
    assert torch.equal(fuse_features(FG, FM, torch.ones(7)), FG + FM)
    assert torch.count_nonzero(fuse_features(FG, FM, torch.zeros(7))) == 0
    with pytest.raises(ValueError):
        fuse_features(FG, FM[:, :4], w)
    with pytest.raises(ValueError):
        fuse_features(FG, FM, w[:6])


def test_hough_zero_offset_and_range():
    hv = HoughVote(6)
    with torch.no_grad():
        hv.offset.weight.zero_()
        hv.offset.bias.zero_()
    coords = torch.randn(10, 3)
    v = hough_vote(coords, torch.randn(10, 6), hv)
    assert torch.equal(v.vote_centers, coords)
    assert ((v.objectness >= 0) & (v.objectness <= 1)).all()
    with pytest.raises(ValueError):
        hough_vote(coords, torch.randn(9, 6), hv)


def _votes(scores):
    s = torch.tensor(scores)
    M = len(scores)
    return VoteOutput(torch.arange(3.0 * M).reshape(M, 3), s, torch.zeros(M, 2), torch.logit(s), torch.zeros(M, 3))


def test_topk_examples():
    assert topk_indices(torch.tensor([0.1, 0.9, 0.5]), 2).tolist() == [1, 2]
    assert topk_indices(torch.tensor([0.5, 0.5]), 1).tolist() == [0]
    assert topk_indices(torch.tensor([0.1, 0.9, 0.5]), 3).tolist() == [1, 2, 0]
    with pytest.raises(ValueError):
        topk_indices(torch.tensor([0.1, 0.2]), 3)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from([0.1, 0.2, 0.3, 0.5, 0.9]), min_size=1, max_size=15), st.data())
def test_sample_proposals_against_sort(scores, data):
    K = data.draw(st.integers(1, len(scores)))
    idx, centers, norm, _, _ = sample_proposals(_votes(scores), K)
    expect = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:K]
    assert idx.tolist() == expect
    np.testing.assert_allclose(norm.numpy(), np.array(scores)[expect] / max(scores), rtol=1e-12)
    assert torch.equal(centers, torch.arange(3.0 * len(scores)).reshape(-1, 3)[expect])


def test_proposal_head_zero_residuals_and_wrap():
    head = ProposalHead(4, pool_k=2)
    with torch.no_grad():
        head.head[2].weight.zero_()
        head.head[2].bias.zero_()
    votes = _votes([0.2, 0.7, 0.4])
    votes.feats = torch.randn(3, 4)
    centers = votes.vote_centers[:2]
    props = proposal_head(centers, votes.feats[:2], votes.logits[:2], votes, 0.3, head)
    assert len(props) == 2
    np.testing.assert_array_equal([p.center for p in props], centers.numpy())
    assert all(p.theta == pytest.approx(0.3) for p in props)
    np.testing.assert_allclose([p.score for p in props], [0.2, 0.7], rtol=1e-12)
    with torch.no_grad():
        head.head[2].bias[3] = 0.5
    props = proposal_head(centers, votes.feats[:2], votes.logits[:2], votes, 3.0, head)
    assert props[0].theta == pytest.approx(3.5 - 2 * math.pi, abs=1e-12)
    assert abs(props[0].theta - (-2.783)) < 1e-3
    with pytest.raises(ValueError):
        head(centers[:0], votes.feats[:0], votes.logits[:0], votes, 0.0)


def test_select_best():
    size = np.array([1.0, 2.0, 1.5])
    prev = Box3D([9, 9, 9], [1, 1, 1], 0.4)
    one = select_best([Proposal([1, 2, 3], 0.1, 0.3)], size, prev)
    np.testing.assert_array_equal(one.center, [1, 2, 3])
    np.testing.assert_array_equal(one.size, size)
    two = select_best([Proposal([0, 0, 0], 0, 0.2), Proposal([5, 5, 5], 0, 0.8)], size, prev)
    np.testing.assert_array_equal(two.center, [5, 5, 5])
    fb = select_best([], size, prev)
    assert np.array_equal(fb.as_array(), prev.as_array())


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=10), st.floats(0.01, 0.99))
def test_select_best_scale_invariant(scores, c):
    props = [Proposal([i, 0, 0], 0, s) for i, s in enumerate(scores)]
    scaled = [Proposal(p.center, p.theta, p.score * c) for p in props]
    size, prev = np.ones(3), Box3D([0, 0, 0], [1, 1, 1])
    assert np.array_equal(select_best(props, size, prev).center, select_best(scaled, size, prev).center)


def test_gmlocnet_mask_gating():
    net = GMLocNet(6, K=4, sigma=0.5, pool_k=3)
    coords = torch.randn(12, 3)
    out = net(coords, torch.randn(12, 6), torch.randn(12, 6), torch.zeros(3), 0.0)
    assert out["weights"].max().item() == 1.0
    assert out["prop_center"].shape == (4, 3)
    assert ((out["prop_theta"] >= -math.pi) & (out["prop_theta"] < math.pi)).all()
    net.use_mask = False
    assert torch.equal(net(coords, torch.randn(12, 6), torch.randn(12, 6), torch.zeros(3), 0.0)["weights"],
                       torch.ones(12))
