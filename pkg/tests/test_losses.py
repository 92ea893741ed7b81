import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from protoprompt.backbone import ConfigError, InputError
from protoprompt.losses import (
    PART_SHAPING_TERMS,
    LossWeights,
    TransformRanges,
    affine_matrix,
    classification_loss,
    entropy_loss,
    equivariance_from_maps,
    equivariance_loss,
    invert_affine,
    orthogonality_loss,
    pool_attention,
    presence_losses,
    radial_mask,
    sample_affine,
    total_loss,
    total_variation_loss,
    warp,
)


def _heads(n, d, C, seed=0):
    torch.manual_seed(seed)
    return nn.ModuleList(nn.Linear(d, C).double() for _ in range(n))


# --- classification ---------------------------------------------------------


def test_single_head_average_is_its_score():
    heads = _heads(1, 4, 3)
    P = torch.randn(2, 1, 4, dtype=torch.float64)
    _, scores, avg = classification_loss(P, heads, torch.tensor([0, 2]))
    assert torch.equal(avg, scores[:, 0])


def test_uniform_logits_give_log_c():
    heads = _heads(2, 4, 5)
    for h in heads:
        nn.init.zeros_(h.weight)
        nn.init.zeros_(h.bias)
    loss, _, _ = classification_loss(torch.randn(3, 2, 4, dtype=torch.float64), heads, torch.tensor([0, 1, 4]))
    assert abs(loss.item() - math.log(5)) < 1e-12


def test_average_matches_loop():
    heads = _heads(4, 6, 3)
    P = torch.randn(2, 4, 6, dtype=torch.float64)
    labels = torch.tensor([1, 2])
    loss, scores, avg = classification_loss(P, heads, labels)
    for b in range(2):
        outs = [heads[k](P[b, k]) for k in range(4)]
        ref = sum(outs) / 4
        torch.testing.assert_close(avg[b], ref)
        for k in range(4):
            torch.testing.assert_close(scores[b, k], outs[k])
    ref_loss = -np.mean([torch.log_softmax(avg[b], -1)[labels[b]].item() for b in range(2)])
    assert abs(loss.item() - ref_loss) < 1e-12


def test_label_out_of_range():
    with pytest.raises(InputError):
        classification_loss(torch.randn(1, 2, 4, dtype=torch.float64), _heads(2, 4, 3), torch.tensor([3]))
    with pytest.raises(InputError):
        classification_loss(torch.randn(1, 2, 4, dtype=torch.float64), _heads(2, 4, 3), torch.tensor([-1]))


# --- orthogonality ----------------------------------------------------------


def test_orthogonality_examples():
    assert abs(orthogonality_loss(torch.tensor([[1.0, 0.0], [0.0, 3.0]])).item()) < 1e-12
    v = torch.tensor([0.6, 0.8], dtype=torch.float64)
    assert abs(orthogonality_loss(torch.stack([v, v])).item() - 2.0) < 1e-12
    assert abs(orthogonality_loss(torch.stack([v, -v])).item() + 2.0) < 1e-12
    assert orthogonality_loss(torch.eye(5, dtype=torch.float64)).abs().item() <= 1e-6


@given(st.integers(2, 8), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_orthogonality_pairwise_oracle_and_bounds(m, d, seed):
    V = torch.randn(m, d, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    ref = sum(F.cosine_similarity(V[k], V[l], dim=0).item() for k in range(m) for l in range(m) if k != l)
    val = orthogonality_loss(V).item()
    assert abs(val - ref) < 1e-9
    assert -m * (m - 1) - 1e-9 <= val <= m * (m - 1) + 1e-9


# --- equivariance -----------------------------------------------------------


def test_identity_transform_is_zero():
    A = torch.rand(2, 5, 8, 8, dtype=torch.float64)
    theta = affine_matrix()
    assert equivariance_from_maps(A, A, theta).item() <= 1e-6
    model_fn = lambda x: torch.softmax(x[:, :5] * 3, dim=1)  # noqa: E731
    x = torch.randn(2, 6, 8, 8, dtype=torch.float64)
    assert equivariance_loss(model_fn, x, theta).item() <= 1e-6


def test_orthogonal_branches_give_one():
    A = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    Bm = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    A[:, :2, :, :2] = 1.0
    Bm[:, :2, :, 2:] = 1.0
    assert abs(equivariance_from_maps(A, Bm, affine_matrix()).item() - 1.0) < 1e-12


def _reference_equivariance(A, At, angle_deg):
    """Independent two-pass reference: rotate the transformed maps back point by point."""
    K = A.shape[1] - 1
    H, W = A.shape[-2:]
    a = math.radians(angle_deg)
    out = np.zeros_like(At)
    for i in range(H):
        for j in range(W):
            # normalised output coordinates (align_corners=False)
            x = (2 * j + 1) / W - 1
            y = (2 * i + 1) / H - 1
            # inverse of rotation by a is rotation by -a
            xs = math.cos(-a) * x - math.sin(-a) * y
            ys = math.sin(-a) * x + math.cos(-a) * y
            px = ((xs + 1) * W - 1) / 2
            py = ((ys + 1) * H - 1) / 2
            x0, y0 = math.floor(px), math.floor(py)
            for dy in (0, 1):
                for dx in (0, 1):
                    xi, yi = x0 + dx, y0 + dy
                    wgt = (1 - abs(px - xi)) * (1 - abs(py - yi))
                    if 0 <= xi < W and 0 <= yi < H:
                        out[..., i, j] += wgt * At[..., yi, xi]
    corr = []
    for b in range(A.shape[0]):
        for k in range(K):
            num = abs((A[b, k] * out[b, k]).sum())
            corr.append(num / (np.linalg.norm(A[b, k]) * np.linalg.norm(At[b, k])))
    return 1 - np.mean(corr)


def test_small_rotation_on_symmetric_field():
    H = W = 16
    yy, xx = torch.meshgrid(torch.linspace(-1, 1, H, dtype=torch.float64), torch.linspace(-1, 1, W, dtype=torch.float64), indexing="ij")
    r2 = xx**2 + yy**2
    A = torch.stack([torch.exp(-r2 / 0.3), torch.exp(-r2 / 0.8), 1 - torch.exp(-r2)])[None]
    theta = affine_matrix(rotation_deg=5.0)
    At = warp(A, theta)
    loss = equivariance_from_maps(A, At, theta).item()
    assert loss < 0.05
    assert abs(loss - _reference_equivariance(A.numpy(), At.numpy(), 5.0)) < 1e-9


def test_affine_sampling_within_ranges():
    g = torch.Generator().manual_seed(0)
    ranges = TransformRanges()
    for _ in range(50):
        th = sample_affine(g, ranges)
        sc = math.sqrt(abs(torch.det(th[:, :2]).item()))
        assert 0.9 - 1e-9 <= sc <= 1.1 + 1e-9
        assert th[:, 2].abs().max() <= 2 * 0.10 + 1e-12
        ang = math.degrees(math.atan2(th[1, 0].item(), th[0, 0].item()))
        assert abs(ang) <= 15 + 1e-9
        full = torch.cat([th, torch.tensor([[0.0, 0.0, 1.0]], dtype=th.dtype)])
        back = torch.cat([invert_affine(th), torch.tensor([[0.0, 0.0, 1.0]], dtype=th.dtype)])
        torch.testing.assert_close(full @ back, torch.eye(3, dtype=th.dtype))


def test_degenerate_transforms_resampled():
    g = torch.Generator().manual_seed(0)
    th = sample_affine(g, TransformRanges(rotation_deg=0.0, translation=0.0, scale=(0.0, 0.05)), min_det=1e-3)
    assert abs(torch.det(th[:, :2]).item()) > 1e-3


# --- presence / entropy / total variation -----------------------------------


def test_radial_mask_values():
    for n in (3, 5, 9):
        M = radial_mask(n, n)
        assert abs(M[n // 2, n // 2].item()) <= 1e-12
        for i, j in ((0, 0), (0, n - 1), (n - 1, 0), (n - 1, n - 1)):
            assert abs(M[i, j].item() - 1.0) <= 1e-12
    M = radial_mask(8, 8)
    assert M.min() > 0 and (M <= 1 + 1e-12).all()


def test_pooling_border_average():
    A = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
    A[0, 0, 0, 0] = 1.0
    pooled = pool_attention(A)
    assert abs(pooled[0, 0, 0, 0].item() - 0.25) < 1e-12  # 2x2 valid window at the corner
    assert abs(pooled[0, 0, 1, 1].item() - 1 / 9) < 1e-12


def test_presence_examples():
    A = torch.zeros(2, 3, 5, 5, dtype=torch.float64)
    A[0, 0] = 1.0  # each foreground channel reaches pooled max 1 somewhere in the batch
    A[1, 1] = 1.0
    A[:, 2] = 1.0  # background everywhere, so at the corners too
    fg, bg, floored = presence_losses(A)
    assert abs(fg.item()) < 1e-12 and abs(bg.item()) < 1e-12 and floored == 0


def test_presence_hand_values_and_floor():
    A = torch.zeros(1, 2, 3, 3, dtype=torch.float64)
    A[0, 0, 1, 1] = 0.9
    fg, bg, floored = presence_losses(A)
    # corner windows hold 4 valid cells including the centre, so the pooled max is 0.9 / 4
    assert abs(fg.item() - (1 - 0.9 / 4)) < 1e-12
    assert abs(bg.item() + math.log(1e-8)) < 1e-9 and floored == 1


def test_entropy_examples():
    one_hot = F.one_hot(torch.randint(0, 4, (6, 6)), 4).permute(2, 0, 1).double()
    assert abs(entropy_loss(one_hot).item()) < 1e-6
    K1, H, W = 5, 4, 6
    uni = torch.full((K1, H, W), 1 / K1, dtype=torch.float64)
    assert abs(entropy_loss(uni).item() - H * W * math.log(K1) / K1) < 1e-6
    assert abs(entropy_loss(torch.full((2, 1, 1), 0.5, dtype=torch.float64)).item() - 0.3466) < 1e-4


def test_total_variation_examples():
    assert total_variation_loss(torch.full((3, 4, 4), 0.7)).item() == 0
    a = torch.tensor([[[0.0, 1.0], [0.0, 1.0]]], dtype=torch.float64)
    assert abs(total_variation_loss(a).item() - 0.5) < 1e-12


@given(st.integers(0, 2**31 - 1), st.floats(-3, 3))
def test_total_variation_shift_invariant(seed, c):
    a = torch.rand(3, 5, 5, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    b = a.clone()
    b[1] += c
    assert abs(total_variation_loss(a).item() - total_variation_loss(b).item()) < 1e-9


@given(st.integers(0, 2**31 - 1))
def test_terms_finite_and_non_negative(seed):
    g = torch.Generator().manual_seed(seed)
    A = torch.softmax(torch.randn(2, 4, 5, 5, generator=g, dtype=torch.float64) * 3, dim=1)
    fg, bg, _ = presence_losses(A)
    theta = sample_affine(g)
    values = [fg, bg, entropy_loss(A), total_variation_loss(A), equivariance_from_maps(A, warp(A, theta), theta)]
    assert all(torch.isfinite(v) and v.item() >= -1e-12 for v in values)


# --- weighting --------------------------------------------------------------


def _terms(seed):
    g = torch.Generator().manual_seed(seed)
    return [{name: torch.rand((), generator=g, dtype=torch.float64) for name in PART_SHAPING_TERMS} for _ in range(3)]


def test_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(con=-0.1)


def test_total_zero_and_cls_only():
    terms, con = _terms(0), [torch.tensor(0.3, dtype=torch.float64), torch.tensor(0.7, dtype=torch.float64)]
    cls = torch.tensor(1.25, dtype=torch.float64)
    zero = LossWeights(**{k: 0.0 for k in ("cls", "ps", "con")})
    assert total_loss(cls, terms, con, zero).total.item() == 0
    only = LossWeights(ps=0.0, con=0.0)
    assert total_loss(cls, terms, con, only).total.item() == 1.25


@given(st.integers(0, 2**31 - 1), st.lists(st.floats(0, 3), min_size=9, max_size=9))
def test_total_re_summation(seed, w):
    names = ("cls", "ps", "con") + PART_SHAPING_TERMS
    weights = LossWeights(**dict(zip(names, w)))
    terms = _terms(seed)
    con = [torch.tensor(0.1 * seed % 1.0, dtype=torch.float64), torch.tensor(0.4, dtype=torch.float64)]
    cls = torch.tensor(0.8, dtype=torch.float64)
    rep = total_loss(cls, terms, con, weights)
    ps = sum(getattr(weights, n) * np.mean([t[n].item() for t in terms]) for n in PART_SHAPING_TERMS)
    ref = weights.cls * 0.8 + weights.ps * ps + weights.con * np.mean([c.item() for c in con])
    assert abs(rep.total.item() - ref) <= 1e-6
    rec = rep.to_record()
    assert set(rec) >= {"cls", "consistency", "total", *PART_SHAPING_TERMS}
    assert len(rec["per_layer"]["part_shaping"]) == 3 and len(rec["per_layer"]["consistency"]) == 2
