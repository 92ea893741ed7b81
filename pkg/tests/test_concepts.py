import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from protoprompt.backbone import ConfigError, InputError
from protoprompt.concepts import (
    AttentionAndRegions,
    ConceptPrototypeSet,
    NumericalError,
    aggregate_prompts,
    compute_attention,
    compute_region_maps,
    decode_overlay,
    empty_region_count,
    load_assignments,
    palette,
    render_overlay,
    save_assignments,
)


def _protos(Q, B=None, layer=0):
    Q = torch.as_tensor(Q, dtype=torch.float64)
    m = Q.shape[0]
    if B is None:
        B = torch.zeros(m, 1, 1, dtype=torch.float64)
    return SimpleNamespace(prototypes=Q, spatial_bias=B, layer_index=layer)


def _regions(A):
    A = torch.as_tensor(A, dtype=torch.float64)
    return compute_region_maps(AttentionAndRegions(attention=A, pre_bias_attention=A))


def test_prototype_set_init():
    torch.manual_seed(0)
    ps = ConceptPrototypeSet(200, 64, 8)
    assert ps.m == 200 and ps.background_index == 199
    assert abs(ps.prototypes.std().item() - 0.05) < 0.003
    assert torch.count_nonzero(ps.spatial_bias) == 0 and ps.spatial_bias.shape == (200, 8, 8)
    with pytest.raises(ConfigError):
        ConceptPrototypeSet(1, 8, 2)


def test_single_concept_all_ones():
    E = torch.randn(3, 3, 4, dtype=torch.float64)
    att = compute_attention(E, _protos(torch.randn(1, 4), torch.zeros(1, 3, 3, dtype=torch.float64)))
    assert torch.equal(att.pre_bias_attention, torch.ones(1, 1, 3, 3, dtype=torch.float64))


def test_equidistant_half():
    E = torch.tensor([[[0.0, 0.0]]], dtype=torch.float64)
    att = compute_attention(E, _protos([[1.0, 0.0], [0.0, -1.0]]))
    torch.testing.assert_close(att.pre_bias_attention.flatten(), torch.tensor([0.5, 0.5], dtype=torch.float64))


def test_scalar_softmax_hand_value():
    E = torch.tensor([[[1.0]]], dtype=torch.float64)
    att = compute_attention(E, _protos([[1.0], [0.0]]))
    oracle = math.exp(0) / (math.exp(0) + math.exp(-1))
    assert abs(att.pre_bias_attention[0, 0, 0, 0].item() - oracle) < 1e-12
    assert abs(oracle - 0.73106) < 1e-5


def test_bias_added_after_softmax():
    E = torch.randn(2, 2, 3, dtype=torch.float64)
    B = torch.randn(4, 2, 2, dtype=torch.float64)
    att = compute_attention(E, _protos(torch.randn(4, 3), B))
    torch.testing.assert_close(att.attention - att.pre_bias_attention, B.unsqueeze(0))


def test_non_finite_reports_layer():
    E = torch.full((2, 2, 3), float("nan"))
    with pytest.raises(NumericalError, match="layer 3"):
        compute_attention(E, _protos(torch.zeros(2, 3), layer=3))
    with pytest.raises(InputError):
        compute_attention(torch.zeros(2, 2, 5), _protos(torch.zeros(2, 3)))


def test_region_map_examples():
    r = _regions(torch.tensor([0.6, 0.4], dtype=torch.float64).view(1, 2, 1, 1))
    assert r.region_maps.flatten().tolist() == [0.6, 0.0]
    r = _regions(torch.tensor([0.5, 0.5], dtype=torch.float64).view(1, 2, 1, 1))
    assert r.region_maps.flatten().tolist() == [0.5, 0.0] and r.assignment.item() == 0


def test_region_maps_match_pixel_loop(rng):
    A = rng.random((1, 5, 8, 8))
    A[0, :, 2, 3] = 0.7  # a five-way tie
    r = _regions(A)
    R = np.zeros_like(A)
    for i in range(8):
        for j in range(8):
            col = list(A[0, :, i, j])
            k = col.index(max(col))
            R[0, k, i, j] = A[0, k, i, j]
            assert r.assignment[0, i, j].item() == k
    np.testing.assert_array_equal(r.region_maps.numpy(), R)


def test_aggregate_examples():
    E = torch.randn(1, 2, 3, dtype=torch.float64)
    # concept 0 owns patch (0,0) with r=1
    A = torch.tensor([[[1.0, 0.0]], [[0.0, 0.9]]], dtype=torch.float64).unsqueeze(0)
    p = aggregate_prompts(_regions(A), E)
    torch.testing.assert_close(p[0], E[0, 0] / (1 + 1e-6) * 1.0)
    assert torch.allclose(p[0], E[0, 0], atol=1e-5)

    # two patches with r=0.5 each
    A = torch.tensor([[[0.5, 0.5]], [[0.0, 0.0]]], dtype=torch.float64).unsqueeze(0)
    p = aggregate_prompts(_regions(A), E)
    assert torch.allclose(p[0], (E[0, 0] + E[0, 1]) / 2, atol=1e-5)
    # concept 1 owns nothing
    assert p[1].abs().max() < 1e-3


def test_empty_region_count():
    A = torch.tensor([[[0.9, 0.9]], [[0.1, 0.1]], [[0.0, 0.0]]]).unsqueeze(0)
    assert empty_region_count(_regions(A)) == 2


@given(st.integers(2, 6), st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_normalization_and_partition(m, h, d, seed):
    g = torch.Generator().manual_seed(seed)
    E = torch.randn(2, h, h, d, generator=g) * 3
    ps = _protos(torch.randn(m, d, generator=g, dtype=torch.float64), torch.randn(m, h, h, dtype=torch.float64))
    r = compute_region_maps(compute_attention(E.double(), ps))
    assert torch.allclose(r.pre_bias_attention.sum(1), torch.ones(2, h, h, dtype=torch.float64), atol=1e-5)
    nz = (r.region_maps != 0).sum(1)
    assert ((nz == 1) | ((nz == 0) & (r.attention.amax(1) == 0))).all()
    chosen = r.region_maps.gather(1, r.assignment.unsqueeze(1)).squeeze(1)
    assert torch.equal(chosen, r.attention.amax(1))


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.9))
def test_monotone_grounding(seed, step):
    g = torch.Generator().manual_seed(seed)
    E = torch.randn(1, 1, 4, generator=g, dtype=torch.float64)
    Q = torch.randn(3, 4, generator=g, dtype=torch.float64)
    before = compute_attention(E, _protos(Q)).pre_bias_attention[0, 0, 0, 0]
    Q2 = Q.clone()
    Q2[0] = Q[0] + step * (E[0, 0] - Q[0])
    after = compute_attention(E, _protos(Q2)).pre_bias_attention[0, 0, 0, 0]
    assert after >= before - 1e-12


@given(st.integers(0, 2**31 - 1))
def test_prototype_permutation_equivariance(seed):
    g = torch.Generator().manual_seed(seed)
    E = torch.randn(1, 3, 3, 4, generator=g, dtype=torch.float64)
    Q = torch.randn(4, 4, generator=g, dtype=torch.float64)
    B = torch.randn(4, 3, 3, generator=g, dtype=torch.float64) * 0.1
    perm = torch.randperm(4, generator=g)
    a = compute_region_maps(compute_attention(E, _protos(Q, B)))
    b = compute_region_maps(compute_attention(E, _protos(Q[perm], B[perm])))
    torch.testing.assert_close(b.attention, a.attention[:, perm])
    torch.testing.assert_close(b.region_maps, a.region_maps[:, perm])
    torch.testing.assert_close(aggregate_prompts(b, E), aggregate_prompts(a, E)[:, perm])


@pytest.mark.parametrize("dtype,tol", [(torch.float64, 1e-6), (torch.float32, 1e-4)])
def test_prompt_gradients_match_finite_differences(dtype, tol):
    g = torch.Generator().manual_seed(3)
    E0 = torch.randn(1, 3, 3, 4, generator=g, dtype=torch.float64)
    Q0 = torch.randn(4, 4, generator=g, dtype=torch.float64) * 0.5
    B0 = torch.randn(4, 3, 3, generator=g, dtype=torch.float64) * 0.05
    W = torch.randn(4, 4, generator=g, dtype=torch.float64)

    def f(E, Q, B):
        r = compute_region_maps(compute_attention(E, _protos(Q, B)))
        return (aggregate_prompts(r, E) * W.to(E.dtype)).sum()

    leaves = [t.to(dtype).requires_grad_() for t in (E0, Q0, B0)]
    f(*leaves).backward()
    h = 1e-6
    for idx, base in enumerate((E0, Q0, B0)):
        fd = torch.zeros_like(base)
        for j in range(base.numel()):
            plus, minus = [t.clone() for t in (E0, Q0, B0)], [t.clone() for t in (E0, Q0, B0)]
            plus[idx].view(-1)[j] += h
            minus[idx].view(-1)[j] -= h
            fd.view(-1)[j] = (f(*plus) - f(*minus)) / (2 * h)
        err = (leaves[idx].grad.double() - fd).norm() / fd.norm().clamp_min(1e-12)
        assert err <= tol, (idx, err.item())


def test_overlay_round_trip(rng, tmp_path):
    assignment = rng.integers(0, 11, size=(8, 8))
    img = render_overlay(assignment, 11, 8)
    assert img.size == (64, 64) and img.mode == "RGBA"
    path = tmp_path / "o.png"
    img.save(path)
    from PIL import Image

    np.testing.assert_array_equal(decode_overlay(Image.open(path), 11, 8), assignment)
    alpha = np.asarray(img)[..., 3][::8, ::8]
    assert (alpha[assignment == 10] < alpha[assignment != 10].min()).all()
    assert len({tuple(c) for c in palette(17)}) == 17


def test_assignment_archive(tmp_path, rng):
    grids = {"a/img_0/layer0": rng.integers(0, 5, (8, 8)), "b/layer1": rng.integers(0, 3, (8, 8))}
    save_assignments(tmp_path / "x.npz", grids)
    back = load_assignments(tmp_path / "x.npz")
    assert set(back) == set(grids)
    for k in grids:
        np.testing.assert_array_equal(back[k], grids[k])
