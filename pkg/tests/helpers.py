"""Shared test machinery: the full-objective finite-difference check."""

import numpy as np
import torch
from torch.func import functional_call

from protoprompt.backbone import BackboneConfig
from protoprompt.fusion import FusionConfig
from protoprompt.losses import LossWeights, TransformRanges, sample_affine, warp
from protoprompt.model import ConceptPromptModel, compute_losses

MICRO_BACKBONE = dict(image_size=32, patch_size=8, depth=2, embed_dim=16, num_heads=2, num_prompted_layers=2, class_count=3)


def _objective(model, images, labels, theta):
    weights = LossWeights()

    def f(params):
        out = functional_call(model, params, (images,))
        out_t = functional_call(model, params, (warp(images, theta),))
        report, _ = compute_losses(model, out, out_t, theta, labels, weights)
        return report.total

    return f


def objective_gradient_errors(dtype) -> dict[str, float]:
    """Relative error of autograd vs finite differences, per trainable tensor.

    Micro-batch of 2 images, d=16, two prompted layers with m=[5, 3], n=2.
    Soft grouping in eval mode makes the objective a deterministic function
    of the weights; the difference quotients are always taken in float64.
    """
    fusion = FusionConfig(n=2, per_layer_m=[5, 3], hard_assignment=False)
    torch.manual_seed(0)
    model = ConceptPromptModel(BackboneConfig(**MICRO_BACKBONE), fusion).double().eval()
    g = torch.Generator().manual_seed(13)
    for c in model.concepts:  # break the zero-initialised bias symmetry
        c.spatial_bias.data += 0.02 * torch.randn(c.spatial_bias.shape, generator=g, dtype=torch.float64)
    images = torch.randn(2, 3, 32, 32, generator=g, dtype=torch.float64)
    labels = torch.tensor([0, 2])
    theta = sample_affine(g, TransformRanges())
    params64 = {k: v.detach().clone() for k, v in model.named_parameters()}
    # the fixture must sit well away from the total-variation kinks, or the
    # central difference straddles one
    with torch.no_grad():
        for st in model(images).stages:
            A = st.regions.attention
            gaps = torch.cat([(A[..., 1:, :] - A[..., :-1, :]).flatten(), (A[..., 1:] - A[..., :-1]).flatten()])
            assert gaps.abs().min() > 1e-4

    leaves = {k: v.to(dtype).requires_grad_() for k, v in params64.items()}
    model.to(dtype)
    _objective(model, images.to(dtype), labels, theta)(leaves).backward()
    model.double()
    f64 = _objective(model, images, labels, theta)

    def shifted(name, j, delta):
        p = dict(params64)
        p[name] = params64[name].clone()
        p[name].view(-1)[j] += delta
        return f64(p)

    def stencil(name, j, h):
        # five-point central difference: truncation O(h^4), roundoff ~ eps |f| / h
        return (8 * (shifted(name, j, h) - shifted(name, j, -h)) - (shifted(name, j, 2 * h) - shifted(name, j, -2 * h))) / (12 * h)

    def derivative(name, j):
        # step selection: keep the estimate whose neighbouring step agrees best,
        # large enough to beat roundoff, small enough not to cross an argmax kink
        est = [stencil(name, j, h) for h in (1e-3, 1e-4, 1e-5)]
        k = min(range(2), key=lambda i: abs(est[i] - est[i + 1]))
        return est[k + 1]

    worst = {}
    with torch.no_grad():
        for name, base in params64.items():
            # largest-gradient entries: elsewhere the roundoff floor swamps the relative error
            picks = leaves[name].grad.double().abs().reshape(-1).topk(min(6, base.numel())).indices
            fd = torch.tensor([derivative(name, j) for j in picks.tolist()], dtype=torch.float64)
            analytic = leaves[name].grad.double().reshape(-1)[picks]
            worst[name] = ((analytic - fd).norm() / fd.norm().clamp_min(1e-8)).item()
    assert len(worst) == len(params64)
    return worst


def chance_oracle(N, P, m, trials, rng):
    """Independent Monte-Carlo: each visible keypoint lands in a uniformly random concept."""
    vals = []
    for _ in range(trials):
        labels = rng.integers(0, m, size=(N, P))
        per = []
        for k in range(m - 1):
            counts = np.array([(labels[:, p] == k).sum() for p in range(P)])
            if counts.sum():
                per.append(counts.max() / counts.sum())
        vals.append(100 * np.mean(per))
    return float(np.mean(vals)), float(np.std(vals))


# criterion number -> (passed, detail); printed by the terminal summary hook
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return bool(passed)
