"""Interpretability metrics on patch-level concept assignments.

consistency
    For every foreground concept, count how often each part's visible
    keypoint lands in a patch the concept owns. The concept's consistency
    is the share of the most frequent part among all its keypoint hits; the
    score is the mean over concepts with at least one hit, in percent.
    Under uniformly random assignments every hit is equally likely to be
    any of the ``P`` parts, so the chance level tends to ``100 / P``.

stability
    Share of visible keypoints whose concept survives an input
    perturbation, reading the perturbed assignment at the keypoint's
    transformed position.

cross-layer IoU
    Per image and foreground group, IoU between the union of the fine
    regions of the group's member concepts and the group's coarse region.
    Concepts routed to the background group 0 never enter a mask.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch


def keypoint_patches(keypoints: np.ndarray, patch_size: int, grid: int) -> tuple[np.ndarray, np.ndarray]:
    """Patch (row, col) of each ``(x, y, visible)`` keypoint: ``floor(pixel / patch)``, clamped."""
    kp = np.asarray(keypoints)
    cols = np.clip(np.floor(kp[..., 0] / patch_size).astype(np.int64), 0, grid - 1)
    rows = np.clip(np.floor(kp[..., 1] / patch_size).astype(np.int64), 0, grid - 1)
    return rows, cols


def consistency_hits(assignments: np.ndarray, keypoints: np.ndarray, patch_size: int, num_concepts: int) -> np.ndarray:
    """``[m, P]`` count of images in which part ``p``'s keypoint falls in concept ``k``'s region."""
    assignments = np.asarray(assignments)
    N, grid = assignments.shape[0], assignments.shape[-1]
    P = keypoints.shape[1]
    rows, cols = keypoint_patches(keypoints, patch_size, grid)
    visible = keypoints[..., 2] > 0
    concept = assignments[np.arange(N)[:, None], rows, cols]  # [N, P]
    hits = np.zeros((num_concepts, P), dtype=np.int64)
    n_idx, p_idx = np.nonzero(visible)
    np.add.at(hits, (concept[n_idx, p_idx], p_idx), 1)
    return hits


def consistency_score(
    assignments: np.ndarray, keypoints: np.ndarray, patch_size: int, num_concepts: int
) -> tuple[float, dict[int, int], dict]:
    """Returns ``(percent, concept -> majority part, details)``.

    Only foreground concepts ``0 .. m-2`` are scored; concepts that never
    cover a keypoint are excluded and listed in ``details["excluded"]``.
    """
    hits = consistency_hits(assignments, keypoints, patch_size, num_concepts)[: num_concepts - 1]
    totals = hits.sum(1)
    scored = np.nonzero(totals > 0)[0]
    per_concept = {int(k): float(hits[k].max() / totals[k]) for k in scored}
    majority = {int(k): int(hits[k].argmax()) for k in scored}
    score = 100.0 * float(np.mean(list(per_concept.values()))) if per_concept else 0.0
    details = {
        "per_concept": per_concept,
        "excluded": [int(k) for k in np.nonzero(totals == 0)[0]],
        "hits": hits.tolist(),
    }
    return score, majority, details


def stability_from_assignments(
    keypoints: np.ndarray,
    before: np.ndarray,
    after: np.ndarray,
    shifts: np.ndarray,
    patch_size: int,
    image_size: int,
) -> tuple[float, int]:
    """Percent of visible keypoints keeping their concept; also the excluded count.

    ``shifts`` ``[N, 2]`` are the ``(dx, dy)`` pixel translations applied to
    produce the perturbed images; keypoints leaving the image are excluded.
    """
    before, after = np.asarray(before), np.asarray(after)
    N, grid = before.shape[0], before.shape[-1]
    kp = np.asarray(keypoints, dtype=np.float64)
    moved = kp.copy()
    moved[..., 0] += shifts[:, None, 0]
    moved[..., 1] += shifts[:, None, 1]
    visible = kp[..., 2] > 0
    inside = (moved[..., 0] >= 0) & (moved[..., 0] < image_size) & (moved[..., 1] >= 0) & (moved[..., 1] < image_size)
    r0, c0 = keypoint_patches(kp, patch_size, grid)
    r1, c1 = keypoint_patches(moved, patch_size, grid)
    n = np.arange(N)[:, None]
    same = before[n, r0, c0] == after[n, r1, c1]
    valid = visible & inside
    excluded = int((visible & ~inside).sum())
    if not valid.any():
        return 0.0, excluded
    return 100.0 * float(same[valid].mean()), excluded


@dataclass
class Perturbation:
    """Gaussian pixel noise (fraction of the [0, 1] range) plus integer translation."""

    noise_std: float = 0.05
    max_translation: float = 0.05  # fraction of the image side

    @property
    def is_zero(self) -> bool:
        return self.noise_std == 0 and self.max_translation == 0


def perturb_images(
    pixels: torch.Tensor, perturbation: Perturbation, generator: torch.Generator
) -> tuple[torch.Tensor, np.ndarray]:
    """Perturb ``[N, 3, H, W]`` pixels in [0, 1]; returns images and ``[N, 2]`` ``(dx, dy)`` shifts.

    Shifted-in borders are filled with zeros; noisy values are clipped to [0, 1].
    """
    N, _, H, W = pixels.shape
    max_px = int(np.floor(perturbation.max_translation * W))
    shifts = torch.randint(-max_px, max_px + 1, (N, 2), generator=generator) if max_px else torch.zeros(N, 2, dtype=torch.long)
    out = torch.zeros_like(pixels)
    for i, (dx, dy) in enumerate(shifts.tolist()):
        out[i] = translate(pixels[i], dx, dy)
    if perturbation.noise_std > 0:
        out = (out + perturbation.noise_std * torch.randn(out.shape, generator=generator, dtype=out.dtype)).clamp(0, 1)
    return out, shifts.numpy().astype(np.float64)


def translate(img: torch.Tensor, dx: int, dy: int) -> torch.Tensor:
    """Shift ``[C, H, W]`` content by ``(dx, dy)`` pixels, zero-filling."""
    C, H, W = img.shape
    out = torch.zeros_like(img)
    ys, yd = (slice(0, H - dy), slice(dy, H)) if dy >= 0 else (slice(-dy, H), slice(0, H + dy))
    xs, xd = (slice(0, W - dx), slice(dx, W)) if dx >= 0 else (slice(-dx, W), slice(0, W + dx))
    out[:, yd, xd] = img[:, ys, xs]
    return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float | None:
    """IoU of two boolean masks, ``None`` when both are empty."""
    union = np.logical_or(a, b).sum()
    if union == 0:
        return None
    return float(np.logical_and(a, b).sum() / union)


def group_masks(assignment: np.ndarray, concept_groups: np.ndarray, n: int, drop_background_concept: bool = False) -> np.ndarray:
    """``[n, h, w]`` binary masks: patches whose concept is a member of group ``i + 1``.

    ``concept_groups[k]`` is the group of concept ``k`` (0 = background
    group, never masked). With ``drop_background_concept`` the designated
    background concept ``m - 1`` is left out even when grouped into 1..n.
    """
    groups = np.asarray(concept_groups).copy()
    if drop_background_concept:
        groups[len(groups) - 1] = 0
    patch_group = groups[np.asarray(assignment)]
    return np.stack([patch_group == i + 1 for i in range(n)])


def cross_layer_iou(
    fine_assignments: list[np.ndarray],
    fine_groups: list[np.ndarray],
    coarse_assignment: np.ndarray,
    coarse_groups: np.ndarray,
    n: int,
    drop_background_concept: bool = False,
) -> dict:
    """IoU statistics between each fine layer and the coarse layer.

    Inputs are per-layer ``[N, h, w]`` assignment grids and ``[N, m]`` group
    ids. Returns ``{"layers": [{"layer", "mean", "std", "count", "skipped"}],
    "overall": {...}}``; pairs with an empty union are skipped and counted.
    """
    layers, all_vals = [], []
    for ell, (fa, fg) in enumerate(zip(fine_assignments, fine_groups)):
        vals, skipped = [], 0
        for i in range(len(fa)):
            fm = group_masks(fa[i], fg[i], n, drop_background_concept)
            cm = group_masks(coarse_assignment[i], coarse_groups[i], n, drop_background_concept)
            for g in range(n):
                v = mask_iou(fm[g], cm[g])
                if v is None:
                    skipped += 1
                else:
                    vals.append(v)
        layers.append(_stats(vals) | {"layer": ell, "skipped": skipped})
        all_vals.extend(vals)
    return {"layers": layers, "overall": _stats(all_vals)}


def _stats(vals: list[float]) -> dict:
    if not vals:
        return {"mean": float("nan"), "std": float("nan"), "count": 0}
    arr = np.asarray(vals)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "count": int(arr.size)}


def importance_scores(concept_scores: torch.Tensor | np.ndarray, predicted: int) -> list[tuple[int, float]]:
    """Share of each concept in the predicted class's probability mass.

    Each concept's class scores are softmaxed; the probabilities of the
    predicted class are then normalised to sum to one across concepts.
    """
    s = torch.as_tensor(np.asarray(concept_scores), dtype=torch.float64)
    probs = torch.softmax(s, dim=-1)[:, predicted]
    shares = probs / probs.sum()
    return [(k, float(v)) for k, v in enumerate(shares)]


@dataclass
class MetricReport:
    accuracy: float
    consistency: float
    stability: float
    per_concept_part_assignment: dict[int, int] = field(default_factory=dict)
    cross_layer_iou: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_concept_part_assignment"] = {str(k): v for k, v in self.per_concept_part_assignment.items()}
        return d

    @property
    def mean_iou(self) -> float:
        return float(self.cross_layer_iou.get("overall", {}).get("mean", float("nan")))
