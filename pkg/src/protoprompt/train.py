"""Training loop, checkpoints and evaluation."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig, ConfigError
from .config import RunConfig, from_flat, save_config, to_flat
from .data import PartsDataset, denormalize, generate, load_folder, normalize_pixels
from .losses import LossWeights, sample_affine, warp
from .metrics import (
    MetricReport,
    Perturbation,
    consistency_score,
    cross_layer_iou,
    perturb_images,
    stability_from_assignments,
)
from .model import ConceptPromptModel, compute_losses

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
LOG_NAME = "train_log.jsonl"
FINAL_CKPT = "checkpoint_final.pt"
BEST_CKPT = "checkpoint_best.pt"


class TrainingError(RuntimeError):
    pass


# --- construction ----------------------------------------------------------


def build_dataset(config: RunConfig) -> PartsDataset:
    data = config.data
    if data.source == "synth":
        return generate(data.synth)
    return load_folder(data.folder_root, data.keypoint_file or None, config.backbone.image_size)


def check_compatible(config: RunConfig, dataset: PartsDataset) -> None:
    bb = config.backbone
    if dataset.images.shape[-1] != bb.image_size or dataset.images.shape[-2] != bb.image_size:
        raise ConfigError(
            f"dataset images are {dataset.images.shape[-2]}x{dataset.images.shape[-1]}, model expects {bb.image_size}"
        )
    if dataset.num_classes != bb.class_count:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model expects {bb.class_count}")


def build_model(config: RunConfig) -> ConceptPromptModel:
    torch.manual_seed(config.seed)
    return ConceptPromptModel(config.backbone, config.fusion).to(torch.device(config.device))


def build_optimizer(model: ConceptPromptModel, config: RunConfig):
    opt_cfg = config.optimizer
    slow, fast = model.parameter_groups()
    optimizer = torch.optim.Adam(
        [
            {"params": slow, "lr": opt_cfg.lr_slow, "name": "slow"},
            {"params": fast, "lr": opt_cfg.lr_fast, "name": "fast"},
        ],
        betas=opt_cfg.betas,
        eps=opt_cfg.adam_eps,
    )
    offset = schedule_offset(config)

    def factor(epoch: int) -> float:
        return opt_cfg.decay_factor ** (max(0, epoch - offset) // opt_cfg.decay_every)

    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, factor)
    return optimizer, scheduler


def schedule_offset(config: RunConfig) -> int:
    """Epoch at which the step decay starts counting: the end of the frozen-mode warmup."""
    return config.warmup_epochs if config.mode == "frozen" else 0


def step_generator(seed: int, step: int) -> torch.Generator:
    """Per-step RNG for Gumbel noise and the equivariance transform."""
    return torch.Generator().manual_seed(seed * 1_000_003 + step)


def epoch_order(seed: int, epoch: int, n: int) -> torch.Tensor:
    return torch.randperm(n, generator=torch.Generator().manual_seed(seed * 7_919 + epoch + 1))


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(path, model, config: RunConfig, optimizer=None, scheduler=None, state: dict | None = None) -> Path:
    """One ``torch.save`` archive: parameters, optimiser state and the flat config."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": to_flat(config),
        "backbone_config": config.backbone.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
        "train_state": dict(state or {}),
    }
    path = Path(path)
    torch.save(payload, path)
    return path


def load_checkpoint(path, expected: BackboneConfig | None = None):
    """Returns ``(model, config, payload)``; raises if ``expected`` differs from the stored backbone."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {payload.get('format')}")
    config = from_flat(payload["config"])
    if BackboneConfig(**payload["backbone_config"]) != config.backbone:
        raise ConfigError(f"{path}: backbone metadata disagrees with the stored run config")
    if expected is not None and expected != config.backbone:
        raise ConfigError(f"{path}: checkpoint backbone {config.backbone} != expected {expected}")
    model = ConceptPromptModel(config.backbone, config.fusion)
    model.load_state_dict(payload["model"])
    return model, config, payload


# --- inference helpers -----------------------------------------------------


@torch.no_grad()
def collect(model: ConceptPromptModel, images: torch.Tensor, batch_size: int = 100) -> dict:
    """Noise-free forward pass; numpy assignment grids, group ids and scores."""
    model.eval()
    stages = [{"assignment": [], "groups": []} for _ in range(model.num_stages)]
    logits, scores = [], []
    for start in range(0, len(images), batch_size):
        out = model(images[start : start + batch_size])
        for s, st in enumerate(out.stages):
            stages[s]["assignment"].append(st.regions.assignment.numpy())
            stages[s]["groups"].append(st.groups.assignment.numpy())
        logits.append(out.logits.numpy())
        scores.append(out.concept_scores.numpy())
    empty = lambda: np.zeros((0,))  # noqa: E731
    return {
        "assignments": [np.concatenate(s["assignment"]) if s["assignment"] else empty() for s in stages],
        "groups": [np.concatenate(s["groups"]) if s["groups"] else empty() for s in stages],
        "logits": np.concatenate(logits) if logits else empty(),
        "scores": np.concatenate(scores) if scores else empty(),
    }


def evaluate_model(
    model: ConceptPromptModel,
    dataset: PartsDataset,
    indices: np.ndarray,
    config: RunConfig,
    perturbation: Perturbation | None = None,
) -> MetricReport:
    bb = config.backbone
    perturbation = config.eval.perturbation if perturbation is None else perturbation
    images, labels = dataset.tensors(indices)
    keypoints = dataset.keypoints[indices]
    res = collect(model, images, config.eval.batch_size)
    accuracy = 100.0 * float((res["logits"].argmax(-1) == labels.numpy()).mean()) if len(labels) else float("nan")

    layer = config.eval.layer if model.num_stages > 1 else 0
    eval_assign = res["assignments"][layer]
    m_eval = model.concepts[layer].m
    has_kp = keypoints.shape[1] > 0 and (keypoints[..., 2] > 0).any()
    if has_kp:
        con, majority, con_details = consistency_score(eval_assign, keypoints, bb.patch_size, m_eval)
        pixels = denormalize(images)
        perturbed, shifts = perturb_images(pixels, perturbation, torch.Generator().manual_seed(config.seed + 17))
        after = collect(model, normalize_pixels(perturbed), config.eval.batch_size)["assignments"][layer]
        sta, excluded = stability_from_assignments(keypoints, eval_assign, after, shifts, bb.patch_size, bb.image_size)
    else:
        con, majority, con_details, sta, excluded = float("nan"), {}, {}, float("nan"), 0

    iou_args = (res["assignments"][:-1], res["groups"][:-1], res["assignments"][-1], res["groups"][-1], config.fusion.n)
    iou = cross_layer_iou(*iou_args)
    strict = cross_layer_iou(*iou_args, drop_background_concept=True)
    details = {
        "eval_layer": layer,
        "iou_without_background_concept": strict["overall"],
        "num_images": int(len(indices)),
        "consistency": con_details,
        "stability_excluded_keypoints": excluded,
    }
    return MetricReport(accuracy, con, sta, majority, iou, details)


# --- training --------------------------------------------------------------


def epoch_weights(config: RunConfig, epoch: int) -> LossWeights:
    """Loss weights in force for ``epoch``; a classification-only warmup zeroes the rest."""
    if config.mode == "frozen" and config.warmup_objective == "cls" and epoch < config.warmup_epochs:
        return dataclasses.replace(config.weights, ps=0.0, con=0.0)
    return config.weights


def train_step(model, optimizer, images, labels, config: RunConfig, step: int, weights: LossWeights | None = None):
    weights = config.weights if weights is None else weights
    model.train()
    gen = step_generator(config.seed, step)
    theta = sample_affine(gen, config.equivariance)
    out = model(images, gen)
    out_t = model(warp(images, theta), gen) if weights.ps > 0 and weights.equivariance > 0 else None
    report, diagnostics = compute_losses(model, out, out_t, theta, labels, weights)
    optimizer.zero_grad(set_to_none=True)
    if torch.isfinite(report.total):
        report.total.backward()
        optimizer.step()
    return report, diagnostics


@dataclass
class TrainResult:
    output_dir: Path
    final_checkpoint: Path
    best_checkpoint: Path | None
    log_path: Path
    last_metrics: MetricReport | None
    best_val_accuracy: float


def _apply_mode(model: ConceptPromptModel, config: RunConfig, epoch: int) -> None:
    if config.mode == "frozen" and epoch >= config.warmup_epochs:
        model.freeze_backbone()


def train(config: RunConfig, resume: str | Path | None = None, dataset: PartsDataset | None = None) -> TrainResult:
    """Full training run; ``resume`` continues from a checkpoint written by this function."""
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config.yaml")
    dataset = build_dataset(config) if dataset is None else dataset
    check_compatible(config, dataset)

    model = build_model(config)
    optimizer, scheduler = build_optimizer(model, config)
    state = {"epoch": 0, "global_step": 0, "best_val_accuracy": -1.0, "seed": config.seed}
    if resume is not None:
        loaded, _, payload = load_checkpoint(resume, config.backbone)
        model.load_state_dict(loaded.state_dict())
        _apply_mode(model, config, payload["train_state"]["epoch"])
        optimizer.load_state_dict(payload["optimizer"])
        scheduler.load_state_dict(payload["scheduler"])
        state.update(payload["train_state"])

    train_idx, val_idx = dataset.indices("train"), dataset.indices("val")
    images, labels = dataset.tensors(train_idx)
    bs = config.optimizer.batch_size
    log_path = out_dir / LOG_NAME
    best_path = out_dir / BEST_CKPT if (out_dir / BEST_CKPT).exists() and resume else None
    metrics = None

    with open(log_path, "a" if resume else "w") as log_file:
        for epoch in range(state["epoch"], config.optimizer.epochs):
            _apply_mode(model, config, epoch)
            weights = epoch_weights(config, epoch)
            order = epoch_order(config.seed, epoch, len(train_idx))
            for start in range(0, len(order), bs):
                batch = order[start : start + bs]
                report, diag = train_step(
                    model, optimizer, images[batch], labels[batch], config, state["global_step"], weights
                )
                record = report.to_record()
                if not math.isfinite(record["total"]):
                    dump = {
                        "epoch": epoch,
                        "step": state["global_step"],
                        "batch_indices": train_idx[batch.numpy()].tolist(),
                        "losses": record,
                    }
                    (out_dir / "nonfinite_dump.json").write_text(json.dumps(dump, indent=2))
                    raise TrainingError(f"non-finite loss at step {state['global_step']}: {record}")
                record = {
                    "kind": "loss",
                    "epoch": epoch,
                    "step": state["global_step"],
                    "lr": [g["lr"] for g in optimizer.param_groups],
                    **record,
                    "diagnostics": diag,
                }
                log_file.write(json.dumps(record) + "\n")
                state["global_step"] += 1
            scheduler.step()
            state["epoch"] = epoch + 1

            metrics = evaluate_model(model, dataset, val_idx, config)
            log_file.write(json.dumps({"kind": "metrics", "epoch": epoch, "split": "val", **metrics.to_dict()}) + "\n")
            log_file.flush()
            if metrics.accuracy > state["best_val_accuracy"]:
                state["best_val_accuracy"] = metrics.accuracy
                best_path = save_checkpoint(out_dir / BEST_CKPT, model, config, optimizer, scheduler, state)
            log.info(
                "epoch %d  acc %.1f  con %.1f  sta %.1f  iou %.3f",
                epoch, metrics.accuracy, metrics.consistency, metrics.stability, metrics.mean_iou,
            )

    final = save_checkpoint(out_dir / FINAL_CKPT, model, config, optimizer, scheduler, state)
    return TrainResult(out_dir, final, best_path, log_path, metrics, state["best_val_accuracy"])


def evaluate(
    checkpoint: str | Path,
    config: RunConfig | None = None,
    split: str = "test",
    report_path: str | Path | None = None,
    perturbation: Perturbation | None = None,
    dataset: PartsDataset | None = None,
) -> MetricReport:
    """Metrics for a checkpoint on one split; ``config`` selects the dataset (defaults to the stored one)."""
    model, stored, _ = load_checkpoint(checkpoint)
    config = stored if config is None else config
    if config.backbone != stored.backbone:
        raise ConfigError("evaluation config backbone does not match the checkpoint")
    dataset = build_dataset(config) if dataset is None else dataset
    check_compatible(config, dataset)
    report = evaluate_model(model, dataset, dataset.indices(split), config, perturbation)
    if report_path is not None:
        Path(report_path).write_text(json.dumps({"split": split, **report.to_dict()}, indent=2))
    return report
