"""Ablation sweeps: one train + evaluate per setting, collected into a table."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

from .backbone import ConfigError
from .config import RunConfig, apply_overrides
from .train import build_dataset, evaluate, train

log = logging.getLogger(__name__)

AXES = ("layers", "prototype_counts", "loss_toggles")
COLUMNS = ("setting", "Con.", "Sta.", "Acc.", "IoU", "status", "error")

DEFAULT_VALUES = {
    "layers": [1, 2, 3, 4],
    "prototype_counts": [[10], [13, 10, 7], [16, 13, 10, 7]],
    "loss_toggles": [{"weights.con": 0.0}, {"weights.con": 1.0}],
}


def setting_overrides(config: RunConfig, axis: str, value) -> tuple[str, dict]:
    """``(label, overrides)`` for one setting of ``axis``.

    ``layers``: prompt the last ``L`` blocks, keeping the last ``L`` entries of
    the configured per-layer concept counts. ``prototype_counts``: a list of
    per-layer counts; its length sets the number of prompted layers.
    ``loss_toggles``: a mapping of dotted config keys, normally ``weights.*``.
    """
    if axis == "layers":
        L = int(value)
        counts = list(config.fusion.per_layer_m)
        if not 1 <= L <= len(counts):
            raise ConfigError(f"layers setting {L} outside 1..{len(counts)}")
        return f"L={L}", {"backbone.num_prompted_layers": L, "fusion.per_layer_m": counts[-L:]}
    if axis == "prototype_counts":
        counts = [int(v) for v in value]
        return "m=" + "/".join(map(str, counts)), {
            "backbone.num_prompted_layers": len(counts),
            "fusion.per_layer_m": counts,
        }
    if axis == "loss_toggles":
        if not isinstance(value, dict):
            raise ConfigError(f"loss_toggles settings are mappings of config keys, got {value!r}")
        return ",".join(f"{k}={v}" for k, v in value.items()), dict(value)
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in label)


def ablate(config: RunConfig, axis: str, values=None, out_dir=None, split: str = "test") -> list[dict]:
    """Train and evaluate every setting with the shared seed; write ``ablation_<axis>.csv``.

    A failing setting becomes a row with ``status=failed`` and the error
    message; the remaining settings still run.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {AXES}")
    values = DEFAULT_VALUES[axis] if values is None else values
    out_dir = Path(config.output_dir if out_dir is None else out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(config)

    rows = []
    for value in values:
        label = str(value)
        try:
            label, overrides = setting_overrides(config, axis, value)
            run_dir = out_dir / axis / _slug(label)
            cfg = apply_overrides(config, overrides | {"output_dir": str(run_dir)})
            result = train(cfg, dataset=dataset)
            report = evaluate(result.final_checkpoint, cfg, split, run_dir / f"report_{split}.json", dataset=dataset)
            rows.append(
                {
                    "setting": label,
                    "Con.": round(report.consistency, 2),
                    "Sta.": round(report.stability, 2),
                    "Acc.": round(report.accuracy, 2),
                    "IoU": round(report.mean_iou, 4),
                    "status": "ok",
                    "error": "",
                }
            )
        except Exception as exc:  # a failed setting must not stop the sweep
            log.exception("ablation setting %s failed", label)
            rows.append({"setting": label, "Con.": "", "Sta.": "", "Acc.": "", "IoU": "", "status": "failed", "error": str(exc)})

    write_table(rows, out_dir / f"ablation_{axis}.csv")
    return rows


def write_table(rows: list[dict], path) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return Path(path)


def read_table(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


__all__ = ["ablate", "setting_overrides", "write_table", "read_table", "AXES", "DEFAULT_VALUES"]
