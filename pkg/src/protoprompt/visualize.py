"""Per-image exports: concept region overlays and concept importance charts.

Files written for an image with id ``ID`` and a model with ``L`` prompted
layers::

    ID_layer0.png ... ID_layer{L-1}.png   RGBA overlays, one per prompted layer
    ID_importance.png                     bar chart for the predicted class

``layer{l}`` counts prompted layers from 0 (the first prompted block), so
``layer{L-1}`` is the coarse, final layer. With ``arrays_dir`` set, the raw
assignment grids go to ``arrays_dir/assignments.npz`` (see
:func:`protoprompt.concepts.save_assignments`).
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, UnidentifiedImageError  # noqa: E402

from .concepts import palette, render_overlay, save_assignments  # noqa: E402
from .data import normalize  # noqa: E402
from .metrics import importance_scores  # noqa: E402
from .train import collect, load_checkpoint  # noqa: E402

PNG_METADATA = {"Software": None}


def overlay_name(image_id: str, layer: int) -> str:
    return f"{image_id}_layer{layer}.png"


def importance_name(image_id: str) -> str:
    return f"{image_id}_importance.png"


def load_image(path: str | Path, image_size: int) -> np.ndarray:
    """Decode to uint8 ``[3, S, S]``, bilinear-resized when needed."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).transpose(2, 0, 1)


def importance_chart(shares: list[tuple[int, float]], predicted: int, path: Path) -> None:
    concepts = [k for k, _ in shares]
    values = [v for _, v in shares]
    fig, ax = plt.subplots(figsize=(3.2, 2.4), dpi=100)
    ax.bar([f"c{k}" for k in concepts], values, color="#4878a8")
    ax.set_ylim(0, 1)
    ax.set_ylabel("importance")
    ax.set_title(f"predicted class {predicted}")
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)


def export_images(model, pixels: np.ndarray, image_ids: list[str], out_dir, arrays_dir=None) -> list[Path]:
    """Write overlays and charts for uint8 ``[N, 3, S, S]`` images; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    patch = model.backbone_config.patch_size
    res = collect(model, normalize(pixels))
    written, grids = [], {}
    for i, image_id in enumerate(image_ids):
        for s, assign in enumerate(res["assignments"]):
            m = model.concepts[s].m
            path = out_dir / overlay_name(image_id, s)
            path.parent.mkdir(parents=True, exist_ok=True)
            render_overlay(assign[i], m, patch).save(path, format="PNG")
            written.append(path)
            grids[f"{image_id}/layer{s}"] = assign[i]
        predicted = int(res["logits"][i].argmax())
        path = out_dir / importance_name(image_id)
        importance_chart(importance_scores(res["scores"][i], predicted), predicted, path)
        written.append(path)
    if arrays_dir is not None:
        Path(arrays_dir).mkdir(parents=True, exist_ok=True)
        save_assignments(Path(arrays_dir) / "assignments.npz", grids)
    return written


def visualize(checkpoint, images: list, out_dir, arrays_dir=None) -> dict:
    """Export every decodable image; undecodable ones are skipped with an error record.

    Image ids are file stems. Returns ``{"files": [...], "errors": [...]}``
    and also writes the errors to ``out_dir/errors.json`` when there are any.
    """
    model, config, _ = load_checkpoint(checkpoint)
    size = config.backbone.image_size
    pixels, ids, errors = [], [], []
    for p in map(Path, images):
        try:
            pixels.append(load_image(p, size))
            ids.append(p.stem)
        except (UnidentifiedImageError, OSError) as exc:
            errors.append({"path": str(p), "error": str(exc)})
    files = export_images(model, np.stack(pixels), ids, out_dir, arrays_dir) if pixels else []
    if errors:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "errors.json").write_text(json.dumps(errors, indent=2))
    return {"files": [str(f) for f in files], "errors": errors}


def legend(num_concepts: int) -> list[tuple[int, tuple[int, int, int]]]:
    """``(concept, rgb)`` pairs matching the overlays; the last one is background."""
    return [(k, tuple(int(c) for c in rgb)) for k, rgb in enumerate(palette(num_concepts))]


__all__ = ["visualize", "export_images", "load_image", "overlay_name", "importance_name", "legend"]
