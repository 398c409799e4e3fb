"""Run a pooling-headed CNN over an image folder and write the dataset format.

The exporter owns preprocessing (resize + normalization, recorded in the
manifest) and taps the activation feeding the final pooling layer via a
forward hook. For every image it writes the pre-pooling feature maps and the
pooled vector as CXT1 blobs, plus labels, concept annotations, and part
coordinates into ``manifest.json``. Before anything is written for an image,
the pooled vector is re-derived from the float32 maps and must agree within
1e-5; a mismatch aborts the export naming the image.

Part coordinates arrive in original-image pixels and are rescaled to the
preprocessed geometry so that downstream localisation scoring and the
upsampled heatmaps share one coordinate frame. The preprocessed RGB images
are saved next to the blobs (optional) so overlay rendering works without
the source folder.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .cxt import write_tensor

log = logging.getLogger("featexport")

GAP_SELF_CHECK_ATOL = 1e-5

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ExportError(Exception):
    pass


@dataclass
class ExportJob:
    model: str  # TorchScript file path, or a torchvision model name
    tap: str  # module whose output feeds the final pooling
    images_dir: Path
    labels_csv: Path
    out_dir: Path
    concepts_csv: Path | None = None
    parts_csv: Path | None = None
    part_map_csv: Path | None = None
    class_concepts_csv: Path | None = None
    weights: str | None = None
    resize: int = 224
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    test_fraction: float = 0.2
    save_images: bool = True
    extra_manifest: dict = field(default_factory=dict)


def load_model(job: ExportJob) -> torch.nn.Module:
    path = Path(job.model)
    if path.suffix in (".pt", ".pth", ".ts") and path.is_file():
        try:
            loaded = torch.load(str(path), map_location="cpu", weights_only=False)
        except (AttributeError, ModuleNotFoundError) as exc:
            raise ExportError(
                f"{path}: cannot unpickle the model ({exc}); the module defining its "
                f"class must be importable here (install it or add it to PYTHONPATH)"
            ) from exc
        if isinstance(loaded, torch.jit.ScriptModule):
            raise ExportError(
                f"{path} is TorchScript, which cannot be tapped with forward hooks; "
                f"save the eager module with torch.save(model, ...) instead"
            )
        if isinstance(loaded, dict):
            raise ExportError(
                f"{path} holds a state dict; pass a torchvision model name via "
                f"--model and this file via --weights"
            )
        model = loaded
    else:
        try:
            import torchvision.models as tvm
        except ImportError as exc:
            raise ExportError(
                f"{job.model!r} is not a TorchScript file and torchvision is not installed"
            ) from exc
        if not hasattr(tvm, job.model):
            raise ExportError(f"unknown torchvision model {job.model!r}")
        model = getattr(tvm, job.model)(weights=None)
        if job.weights:
            state = torch.load(job.weights, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        else:
            log.warning("no --weights given; using randomly initialised %s", job.model)
    model.eval()
    return model


def find_tap(model: torch.nn.Module, name: str) -> torch.nn.Module:
    modules = dict(model.named_modules())
    if name not in modules:
        known = ", ".join(sorted(k for k in modules if k)) or "<none>"
        raise ExportError(f"tap module {name!r} not found; available: {known}")
    return modules[name]


def preprocess(image: Image.Image, job: ExportJob) -> torch.Tensor:
    rgb = image.convert("RGB").resize((job.resize, job.resize), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(job.mean, dtype=np.float32)) / np.asarray(job.std, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def _load_labels(job: ExportJob) -> tuple[list[dict], list[str]]:
    rows = _read_rows(job.labels_csv)
    if not rows:
        raise ExportError(f"{job.labels_csv}: no rows")
    required = {"image", "class"}
    if not required <= set(rows[0]):
        raise ExportError(f"{job.labels_csv}: header must include {sorted(required)}")
    class_names = sorted({row["class"] for row in rows})
    class_index = {name: i for i, name in enumerate(class_names)}
    entries = []
    for row in rows:
        entries.append(
            {
                "image": row["image"],
                "class_label": class_index[row["class"]],
                "split": row.get("split") or None,
            }
        )
    entries.sort(key=lambda e: e["image"])
    if any(e["split"] is None for e in entries):
        _assign_splits(entries, job.test_fraction)
    for entry in entries:
        if entry["split"] not in ("train", "test"):
            raise ExportError(f"{entry['image']}: bad split {entry['split']!r}")
    return entries, class_names


def _assign_splits(entries: list[dict], test_fraction: float) -> None:
    """Deterministic per-class split: the tail of the sorted order is test."""
    by_class: dict[int, list[dict]] = {}
    for entry in entries:
        by_class.setdefault(entry["class_label"], []).append(entry)
    for members in by_class.values():
        n_test = int(math.floor(len(members) * test_fraction + 0.5))
        for i, entry in enumerate(members):
            entry["split"] = "test" if i >= len(members) - n_test else "train"


def _load_concepts(job: ExportJob) -> tuple[list[str], dict[str, list[int]]]:
    if job.concepts_csv is None:
        return [], {}
    with open(job.concepts_csv, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if not header or header[0] != "image":
            raise ExportError(f"{job.concepts_csv}: first header column must be 'image'")
        names = header[1:]
        table = {}
        for row in reader:
            bits = [int(v) for v in row[1:]]
            if len(bits) != len(names) or any(b not in (0, 1) for b in bits):
                raise ExportError(f"{job.concepts_csv}: bad row for {row[0]!r}")
            table[row[0]] = bits
    return names, table


def _load_parts(
    job: ExportJob, concept_names: list[str]
) -> dict[str, dict[int, tuple[float, float]]]:
    if job.parts_csv is None:
        return {}
    index = {name: j for j, name in enumerate(concept_names)}
    points: dict[str, dict[int, tuple[float, float]]] = {}
    for row in _read_rows(job.parts_csv):
        concept = row["concept"]
        j = int(concept) if concept.isdigit() else index.get(concept, -1)
        if not 0 <= j < len(concept_names):
            raise ExportError(f"{job.parts_csv}: unknown concept {concept!r}")
        points.setdefault(row["image"], {})[j] = (float(row["row"]), float(row["col"]))
    return points


def _load_part_map(job: ExportJob, concept_names: list[str]) -> dict[int, str | None]:
    part_map: dict[int, str | None] = {j: None for j in range(len(concept_names))}
    if job.part_map_csv is None:
        return part_map
    index = {name: j for j, name in enumerate(concept_names)}
    for row in _read_rows(job.part_map_csv):
        concept = row["concept"]
        j = int(concept) if concept.isdigit() else index.get(concept, -1)
        if not 0 <= j < len(concept_names):
            raise ExportError(f"{job.part_map_csv}: unknown concept {concept!r}")
        part_map[j] = row["part"] or None
    return part_map


def _class_concept_truth(
    job: ExportJob,
    entries: list[dict],
    class_names: list[str],
    concept_names: list[str],
    concept_table: dict[str, list[int]],
) -> np.ndarray:
    """Explicit class-level truth when provided, else per-class label means."""
    num_concepts, num_classes = len(concept_names), len(class_names)
    if job.class_concepts_csv is not None:
        truth = np.zeros((num_concepts, num_classes), dtype=np.float64)
        seen = set()
        for row in _read_rows(job.class_concepts_csv):
            if row["class"] not in class_names:
                raise ExportError(f"{job.class_concepts_csv}: unknown class {row['class']!r}")
            k = class_names.index(row["class"])
            seen.add(k)
            for j, name in enumerate(concept_names):
                truth[j, k] = float(row[name])
        missing = set(range(num_classes)) - seen
        if missing:
            raise ExportError(f"{job.class_concepts_csv}: missing classes {sorted(missing)}")
        return truth
    sums = np.zeros((num_concepts, num_classes))
    counts = np.zeros(num_classes)
    for entry in entries:
        bits = concept_table.get(entry["image"])
        if bits is not None:
            sums[:, entry["class_label"]] += bits
            counts[entry["class_label"]] += 1
    return np.divide(sums, np.maximum(counts, 1.0))


def _image_id(name: str) -> str:
    stem = Path(name).stem
    return "".join(c if (c.isalnum() or c in "-_") else "_" for c in stem)


def capture_maps(model, tap_module, batch: torch.Tensor) -> np.ndarray:
    captured: list[torch.Tensor] = []

    def hook(module, inputs, output):
        captured.append(output)

    handle = tap_module.register_forward_hook(hook)
    try:
        with torch.no_grad():
            model(batch)
    finally:
        handle.remove()
    if not captured:
        raise ExportError("tap module produced no output")
    activation = captured[0]
    if activation.dim() == 4:
        activation = activation.squeeze(0)
    if activation.dim() != 3:
        raise ExportError(
            f"tap output has shape {tuple(captured[0].shape)}, expected a rank-3 "
            f"(channels, height, width) activation"
        )
    return activation.permute(1, 2, 0).contiguous().numpy().astype(np.float32)


def export(job: ExportJob) -> Path:
    model = load_model(job)
    tap_module = find_tap(model, job.tap)
    entries, class_names = _load_labels(job)
    concept_names, concept_table = _load_concepts(job)
    parts = _load_parts(job, concept_names)
    part_map = _load_part_map(job, concept_names)

    if concept_table:
        covered = {e["image"] for e in entries} - set(concept_table)
        if covered:
            raise ExportError(f"concept annotations missing for: {sorted(covered)[:5]}")

    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scale = job.resize
    images_doc = {}
    feature_shape = None

    for entry in entries:
        source = Path(job.images_dir) / entry["image"]
        try:
            with Image.open(source) as handle:
                batch = preprocess(handle, job)
                preview = handle.convert("RGB").resize((scale, scale), Image.BILINEAR)
        except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
            log.warning("skipping %s: %s", entry["image"], exc)
            continue

        maps = capture_maps(model, tap_module, batch)
        if feature_shape is None:
            feature_shape = maps.shape
        elif maps.shape != feature_shape:
            raise ExportError(
                f"{entry['image']}: feature shape {maps.shape} differs from {feature_shape}"
            )
        pooled = maps.mean(axis=(0, 1), dtype=np.float64).astype(np.float32)
        drift = float(np.max(np.abs(maps.mean(axis=(0, 1), dtype=np.float64) - pooled)))
        if drift > GAP_SELF_CHECK_ATOL:
            raise ExportError(
                f"{entry['image']}: pooling self-check failed, drift {drift:.2e}"
            )

        image_id = _image_id(entry["image"])
        if image_id in images_doc:
            raise ExportError(f"duplicate image id {image_id!r} (from {entry['image']})")
        write_tensor(out_dir / f"{image_id}.pregap.cxt", maps)
        write_tensor(out_dir / f"{image_id}.postgap.cxt", pooled)

        image_path = None
        if job.save_images:
            image_path = f"{image_id}.png"
            preview.save(out_dir / image_path, format="PNG")

        original_w, original_h = Image.open(source).size
        point_doc = {}
        for j, (row, col) in parts.get(entry["image"], {}).items():
            scaled_row = min(scale - 1, max(0, round(row * scale / original_h)))
            scaled_col = min(scale - 1, max(0, round(col * scale / original_w)))
            point_doc[str(j)] = [int(scaled_row), int(scaled_col)]

        images_doc[image_id] = {
            "class_label": entry["class_label"],
            "concept_labels": concept_table.get(entry["image"], []),
            "part_points": point_doc,
            "image_size": [scale, scale],
            "image_path": image_path,
            "split": entry["split"],
        }

    if not images_doc:
        raise ExportError("no images were exported")
    assert feature_shape is not None

    truth = _class_concept_truth(job, entries, class_names, concept_names, concept_table)
    manifest = {
        "num_concepts": len(concept_names),
        "num_classes": len(class_names),
        "depth": int(feature_shape[2]),
        "height": int(feature_shape[0]),
        "width": int(feature_shape[1]),
        "concept_names": concept_names,
        "class_names": class_names,
        "class_concept_truth": np.round(truth, 9).tolist(),
        "part_map": {str(j): name for j, name in sorted(part_map.items())},
        "images": images_doc,
        "export": {
            "model": job.model,
            "tap": job.tap,
            "weights": job.weights,
            "preprocessing": {
                "resize": job.resize,
                "interpolation": "bilinear",
                "scale": "1/255",
                "mean": list(job.mean),
                "std": list(job.std),
            },
        },
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    log.info("exported %d images to %s", len(images_doc), out_dir)
    return out_dir
