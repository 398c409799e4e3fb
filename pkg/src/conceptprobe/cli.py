"""Command-line pipeline: generate, train, visualise, score, report.

Stages communicate only through the filesystem (dataset dir, bank dir,
model dir, report dir) so runs are resumable and other tools can produce or
consume any stage's artifacts. Every stage writes ``config.resolved.json``
into its output directory; re-running the stage with ``--config`` pointed at
that file reproduces the outputs byte for byte (the output directory itself
is not part of the config).

Exit codes: 0 success, 1 usage errors, 2 missing/broken data artifacts,
3 numeric failures (divergence, non-finite values).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from pathlib import Path

import numpy as np

from . import bottleneck, cav, coam, metrics, store, synth
from .errors import DataError, NumericError, UsageError

ENV_SEED = "CONCEPT_PROBE_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part != "")
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from exc


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(",") if part != "")
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated number list, got {text!r}") from exc


def _load_config_file(path: str, stage: str) -> dict:
    config_path = Path(path)
    if not config_path.is_file():
        raise DataError(f"missing config file: {config_path}")
    doc = json.loads(config_path.read_text())
    if doc.get("stage") != stage:
        raise UsageError(
            f"config file is for stage {doc.get('stage')!r}, not {stage!r}"
        )
    return doc.get("params", {})


def _resolve(args, stage: str, defaults: dict) -> dict:
    """defaults < CONCEPT_PROBE_SEED < --config file < explicit flags."""
    resolved = dict(defaults)
    if "seed" in resolved and os.environ.get(ENV_SEED):
        try:
            resolved["seed"] = int(os.environ[ENV_SEED])
        except ValueError as exc:
            raise UsageError(f"{ENV_SEED} must be an integer") from exc
    if getattr(args, "config", None):
        file_params = _load_config_file(args.config, stage)
        for key in defaults:
            if key in file_params:
                resolved[key] = file_params[key]
    for key in defaults:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            resolved[key] = value
    return resolved


def _write_resolved(out_dir: Path, stage: str, params: dict) -> None:
    # jobs is an execution knob: outputs are identical for any worker count,
    # so it stays out of the provenance record (like the out dir itself).
    params = {k: v for k, v in params.items() if k != "jobs"}
    out_dir.mkdir(parents=True, exist_ok=True)
    store.dump_json(out_dir / "config.resolved.json", {"stage": stage, "params": params})


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    return Path(args.out)


def _jobs(value) -> int:
    if value is None:
        return os.cpu_count() or 1
    if value < 1:
        raise UsageError("--jobs must be >= 1")
    return int(value)


# ---------------------------------------------------------------------------
# Stages


def cmd_synth_gen(args) -> int:
    defaults = {"spec": None, "seed": None}
    params = _resolve(args, "synth-gen", defaults)
    if params["spec"] is not None and isinstance(params["spec"], str):
        spec = synth.SynthSpec.from_json(params["spec"])
    elif isinstance(params["spec"], dict):
        spec = synth.SynthSpec(**params["spec"])
    else:
        spec = synth.SynthSpec()
    if params["seed"] is not None:
        spec.seed = int(params["seed"])
    out_dir = _require_out(args)
    synth.generate(spec, out_dir)
    from dataclasses import asdict

    _write_resolved(out_dir, "synth-gen", {"spec": asdict(spec), "seed": spec.seed})
    print(f"wrote synthetic dataset to {out_dir} ({spec.num_classes} classes, "
          f"{spec.num_concepts} concepts)")
    return 0


def cmd_train_cavs(args) -> int:
    defaults = {
        "data": None,
        "np": 100,
        "nn": 100,
        "lam": 1.0,
        "seed": 0,
        "epochs": 500,
        "lr0": 1.0,
        "normalize_cavs": False,
    }
    params = _resolve(args, "train-cavs", defaults)
    if not params["data"]:
        raise UsageError("--data is required")
    dataset = store.Dataset.open(params["data"])
    bank = cav.build_bank(
        dataset,
        n_pos=int(params["np"]),
        n_neg=int(params["nn"]),
        lam=float(params["lam"]),
        seed=int(params["seed"]),
        epochs=int(params["epochs"]),
        lr0=float(params["lr0"]),
        normalize=bool(params["normalize_cavs"]),
    )
    out_dir = _require_out(args)
    bank.save(out_dir)
    _write_resolved(out_dir, "train-cavs", params)
    trained = sum(1 for meta in bank.train_meta if meta.get("trained"))
    print(f"trained {trained}/{bank.num_concepts} concept vectors -> {out_dir}")
    for line in bank.warnings:
        print(f"warning: {line}", file=sys.stderr)
    return 0


def cmd_train_classifier(args) -> int:
    defaults = {
        "data": None,
        "bank": None,
        "lr": 1.0,
        "epochs": 500,
        "weight_decay": 1e-4,
        "seed": 0,
        "backtracking": True,
    }
    params = _resolve(args, "train-classifier", defaults)
    if getattr(args, "no_backtracking", False):
        params["backtracking"] = False
    if not params["data"] or not params["bank"]:
        raise UsageError("--data and --bank are required")
    dataset = store.Dataset.open(params["data"])
    bank = cav.ConceptBank.load(params["bank"])

    train_ids = dataset.image_ids("train")
    test_ids = dataset.image_ids("test")
    if not train_ids:
        raise DataError("dataset has no training split")
    features = bottleneck.project_batch(bank, dataset.post_gap_matrix(train_ids))
    labels = np.array([dataset.manifest.images[i].class_label for i in train_ids])
    config = bottleneck.ClassifierConfig(
        learning_rate=float(params["lr"]),
        epochs=int(params["epochs"]),
        weight_decay=float(params["weight_decay"]),
        seed=int(params["seed"]),
        backtracking=bool(params["backtracking"]),
    )
    model = bottleneck.train_classifier(
        features, labels, dataset.manifest.num_classes, config
    )
    if test_ids:
        test_features = bottleneck.project_batch(bank, dataset.post_gap_matrix(test_ids))
        test_labels = np.array([dataset.manifest.images[i].class_label for i in test_ids])
        model.test_accuracy = bottleneck.accuracy(model, test_features, test_labels)
    out_dir = _require_out(args)
    model.save(out_dir)
    _write_resolved(out_dir, "train-classifier", params)
    test_str = f"{model.test_accuracy:.3f}" if model.test_accuracy is not None else "n/a"
    print(
        f"classifier trained: train accuracy {model.train_accuracy:.3f}, "
        f"test accuracy {test_str} -> {out_dir}"
    )
    return 0


def cmd_coam(args) -> int:
    defaults = {
        "data": None,
        "bank": None,
        "image": None,
        "concepts": None,
        "mode": "coloured",
        "beta": 0.4,
        "threshold": 0.5,
        "jobs": None,
    }
    params = _resolve(args, "coam", defaults)
    for key in ("data", "bank", "image"):
        if not params[key]:
            raise UsageError(f"--{key} is required")
    dataset = store.Dataset.open(params["data"])
    bank = cav.ConceptBank.load(params["bank"])
    record = dataset.load_record(params["image"])
    concept_indices = (
        list(_int_list(params["concepts"]))
        if isinstance(params["concepts"], str)
        else (params["concepts"] or list(range(bank.num_concepts)))
    )
    for j in concept_indices:
        if not 0 <= j < bank.num_concepts:
            raise UsageError(f"concept index {j} out of range [0,{bank.num_concepts})")

    if record.image_path:
        image_path = Path(record.image_path)
        if not image_path.is_absolute():
            image_path = Path(params["data"]) / image_path
        base = coam.load_rgb(image_path, record.image_size)
    else:
        print(
            f"note: {record.image_id} has no source image; rendering on black canvas",
            file=sys.stderr,
        )
        base = np.zeros((*record.image_size, 3), dtype=np.uint8)

    out_dir = _require_out(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = cav.bank_matrix(bank)

    def render_one(j: int) -> None:
        activation = coam.build_map(
            record.image_id, record.pre_gap, rows[j], record.image_size, j
        )
        rendered = coam.render(
            activation,
            base,
            mode=params["mode"],
            beta=float(params["beta"]),
            threshold=float(params["threshold"]),
        )
        coam.save_png(out_dir / f"{record.image_id}.concept{j}.{params['mode']}.png", rendered)

    jobs = _jobs(params["jobs"])
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(render_one, concept_indices))
    else:
        for j in concept_indices:
            render_one(j)
    _write_resolved(out_dir, "coam", params)
    print(f"rendered {len(concept_indices)} concept map(s) -> {out_dir}")
    return 0


def _open_artifacts(params):
    for key in ("data", "bank", "model"):
        if not params.get(key):
            raise UsageError(f"--{key} is required")
    dataset = store.Dataset.open(params["data"])
    bank = cav.ConceptBank.load(params["bank"])
    model = bottleneck.BottleneckModel.load(params["model"])
    if model.num_concepts != bank.num_concepts:
        raise DataError(
            f"model expects {model.num_concepts} concepts, bank has {bank.num_concepts}"
        )
    return dataset, bank, model


def _subset_names(flag: str) -> tuple[str, ...]:
    mapping = {"entire": ("entire_test",), "correct": ("correct_only",), "both": (
        "entire_test", "correct_only")}
    if flag not in mapping:
        raise UsageError(f"--subset must be entire, correct or both, got {flag!r}")
    return mapping[flag]


def cmd_cem(args) -> int:
    defaults = {
        "data": None,
        "bank": None,
        "model": None,
        "l": (1, 3, 5),
        "basis": "theta_uhat",
        "subset": "both",
        "rank_key": "absolute",
        "jobs": None,
    }
    params = _resolve(args, "cem", defaults)
    if isinstance(params["l"], str):
        params["l"] = _int_list(params["l"])
    dataset, bank, model = _open_artifacts(params)
    config = metrics.SuiteConfig(
        l_values=tuple(params["l"]),
        bases=(params["basis"],),
        cem_subsets=_subset_names(params["subset"]),
        rank_keys=(params["rank_key"],),
        with_cem=True,
        with_clm=False,
        with_cgim=False,
        jobs=_jobs(params["jobs"]),
    )
    bundle = metrics.evaluate_suite(dataset, bank, model, config)
    out_dir = _require_out(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    store.dump_json(out_dir / "cem.json", bundle)
    _write_resolved(out_dir, "cem", params)
    for cell in bundle["cem"]:
        mean = "undefined" if cell["mean"] is None else f"{100 * cell['mean']:.1f}"
        print(f"CEM basis={cell['basis']} subset={cell['subset']} l={cell['l']}: {mean}")
    return 0


def cmd_clm(args) -> int:
    defaults = {
        "data": None,
        "bank": None,
        "model": None,
        "alpha": (1.0, 3.0, 6.0),
        "l": (1, 3, 5),
        "basis": "theta_uhat",
        "region_mode": "top_alpha",
        "tau": 0.5,
        "rank_key": "absolute",
        "subset": "entire",
        "jobs": None,
    }
    params = _resolve(args, "clm", defaults)
    if isinstance(params["l"], str):
        params["l"] = _int_list(params["l"])
    if isinstance(params["alpha"], str):
        params["alpha"] = _float_list(params["alpha"])
    dataset, bank, model = _open_artifacts(params)
    config = metrics.SuiteConfig(
        l_values=tuple(params["l"]),
        alphas=tuple(params["alpha"]),
        bases=(params["basis"],),
        clm_subsets=_subset_names(params["subset"]),
        rank_keys=(params["rank_key"],),
        region_mode=params["region_mode"],
        tau=float(params["tau"]),
        with_cem=False,
        with_clm=True,
        with_cgim=False,
        jobs=_jobs(params["jobs"]),
    )
    bundle = metrics.evaluate_suite(dataset, bank, model, config)
    out_dir = _require_out(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    store.dump_json(out_dir / "clm.json", bundle)
    _write_resolved(out_dir, "clm", params)
    for cell in bundle["clm"]:
        mean = "undefined" if cell["mean"] is None else f"{100 * cell['mean']:.1f}"
        region = f"alpha={cell['alpha']}" if "alpha" in cell else f"tau={cell['tau']}"
        print(f"CLM basis={cell['basis']} {region} l={cell['l']}: {mean}")
    return 0


def cmd_cgim(args) -> int:
    defaults = {
        "data": None,
        "bank": None,
        "model": None,
        "type": (1, 2, 3),
        "axis": "both",
        "jobs": None,
    }
    params = _resolve(args, "cgim", defaults)
    if isinstance(params["type"], (int, str)):
        params["type"] = _int_list(str(params["type"]))
    axes = ("concept", "class") if params["axis"] == "both" else (params["axis"],)
    dataset, bank, model = _open_artifacts(params)
    config = metrics.SuiteConfig(
        cgim_types=tuple(params["type"]),
        cgim_axes=axes,
        with_cem=False,
        with_clm=False,
        with_cgim=True,
        jobs=_jobs(params["jobs"]),
    )
    bundle = metrics.evaluate_suite(dataset, bank, model, config)
    out_dir = _require_out(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    store.dump_json(out_dir / "cgim.json", bundle)
    _write_resolved(out_dir, "cgim", params)
    for cell in bundle["cgim"]:
        mean = "undefined" if cell["mean"] is None else f"{cell['mean']:+.3f}"
        print(
            f"CGIM type {cell['type']} per {cell['axis']}: mean {mean} "
            f"({cell['undefined']} undefined)"
        )
    return 0


# ---------------------------------------------------------------------------
# Report consolidation


def _collect_bundles(inputs: list[str]) -> dict:
    merged: dict = {"cem": [], "clm": [], "cgim": [], "test_accuracy": None}
    found = False
    for item in inputs:
        path = Path(item)
        if path.is_dir():
            candidates = [path / name for name in ("cem.json", "clm.json", "cgim.json")]
        else:
            candidates = [path]
        for candidate in candidates:
            if not candidate.is_file():
                continue
            doc = json.loads(candidate.read_text())
            for key in ("cem", "clm", "cgim"):
                merged[key].extend(doc.get(key, []))
            if doc.get("test_accuracy") is not None:
                merged["test_accuracy"] = doc["test_accuracy"]
            found = True
    if not found:
        raise DataError(f"no metric reports found under: {', '.join(inputs)}")
    return merged


def _fmt_pct(value: float | None) -> str:
    return "   --" if value is None else f"{100 * value:5.1f}"


def _render_text(merged: dict) -> str:
    lines: list[str] = []
    if merged["test_accuracy"] is not None:
        lines.append(f"Test accuracy: {100 * merged['test_accuracy']:.1f}%")
        lines.append("")
    if merged["cem"]:
        l_values = sorted({cell["l"] for cell in merged["cem"]})
        keys = {cell.get("rank_key", "absolute") for cell in merged["cem"]}
        lines.append("CEM: top-l concepts annotated present (%)")
        header = f"{'subset':<13} {'basis':<18}" + "".join(f"{'l=' + str(l):>7}" for l in l_values)
        lines.append(header)
        seen = {}
        for cell in merged["cem"]:
            basis = cell["basis"]
            if len(keys) > 1:
                basis = f"{basis}/{cell.get('rank_key', 'absolute')}"
            seen.setdefault((cell["subset"], basis), {})[cell["l"]] = cell["mean"]
        for (subset, basis), by_l in seen.items():
            row = f"{subset:<13} {basis:<18}" + "".join(
                f"  {_fmt_pct(by_l.get(l))}" for l in l_values
            )
            lines.append(row)
        lines.append("")
    if merged["clm"]:
        l_values = sorted({cell["l"] for cell in merged["clm"]})
        keys = {cell.get("rank_key", "absolute") for cell in merged["clm"]}
        lines.append("CLM: top-l concepts localised (%)")
        header = f"{'region':<12} {'basis':<18}" + "".join(f"{'l=' + str(l):>7}" for l in l_values)
        lines.append(header)
        seen = {}
        for cell in merged["clm"]:
            region = (
                f"alpha={cell['alpha']:g}" if "alpha" in cell else f"tau={cell['tau']:g}"
            )
            basis = cell["basis"]
            if len(keys) > 1:
                basis = f"{basis}/{cell.get('rank_key', 'absolute')}"
            seen.setdefault((region, basis), {})[cell["l"]] = cell["mean"]
        for (region, basis), by_l in seen.items():
            row = f"{region:<12} {basis:<18}" + "".join(
                f"  {_fmt_pct(by_l.get(l))}" for l in l_values
            )
            lines.append(row)
        lines.append("")
    for cell in merged["cgim"]:
        mean = "undefined" if cell["mean"] is None else f"{cell['mean']:+.3f}"
        lines.append(
            f"CGIM type {cell['type']} per {cell['axis']}: mean {mean} "
            f"({cell['undefined']} undefined)"
        )
        counts = cell["histogram"]["counts"]
        lines.append("  histogram over [-1,1], 20 bins: " + " ".join(str(c) for c in counts))
    return "\n".join(lines).rstrip() + "\n"


def _render_csv(merged: dict) -> str:
    import csv
    import io

    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(
        [
            "metric",
            "basis",
            "rank_key",
            "subset",
            "l",
            "alpha",
            "tau",
            "type",
            "axis",
            "item",
            "score",
        ]
    )
    for cell in merged["cem"]:
        for item, score in cell["per_item"].items():
            writer.writerow(
                [
                    "cem",
                    cell["basis"],
                    cell.get("rank_key", ""),
                    cell["subset"],
                    cell["l"],
                    "",
                    "",
                    "",
                    "",
                    item,
                    score,
                ]
            )
    for cell in merged["clm"]:
        for item, score in cell["per_item"].items():
            writer.writerow(
                [
                    "clm",
                    cell["basis"],
                    cell.get("rank_key", ""),
                    cell["subset"],
                    cell["l"],
                    cell.get("alpha", ""),
                    cell.get("tau", ""),
                    "",
                    "",
                    item,
                    "" if score is None else score,
                ]
            )
    for cell in merged["cgim"]:
        for name, score in zip(cell["names"], cell["scores"]):
            writer.writerow(
                [
                    "cgim",
                    "",
                    "",
                    "",
                    "",
                    "",
                    "",
                    cell["type"],
                    cell["axis"],
                    name,
                    "" if score is None else score,
                ]
            )
    return buffer.getvalue()


def cmd_report(args) -> int:
    merged = _collect_bundles(args.inputs)
    if args.format == "json":
        text = json.dumps(merged, indent=2, sort_keys=True) + "\n"
    elif args.format == "csv":
        text = _render_csv(merged)
    else:
        text = _render_text(merged)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="conceptprobe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate a planted-concept synthetic dataset")
    p.add_argument("--spec", help="synth spec JSON file (defaults to the desk-scale spec)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=False)
    p.add_argument("--config", help="config.resolved.json from a previous run")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train-cavs", help="train one SVM per concept into a bank")
    p.add_argument("--data")
    p.add_argument("--np", type=int, dest="np")
    p.add_argument("--nn", type=int, dest="nn")
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr0", type=float)
    p.add_argument("--normalize-cavs", action="store_const", const=True, dest="normalize_cavs")
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train_cavs)

    p = sub.add_parser("train-classifier", help="train the concept-space linear classifier")
    p.add_argument("--data")
    p.add_argument("--bank")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-backtracking", action="store_true")
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("coam", help="render concept activation heatmaps for one image")
    p.add_argument("--data")
    p.add_argument("--bank")
    p.add_argument("--image")
    p.add_argument("--concepts", help="comma-separated concept indices (default: all)")
    p.add_argument("--mode", choices=coam.RENDER_MODES)
    p.add_argument("--beta", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_coam)

    p = sub.add_parser("cem", help="concept existence metric over the test split")
    p.add_argument("--data")
    p.add_argument("--bank")
    p.add_argument("--model")
    p.add_argument("--l", type=_int_list)
    p.add_argument("--basis", choices=bottleneck.SCORE_BASES)
    p.add_argument("--subset", choices=("entire", "correct", "both"))
    p.add_argument("--rank-key", choices=("absolute", "signed"), dest="rank_key")
    p.add_argument("--signed-rank", action="store_const", const="signed", dest="rank_key")
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_cem)

    p = sub.add_parser("clm", help="concept location metric over the test split")
    p.add_argument("--data")
    p.add_argument("--bank")
    p.add_argument("--model")
    p.add_argument("--alpha", type=_float_list)
    p.add_argument("--l", type=_int_list)
    p.add_argument("--basis", choices=bottleneck.SCORE_BASES)
    p.add_argument("--region-mode", choices=metrics.REGION_MODES, dest="region_mode")
    p.add_argument("--tau", type=float)
    p.add_argument("--rank-key", choices=("absolute", "signed"), dest="rank_key")
    p.add_argument("--signed-rank", action="store_const", const="signed", dest="rank_key")
    p.add_argument("--subset", choices=("entire", "correct", "both"))
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_clm)

    p = sub.add_parser("cgim", help="concept global importance metric")
    p.add_argument("--data")
    p.add_argument("--bank")
    p.add_argument("--model")
    p.add_argument("--type", type=_int_list)
    p.add_argument("--axis", choices=("concept", "class", "both"))
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_cgim)

    p = sub.add_parser("report", help="consolidate metric reports")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--format", choices=("json", "text", "csv"), default="text")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
