"""Command-line orchestration: ingest, preprocess, train, crossval, predict,
histogram, sweep-threshold."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, nn
from .augment import AugmentParams
from .errors import ConfigError, EmptyDataset, LesionPipeError
from .evaluation import (CLASS_NAMES, RunConfig, crossval_run, make_folds,
                         preprocess_stages, render_report, build_report,
                         confusion, metrics, variant_image, write_run_manifest,
                         _tensor, _training_set)
from .imgcore import PipelineConfig, RasterImage, decode_image, encode_png
from .ive import IveParams, compare_histograms
from .segment import SegmentOutput
from .seeding import stream_seed

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")
CLASS_DIRS = {"melanoma": 1, "naevus": 0, "nevus": 0}


# ---------------------------------------------------------------------------
# dataset ingest


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    path: str
    label: int


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    fingerprint: str
    entries: tuple[ManifestEntry, ...]
    skipped: int

    def counts(self) -> dict[str, int]:
        out = {name: 0 for name in set(CLASS_NAMES.values())}
        for e in self.entries:
            out[CLASS_NAMES[e.label]] += 1
        return out


def ingest(root) -> DatasetManifest:
    """Scan class-named subdirectories for images, hashing every file.

    Layout: <root>/melanoma/*.jpg and <root>/naevus/*.jpg (PNG accepted,
    "nevus" accepted as a spelling). Unreadable files are skipped and counted.
    """
    root = Path(root)
    entries: list[ManifestEntry] = []
    skipped = 0
    hasher = hashlib.sha256()
    for dirname in sorted(CLASS_DIRS):
        subdir = root / dirname
        if not subdir.is_dir():
            continue
        label = CLASS_DIRS[dirname]
        for path in sorted(subdir.iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES or not path.is_file():
                continue
            try:
                data = path.read_bytes()
                decode_image(data)
            except (OSError, LesionPipeError):
                skipped += 1
                continue
            digest = hashlib.sha256(data).hexdigest()
            hasher.update(digest.encode())
            entries.append(ManifestEntry(
                sample_id=str(path.relative_to(root)), path=str(path), label=label))
    labels = {e.label for e in entries}
    if 0 not in labels or 1 not in labels:
        raise EmptyDataset(f"need readable images in both classes under {root}")
    return DatasetManifest(root=str(root), fingerprint=hasher.hexdigest(),
                           entries=tuple(entries), skipped=skipped)


def save_manifest(manifest: DatasetManifest, path) -> None:
    payload = {
        "root": manifest.root,
        "fingerprint": manifest.fingerprint,
        "skipped": manifest.skipped,
        "entries": [{"id": e.sample_id, "path": e.path, "label": e.label}
                    for e in manifest.entries],
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_manifest(path) -> DatasetManifest:
    payload = json.loads(Path(path).read_text())
    entries = tuple(ManifestEntry(sample_id=e["id"], path=e["path"], label=int(e["label"]))
                    for e in payload["entries"])
    return DatasetManifest(root=payload["root"], fingerprint=payload["fingerprint"],
                           entries=entries, skipped=int(payload.get("skipped", 0)))


# ---------------------------------------------------------------------------
# flat config

_BOOL_WORDS = {"true": True, "yes": True, "1": True,
               "false": False, "no": False, "0": False}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL_WORDS[text.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {text!r}")


def _parse_choice(*choices):
    def parse(text):
        if text not in choices:
            raise ValueError(f"must be one of {choices}, got {text!r}")
        return text
    return parse


CONFIG_KEYS = {
    "canvas_rows": (int, 256),
    "canvas_cols": (int, 256),
    "gaussian_sigma": (float, 1.35),
    "brightness_factor": (float, 1.2),
    "contrast_factor": (float, 1.2),
    "sharpness_factor": (float, 1.3),
    "rng_seed": (int, 0),
    "opening_radius": (int, 3),
    "invert_mask": (_parse_bool, False),
    "keep_largest": (_parse_bool, True),
    "ive_constant": (float, 255.0),
    "ive_threshold": (float, 127.0),
    "canny_sigma": (float, 1.0),
    "canny_low": (float, 0.1),
    "canny_high": (float, 0.2),
    "augment_multiplier": (int, 10),
    "rotation_max": (float, 30.0),
    "zoom_min": (float, 0.8),
    "zoom_max": (float, 1.2),
    "brightness_jitter": (float, 0.2),
    "contrast_jitter": (float, 0.2),
    "flip_horizontal": (_parse_bool, True),
    "flip_vertical": (_parse_bool, True),
    "augment_stage": (_parse_choice("ive", "sla"), "ive"),
    "variant": (_parse_choice("ive", "canny"), "ive"),
    "folds": (int, 5),
    "epochs": (int, 40),
    "batch_size": (int, 32),
    "learning_rate": (float, 1e-3),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "epsilon": (float, 1e-8),
}


def parse_config_file(path) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment; blank lines ignored."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def resolve_config(file_path=None, overrides=()) -> dict:
    """Merge defaults, an optional config file, and key=value overrides."""
    values = {key: default for key, (_, default) in CONFIG_KEYS.items()}
    pending: dict[str, str] = {}
    if file_path is not None:
        pending.update(parse_config_file(file_path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        pending[key.strip()] = value.strip()
    for key, text in pending.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        parser, _ = CONFIG_KEYS[key]
        try:
            values[key] = parser(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from exc
    return values


def build_run_config(values: dict) -> RunConfig:
    try:
        return RunConfig(
            pipeline=PipelineConfig(
                canvas_rows=values["canvas_rows"],
                canvas_cols=values["canvas_cols"],
                gaussian_sigma=values["gaussian_sigma"],
                brightness_factor=values["brightness_factor"],
                contrast_factor=values["contrast_factor"],
                sharpness_factor=values["sharpness_factor"],
                rng_seed=values["rng_seed"],
            ),
            opening_radius=values["opening_radius"],
            invert_mask=values["invert_mask"],
            keep_largest=values["keep_largest"],
            ive=IveParams(constant=values["ive_constant"],
                          threshold=values["ive_threshold"]),
            canny_sigma=values["canny_sigma"],
            canny_low=values["canny_low"],
            canny_high=values["canny_high"],
            augment=AugmentParams(
                multiplier=values["augment_multiplier"],
                rotation_max=values["rotation_max"],
                zoom_range=(values["zoom_min"], values["zoom_max"]),
                brightness_jitter=values["brightness_jitter"],
                contrast_jitter=values["contrast_jitter"],
                flip_horizontal=values["flip_horizontal"],
                flip_vertical=values["flip_vertical"],
                rng_seed=values["rng_seed"],
            ),
            augment_stage=values["augment_stage"],
            variant=values["variant"],
            folds=values["folds"],
            train=nn.TrainConfig(
                epochs=values["epochs"],
                batch_size=values["batch_size"],
                learning_rate=values["learning_rate"],
                beta1=values["beta1"],
                beta2=values["beta2"],
                epsilon=values["epsilon"],
                rng_seed=values["rng_seed"],
            ),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _run_dir(args, command: str, seed: int) -> Path:
    if getattr(args, "out", None):
        path = Path(args.out)
    else:
        root = Path(os.environ.get("LESIONPIPE_RUNS", "runs"))
        path = root / f"{command}-seed{seed}-{time.strftime('%Y%m%d-%H%M%S')}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest_payload(values: dict, cfg: RunConfig, dataset: DatasetManifest | None,
                      extra: dict) -> dict:
    payload = {
        "version": __version__,
        "config": values,
        "root_seed": cfg.root_seed,
        "seed_streams": {
            name: stream_seed(cfg.root_seed, name)
            for name in ("folds", "init", "shuffle", "augment")
        },
    }
    if dataset is not None:
        payload["dataset_fingerprint"] = dataset.fingerprint
        payload["dataset_root"] = dataset.root
        payload["sample_count"] = len(dataset.entries)
    payload.update(extra)
    return payload


def _samples(manifest: DatasetManifest) -> list[tuple[str, str, int]]:
    return [(e.sample_id, e.path, e.label) for e in manifest.entries]


# ---------------------------------------------------------------------------
# commands


def _cmd_ingest(args) -> int:
    manifest = ingest(args.root)
    save_manifest(manifest, args.out)
    counts = manifest.counts()
    print(f"ingested {len(manifest.entries)} images "
          f"(melanoma={counts['melanoma']}, nevus={counts['nevus']}, "
          f"skipped={manifest.skipped})")
    print(f"fingerprint {manifest.fingerprint}")
    print(f"manifest written to {args.out}")
    return 0


def _stage_images(stages) -> list[tuple[str, RasterImage]]:
    out = []
    for tag, payload in stages:
        if isinstance(payload, RasterImage):
            out.append((tag, payload))
        elif tag == "mask":
            mask, _ = payload
            out.append((tag, RasterImage(mask.data.astype(np.float32) * 255.0)))
        elif tag == "resize":
            gfi_r, mask_r = payload
            out.append(("resize_gfi", gfi_r))
            out.append(("resize_mask",
                        RasterImage(mask_r.data.astype(np.float32) * 255.0)))
        elif tag == "open":
            out.append((tag, RasterImage(payload.data.astype(np.float32) * 255.0)))
        elif isinstance(payload, SegmentOutput):
            out.append((tag, payload.lesion))
    return out


def _cmd_preprocess(args) -> int:
    values = resolve_config(args.config, args.set or [])
    cfg = build_run_config(values)
    img = decode_image(Path(args.image).read_bytes())
    out_dir = _run_dir(args, "preprocess", cfg.root_seed)
    produced = {}
    for variant in ("ive", "canny"):
        stages = preprocess_stages(img, replace(cfg, variant=variant))
        for tag, stage_img in _stage_images(stages):
            if tag in produced:
                continue
            path = out_dir / f"{tag}.png"
            path.write_bytes(encode_png(stage_img))
            produced[tag] = str(path)
    cut = next(payload[1] for tag, payload in stages if tag == "mask")
    write_run_manifest(out_dir, _manifest_payload(values, cfg, None, {
        "command": "preprocess", "image": str(args.image),
        "otsu_threshold": int(cut), "stages": produced,
    }))
    print(f"wrote {len(produced)} stage images to {out_dir}")
    return 0


def _cmd_train(args) -> int:
    values = resolve_config(args.config, args.set or [])
    cfg = build_run_config(values)
    manifest = load_manifest(args.manifest)
    out_dir = _run_dir(args, "train", cfg.root_seed)
    samples = _samples(manifest)
    labels = [label for _, _, label in samples]

    # hold out one stratified fifth for evaluation
    plan = make_folds(labels, k=5, seed=cfg.root_seed)
    test_idx = set(plan.folds[0])
    prepared = []
    for sid, path, label in samples:
        stages = preprocess_stages(decode_image(Path(path).read_bytes()), cfg)
        seg: SegmentOutput = stages[-2][1]
        prepared.append({"id": sid, "label": int(label),
                         "sla": seg.lesion, "variant": stages[-1][1]})
    train_idx = [i for i in range(len(samples)) if i not in test_idx]
    train_data = _training_set(prepared, train_idx, cfg, fold=0)

    spec = nn.default_network_spec(cfg.pipeline.canvas_rows, cfg.pipeline.canvas_cols)
    net = nn.build_network(spec, seed=stream_seed(cfg.root_seed, "init", 0))
    train_cfg = replace(cfg.train, rng_seed=stream_seed(cfg.root_seed, "shuffle", 0))
    net, history = nn.train(net, train_data, train_cfg)

    weights_path = out_dir / "weights.bin"
    weights_path.write_bytes(nn.save_weights(net))
    preds = [nn.predict_class(net, _tensor(prepared[i]["variant"])) for i in sorted(test_idx)]
    cm = confusion(preds, [labels[i] for i in sorted(test_idx)])
    report = build_report([metrics(cm)])
    paths = render_report(report, out_dir, "holdout_metrics")

    history_csv = out_dir / "history.csv"
    lines = ["epoch,loss,accuracy"]
    lines += [f"{i + 1},{h.loss:.6f},{h.accuracy:.6f}" for i, h in enumerate(history)]
    history_csv.write_text("\n".join(lines) + "\n")

    write_run_manifest(out_dir, _manifest_payload(values, cfg, manifest, {
        "command": "train",
        "train_samples": len(train_data),
        "holdout_samples": len(test_idx),
        "weights": str(weights_path),
        "reports": paths,
    }))
    acc = report.average.accuracy
    print(f"trained on {len(train_data)} tensors; "
          f"holdout accuracy {acc:.4f}" if acc is not None else "trained")
    print(f"weights written to {weights_path}")
    return 0


def _cmd_crossval(args) -> int:
    values = resolve_config(args.config, args.set or [])
    cfg = build_run_config(values)
    manifest = load_manifest(args.manifest)
    out_dir = _run_dir(args, "crossval", cfg.root_seed)
    result = crossval_run(_samples(manifest), cfg, progress=print)
    paths = render_report(result.report, out_dir, f"metrics_{cfg.variant}")
    write_run_manifest(out_dir, _manifest_payload(values, cfg, manifest, {
        "command": "crossval",
        "variant": cfg.variant,
        "fold_assignments": [list(f) for f in result.plan.folds],
        "confusions": [{"tp": c.tp, "fn": c.fn, "tn": c.tn, "fp": c.fp}
                       for c in result.confusions],
        "timings": result.timings,
        "reports": paths,
    }))
    avg = result.report.average
    print(f"{cfg.folds}-fold {cfg.variant}: average accuracy "
          f"{avg.accuracy:.4f}" if avg.accuracy is not None else "done")
    print(f"reports in {out_dir}")
    return 0


def _cmd_predict(args) -> int:
    values = resolve_config(args.config, args.set or [])
    cfg = build_run_config(values)
    spec = nn.default_network_spec(cfg.pipeline.canvas_rows, cfg.pipeline.canvas_cols)
    net = nn.load_weights(Path(args.weights).read_bytes(), expected_spec=spec)
    img = decode_image(Path(args.image).read_bytes())
    tensor = _tensor(variant_image(img, cfg))
    probs = nn.predict(net, tensor)
    winner = int(np.argmax(probs))
    print(f"prediction: {CLASS_NAMES[winner]} "
          f"(melanoma={probs[1]:.4f}, nevus={probs[0]:.4f})")
    return 0


def _cmd_histogram(args) -> int:
    values = resolve_config(args.config, args.set or [])
    cfg = build_run_config(values)
    out_dir = _run_dir(args, "histogram", cfg.root_seed)
    from .ive import canny_edges, ive_transform, normalize_0_255, scale_by_constant

    labeled: list[tuple[str, RasterImage]] = []
    for image_path in args.image:
        name = Path(image_path).stem
        img = decode_image(Path(image_path).read_bytes())
        stages = preprocess_stages(img, cfg)
        seg: SegmentOutput = stages[-2][1]
        sla = seg.lesion
        labeled.append((f"{name}:gray", sla))
        labeled.append((f"{name}:edges",
                        canny_edges(sla, cfg.canny_sigma, cfg.canny_low, cfg.canny_high)))
        labeled.append((f"{name}:normalized",
                        normalize_0_255(scale_by_constant(sla, cfg.ive.constant))))
        labeled.append((f"{name}:high-intensity", ive_transform(sla, cfg.ive)))
    report = compare_histograms(labeled)
    paths = render_report(report, out_dir, "histograms")
    write_run_manifest(out_dir, _manifest_payload(values, cfg, None, {
        "command": "histogram", "images": list(args.image), "reports": paths,
    }))
    print(f"histograms for {len(args.image)} image(s) in {out_dir}")
    return 0


def _parse_grid(text: str) -> list[float]:
    try:
        start_s, stop_s, step_s = text.split(":")
        start, stop, step = float(start_s), float(stop_s), float(step_s)
    except ValueError as exc:
        raise ConfigError(f"grid must look like start:stop:step, got {text!r}") from exc
    if step <= 0 or stop < start:
        raise ConfigError("grid needs step > 0 and stop >= start")
    points = []
    value = start
    while value <= stop + 1e-9:
        points.append(round(value, 6))
        value += step
    return points


def _cmd_sweep_threshold(args) -> int:
    values = resolve_config(args.config, args.set or [])
    cfg = build_run_config(values)
    manifest = load_manifest(args.manifest)
    out_dir = _run_dir(args, "sweep", cfg.root_seed)
    grid = _parse_grid(args.grid)
    samples = _samples(manifest)
    rows = []
    for threshold in grid:
        swept = replace(cfg, variant="ive",
                        ive=IveParams(constant=cfg.ive.constant, threshold=threshold))
        result = crossval_run(samples, swept)
        accs = [r.accuracy for r in result.report.rows]
        rows.append((threshold, accs, result.report.average.accuracy))
        print(f"threshold {threshold:g}: average accuracy "
              f"{rows[-1][2]:.4f}" if rows[-1][2] is not None else "n/a")
    k = cfg.folds
    lines = ["Threshold," + ",".join(f"Fold-{i + 1}" for i in range(k)) + ",Average"]
    for threshold, accs, avg in rows:
        cells = [f"{a:.4f}" if a is not None else "" for a in accs]
        cells.append(f"{avg:.4f}" if avg is not None else "")
        lines.append(f"{threshold:g}," + ",".join(cells))
    csv_path = out_dir / "threshold_sweep.csv"
    csv_path.write_text("\n".join(lines) + "\n")
    write_run_manifest(out_dir, _manifest_payload(values, cfg, manifest, {
        "command": "sweep-threshold", "grid": grid, "csv": str(csv_path),
    }))
    print(f"sweep written to {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", help="output directory (default under $LESIONPIPE_RUNS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lesionpipe",
        description="Skin lesion classification pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="scan a dataset directory into a manifest")
    p.add_argument("root", help="dataset root with melanoma/ and naevus/ subdirs")
    p.add_argument("--out", default="manifest.json", help="manifest output path")
    p.set_defaults(fn=_cmd_ingest)

    p = sub.add_parser("preprocess", help="dump every preprocessing stage for one image")
    p.add_argument("--image", required=True)
    _add_config_args(p)
    p.set_defaults(fn=_cmd_preprocess)

    p = sub.add_parser("train", help="train one model on an 80/20 stratified split")
    p.add_argument("--manifest", required=True)
    _add_config_args(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("crossval", help="stratified k-fold cross-validation")
    p.add_argument("--manifest", required=True)
    _add_config_args(p)
    p.set_defaults(fn=_cmd_crossval)

    p = sub.add_parser("predict", help="classify one image with saved weights")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    _add_config_args(p)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("histogram", help="stage histograms for one or more images")
    p.add_argument("--image", required=True, action="append")
    _add_config_args(p)
    p.set_defaults(fn=_cmd_histogram)

    p = sub.add_parser("sweep-threshold", help="cross-validate over a cutoff grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--grid", required=True, metavar="START:STOP:STEP")
    _add_config_args(p)
    p.set_defaults(fn=_cmd_sweep_threshold)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except LesionPipeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
