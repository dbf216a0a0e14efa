"""Cross-validation harness: folds, metrics, the per-image pipeline, reports."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .augment import AugmentParams, augment_sample
from .errors import (DegenerateImage, IoError, LengthMismatch, LesionPipeError,
                     TooFewSamples)
from .imgcore import (PipelineConfig, RasterImage, adjust_brightness,
                      adjust_contrast, adjust_sharpness, decode_image,
                      downscale_fit, gaussian_filter, pad_center_resize,
                      rgb_to_gray)
from .ive import HistogramReport, IveParams, canny_edges, ive_transform
from .seeding import stream_seed
from .segment import (BinaryMask, SegmentOutput, apply_mask, binarize,
                      binary_opening, largest_component, otsu_threshold)

CLASS_NAMES = {0: "nevus", 1: "melanoma"}

# The per-image chain must pass through these stages in this order; the final
# stage is whichever variant the run is configured for.
STAGE_ORDER = ("decode", "enhance", "gray", "filter", "mask",
               "resize", "open", "sla")
VARIANT_STAGES = ("ive", "canny")


@dataclass(frozen=True)
class RunConfig:
    """Everything a full run needs; the root seed lives in pipeline.rng_seed."""

    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    opening_radius: int = 3
    invert_mask: bool = False
    keep_largest: bool = True
    ive: IveParams = field(default_factory=IveParams)
    canny_sigma: float = 1.0
    canny_low: float = 0.1
    canny_high: float = 0.2
    augment: AugmentParams = field(default_factory=AugmentParams)
    augment_stage: str = "ive"  # augment variant outputs, or "sla" inputs
    variant: str = "ive"        # ive | canny
    folds: int = 5
    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)

    def __post_init__(self):
        if self.variant not in VARIANT_STAGES:
            raise ValueError(f"variant must be one of {VARIANT_STAGES}")
        if self.augment_stage not in ("ive", "sla"):
            raise ValueError("augment_stage must be 'ive' or 'sla'")
        if self.opening_radius < 1:
            raise ValueError("opening_radius must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")

    @property
    def root_seed(self) -> int:
        return self.pipeline.rng_seed


# ---------------------------------------------------------------------------
# per-image pipeline


def preprocess_stages(img: RasterImage, cfg: RunConfig) -> list[tuple[str, object]]:
    """Run the full per-image chain, returning (tag, payload) pairs in order.

    Payloads: RasterImage for image stages, (BinaryMask, threshold) for
    "mask", (RasterImage, BinaryMask) for "resize", BinaryMask for "open",
    SegmentOutput for "sla", RasterImage for the final variant stage.
    """
    pc = cfg.pipeline
    stages: list[tuple[str, object]] = [("decode", img)]

    enhanced = adjust_brightness(img, pc.brightness_factor)
    enhanced = adjust_sharpness(enhanced, pc.sharpness_factor)
    enhanced = adjust_contrast(enhanced, pc.contrast_factor)
    stages.append(("enhance", enhanced))

    gray = rgb_to_gray(enhanced) if enhanced.channels == 3 else enhanced
    stages.append(("gray", gray))

    gfi = gaussian_filter(gray, pc.gaussian_sigma)
    stages.append(("filter", gfi))

    cut = otsu_threshold(gfi)
    mask = binarize(gfi, cut, invert=cfg.invert_mask)
    stages.append(("mask", (mask, cut)))

    fit = min(pc.canvas_rows, pc.canvas_cols)
    gfi_r = pad_center_resize(downscale_fit(gfi, fit), pc.canvas_rows, pc.canvas_cols)
    mask_r = _resize_mask(mask, fit, pc.canvas_rows, pc.canvas_cols)
    stages.append(("resize", (gfi_r, mask_r)))

    opened = binary_opening(mask_r, cfg.opening_radius)
    if cfg.keep_largest:
        opened = largest_component(opened)
    if opened.foreground_count() == 0:
        # A tiny lesion can vanish under the opening; fall back to the raw mask.
        opened = mask_r
    stages.append(("open", opened))

    sla = apply_mask(gfi_r, opened)
    stages.append(("sla", SegmentOutput(mask=opened, lesion=sla, otsu_threshold=cut)))

    if cfg.variant == "ive":
        stages.append(("ive", ive_transform(sla, cfg.ive)))
    else:
        stages.append(("canny", canny_edges(sla, cfg.canny_sigma,
                                            cfg.canny_low, cfg.canny_high)))
    return stages


def _resize_mask(mask: BinaryMask, fit: int, n_rows: int, n_cols: int) -> BinaryMask:
    # Masks ride through the float resize and re-binarize at 0.5; the centered
    # zero-pad preserves {0, 1} exactly on its own.
    as_image = RasterImage(mask.data.astype(np.float32))
    small = downscale_fit(as_image, fit)
    rebinarized = BinaryMask((small.pixels >= 0.5).astype(np.uint8))
    padded = pad_center_resize(RasterImage(rebinarized.data.astype(np.float32)),
                               n_rows, n_cols)
    return BinaryMask(padded.pixels.astype(np.uint8))


def assert_stage_order(stages: Sequence[tuple[str, object]]) -> None:
    """Raise if the chain skipped or reordered a stage."""
    tags = [tag for tag, _ in stages]
    if tuple(tags[:-1]) != STAGE_ORDER or tags[-1] not in VARIANT_STAGES:
        raise LesionPipeError(f"stage order violated: {tags}")


def variant_image(img: RasterImage, cfg: RunConfig) -> RasterImage:
    """Convenience: the final variant-stage output of the chain."""
    stages = preprocess_stages(img, cfg)
    assert_stage_order(stages)
    return stages[-1][1]


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple[tuple[int, ...], ...]
    seed: int


def make_folds(labels: Sequence[int], k: int = 5, seed: int = 0) -> FoldPlan:
    """Stratified k-fold split: fold sizes within 1 of each other, each class
    spread within 1 sample of even across folds. Deterministic in `seed`."""
    y = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be >= 2")
    classes, counts = np.unique(y, return_counts=True)
    if counts.min() < k:
        raise TooFewSamples(
            f"every class needs at least {k} samples, smallest has {counts.min()}")
    total = len(y)
    slack = np.array([total // k + (1 if i < total % k else 0) for i in range(k)])
    from .seeding import stream_rng

    rng = stream_rng(seed, "folds")
    folds: list[list[int]] = [[] for _ in range(k)]
    for c in classes:
        idx = np.where(y == c)[0]
        rng.shuffle(idx)
        base, extra = divmod(len(idx), k)
        slack -= base
        # extras land on the folds with the most room, lowest index on ties
        order = sorted(range(k), key=lambda i: (-slack[i], i))
        bonus = set(order[:extra])
        taken = 0
        for i in range(k):
            n = base + (1 if i in bonus else 0)
            folds[i].extend(int(j) for j in idx[taken:taken + n])
            taken += n
            if i in bonus:
                slack[i] -= 1
    return FoldPlan(k=k, folds=tuple(tuple(sorted(f)) for f in folds), seed=seed)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    tn: int
    fp: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.tn, self.fp) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> ConfusionMatrix:
    """Count outcomes with melanoma (label 1) as the positive class."""
    preds = np.asarray(predictions)
    y = np.asarray(labels)
    if preds.shape != y.shape:
        raise LengthMismatch(
            f"{preds.shape[0] if preds.ndim else 0} predictions vs {y.shape} labels")
    if not np.isin(preds, (0, 1)).all() or not np.isin(y, (0, 1)).all():
        raise ValueError("predictions and labels must be 0 or 1")
    tp = int(np.sum((preds == 1) & (y == 1)))
    fn = int(np.sum((preds == 0) & (y == 1)))
    tn = int(np.sum((preds == 0) & (y == 0)))
    fp = int(np.sum((preds == 1) & (y == 0)))
    return ConfusionMatrix(tp=tp, fn=fn, tn=tn, fp=fp)


@dataclass(frozen=True)
class MetricsRow:
    """Fractions in [0, 1]; a metric whose denominator was 0 is None (absent)."""

    sensitivity: float | None
    specificity: float | None
    ppv: float | None
    npv: float | None
    accuracy: float | None

    def as_dict(self) -> dict[str, float | None]:
        return {"sensitivity": self.sensitivity, "specificity": self.specificity,
                "ppv": self.ppv, "npv": self.npv, "accuracy": self.accuracy}


METRIC_LABELS = {"sensitivity": "Sensitivity", "specificity": "Specificity",
                 "ppv": "PPV", "npv": "NPV", "accuracy": "Accuracy"}


def metrics(cm: ConfusionMatrix) -> MetricsRow:
    def ratio(num: int, den: int) -> float | None:
        return num / den if den > 0 else None

    return MetricsRow(
        sensitivity=ratio(cm.tp, cm.tp + cm.fn),
        specificity=ratio(cm.tn, cm.tn + cm.fp),
        ppv=ratio(cm.tp, cm.tp + cm.fp),
        npv=ratio(cm.tn, cm.tn + cm.fn),
        accuracy=ratio(cm.tp + cm.tn, cm.total),
    )


@dataclass(frozen=True)
class MetricsReport:
    rows: tuple[MetricsRow, ...]
    average: MetricsRow


def average_rows(rows: Sequence[MetricsRow]) -> MetricsRow:
    """Arithmetic mean per metric over the folds where it was defined."""
    values = {}
    for name in METRIC_LABELS:
        defined = [getattr(r, name) for r in rows if getattr(r, name) is not None]
        values[name] = float(np.mean(defined)) if defined else None
    return MetricsRow(**values)


def build_report(rows: Sequence[MetricsRow]) -> MetricsReport:
    return MetricsReport(rows=tuple(rows), average=average_rows(rows))


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(eq=False)
class CrossvalResult:
    report: MetricsReport
    plan: FoldPlan
    confusions: tuple[ConfusionMatrix, ...]
    histories: tuple[tuple[nn.EpochStats, ...], ...]
    timings: dict[str, float]


def _load_sample(source) -> RasterImage:
    if isinstance(source, RasterImage):
        return source
    return decode_image(Path(source).read_bytes())


def _tensor(img: RasterImage) -> np.ndarray:
    # Network inputs are scaled to [0, 1].
    return (img.pixels[:, :, None] / 255.0).astype(np.float32)


def _training_set(prepared, train_idx, cfg: RunConfig, fold: int
                  ) -> list[tuple[np.ndarray, int]]:
    aug_params = replace(cfg.augment,
                         rng_seed=stream_seed(cfg.root_seed, "augment", fold))
    data: list[tuple[np.ndarray, int]] = []
    for i in train_idx:
        sample = prepared[i]
        data.append((_tensor(sample["variant"]), sample["label"]))
        if aug_params.multiplier == 0:
            continue
        if cfg.augment_stage == "ive":
            copies = augment_sample(sample["variant"], aug_params, stream_id=i)
        else:
            copies = [_variant_of(c, cfg)
                      for c in augment_sample(sample["sla"], aug_params, stream_id=i)]
        data.extend((_tensor(c), sample["label"]) for c in copies)
    return data


def _variant_of(sla: RasterImage, cfg: RunConfig) -> RasterImage:
    if cfg.variant == "ive":
        return ive_transform(sla, cfg.ive)
    return canny_edges(sla, cfg.canny_sigma, cfg.canny_low, cfg.canny_high)


def crossval_run(samples: Sequence[tuple[str, object, int]], cfg: RunConfig,
                 progress=None) -> CrossvalResult:
    """Stratified k-fold cross-validation of the full pipeline.

    `samples` holds (sample_id, image-or-path, label) triples. Each fold
    trains a freshly initialized network on the augmented training split and
    evaluates on the untouched held-out split.
    """
    say = progress or (lambda msg: None)
    t0 = time.monotonic()
    labels = [label for _, _, label in samples]
    ids = [sid for sid, _, _ in samples]

    prepared = []
    for sid, source, label in samples:
        stages = preprocess_stages(_load_sample(source), cfg)
        assert_stage_order(stages)
        seg: SegmentOutput = stages[-2][1]
        prepared.append({"id": sid, "label": int(label),
                         "sla": seg.lesion, "variant": stages[-1][1]})
    prep_seconds = time.monotonic() - t0
    say(f"preprocessed {len(prepared)} samples in {prep_seconds:.1f}s")

    plan = make_folds(labels, k=cfg.folds, seed=cfg.root_seed)
    rows: list[MetricsRow] = []
    cms: list[ConfusionMatrix] = []
    histories = []
    spec = nn.default_network_spec(cfg.pipeline.canvas_rows, cfg.pipeline.canvas_cols)
    train_seconds = 0.0
    for fold, test_idx in enumerate(plan.folds):
        test_set = set(test_idx)
        train_idx = [i for i in range(len(samples)) if i not in test_set]
        train_data = _training_set(prepared, train_idx, cfg, fold)
        # leakage guard: every training tensor must trace to a training sample
        train_sources = {ids[i] for i in train_idx}
        assert train_sources.isdisjoint({ids[i] for i in test_idx}), \
            "augmented training data leaked into the test fold"

        t1 = time.monotonic()
        net = nn.build_network(spec, seed=stream_seed(cfg.root_seed, "init", fold))
        train_cfg = replace(cfg.train,
                            rng_seed=stream_seed(cfg.root_seed, "shuffle", fold))
        net, history = nn.train(net, train_data, train_cfg)
        train_seconds += time.monotonic() - t1

        preds = [nn.predict_class(net, _tensor(prepared[i]["variant"]))
                 for i in test_idx]
        cm = confusion(preds, [labels[i] for i in test_idx])
        cms.append(cm)
        rows.append(metrics(cm))
        histories.append(tuple(history))
        acc = rows[-1].accuracy
        say(f"fold {fold + 1}/{cfg.folds}: accuracy "
            f"{acc:.3f}" if acc is not None else f"fold {fold + 1}: done")

    report = build_report(rows)
    timings = {"preprocess_s": round(prep_seconds, 3),
               "train_s": round(train_seconds, 3),
               "total_s": round(time.monotonic() - t0, 3)}
    return CrossvalResult(report=report, plan=plan, confusions=tuple(cms),
                          histories=tuple(histories), timings=timings)


# ---------------------------------------------------------------------------
# rendering


def _format_cell(value: float | None) -> str:
    return "" if value is None else f"{value:.4f}"


def render_metrics_csv(report: MetricsReport) -> str:
    k = len(report.rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Metric"] + [f"Fold-{i + 1}" for i in range(k)] + ["Average"])
    for name, label in METRIC_LABELS.items():
        cells = [_format_cell(getattr(r, name)) for r in report.rows]
        cells.append(_format_cell(getattr(report.average, name)))
        writer.writerow([label] + cells)
    return buf.getvalue()


def _savefig(fig, path: Path) -> None:
    import matplotlib

    matplotlib.rcParams["svg.hashsalt"] = "lesionpipe"
    fig.savefig(path, format="svg", metadata={"Date": None})


def render_metrics_figure(report: MetricsReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(METRIC_LABELS)
    k = len(report.rows)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    width = 0.8 / (k + 1)
    xs = np.arange(len(names))
    for i, row in enumerate(report.rows):
        vals = [getattr(row, n) if getattr(row, n) is not None else 0.0 for n in names]
        ax.bar(xs + i * width, vals, width, label=f"Fold {i + 1}")
    avg = [getattr(report.average, n) if getattr(report.average, n) is not None else 0.0
           for n in names]
    ax.bar(xs + k * width, avg, width, label="Average", color="black")
    ax.set_xticks(xs + width * k / 2)
    ax.set_xticklabels([METRIC_LABELS[n] for n in names])
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.set_ylabel("fraction")
    fig.tight_layout()
    _savefig(fig, Path(path))
    plt.close(fig)


def render_histogram_csv(report: HistogramReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label", "bin", "count"])
    for label, counts in report.entries:
        for b, count in enumerate(counts):
            writer.writerow([label, b, int(count)])
    return buf.getvalue()


def render_histogram_figure(report: HistogramReport, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(report.entries)
    cols = min(2, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(5 * cols, 3 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (label, counts) in zip(axes.ravel(), report.entries):
        ax.axis("on")
        ax.bar(np.arange(256), counts, width=1.0)
        ax.set_title(label, fontsize=9)
        ax.set_xlim(0, 255)
    fig.tight_layout()
    _savefig(fig, Path(path))
    plt.close(fig)


def render_report(report, out_dir, basename: str) -> dict[str, str]:
    """Write a report's CSV and SVG into out_dir; returns the paths written."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{basename}.csv"
        svg_path = out / f"{basename}.svg"
        if isinstance(report, MetricsReport):
            csv_path.write_text(render_metrics_csv(report))
            render_metrics_figure(report, svg_path)
        elif isinstance(report, HistogramReport):
            csv_path.write_text(render_histogram_csv(report))
            render_histogram_figure(report, svg_path)
        else:
            raise TypeError(f"cannot render {type(report).__name__}")
    except OSError as exc:
        raise IoError(f"could not write report under {out}: {exc}") from exc
    return {"csv": str(csv_path), "svg": str(svg_path)}


def write_run_manifest(out_dir, payload: dict) -> str:
    path = Path(out_dir) / "run_manifest.json"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"could not write run manifest: {exc}") from exc
    return str(path)
