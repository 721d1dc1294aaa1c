"""
Cloud detection metrics, the detector benchmark and the training-size sweep.

Counts are exact integers and pooled over every evaluated pixel; ratios are taken only at
the end. A ratio whose denominator is zero (a class absent from both prediction and
truth) is 1.0. Per-image metrics and their mean are reported alongside the pooled row.
"""
import csv
import json
import os
from collections import OrderedDict, namedtuple
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from sklearn.metrics import roc_auc_score

from .detect import FineTunedDetector, finetune
from .errors import CloudFuseError, DatasetError, ShapeError
from .util import _getLogger, derive_rng


log = _getLogger("evaluate")

SweepPoint = namedtuple("SweepPoint", ["n_train", "accuracy", "miou"])

REPORT_JSON = "report.json"
REPORT_TABLE = "report.txt"
CURVE_CSV = "curve.csv"

# false positive purple, false negative yellow
ERROR_COLOURS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (255, 0, 255),
    "fn": (255, 255, 0),
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other):
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class Metrics:
    tpr: float
    tnr: float
    miou: float
    accuracy: float
    iou_cloud: float
    iou_clear: float


@dataclass
class DetectorReport:
    name: str
    pooled: Optional[Metrics] = None
    counts: Optional[ConfusionCounts] = None
    per_image: List[Metrics] = field(default_factory=list)
    per_image_mean: Optional[Metrics] = None
    error: Optional[str] = None


@dataclass
class BenchmarkReport:
    rows: List[DetectorReport]
    config_digest: str = ""
    n_images: int = 0

    def row(self, name):
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_dict(self):
        return asdict(self)


def accumulate(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError("Prediction %s and truth %s differ in shape" % (pred.shape, truth.shape))
    pred = pred != 0
    truth = truth != 0
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(pred.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(numerator, denominator):
    return 1.0 if denominator == 0 else numerator / denominator


def metrics(counts):
    iou_cloud = _ratio(counts.tp, counts.tp + counts.fp + counts.fn)
    iou_clear = _ratio(counts.tn, counts.tn + counts.fp + counts.fn)
    return Metrics(
        tpr=_ratio(counts.tp, counts.tp + counts.fn),
        tnr=_ratio(counts.tn, counts.tn + counts.fp),
        miou=(iou_cloud + iou_clear) / 2.0,
        accuracy=_ratio(counts.tp + counts.tn, counts.total),
        iou_cloud=iou_cloud,
        iou_clear=iou_clear,
    )


def mean_metrics(rows):
    if not rows:
        return None
    values = OrderedDict((name, float(np.mean([getattr(r, name) for r in rows])))
                         for name in Metrics.__dataclass_fields__)
    return Metrics(**values)


def quality_auc(qualities, cloud_masks):
    """
    ROC-AUC of (1 - Q) as a cloud score against ground-truth masks.
    """
    scores = 1.0 - np.asarray(qualities, dtype=np.float64).ravel()
    truth = (np.asarray(cloud_masks).ravel() != 0).astype(np.int64)
    if truth.size == 0 or truth.min() == truth.max():
        raise DatasetError("Quality AUC needs both cloudy and clear pixels in the masks")
    return float(roc_auc_score(truth, scores))


def render_error_map(pred, truth):
    """
    RGB uint8 [H, W, 3]: true positives white, true negatives black, false positives
    purple, false negatives yellow.
    """
    pred = np.asarray(pred) != 0
    truth = np.asarray(truth) != 0
    if pred.shape != truth.shape:
        raise ShapeError("Prediction %s and truth %s differ in shape" % (pred.shape, truth.shape))
    out = np.zeros(pred.shape + (3,), dtype=np.uint8)
    out[pred & truth] = ERROR_COLOURS["tp"]
    out[pred & ~truth] = ERROR_COLOURS["fp"]
    out[~pred & truth] = ERROR_COLOURS["fn"]
    return out


def evaluate_detector(detector, stacks, threads=1):
    """
    Run `detector` over every image of every stack and tally against the cloud masks.
    """
    for stack in stacks:
        if stack.cloud_masks is None:
            raise DatasetError("%s has no cloud masks to evaluate against" % stack.location_id)

    def per_stack(stack):
        predicted = detector.predict(stack.images)
        return [accumulate(p, t) for p, t in zip(predicted, stack.cloud_masks)]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        per_image_counts = [c for counts in pool.map(per_stack, stacks) for c in counts]

    pooled = ConfusionCounts()
    for counts in per_image_counts:
        pooled = pooled + counts
    per_image = [metrics(c) for c in per_image_counts]
    return DetectorReport(
        name=getattr(detector, "name", type(detector).__name__),
        pooled=metrics(pooled),
        counts=pooled,
        per_image=per_image,
        per_image_mean=mean_metrics(per_image),
    )


def run_benchmark(stacks, detectors, config_digest="", threads=1):
    """
    Evaluate each detector in `detectors` (name -> zero-argument factory returning a
    detector). A factory that fails, e.g. on a missing checkpoint, yields an error row
    and the remaining detectors still run.
    """
    stacks = stacks.stacks() if hasattr(stacks, "stacks") else list(stacks)
    rows = []
    for name, factory in detectors.items():
        try:
            detector = factory()
            row = evaluate_detector(detector, stacks, threads=threads)
            row.name = name
        except (CloudFuseError, OSError) as exc:
            log.warning("Detector %s failed: %s", name, exc)
            row = DetectorReport(name=name, error=str(exc))
        else:
            log.info("%s: mIoU %.4f accuracy %.4f", name, row.pooled.miou, row.pooled.accuracy)
        rows.append(row)
    n_images = sum(s.k for s in stacks)
    return BenchmarkReport(rows=rows, config_digest=config_digest, n_images=n_images)


def format_table(report):
    header = ("Method", "TPR", "TNR", "mIoU", "Accuracy")
    lines = [header]
    for row in report.rows:
        if row.pooled is None:
            lines.append((row.name, "-", "-", "-", "error: %s" % row.error))
            continue
        m = row.pooled
        lines.append((
            row.name,
            "%.3f" % m.tpr,
            "%.3f" % m.tnr,
            "%.2f%%" % (100 * m.miou),
            "%.2f%%" % (100 * m.accuracy),
        ))
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    out = []
    for line in lines:
        cells = [line[0].ljust(widths[0])]
        cells.extend(cell.rjust(width) for cell, width in zip(line[1:], widths[1:]))
        out.append("  ".join(cells).rstrip())
    return "\n".join(out) + "\n"


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, REPORT_JSON)
    with open(json_path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    table_path = os.path.join(out_dir, REPORT_TABLE)
    with open(table_path, "w") as f:
        f.write(format_table(report))
    return json_path, table_path


def size_sweep(net, train_samples, test_stacks, sizes, config, threads=1):
    """
    For each n in `sizes`, fine-tune on a seeded subset of n training pairs and evaluate
    on `test_stacks`. Returns one SweepPoint per size, in the order given.
    """
    train_samples = list(train_samples)
    test_stacks = list(test_stacks)
    for n in sizes:
        if not 1 <= n <= len(train_samples):
            raise DatasetError(
                "Training size %d is outside the pool of %d images" % (n, len(train_samples))
            )
    points = []
    for n in sizes:
        chosen = np.sort(derive_rng(config.seed, n).choice(len(train_samples), n, replace=False))
        result = finetune(net, [train_samples[i] for i in chosen], config)
        detector = FineTunedDetector(result.net, output_is_cloud=config.output_is_cloud)
        row = evaluate_detector(detector, test_stacks, threads=threads)
        points.append(SweepPoint(n, row.pooled.accuracy, row.pooled.miou))
        log.info("n_train=%d accuracy %.4f mIoU %.4f", n, row.pooled.accuracy, row.pooled.miou)
    return points


def write_curve(path, points):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["n_train", "accuracy", "miou"])
        for point in points:
            writer.writerow([point.n_train, "%.8f" % point.accuracy, "%.8f" % point.miou])
    return path
