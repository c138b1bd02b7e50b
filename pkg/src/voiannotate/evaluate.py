"""Fixation-level annotation by popular vote, tracking QA, and weighted
multi-class metrics with method comparison tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .baseline import Registration, gaze_ray, interpolate_pose, pose_coverage
from .geometry import CameraIntrinsics, VoiError, normalize, visual_angle


@dataclass
class FixationAnnotation:
    fixation_id: int
    class_index: int
    votes: dict  # class index -> count
    confidence: float | None = None  # mean winner probability, learned path only

    @property
    def total_votes(self) -> int:
        return sum(self.votes.values())

    @property
    def winner_votes(self) -> int:
        return self.votes[self.class_index]


def popular_vote(fixation_id: int, predictions, num_classes: int) -> FixationAnnotation:
    """Majority vote over per-frame (or per-scan-point) predictions.

    `predictions` is a list of (class_index, confidence-or-None). Ties break
    by (1) higher summed confidence, (2) non-default class over a default
    class (defaults are the last two indices), (3) lower class index.
    """
    predictions = list(predictions)
    if not predictions:
        raise VoiError(f"fixation {fixation_id} has no contributing predictions")
    votes: dict = {}
    conf_sum: dict = {}
    for cls, conf in predictions:
        if not (0 <= cls < num_classes):
            raise VoiError(f"vote class {cls} outside catalog of {num_classes}")
        votes[cls] = votes.get(cls, 0) + 1
        if conf is not None:
            conf_sum[cls] = conf_sum.get(cls, 0.0) + float(conf)

    best = max(votes.values())
    tied = [c for c, n in votes.items() if n == best]
    if len(tied) > 1 and conf_sum:
        top_conf = max(conf_sum.get(c, 0.0) for c in tied)
        tied = [c for c in tied if conf_sum.get(c, 0.0) == top_conf]
    if len(tied) > 1:
        non_default = [c for c in tied if c < num_classes - 2]
        if non_default:
            tied = non_default
    winner = min(tied)

    confs = [conf for cls, conf in predictions if cls == winner and conf is not None]
    return FixationAnnotation(
        fixation_id=fixation_id,
        class_index=winner,
        votes=votes,
        confidence=(sum(confs) / len(confs)) if confs else None,
    )


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows ground truth, columns prediction
    class_names: tuple

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        n = len(self.class_names)
        if c.shape != (n, n):
            raise VoiError(f"confusion matrix shape {c.shape} does not match {n} classes")
        if (c < 0).any():
            raise VoiError("confusion counts must be non-negative")
        self.counts = c

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(truth, predicted, class_names) -> ConfusionMatrix:
    """Count matrix from two annotation streams with identical fixation ids."""
    t_map = {a.fixation_id: a.class_index for a in truth}
    p_map = {a.fixation_id: a.class_index for a in predicted}
    if set(t_map) != set(p_map):
        missing = set(t_map) ^ set(p_map)
        raise VoiError(f"fixation id sets differ (e.g. {sorted(missing)[:5]})")
    n = len(class_names)
    counts = np.zeros((n, n), dtype=np.int64)
    for fid, t_cls in t_map.items():
        counts[t_cls, p_map[fid]] += 1
    return ConfusionMatrix(counts=counts, class_names=tuple(class_names))


@dataclass
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    weighted_precision: float
    weighted_recall: float  # equals accuracy exactly
    weighted_f1: float
    per_class: list

    @property
    def accuracy(self) -> float:
        return self.weighted_recall


def weighted_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Support-weighted precision / recall / F1.

    Per class: precision = TP/(TP+FP), recall = TP/(TP+FN), F1 their harmonic
    mean; each is 0 where undefined. Weights are ground-truth supports, so the
    weighted recall is exactly trace/total, i.e. the accuracy.
    """
    c = cm.counts
    total = cm.total
    if total == 0:
        raise VoiError("empty confusion matrix")
    per_class = []
    weighted_p = weighted_r = weighted_f = 0.0
    for i, name in enumerate(cm.class_names):
        tp = float(c[i, i])
        support = int(c[i, :].sum())
        col = float(c[:, i].sum())
        precision = tp / col if col > 0 else 0.0
        recall = tp / support if support > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
        per_class.append(ClassMetrics(name, precision, recall, f1, support))
        w = support / total
        weighted_p += w * precision
        weighted_f += w * f1
    weighted_r = float(np.trace(c)) / total  # == support-weighted mean recall
    return MetricsReport(
        weighted_precision=weighted_p,
        weighted_recall=weighted_r,
        weighted_f1=weighted_f,
        per_class=per_class,
    )


# ---------------------------------------------------------------------------
# tracking-quality QA


@dataclass
class ParticipantQA:
    name: str
    n_revisits: int
    mean_offset_deg: float
    dispersion_deg: float  # sample standard deviation of offsets
    max_offset_deg: float
    passed: bool
    pose_coverage: float


@dataclass
class QAReport:
    threshold_deg: float
    target_visual_angle_deg: float
    entries: list
    excluded: list = field(default_factory=list)  # participants failing the threshold


def qa_target_check(
    participants,
    target_center,
    target_diameter_m,
    k: CameraIntrinsics,
    reg: Registration = None,
    threshold_deg: float = 1.5,
    window_ms: float = 100.0,
) -> QAReport:
    """Angular offset between each revisit fixation's gaze ray and the ray to
    a physical target; a participant passes when every revisit stays inside
    the threshold cone.

    `participants` maps name -> (fixation events, pose samples); revisit
    fixations are the events flagged `revisit`, measured at their mid-time
    with their centroid pixel.
    """
    reg = reg or Registration()
    target = np.asarray(target_center, dtype=np.float64)
    entries = []
    excluded = []
    mean_distance_acc = []
    for name in sorted(participants):
        events, poses = participants[name]
        revisits = [ev for ev in events if ev.revisit]
        if not revisits:
            raise VoiError(f"participant {name} has no flagged revisit fixations")
        offsets = []
        for ev in revisits:
            t_mid = 0.5 * (ev.start_ms + ev.end_ms)
            pose = interpolate_pose(poses, t_mid, window_ms)
            if pose is None:
                continue
            ray = gaze_ray(pose, reg, (ev.cx_px, ev.cy_px), k)
            to_target = target - ray.origin
            dist = np.linalg.norm(to_target)
            if dist <= 0:
                continue
            cosang = float(np.clip(ray.direction @ normalize(to_target), -1.0, 1.0))
            offsets.append(math.degrees(math.acos(cosang)))
            mean_distance_acc.append(dist)
        if not offsets:
            raise VoiError(f"participant {name}: no revisit fixation had pose coverage")
        mean_off = sum(offsets) / len(offsets)
        disp = math.sqrt(sum((o - mean_off) ** 2 for o in offsets) / (len(offsets) - 1)) if len(offsets) > 1 else 0.0
        passed = max(offsets) <= threshold_deg
        entries.append(
            ParticipantQA(
                name=name,
                n_revisits=len(offsets),
                mean_offset_deg=mean_off,
                dispersion_deg=disp,
                max_offset_deg=max(offsets),
                passed=passed,
                pose_coverage=pose_coverage(events, poses, window_ms),
            )
        )
        if not passed:
            excluded.append(name)
    mean_dist = float(np.mean(mean_distance_acc)) if mean_distance_acc else 1.0
    return QAReport(
        threshold_deg=threshold_deg,
        target_visual_angle_deg=visual_angle(target_diameter_m, mean_dist),
        entries=entries,
        excluded=excluded,
    )


# ---------------------------------------------------------------------------
# method comparison


@dataclass
class ComparisonEntry:
    method: str
    setting: str
    report: MetricsReport


METRIC_GETTERS = (
    ("precision", lambda r: r.weighted_precision),
    ("recall", lambda r: r.weighted_recall),
    ("f1", lambda r: r.weighted_f1),
)


def compare_reports(entries) -> "ComparisonTable":
    """Side-by-side weighted metrics for several methods; per-setting,
    per-metric unique maxima get flagged."""
    entries = [e if isinstance(e, ComparisonEntry) else ComparisonEntry(*e) for e in entries]
    if len(entries) < 2:
        raise VoiError("comparison needs at least two reports")
    return ComparisonTable(entries)


class ComparisonTable:
    def __init__(self, entries):
        self.entries = entries
        self.settings = []
        for e in entries:
            if e.setting not in self.settings:
                self.settings.append(e.setting)

    def flags(self):
        """(method, setting, metric) triples holding a unique column maximum."""
        out = set()
        for setting in self.settings:
            group = [e for e in self.entries if e.setting == setting]
            for metric, getter in METRIC_GETTERS:
                values = [getter(e.report) for e in group]
                top = max(values)
                if sum(1 for v in values if v == top) == 1:
                    winner = group[values.index(top)]
                    out.add((winner.method, setting, metric))
        return out

    def csv_rows(self):
        rows = ["method,setting,precision,recall,f1"]
        for e in self.entries:
            rows.append(
                f"{e.method},{e.setting},"
                f"{e.report.weighted_precision:.6f},{e.report.weighted_recall:.6f},{e.report.weighted_f1:.6f}"
            )
        return rows

    def text(self) -> str:
        flags = self.flags()
        name_w = max(len(e.method) for e in self.entries) + 2
        lines = []
        for setting in self.settings:
            lines.append(f"== {setting} ==")
            header = f"{'method':<{name_w}}" + "".join(f"{m:>12}" for m, _ in METRIC_GETTERS)
            lines.append(header)
            for e in self.entries:
                if e.setting != setting:
                    continue
                cells = []
                for metric, getter in METRIC_GETTERS:
                    mark = "*" if (e.method, setting, metric) in flags else " "
                    cells.append(f"{getter(e.report):>11.3f}{mark}")
                lines.append(f"{e.method:<{name_w}}" + "".join(cells))
            lines.append("")
        lines.append("* column best (unique)")
        return "\n".join(lines)


def format_metrics_report(report: MetricsReport) -> str:
    lines = ["class,precision,recall,f1,support"]
    for c in report.per_class:
        lines.append(f"{c.name},{c.precision:.6f},{c.recall:.6f},{c.f1:.6f},{c.support}")
    lines.append(
        f"weighted,{report.weighted_precision:.6f},{report.weighted_recall:.6f},{report.weighted_f1:.6f},"
        f"{sum(c.support for c in report.per_class)}"
    )
    return "\n".join(lines) + "\n"


def parse_metrics_report(text: str) -> MetricsReport:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != "class,precision,recall,f1,support":
        raise VoiError("not a metrics report")
    per_class = []
    weighted = None
    for ln in lines[1:]:
        name, p, r, f1, support = ln.rsplit(",", 4)
        if name == "weighted":
            weighted = (float(p), float(r), float(f1))
        else:
            per_class.append(ClassMetrics(name, float(p), float(r), float(f1), int(support)))
    if weighted is None:
        raise VoiError("metrics report missing weighted row")
    return MetricsReport(
        weighted_precision=weighted[0],
        weighted_recall=weighted[1],
        weighted_f1=weighted[2],
        per_class=per_class,
    )
