"""Loss masking, SC/SSC metrics, and the ablation configuration surface.

Scene completion (SC) treats every non-empty voxel as one class and scores
binary occupancy on the occluded voxels only.  Semantic scene completion
(SSC) scores per-category IoU over the observed (visible-surface) plus
occluded voxels.  Metrics with zero denominators are reported as absent
(None), never silently as zero, and the SSC average runs over categories
present in ground truth or prediction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, EmptyMaskError
from .geometry import VIS_FREE, VIS_OCCLUDED, VIS_VISIBLE, VoxelGrid
from .scenes import CATEGORY_NAMES
from .tensor import Tensor, make_op

ABLATION_LABELS = ("full", "w/o-Attn", "w/o-Seg", "basic", "Seg-GT")


@dataclass
class EvalMask:
    in_sc_eval: np.ndarray   # occluded voxels
    in_ssc_eval: np.ndarray  # visible-surface + occluded voxels
    in_loss: np.ndarray      # training-loss support

    def __post_init__(self):
        if np.any(self.in_sc_eval & ~self.in_ssc_eval):
            raise ContractViolation("in_sc_eval must be a subset of in_ssc_eval")


def build_eval_mask(grid: VoxelGrid, include_free_in_loss: bool = False) -> EvalMask:
    vis = grid.visibility
    sc = vis == VIS_OCCLUDED
    ssc = sc | (vis == VIS_VISIBLE)
    loss = ssc | (vis == VIS_FREE) if include_free_in_loss else ssc
    return EvalMask(in_sc_eval=sc, in_ssc_eval=ssc, in_loss=loss)


def masked_cross_entropy(probs: Tensor, gt_labels: np.ndarray,
                         mask: np.ndarray) -> Tensor:
    """Mean negative log probability of the true label over masked voxels."""
    n_classes = probs.shape[0]
    if probs.shape[1:] != gt_labels.shape or gt_labels.shape != mask.shape:
        raise ContractViolation(
            f"probs {probs.shape}, labels {gt_labels.shape} and mask "
            f"{mask.shape} extents do not agree")
    if gt_labels.max(initial=0) >= n_classes:
        raise ContractViolation("ground-truth label out of range")
    flat_mask = mask.reshape(-1)
    voxels = np.nonzero(flat_mask)[0]
    m = voxels.size
    if m == 0:
        raise EmptyMaskError("cross-entropy over an empty mask")
    labels = gt_labels.reshape(-1)[voxels]
    flat = probs.data.reshape(n_classes, -1)
    picked = flat[labels, voxels]
    out = np.asarray(-np.log(picked).sum() / m)

    def backward(g):
        gp = np.zeros_like(flat)
        gp[labels, voxels] = -float(g.reshape(())) / (m * picked)
        probs.accumulate_grad(gp.reshape(probs.shape))

    return make_op(out, (probs,), backward)


def _iou(tp: int, fp: int, fn: int) -> float | None:
    d = tp + fp + fn
    return tp / d if d else None


@dataclass
class MetricsReport:
    sc_precision: float | None
    sc_recall: float | None
    sc_iou: float | None
    ssc_iou_per_class: dict[int, float | None]
    ssc_avg: float | None
    counts: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "scene_completion": {"prec": self.sc_precision,
                                 "recall": self.sc_recall,
                                 "iou": self.sc_iou},
            "semantic_scene_completion": {
                "per_class": {CATEGORY_NAMES[c]: v
                              for c, v in sorted(self.ssc_iou_per_class.items())},
                "avg": self.ssc_avg,
            },
            "counts": self.counts,
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    def row_text(self, label: str) -> str:
        def fmt(v):
            return f"{100 * v:5.1f}" if v is not None else "    -"
        cells = [fmt(self.sc_precision), fmt(self.sc_recall), fmt(self.sc_iou)]
        n = len(CATEGORY_NAMES) - 1
        cells += [fmt(self.ssc_iou_per_class.get(c)) for c in range(1, n + 1)]
        cells.append(fmt(self.ssc_avg))
        return f"{label:12s} " + " ".join(cells)

    @staticmethod
    def header_text() -> str:
        names = [f"{n:>5s}" for n in CATEGORY_NAMES[1:]]
        return (f"{'method':12s} {'prec.':>5s} {'recall':>5s} {'IoU':>5s} "
                + " ".join(names) + f" {'avg.':>5s}")


def sc_counts(pred_labels: np.ndarray, gt_labels: np.ndarray,
              mask: np.ndarray) -> dict[str, int]:
    if pred_labels.shape != gt_labels.shape or pred_labels.shape != mask.shape:
        raise ContractViolation("scene-completion inputs must share one shape")
    p = pred_labels[mask] > 0
    g = gt_labels[mask] > 0
    return {"tp": int(np.sum(p & g)), "fp": int(np.sum(p & ~g)),
            "fn": int(np.sum(~p & g)), "tn": int(np.sum(~p & ~g))}


def sc_metrics(pred_labels: np.ndarray, gt_labels: np.ndarray,
               mask: np.ndarray) -> tuple[float | None, float | None, float | None]:
    """(precision, recall, IoU) of binary occupancy over the SC mask.
    Undefined ratios (zero denominator) come back as None."""
    c = sc_counts(pred_labels, gt_labels, mask)
    precision = c["tp"] / (c["tp"] + c["fp"]) if c["tp"] + c["fp"] else None
    recall = c["tp"] / (c["tp"] + c["fn"]) if c["tp"] + c["fn"] else None
    return precision, recall, _iou(c["tp"], c["fp"], c["fn"])


def ssc_counts(pred_labels: np.ndarray, gt_labels: np.ndarray,
               mask: np.ndarray, n_categories: int) -> dict[int, dict[str, int]]:
    if pred_labels.shape != gt_labels.shape or pred_labels.shape != mask.shape:
        raise ContractViolation("ssc inputs must share one shape")
    p = pred_labels[mask]
    g = gt_labels[mask]
    out = {}
    for cat in range(1, n_categories + 1):
        pc = p == cat
        gc = g == cat
        out[cat] = {"tp": int(np.sum(pc & gc)), "fp": int(np.sum(pc & ~gc)),
                    "fn": int(np.sum(~pc & gc))}
    return out


def ssc_metrics(pred_labels: np.ndarray, gt_labels: np.ndarray,
                mask: np.ndarray, n_categories: int = len(CATEGORY_NAMES) - 1,
                ) -> tuple[dict[int, float | None], float | None]:
    """Per-category IoU over the SSC mask plus the average over categories
    present in ground truth or prediction."""
    counts = ssc_counts(pred_labels, gt_labels, mask, n_categories)
    per_class = {c: _iou(v["tp"], v["fp"], v["fn"]) for c, v in counts.items()}
    present = [v for v in per_class.values() if v is not None]
    return per_class, (sum(present) / len(present) if present else None)


def metrics_from_counts(sc: dict[str, int],
                        ssc: dict[int, dict[str, int]]) -> MetricsReport:
    precision = sc["tp"] / (sc["tp"] + sc["fp"]) if sc["tp"] + sc["fp"] else None
    recall = sc["tp"] / (sc["tp"] + sc["fn"]) if sc["tp"] + sc["fn"] else None
    per_class = {c: _iou(v["tp"], v["fp"], v["fn"]) for c, v in ssc.items()}
    present = [v for v in per_class.values() if v is not None]
    return MetricsReport(
        sc_precision=precision, sc_recall=recall,
        sc_iou=_iou(sc["tp"], sc["fp"], sc["fn"]),
        ssc_iou_per_class=per_class,
        ssc_avg=sum(present) / len(present) if present else None,
        counts={"sc": sc, "ssc": {str(c): v for c, v in ssc.items()}})


@dataclass
class AblationConfig:
    attention: bool = True
    guidance: bool = True
    guidance_source: str = "predicted"  # or "ground_truth"
    label: str = "full"

    _TABLE = {
        "full": (True, True, "predicted"),
        "w/o-Attn": (False, True, "predicted"),
        "w/o-Seg": (True, False, "predicted"),
        "basic": (False, False, "predicted"),
        "Seg-GT": (True, True, "ground_truth"),
    }

    def __post_init__(self):
        if self.guidance_source not in ("predicted", "ground_truth"):
            raise ContractViolation(
                f"unknown guidance source {self.guidance_source!r}")
        expected = self._TABLE.get(self.label)
        if expected is None:
            raise ContractViolation(f"unknown ablation label {self.label!r}")
        actual = (self.attention, self.guidance,
                  self.guidance_source if self.guidance else "predicted")
        if expected != actual:
            raise ContractViolation(
                f"ablation label {self.label!r} expects "
                f"(attention, guidance, source) = {expected}, got {actual}")

    @classmethod
    def from_label(cls, label: str) -> "AblationConfig":
        if label not in cls._TABLE:
            raise ContractViolation(f"unknown ablation label {label!r}")
        attention, guidance, source = cls._TABLE[label]
        return cls(attention=attention, guidance=guidance,
                   guidance_source=source, label=label)
