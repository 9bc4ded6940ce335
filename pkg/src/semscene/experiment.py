"""End-to-end training and evaluation harness.

Training follows the two-step schedule: the 2D segmentation network is
pre-trained on per-pixel cross-entropy against the 2D ground truth, then the
whole pipeline trains end-to-end on masked voxel cross-entropy, with the 2D
parameters at learning rate 0.001 and the 3D parameters at 0.01 (momentum
0.9, weight decay 5e-4, one scene per step).

Ablations reuse one pipeline class: attention off removes the attention
parameters and computations entirely; guidance off removes the guidance
branch and turns the fusion into a plain softmax; the ground-truth guidance
source feeds the projected 2D ground-truth labels into the guidance branch
at inference time.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, is_dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ContractViolation, NumericalFailure
from .evaluate import (AblationConfig, MetricsReport, build_eval_mask,
                       masked_cross_entropy, metrics_from_counts, sc_counts,
                       ssc_counts)
from .geometry import (ProjectionMap, compute_projection_map, hha_encode,
                       project_2d_to_3d, scatter_labels)
from .net2d import Seg2dConfig, Seg2dOutput, build_seg2d_params, seg2d_forward
from .net3d import (Net3dConfig, build_completion_params,
                    build_guidance_params, completion_forward,
                    fuse_and_classify, guidance_forward, one_hot_roi_encode)
from .optim import MomentumSgd
from .scenes import NUM_CATEGORIES, SceneConfig, SceneSample
from .tensor import Tensor, no_grad, softmax_channel


@dataclass
class TrainingSchedule:
    pretrain_steps: int = 150
    e2e_steps: int = 500
    pretrain_lr: float = 0.015   # the pre-training rate is free configuration
    lr_2d: float = 0.001         # end-to-end rates per the training recipe
    lr_3d: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class RunConfig:
    seed: int
    n_scenes: int = 40
    test_fraction: float = 0.2
    include_free_in_loss: bool = False
    scene: SceneConfig = field(default_factory=lambda: SceneConfig(
        grid_dims=(16, 12, 16), voxel_size=0.3))
    net2d: Seg2dConfig = field(default_factory=Seg2dConfig)
    net3d: Net3dConfig = field(default_factory=Net3dConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)

    def __post_init__(self):
        if self.seed is None:
            raise ContractViolation("run config requires a seed")
        if self.net2d.num_categories != NUM_CATEGORIES or \
                self.net3d.num_categories != NUM_CATEGORIES:
            raise ContractViolation(
                f"both networks must use the scene palette's "
                f"{NUM_CATEGORIES} categories")


def _to_plain(value):
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: _to_plain(getattr(value, f.name))
                for f in fields(value)}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_plain(cfg)


_NESTED = {"scene": SceneConfig, "net2d": Seg2dConfig, "net3d": Net3dConfig,
           "ablation": AblationConfig, "schedule": TrainingSchedule}


def _coerce_tuples(cls, data: dict) -> dict:
    out = dict(data)
    for f in fields(cls):
        if f.name in out and isinstance(out[f.name], list):
            out[f.name] = tuple(tuple(v) if isinstance(v, list) else v
                                for v in out[f.name])
    return out


def config_from_dict(data: dict) -> RunConfig:
    kwargs = dict(data)
    for name, cls in _NESTED.items():
        if name in kwargs and isinstance(kwargs[name], dict):
            kwargs[name] = cls(**_coerce_tuples(cls, kwargs[name]))
    kwargs = _coerce_tuples(RunConfig, kwargs)
    if "seed" not in kwargs:
        raise ContractViolation("run config requires a seed")
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ContractViolation(f"invalid run config: {exc}") from exc


def apply_override(data: dict, dotted_key: str, raw_value: str) -> None:
    """Set a dotted path like ``schedule.e2e_steps`` in a config dict,
    coercing the string to the type of the value it replaces."""
    import json as _json
    node = data
    parts = dotted_key.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ContractViolation(f"unknown config section {part!r} in "
                                    f"{dotted_key!r}")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node:
        raise ContractViolation(f"unknown config key {dotted_key!r}")
    try:
        value = _json.loads(raw_value)
    except ValueError:
        value = raw_value
    node[leaf] = value


@dataclass
class PreparedScene:
    """A scene plus everything precomputed once per sample: the HHA channels,
    the pixel-to-voxel projection map, the evaluation masks, and the
    projected ground-truth semantic volume."""
    sample: SceneSample
    rgb: Tensor
    hha: Tensor
    pmap: ProjectionMap
    in_sc_eval: np.ndarray
    in_ssc_eval: np.ndarray
    in_loss: np.ndarray
    gt_semantic_volume: np.ndarray

    @property
    def scene_id(self) -> str:
        return self.sample.scene_id


def prepare_scene(sample: SceneSample, scene_cfg: SceneConfig,
                  include_free_in_loss: bool = False) -> PreparedScene:
    hha = hha_encode(sample.depth, sample.camera, scene_cfg.hha_config())
    pmap = compute_projection_map(sample.depth, sample.camera, sample.grid_gt)
    mask = build_eval_mask(sample.grid_gt, include_free_in_loss)
    gt_vol = scatter_labels(sample.seg2d_gt, pmap)
    return PreparedScene(sample=sample, rgb=Tensor(sample.rgb),
                         hha=Tensor(hha.channels), pmap=pmap,
                         in_sc_eval=mask.in_sc_eval,
                         in_ssc_eval=mask.in_ssc_eval,
                         in_loss=mask.in_loss,
                         gt_semantic_volume=gt_vol)


@dataclass
class PipelineOutput:
    seg2d: Seg2dOutput
    probs: Tensor                 # [N+1, Dx, Dy, Dz]
    pred_labels: np.ndarray       # argmax over probs


class ScenePipeline:
    """The full model: 2D segmentation, projection, and the 3D network,
    with parameters and wiring driven by one ablation configuration."""

    def __init__(self, net2d_cfg: Seg2dConfig, net3d_cfg: Net3dConfig,
                 ablation: AblationConfig, seed: int):
        if net2d_cfg.feature_channels != net3d_cfg.feature_in:
            raise ContractViolation(
                f"2D feature width {net2d_cfg.feature_channels} must match "
                f"the 3D input width {net3d_cfg.feature_in}")
        self.net2d_cfg = net2d_cfg
        self.net3d_cfg = net3d_cfg
        self.ablation = ablation
        rng = np.random.default_rng(np.random.PCG64(seed))
        self.params2d = build_seg2d_params(net2d_cfg, rng)
        self.params3d = build_completion_params(net3d_cfg, rng,
                                                attention=ablation.attention)
        if ablation.guidance:
            build_guidance_params(net3d_cfg, rng, self.params3d)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"net2d/{k}": v for k, v in self.params2d.items()}
        out.update({f"net3d/{k}": v for k, v in self.params3d.items()})
        return out

    def clear_grads(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def forward_2d(self, prep: PreparedScene) -> Seg2dOutput:
        return seg2d_forward(prep.rgb, prep.hha, self.params2d, self.net2d_cfg)

    def forward(self, prep: PreparedScene,
                guidance_source: str | None = None) -> PipelineOutput:
        """Full pipeline on one prepared scene.  ``guidance_source`` defaults
        to the ablation's source; training always passes "predicted"."""
        seg_out = self.forward_2d(prep)
        feature_volume, predicted_volume = project_2d_to_3d(
            seg_out.features, seg_out.seg_map, prep.pmap)
        guidance = None
        if self.ablation.guidance:
            source = guidance_source or self.ablation.guidance_source
            labels = (prep.gt_semantic_volume if source == "ground_truth"
                      else predicted_volume)
            encoded = one_hot_roi_encode(labels,
                                         self.net3d_cfg.num_categories)
            guidance = guidance_forward(encoded, self.params3d)
        scores = completion_forward(feature_volume, self.params3d,
                                    self.net3d_cfg,
                                    attention=self.ablation.attention)
        probs = fuse_and_classify(scores, guidance)
        pred = probs.data.argmax(axis=0).astype(np.uint8)
        return PipelineOutput(seg2d=seg_out, probs=probs, pred_labels=pred)


def split_scenes(scenes: Sequence[PreparedScene],
                 test_fraction: float) -> tuple[list, list]:
    """Deterministic train/test split: scenes ranked by the SHA-1 of their
    scene_id; the top fraction becomes the test set."""
    if not scenes:
        raise ContractViolation("cannot split an empty scene list")
    ranked = sorted(scenes, key=lambda s: hashlib.sha1(
        s.scene_id.encode()).hexdigest())
    n_test = max(1, round(len(scenes) * test_fraction))
    if n_test >= len(scenes):
        raise ContractViolation(
            f"test fraction {test_fraction} leaves no training scenes")
    test = ranked[:n_test]
    test_ids = {s.scene_id for s in test}
    train = [s for s in scenes if s.scene_id not in test_ids]
    return train, test


def pretrain_2d(model: ScenePipeline, train: Sequence[PreparedScene],
                schedule: TrainingSchedule, seed: int) -> list[float]:
    """Pre-train the 2D network on per-pixel cross-entropy; returns the
    per-step losses."""
    opt = MomentumSgd([(schedule.pretrain_lr, list(model.params2d.values()))],
                      momentum=schedule.momentum,
                      weight_decay=schedule.weight_decay)
    order_rng = np.random.default_rng(np.random.PCG64(seed + 1))
    losses = []
    pixel_mask = None
    for step in range(schedule.pretrain_steps):
        if step % len(train) == 0:
            order = order_rng.permutation(len(train))
        prep = train[order[step % len(train)]]
        if pixel_mask is None or pixel_mask.shape != prep.sample.seg2d_gt.shape:
            pixel_mask = np.ones_like(prep.sample.seg2d_gt, dtype=bool)
        seg_out = model.forward_2d(prep)
        loss = masked_cross_entropy(softmax_channel(seg_out.logits),
                                    prep.sample.seg2d_gt, pixel_mask)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalFailure(f"pre-training diverged at step {step}")
        losses.append(value)
        loss.backward()
        opt.step()
    return losses


def train_end_to_end(model: ScenePipeline, train: Sequence[PreparedScene],
                     schedule: TrainingSchedule, seed: int) -> list[float]:
    """Train the whole pipeline on masked voxel cross-entropy; returns the
    per-step losses.

    The 2D classifier head is excluded from this phase: the voxel loss
    reaches the 2D network only through the projected features (the
    segmentation map enters via hard argmax), so the head keeps its
    pre-trained weights and would otherwise never receive a gradient."""
    params_2d = [p for name, p in model.params2d.items()
                 if not name.startswith("classify/")]
    groups = [(schedule.lr_2d, params_2d),
              (schedule.lr_3d, list(model.params3d.values()))]
    opt = MomentumSgd(groups, momentum=schedule.momentum,
                      weight_decay=schedule.weight_decay)
    order_rng = np.random.default_rng(np.random.PCG64(seed + 2))
    losses = []
    for step in range(schedule.e2e_steps):
        if step % len(train) == 0:
            order = order_rng.permutation(len(train))
        prep = train[order[step % len(train)]]
        out = model.forward(prep, guidance_source="predicted")
        loss = masked_cross_entropy(out.probs, prep.sample.grid_gt.labels,
                                    prep.in_loss)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalFailure(f"end-to-end training diverged at step {step}")
        losses.append(value)
        loss.backward()
        opt.step()
    return losses


def evaluate_pipeline(model: ScenePipeline,
                      scenes: Sequence[PreparedScene]) -> MetricsReport:
    """Aggregate SC/SSC counts over the scenes, then compute the metrics."""
    n = model.net3d_cfg.num_categories
    sc_total = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    ssc_total = {c: {"tp": 0, "fp": 0, "fn": 0} for c in range(1, n + 1)}
    with no_grad():
        for prep in scenes:
            out = model.forward(prep)
            gt = prep.sample.grid_gt.labels
            for key, value in sc_counts(out.pred_labels, gt,
                                        prep.in_sc_eval).items():
                sc_total[key] += value
            per_class = ssc_counts(out.pred_labels, gt, prep.in_ssc_eval, n)
            for cat, counts in per_class.items():
                for key, value in counts.items():
                    ssc_total[cat][key] += value
    return metrics_from_counts(sc_total, ssc_total)


@dataclass
class ExperimentResult:
    report: MetricsReport
    pretrain_losses: list[float]
    e2e_losses: list[float]
    model: ScenePipeline


def run_experiment(scenes: Sequence[PreparedScene], config: RunConfig,
                   pretrained_2d: dict[str, np.ndarray] | None = None,
                   ) -> ExperimentResult:
    """Split, pre-train, train end-to-end, and evaluate, all deterministic
    given (scenes, config).  ``pretrained_2d`` may carry the post-pretraining
    2D parameter state to share across an ablation sweep (pre-training does
    not depend on the ablation flags)."""
    train, test = split_scenes(scenes, config.test_fraction)
    model = ScenePipeline(config.net2d, config.net3d, config.ablation,
                          config.seed)
    if pretrained_2d is not None and pretrained_2d:
        for name, tensor in model.params2d.items():
            tensor.data[...] = pretrained_2d[name]
        pre_losses = []
    else:
        pre_losses = pretrain_2d(model, train, config.schedule, config.seed)
        if pretrained_2d is not None:
            pretrained_2d.update({name: tensor.data.copy()
                                  for name, tensor in model.params2d.items()})
    e2e_losses = train_end_to_end(model, train, config.schedule, config.seed)
    report = evaluate_pipeline(model, test)
    return ExperimentResult(report=report, pretrain_losses=pre_losses,
                            e2e_losses=e2e_losses, model=model)


def ablation_sweep(scenes: Sequence[PreparedScene], config: RunConfig,
                   labels: Sequence[str] = ("full", "w/o-Attn", "w/o-Seg",
                                            "basic", "Seg-GT"),
                   ) -> dict[str, ExperimentResult]:
    """Run every ablation row with a shared seed.  The 2D pre-training state
    is computed once per sweep and shared, since it is identical across
    configurations."""
    results: dict[str, ExperimentResult] = {}
    pretrained_2d: dict[str, np.ndarray] = {}
    for label in labels:
        row_config = replace(config, ablation=AblationConfig.from_label(label))
        results[label] = run_experiment(scenes, row_config,
                                        pretrained_2d=pretrained_2d)
    return results


def sweep_table(results: dict[str, ExperimentResult]) -> str:
    lines = [MetricsReport.header_text()]
    for label, result in results.items():
        row_label = "Ours" if label == "full" else f"Ours ({label})"
        lines.append(result.report.row_text(row_label))
    return "\n".join(lines)
