"""Batch command-line surface.

Verbs: ``gen-scenes``, ``grad-check``, ``train``, ``eval``, ``ablate``,
``export-voxels``.  Every command takes ``--config`` (JSON; defaults to the
``SEMSCENE_CONFIG`` environment variable) plus dotted ``--key value``
overrides such as ``--schedule.e2e_steps 100``.

Exit codes: 0 success, 1 contract violation, 2 IO error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import load_into, save_checkpoint
from .errors import ContractViolation, NumericalFailure
from .evaluate import AblationConfig, MetricsReport
from .experiment import (ExperimentResult, RunConfig, ablation_sweep,
                         apply_override, config_from_dict, config_to_dict,
                         evaluate_pipeline, prepare_scene, run_experiment,
                         ScenePipeline, split_scenes, sweep_table)
from .export import export_voxels
from .gradsuite import GRAD_TOLERANCE, run_grad_suite
from .scenes import generate_scene, load_scene, save_scene

CONFIG_ENV = "SEMSCENE_CONFIG"

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


def _load_config(args, overrides) -> RunConfig:
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        with open(path) as fh:
            data = json.load(fh)
    else:
        data = config_to_dict(RunConfig(seed=0))
    if args.seed is not None:
        data["seed"] = args.seed
    for key, value in overrides:
        apply_override(data, key, value)
    return config_from_dict(data)


def _parse_overrides(extras: list[str]) -> list[tuple[str, str]]:
    if len(extras) % 2 != 0:
        raise ContractViolation(f"dangling override argument: {extras[-1]!r}")
    pairs = []
    for key, value in zip(extras[::2], extras[1::2]):
        if not key.startswith("--"):
            raise ContractViolation(f"expected --dotted.key, got {key!r}")
        pairs.append((key[2:], value))
    return pairs


def _load_dataset(data_dir: str, config: RunConfig):
    index_path = os.path.join(data_dir, "index.json")
    with open(index_path) as fh:
        index = json.load(fh)
    scenes = []
    for name in index["scenes"]:
        sample = load_scene(os.path.join(data_dir, name))
        scenes.append(prepare_scene(sample, config.scene,
                                    config.include_free_in_loss))
    return scenes


def _write_log(path: str | None, result: ExperimentResult) -> None:
    lines = ["phase pretrain"]
    lines += [f"step {i} loss {v!r}" for i, v in
              enumerate(result.pretrain_losses)]
    lines.append("phase end-to-end")
    lines += [f"step {i} loss {v!r}" for i, v in enumerate(result.e2e_losses)]
    text = "\n".join(lines) + "\n"
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _write_report(path: str | None, report: MetricsReport, label: str) -> None:
    text = MetricsReport.header_text() + "\n" + report.row_text(label) + "\n"
    sys.stdout.write(text)
    if path:
        with open(path, "w") as fh:
            fh.write(text)
        with open(path + ".json", "w") as fh:
            fh.write(report.to_json() + "\n")


def cmd_gen_scenes(args, overrides) -> int:
    config = _load_config(args, overrides)
    os.makedirs(args.out, exist_ok=True)
    written: list[str] = []
    names: list[str] = []
    try:
        for i in range(args.count):
            sample = generate_scene(config.scene, config.seed + i)
            name = f"scene_{config.seed + i:08d}"
            prefix = os.path.join(args.out, name)
            save_scene(sample, prefix)
            written += [prefix + ".json", prefix + ".bin"]
            names.append(name)
        index = {"scenes": names, "seed": config.seed,
                 "scene_config": config_to_dict(config)["scene"]}
        with open(os.path.join(args.out, "index.json"), "w") as fh:
            json.dump(index, fh, sort_keys=True, indent=2)
            fh.write("\n")
    except BaseException:
        for path in written:  # no partial outputs
            if os.path.exists(path):
                os.remove(path)
        raise
    print(f"wrote {args.count} scenes to {args.out}")
    return EXIT_OK


def cmd_grad_check(args, overrides) -> int:
    results = run_grad_suite(seed=args.seed or 0)
    failed = []
    for name, err in results.items():
        status = "ok" if err < GRAD_TOLERANCE else "FAIL"
        print(f"{name:20s} max relative error {err:.3e}  {status}")
        if err >= GRAD_TOLERANCE:
            failed.append(name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(results)} blocks within {GRAD_TOLERANCE:g}")
    return EXIT_OK


def cmd_train(args, overrides) -> int:
    config = _load_config(args, overrides)
    scenes = _load_dataset(args.data, config)
    result = run_experiment(scenes, config)
    save_checkpoint(args.checkpoint, result.model.named_parameters())
    _write_log(args.log, result)
    label = ("Ours" if config.ablation.label == "full"
             else f"Ours ({config.ablation.label})")
    _write_report(args.report, result.report, label)
    return EXIT_OK


def cmd_eval(args, overrides) -> int:
    config = _load_config(args, overrides)
    scenes = _load_dataset(args.data, config)
    model = ScenePipeline(config.net2d, config.net3d, config.ablation,
                          config.seed)
    load_into(args.checkpoint, model.named_parameters())
    _, test = split_scenes(scenes, config.test_fraction)
    report = evaluate_pipeline(model, test)
    label = ("Ours" if config.ablation.label == "full"
             else f"Ours ({config.ablation.label})")
    _write_report(args.report, report, label)
    return EXIT_OK


def cmd_ablate(args, overrides) -> int:
    config = _load_config(args, overrides)
    scenes = _load_dataset(args.data, config)
    results = ablation_sweep(scenes, config)
    table = sweep_table(results)
    print(table)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(table + "\n")
        rows = {label: json.loads(r.report.to_json())
                for label, r in results.items()}
        with open(args.report + ".json", "w") as fh:
            json.dump(rows, fh, sort_keys=True, indent=2)
            fh.write("\n")
    if args.checkpoint_dir:
        for label, r in results.items():
            safe = label.replace("/", "_")
            save_checkpoint(os.path.join(args.checkpoint_dir, safe),
                            r.model.named_parameters())
    return EXIT_OK


def cmd_export_voxels(args, overrides) -> int:
    config = _load_config(args, overrides)
    sample = load_scene(args.scene)
    if args.checkpoint:
        model = ScenePipeline(config.net2d, config.net3d, config.ablation,
                              config.seed)
        load_into(args.checkpoint, model.named_parameters())
        prep = prepare_scene(sample, config.scene,
                             config.include_free_in_loss)
        from .tensor import no_grad
        with no_grad():
            labels = model.forward(prep).pred_labels
    else:
        labels = sample.grid_gt.labels
    count = export_voxels(labels, args.out, args.format,
                          voxel_size=sample.grid_gt.voxel_size,
                          origin=sample.grid_gt.origin)
    kind = "faces" if args.format == "surface-mesh" else "voxels"
    print(f"wrote {count} {kind} to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semscene",
        description="Synthetic-scene semantic completion workbench")
    parser.add_argument("--config", help=f"JSON run config (default: "
                                         f"${CONFIG_ENV})")
    parser.add_argument("--seed", type=int, help="override the config seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="generate a synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("grad-check", help="finite-difference gradient gate")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("train", help="pre-train, train end-to-end, evaluate")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log")
    p.add_argument("--report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (read-only)")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the five ablation rows")
    p.add_argument("--data", required=True)
    p.add_argument("--report")
    p.add_argument("--checkpoint-dir")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-voxels", help="export a volume for viewing")
    p.add_argument("--scene", required=True, help="scene file prefix")
    p.add_argument("--checkpoint", help="export the prediction instead of gt")
    p.add_argument("--format", choices=("surface-mesh", "point-list"),
                   default="surface-mesh")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_voxels)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        overrides = _parse_overrides(extras)
        return args.func(args, overrides)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
