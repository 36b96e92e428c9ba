"""Command-line pipeline: data generation, training, evaluation, prediction.

Configuration comes from JSON files layered over built-in defaults, with
command-line flags winning over both. Unknown config keys are hard errors.
Every command echoes its fully resolved configuration into the output
directory as ``config.resolved.json`` and takes an advisory lock on that
directory while it runs.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure.
"""

import argparse
import contextlib
import copy
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import evaluation
from .align import (AlignmentNet, AlignTrainConfig, RigidParams, estimate_volume_params,
                    prepare_alignment_slices, train_alignment, warp_mask, warp_volume)
from .checkpoints import load_checkpoint, save_checkpoint
from .determinism import seed_everything
from .errors import ConfigError, DataError, NumericError, SeanError
from .fileio import read_json, write_json
from .network import AttentionConfig, HybridUnet
from .phantom import (CtVolume, PhantomSpec, generate_phantom, preprocess, read_ground_truth_params,
                      read_volume, write_ground_truth, write_volume)
from .training import SegCase, TrainConfig, train_segmentation

DEFAULT_CONFIG = {
    "phantom": {
        "image_size": [64, 64],
        "num_slices": 8,
        "rotation_range_deg": [-15.0, 15.0],
        "shift_range_px": [-10.0, 10.0],
        "lesion_probability": 0.6,
        "lesion_intensity_delta": -10.0,
        "lesion_radius_px": [3.0, 6.0],
        "texture_seed": 0,
    },
    "model": {
        "base_width": 16,
        "fusion": "sea",
        "T": 1,
    },
    "attention": {
        "P": 2,
        "Q": 2,
        "T": 1,
        "d_ratio": 0.5,
    },
    "train": {
        "base_lr": 1e-4,
        "betas": [0.9, 0.99],
        "epochs": 150,
        "poly_power": 0.9,
        "w_dice": 1.0,
        "w_ce": 1.0,
        "batch_size": 8,
        "seed": 0,
        "checkpoint_every": 0,
    },
    "align_train": {
        "base_lr": 1e-3,
        "head_lr_scale": 1e-3,
        "betas": [0.9, 0.99],
        "epochs": 60,
        "batch_size": 16,
        "poly_power": 0.9,
        "seed": 0,
    },
    "eval": {
        "iou_threshold": 0.1,
        "prob_threshold": 0.5,
        "batch_size": 8,
    },
}

FUSION_FLAGS = {
    "none": "none",
    "im-l1": "image_l1",
    "ft-l1": "feature_l1",
    "ft-cc": "feature_concat",
    "sea": "sea",
    "sea-self": "sea_self_only",
}


def _merge_section(base: dict, override: dict, prefix: str) -> None:
    for key, value in override.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        current = base[key]
        if isinstance(current, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path} must be an object")
            _merge_section(current, value, path)
            continue
        if isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigError(f"config key {path} must be a boolean")
        if isinstance(current, (int, float)) and not isinstance(value, bool) and isinstance(value, (int, float)):
            base[key] = value
        elif isinstance(current, str) and isinstance(value, str):
            base[key] = value
        elif isinstance(current, list) and isinstance(value, list):
            base[key] = value
        elif isinstance(current, bool) and isinstance(value, bool):
            base[key] = value
        else:
            raise ConfigError(f"config key {path} has incompatible type {type(value).__name__}")


def resolve_config(config_path: str | None, set_overrides: list[str] | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise DataError(f"config file {path} does not exist")
        try:
            file_cfg = read_json(path)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        _merge_section(cfg, file_cfg, "")
    for item in set_overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, text = item.split("=", 1)
        keys = dotted.split(".")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = {}
        leaf = node
        for key in keys[:-1]:
            leaf[key] = {}
            leaf = leaf[key]
        leaf[keys[-1]] = value
        _merge_section(cfg, node, "")
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    if cfg["model"]["fusion"] not in {m for m in FUSION_FLAGS.values()}:
        raise ConfigError(f"model.fusion must be one of {sorted(set(FUSION_FLAGS.values()))}")
    if cfg["attention"]["T"] != cfg["model"]["T"]:
        raise ConfigError("attention.T must equal model.T")
    phantom_spec_from_config(cfg["phantom"]).validate()
    train_config_from(cfg).validate()


def phantom_spec_from_config(section: dict) -> PhantomSpec:
    return PhantomSpec(
        image_size=tuple(int(v) for v in section["image_size"]),
        num_slices=int(section["num_slices"]),
        rotation_range_deg=tuple(float(v) for v in section["rotation_range_deg"]),
        shift_range_px=tuple(float(v) for v in section["shift_range_px"]),
        lesion_probability=float(section["lesion_probability"]),
        lesion_intensity_delta=float(section["lesion_intensity_delta"]),
        lesion_radius_px=tuple(float(v) for v in section["lesion_radius_px"]),
        texture_seed=int(section["texture_seed"]),
    )


def train_config_from(cfg: dict) -> TrainConfig:
    train = cfg["train"]
    att = cfg["attention"]
    return TrainConfig(
        base_lr=float(train["base_lr"]),
        betas=tuple(float(b) for b in train["betas"]),
        epochs=int(train["epochs"]),
        poly_power=float(train["poly_power"]),
        w_dice=float(train["w_dice"]),
        w_ce=float(train["w_ce"]),
        batch_size=int(train["batch_size"]),
        seed=int(train["seed"]),
        fusion=cfg["model"]["fusion"],
        base_width=int(cfg["model"]["base_width"]),
        temporal_radius=int(cfg["model"]["T"]),
        attention=AttentionConfig(P=int(att["P"]), Q=int(att["Q"]), d_ratio=float(att["d_ratio"])),
        checkpoint_every=int(train["checkpoint_every"]),
    )


def align_config_from(cfg: dict) -> AlignTrainConfig:
    sec = cfg["align_train"]
    return AlignTrainConfig(
        base_lr=float(sec["base_lr"]),
        head_lr_scale=float(sec["head_lr_scale"]),
        betas=tuple(float(b) for b in sec["betas"]),
        epochs=int(sec["epochs"]),
        batch_size=int(sec["batch_size"]),
        poly_power=float(sec["poly_power"]),
        seed=int(sec["seed"]),
    )


@contextlib.contextmanager
def output_dir_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".sean.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise DataError(f"output directory {out_dir} is locked by another command ({lock} exists)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock)


def _echo_config(out_dir: Path, command: str, args_dict: dict, cfg: dict) -> None:
    write_json(out_dir / "config.resolved.json", {
        "command": command,
        "args": args_dict,
        "config": cfg,
    })


def load_dataset_cases(data_dir) -> list[tuple[CtVolume, np.ndarray | None, RigidParams | None, str]]:
    data_dir = Path(data_dir)
    manifest_path = data_dir / "dataset.json"
    if manifest_path.exists():
        manifest = read_json(manifest_path)
        case_ids = manifest.get("case_ids")
        if not case_ids:
            raise DataError(f"{manifest_path} lists no cases")
    else:
        case_ids = sorted(p.stem for p in data_dir.glob("*.raw") if not p.name.endswith(".mask.raw"))
        if not case_ids:
            raise DataError(f"no volumes found in {data_dir}")
    cases = []
    for cid in case_ids:
        base = data_dir / cid
        vol, mask = read_volume(base)
        truth = read_ground_truth_params(base)
        cases.append((vol, mask, truth, cid))
    return cases


def _load_align_net(path) -> AlignmentNet:
    config, state = load_checkpoint(path, "alignment")
    if int(config.get("input_size", AlignmentNet.INPUT_SIZE)) != AlignmentNet.INPUT_SIZE:
        raise ConfigError(f"alignment checkpoint input_size {config.get('input_size')} unsupported")
    net = AlignmentNet()
    try:
        net.load_state_dict(state)
    except RuntimeError as exc:
        raise ConfigError(f"alignment checkpoint does not fit the network: {exc}") from exc
    net.eval()
    return net


def _load_seg_model(path) -> HybridUnet:
    config, state = load_checkpoint(path, "segmentation")
    model = HybridUnet.from_config_dict(config)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise ConfigError(f"segmentation checkpoint does not fit its declared config: {exc}") from exc
    model.eval()
    return model


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args.spec, args.set)
    spec = phantom_spec_from_config(cfg["phantom"])
    out_dir = Path(args.out)
    with output_dir_lock(out_dir):
        seed_everything(args.seed)
        case_ids = []
        for i in range(args.num):
            cid = f"case_{i:04d}"
            vol, gt = generate_phantom(spec, args.seed + i, vol_id=cid)
            write_volume(vol, gt.lesion_mask, out_dir / cid)
            write_ground_truth(gt, out_dir / cid)
            case_ids.append(cid)
        write_json(out_dir / "dataset.json", {
            "format_version": 1,
            "kind": "phantom-dataset",
            "base_seed": args.seed,
            "num_cases": args.num,
            "case_ids": case_ids,
            "spec": asdict(spec),
        })
        _echo_config(out_dir, "gen-data", {"out": str(out_dir), "num": args.num, "seed": args.seed,
                                           "spec": args.spec}, cfg)
    return 0


def cmd_train_align(args) -> int:
    cfg = resolve_config(args.config, args.set)
    out_dir = Path(args.out)
    with output_dir_lock(out_dir):
        raw_cases = load_dataset_cases(args.data)
        slice_sets = prepare_alignment_slices(vol for vol, _, _, _ in raw_cases)
        if not slice_sets:
            raise DataError(f"dataset {args.data} contains no tissue-bearing volumes")
        train_alignment(slice_sets, align_config_from(cfg), out_dir=out_dir)
        _echo_config(out_dir, "train-align", {"data": str(args.data), "out": str(out_dir),
                                              "config": args.config}, cfg)
    return 0


def _prepare_seg_cases(align_net: AlignmentNet, raw_cases) -> list[SegCase]:
    cases = []
    for vol, mask, _, cid in raw_cases:
        if mask is None:
            raise DataError(f"case {cid!r} has no mask; segmentation training needs masks")
        params = estimate_volume_params(align_net, vol)
        aligned = warp_volume(vol.voxels, params)
        aligned_mask = warp_mask(mask, params)
        pre = preprocess(CtVolume(voxels=aligned, spacing=vol.spacing, id=vol.id))
        cases.append(SegCase(pre.voxels, aligned_mask, cid))
    return cases


def cmd_train_seg(args) -> int:
    cfg = resolve_config(args.config, args.set)
    if args.fusion:
        cfg["model"]["fusion"] = FUSION_FLAGS[args.fusion]
    train_cfg = train_config_from(cfg)
    out_dir = Path(args.out)
    with output_dir_lock(out_dir):
        align_net = _load_align_net(args.align)
        raw_cases = load_dataset_cases(args.data)
        cases = _prepare_seg_cases(align_net, raw_cases)
        train_segmentation(train_cfg, cases, out_dir=out_dir)
        _echo_config(out_dir, "train-seg", {"data": str(args.data), "align": str(args.align),
                                            "fusion": args.fusion, "out": str(out_dir),
                                            "config": args.config}, cfg)
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args.config, args.set)
    if args.iou_threshold is not None:
        cfg["eval"]["iou_threshold"] = args.iou_threshold
    out_dir = Path(args.out)
    with output_dir_lock(out_dir):
        align_net = _load_align_net(args.align)
        model = _load_seg_model(args.model)
        seed_everything(int(cfg["train"]["seed"]))
        raw_cases = load_dataset_cases(args.data)
        eval_cfg = evaluation.EvalConfig(
            temporal_radius=model.temporal_radius,
            iou_threshold=float(cfg["eval"]["iou_threshold"]),
            prob_threshold=float(cfg["eval"]["prob_threshold"]),
            batch_size=int(cfg["eval"]["batch_size"]),
            bench=args.bench,
        )
        cases = [evaluation.EvalCase(volume=vol, mask=mask, truth=truth, case_id=cid)
                 for vol, mask, truth, cid in raw_cases]
        report = evaluation.evaluate_dataset(model, align_net, cases, eval_cfg)
        evaluation.write_report(report, out_dir)
        if args.overlays:
            for case in cases:
                pred, _, _, _ = evaluation.predict_volume(model, align_net, case.volume, eval_cfg)
                zs = [i for i in range(case.volume.voxels.shape[0]) if case.mask[i].any() or pred[i].any()]
                z = zs[len(zs) // 2] if zs else case.volume.voxels.shape[0] // 2
                evaluation.write_overlay_png(out_dir / "overlays" / f"{case.case_id}_z{z:03d}.png",
                                             case.volume.voxels[z], pred[z], case.mask[z])
        _echo_config(out_dir, "evaluate", {"data": str(args.data), "align": str(args.align),
                                           "model": str(args.model), "out": str(out_dir),
                                           "iou_threshold": args.iou_threshold,
                                           "bench": args.bench, "overlays": args.overlays,
                                           "config": args.config}, cfg)
    return 0


def cmd_predict(args) -> int:
    cfg = resolve_config(args.config, args.set)
    align_net = _load_align_net(args.align)
    model = _load_seg_model(args.model)
    vol_path = str(args.volume)
    for suffix in (".raw", ".json"):
        if vol_path.endswith(suffix):
            vol_path = vol_path[: -len(suffix)]
    vol, _ = read_volume(vol_path)
    eval_cfg = evaluation.EvalConfig(
        temporal_radius=model.temporal_radius,
        prob_threshold=float(cfg["eval"]["prob_threshold"]),
        batch_size=int(cfg["eval"]["batch_size"]),
    )
    pred, _, _, _ = evaluation.predict_volume(model, align_net, vol, eval_cfg)
    out = str(args.out)
    if out.endswith(".mask.raw"):
        out = out[: -len(".mask.raw")]
    write_volume(vol, pred, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sean", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable; flags win over config files)")

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--spec", default=None, help="JSON config supplying the phantom section")
    add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-align", help="train the alignment network (unsupervised)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    add_common(p)
    p.set_defaults(func=cmd_train_align)

    p = sub.add_parser("train-seg", help="train a segmentation model")
    p.add_argument("--data", required=True)
    p.add_argument("--align", required=True)
    p.add_argument("--fusion", choices=sorted(FUSION_FLAGS), default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    add_common(p)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("evaluate", help="evaluate a model over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--align", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iou-threshold", type=float, default=None)
    p.add_argument("--bench", action="store_true", help="record alignment wall-clock per volume")
    p.add_argument("--overlays", action="store_true", help="write per-case overlay PNGs")
    p.add_argument("--config", default=None)
    add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict a lesion mask for one volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--align", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    add_common(p)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _print_error("config", exc)
        return 2
    except (DataError, OSError) as exc:
        _print_error("io", exc)
        return 3
    except NumericError as exc:
        _print_error("numeric", exc)
        return 4
    except SeanError as exc:
        _print_error("error", exc)
        return 1


def _print_error(kind: str, exc: Exception) -> None:
    message = " ".join(str(exc).split())
    print(f"ERROR {kind}: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
