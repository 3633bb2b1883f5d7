"""Command-line pipeline: synthesize, sample, train, register, evaluate.

Every subcommand that writes artifacts also writes a JSON run manifest
recording the resolved parameters, the package version and the file
formats, so a result can be traced back to the exact invocation. The
created_unix field is wall time and should be ignored when comparing
manifests for reproducibility.

Selected options fall back to INVREG_* environment variables (named in
the option help) before their built-in defaults; explicit flags always
win.

Exit codes: 0 success, 1 bad usage or configuration, 2 bad input data
or artifacts, 3 training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import ConfigError, DataError, TrainingDivergedError, ValidationError
from .infer import BLEND_MODES, register
from .losses import LossConfig
from .metrics import (
    difference_image,
    global_cc,
    landmark_report,
    mutual_information,
    overlay_slice,
    save_png,
)
from .model import ModelConfig
from .sampler import SamplerConfig, sample_patches, write_patch_archive, write_patch_csv
from .synth import SynthConfig, make_pair
from .trainer import (
    TrainConfig,
    load_checkpoint,
    parameter_hash,
    save_checkpoint,
    train,
)
from .volio import (
    WARP_CONVENTION,
    normalize_intensity,
    read_field,
    read_landmarks,
    read_volume,
    write_field,
    write_landmarks,
    write_volume,
)
from .warp import warp_landmarks

MANIFEST_TAG = "invreg-run-manifest-1"


def _env(name: str, default, cast):
    raw = os.environ.get(f"INVREG_{name}")
    if raw is None:
        return default
    try:
        return cast(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"INVREG_{name}={raw!r} is not a valid {cast.__name__}") from exc


def _triple(text: str, cast=float):
    parts = text.split(",")
    try:
        if len(parts) == 1:
            return (cast(parts[0]),) * 3
        if len(parts) == 3:
            return tuple(cast(p) for p in parts)
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"expected a value or comma triple, got {text!r}")


def _range_pair(text: str):
    parts = text.split(",")
    try:
        if len(parts) == 1:
            return (float(parts[0]),) * 2
        if len(parts) == 2:
            return (float(parts[0]), float(parts[1]))
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"expected a value or lo,hi pair, got {text!r}")


def _load_volume(path, normalize: bool):
    vol = read_volume(path)
    return normalize_intensity(vol) if normalize else vol


def _require_same_dims(verb: str, a, b) -> None:
    if a.dims != b.dims:
        raise ValidationError(
            f"cannot {verb} volumes of different dims: {a.dims} vs {b.dims}"
        )


def _write_manifest(path: Path, command: str, parameters: dict) -> None:
    manifest = {
        "artifact": MANIFEST_TAG,
        "command": command,
        "package_version": __version__,
        "parameters": parameters,
        "volume_format": "IVL1",
        "field_format": "IVF1",
        "warp_convention": WARP_CONVENTION,
        "created_unix": time.time(),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _apply_threads(threads: int | None, deterministic: bool = False) -> None:
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    elif threads:
        torch.set_num_threads(threads)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="invreg", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    seed_default = _env("SEED", 0, int)
    threads_default = _env("THREADS", 0, int)
    patch_default = _env("PATCH_SIZE", 64, int)

    p = sub.add_parser("synth", help="generate a synthetic source/target pair with ground truth")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--dims", default="64", help="volume edge length or comma triple")
    p.add_argument("--blobs", type=int, default=SynthConfig.blob_count)
    p.add_argument("--sigma", default=None, help="blob sigma range as lo,hi in voxels")
    p.add_argument("--amplitude", type=float, default=SynthConfig.field_amplitude,
                   help="maximum truth displacement magnitude in voxels")
    p.add_argument("--smoothness", type=float, default=SynthConfig.field_smoothness)
    p.add_argument("--landmarks", type=int, default=SynthConfig.landmark_count)
    p.add_argument("--spacing", default="1", help="voxel spacing in mm, value or comma triple")
    p.add_argument("--seed", type=int, default=seed_default, help="RNG seed (INVREG_SEED)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample", help="draw accepted patch windows from a volume pair")
    p.add_argument("--source", required=True, type=Path)
    p.add_argument("--target", required=True, type=Path)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--patch-size", type=int, default=patch_default,
                   help="cubic window edge (INVREG_PATCH_SIZE)")
    p.add_argument("--low", type=float, default=SamplerConfig.low)
    p.add_argument("--high", type=float, default=SamplerConfig.high)
    p.add_argument("--decay", type=float, default=SamplerConfig.decay)
    p.add_argument("--scale", type=float, default=SamplerConfig.scale)
    p.add_argument("--legacy-threshold", type=float, default=None,
                   help="accept windows by fixed mean-intensity threshold instead")
    p.add_argument("--max-draw-factor", type=int, default=SamplerConfig.max_draw_factor)
    p.add_argument("--seed", type=int, default=seed_default, help="RNG seed (INVREG_SEED)")
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--out", required=True, type=Path, help="output CSV path")
    p.add_argument("--archive", type=Path, default=None,
                   help="also write the extracted patch pairs to this archive file")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="train the registration networks on volume pairs")
    p.add_argument("--volumes", required=True, nargs="+", type=Path,
                   help="two or more volumes; all ordered pairs are used")
    p.add_argument("--checkpoint", required=True, type=Path, help="checkpoint output path")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.add_argument("--iterations", type=int, default=_env("ITERATIONS", TrainConfig.iterations, int),
                   help="total training steps including any resumed ones (INVREG_ITERATIONS)")
    p.add_argument("--batch-size", type=int, default=_env("BATCH_SIZE", TrainConfig.batch_size, int),
                   help="patches per step (INVREG_BATCH_SIZE)")
    p.add_argument("--patch-size", type=int, default=patch_default,
                   help="patch edge length (INVREG_PATCH_SIZE)")
    p.add_argument("--base-channels", type=int, default=ModelConfig.base_channels)
    p.add_argument("--adv-weight", type=float,
                   default=_env("ADV_WEIGHT", LossConfig.adv_weight, float),
                   help="adversarial term weight (INVREG_ADV_WEIGHT)")
    p.add_argument("--no-adversarial", action="store_true",
                   help="skip discriminator updates and the adversarial term")
    p.add_argument("--lr-generator", type=float, default=TrainConfig.lr_generator)
    p.add_argument("--lr-discriminator", type=float, default=TrainConfig.lr_discriminator)
    p.add_argument("--beta1", type=float, default=TrainConfig.betas[0])
    p.add_argument("--beta2", type=float, default=TrainConfig.betas[1])
    p.add_argument("--grad-clip", type=float, default=TrainConfig.grad_clip)
    p.add_argument("--patches-per-pair", type=int, default=TrainConfig.patches_per_pair)
    p.add_argument("--checkpoint-every", type=int, default=TrainConfig.checkpoint_every,
                   help="also save every N steps (0 saves only at the end)")
    p.add_argument("--window", type=int, default=LossConfig.window,
                   help="local correlation window edge")
    p.add_argument("--ncc-eps", type=float, default=LossConfig.eps,
                   help="variance floor for the correlation windows")
    p.add_argument("--leaky-slope", type=float, default=ModelConfig.leaky_slope)
    p.add_argument("--flow-init-std", type=float, default=ModelConfig.flow_init_std)
    p.add_argument("--low", type=float, default=SamplerConfig.low)
    p.add_argument("--high", type=float, default=SamplerConfig.high)
    p.add_argument("--decay", type=float, default=SamplerConfig.decay)
    p.add_argument("--scale", type=float, default=SamplerConfig.scale)
    p.add_argument("--patch-archive", type=Path, default=None,
                   help="train on pre-extracted patch pairs instead of sampling volumes")
    p.add_argument("--seed", type=int, default=seed_default, help="RNG seed (INVREG_SEED)")
    p.add_argument("--log", type=Path, default=None, help="JSONL loss log path")
    p.add_argument("--threads", type=int, default=threads_default,
                   help="torch thread count, 0 leaves it alone (INVREG_THREADS)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded deterministic numerics")
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register a volume pair with a trained checkpoint")
    p.add_argument("--source", required=True, type=Path)
    p.add_argument("--target", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--overlap", type=int, default=_env("OVERLAP", 16, int),
                   help="tile overlap in voxels (INVREG_OVERLAP)")
    p.add_argument("--blend", choices=BLEND_MODES, default="cosine")
    p.add_argument("--threads", type=int, default=threads_default,
                   help="torch thread count, 0 leaves it alone (INVREG_THREADS)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded deterministic numerics")
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score the agreement of two volumes")
    p.add_argument("--a", required=True, type=Path, dest="vol_a")
    p.add_argument("--b", required=True, type=Path, dest="vol_b")
    p.add_argument("--field", type=Path, default=None,
                   help="displacement field for landmark transport")
    p.add_argument("--fixed-landmarks", type=Path, default=None)
    p.add_argument("--moving-landmarks", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None, help="JSON output path (default stdout)")
    p.add_argument("--csv", type=Path, default=None, help="also write a flat CSV table")
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("landmarks", help="transport landmarks through a displacement field")
    p.add_argument("--landmarks", required=True, type=Path)
    p.add_argument("--field", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--nearest", action="store_true",
                   help="read displacements at the nearest voxel instead of interpolating")
    p.set_defaults(func=cmd_landmarks)

    p = sub.add_parser("diffimg", help="write difference and overlay slice images")
    p.add_argument("--a", required=True, type=Path, dest="vol_a")
    p.add_argument("--b", required=True, type=Path, dest="vol_b")
    p.add_argument("--axis", type=int, default=2, choices=(0, 1, 2))
    p.add_argument("--index", type=int, default=None, help="slice index, default center")
    p.add_argument("--diff", type=Path, default=None, help="difference PNG path")
    p.add_argument("--overlay", type=Path, default=None, help="red/green overlay PNG path")
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_diffimg)

    return parser


def cmd_synth(args) -> int:
    dims = _triple(args.dims, int)
    sigma = SynthConfig.blob_sigma_range if args.sigma is None else _range_pair(args.sigma)
    config = SynthConfig(
        dims=dims,
        blob_count=args.blobs,
        blob_sigma_range=sigma,
        field_amplitude=args.amplitude,
        field_smoothness=args.smoothness,
        spacing=_triple(args.spacing),
        landmark_count=args.landmarks,
        seed=args.seed,
    )
    source, target, truth, lms_src, lms_tgt = make_pair(config)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_volume(source, out / "source.ivl")
    write_volume(target, out / "target.ivl")
    write_field(truth, out / "truth.ivf")
    # landmarks.csv holds the reference (target-frame) points; the
    # source-frame counterparts go beside it for landmark evaluation.
    write_landmarks(lms_tgt, out / "landmarks.csv")
    write_landmarks(lms_src, out / "landmarks_source.csv")
    _write_manifest(out / "manifest.json", "synth", dataclasses.asdict(config))
    print(f"wrote synthetic pair with {len(lms_src.names)} landmark pairs to {out}")
    return 0


def cmd_sample(args) -> int:
    source = _load_volume(args.source, not args.no_normalize)
    target = _load_volume(args.target, not args.no_normalize)
    config = SamplerConfig(
        low=args.low,
        high=args.high,
        decay=args.decay,
        scale=args.scale,
        patch_size=args.patch_size,
        seed=args.seed,
        max_draw_factor=args.max_draw_factor,
        legacy_threshold=args.legacy_threshold,
    )
    specs = sample_patches(source, target, args.count, config)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_patch_csv(specs, args.out)
    if args.archive is not None:
        write_patch_archive(args.archive, source, target, specs)
    _write_manifest(
        args.out.with_suffix(".manifest.json"),
        "sample",
        {**dataclasses.asdict(config), "count": args.count,
         "source": str(args.source), "target": str(args.target)},
    )
    print(f"wrote {len(specs)} accepted windows to {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        model=ModelConfig(
            patch_size=args.patch_size,
            base_channels=args.base_channels,
            leaky_slope=args.leaky_slope,
            flow_init_std=args.flow_init_std,
            seed=args.seed,
        ),
        sampler=SamplerConfig(
            low=args.low,
            high=args.high,
            decay=args.decay,
            scale=args.scale,
            patch_size=args.patch_size,
            seed=args.seed,
        ),
        loss=LossConfig(window=args.window, eps=args.ncc_eps, adv_weight=args.adv_weight),
        iterations=args.iterations,
        batch_size=args.batch_size,
        lr_generator=args.lr_generator,
        lr_discriminator=args.lr_discriminator,
        betas=(args.beta1, args.beta2),
        grad_clip=args.grad_clip,
        patches_per_pair=args.patches_per_pair,
        adversarial_enabled=not args.no_adversarial,
        checkpoint_every=args.checkpoint_every,
        seed=args.seed,
    )


def cmd_train(args) -> int:
    _apply_threads(args.threads, args.deterministic)
    volumes = [_load_volume(path, not args.no_normalize) for path in args.volumes]
    if args.resume is not None:
        state = load_checkpoint(args.resume)
        config = dataclasses.replace(state.config, iterations=args.iterations)
        state.config = config
    else:
        state = None
        config = _train_config(args)
    args.checkpoint.parent.mkdir(parents=True, exist_ok=True)
    state = train(
        volumes,
        config,
        state=state,
        log_path=args.log,
        checkpoint_path=args.checkpoint,
        patch_archive=args.patch_archive,
    )
    save_checkpoint(state, args.checkpoint)
    _write_manifest(
        args.checkpoint.with_suffix(".manifest.json"),
        "train",
        {**dataclasses.asdict(config), "volumes": [str(v) for v in args.volumes],
         "generator_hash": parameter_hash(state.generator)},
    )
    print(f"trained to step {state.step}; checkpoint -> {args.checkpoint}")
    return 0


def cmd_register(args) -> int:
    _apply_threads(args.threads, args.deterministic)
    source = _load_volume(args.source, not args.no_normalize)
    target = _load_volume(args.target, not args.no_normalize)
    _require_same_dims("register", source, target)
    state = load_checkpoint(args.checkpoint)
    result = register(source, target, state.generator, overlap=args.overlap, blend=args.blend)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_field(result.flow_st, out / "flow_st.ivf")
    write_field(result.flow_ts, out / "flow_ts.ivf")
    write_volume(result.warped_source, out / "warped_source.ivl")
    write_volume(result.warped_target, out / "warped_target.ivl")
    (out / "metrics.json").write_text(json.dumps(result.metrics, indent=2) + "\n", encoding="utf-8")
    _write_manifest(
        out / "manifest.json",
        "register",
        {"source": str(args.source), "target": str(args.target),
         "checkpoint": str(args.checkpoint), "overlap": args.overlap, "blend": args.blend},
    )
    print(
        "cc {cc_before:.4f} -> {cc_after:.4f} (fwd), {cc_after_bwd:.4f} (bwd); "
        "outputs in {out}".format(**result.metrics, out=out)
    )
    return 0


def cmd_evaluate(args) -> int:
    vol_a = _load_volume(args.vol_a, not args.no_normalize)
    vol_b = _load_volume(args.vol_b, not args.no_normalize)
    _require_same_dims("evaluate", vol_a, vol_b)
    report = {
        "cc": global_cc(vol_a, vol_b),
        "mi": mutual_information(vol_a, vol_b),
    }
    if (args.fixed_landmarks is None) != (args.moving_landmarks is None):
        raise ConfigError("landmark evaluation needs both --fixed-landmarks and --moving-landmarks")
    if args.fixed_landmarks is not None:
        fixed = read_landmarks(args.fixed_landmarks, spacing=vol_a.spacing)
        moving = read_landmarks(args.moving_landmarks, spacing=vol_a.spacing)
        report["landmarks_identity"] = landmark_report(fixed, moving).as_dict()
        if args.field is not None:
            field = read_field(args.field)
            report["landmarks_field"] = landmark_report(fixed, moving, field).as_dict()
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text, encoding="utf-8")
        print(f"wrote metrics to {args.out}")
    if args.csv is not None:
        args.csv.parent.mkdir(parents=True, exist_ok=True)
        args.csv.write_text(_report_csv(report), encoding="utf-8")
        print(f"wrote table to {args.csv}")
    return 0


def _report_csv(report: dict) -> str:
    """Flatten the evaluation report into a landmark-style two-column table."""
    lines = ["metric,value", f"cc,{report['cc']:.6f}", f"mi,{report['mi']:.6f}"]
    for block in ("landmarks_identity", "landmarks_field"):
        if block not in report:
            continue
        for name, dist in report[block]["distances_mm"].items():
            lines.append(f"{block}.{name},{dist:.6f}")
        lines.append(f"{block}.avg,{report[block]['mean_mm']:.6f}")
        lines.append(f"{block}.std,{report[block]['std_mm']:.6f}")
    return "\n".join(lines) + "\n"


def cmd_landmarks(args) -> int:
    field = read_field(args.field)
    landmarks = read_landmarks(args.landmarks, spacing=field.spacing)
    moved = warp_landmarks(landmarks, field, nearest=args.nearest)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_landmarks(moved, args.out)
    print(f"transported {len(moved.names)} landmarks to {args.out}")
    return 0


def cmd_diffimg(args) -> int:
    if args.diff is None and args.overlay is None:
        raise ConfigError("nothing to do: give --diff and/or --overlay")
    vol_a = _load_volume(args.vol_a, not args.no_normalize)
    vol_b = _load_volume(args.vol_b, not args.no_normalize)
    _require_same_dims("compare", vol_a, vol_b)
    index = args.index if args.index is not None else vol_a.dims[args.axis] // 2
    if args.diff is not None:
        sl_a = np.take(vol_a.voxels, index, axis=args.axis)
        sl_b = np.take(vol_b.voxels, index, axis=args.axis)
        args.diff.parent.mkdir(parents=True, exist_ok=True)
        save_png(difference_image(sl_a, sl_b), args.diff)
        print(f"wrote difference image to {args.diff}")
    if args.overlay is not None:
        args.overlay.parent.mkdir(parents=True, exist_ok=True)
        save_png(overlay_slice(vol_a, vol_b, axis=args.axis, index=index), args.overlay)
        print(f"wrote overlay image to {args.overlay}")
    return 0


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
