"""Operator entry point: ``satswin`` subcommands for synthetic data
generation, pretraining, finetuning, evaluation, and reconstruction
visualization.

Exit codes: 0 success, 1 user error (bad arguments, invalid config, missing
files), 2 internal error. Every run is deterministic given (args, seed); each
run directory receives the echoed effective configuration and is protected by
a lock file against concurrent writers. ``SATSWIN_THREADS`` caps worker
parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ensure_valid, validate_config
from .data import (SYNTH_KINDS, FormatError, load_chips, load_manifest, read_chip,
                   rgb_composite, synth_dataset, write_ppm)
from .masking import MaskError, all_false_mask, generate_window_mask, save_maskspec
from .metrics import MetricError, format_table, metrics_row, regression_metrics
from .model import (MaskedAutoencoder, SwinUNet, TransferError, transfer_weights)
from .patching import ShapeError
from .runconfig import RunConfig, load_run_config
from .shapes import shape_pipeline
from .training import (GradientError, OptimState, ScheduleError, evaluate_regression,
                       evaluate_segmentation, finetune, mae_loss, pretrain, write_csv)
from .validation import ValidationError


class UserError(Exception):
    """Operator mistake: wrong flags, missing files, invalid configs."""


_USER_ERRORS = (UserError, ConfigError, FormatError, MaskError, CheckpointError,
                TransferError, ValidationError, ShapeError, ScheduleError,
                MetricError, FileNotFoundError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); map to user error
        raise UserError(f"{self.prog}: {message}")


def _apply_thread_cap() -> None:
    cap = os.environ.get("SATSWIN_THREADS")
    if cap:
        try:
            torch.set_num_threads(max(1, int(cap)))
        except ValueError:
            raise UserError(f"SATSWIN_THREADS must be an integer, got {cap!r}")


def _prepare_run_dir(out: str | None, default: str) -> tuple[Path, FileLock]:
    run_dir = Path(out) if out else Path(default)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(run_dir / ".lock")
    try:
        lock.acquire(timeout=0.1)
    except Timeout:
        raise UserError(f"run directory {run_dir} is locked by another run")
    return run_dir, lock


def _echo_config(run_dir: Path, cfg: RunConfig) -> None:
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def _parse_dims(text: str) -> tuple[int, int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 4:
        raise UserError(f"--dims must be TxHxWxB (e.g. 3x64x64x6), got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise UserError(f"--dims components must be integers, got {text!r}")


def _count_parameters(model: torch.nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _load_run_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out=args.out)
    if getattr(args, "mask_ratio", None) is not None:
        cfg = replace(cfg, model=replace(cfg.model, mask_ratio=args.mask_ratio))
    return cfg


def _model_state(ckpt: Checkpoint) -> dict:
    return {k: v for k, v in ckpt.tensors.items() if not k.startswith("optim.")}


def _optim_state_from(ckpt: Checkpoint, loop_weight_decay: float) -> OptimState:
    state = OptimState(weight_decay=loop_weight_decay,
                       step=int(ckpt.meta.get("optim_step", 0)))
    for name, t in ckpt.tensors.items():
        if name.startswith("optim.m."):
            state.exp_avg[name[len("optim.m."):]] = t.clone()
        elif name.startswith("optim.v."):
            state.exp_avg_sq[name[len("optim.v."):]] = t.clone()
    return state


def _optim_tensors(state: OptimState) -> dict:
    out = {}
    for name, t in state.exp_avg.items():
        out[f"optim.m.{name}"] = t
    for name, t in state.exp_avg_sq.items():
        out[f"optim.v.{name}"] = t
    return out


def _dump_recon_triptych(run_dir: Path, step: int, model: MaskedAutoencoder,
                         cube: np.ndarray, band_names, rgb_bands, seed: int) -> None:
    cfg = model.cfg
    t, gh, gw = cfg.token_grid
    spec = generate_window_mask(t, gh, gw, cfg.mask_ratio, seed)
    masked_view = cube.copy()
    from .training import _mask_to_pixels  # local import to keep cli deps flat

    pix = _mask_to_pixels(spec.torch_mask(), cfg.patch_size).numpy().astype(bool)
    masked_view[pix] = 0.5
    with torch.no_grad():
        recon = model(torch.from_numpy(cube[None]),
                      torch.from_numpy(spec.mask[None]))[0].numpy()
    recon = np.clip(recon, 0.0, 1.0)
    out = run_dir / "recon"
    out.mkdir(exist_ok=True)
    for tag, arr in (("original", cube), ("masked", masked_view), ("recon", recon)):
        frames = rgb_composite(arr, band_names, rgb_bands)
        for ts in range(frames.shape[0]):
            write_ppm(out / f"step{step:06d}_t{ts}_{tag}.ppm", frames[ts])


def cmd_synth(args) -> int:
    if args.kind not in SYNTH_KINDS:
        raise UserError(f"unknown kind {args.kind!r}; valid kinds: {', '.join(SYNTH_KINDS)}")
    dims = _parse_dims(args.dims)
    paths = synth_dataset(args.kind, dims, args.count, args.seed, args.out,
                          split=args.split)
    print(f"wrote {len(paths)} chips and manifest.json to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    run = _load_run_config(args)
    errors = validate_config(run.model)
    if errors:
        raise UserError("invalid model config:\n  " + "\n  ".join(errors))
    if args.dry_run:
        pipe = shape_pipeline(run.model, run.head)
        torch.manual_seed(run.seed)
        model = MaskedAutoencoder(run.model, run.arch)
        print(pipe.describe())
        print(f"parameters            {_count_parameters(model)}")
        return 0
    if not run.manifest:
        raise UserError("run config needs data.manifest for pretraining")
    run_dir, lock = _prepare_run_dir(run.out, "runs/pretrain")
    with lock:
        _echo_config(run_dir, run)
        chips = load_chips(load_manifest(run.manifest), split=run.split,
                           expected_bands=run.model.num_bands)
        if not chips:
            raise UserError(f"manifest has no chips in split {run.split!r}")
        for chip in chips:
            ensure_valid(run.model, chip.cube.shape)
        cubes = [chip.cube for chip in chips]

        model = optim = None
        start_step = 0
        if args.checkpoint:
            ckpt = load_checkpoint(args.checkpoint)
            torch.manual_seed(run.seed)
            model = MaskedAutoencoder(ckpt.config, ckpt.arch)
            model.load_state_dict(_model_state(ckpt))
            optim = _optim_state_from(ckpt, run.loop.weight_decay)
            start_step = int(ckpt.meta.get("step", 0))

        def recon_cb(step, m):
            _dump_recon_triptych(run_dir, step, m, cubes[0], chips[0].band_names,
                                 run.rgb_bands, run.seed)

        result = pretrain(run.model, cubes, run.loop, run.schedule, run.seed,
                          arch=run.arch, model=model, optim=optim,
                          start_step=start_step, out_dir=run_dir,
                          recon_callback=recon_cb if run.loop.recon_every else None,
                          log=print)
        save_checkpoint(
            run_dir / "checkpoint.sswk", run.model,
            {**result.model.state_dict(), **_optim_tensors(result.optim)},
            arch=run.arch,
            meta={"phase": "pretrain", "step": run.loop.steps,
                  "optim_step": result.optim.step, "seed": run.seed},
        )
        print(f"final masked mse {result.final_loss:.6f}; run artifacts in {run_dir}")
    return 0


def _load_labeled(run: RunConfig, split: str):
    chips = load_chips(load_manifest(run.manifest), split=split,
                       expected_bands=run.model.num_bands)
    dataset = []
    for chip in chips:
        if chip.labels is None:
            raise UserError(f"chip {chip.source} has no labels; finetuning needs labeled chips")
        ensure_valid(run.model, chip.cube.shape)
        if chip.labels.shape[0] != run.head.out_timesteps:
            raise UserError(
                f"chip {chip.source}: label frames {chip.labels.shape[0]} do not match "
                f"head out_timesteps {run.head.out_timesteps}"
            )
        dataset.append((chip.cube, chip.labels))
    return dataset


def cmd_finetune(args) -> int:
    run = _load_run_config(args)
    if args.no_skip:
        run = replace(run, head=replace(run.head, use_skips=False))
    errors = validate_config(run.model)
    if errors:
        raise UserError("invalid model config:\n  " + "\n  ".join(errors))
    if not run.manifest:
        raise UserError("run config needs data.manifest for finetuning")
    if not args.checkpoint and not args.from_scratch:
        raise UserError("finetuning needs --checkpoint, or --from-scratch to skip transfer")
    init_state = init_cfg = None
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        init_state, init_cfg = _model_state(ckpt), ckpt.config
    run_dir, lock = _prepare_run_dir(run.out, "runs/finetune")
    with lock:
        _echo_config(run_dir, run)
        dataset = _load_labeled(run, run.split)
        if not dataset:
            raise UserError(f"manifest has no chips in split {run.split!r}")
        eval_dataset = _load_labeled(run, run.eval_split) if run.eval_split else None
        result = finetune(run.model, run.head, dataset, run.loop, run.schedule,
                          run.seed, arch=run.arch, init_state=init_state,
                          init_cfg=init_cfg, eval_dataset=eval_dataset,
                          out_dir=run_dir, log=print)
        save_checkpoint(
            run_dir / "checkpoint.sswk", run.model,
            {**result.model.state_dict(), **_optim_tensors(result.optim)},
            arch=run.arch, head=run.head,
            meta={"phase": "finetune", "step": run.loop.steps,
                  "optim_step": result.optim.step, "seed": run.seed,
                  "from_scratch": bool(args.from_scratch)},
        )
        print(f"run artifacts in {run_dir}")
    return 0


def _unet_from_checkpoint(path) -> tuple[SwinUNet, Checkpoint]:
    ckpt = load_checkpoint(path)
    if ckpt.head is None:
        raise UserError(f"{path} is not a finetuned checkpoint (no head config)")
    torch.manual_seed(0)
    model = SwinUNet(ckpt.config, ckpt.head, ckpt.arch)
    model.load_state_dict(_model_state(ckpt))
    model.eval()
    return model, ckpt


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    split = args.split
    if split not in manifest.splits():
        raise UserError(
            f"manifest has no {split!r} split (available: {sorted(manifest.splits())})"
        )
    rows = []
    reg_rows = []
    for path in args.checkpoint:
        model, ckpt = _unet_from_checkpoint(path)
        chips = load_chips(manifest, split=split, expected_bands=ckpt.config.num_bands)
        dataset = []
        for chip in chips:
            if chip.labels is None:
                raise UserError(f"chip {chip.source} has no labels")
            dataset.append((chip.cube, chip.labels))
        name = Path(path).stem if args.checkpoint.count(path) == 1 else path
        task = args.task or ckpt.head.task
        if task == "segmentation":
            cm = evaluate_segmentation(model, dataset, ckpt.head.num_classes)
            rows.append(metrics_row(name, cm))
        else:
            reg_rows.append({"method": name, **evaluate_regression(model, dataset)})
    all_rows = rows + reg_rows
    table = format_table(all_rows)
    print(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(table + "\n")
        header = list(all_rows[0].keys())
        write_csv(out / "metrics.csv", header, [[r.get(h, "") for h in header] for r in all_rows])
    return 0


def cmd_reconstruct(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    needs = [n for n in ("recon_head.weight", "recon_head.bias")
             if n not in ckpt.tensors]
    if needs:
        raise UserError(f"{args.checkpoint} is not a pretraining checkpoint "
                        f"(missing {', '.join(needs)})")
    torch.manual_seed(0)
    model = MaskedAutoencoder(ckpt.config, ckpt.arch)
    model.load_state_dict(_model_state(ckpt))
    model.eval()
    chip = read_chip(args.chip, expected_bands=ckpt.config.num_bands)
    ensure_valid(ckpt.config, chip.cube.shape)
    cfg = ckpt.config
    t, gh, gw = cfg.token_grid
    ratio = args.mask_ratio if args.mask_ratio is not None else cfg.mask_ratio
    if ratio == 0.0:
        spec = all_false_mask(t, gh, gw, args.seed)
    else:
        spec = generate_window_mask(t, gh, gw, ratio, args.seed)

    occluded = None
    if chip.labels is not None and np.issubdtype(chip.labels.dtype, np.integer) \
            and set(np.unique(chip.labels)) <= {0, 1}:
        occluded = chip.labels[0].astype(bool)
        pt, ph, pw = cfg.patch_size
        blocks = occluded.reshape(gh, ph, gw, pw).any(axis=(1, 3))
        spec.mask[0] |= blocks
        spec.ratio_actual = float(spec.mask.sum() / spec.mask.size)

    out_dir, lock = _prepare_run_dir(args.out, "runs/reconstruct")
    with lock:
        save_maskspec(out_dir / "mask.sswm", spec)
        mask_t = torch.from_numpy(spec.mask)
        with torch.no_grad():
            recon = model(torch.from_numpy(chip.cube[None]), mask_t[None])[0].numpy()
        recon = np.clip(recon, 0.0, 1.0)
        from .training import _mask_to_pixels

        pix = _mask_to_pixels(mask_t, cfg.patch_size).numpy().astype(bool)
        masked_view = chip.cube.copy()
        masked_view[pix] = 0.5
        for tag, arr in (("original", chip.cube), ("masked", masked_view), ("recon", recon)):
            frames = rgb_composite(arr, chip.band_names, tuple(args.rgb))
            for ts in range(frames.shape[0]):
                write_ppm(out_dir / f"t{ts}_{tag}.ppm", frames[ts])
        print(f"wrote triptychs for {chip.cube.shape[0]} timesteps to {out_dir}")

        if occluded is not None and chip.cube.shape[0] >= 2:
            truth = chip.cube[1]  # static base scene visible at T1
            model_err = regression_metrics(recon[0][occluded], truth[occluded])
            lines = [f"occluded-at-T0 pixels: {int(occluded.sum())}",
                     f"model infill mse: {model_err['mse']:.6f}"]
            from .data import bilinear_fill

            visible0 = ~pix[0]
            baseline = bilinear_fill(chip.cube[0], visible0)
            base_err = regression_metrics(baseline[occluded], truth[occluded])
            lines.append(f"bilinear baseline mse: {base_err['mse']:.6f}")
            report = "\n".join(lines)
            print(report)
            (out_dir / "infill.txt").write_text(report + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="satswin",
                     description="Spatio-temporal masked autoencoding for satellite cubes")
    parser.add_argument("--version", action="version", version=f"satswin {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic chips + manifest")
    p.add_argument("--kind", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--dims", default="3x64x64x6")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    p.add_argument("--mask-ratio", type=float, default=None)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised finetuning from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--no-skip", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate checkpoints on a manifest")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=["segmentation", "regression"], default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="dump original/masked/reconstruction images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--chip", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mask-ratio", type=float, default=None,
                   help="0 disables masking (all-false mask)")
    p.add_argument("--rgb", nargs=3, default=["B4", "B3", "B2"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_reconstruct)
    return parser


def main(argv=None) -> int:
    try:
        _apply_thread_cap()
        args = build_parser().parse_args(argv)
        return args.func(args) or 0
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except GradientError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
