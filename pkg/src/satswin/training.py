"""Pretraining objective, optimizer and schedule mechanics, and the desk-
scale pretrain/finetune loops.

Every source of loop randomness (batch choice, per-sample masks) is a pure
function of (seed, step), so runs are reproducible and resume is exact.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .config import ArchOptions, HeadConfig, ModelConfig
from .masking import MaskError, MaskSpec, generate_window_mask
from .metrics import ConfusionMatrix, regression_metrics
from .model import MaskedAutoencoder, SwinUNet, transfer_weights
from .patching import ShapeError


class ScheduleError(ValueError):
    """Raised when a schedule is queried outside its step domain."""


class GradientError(RuntimeError):
    """Raised when a non-finite gradient reaches the optimizer."""


@dataclass
class ScheduleConfig:
    """One-cycle cosine schedule: linear warmup from max_lr/start_div to
    max_lr over ``warmup_frac`` of the run, then cosine decay to
    max_lr/final_div."""

    max_lr: float = 1e-5
    total_steps: int = 100
    warmup_frac: float = 0.1
    start_div: float = 25.0
    final_div: float = 1e4

    def __post_init__(self):
        if not (0.0 < self.warmup_frac < 1.0):
            raise ScheduleError(f"warmup fraction must lie in (0, 1), got {self.warmup_frac}")

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_frac * self.total_steps)))


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Learning rate at ``step`` in [0, total_steps]; peak is exactly max_lr
    at the warmup end."""
    if not (0 <= step <= sched.total_steps):
        raise ScheduleError(f"step {step} outside [0, {sched.total_steps}]")
    w = sched.warmup_steps
    start = sched.max_lr / sched.start_div
    floor = sched.max_lr / sched.final_div
    if step <= w:
        return start + (sched.max_lr - start) * (step / w)
    span = sched.total_steps - w
    if span <= 0:
        return sched.max_lr
    frac = (step - w) / span
    return floor + (sched.max_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


def _mask_to_pixels(mask: Tensor, patch: tuple[int, int, int]) -> Tensor:
    pt, ph, pw = patch
    m = mask
    if pt > 1:
        m = m.repeat_interleave(pt, dim=-3)
    if ph > 1:
        m = m.repeat_interleave(ph, dim=-2)
    if pw > 1:
        m = m.repeat_interleave(pw, dim=-1)
    return m


def mae_loss(pred: Tensor, target: Tensor, mask: Tensor | np.ndarray,
             patch: tuple[int, int, int], masked_only: bool = True) -> Tensor:
    """Mean squared reconstruction error over pixels of masked patches.

    Args:
        pred, target: cubes [..., T, H, W, B], identical shapes.
        mask: boolean token mask [T/pt, Gh, Gw], optionally with leading batch
            axes matching the cubes'.
        patch: (pt, ph, pw) mapping tokens back to pixel blocks.
        masked_only: average over masked pixels only (default); otherwise a
            plain all-pixel MSE.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if not masked_only:
        return ((pred - target) ** 2).mean()
    if isinstance(mask, np.ndarray):
        mask = torch.from_numpy(mask)
    mask = mask.to(device=pred.device)
    pix = _mask_to_pixels(mask, patch).to(pred.dtype)[..., None]
    diff2 = (pred - target) ** 2
    weight = torch.ones_like(diff2) * pix
    count = weight.sum()
    if count.item() == 0:
        raise MaskError("mae_loss over an empty mask")
    return (diff2 * weight).sum() / count


@dataclass
class OptimState:
    """Decoupled-weight-decay Adam state: per-parameter moment accumulators,
    shared step counter, and the hyperparameters."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    exp_avg: dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, Tensor] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, Tensor],
               state: OptimState, lr: float) -> tuple[dict[str, Tensor], OptimState]:
    """One AdamW update (in place) with bias-corrected moments.

    Non-finite gradients abort with a diagnostic naming the parameter.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise GradientError(f"non-finite gradient in parameter '{name}'")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in state.exp_avg:
                state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            m, v = state.exp_avg[name], state.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / bc1
            v_hat = v / bc2
            if state.weight_decay:
                p.mul_(1.0 - lr * state.weight_decay)
            p.addcdiv_(m_hat, v_hat.sqrt().add_(state.eps), value=-lr)
    return params, state


@dataclass
class LoopConfig:
    """Desk-scale training-loop settings shared by pretrain and finetune."""

    steps: int = 200
    batch_size: int = 2
    weight_decay: float = 0.05
    log_every: int = 10
    eval_every: int = 50
    recon_every: int = 0
    masked_only: bool = True
    freeze_encoder: bool = False
    class_weights: tuple[float, ...] | None = None

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        if d["class_weights"] is not None:
            d["class_weights"] = list(d["class_weights"])
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "LoopConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown loop config keys: {', '.join(unknown)}")
        doc = dict(doc)
        if doc.get("class_weights") is not None:
            doc["class_weights"] = tuple(doc["class_weights"])
        return cls(**doc)


def _batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(1, step))))
    return gen.integers(0, n, size=batch_size)


def mask_seed_for(seed: int, step: int, sample: int) -> int:
    """Stable per-(step, sample) mask seed derived from the run seed."""
    return int(np.random.SeedSequence(seed, spawn_key=(2, step, sample)).generate_state(1)[0])


def _named_trainable(model: torch.nn.Module) -> dict[str, Tensor]:
    return {n: p for n, p in model.named_parameters() if p.requires_grad}


def _collect_grads(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {n: p.grad for n, p in params.items() if p.grad is not None}


def _zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


@dataclass
class PretrainResult:
    model: MaskedAutoencoder
    history: list[tuple[int, float]]
    optim: OptimState

    @property
    def final_loss(self) -> float:
        return self.history[-1][1]


def pretrain(cfg: ModelConfig, cubes: Sequence[np.ndarray], loop: LoopConfig,
             sched: ScheduleConfig, seed: int, arch: ArchOptions | None = None,
             model: MaskedAutoencoder | None = None, optim: OptimState | None = None,
             start_step: int = 0, stop_step: int | None = None, out_dir=None,
             recon_callback: Callable[[int, MaskedAutoencoder], None] | None = None,
             log: Callable[[str], None] | None = None) -> PretrainResult:
    """Run the masked-autoencoding loop over a cube dataset.

    Fully seeded: two runs with identical arguments produce identical loss
    curves. The schedule always spans ``loop.steps``; ``stop_step`` truncates
    a run early, and resuming from its (model, optim, start_step) continues
    the exact uninterrupted trajectory.
    """
    if len(cubes) == 0:
        raise ValueError("pretraining dataset is empty")
    arch = arch or ArchOptions()
    if model is None:
        torch.manual_seed(seed)
        model = MaskedAutoencoder(cfg, arch)
    optim = optim or OptimState(weight_decay=loop.weight_decay)
    sched = replace(sched, total_steps=loop.steps)
    stop_step = loop.steps if stop_step is None else min(stop_step, loop.steps)
    t_tok, gh, gw = cfg.token_grid
    window_hw = (cfg.window[1], cfg.window[2]) if arch.window_aligned_masking else None
    data = np.stack([np.asarray(c, dtype=np.float32) for c in cubes])
    history: list[tuple[int, float]] = []
    params = _named_trainable(model)
    model.train()
    for step in range(start_step, stop_step):
        idx = _batch_indices(seed, step, len(data), loop.batch_size)
        batch = torch.from_numpy(data[idx])
        masks = np.stack([
            generate_window_mask(t_tok, gh, gw, cfg.mask_ratio,
                                 mask_seed_for(seed, step, i), window_hw=window_hw).mask
            for i in range(loop.batch_size)
        ])
        recon = model(batch, torch.from_numpy(masks))
        loss = mae_loss(recon, batch, masks, cfg.patch_size, masked_only=loop.masked_only)
        loss.backward()
        adamw_step(params, _collect_grads(params), optim, lr_at(step, sched))
        _zero_grads(params)
        history.append((step, float(loss.detach())))
        if log and loop.log_every and step % loop.log_every == 0:
            log(f"step {step}: masked mse {history[-1][1]:.6f}")
        if recon_callback and loop.recon_every and (step + 1) % loop.recon_every == 0:
            model.eval()
            with torch.no_grad():
                recon_callback(step, model)
            model.train()
    model.eval()
    if out_dir is not None:
        write_csv(out_dir / "loss.csv", ["step", "loss"], history)
    return PretrainResult(model=model, history=history, optim=optim)


def finetune_loss(model: SwinUNet, batch: Tensor, labels: Tensor,
                  head: HeadConfig, class_weights: Tensor | None = None) -> Tensor:
    """Per-pixel cross-entropy (segmentation) or MSE (regression)."""
    out = model(batch, raw=True)
    if head.task == "segmentation":
        if labels.shape != out.shape[:-1]:
            raise ShapeError(
                f"label shape {tuple(labels.shape)} does not match logits "
                f"{tuple(out.shape[:-1])}"
            )
        k = out.shape[-1]
        return F.cross_entropy(out.reshape(-1, k), labels.reshape(-1).long(),
                               weight=class_weights)
    if labels.shape != out.shape[:-1]:
        raise ShapeError(
            f"label shape {tuple(labels.shape)} does not match prediction "
            f"{tuple(out.shape[:-1])}"
        )
    return ((out[..., 0] - labels.to(out.dtype)) ** 2).mean()


def evaluate_segmentation(model: SwinUNet, dataset, num_classes: int,
                          batch_size: int = 4) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    model.eval()
    with torch.no_grad():
        for i in range(0, len(dataset), batch_size):
            chunk = dataset[i:i + batch_size]
            batch = torch.from_numpy(np.stack([c for c, _ in chunk]))
            labels = np.stack([lab for _, lab in chunk])
            pred = model(batch).argmax(dim=-1).numpy()
            cm.accumulate(pred, labels)
    return cm


def evaluate_regression(model: SwinUNet, dataset, batch_size: int = 4) -> dict[str, float]:
    preds, labs = [], []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(dataset), batch_size):
            chunk = dataset[i:i + batch_size]
            batch = torch.from_numpy(np.stack([c for c, _ in chunk]))
            preds.append(model(batch)[..., 0].numpy())
            labs.append(np.stack([lab for _, lab in chunk]))
    return regression_metrics(np.concatenate(preds), np.concatenate(labs))


@dataclass
class FinetuneResult:
    model: SwinUNet
    history: list[dict]
    optim: OptimState

    def history_rows(self) -> tuple[list[str], list[list]]:
        if not self.history:
            return [], []
        header = list(self.history[0].keys())
        return header, [[row[h] for h in header] for row in self.history]


def finetune(cfg: ModelConfig, head: HeadConfig, dataset, loop: LoopConfig,
             sched: ScheduleConfig, seed: int, arch: ArchOptions | None = None,
             init_state: dict[str, Tensor] | None = None,
             init_cfg: ModelConfig | None = None,
             eval_dataset=None, out_dir=None,
             log: Callable[[str], None] | None = None) -> FinetuneResult:
    """Supervised finetuning of the skip-connected network.

    Args:
        dataset: sequence of (cube [T, H, W, B] float32, label) pairs; labels
            are [T_out, H, W] integer maps (segmentation) or real maps
            (regression).
        init_state: pretrained tensor dict to transfer from (with its config
            ``init_cfg``); None trains from scratch.
    """
    if len(dataset) == 0:
        raise ValueError("finetuning dataset is empty")
    arch = arch or ArchOptions()
    head = head.resolved(cfg)
    torch.manual_seed(seed)
    model = SwinUNet(cfg, head, arch)
    if init_state is not None:
        if init_cfg is None:
            raise ValueError("init_cfg is required when init_state is given")
        transfer_weights(init_state, init_cfg, model, cfg)
    if loop.freeze_encoder:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    params = _named_trainable(model)
    optim = OptimState(weight_decay=loop.weight_decay)
    sched = replace(sched, total_steps=loop.steps)
    eval_dataset = eval_dataset if eval_dataset is not None else dataset
    weights = (torch.tensor(loop.class_weights, dtype=torch.float32)
               if loop.class_weights is not None else None)
    cubes = np.stack([np.asarray(c, dtype=np.float32) for c, _ in dataset])
    labels = np.stack([np.asarray(l) for _, l in dataset])
    label_tensor = torch.from_numpy(labels)
    history: list[dict] = []

    def run_eval(step: int, loss_val: float) -> None:
        row: dict = {"step": step, "loss": loss_val}
        if head.task == "segmentation":
            cm = evaluate_segmentation(model, eval_dataset, head.num_classes)
            row.update(miou=cm.miou(), macc=cm.macc(), overall_acc=cm.overall_acc())
            for c in range(head.num_classes):
                row[f"iou_{c}"] = cm.iou(c) if cm.class_support(c) else float("nan")
        else:
            row.update(evaluate_regression(model, eval_dataset))
        history.append(row)
        if log:
            brief = ", ".join(f"{k}={v:.4f}" for k, v in row.items()
                              if k != "step" and not math.isnan(v))
            log(f"step {step}: {brief}")
        model.train()

    model.train()
    loss_val = float("nan")
    for step in range(loop.steps):
        idx = _batch_indices(seed, step, len(cubes), loop.batch_size)
        batch = torch.from_numpy(cubes[idx])
        lab = label_tensor[idx]
        loss = finetune_loss(model, batch, lab, head, weights)
        loss.backward()
        adamw_step(params, _collect_grads(params), optim, lr_at(step, sched))
        _zero_grads(params)
        loss_val = float(loss.detach())
        if loop.eval_every and (step + 1) % loop.eval_every == 0:
            run_eval(step, loss_val)
    if not history or history[-1]["step"] != loop.steps - 1:
        run_eval(loop.steps - 1, loss_val)
    model.eval()
    if out_dir is not None:
        header, rows = FinetuneResult(model, history, optim).history_rows()
        write_csv(out_dir / "metrics.csv", header, rows)
    return FinetuneResult(model=model, history=history, optim=optim)
