"""Scikit-learn style estimator wrappers around the pretraining and
finetuning machinery, so the networks compose with the wider ecosystem
(get_params/set_params, clone, pipelines).

All estimators consume cube batches [N, T, H, W, B] with reflectance values
in [0, 1] (see :mod:`satswin.validation` for the accepted forms).
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .checkpoint import Checkpoint, load_checkpoint
from .config import ArchOptions, HeadConfig, ModelConfig, ensure_valid
from .masking import generate_window_mask
from .training import (LoopConfig, ScheduleConfig, evaluate_segmentation, finetune,
                       mae_loss, pretrain)
from .validation import ValidationError, check_cube_batch, check_label_batch


def infer_config(shape: tuple[int, int, int, int], embed_dim: int = 32,
                 head_dim: int = 32, mask_ratio: float = 0.75) -> ModelConfig:
    """Derive a small valid config from a data shape (T, H, W, B)."""
    t, h, w, b = shape
    for p in (4, 2, 1):
        if h % p == 0 and w % p == 0:
            break
    gh, gw = h // p, w // p
    stages = 2 if (gh % 2 == 0 and gw % 2 == 0 and gh >= 4 and gw >= 4) else 1
    heads0 = max(1, embed_dim // head_dim)
    return ModelConfig(
        patch_size=(1, p, p),
        embed_dim=embed_dim,
        stage_depths=(1,) * stages,
        stage_heads=tuple(heads0 * (2 ** i) for i in range(stages)),
        window=(t, min(4, gh, gw), min(4, gh, gw)),
        head_dim=head_dim,
        mlp_ratio=2.0,
        mask_ratio=mask_ratio,
        num_bands=b,
        num_timesteps=t,
        input_size=(h, w),
        decoder_depths=(1,) * stages,
    )


def _resolve_init(init_checkpoint) -> Checkpoint | None:
    if init_checkpoint is None:
        return None
    if isinstance(init_checkpoint, Checkpoint):
        return init_checkpoint
    return load_checkpoint(init_checkpoint)


class SwinMAE(TransformerMixin, BaseEstimator):
    """Self-supervised masked-autoencoder estimator.

    ``fit`` pretrains on unlabeled cubes; ``transform`` reconstructs cubes
    through the full encoder/decoder under a fresh random mask; ``score``
    returns the negative masked reconstruction MSE (higher is better).

    Args:
        config: explicit ModelConfig; inferred from the data when None.
        steps: optimizer steps.
        batch_size: samples per step.
        max_lr: one-cycle peak learning rate.
        mask_ratio: override of the config's masking ratio.
        weight_decay: AdamW decoupled decay.
        seed: controls init, batching, and masks; fits are reproducible.
    """

    def __init__(self, config: ModelConfig | None = None, *, steps: int = 200,
                 batch_size: int = 2, max_lr: float = 1e-3,
                 mask_ratio: float | None = None, weight_decay: float = 0.05,
                 seed: int = 0, verbose: int = 0):
        self.config = config
        self.steps = steps
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.mask_ratio = mask_ratio
        self.weight_decay = weight_decay
        self.seed = seed
        self.verbose = verbose

    def _config_for(self, X: np.ndarray) -> ModelConfig:
        cfg = self.config if self.config is not None else infer_config(X.shape[1:])
        if self.mask_ratio is not None:
            cfg = ModelConfig(**{**cfg.to_dict(), "mask_ratio": self.mask_ratio})
        ensure_valid(cfg, X.shape[1:])
        return cfg

    def fit(self, X, y=None):
        X = check_cube_batch(X)
        self.config_ = self._config_for(X)
        result = pretrain(
            self.config_, list(X),
            LoopConfig(steps=self.steps, batch_size=self.batch_size,
                       weight_decay=self.weight_decay),
            ScheduleConfig(max_lr=self.max_lr, total_steps=self.steps),
            seed=self.seed,
            log=print if self.verbose else None,
        )
        self.model_ = result.model
        self.history_ = result.history
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ValidationError("estimator is not fitted; call fit first")

    def transform(self, X) -> np.ndarray:
        """Masked-reconstruction of each cube (mask drawn from ``seed``)."""
        return self.reconstruct(X)

    def reconstruct(self, X, mask_seed: int = 0, mask_ratio: float | None = None) -> np.ndarray:
        self._check_fitted()
        X = check_cube_batch(X)
        cfg = self.config_
        ratio = mask_ratio if mask_ratio is not None else cfg.mask_ratio
        t, gh, gw = cfg.token_grid
        masks = np.stack([
            generate_window_mask(t, gh, gw, ratio, mask_seed + i).mask
            for i in range(len(X))
        ])
        with torch.no_grad():
            out = self.model_(torch.from_numpy(X), torch.from_numpy(masks))
        return out.numpy()

    def score(self, X, y=None) -> float:
        """Negative masked MSE under seeded masks."""
        self._check_fitted()
        X = check_cube_batch(X)
        cfg = self.config_
        t, gh, gw = cfg.token_grid
        masks = np.stack([
            generate_window_mask(t, gh, gw, cfg.mask_ratio, self.seed + i).mask
            for i in range(len(X))
        ])
        with torch.no_grad():
            recon = self.model_(torch.from_numpy(X), torch.from_numpy(masks))
            loss = mae_loss(recon, torch.from_numpy(X), masks, cfg.patch_size)
        return -float(loss)


class _SwinUNetBase(BaseEstimator):
    _task = "segmentation"

    def _head_config(self) -> HeadConfig:
        raise NotImplementedError

    def _fit(self, X, y):
        X = check_cube_batch(X)
        cfg = self.config if self.config is not None else infer_config(X.shape[1:])
        ensure_valid(cfg, X.shape[1:])
        head = self._head_config()
        y = check_label_batch(y, len(X), head.task,
                              getattr(self, "num_classes", None))
        init = _resolve_init(self.init_checkpoint)
        result = finetune(
            cfg, head, list(zip(X, y)),
            LoopConfig(steps=self.steps, batch_size=self.batch_size,
                       weight_decay=self.weight_decay, eval_every=0,
                       freeze_encoder=self.freeze_encoder),
            ScheduleConfig(max_lr=self.max_lr, total_steps=self.steps),
            seed=self.seed,
            init_state=init.state_dict() if init else None,
            init_cfg=init.config if init else None,
            log=print if self.verbose else None,
        )
        self.config_ = cfg
        self.head_ = head.resolved(cfg)
        self.model_ = result.model
        self.history_ = result.history
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ValidationError("estimator is not fitted; call fit first")

    def _forward(self, X) -> torch.Tensor:
        self._check_fitted()
        X = check_cube_batch(X)
        with torch.no_grad():
            return self.model_(torch.from_numpy(X))


class SwinUNetSegmenter(_SwinUNetBase):
    """Per-pixel classifier over time-series cubes.

    ``fit(X, y)`` expects label maps [N, T_out, H, W]; ``predict`` returns
    argmax maps of the same shape, ``predict_proba`` per-pixel softmax,
    ``score`` the mean IoU on the given data.
    """

    def __init__(self, config: ModelConfig | None = None, *, num_classes: int = 2,
                 steps: int = 200, batch_size: int = 2, max_lr: float = 1e-3,
                 weight_decay: float = 0.05, out_timesteps: int = 1,
                 use_skips: bool = True, init_checkpoint=None,
                 freeze_encoder: bool = False, seed: int = 0, verbose: int = 0):
        self.config = config
        self.num_classes = num_classes
        self.steps = steps
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.weight_decay = weight_decay
        self.out_timesteps = out_timesteps
        self.use_skips = use_skips
        self.init_checkpoint = init_checkpoint
        self.freeze_encoder = freeze_encoder
        self.seed = seed
        self.verbose = verbose

    def _head_config(self) -> HeadConfig:
        return HeadConfig(task="segmentation", num_classes=self.num_classes,
                          out_timesteps=self.out_timesteps, use_skips=self.use_skips)

    def fit(self, X, y):
        return self._fit(X, y)

    def predict(self, X) -> np.ndarray:
        return self._forward(X).argmax(dim=-1).numpy()

    def predict_proba(self, X) -> np.ndarray:
        return self._forward(X).softmax(dim=-1).numpy()

    def score(self, X, y) -> float:
        """Mean IoU of predictions against ``y``."""
        self._check_fitted()
        X = check_cube_batch(X)
        y = check_label_batch(y, len(X), "segmentation", self.num_classes)
        cm = evaluate_segmentation(self.model_, list(zip(X, y)), self.num_classes)
        return cm.miou()


class SwinUNetRegressor(_SwinUNetBase):
    """Per-pixel regressor (outputs clamped to [0, 100] at inference).

    ``score`` returns the negative MSE so that higher is better.
    """

    def __init__(self, config: ModelConfig | None = None, *, steps: int = 200,
                 batch_size: int = 2, max_lr: float = 1e-3,
                 weight_decay: float = 0.05, out_timesteps: int = 1,
                 use_skips: bool = True, init_checkpoint=None,
                 freeze_encoder: bool = False, seed: int = 0, verbose: int = 0):
        self.config = config
        self.steps = steps
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.weight_decay = weight_decay
        self.out_timesteps = out_timesteps
        self.use_skips = use_skips
        self.init_checkpoint = init_checkpoint
        self.freeze_encoder = freeze_encoder
        self.seed = seed
        self.verbose = verbose

    def _head_config(self) -> HeadConfig:
        return HeadConfig(task="regression", out_timesteps=self.out_timesteps,
                          use_skips=self.use_skips)

    def fit(self, X, y):
        return self._fit(X, y)

    def predict(self, X) -> np.ndarray:
        return self._forward(X)[..., 0].numpy()

    def score(self, X, y) -> float:
        X = check_cube_batch(X)
        y = check_label_batch(y, len(X), "regression")
        pred = self.predict(X)
        return -float(np.mean((pred - y) ** 2))
