"""Input validation helpers for the estimator API and ingestion paths."""

from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """Raised when user-supplied arrays violate the data contracts."""


def check_time_cube(x, name: str = "cube") -> np.ndarray:
    """Validate one [T, H, W, B] reflectance cube: finite, in [0, 1],
    float32."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4:
        raise ValidationError(f"{name} must be rank 4 [T, H, W, B], got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValidationError(f"{name} contains non-finite values")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValidationError(f"{name} values must lie in [0, 1], "
                              f"found range [{x.min():.4g}, {x.max():.4g}]")
    return x


def check_cube_batch(X, name: str = "X") -> np.ndarray:
    """Coerce a batch of cubes to [N, T, H, W, B]: accepts a rank-5 array, a
    rank-4 single cube, or a sequence of rank-4 cubes."""
    if isinstance(X, np.ndarray) and X.ndim == 5:
        batch = X.astype(np.float32)
    elif isinstance(X, np.ndarray) and X.ndim == 4:
        batch = X.astype(np.float32)[None]
    else:
        try:
            cubes = [check_time_cube(x, f"{name}[{i}]") for i, x in enumerate(X)]
        except (TypeError, ValidationError) as exc:
            raise ValidationError(
                f"{name} must be [N, T, H, W, B], one cube, or a sequence of cubes"
            ) from exc
        if not cubes:
            raise ValidationError(f"{name} is empty")
        shapes = {c.shape for c in cubes}
        if len(shapes) != 1:
            raise ValidationError(f"{name} cubes have inconsistent shapes: {sorted(shapes)}")
        return np.stack(cubes)
    if not np.isfinite(batch).all():
        raise ValidationError(f"{name} contains non-finite values")
    if batch.size and (batch.min() < 0.0 or batch.max() > 1.0):
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return batch


def check_label_batch(y, n: int, task: str, num_classes: int | None = None,
                      name: str = "y") -> np.ndarray:
    """Validate [N, T_out, H, W] label maps for the given task."""
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[:, None] if y.shape[0] == n else y[None]
    if y.ndim != 4 or y.shape[0] != n:
        raise ValidationError(
            f"{name} must be [N={n}, T_out, H, W] label maps, got shape {y.shape}"
        )
    if task == "segmentation":
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValidationError(f"{name} segmentation labels must be integers")
        y = y.astype(np.int64)
        if num_classes is not None and y.size and (y.min() < 0 or y.max() >= num_classes):
            raise ValidationError(
                f"{name} labels must lie in [0, {num_classes}), found "
                f"[{y.min()}, {y.max()}]"
            )
        return y
    return y.astype(np.float32)
