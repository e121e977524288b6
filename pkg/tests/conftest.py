import numpy as np
import pytest
import torch

from satswin.config import ModelConfig, tiny_config

torch.set_num_threads(2)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return tiny_config()


def micro_config(**overrides) -> ModelConfig:
    """Sub-5k-parameter profile for exhaustive finite-difference checks."""
    base = dict(
        patch_size=(1, 2, 2),
        embed_dim=4,
        stage_depths=(1, 1),
        stage_heads=(2, 4),
        window=(2, 2, 2),
        head_dim=2,
        mlp_ratio=2.0,
        mask_ratio=0.75,
        num_bands=2,
        num_timesteps=2,
        input_size=(8, 8),
        decoder_depths=(1, 1),
    )
    base.update(overrides)
    return ModelConfig(**base)


def finite_difference_grads(loss_fn, params: dict[str, torch.Tensor], eps: float = 1e-4,
                            max_coords: int | None = None, seed: int = 0):
    """Independent central-difference gradient oracle.

    Perturbs every coordinate (or a seeded sample of ``max_coords`` per
    tensor) of each parameter and evaluates ``loss_fn`` twice per coordinate.
    Returns {name: (grad_at_sampled_coords, coords)} with flat coordinate
    arrays.
    """
    rng = np.random.default_rng(seed)
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            flat = p.reshape(-1)
            n = flat.numel()
            if max_coords is not None and n > max_coords:
                coords = np.sort(rng.choice(n, size=max_coords, replace=False))
            else:
                coords = np.arange(n)
            g = torch.zeros(len(coords), dtype=p.dtype)
            for j, i in enumerate(coords):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = float(loss_fn())
                flat[i] = orig - eps
                lo = float(loss_fn())
                flat[i] = orig
                g[j] = (hi - lo) / (2.0 * eps)
            out[name] = (g, coords)
    return out


def assert_grads_match(loss_fn, params: dict[str, torch.Tensor], rel_tol: float = 1e-3,
                       eps: float = 1e-4, max_coords: int | None = None, seed: int = 0):
    """Compare autograd gradients against the finite-difference oracle,
    per parameter tensor, at the given relative tolerance."""
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    analytic = {n: (g if g is not None else torch.zeros_like(p))
                for (n, p), g in zip(params.items(), analytic)}
    numeric = finite_difference_grads(loss_fn, params, eps=eps, max_coords=max_coords,
                                      seed=seed)
    failures = []
    for name in params:
        f, coords = numeric[name]
        a = analytic[name].reshape(-1)[coords]
        na, nf = a.norm().item(), f.norm().item()
        if max(na, nf) < 1e-9:
            continue
        rel = (a - f).norm().item() / max(na, nf)
        if rel > rel_tol:
            failures.append(f"{name}: rel err {rel:.3e} (|a|={na:.3e}, |fd|={nf:.3e})")
    assert not failures, "gradient mismatches:\n  " + "\n  ".join(failures)
