"""Shared test utilities: tiny float64 models and a finite-difference checker."""
import numpy as np
import torch

from shufflepred.losses import Batch, LossWeights, objective
from shufflepred.model import ModelBundle, NetConfig

GRAD_CFG = NetConfig(height=8, width=8, channels=2, latent_dim=4, lstm_hidden=2, context=3)
GRAD_WEIGHTS = LossWeights(lambda2=1.0, lambda4=1.0, beta=1.0)


def tiny_batch(cfg: NetConfig, b: int = 2, k: int = 3, seed: int = 0, dtype=torch.float64) -> Batch:
    g = torch.Generator().manual_seed(seed)
    t = cfg.context
    frames = torch.rand(b, t + k, 1, cfg.height, cfg.width, generator=g, dtype=dtype)
    flows = torch.rand(b, t + k - 1, 2, cfg.height, cfg.width, generator=g, dtype=dtype)
    return Batch(frames, flows, t, k)


def finite_difference_check(bundle: ModelBundle, batch: Batch, name: str, weights: LossWeights = GRAD_WEIGHTS,
                            h: float = 1e-5, floor: float = 1e-6, permutation=(2, 0, 1)) -> dict:
    """Compare autograd against central differences for every parameter entry.

    Relative error is |a - n| / max(|a|, |n|, floor). Parameters outside the
    objective's graph must have an exactly-zero analytic gradient, which is
    what a finite difference of a function that ignores them returns.
    """
    perm = np.asarray(permutation)
    f = lambda: objective(bundle, batch, weights, name, permutation=perm)  # noqa: E731
    bundle.zero_grad(set_to_none=True)
    f().backward()
    worst, worst_at, checked, unused = 0.0, None, 0, 0
    with torch.no_grad():
        for pname, p in bundle.named_parameters():
            if not p.requires_grad:
                continue
            if p.grad is None:
                unused += p.numel()
                continue
            grad = p.grad.detach().reshape(-1).clone()
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                a = grad[i].item()
                err = abs(a - num) / max(abs(a), abs(num), floor)
                if err > worst:
                    worst, worst_at = err, (pname, i, a, num)
                checked += 1
    return {"max_rel_err": worst, "worst": worst_at, "checked": checked, "unused": unused}


def tiny_bundle(cfg: NetConfig = GRAD_CFG, seed: int = 0) -> ModelBundle:
    return ModelBundle(cfg, seed=seed).double()
