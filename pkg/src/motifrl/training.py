"""Denoiser training: data splits, the diffusion loss, exact gradients, PT/SFT loops."""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .denoiser import DTYPE, Denoiser
from .diffusion import LossConfig
from .errors import NonFiniteLoss
from .kernel import Batch, Kernel, masked_ce, run_model, stack
from .molgraph import MolGraph, canonical_key
from .npe import PaddedState

log = logging.getLogger(__name__)


def split_of(g: MolGraph) -> str:
    """Deterministic 8:1:1 train/val/test assignment from the canonical form."""
    h = int(hashlib.sha256(canonical_key(g).encode("utf-8")).hexdigest()[:8], 16) % 10
    return "train" if h < 8 else ("val" if h == 8 else "test")


def split_corpus(corpus: Sequence[MolGraph]) -> dict[str, list[MolGraph]]:
    out: dict[str, list[MolGraph]] = {"train": [], "val": [], "test": []}
    for g in corpus:
        out[split_of(g)].append(g)
    return out


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    lambda_X: float = 1.0
    lambda_E: float = 1.0
    lambda_P: float = 1.0
    eval_every: int = 0  # SFT checkpoint selection period in epochs; 0 disables

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.lambda_X, self.lambda_E, self.lambda_P)


def diffusion_loss(
    model: Denoiser,
    kernel: Kernel,
    z0: Batch,
    rng: np.random.Generator,
    cond=None,
    cfg: LossConfig = LossConfig(),
    t: torch.Tensor | None = None,
):
    """Masked CE of endpoint predictions at uniformly drawn steps ``t`` in ``1..T``."""
    if t is None:
        t = torch.as_tensor(rng.integers(1, kernel.T + 1, size=len(z0)), dtype=torch.long)
    zt = kernel.forward_sample(z0, t, rng)
    out = run_model(model, zt, t, cond)
    return masked_ce(out, z0, cfg)


def gradients(model: torch.nn.Module, loss_fn: Callable[[], torch.Tensor]) -> dict[str, np.ndarray]:
    """Exact gradients of ``loss_fn()`` for every named parameter."""
    model.zero_grad(set_to_none=False)
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss.item()}")
    loss.backward()
    return {
        name: (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape)))
        for name, p in model.named_parameters()
    }


def train_denoiser(
    model: Denoiser,
    kernel: Kernel,
    states: Sequence[PaddedState],
    cfg: TrainConfig,
    rng: np.random.Generator,
    conditions: Sequence[tuple[int, float]] | None = None,
    evaluate: Callable[[Denoiser], float] | None = None,
) -> dict:
    """Adam on the masked diffusion loss; conditional when ``conditions`` is given.

    With ``evaluate`` and ``cfg.eval_every`` set, the parameters with the lowest
    evaluation score are restored at the end.
    """
    data = stack(states)
    cond_all = model.encode_conditions(conditions) if conditions is not None else None
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = {"loss": [], "eval": []}
    best = (float("inf"), None)
    n = len(data)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(perm[start : start + cfg.batch_size])
            cond = None if cond_all is None else (cond_all[0][idx], cond_all[1][idx])
            loss, _ = diffusion_loss(model, kernel, data.index(idx), rng, cond, cfg.loss)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}: loss is {loss.item()}")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            losses.append(loss.item())
        history["loss"].append(float(np.mean(losses)))
        log.info("epoch %d loss %.4f", epoch, history["loss"][-1])
        if evaluate is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            score = evaluate(model)
            history["eval"].append((epoch, score))
            if score < best[0]:
                best = (score, copy.deepcopy(model.state_dict()))
    if best[1] is not None:
        model.load_state_dict(best[1])
    return history


def to_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)
