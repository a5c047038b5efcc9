"""Batched torch versions of the reverse kernel and the masked loss.

These mirror ``diffusion.posterior_factor`` and ``diffusion.masked_ce_loss``
but keep the autograd graph, and operate on whole batches of padded states.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .denoiser import DTYPE, Denoiser, ForwardOutput
from .diffusion import LossConfig, NoiseSchedule, TransitionModel
from .npe import PaddedState

CHANNELS = ("X", "E", "P")


@dataclass
class Batch:
    X: torch.Tensor
    E: torch.Tensor
    P: torch.Tensor
    m: torch.Tensor

    def __len__(self) -> int:
        return self.X.shape[0]

    def channel(self, ch: str) -> torch.Tensor:
        return {"X": self.X, "E": self.E, "P": self.P}[ch]

    def index(self, idx) -> "Batch":
        return Batch(self.X[idx], self.E[idx], self.P[idx], self.m[idx])

    def states(self) -> list[PaddedState]:
        return [
            PaddedState(self.X[b].numpy().copy(), self.E[b].numpy().copy(), self.P[b].numpy().copy(), self.m[b].numpy().copy())
            for b in range(len(self))
        ]


def stack(states: Sequence[PaddedState]) -> Batch:
    return Batch(
        torch.as_tensor(np.stack([z.X for z in states]), dtype=torch.long),
        torch.as_tensor(np.stack([z.E for z in states]), dtype=torch.long),
        torch.as_tensor(np.stack([z.P for z in states]), dtype=torch.long),
        torch.as_tensor(np.stack([z.m for z in states]), dtype=torch.long),
    )


def factor_masks(m: torch.Tensor) -> dict[str, torch.Tensor]:
    mb = m.bool()
    N = m.shape[-1]
    pair = mb[:, :, None] & mb[:, None, :]
    upper = torch.triu(torch.ones(N, N, dtype=torch.bool), diagonal=1)
    off = ~torch.eye(N, dtype=torch.bool)
    return {"X": mb, "E": pair & upper, "P": pair & off}


def logits_of(out: ForwardOutput) -> dict[str, torch.Tensor]:
    return {"X": out.X, "E": out.E, "P": out.P}


def run_model(model: Denoiser, z: Batch, t: torch.Tensor, cond=None) -> ForwardOutput:
    if cond is None:
        return model(z.X, z.E, z.P, z.m, t)
    task_ids, targets = cond
    return model(z.X, z.E, z.P, z.m, t, task_ids, targets)


# --------------------------------------------------------------------------
# posterior


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return v.view(v.shape[0], *([1] * (like.dim() - 1)))


def posterior(x0: torch.Tensor, zt: torch.Tensor, alpha, abar_prev, abar_t, marginal: torch.Tensor) -> torch.Tensor:
    """Reverse-step distribution per factor; ``x0`` is ``(B, ..., d)`` probabilities.

    ``alpha``, ``abar_prev`` and ``abar_t`` are ``(B,)`` tensors (per-example step).
    """
    d = x0.shape[-1]
    onehot = F.one_hot(zt, d).to(DTYPE)
    m_j = marginal[zt][..., None]
    al, abp, abt = (_bcast(v, x0) for v in (alpha, abar_prev, abar_t))
    a = al * onehot + (1.0 - al) * m_j
    denom = abt * onehot + (1.0 - abt) * m_j
    w = torch.where(denom > 0, x0 / torch.where(denom > 0, denom, torch.ones_like(denom)), torch.zeros_like(x0))
    wb = abp * w + (1.0 - abp) * w.sum(-1, keepdim=True) * marginal
    p = wb * a
    # factors whose current value has zero marginal (padding) fall back to staying put
    total = p.sum(-1, keepdim=True)
    ok = total > 0
    return torch.where(ok, p / torch.where(ok, total, torch.ones_like(total)), onehot)


class Kernel:
    """Schedule + marginals as tensors, shared by training and RL code."""

    def __init__(self, schedule: NoiseSchedule, transitions: TransitionModel):
        self.schedule = schedule
        self.transitions = transitions
        self.alpha_bar = torch.as_tensor(schedule.alpha_bar, dtype=DTYPE)
        self.marg = {ch: torch.as_tensor(transitions.marginal(ch), dtype=DTYPE) for ch in CHANNELS}

    @property
    def T(self) -> int:
        return self.schedule.T

    def reverse(self, out: ForwardOutput, zt: Batch, t: torch.Tensor) -> dict[str, torch.Tensor]:
        """Posterior over ``z_{t-1}`` for every factor (inactive entries are meaningless)."""
        ab_t = self.alpha_bar[t]
        ab_prev = self.alpha_bar[t - 1]
        alpha = ab_t / ab_prev
        post = {}
        for ch, logits in logits_of(out).items():
            x0 = torch.softmax(logits, dim=-1)
            post[ch] = posterior(x0, zt.channel(ch), alpha, ab_prev, ab_t, self.marg[ch])
        return post

    def forward_sample(self, z0: Batch, t: torch.Tensor, rng: np.random.Generator) -> Batch:
        """Batched ``q_t(. | z_0)`` with per-example steps."""
        masks = factor_masks(z0.m)
        ab = self.alpha_bar[t]
        out = {}
        for ch in CHANNELS:
            cur = z0.channel(ch)
            keep = torch.as_tensor(rng.random(cur.shape)) < _bcast(ab, cur)
            fresh = sample_categorical(self.marg[ch].expand(*cur.shape, -1), rng)
            new = torch.where(keep, cur, fresh)
            out[ch] = torch.where(masks[ch], new, cur)
        E = torch.triu(out["E"], diagonal=1)
        out["E"] = E + E.transpose(1, 2)
        return Batch(out["X"], out["E"], out["P"], z0.m)

    def prior_sample(self, m: torch.Tensor, rng: np.random.Generator) -> Batch:
        B, N = m.shape
        zero = Batch(
            torch.zeros(B, N, dtype=torch.long),
            torch.zeros(B, N, N, dtype=torch.long),
            torch.zeros(B, N, N, dtype=torch.long),
            m,
        )
        return self.forward_sample(zero, torch.full((B,), self.T, dtype=torch.long), rng)


def sample_categorical(probs: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    cdf = probs.detach().cumsum(-1)
    u = torch.as_tensor(rng.random(probs.shape[:-1]), dtype=DTYPE)[..., None] * cdf[..., -1:]
    return (cdf <= u).sum(-1).clamp_max(probs.shape[-1] - 1)


def sample_posterior(post: dict[str, torch.Tensor], zt: Batch, rng: np.random.Generator) -> Batch:
    masks = factor_masks(zt.m)
    out = {}
    for ch in CHANNELS:
        draw = sample_categorical(post[ch], rng)
        out[ch] = torch.where(masks[ch], draw, zt.channel(ch))
    E = torch.triu(out["E"], diagonal=1)
    out["E"] = E + E.transpose(1, 2)
    return Batch(out["X"], out["E"], out["P"], zt.m)


# --------------------------------------------------------------------------
# factor sums


def _gather(p: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    return torch.gather(p, -1, idx[..., None])[..., 0]


def step_logprob(post: dict[str, torch.Tensor], z_prev: Batch) -> torch.Tensor:
    """Per-example ``sum log p(z_{t-1} factor)`` over active factors, shape ``(B,)``."""
    masks = factor_masks(z_prev.m)
    total = 0.0
    for ch in CHANNELS:
        lp = torch.log(_gather(post[ch], z_prev.channel(ch)).clamp_min(1e-300))
        total = total + torch.where(masks[ch], lp, 0.0).flatten(1).sum(1)
    return total


def entropy(post: dict[str, torch.Tensor], m: torch.Tensor) -> torch.Tensor:
    masks = factor_masks(m)
    total = 0.0
    for ch in CHANNELS:
        p = post[ch]
        h = -(p * torch.log(p.clamp_min(1e-300))).sum(-1)
        total = total + torch.where(masks[ch], h, 0.0).flatten(1).sum(1)
    return total


def kl_divergence(post: dict[str, torch.Tensor], ref: dict[str, torch.Tensor], m: torch.Tensor) -> torch.Tensor:
    """Exact sum of per-factor KL(post || ref) over active factors, shape ``(B,)``."""
    masks = factor_masks(m)
    total = 0.0
    for ch in CHANNELS:
        p, q = post[ch], ref[ch]
        kl = (p * (torch.log(p.clamp_min(1e-300)) - torch.log(q.clamp_min(1e-300)))).sum(-1)
        total = total + torch.where(masks[ch], kl, 0.0).flatten(1).sum(1)
    return total


def masked_ce(out: ForwardOutput, z0: Batch, cfg: LossConfig = LossConfig()):
    """Masked cross-entropy per channel, averaged over each example's factors then the batch."""
    masks = factor_masks(z0.m)
    weights = {"X": cfg.lambda_X, "E": cfg.lambda_E, "P": cfg.lambda_P}
    parts = {}
    loss = 0.0
    for ch, logits in logits_of(out).items():
        nll = -_gather(torch.log_softmax(logits, dim=-1), z0.channel(ch))
        mask = masks[ch].to(DTYPE)
        count = mask.flatten(1).sum(1)
        per = (nll * mask).flatten(1).sum(1) / count.clamp_min(1.0)
        parts[ch] = per.mean()
        loss = loss + weights[ch] * parts[ch]
    return loss, parts
