"""Reverse diffusion as a terminal-reward MDP, optimized with clipped PPO.

A rollout samples a mask and ``z_T`` from the prior, then steps the current
policy's reverse kernel down to ``z_0``. Only the last ``suffix_steps``
transitions are recorded for the update; their log-probabilities and value
estimates are frozen at collection time.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .denoiser import DTYPE, Denoiser
from .diffusion import MaskPrior, sample_mask
from .errors import EmptyBatch, MaskMismatch, MotifRLError, NonFiniteLoss
from .kernel import Batch, Kernel, entropy, kl_divergence, run_model, sample_posterior, stack, step_logprob
from .molgraph import MolGraph, check_validity
from .npe import MotifVocab, PaddedState, decode
from .oracle import TaskSpec, discrepancy, evaluate, shape

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Condition:
    task: int
    target: float


@dataclass
class PPOConfig:
    clip_eps: float = 0.2
    c_value: float = 0.5
    c_entropy: float = 0.001
    c_kl: float = 0.01
    suffix_steps: int = 30
    batch_size: int = 32
    update_passes: int = 2
    w_val: float = 0.1
    epochs: int = 200
    seed: int = 0
    lr: float = 1e-4
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if min(self.c_value, self.c_entropy, self.c_kl) < 0:
            raise ValueError("loss coefficients must be non-negative")


# --------------------------------------------------------------------------
# reward


def decode_or_none(z0: PaddedState, vocab: MotifVocab) -> MolGraph | None:
    try:
        return decode(z0, vocab)
    except MotifRLError:
        return None


def terminal_reward(z0: PaddedState, cond: Condition, task: TaskSpec, w_val: float, vocab: MotifVocab) -> float:
    """``w_val * r_val + (1 - w_val) * r_prop``; decode failures count as invalid."""
    g = decode_or_none(z0, vocab)
    return reward_for_molecule(g, cond, task, w_val)


def reward_for_molecule(g: MolGraph | None, cond: Condition, task: TaskSpec, w_val: float) -> float:
    if g is None or not check_validity(g).is_valid:
        return -w_val
    d = discrepancy(evaluate(g, task), cond.target, task)
    return w_val + (1.0 - w_val) * shape(d, task)


# --------------------------------------------------------------------------
# log-probabilities


def reverse_step(model: Denoiser, kernel: Kernel, zt: Batch, t: torch.Tensor, cond=None):
    out = run_model(model, zt, t, cond)
    return kernel.reverse(out, zt, t), out.value


def step_logprob_single(
    model: Denoiser, kernel: Kernel, zt: PaddedState, z_prev: PaddedState, t: int, cond: Condition | None = None
) -> float:
    """``log p(z_{t-1} | z_t, t, c)`` summed over the active factors."""
    if not np.array_equal(zt.m, z_prev.m):
        raise MaskMismatch("z_t and z_{t-1} have different masks")
    kernel.schedule.check(t, lo=1)
    enc = None if cond is None else model.encode_conditions([(cond.task, cond.target)])
    with torch.no_grad():
        post, _ = reverse_step(model, kernel, stack([zt]), torch.tensor([t]), enc)
        return float(step_logprob(post, stack([z_prev]))[0])


# --------------------------------------------------------------------------
# rollouts


@dataclass
class Trajectory:
    condition: Condition
    m: np.ndarray
    states: list[PaddedState]  # z_T, ..., z_0
    steps: list[int]  # recorded t values, descending
    old_logprob: np.ndarray
    values: np.ndarray
    reward: float
    valid: bool


@dataclass
class RolloutBatch:
    """Recorded suffix transitions of a batch of trajectories, step-major."""

    conditions: list[Condition]
    zt: Batch  # (K * B) states, step-major
    z_prev: Batch
    t: torch.Tensor
    old_logprob: torch.Tensor
    values: torch.Tensor
    rewards: torch.Tensor  # (B,)
    valid: np.ndarray
    final: list[PaddedState] = field(default_factory=list)

    @property
    def n_traj(self) -> int:
        return len(self.conditions)

    @property
    def n_steps(self) -> int:
        return len(self.t) // self.n_traj


def _repeat_cond(enc, k: int):
    if enc is None:
        return None
    return enc[0].repeat(k), enc[1].repeat(k)


def generate(
    model: Denoiser,
    kernel: Kernel,
    prior: MaskPrior,
    conditions: Sequence[Condition] | None,
    rng: np.random.Generator,
    n: int | None = None,
    record_from: int = 0,
    keep_states: bool = False,
):
    """Run the reverse chain for a batch; returns ``(z_0 batch, records, states)``.

    ``records`` lists ``(t, z_t, z_{t-1}, logprob, value)`` for every ``t <= record_from``.
    """
    B = len(conditions) if conditions is not None else n
    masks = torch.as_tensor(np.stack([sample_mask(prior, rng) for _ in range(B)]))
    enc = None
    if conditions is not None:
        enc = model.encode_conditions([(c.task, c.target) for c in conditions])
    z = kernel.prior_sample(masks, rng)
    records = []
    states = [z] if keep_states else []
    with torch.no_grad():
        for t in range(kernel.T, 0, -1):
            tt = torch.full((B,), t, dtype=torch.long)
            post, value = reverse_step(model, kernel, z, tt, enc)
            z_prev = sample_posterior(post, z, rng)
            if t <= record_from:
                records.append((t, z, z_prev, step_logprob(post, z_prev), value))
            z = z_prev
            if keep_states:
                states.append(z)
    return z, records, states


def collect_rollouts(
    model: Denoiser,
    kernel: Kernel,
    prior: MaskPrior,
    conditions: Sequence[Condition],
    tasks: Sequence[TaskSpec],
    vocab: MotifVocab,
    cfg: PPOConfig,
    rng: np.random.Generator,
) -> RolloutBatch:
    K = min(cfg.suffix_steps, kernel.T)
    z0, records, _ = generate(model, kernel, prior, conditions, rng, record_from=K)
    final = z0.states()
    rewards, valid = [], []
    for z, c in zip(final, conditions):
        g = decode_or_none(z, vocab)
        ok = g is not None and check_validity(g).is_valid
        valid.append(ok)
        rewards.append(reward_for_molecule(g, c, tasks[c.task], cfg.w_val))

    def cat(batches: list[Batch]) -> Batch:
        return Batch(*(torch.cat([getattr(b, f) for b in batches]) for f in ("X", "E", "P", "m")))

    return RolloutBatch(
        conditions=list(conditions),
        zt=cat([r[1] for r in records]),
        z_prev=cat([r[2] for r in records]),
        t=torch.cat([torch.full((len(conditions),), r[0], dtype=torch.long) for r in records]),
        old_logprob=torch.cat([r[3] for r in records]),
        values=torch.cat([r[4] for r in records]),
        rewards=torch.as_tensor(rewards, dtype=DTYPE),
        valid=np.asarray(valid),
        final=final,
    )


def collect_rollout(
    model: Denoiser,
    kernel: Kernel,
    prior: MaskPrior,
    cond: Condition,
    tasks: Sequence[TaskSpec],
    vocab: MotifVocab,
    cfg: PPOConfig,
    rng: np.random.Generator,
) -> Trajectory:
    """One trajectory with every intermediate state kept."""
    K = min(cfg.suffix_steps, kernel.T)
    z0, records, states = generate(model, kernel, prior, [cond], rng, record_from=K, keep_states=True)
    final = z0.states()[0]
    g = decode_or_none(final, vocab)
    return Trajectory(
        condition=cond,
        m=final.m.copy(),
        states=[s.states()[0] for s in states],
        steps=[r[0] for r in records],
        old_logprob=np.array([float(r[3][0]) for r in records]),
        values=np.array([float(r[4][0]) for r in records]),
        reward=reward_for_molecule(g, cond, tasks[cond.task], cfg.w_val),
        valid=g is not None and check_validity(g).is_valid,
    )


# --------------------------------------------------------------------------
# PPO


def normalize_advantages(adv: torch.Tensor) -> torch.Tensor:
    std = adv.std(unbiased=False)
    return (adv - adv.mean()) / (std + 1e-8)


def ppo_loss(model: Denoiser, ref_model: Denoiser, kernel: Kernel, batch: RolloutBatch, cfg: PPOConfig):
    """Total PPO loss over all recorded (trajectory, step) pairs plus diagnostics."""
    if batch.n_traj == 0:
        raise EmptyBatch("no trajectories to update on")
    K = batch.n_steps
    enc = model.encode_conditions([(c.task, c.target) for c in batch.conditions])
    enc = _repeat_cond(enc, K)
    returns = batch.rewards.repeat(K)
    adv = normalize_advantages(returns - batch.values)
    post, value = reverse_step(model, kernel, batch.zt, batch.t, enc)
    with torch.no_grad():
        ref_post, _ = reverse_step(ref_model, kernel, batch.zt, batch.t, enc)
    logp = step_logprob(post, batch.z_prev)
    ratio = torch.exp(logp - batch.old_logprob)
    clipped = torch.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    actor = -torch.minimum(ratio * adv, clipped * adv)
    value_loss = (value - returns) ** 2
    ent = entropy(post, batch.zt.m)
    kl = kl_divergence(post, ref_post, batch.zt.m)
    total = (actor + cfg.c_value * value_loss - cfg.c_entropy * ent + cfg.c_kl * kl).mean()
    diag = {
        "actor": actor.mean().item(),
        "value": value_loss.mean().item(),
        "entropy": ent.mean().item(),
        "kl": kl.mean().item(),
        "max_ratio_dev": (ratio - 1.0).abs().max().item(),
        "mean_adv": adv.mean().item(),
    }
    return total, diag


def ppo_update(
    model: Denoiser,
    ref_model: Denoiser,
    kernel: Kernel,
    batch: RolloutBatch,
    cfg: PPOConfig,
    optimizer: torch.optim.Optimizer,
) -> list[dict]:
    diags = []
    for _ in range(cfg.update_passes):
        loss, diag = ppo_loss(model, ref_model, kernel, batch, cfg)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"PPO loss is {loss.item()}")
        optimizer.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        diag["loss"] = loss.item()
        diags.append(diag)
    return diags


def frozen_copy(model: Denoiser) -> Denoiser:
    ref = copy.deepcopy(model)
    for p in ref.parameters():
        p.requires_grad_(False)
    return ref


def train_ppo(
    model: Denoiser,
    kernel: Kernel,
    prior: MaskPrior,
    condition_pool: Sequence[Condition],
    tasks: Sequence[TaskSpec],
    vocab: MotifVocab,
    cfg: PPOConfig,
    ref_model: Denoiser | None = None,
    log_fn=None,
) -> list[dict]:
    """PPO epochs: collect ``batch_size`` rollouts with conditions drawn uniformly, then update."""
    rng = np.random.default_rng(cfg.seed)
    ref_model = ref_model if ref_model is not None else frozen_copy(model)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        picks = rng.integers(len(condition_pool), size=cfg.batch_size)
        conds = [condition_pool[int(k)] for k in picks]
        batch = collect_rollouts(model, kernel, prior, conds, tasks, vocab, cfg, rng)
        diags = ppo_update(model, ref_model, kernel, batch, cfg, opt)
        row = {
            "epoch": epoch,
            "mean_reward": float(batch.rewards.mean()),
            "mean_kl": float(np.mean([d["kl"] for d in diags])),
            "validity": float(batch.valid.mean()),
        }
        history.append(row)
        log.info("rl epoch %d reward %.4f kl %.5f valid %.3f", epoch, row["mean_reward"], row["mean_kl"], row["validity"])
        if log_fn is not None:
            log_fn(row)
    return history
