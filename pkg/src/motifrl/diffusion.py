"""Categorical forward noising, reverse posteriors, priors and the masked loss.

The corruption kernel on every factor is marginal resampling::

    Q_t = alpha_t * I + (1 - alpha_t) * 1 m^T

with ``m`` the channel marginal, so ``Qbar_t`` has the same form with
``alpha_bar_t``. Channels X (motif type), E (symmetric bond label) and
P (directional attachment label) are noised independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BadStep, MissingFactorPrediction, UnnormalizedPrediction
from .npe import D_E, PaddedState

CHANNELS = ("X", "E", "P")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    s: float = 0.008

    @property
    def alpha_bar(self) -> np.ndarray:
        t = np.arange(self.T + 1, dtype=np.float64)
        f = np.cos(((t / self.T + self.s) / (1.0 + self.s)) * math.pi / 2.0) ** 2
        ab = f / f[0]
        ab[0], ab[-1] = 1.0, 0.0
        return np.clip(ab, 0.0, 1.0)

    def alpha(self, t: int) -> float:
        ab = self.alpha_bar
        return float(ab[t] / ab[t - 1])

    def check(self, t: int, lo: int = 0) -> None:
        if not lo <= t <= self.T:
            raise BadStep(f"step {t} outside [{lo}, {self.T}]")


@dataclass
class TransitionModel:
    """Per-channel marginals used as the resampling distribution."""

    mX: np.ndarray
    mE: np.ndarray
    mP: np.ndarray

    def marginal(self, ch: str) -> np.ndarray:
        return {"X": self.mX, "E": self.mE, "P": self.mP}[ch]

    @classmethod
    def fit(cls, states: list[PaddedState], d_X: int, d_P: int) -> "TransitionModel":
        cx = np.zeros(d_X)
        ce = np.zeros(D_E)
        cp = np.zeros(d_P)
        for z in states:
            fx, fe, fp = factor_masks(z.m)
            cx += np.bincount(z.X[fx], minlength=d_X)
            ce += np.bincount(z.E[fe], minlength=D_E)
            cp += np.bincount(z.P[fp], minlength=d_P)
        # channels without any observed factor fall back to uniform
        out = []
        for c in (cx, ce, cp):
            out.append(c / c.sum() if c.sum() > 0 else np.full(len(c), 1.0 / len(c)))
        return cls(*out)

    def to_dict(self) -> dict:
        return {"mX": self.mX.tolist(), "mE": self.mE.tolist(), "mP": self.mP.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "TransitionModel":
        return cls(*(np.asarray(obj[k], dtype=np.float64) for k in ("mX", "mE", "mP")))


@dataclass
class MaskPrior:
    """Empirical distribution of active-slot counts; ``probs[n-1] = P(n)``."""

    probs: np.ndarray

    @property
    def n_max(self) -> int:
        return len(self.probs)

    @classmethod
    def fit(cls, states: list[PaddedState], n_max: int) -> "MaskPrior":
        counts = np.zeros(n_max)
        for z in states:
            counts[z.n_active - 1] += 1
        return cls(counts / counts.sum())

    def to_dict(self) -> dict:
        return {"probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, obj: dict) -> "MaskPrior":
        return cls(np.asarray(obj["probs"], dtype=np.float64))


@dataclass(frozen=True)
class LossConfig:
    lambda_X: float = 1.0
    lambda_E: float = 1.0
    lambda_P: float = 1.0

    def __post_init__(self):
        w = (self.lambda_X, self.lambda_E, self.lambda_P)
        if min(w) < 0:
            raise ValueError("loss weights must be non-negative")


def factor_masks(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean masks of active X, unordered-E (i < j) and ordered-P (i != j) factors."""
    m = np.asarray(m).astype(bool)
    pair = m[:, None] & m[None, :]
    n = len(m)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    off = ~np.eye(n, dtype=bool)
    return m, pair & upper, pair & off


# --------------------------------------------------------------------------
# sampling


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw along the last axis."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    return np.minimum((cdf <= u).sum(axis=-1), probs.shape[-1] - 1)


def forward_sample(
    z0: PaddedState, t: int, schedule: NoiseSchedule, transitions: TransitionModel, rng: np.random.Generator
) -> PaddedState:
    """Draw ``z_t ~ q_t(. | z_0)``: keep each factor w.p. alpha_bar_t, else resample."""
    schedule.check(t)
    ab = schedule.alpha_bar[t]
    z = z0.copy()
    fx, fe, fp = factor_masks(z0.m)
    for ch, mask, arr in (("X", fx, z.X), ("E", fe, z.E), ("P", fp, z.P)):
        idx = np.nonzero(mask)
        n = len(idx[0])
        if n == 0:
            continue
        keep = rng.random(n) < ab
        fresh = _categorical(np.broadcast_to(transitions.marginal(ch), (n, len(transitions.marginal(ch)))), rng)
        arr[idx] = np.where(keep, arr[idx], fresh)
    iu = np.nonzero(fe)
    z.E[iu[1], iu[0]] = z.E[iu]
    return z


def sample_mask(prior: MaskPrior, rng: np.random.Generator) -> np.ndarray:
    n = int(_categorical(prior.probs, rng)) + 1
    m = np.zeros(prior.n_max, dtype=np.int64)
    m[:n] = 1
    return m


def prior_sample(m: np.ndarray, transitions: TransitionModel, rng: np.random.Generator) -> PaddedState:
    """Every active factor drawn from its channel marginal; inactive entries zero."""
    n_max = len(m)
    z = PaddedState(
        np.zeros(n_max, dtype=np.int64),
        np.zeros((n_max, n_max), dtype=np.int64),
        np.zeros((n_max, n_max), dtype=np.int64),
        np.asarray(m, dtype=np.int64).copy(),
    )
    fx, fe, fp = factor_masks(m)
    for ch, mask, arr in (("X", fx, z.X), ("E", fe, z.E), ("P", fp, z.P)):
        marg = transitions.marginal(ch)
        idx = np.nonzero(mask)
        if len(idx[0]):
            arr[idx] = _categorical(np.broadcast_to(marg, (len(idx[0]), len(marg))), rng)
    iu = np.nonzero(fe)
    z.E[iu[1], iu[0]] = z.E[iu]
    return z


# --------------------------------------------------------------------------
# reverse posterior


def posterior_factor(
    x0: np.ndarray, zt: np.ndarray, alpha_t: float, abar_prev: float, abar_t: float, marginal: np.ndarray
) -> np.ndarray:
    """``sum_i x0(i) q(z_{t-1} = k | z_t, z_0 = i)`` for a batch of factors.

    ``x0`` has shape ``(..., d)``, ``zt`` the matching integer shape ``(...)``.
    With the marginal kernel::

        q(k | j, i) = Q_t[k, j] Qbar_{t-1}[i, k] / Qbar_t[i, j]
        Qbar_t[i, j] = abar_t [i = j] + (1 - abar_t) m_j

    Initial values ``i`` with ``Qbar_t[i, j] = 0`` are incompatible with the
    observed ``z_t`` and get zero weight.
    """
    d = x0.shape[-1]
    onehot = np.eye(d)[zt]
    m_j = marginal[zt][..., None]
    a = alpha_t * onehot + (1.0 - alpha_t) * m_j  # Q_t[k, j] over k
    denom = abar_t * onehot + (1.0 - abar_t) * m_j  # Qbar_t[i, j] over i
    w = np.divide(x0, denom, out=np.zeros_like(x0, dtype=np.float64), where=denom > 0)
    wb = abar_prev * w + (1.0 - abar_prev) * w.sum(-1, keepdims=True) * marginal
    p = wb * a
    total = p.sum(-1, keepdims=True)
    # a current value with zero marginal mass cannot have been reached by noising; stay put
    return np.where(total > 0, p / np.where(total > 0, total, 1.0), onehot)


def _check_normalized(x0: dict, masks) -> None:
    for ch, mask in zip(CHANNELS, masks):
        if ch not in x0:
            raise MissingFactorPrediction(f"no {ch} prediction")
        if mask.any():
            s = x0[ch][mask].sum(-1)
            if np.max(np.abs(s - 1.0)) > 1e-6:
                raise UnnormalizedPrediction(f"{ch} prediction sums deviate from 1")


def reverse_posterior(
    zt: PaddedState, x0_dist: dict, t: int, schedule: NoiseSchedule, transitions: TransitionModel
) -> dict:
    """Per-factor distributions of ``z_{t-1}`` given ``z_t`` and endpoint predictions.

    Returns a dict with arrays shaped like ``x0_dist``; entries outside the
    active factor sets are zero.
    """
    schedule.check(t, lo=1)
    masks = factor_masks(zt.m)
    _check_normalized(x0_dist, masks)
    ab = schedule.alpha_bar
    out = {}
    for ch, mask, cur in zip(CHANNELS, masks, (zt.X, zt.E, zt.P)):
        pred = np.asarray(x0_dist[ch], dtype=np.float64)
        res = np.zeros_like(pred)
        if mask.any():
            res[mask] = posterior_factor(
                pred[mask], cur[mask], schedule.alpha(t), ab[t - 1], ab[t], transitions.marginal(ch)
            )
        out[ch] = res
    return out


def sample_from_posterior(zt: PaddedState, post: dict, rng: np.random.Generator) -> PaddedState:
    z = zt.copy()
    fx, fe, fp = factor_masks(zt.m)
    for ch, mask, arr in (("X", fx, z.X), ("E", fe, z.E), ("P", fp, z.P)):
        if mask.any():
            arr[mask] = _categorical(post[ch][mask], rng)
    iu = np.nonzero(fe)
    z.E[iu[1], iu[0]] = z.E[iu]
    return z


# --------------------------------------------------------------------------
# loss


def masked_ce_loss(pred: dict, z0: PaddedState, m: np.ndarray, cfg: LossConfig = LossConfig()):
    """Masked cross-entropy of endpoint predictions against the clean state.

    Returns ``(loss, {"X": CE_X, "E": CE_E, "P": CE_P})``; a channel with an
    empty index set contributes 0.
    """
    masks = factor_masks(m)
    parts = {}
    for ch, mask, target in zip(CHANNELS, masks, (z0.X, z0.E, z0.P)):
        if ch not in pred:
            raise MissingFactorPrediction(f"no {ch} prediction")
        if not mask.any():
            parts[ch] = 0.0
            continue
        probs = np.asarray(pred[ch])[mask]
        p_true = np.take_along_axis(probs, target[mask][:, None], axis=-1)[:, 0]
        with np.errstate(divide="ignore"):
            parts[ch] = float(-np.mean(np.log(p_true)))
    loss = cfg.lambda_X * parts["X"] + cfg.lambda_E * parts["E"] + cfg.lambda_P * parts["P"]
    return loss, parts
