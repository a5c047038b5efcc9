"""Exact numerics for KL-regularized control on small enumerable problems.

Everything here is float64 and exhaustive: toy MDPs are small enough to list
every trajectory, and factorized distributions small enough to list every
joint outcome. ``run_battery`` ties the checks together.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.special import logsumexp

from .errors import BadArgs, BadBeta, BadSizes, StructureMismatch, SupportViolation

State = tuple[int, ...]
MAX_TRAJECTORIES = 10**6


def _check_beta(beta: float) -> None:
    if not beta > 0 or not math.isfinite(beta):
        raise BadBeta(f"beta must be positive and finite, got {beta}")


def kl_categorical(p: np.ndarray, q: np.ndarray) -> float:
    """``KL(p || q)``; raises when ``p`` puts mass outside the support of ``q``."""
    if np.any((p > 0) & (q <= 0)):
        raise SupportViolation("p has mass where q has none")
    on = p > 0
    return float(np.sum(p[on] * (np.log(p[on]) - np.log(q[on]))))


# --------------------------------------------------------------------------
# one-step tilt


def gibbs_maximizer(ref: np.ndarray, Q: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """``argmax_pi E_pi[Q] - beta KL(pi || ref)`` and its value ``beta log E_ref[exp(Q / beta)]``."""
    _check_beta(beta)
    ref = np.asarray(ref, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if abs(ref.sum() - 1.0) > 1e-9 or np.any(ref < 0):
        raise BadArgs("reference distribution must be non-negative and sum to 1")
    on = ref > 0
    logits = np.full(len(ref), -np.inf)
    logits[on] = np.log(ref[on]) + Q[on] / beta
    lse = logsumexp(logits[on])
    pi = np.zeros(len(ref))
    pi[on] = np.exp(logits[on] - lse)
    return pi, float(beta * lse)


def regularized_value(pi: np.ndarray, ref: np.ndarray, Q: np.ndarray, beta: float) -> float:
    return float(pi @ Q) - beta * kl_categorical(pi, ref)


def relative_tilt_error(ref: np.ndarray, Q: np.ndarray, beta: float) -> float:
    """Largest deviation of ``log(pi*(a)/ref(a)) - log(pi*(b)/ref(b))`` from ``(Q(a) - Q(b)) / beta``."""
    pi, _ = gibbs_maximizer(ref, Q, beta)
    on = np.flatnonzero(ref > 0)
    lr = np.log(pi[on]) - np.log(ref[on])
    want = Q[on] / beta
    diff = (lr[:, None] - lr[None, :]) - (want[:, None] - want[None, :])
    return float(np.abs(diff).max())


def amplification_bound(p_G: float, delta: float, beta: float) -> float:
    """Lower bound on the tilted mass of a good action set with reference mass ``p_G`` and value gap ``delta``."""
    if not 0 < p_G <= 1 or not delta > 0:
        raise BadArgs(f"need 0 < p_G <= 1 and delta > 0, got p_G={p_G}, delta={delta}")
    _check_beta(beta)
    if p_G == 1.0:
        return 1.0
    # e^{d/b} p / (e^{d/b} p + 1 - p), written to stay finite for large d/b
    log_num = delta / beta + math.log(p_G)
    return 1.0 / (1.0 + math.exp(math.log1p(-p_G) - log_num))


# --------------------------------------------------------------------------
# toy MDPs


@dataclass
class ToyMDP:
    """Finite-horizon terminal-reward MDP whose state is the action history."""

    n_actions: tuple[int, ...]  # actions available at each step; horizon = len
    ref: dict[State, np.ndarray]
    reward: dict[State, float]

    def __post_init__(self):
        if self.n_trajectories > MAX_TRAJECTORIES:
            raise BadSizes(f"{self.n_trajectories} trajectories exceed the enumeration cap")
        for s, row in self.ref.items():
            if len(row) != self.n_actions[len(s)] or abs(row.sum() - 1.0) > 1e-9 or np.any(row < 0):
                raise BadArgs(f"reference row at {s} is not a distribution over {self.n_actions[len(s)]} actions")
        if not all(math.isfinite(r) for r in self.reward.values()):
            raise BadArgs("rewards must be finite")

    @property
    def H(self) -> int:
        return len(self.n_actions)

    @property
    def n_trajectories(self) -> int:
        return math.prod(self.n_actions)

    def states(self, h: int) -> Iterator[State]:
        return itertools.product(*(range(k) for k in self.n_actions[:h]))


def random_mdp(
    rng: np.random.Generator, H: int, max_actions: int = 5, zero_prob: float = 0.2, reward_scale: float = 1.0
) -> ToyMDP:
    """Random tree MDP; each reference row has some zeroed actions but at least one positive."""
    n_actions = tuple(int(rng.integers(2, max_actions + 1)) for _ in range(H))
    ref = {}
    for h in range(H):
        for s in itertools.product(*(range(k) for k in n_actions[:h])):
            row = rng.dirichlet(np.ones(n_actions[h]))
            zero = rng.random(n_actions[h]) < zero_prob
            zero[int(rng.integers(n_actions[h]))] = False
            row[zero] = 0.0
            ref[s] = row / row.sum()
    reward = {s: float(reward_scale * rng.normal()) for s in itertools.product(*(range(k) for k in n_actions))}
    return ToyMDP(n_actions, ref, reward)


def soft_bellman_solve(mdp: ToyMDP, beta: float) -> tuple[dict[State, float], dict[State, np.ndarray]]:
    """Backward recursion ``V_h = beta log E_ref[exp(V_{h+1} / beta)]`` with ``V_H = R``."""
    _check_beta(beta)
    V: dict[State, float] = dict(mdp.reward)
    pi: dict[State, np.ndarray] = {}
    for h in range(mdp.H - 1, -1, -1):
        for s in mdp.states(h):
            Q = np.array([V[s + (a,)] for a in range(mdp.n_actions[h])])
            pi[s], V[s] = gibbs_maximizer(mdp.ref[s], Q, beta)
    return V, pi


def enumerate_objective(mdp: ToyMDP, policy: dict[State, np.ndarray], beta: float) -> float:
    """``E_pi[R] - beta * sum_h E_pi[KL(pi(.|s_h) || ref(.|s_h))]`` by listing every state."""
    _check_beta(beta)
    visit: dict[State, float] = {(): 1.0}
    terms = []
    for h in range(mdp.H):
        nxt = {}
        for s in mdp.states(h):
            p = visit[s]
            row = np.asarray(policy[s], dtype=np.float64)
            terms.append(-beta * p * kl_categorical(row, mdp.ref[s]))
            for a in range(mdp.n_actions[h]):
                nxt[s + (a,)] = p * row[a]
        visit = nxt
    terms.extend(visit[s] * mdp.reward[s] for s in mdp.states(mdp.H))
    return math.fsum(terms)


def reference_policy(mdp: ToyMDP) -> dict[State, np.ndarray]:
    return {s: row.copy() for s, row in mdp.ref.items()}


def perturbed_policy(mdp: ToyMDP, base: dict[State, np.ndarray], rng: np.random.Generator, scale: float = 1.0):
    """Random policy on the reference support, obtained by tilting ``base`` log-probabilities."""
    out = {}
    for s, row in base.items():
        on = mdp.ref[s] > 0
        logits = np.full(len(row), -np.inf)
        logits[on] = np.log(np.maximum(row[on], 1e-300)) + scale * rng.normal(size=int(on.sum()))
        p = np.zeros(len(row))
        p[on] = np.exp(logits[on] - logsumexp(logits[on]))
        out[s] = p
    return out


def best_trajectory_reward(mdp: ToyMDP) -> float:
    """Max terminal reward over trajectories with positive reference probability."""
    best = -math.inf
    for s in mdp.states(mdp.H):
        if all(mdp.ref[s[:h]][s[h]] > 0 for h in range(mdp.H)):
            best = max(best, mdp.reward[s])
    return best


# --------------------------------------------------------------------------
# factorized distributions


@dataclass
class FactorizedDist:
    """Autoregressive product of categoricals; ``tables[j][prefix]`` is the row for factor ``j``."""

    sizes: tuple[int, ...]
    tables: list[dict[State, np.ndarray]]

    def __post_init__(self):
        if len(self.tables) != len(self.sizes):
            raise StructureMismatch("one table per factor required")
        for j, table in enumerate(self.tables):
            for prefix in itertools.product(*(range(k) for k in self.sizes[:j])):
                row = table.get(prefix)
                if row is None or len(row) != self.sizes[j]:
                    raise StructureMismatch(f"factor {j} lacks a row of size {self.sizes[j]} for prefix {prefix}")
                if abs(row.sum() - 1.0) > 1e-9 or np.any(row < 0):
                    raise BadArgs(f"factor {j} row at {prefix} is not a distribution")

    @property
    def M(self) -> int:
        return len(self.sizes)

    def outcomes(self) -> Iterator[State]:
        return itertools.product(*(range(k) for k in self.sizes))

    def prob(self, x: State) -> float:
        return math.prod(float(self.tables[j][x[:j]][x[j]]) for j in range(self.M))

    def prefix_probs(self, j: int) -> dict[State, float]:
        out: dict[State, float] = {(): 1.0}
        for i in range(j):
            out = {s + (a,): p * float(self.tables[i][s][a]) for s, p in out.items() for a in range(self.sizes[i])}
        return out


def random_factorized(
    rng: np.random.Generator, sizes: tuple[int, ...], zero_prob: float = 0.0
) -> FactorizedDist:
    tables = []
    for j, k in enumerate(sizes):
        table = {}
        for prefix in itertools.product(*(range(n) for n in sizes[:j])):
            row = rng.dirichlet(np.ones(k))
            zero = rng.random(k) < zero_prob
            zero[int(rng.integers(k))] = False
            row[zero] = 0.0
            table[prefix] = row / row.sum()
        tables.append(table)
    return FactorizedDist(tuple(sizes), tables)


def random_pair(rng: np.random.Generator, sizes: tuple[int, ...]) -> tuple[FactorizedDist, FactorizedDist]:
    """``(p, q)`` with ``p`` absolutely continuous w.r.t. ``q``: ``p`` may drop actions, ``q`` never does."""
    q = random_factorized(rng, sizes)
    p = random_factorized(rng, sizes, zero_prob=0.3)
    return p, q


@dataclass
class FactorizedKL:
    joint: float
    per_factor: list[float]  # E_{prefix ~ p}[KL(p_j || q_j)]

    @property
    def decomposed(self) -> float:
        return math.fsum(self.per_factor)

    @property
    def average(self) -> float:
        return self.decomposed / len(self.per_factor)


def factorized_kl(p: FactorizedDist, q: FactorizedDist) -> FactorizedKL:
    """Joint KL by enumerating the product space, next to its per-factor decomposition."""
    if p.sizes != q.sizes:
        raise StructureMismatch(f"factor sizes {p.sizes} vs {q.sizes}")
    terms = []
    for x in p.outcomes():
        px = p.prob(x)
        if px == 0:
            continue
        qx = q.prob(x)
        if qx == 0:
            raise SupportViolation(f"outcome {x} has p-mass but no q-mass")
        terms.append(px * (math.log(px) - math.log(qx)))
    per_factor = []
    for j in range(p.M):
        per_factor.append(
            math.fsum(w * kl_categorical(p.tables[j][s], q.tables[j][s]) for s, w in p.prefix_probs(j).items() if w > 0)
        )
    return FactorizedKL(math.fsum(terms), per_factor)


# --------------------------------------------------------------------------
# decision counts


@dataclass(frozen=True)
class DecisionCounts:
    L_atom: int
    L_motif: int
    ratio: float
    bound: float

    @property
    def within_bound(self) -> bool:
        return self.ratio <= self.bound + 1e-15


def factor_count_atom(n: int) -> int:
    """Node types plus unordered pair bond types."""
    return (n * n + n) // 2


def factor_count_motif(n: int) -> int:
    """Node types, unordered pair bond types, ordered pair attachments."""
    return (3 * n * n - n) // 2


def compression_bound(chi: float) -> float:
    if not chi >= 1:
        raise BadSizes(f"compression ratio must be at least 1, got {chi}")
    return 3.0 / chi**2


def decision_counts(n_atom: int, n_motif: int) -> DecisionCounts:
    if not 1 <= n_motif <= n_atom:
        raise BadSizes(f"need 1 <= n_motif <= n_atom, got {n_motif}, {n_atom}")
    la, lm = factor_count_atom(n_atom), factor_count_motif(n_motif)
    return DecisionCounts(la, lm, lm / la, compression_bound(n_atom / n_motif))


# --------------------------------------------------------------------------
# battery


@dataclass
class CheckRow:
    name: str
    instances: int
    max_error: float
    tolerance: float
    passed: bool


def _row(name: str, errors: list[float], tol: float) -> CheckRow:
    worst = max(errors) if errors else 0.0
    return CheckRow(name, len(errors), worst, tol, bool(errors) and worst <= tol)


def run_battery(
    seed: int = 0, n_mdp: int = 60, n_pairs: int = 120, n_amplification: int = 1000, n_perturb: int = 20
) -> list[CheckRow]:
    """Random-instance checks of every identity; one row per property."""
    rng = np.random.default_rng(seed)
    gibbs_err, bellman_err, optimality_gap, support_err, tilt_err = [], [], [], [], []
    for k in range(n_mdp):
        beta = (0.1, 1.0, 10.0)[k % 3]
        mdp = random_mdp(rng, H=int(rng.integers(1, 5)))
        V, pi = soft_bellman_solve(mdp, beta)
        J_star = enumerate_objective(mdp, pi, beta)
        bellman_err.append(abs(J_star - V[()]))
        for s, row in pi.items():
            support_err.append(float(np.abs(row[mdp.ref[s] == 0]).sum()))
            Q = np.array([V[s + (a,)] for a in range(len(row))])
            tilt_err.append(relative_tilt_error(mdp.ref[s], Q, beta))
            gibbs_err.append(abs(regularized_value(row, mdp.ref[s], Q, beta) - V[s]))
        for _ in range(n_perturb):
            alt = perturbed_policy(mdp, pi, rng, scale=float(rng.uniform(0.1, 2.0)))
            optimality_gap.append(max(0.0, enumerate_objective(mdp, alt, beta) - J_star))
        optimality_gap.append(max(0.0, enumerate_objective(mdp, reference_policy(mdp), beta) - J_star))

    kl_err, budget_err = [], []
    for _ in range(n_pairs):
        sizes = tuple(int(rng.integers(2, 4)) for _ in range(int(rng.integers(1, 4))))
        p, q = random_pair(rng, sizes)
        res = factorized_kl(p, q)
        kl_err.append(abs(res.joint - res.decomposed))
        eta = res.joint
        budget_err.append(max(0.0, res.average - eta / p.M))

    amp_violation = []
    for _ in range(n_amplification):
        n = int(rng.integers(2, 7))
        ref = rng.dirichlet(np.ones(n))
        good = rng.random(n) < 0.5
        good[int(rng.integers(n))] = True
        if good.all():
            good[int(rng.integers(n))] = False
        beta = float(np.exp(rng.uniform(np.log(0.05), np.log(20.0))))
        delta = float(rng.uniform(0.01, 5.0))
        floor = float(rng.normal())
        Q = np.where(good, floor + delta + rng.exponential(1.0, n), floor - rng.exponential(1.0, n))
        pi, _ = gibbs_maximizer(ref, Q, beta)
        bound = amplification_bound(float(ref[good].sum()), delta, beta)
        amp_violation.append(max(0.0, bound - float(pi[good].sum()) - 1e-12))

    dc = decision_counts(4, 2)
    count_err = [
        abs(dc.L_atom - 10),
        abs(dc.L_motif - 5),
        abs(round(compression_bound(5.5), 3) - 0.099),
        0.0 if dc.within_bound else 1.0,
    ]
    return [
        _row("gibbs variational identity", gibbs_err, 1e-9),
        _row("soft bellman = enumerated objective", bellman_err, 1e-9),
        _row("bellman optimality vs perturbed policies", optimality_gap, 1e-9),
        _row("support preservation", support_err, 0.0),
        _row("relative action tilt", tilt_err, 1e-9),
        _row("amplification lower bound", amp_violation, 0.0),
        _row("factorized kl = joint kl", kl_err, 1e-12),
        _row("per-factor kl budget", budget_err, 1e-12),
        _row("decision counts", count_err, 1e-12),
    ]


def format_table(rows: list[CheckRow], elapsed: float | None = None) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'check':<{width}}  {'n':>5}  {'max err':>10}  {'tol':>8}  result"]
    for r in rows:
        lines.append(
            f"{r.name:<{width}}  {r.instances:>5}  {r.max_error:>10.3e}  {r.tolerance:>8.1e}  {'PASS' if r.passed else 'FAIL'}"
        )
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.2f}s")
    return "\n".join(lines)


def verify(seed: int = 0) -> tuple[bool, str]:
    start = time.perf_counter()
    rows = run_battery(seed)
    return all(r.passed for r in rows), format_table(rows, time.perf_counter() - start)
