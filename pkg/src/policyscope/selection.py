"""Choosing among policies by how well their certificates cover a belief.

For a belief ``b`` over an object's initial state and parameters, each
policy's certificate ``q_k(. | r*)`` is scored by the expected log-density
``E_b[log q_k(x | r*)]`` in the original bounded space; the highest score wins.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy.stats import norm

from .envs import Environment
from .priors import PriorSpec, log_jacobian_to_unbounded, to_unbounded

N_SCORE_SAMPLES = 256
# belief centres are drawn from a truncated N(0.5, 0.7) per normalized dimension
BELIEF_CENTER_MEAN = 0.5
BELIEF_CENTER_VARIANCE = 0.7
# spread of each individual belief around its centre (normalized units)
BELIEF_VARIANCE = 0.01
MIN_ACCEPTANCE = 1e-3


class DegenerateBeliefError(ValueError):
    pass


@dataclass(eq=False)
class Belief:
    mean: np.ndarray
    variance: np.ndarray
    spec: PriorSpec

    def __post_init__(self):
        d = self.spec.dim
        self.mean = np.broadcast_to(np.asarray(self.mean, dtype=np.float64), (d,)).copy()
        self.variance = np.broadcast_to(np.asarray(self.variance, dtype=np.float64), (d,)).copy()
        if np.any(self.variance <= 0):
            raise ValueError("belief variances must be positive")


def truncated_normal_unit(mean, variance, n: int, rng: np.random.Generator) -> np.ndarray:
    """(n, d) draws of independent normals truncated by rejection to [0, 1]."""
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    sd = np.sqrt(np.atleast_1d(np.asarray(variance, dtype=np.float64)))
    accept = norm.cdf((1.0 - mean) / sd) - norm.cdf(-mean / sd)
    if np.any(accept < MIN_ACCEPTANCE):
        raise DegenerateBeliefError(f"rejection rate above {1 - MIN_ACCEPTANCE:.1%}; belief has almost no mass in range")
    d = mean.size
    out = np.empty((n, d))
    for j in range(d):
        filled = 0
        while filled < n:
            need = n - filled
            draw = mean[j] + sd[j] * rng.standard_normal(int(math.ceil(need / accept[j] * 1.2)) + 8)
            draw = draw[(draw >= 0.0) & (draw <= 1.0)][:need]
            out[filled:filled + draw.size, j] = draw
            filled += draw.size
    return out


def sample_belief(belief: Belief, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    unit = truncated_normal_unit(belief.mean, belief.variance, n, rng)
    return belief.spec.lo + belief.spec.width * unit


def cross_entropy_score(cert, samples) -> float:
    """Mean log-density of ``cert`` at bounded ``samples`` (includes the logit Jacobian)."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("cannot score an empty sample set")
    z = to_unbounded(x, cert.spec)
    return float(np.mean(cert.log_prob_unbounded(z) + log_jacobian_to_unbounded(z, cert.spec)))


def _check_ranges(certs: Mapping[str, object]) -> PriorSpec:
    if not certs:
        raise ValueError("need at least one certificate")
    specs = [c.spec for c in certs.values()]
    for s in specs[1:]:
        if not specs[0].same_ranges(s):
            raise ValueError("certificates disagree on parameter names or ranges")
    return specs[0]


def score_tasks(certs: Mapping[str, object], samples) -> dict:
    _check_ranges(certs)
    return {task: cross_entropy_score(cert, samples) for task, cert in certs.items()}


def argmax_task(scores: Mapping[str, float]) -> str:
    best = max(scores.values())
    return min(t for t, s in scores.items() if s == best)


def select_task(certs: Mapping[str, object], belief: Belief, n_samples: int = N_SCORE_SAMPLES,
                rng: Optional[np.random.Generator] = None) -> str:
    """Task whose certificate best explains the belief; ties go to the smallest id."""
    spec = _check_ranges(certs)
    if not belief.spec.same_ranges(spec):
        raise ValueError("belief ranges differ from the certificates'")
    samples = sample_belief(belief, n_samples, rng if rng is not None else np.random.default_rng(0))
    return argmax_task(score_tasks(certs, samples))


@dataclass
class SelectionResult:
    tasks: list
    rewards: dict  # method -> (n_beliefs,) rewards
    choices: dict  # method -> list of chosen task ids
    viable: dict = field(default_factory=dict)  # task -> (n_beliefs,) oracle success at the ground truth

    @property
    def methods(self) -> list:
        return list(self.rewards)

    def summary(self) -> list:
        rows = []
        for m, r in self.rewards.items():
            se = float(r.std(ddof=1) / math.sqrt(r.size)) if r.size > 1 else math.nan
            rows.append({"method": m, "mean_reward": float(r.mean()), "std_err": se, "n": int(r.size)})
        return rows

    def mean(self, method: str) -> float:
        return float(self.rewards[method].mean())

    def paired_difference(self, a: str, b: str) -> tuple:
        """(mean difference, paired standard error, standard error if unpaired)."""
        ra, rb = self.rewards[a], self.rewards[b]
        n = ra.size
        paired = float((ra - rb).std(ddof=1) / math.sqrt(n))
        unpaired = float(math.sqrt((ra.var(ddof=1) + rb.var(ddof=1)) / n))
        return float((ra - rb).mean()), paired, unpaired

    def selection_accuracy(self, method: str = "learned") -> float:
        """Fraction of correct picks among beliefs whose ground truth exactly one task can solve."""
        v = np.stack([self.viable[t] for t in self.tasks], axis=1)
        one = v.sum(axis=1) == 1
        if not one.any():
            return math.nan
        pick = np.array([self.tasks.index(t) for t in self.choices[method]])
        return float(np.mean(v[one, pick[one]]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["method", "mean_reward", "std_err", "n"], lineterminator="\n")
            writer.writeheader()
            for row in self.summary():
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def run_selection_experiment(certs: Mapping[str, object], env: Environment, n_beliefs: int,
                             rng: np.random.Generator, belief_variance: float = BELIEF_VARIANCE,
                             n_samples: int = N_SCORE_SAMPLES) -> SelectionResult:
    """Compare learned selection against random and fixed-policy baselines.

    Every method sees the same belief, ground truth and rollout stream for a
    given belief index, so differences between methods are paired.
    """
    spec = _check_ranges(certs)
    if not spec.same_ranges(env.prior):
        raise ValueError("certificate ranges differ from the environment's")
    tasks = sorted(certs)
    for t in tasks:
        env.check_policy(t)
    methods = ["learned", "random"] + [f"always-{t}" for t in tasks]
    rewards = {m: np.empty(n_beliefs) for m in methods}
    choices = {m: [] for m in methods}
    viable = {t: np.empty(n_beliefs, dtype=bool) for t in tasks}

    root = np.random.SeedSequence(int(rng.integers(0, 2**63 - 1)))
    for i, seq in enumerate(root.spawn(n_beliefs)):
        belief_seq, truth_seq, score_seq, coin_seq, rollout_seq = seq.spawn(5)
        centre = truncated_normal_unit(np.full(spec.dim, BELIEF_CENTER_MEAN), np.full(spec.dim, BELIEF_CENTER_VARIANCE),
                                       1, np.random.default_rng(belief_seq))[0]
        belief = Belief(centre, belief_variance, spec)
        truth = sample_belief(belief, 1, np.random.default_rng(truth_seq))[0]
        rollout_seeds = dict(zip(tasks, rollout_seq.spawn(len(tasks))))
        outcome = {t: env.rollout(t, truth, np.random.default_rng(rollout_seeds[t])) for t in tasks}
        for t in tasks:
            viable[t][i] = bool(env.success(t, truth)[0]) if env.spec.oracle_available else False
        picks = {
            "learned": select_task(certs, belief, n_samples, np.random.default_rng(score_seq)),
            "random": tasks[int(np.random.default_rng(coin_seq).integers(len(tasks)))],
        }
        picks.update({f"always-{t}": t for t in tasks})
        for m in methods:
            choices[m].append(picks[m])
            rewards[m][i] = outcome[picks[m]]
    return SelectionResult(tasks, rewards, choices, viable)
