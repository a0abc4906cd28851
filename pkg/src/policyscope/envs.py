"""Analytic simulators with a common rollout contract.

Each environment maps a bounded parameter vector (initial state followed by
object parameters) and a policy id to a terminal reward. Physics is replaced
by closed-form success rules so every environment has an exact, noise-free
oracle.

Registry ids: ``puckworld``, ``poursim``, ``gaussbench-d<k>``, ``nullbench-d<k>``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .priors import PriorSpec


class UnknownPolicyError(KeyError):
    pass


class UnknownEnvError(KeyError):
    pass


class InvalidSampleError(ValueError):
    """Raised by an environment that cannot simulate a given input."""


@dataclass(frozen=True, eq=False)
class EnvSpec:
    env_id: str
    policy_ids: tuple
    prior: PriorSpec
    reward_kind: str  # "binary" | "dense"
    oracle_available: bool = True
    success_threshold: float = 0.5


class Environment:
    spec: EnvSpec

    @property
    def env_id(self) -> str:
        return self.spec.env_id

    @property
    def prior(self) -> PriorSpec:
        return self.spec.prior

    def check_policy(self, policy_id: str) -> None:
        if policy_id not in self.spec.policy_ids:
            raise UnknownPolicyError(
                f"policy {policy_id!r} not available in {self.env_id!r}; choose from {list(self.spec.policy_ids)}"
            )

    def _rows(self, x) -> np.ndarray:
        arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if arr.shape[1] != self.prior.dim:
            raise ValueError(f"{self.env_id}: expected {self.prior.dim} columns, got {arr.shape}")
        return arr

    def oracle(self, policy_id: str, x) -> np.ndarray:
        """Noise-free reward for each row of ``x``."""
        if not self.spec.oracle_available:
            raise NotImplementedError(f"{self.env_id} has no oracle")
        self.check_policy(policy_id)
        return self._clean_reward(policy_id, self._rows(x))

    def rollout(self, policy_id: str, x, rng: np.random.Generator, noise: bool = True) -> float:
        """Reward of one episode at a single parameter vector."""
        self.check_policy(policy_id)
        row = self._rows(x)
        if row.shape[0] != 1:
            raise ValueError("rollout takes a single parameter vector")
        clean = self._clean_reward(policy_id, row)
        if not noise:
            return float(clean[0])
        return float(self._add_noise(policy_id, clean, rng)[0])

    def success(self, policy_id: str, x) -> np.ndarray:
        return self.oracle(policy_id, x) >= self.spec.success_threshold

    def validate(self, x) -> None:
        """Hook for environments that reject some inputs; all analytic envs accept everything."""

    # subclasses implement these two
    def _clean_reward(self, policy_id: str, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _add_noise(self, policy_id: str, clean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# PuckWorld: surrogate for moving a puck into a box with a hole


PUCK_NAMES = ("x", "y", "mass", "w", "h", "fr0", "fr1", "fr2")
PUCK_LO = (0.0, 0.0, 1.0, 0.02, 0.02, 0.1, 0.1, 0.1)
PUCK_HI = (1.0, 1.0, 20.0, 0.045, 0.03, 1.0, 1.0, 1.0)

PICKPLACE_MAX_MASS = 8.0
PICKPLACE_MAX_WIDTH = 0.040
PICKPLACE_MAX_X = 0.7
PUSH_MAX_HEIGHT = 0.026
PUSH_MIN_FRICTION = 0.3
PUSH_Y_RANGE = (0.2, 0.8)


class PuckWorld(Environment):
    """Scripted push / pickplace outcomes with a 5% outcome flip."""

    def __init__(self, flip_prob: float = 0.05):
        self.flip_prob = flip_prob
        self.spec = EnvSpec(
            env_id="puckworld",
            policy_ids=("pickplace", "push"),
            prior=PriorSpec(PUCK_NAMES, PUCK_LO, PUCK_HI),
            reward_kind="binary",
        )

    def _clean_reward(self, policy_id, x):
        c = {n: x[:, i] for i, n in enumerate(PUCK_NAMES)}
        if policy_id == "pickplace":
            ok = (c["mass"] <= PICKPLACE_MAX_MASS) & (c["w"] <= PICKPLACE_MAX_WIDTH) & (c["x"] <= PICKPLACE_MAX_X)
        else:
            lo, hi = PUSH_Y_RANGE
            ok = (c["h"] <= PUSH_MAX_HEIGHT) & (c["fr0"] >= PUSH_MIN_FRICTION) & (c["y"] >= lo) & (c["y"] <= hi)
        return ok.astype(np.float64)

    def _add_noise(self, policy_id, clean, rng):
        flip = rng.random(clean.shape) < self.flip_prob
        return np.where(flip, 1.0 - clean, clean)

    def viable_volume(self, policy_id: str) -> float:
        """Prior probability of the noise-free success region (closed form)."""
        self.check_policy(policy_id)
        p = self.prior

        def frac(name, a, b):
            i = p.index(name)
            a, b = max(a, p.lo[i]), min(b, p.hi[i])
            return max(b - a, 0.0) / p.width[i]

        if policy_id == "pickplace":
            return (frac("mass", -np.inf, PICKPLACE_MAX_MASS) * frac("w", -np.inf, PICKPLACE_MAX_WIDTH)
                    * frac("x", -np.inf, PICKPLACE_MAX_X))
        return (frac("h", -np.inf, PUSH_MAX_HEIGHT) * frac("fr0", PUSH_MIN_FRICTION, np.inf)
                * frac("y", *PUSH_Y_RANGE))


# ---------------------------------------------------------------------------
# PourSim: surrogate for pouring between two cups


POUR_NAMES = ("grasp", "rel_x", "rel_y", "dangle")
POUR_LO = (0.0, -10.0, 1.0, 0.5 * math.pi)
POUR_HI = (1.0, 10.0, 10.0, math.pi)
POUR_MODES_X = (4.0, -4.0)


def kitchen_reward(x_transfer):
    """Dense pouring reward for the transferred fraction ``x_transfer`` in [0, 1]."""
    x = np.asarray(x_transfer, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("x_transfer must lie in [0, 1]")
    r = np.expm1(2.0 * (x * 10.0 - 9.5))
    return float(r) if r.ndim == 0 else r


def poursim_transfer(x) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    grasp, rel_x, rel_y = arr[:, 0], arr[:, 1], arr[:, 2]

    def bump(a, b):
        return np.exp(-(a * a + b * b) / 2.0)

    g = np.exp(-((grasp - 0.5) ** 2) / (2 * 0.2**2))
    b = (rel_y - 3.0) / 2.0
    s = bump((rel_x - POUR_MODES_X[0]) / 1.5, b) + bump((rel_x - POUR_MODES_X[1]) / 1.5, b)
    out = np.clip(g * s, 0.0, 1.0)
    return float(out[0]) if np.ndim(x) == 1 else out


class PourSim(Environment):
    def __init__(self, noise_std: float = 0.01):
        self.noise_std = noise_std
        self.spec = EnvSpec(
            env_id="poursim",
            policy_ids=("pour",),
            prior=PriorSpec(POUR_NAMES, POUR_LO, POUR_HI),
            reward_kind="dense",
            success_threshold=0.0,  # transferred fraction >= 0.95
        )

    def _clean_reward(self, policy_id, x):
        return kitchen_reward(poursim_transfer(x))

    def _add_noise(self, policy_id, clean, rng):
        return clean + self.noise_std * rng.standard_normal(clean.shape)


# ---------------------------------------------------------------------------
# GaussianBench: known maximizer at the box center


class GaussianBench(Environment):
    def __init__(self, dim: int = 2, noise_std: float = 0.05):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.noise_std = noise_std
        self.spec = EnvSpec(
            env_id=f"gaussbench-d{dim}",
            policy_ids=("reach",),
            prior=PriorSpec([f"x{i}" for i in range(dim)], np.zeros(dim), np.ones(dim)),
            reward_kind="dense",
            success_threshold=-0.05,
        )

    @property
    def theta_star(self) -> np.ndarray:
        return self.prior.midpoint

    def _clean_reward(self, policy_id, x):
        return -np.sum((x - self.theta_star) ** 2, axis=1)

    def _add_noise(self, policy_id, clean, rng):
        return clean + self.noise_std * rng.standard_normal(clean.shape)


def gaussian_bench(x, rng=None, noise_std: float = 0.05) -> float:
    """Reward of the default 2-D GaussianBench; noise off when ``rng`` is None."""
    x = np.asarray(x, dtype=np.float64)
    env = GaussianBench(dim=x.size, noise_std=noise_std)
    if rng is None:
        return float(env.oracle("reach", x)[0])
    return env.rollout("reach", x, rng)


# ---------------------------------------------------------------------------
# NullBench: rewards carry no information about the inputs


class NullBench(Environment):
    """Fair-coin binary rewards; the oracle scores a fixed reference region x0 <= 0.3."""

    region_edge = 0.3

    def __init__(self, dim: int = 2):
        self.spec = EnvSpec(
            env_id=f"nullbench-d{dim}",
            policy_ids=("coin",),
            prior=PriorSpec([f"x{i}" for i in range(dim)], np.zeros(dim), np.ones(dim)),
            reward_kind="binary",
        )

    def _clean_reward(self, policy_id, x):
        return (x[:, 0] <= self.region_edge).astype(np.float64)

    def rollout(self, policy_id, x, rng, noise=True):
        self.check_policy(policy_id)
        self._rows(x)
        return float(rng.random() < 0.5)

    def viable_volume(self, policy_id: str = "coin") -> float:
        return self.region_edge


# ---------------------------------------------------------------------------


def make_env(env_id: str) -> Environment:
    if env_id == "puckworld":
        return PuckWorld()
    if env_id == "poursim":
        return PourSim()
    m = re.fullmatch(r"(gaussbench|nullbench)-d(\d+)", env_id)
    if m and int(m.group(2)) >= 1:
        cls = GaussianBench if m.group(1) == "gaussbench" else NullBench
        return cls(int(m.group(2)))
    raise UnknownEnvError(f"unknown environment {env_id!r}")
