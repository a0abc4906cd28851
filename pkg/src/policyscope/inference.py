"""Sequential refinement of a reward-conditioned posterior over simulator inputs.

Each round draws inputs from the current proposal, runs the policy, appends
the (input, reward) pairs to an ever-growing dataset, refits the conditional
flow, extracts a target reward ``r_star`` and makes ``q(. | r_star)`` the next
proposal.

Training uses the atomic contrastive loss: for every example the true input
competes against K-1 other inputs from the same batch, scored by
``log q(z | r) - log p(z)``. Subtracting the prior keeps the fit a posterior
under the original prior whatever the proposal was.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import flow as fl
from .envs import Environment, InvalidSampleError
from .priors import PriorSpec, log_prior_unbounded, to_bounded, to_unbounded

logger = logging.getLogger(__name__)

MAX_RESAMPLE_ATTEMPTS = 100
MAX_LR_HALVINGS = 3


class RoundAbortedError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class DiscoverConfig:
    n_rounds: int = 10
    rollouts_per_round: int = 500
    atoms: int = 10
    batch_size: int = 256
    learning_rate: float = 5e-4
    max_epochs: int = 500
    patience: int = 20
    validation_fraction: float = 0.1
    seed: int = 0
    r_star_mode: str = "max"  # or "p95"
    loss: str = "apt"  # or "mle": plain maximum likelihood on proposal samples
    prior_mixing: float = 0.0
    n_layers: int = 5
    hidden_sizes: tuple = (50, 50)
    log_scale_bound: float = 7.0
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if self.atoms < 2:
            raise ValueError("atoms must be >= 2")
        if self.rollouts_per_round < self.atoms:
            raise ValueError("rollouts_per_round must be >= atoms")
        if not 0.0 < self.validation_fraction < 0.5:
            raise ValueError("validation_fraction must lie in (0, 0.5)")
        if self.r_star_mode not in ("max", "p95"):
            raise ValueError(f"unknown r_star_mode {self.r_star_mode!r}")
        if self.loss not in ("apt", "mle"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0.0 <= self.prior_mixing <= 1.0:
            raise ValueError("prior_mixing must lie in [0, 1]")
        if self.batch_size < self.atoms:
            raise ValueError("batch_size must be >= atoms")
        if self.max_epochs < 1 or self.patience < 1 or self.threads < 1:
            raise ValueError("max_epochs, patience and threads must be >= 1")

    @property
    def flow_config(self) -> fl.FlowConfig:
        return fl.FlowConfig(self.n_layers, self.hidden_sizes, self.log_scale_bound)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DiscoverConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown config keys: {unknown}")
        return cls(**d)


class RoundDataset:
    """Append-only store of (input, unbounded image, reward, round) rows."""

    def __init__(self, spec: PriorSpec):
        self.spec = spec
        self.params = np.empty((0, spec.dim))
        self.z = np.empty((0, spec.dim))
        self.rewards = np.empty(0)
        self.round_index = np.empty(0, dtype=np.int64)
        # 1 validation, 0 training, -1 not yet assigned
        self.split = np.empty(0, dtype=np.int8)

    def __len__(self):
        return self.rewards.size

    def append(self, params, rewards, round_index: int, validation=None) -> None:
        """Add rows; ``validation`` optionally fixes each row's held-out status for all later rounds."""
        params = np.atleast_2d(np.asarray(params, dtype=np.float64))
        rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
        if params.shape[0] != rewards.size:
            raise ValueError("params and rewards lengths differ")
        if validation is None:
            split = np.full(rewards.size, -1, dtype=np.int8)
        else:
            split = np.asarray(validation, dtype=bool).reshape(-1).astype(np.int8)
            if split.size != rewards.size:
                raise ValueError("validation mask length differs from rewards")
        if not np.all(np.isfinite(rewards)):
            raise ValueError("rewards must be finite")
        z = to_unbounded(params, self.spec)
        self.params = np.vstack([self.params, params])
        self.z = np.vstack([self.z, z])
        self.rewards = np.concatenate([self.rewards, rewards])
        self.round_index = np.concatenate([self.round_index, np.full(rewards.size, round_index)])
        self.split = np.concatenate([self.split, split])

    @property
    def reward_mean(self) -> float:
        return float(self.rewards.mean())

    @property
    def reward_std(self) -> float:
        return float(self.rewards.std())

    @property
    def reward_max(self) -> float:
        return float(self.rewards.max())


# ---------------------------------------------------------------------------
# rollouts


def _rollout_with_retry(env, policy_id, proposal, x, seed):
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RESAMPLE_ATTEMPTS):
        try:
            env.validate(x)
        except InvalidSampleError:
            x = proposal(1, rng)[0]
            continue
        return x, env.rollout(policy_id, x, rng)
    raise InvalidSampleError(f"no valid input after {MAX_RESAMPLE_ATTEMPTS} attempts")


def collect_round(env: Environment, policy_id: str, proposal: Callable, rho: int,
                  rng: np.random.Generator, threads: int = 1):
    """Draw ``rho`` inputs from ``proposal`` and roll each out on its own rng stream.

    ``proposal(n, rng)`` returns an (n, d) array of bounded inputs.
    Returns (params (rho, d), rewards (rho,)) ordered by rollout index.
    """
    env.check_policy(policy_id)
    xs = np.asarray(proposal(rho, rng), dtype=np.float64)
    seeds = rng.integers(0, 2**63 - 1, size=rho)

    def one(i):
        return _rollout_with_retry(env, policy_id, proposal, xs[i], int(seeds[i]))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(rho)))
    else:
        results = [one(i) for i in range(rho)]
    params = np.array([r[0] for r in results])
    rewards = np.array([r[1] for r in results])
    return params, rewards


def prior_proposal(spec: PriorSpec) -> Callable:
    return lambda n, rng: spec.sample(n, rng)


def flow_proposal(model: fl.FlowModel, spec: PriorSpec, r_star: float, prior_mixing: float = 0.0) -> Callable:
    def propose(n, rng):
        z = fl.sample(model, r_star, n, rng)
        x = to_bounded(z, spec)
        if prior_mixing > 0.0:
            mix = rng.random(n) < prior_mixing
            x[mix] = spec.sample(int(mix.sum()), rng)
        return x

    return propose


# ---------------------------------------------------------------------------
# losses


def draw_atoms(batch_size: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """(B, K) indices; column 0 is the row itself, the rest distinct other rows."""
    if k < 2:
        raise ValueError("need at least 2 atoms")
    if k > batch_size:
        raise ValueError(f"{k} atoms requested from a batch of {batch_size}")
    others = np.argpartition(rng.random((batch_size, batch_size - 1)), k - 2, axis=1)[:, : k - 1] if k > 1 else None
    rows = np.arange(batch_size)[:, None]
    others = others + (others >= rows)  # skip the row itself
    return np.hstack([rows, others])


def atom_loss_from_scores(scores, batch_size: int, k: int):
    """Mean over rows of -log softmax(score of true atom) given (B*K, 1) scores.

    Scores are laid out row-major (element j's atoms occupy rows j*K..j*K+K-1).
    Regrouping into (B, K) is done with constant selector matrices so that it
    stays within the tape's primitive set.
    """
    n = batch_size * k
    pick_col = np.zeros((n, k))
    pick_col[np.arange(n), np.arange(n) % k] = 1.0
    group = np.zeros((batch_size, n))
    group[np.arange(n) // k, np.arange(n)] = 1.0
    first = np.zeros((k, 1))
    first[0, 0] = 1.0
    table = ad.matmul(group, ad.mul(scores, pick_col))  # (B, K)
    per_row = ad.add(ad.logsumexp(table, axis=1), ad.mul(ad.matmul(table, first), -1.0))
    return ad.mul(ad.sum(per_row), 1.0 / batch_size)


def _apt_graph(model, params, z, c, logprior, atoms):
    b, k = atoms.shape
    flat = atoms.reshape(-1)
    lp = fl.log_prob_graph(model, params, z[flat], np.repeat(c, k, axis=0))
    scores = ad.add(lp, -logprior[flat][:, None])
    return atom_loss_from_scores(scores, b, k)


def _mle_graph(model, params, z, c):
    lp = fl.log_prob_graph(model, params, z, c)
    return ad.mul(ad.sum(lp), -1.0 / z.shape[0])


def atomic_apt_loss(model: fl.FlowModel, z, rewards, k: int, spec: Optional[PriorSpec] = None,
                    rng: Optional[np.random.Generator] = None, atoms: Optional[np.ndarray] = None) -> float:
    """Atomic contrastive loss of ``model`` on a batch of (z, reward) pairs."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if k < 2:
        raise ValueError("atomic loss needs K >= 2 (K = 1 is identically zero)")
    if k > z.shape[0]:
        raise ValueError(f"K={k} exceeds batch size {z.shape[0]}")
    if atoms is None:
        atoms = draw_atoms(z.shape[0], k, rng if rng is not None else np.random.default_rng(0))
    c = model.standardize(rewards).reshape(-1, 1)
    out = _apt_graph(model, model.params, z, c, log_prior_unbounded(z, spec), atoms)
    return float(np.asarray(out).reshape(()))


# ---------------------------------------------------------------------------
# training


def _reward_norm(rewards: np.ndarray) -> tuple:
    mean = float(rewards.mean())
    std = float(rewards.std())
    if not std > 1e-12:
        std = 1.0
    return mean, std


def _batches(idx: np.ndarray, batch_size: int, k: int) -> list:
    out = [idx[i:i + batch_size] for i in range(0, idx.size, batch_size)]
    if len(out) > 1 and out[-1].size < k:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def validation_mask(n: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[: int(round(fraction * n))]] = True
    return mask


def _split(split: np.ndarray, fraction: float, k: int, rng: np.random.Generator):
    """(train, validation) indices honouring stored assignments.

    Rows keep the side they were first put on, so a warm-started model is never
    validated on points it has already been trained on. Unassigned rows are
    split at ``fraction``; the validation side is topped up to ``k`` rows if needed.
    """
    n = split.size
    val = split == 1
    free = np.flatnonzero(split < 0)
    val[free] = validation_mask(free.size, fraction, rng)
    short = k - int(val.sum())
    if short > 0:
        pool = np.flatnonzero(~val)
        val[rng.choice(pool, size=min(short, pool.size), replace=False)] = True
    if val.sum() < k or n - val.sum() < k:
        raise ValueError(f"dataset of {n} rows too small for {k} atoms with a validation split")
    return np.flatnonzero(~val), np.flatnonzero(val)


def train_round(model: fl.FlowModel, dataset: RoundDataset, config: DiscoverConfig,
                rng: np.random.Generator):
    """Fit ``model`` to the accumulated dataset; returns (best model, diagnostics)."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    k = config.atoms
    model = model.copy()
    model.reward_mean, model.reward_std = _reward_norm(dataset.rewards)

    z = dataset.z
    c = model.standardize(dataset.rewards).reshape(-1, 1)
    logprior = log_prior_unbounded(z, dataset.spec)

    train_idx, val_idx = _split(dataset.split, config.validation_fraction, k, rng)
    n_val = val_idx.size

    val_batches = _batches(val_idx, config.batch_size, k)
    val_atoms = [draw_atoms(b.size, k, rng) for b in val_batches]

    def batch_loss(params, idx, atoms):
        if config.loss == "apt":
            return _apt_graph(model, params, z[idx], c[idx], logprior[idx], atoms)
        return _mle_graph(model, params, z[idx], c[idx])

    def validation(params):
        total = 0.0
        for b, a in zip(val_batches, val_atoms):
            total += float(np.asarray(batch_loss(params, b, a)).reshape(())) * b.size
        return total / n_val

    params = {key: v.copy() for key, v in model.params.items()}
    state = ad.AdamState(learning_rate=config.learning_rate)
    best_params, best_val = params, validation(params)
    initial_val = best_val
    wait, epoch, halvings = 0, 0, 0
    train_loss = math.nan
    while epoch < config.max_epochs:
        start_params, start_state = params, state
        order = rng.permutation(train_idx)
        losses = []
        try:
            for b in _batches(order, config.batch_size, k):
                atoms = draw_atoms(b.size, k, rng) if config.loss == "apt" else None
                loss, grads = ad.value_and_grad(lambda p: batch_loss(p, b, atoms), params)
                if not math.isfinite(loss):
                    raise ad.NonFiniteGradientError("non-finite loss")
                params, state = ad.adam_step(params, grads, state)
                losses.append(loss * b.size)
            val = validation(params)
            if not math.isfinite(val):
                raise ad.NonFiniteGradientError("non-finite validation loss")
        except (ad.NonFiniteGradientError, FloatingPointError) as err:
            halvings += 1
            if halvings > MAX_LR_HALVINGS:
                raise RoundAbortedError(
                    f"training diverged after {MAX_LR_HALVINGS} learning-rate halvings: {err}",
                    {"epoch": epoch, "learning_rate": start_state.learning_rate},
                ) from err
            logger.warning("epoch %d: %s; halving learning rate", epoch, err)
            params = start_params
            state = ad.AdamState(**{**start_state.__dict__, "learning_rate": start_state.learning_rate / 2})
            continue
        train_loss = sum(losses) / train_idx.size
        epoch += 1
        if val < best_val:
            best_val, best_params, wait = val, params, 0
        else:
            wait += 1
            if wait >= config.patience:
                break
    trained = model.with_params(best_params)
    diagnostics = {
        "train_loss": train_loss,
        "val_loss": best_val,
        "initial_val_loss": initial_val,
        "epochs": epoch,
        "learning_rate": state.learning_rate,
    }
    return trained, diagnostics


def select_r_star(rewards, mode: str = "max") -> float:
    """Target reward for conditioning: the best observed reward (or its 95th percentile)."""
    r = rewards.rewards if isinstance(rewards, RoundDataset) else np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no rewards to select from")
    if mode == "max":
        return float(r.max())
    if mode == "p95":
        return float(np.percentile(r, 95))
    raise ValueError(f"unknown r_star mode {mode!r}")


# ---------------------------------------------------------------------------
# certificates


@dataclass
class PosteriorCertificate:
    flow: fl.FlowModel
    spec: PriorSpec
    r_star: float
    env_id: str
    policy_id: str
    config: DiscoverConfig
    diagnostics: list = field(default_factory=list)
    complete: bool = True

    def sample_unbounded(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return fl.sample(self.flow, self.r_star, n, rng)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return to_bounded(self.sample_unbounded(n, rng), self.spec)

    def log_prob_unbounded(self, z) -> np.ndarray:
        return fl.log_prob(self.flow, np.atleast_2d(z), self.r_star)


@dataclass
class PriorCertificate:
    """The uniform prior in certificate form; a baseline for evaluation."""

    spec: PriorSpec
    env_id: str = ""
    policy_id: str = ""

    def sample_unbounded(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return to_unbounded(self.spec.sample(n, rng), self.spec)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return to_bounded(self.sample_unbounded(n, rng), self.spec)

    def log_prob_unbounded(self, z) -> np.ndarray:
        return log_prior_unbounded(np.atleast_2d(z), self.spec)


def self_loglik(model: fl.FlowModel, r_star: float, n: int, rng: np.random.Generator) -> float:
    z = fl.sample(model, r_star, n, rng)
    return float(np.mean(fl.log_prob(model, z, r_star)))


def run_discover(env: Environment, policy_id: str, config: DiscoverConfig,
                 rng: Optional[np.random.Generator] = None,
                 on_round: Optional[Callable[[dict], None]] = None,
                 self_loglik_samples: int = 1000) -> PosteriorCertificate:
    """Run the sequential loop and return the final posterior certificate.

    ``on_round`` receives one diagnostics record per completed round,
    including wall time (which is kept out of the certificate itself).
    """
    env.check_policy(policy_id)
    spec = env.prior
    root = np.random.SeedSequence(config.seed) if rng is None else np.random.SeedSequence(
        int(rng.integers(0, 2**63 - 1)))
    init_seq, *round_seqs = root.spawn(config.n_rounds + 1)
    model = fl.init_model(spec.dim, config.flow_config, np.random.default_rng(init_seq))

    dataset = RoundDataset(spec)
    proposal = prior_proposal(spec)
    diagnostics: list = []
    r_star = math.nan
    complete = True
    for i, seq in enumerate(round_seqs):
        t0 = time.perf_counter()
        collect_seq, train_seq, eval_seq, split_seq = seq.spawn(4)
        params, rewards = collect_round(env, policy_id, proposal, config.rollouts_per_round,
                                        np.random.default_rng(collect_seq), threads=config.threads)
        dataset.append(params, rewards, i, validation_mask(rewards.size, config.validation_fraction,
                                                          np.random.default_rng(split_seq)))
        try:
            model, info = train_round(model, dataset, config, np.random.default_rng(train_seq))
        except RoundAbortedError as err:
            logger.error("round %d aborted: %s", i + 1, err)
            complete = False
            break
        r_star = select_r_star(dataset, config.r_star_mode)
        record = {
            "round": i + 1,
            "train_loss": info["train_loss"],
            "val_loss": info["val_loss"],
            "r_star": r_star,
            "epochs": info["epochs"],
            "n_data": len(dataset),
            "self_loglik": self_loglik(model, r_star, self_loglik_samples, np.random.default_rng(eval_seq)),
        }
        diagnostics.append(record)
        if on_round is not None:
            on_round({**record, "wall_time_s": time.perf_counter() - t0})
        logger.info("round %d: %s", i + 1, json.dumps(record))
        proposal = flow_proposal(model, spec, r_star, config.prior_mixing)
    if not diagnostics:
        raise RoundAbortedError("first round aborted; no certificate available")
    return PosteriorCertificate(model, spec, r_star, env.env_id, policy_id, config, diagnostics, complete)


def evaluate_posterior(cert, env: Environment, n: int, rng: np.random.Generator) -> dict:
    """Score posterior samples with the environment's noise-free oracle."""
    if n < 1:
        raise ValueError("evaluation needs n >= 1 samples")
    z = cert.sample_unbounded(n, rng)
    x = to_bounded(z, cert.spec)
    reward = env.oracle(cert.policy_id, x)
    return {
        "oracle_success_fraction": float(np.mean(reward >= env.spec.success_threshold)),
        "mean_true_reward": float(np.mean(reward)),
        "self_entropy_estimate": float(-np.mean(cert.log_prob_unbounded(z))),
    }
