"""Conditional masked autoregressive flow over the unbounded parameter space.

Each transform is a MADE network producing a shift ``mu`` and a bounded
log-scale ``alpha`` for every coordinate, both depending only on preceding
coordinates (and freely on the conditioner). The density direction is

    u_i = (z_i - mu_i(z_<i, c)) * exp(-alpha_i(z_<i, c))

stacked over layers with the coordinate order reversed between consecutive
layers, ending in a standard normal base density.

All functions accept either plain arrays or a dict of tape variables for the
parameters, so the same graph is used for training and for evaluation.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FlowConfig:
    n_layers: int = 5
    hidden_sizes: tuple = (50, 50)
    log_scale_bound: float = 7.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if not self.hidden_sizes or min(self.hidden_sizes) < 1:
            raise ValueError("need at least one hidden layer of positive width")
        if not self.log_scale_bound > 0:
            raise ValueError("log_scale_bound must be positive")


@dataclass
class MadeLayer:
    """Masks and degrees of one MADE transform (weights live in FlowModel.params)."""

    input_dim: int
    hidden_sizes: tuple
    input_degrees: np.ndarray
    hidden_degrees: list
    masks: list  # input->h1, h1->h2, ..., h_last->output

    @classmethod
    def build(cls, input_dim: int, hidden_sizes: Sequence[int]) -> "MadeLayer":
        # inputs carry degrees 1..d; hidden units cycle through 0..d-1.
        # A degree-0 unit sees only the conditioner.
        d = input_dim
        in_deg = np.arange(1, d + 1)
        hid_deg = [np.arange(h) % d for h in hidden_sizes]
        masks = [(in_deg[:, None] <= hid_deg[0][None, :]).astype(np.float64)]
        for a, b in zip(hid_deg, hid_deg[1:]):
            masks.append((a[:, None] <= b[None, :]).astype(np.float64))
        masks.append((hid_deg[-1][:, None] < in_deg[None, :]).astype(np.float64))
        return cls(d, tuple(hidden_sizes), in_deg, hid_deg, masks)


@dataclass
class FlowModel:
    dim: int
    config: FlowConfig
    layers: list
    params: Dict[str, np.ndarray]
    reward_mean: float = 0.0
    reward_std: float = 1.0
    cond_dim: int = 1

    @property
    def log_scale_bound(self) -> float:
        return self.config.log_scale_bound

    @property
    def permutations(self) -> list:
        """Input order seen by each layer, relative to the previous layer's output."""
        ident = np.arange(self.dim)
        return [ident] + [ident[::-1].copy() for _ in range(len(self.layers) - 1)]

    def copy(self) -> "FlowModel":
        return copy.deepcopy(self)

    def with_params(self, params: Mapping[str, np.ndarray]) -> "FlowModel":
        m = self.copy()
        m.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        return m

    def standardize(self, cond) -> np.ndarray:
        c = np.asarray(cond, dtype=np.float64)
        return (c - self.reward_mean) / self.reward_std


def param_names(n_layers: int, n_hidden: int) -> list:
    names = []
    for l in range(n_layers):
        for k in range(n_hidden):
            names += [f"{l}.W{k}", f"{l}.C{k}", f"{l}.b{k}"]
        names += [f"{l}.Wm", f"{l}.Cm", f"{l}.bm", f"{l}.Wa", f"{l}.Ca", f"{l}.ba"]
    return names


def init_model(dim: int, config: Optional[FlowConfig] = None, rng: Optional[np.random.Generator] = None) -> FlowModel:
    """Fresh flow: random hidden weights, zero output layer (exact identity map)."""
    if dim < 1:
        raise ValueError(f"flow dimension must be >= 1, got {dim}")
    config = config or FlowConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    layers = []
    params: Dict[str, np.ndarray] = {}
    for l in range(config.n_layers):
        made = MadeLayer.build(dim, config.hidden_sizes)
        layers.append(made)
        sizes = (dim,) + config.hidden_sizes
        for k in range(len(config.hidden_sizes)):
            bound = 1.0 / math.sqrt(sizes[k] + 1)
            params[f"{l}.W{k}"] = rng.uniform(-bound, bound, (sizes[k], sizes[k + 1]))
            params[f"{l}.C{k}"] = rng.uniform(-bound, bound, (1, sizes[k + 1]))
            params[f"{l}.b{k}"] = rng.uniform(-bound, bound, (1, sizes[k + 1]))
        h = config.hidden_sizes[-1]
        for head in ("m", "a"):
            params[f"{l}.W{head}"] = np.zeros((h, dim))
            params[f"{l}.C{head}"] = np.zeros((1, dim))
            params[f"{l}.b{head}"] = np.zeros((1, dim))
    return FlowModel(dim=dim, config=config, layers=layers, params=params)


def made_forward(model: FlowModel, l: int, params: Mapping, x, c):
    """Shift and bounded log-scale of layer ``l`` for inputs ``x`` (n, d)."""
    made = model.layers[l]
    h = x
    for k in range(len(made.hidden_sizes)):
        pre = ad.add(ad.add(ad.matmul(h, params[f"{l}.W{k}"], made.masks[k]),
                            ad.matmul(c, params[f"{l}.C{k}"])), params[f"{l}.b{k}"])
        h = ad.tanh(pre)
    out_mask = made.masks[-1]
    mu = ad.add(ad.add(ad.matmul(h, params[f"{l}.Wm"], out_mask), ad.matmul(c, params[f"{l}.Cm"])), params[f"{l}.bm"])
    raw = ad.add(ad.add(ad.matmul(h, params[f"{l}.Wa"], out_mask), ad.matmul(c, params[f"{l}.Ca"])), params[f"{l}.ba"])
    bound = model.log_scale_bound
    alpha = ad.mul(ad.tanh(ad.mul(raw, 1.0 / bound)), bound)
    return mu, alpha


def _reversal_matrix(d: int) -> np.ndarray:
    return np.eye(d)[::-1].copy()


def _prepare(model: FlowModel, z, cond):
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != model.dim:
        raise ad.ShapeError(f"expected points with {model.dim} columns, got shape {z.shape}")
    c = np.asarray(cond, dtype=np.float64).reshape(-1, 1)
    if c.shape[0] == 1 and z.shape[0] > 1:
        c = np.broadcast_to(c, (z.shape[0], 1))
    if c.shape[0] != z.shape[0]:
        raise ad.ShapeError(f"{c.shape[0]} conditions for {z.shape[0]} points")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(c))):
        raise ValueError("log_prob requires finite points and conditions")
    return z, model.standardize(c)


def log_prob_graph(model: FlowModel, params: Mapping, z: np.ndarray, c: np.ndarray):
    """log q(z | c) as an (n, 1) column; ``c`` is already standardized."""
    rev = _reversal_matrix(model.dim)
    x = z
    total_log_scale = None
    for l in range(len(model.layers)):
        if l > 0:
            x = ad.matmul(x, rev)
        mu, alpha = made_forward(model, l, params, x, c)
        x = ad.mul(ad.add(x, ad.mul(mu, -1.0)), ad.exp(ad.mul(alpha, -1.0)))
        s = ad.sum(alpha, axis=1)
        total_log_scale = s if total_log_scale is None else ad.add(total_log_scale, s)
    base = ad.add(ad.mul(ad.sum(ad.mul(x, x), axis=1), -0.5), -0.5 * model.dim * LOG_2PI)
    return ad.add(base, ad.mul(total_log_scale, -1.0))


def log_prob(model: FlowModel, z, cond) -> np.ndarray:
    """log q(z | cond) for points (n, d); ``cond`` is the raw reward (scalar or per point)."""
    single = np.ndim(z) == 1
    z2, c = _prepare(model, z, cond)
    out = log_prob_graph(model, model.params, z2, c)[:, 0]
    return float(out[0]) if single else out


def to_base(model: FlowModel, z, cond):
    """Forward (density-direction) map: returns base points u and log|det dU/dz|."""
    z2, c = _prepare(model, z, cond)
    x = z2
    logdet = np.zeros(z2.shape[0])
    for l in range(len(model.layers)):
        if l > 0:
            x = x[:, ::-1]
        mu, alpha = made_forward(model, l, model.params, x, c)
        x = (x - mu) * np.exp(-alpha)
        logdet -= alpha.sum(axis=1)
    return x, logdet


def from_base(model: FlowModel, u, cond) -> np.ndarray:
    """Inverse map, coordinate by coordinate through every layer."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    c = model.standardize(np.asarray(cond, dtype=np.float64).reshape(-1, 1))
    if c.shape[0] == 1 and u.shape[0] > 1:
        c = np.broadcast_to(c, (u.shape[0], 1))
    y = u
    for l in reversed(range(len(model.layers))):
        x = np.zeros_like(y)
        for i in range(model.dim):
            mu, alpha = made_forward(model, l, model.params, x, c)
            x[:, i] = y[:, i] * np.exp(alpha[:, i]) + mu[:, i]
        y = x[:, ::-1] if l > 0 else x
    return y


def sample(model: FlowModel, cond, n: int, rng: np.random.Generator, return_base: bool = False):
    """Draw ``n`` points from q(. | cond)."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    u = rng.standard_normal((n, model.dim))
    z = from_base(model, u, np.full(n, float(cond)) if np.ndim(cond) == 0 else cond)
    return (z, u) if return_base else z
