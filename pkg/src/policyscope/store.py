"""Certificate files, run configs and CSV exports.

A certificate is one JSON document holding everything needed to sample and
score the posterior: prior ranges, flow weights and masks, reward
normalization, ``r_star``, the run config and per-round diagnostics. Floats
are written with ``repr`` precision so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import flow as fl
from .inference import DiscoverConfig, PosteriorCertificate
from .priors import PriorSpec

FORMAT_VERSION = 1


class CertificateFormatError(ValueError):
    """Malformed certificate; ``offset`` (bytes) or ``path`` (field) locate the problem."""

    def __init__(self, message, offset=None, path=None):
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if path is not None:
            where.append(f"field {path}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.path = path


def certificate_to_dict(cert: PosteriorCertificate) -> dict:
    model = cert.flow
    return {
        "format_version": FORMAT_VERSION,
        "env_id": cert.env_id,
        "policy_id": cert.policy_id,
        "prior": cert.spec.to_dict(),
        "r_star": cert.r_star,
        "complete": cert.complete,
        "seed": cert.config.seed,
        "config": cert.config.to_dict(),
        "flow": {
            "dim": model.dim,
            "n_layers": model.config.n_layers,
            "hidden_sizes": list(model.config.hidden_sizes),
            "log_scale_bound": model.config.log_scale_bound,
            "reward_mean": model.reward_mean,
            "reward_std": model.reward_std,
            "params": {k: v.tolist() for k, v in model.params.items()},
            "masks": [[m.astype(int).tolist() for m in layer.masks] for layer in model.layers],
        },
        "diagnostics": cert.diagnostics,
    }


def dumps_certificate(cert: PosteriorCertificate) -> str:
    return json.dumps(certificate_to_dict(cert), sort_keys=True, indent=1, allow_nan=False) + "\n"


def save_certificate(cert: PosteriorCertificate, path) -> None:
    Path(path).write_text(dumps_certificate(cert))


def _get(d, key, path, kind=None):
    if not isinstance(d, dict) or key not in d:
        raise CertificateFormatError("missing field", path=f"{path}.{key}".lstrip("."))
    value = d[key]
    numeric = kind in (int, float, (int, float))
    if kind is not None and (not isinstance(value, kind) or (numeric and isinstance(value, bool))):
        raise CertificateFormatError(f"expected {kind}, got {type(value).__name__}", path=f"{path}.{key}".lstrip("."))
    return value


def _array(value, shape, path) -> np.ndarray:
    try:
        arr = np.array(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise CertificateFormatError("not a numeric array", path=path) from None
    if arr.shape != shape:
        raise CertificateFormatError(f"shape {arr.shape} != expected {shape}", path=path)
    if not np.all(np.isfinite(arr)):
        raise CertificateFormatError("non-finite values", path=path)
    return arr


def certificate_from_dict(doc: dict) -> PosteriorCertificate:
    if not isinstance(doc, dict):
        raise CertificateFormatError("top level must be an object", path="$")
    version = _get(doc, "format_version", "", int)
    if version != FORMAT_VERSION:
        raise CertificateFormatError(f"unsupported format_version {version} (expected {FORMAT_VERSION})",
                                     path="format_version")
    try:
        spec = PriorSpec.from_dict(_get(doc, "prior", "", dict))
    except (KeyError, ValueError, TypeError) as err:
        raise CertificateFormatError(f"invalid prior: {err}", path="prior") from None
    try:
        config = DiscoverConfig.from_dict(_get(doc, "config", "", dict))
    except (KeyError, ValueError, TypeError) as err:
        raise CertificateFormatError(f"invalid config: {err}", path="config") from None

    f = _get(doc, "flow", "", dict)
    dim = _get(f, "dim", "flow", int)
    if dim != spec.dim:
        raise CertificateFormatError(f"flow dim {dim} != prior dim {spec.dim}", path="flow.dim")
    try:
        fconf = fl.FlowConfig(_get(f, "n_layers", "flow", int), tuple(_get(f, "hidden_sizes", "flow", list)),
                              _get(f, "log_scale_bound", "flow", (int, float)))
    except (TypeError, ValueError) as err:
        raise CertificateFormatError(f"invalid flow hyperparameters: {err}", path="flow") from None
    model = fl.init_model(dim, fconf, np.random.default_rng(0))
    raw = _get(f, "params", "flow", dict)
    extra = sorted(set(raw) - set(model.params))
    if extra:
        raise CertificateFormatError(f"unexpected parameters {extra}", path="flow.params")
    model.params = {k: _array(_get(raw, k, "flow.params"), v.shape, f"flow.params.{k}")
                    for k, v in model.params.items()}
    masks = _get(f, "masks", "flow", list)
    if len(masks) != len(model.layers):
        raise CertificateFormatError("mask count differs from layer count", path="flow.masks")
    for l, (stored, layer) in enumerate(zip(masks, model.layers)):
        if not isinstance(stored, list) or len(stored) != len(layer.masks):
            raise CertificateFormatError("wrong number of masks", path=f"flow.masks[{l}]")
        for k, (m, expected) in enumerate(zip(stored, layer.masks)):
            if not np.array_equal(_array(m, expected.shape, f"flow.masks[{l}][{k}]"), expected):
                raise CertificateFormatError("mask violates the autoregressive layout", path=f"flow.masks[{l}][{k}]")
    model.reward_mean = float(_get(f, "reward_mean", "flow", (int, float)))
    model.reward_std = float(_get(f, "reward_std", "flow", (int, float)))
    if not model.reward_std > 0:
        raise CertificateFormatError("reward_std must be positive", path="flow.reward_std")

    r_star = _get(doc, "r_star", "", (int, float))
    if not math.isfinite(r_star):
        raise CertificateFormatError("r_star must be finite", path="r_star")
    return PosteriorCertificate(
        flow=model,
        spec=spec,
        r_star=float(r_star),
        env_id=_get(doc, "env_id", "", str),
        policy_id=_get(doc, "policy_id", "", str),
        config=config,
        diagnostics=_get(doc, "diagnostics", "", list),
        complete=_get(doc, "complete", "", bool),
    )


def loads_certificate(text: str) -> PosteriorCertificate:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise CertificateFormatError(f"invalid JSON: {err.msg}", offset=len(text[: err.pos].encode())) from None
    return certificate_from_dict(doc)


def load_certificate(path) -> PosteriorCertificate:
    return loads_certificate(Path(path).read_text())


def load_config(path) -> DiscoverConfig:
    """Flat JSON object of DiscoverConfig fields; unknown keys are errors."""
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError("config must be a JSON object")
    return DiscoverConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# CSV exports


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_samples_csv(samples: np.ndarray, spec: PriorSpec, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(spec.names)
        for row in samples:
            w.writerow([_fmt(v) for v in row])


PAIRGRID_FIELDS = ["kind", "var_x", "var_y", "bin_x", "bin_y", "x_lo", "x_hi", "y_lo", "y_hi", "density"]


def pairgrid(samples: np.ndarray, spec: PriorSpec, bins: int) -> list:
    """1-D histograms and 2-D pairwise histogram densities over the prior box."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    edges = [np.linspace(spec.lo[i], spec.hi[i], bins + 1) for i in range(spec.dim)]
    rows = []
    for i, name in enumerate(spec.names):
        dens, _ = np.histogram(samples[:, i], bins=edges[i], density=True)
        for b in range(bins):
            rows.append({"kind": "marginal", "var_x": name, "var_y": "", "bin_x": b, "bin_y": "",
                         "x_lo": edges[i][b], "x_hi": edges[i][b + 1], "y_lo": "", "y_hi": "", "density": dens[b]})
    for i in range(spec.dim):
        for j in range(i + 1, spec.dim):
            dens, _, _ = np.histogram2d(samples[:, i], samples[:, j], bins=[edges[i], edges[j]], density=True)
            for a in range(bins):
                for b in range(bins):
                    rows.append({"kind": "pair", "var_x": spec.names[i], "var_y": spec.names[j], "bin_x": a,
                                 "bin_y": b, "x_lo": edges[i][a], "x_hi": edges[i][a + 1], "y_lo": edges[j][b],
                                 "y_hi": edges[j][b + 1], "density": dens[a, b]})
    return rows


def write_pairgrid_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PAIRGRID_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
