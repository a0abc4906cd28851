import json

import numpy as np
import pytest

from policyscope import envs, store
from policyscope import flow as fl
from policyscope import inference as inf

from .conftest import randomize


@pytest.fixture
def cert():
    env = envs.PourSim()
    rng = np.random.default_rng(0)
    model = randomize(fl.init_model(4, fl.FlowConfig(n_layers=3, hidden_sizes=(12, 10)), rng), rng)
    model.reward_mean, model.reward_std = -0.4, 0.35
    cfg = inf.DiscoverConfig(n_layers=3, hidden_sizes=(12, 10), seed=9)
    diags = [{"round": 1, "train_loss": 2.1, "val_loss": 2.0, "r_star": 1.7}]
    return inf.PosteriorCertificate(model, env.prior, 1.7, "poursim", "pour", cfg, diags)


def test_round_trip_is_exact(tmp_path, cert):
    path = tmp_path / "c.json"
    store.save_certificate(cert, path)
    back = store.load_certificate(path)
    z = np.random.default_rng(1).standard_normal((100, 4)) * 2
    drift = np.abs(back.log_prob_unbounded(z) - cert.log_prob_unbounded(z))
    assert drift.max() <= 1e-12
    assert back.spec.same_ranges(cert.spec)
    assert (back.r_star, back.env_id, back.policy_id, back.config) == (1.7, "poursim", "pour", cert.config)
    assert store.dumps_certificate(back) == path.read_text()


def test_truncated_file(tmp_path, cert):
    text = store.dumps_certificate(cert)
    with pytest.raises(store.CertificateFormatError) as info:
        store.loads_certificate(text[: len(text) // 2])
    assert info.value.offset is not None


def test_version_bump_rejected(cert):
    doc = store.certificate_to_dict(cert)
    doc["format_version"] = 2
    with pytest.raises(store.CertificateFormatError, match="format_version"):
        store.loads_certificate(json.dumps(doc))


@pytest.mark.parametrize(
    "mutate, path",
    [
        (lambda d: d["flow"]["params"].pop("0.W0"), "flow.params.0.W0"),
        (lambda d: d["flow"]["params"]["1.Wa"].append([0.0] * 4), "flow.params.1.Wa"),
        (lambda d: d["flow"]["masks"][0][0][0].__setitem__(0, 1), "flow.masks[0][0]"),
        (lambda d: d.__setitem__("r_star", "high"), "r_star"),
        (lambda d: d["prior"].__setitem__("hi", [0, 0, 0, 0]), "prior"),
        (lambda d: d["config"].__setitem__("bogus", 1), "config"),
    ],
)
def test_field_errors_carry_paths(cert, mutate, path):
    doc = store.certificate_to_dict(cert)
    mutate(doc)
    with pytest.raises(store.CertificateFormatError) as info:
        store.certificate_from_dict(doc)
    assert info.value.path == path


def test_load_config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"n_rounds": 3, "rollouts_per_round": 50}))
    assert store.load_config(p).n_rounds == 3
    p.write_text(json.dumps({"n_rounds": 3, "speed": "fast"}))
    with pytest.raises(KeyError):
        store.load_config(p)


def test_samples_csv(tmp_path, cert):
    x = cert.sample(10, np.random.default_rng(0))
    p = tmp_path / "s.csv"
    store.write_samples_csv(x, cert.spec, p)
    rows = p.read_text().splitlines()
    assert rows[0] == "grasp,rel_x,rel_y,dangle"
    np.testing.assert_array_equal(np.loadtxt(p, delimiter=",", skiprows=1), x)


def test_pairgrid_densities_normalize(cert):
    x = cert.sample(2000, np.random.default_rng(0))
    rows = store.pairgrid(x, cert.spec, 8)
    spec = cert.spec
    for i, name in enumerate(spec.names):
        marg = [r for r in rows if r["kind"] == "marginal" and r["var_x"] == name]
        assert len(marg) == 8
        assert sum(r["density"] * (r["x_hi"] - r["x_lo"]) for r in marg) == pytest.approx(1.0)
    pairs = [r for r in rows if r["kind"] == "pair" and (r["var_x"], r["var_y"]) == ("grasp", "rel_x")]
    assert len(pairs) == 64
    total = sum(r["density"] * (r["x_hi"] - r["x_lo"]) * (r["y_hi"] - r["y_lo"]) for r in pairs)
    assert total == pytest.approx(1.0)
    assert len(rows) == 4 * 8 + 6 * 64
