import json
import math

import numpy as np
import pytest

from mvsde import metrics
from mvsde.coefficients import (
    Model,
    eval_drift,
    eval_sigma,
    lipschitz_audit,
    load_model,
)
from mvsde.errors import AuditError, ConfigError
from mvsde.measures import Measure
from conftest import MODELS


def test_eval_drift_examples(brownian_model, arctan_model):
    mu = Measure.dirac([2.0])
    assert np.allclose(eval_drift(brownian_model, 0.0, [0.3], mu), 0.0)
    b = eval_drift(arctan_model, 0.1, [0.0], mu)
    assert b[0] == pytest.approx(math.atan(2.0), abs=1e-12)
    assert b[0] == pytest.approx(1.10715, abs=1e-5)


def test_eval_sigma_examples(brownian_model, tanh_model):
    mu0 = Measure.dirac([0.0])
    assert np.allclose(eval_sigma(brownian_model, 0.0, [0.0], mu0), np.eye(1))
    # h(0) = 0, tanh 0 = 0 -> identity
    assert np.allclose(eval_sigma(tanh_model, 0.0, [0.0], mu0), np.eye(1))
    s3 = eval_sigma(tanh_model, 0.0, [0.0], Measure.dirac([3.0]))
    assert s3[0, 0] == pytest.approx(1.0 + 0.5 * math.tanh(1.0), abs=1e-12)
    assert s3[0, 0] == pytest.approx(1.3808, abs=1e-4)


def test_drift_measure_lipschitz_bound(arctan_model):
    # |arctan'| <= 1 and |mu(id) - nu(id)| <= ||mu - nu||_{1,var}, so the
    # audited ratio against the combined right side stays below 1.
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        m1 = Measure.from_points(rng.uniform(-3, 3, (8, 1)), rng.uniform(0.2, 1, 8))
        m2 = Measure.from_points(rng.uniform(-3, 3, (8, 1)), rng.uniform(0.2, 1, 8))
        num = abs(eval_drift(arctan_model, 0.0, [0.0], m1)[0]
                  - eval_drift(arctan_model, 0.0, [0.0], m2)[0])
        den = (metrics.weighted_variation_atoms(m1, m2, 1.0).value
               + metrics.wasserstein(m1, m2, 1.0).value)
        worst = max(worst, num / den)
    assert worst <= 1.0 + 1e-9


@pytest.mark.parametrize("name", ["brownian", "arctan_drift", "tanh_diffusion",
                                  "mixed_mean_field"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_shipped_models_pass_audit(name, seed):
    model = load_model(MODELS / f"{name}.json")
    report = lipschitz_audit(model, n_samples=1000, seed=seed)
    assert report.passed
    assert max(report.ratios.values()) <= model.constants.K
    lo, hi = report.ellipticity
    assert lo >= 1.0 / model.constants.K - 1e-9
    assert hi <= model.constants.K + 1e-9


def test_constant_model_ratios_zero(brownian_model):
    report = lipschitz_audit(brownian_model, n_samples=50, seed=0)
    assert all(v == 0.0 for v in report.ratios.values())


def test_structural_flags(tanh_model, mixed_model, space_sigma_model):
    rep = lipschitz_audit(tanh_model, n_samples=20, seed=0)
    assert rep.flags["sigma_space_free"]
    assert rep.condition_ii
    assert not rep.flags["sigma_measure_free"]
    rep2 = lipschitz_audit(space_sigma_model, n_samples=20, seed=0)
    assert not rep2.flags["sigma_space_free"]
    assert rep2.condition_i  # tanh(x) composition is state-Lipschitz
    assert mixed_model.sigma_wk_lipschitz


def test_spectrum_violation_raises():
    bad = Model.from_json({
        "name": "bad_sigma", "dim": 1,
        "drift": [{"op": "const", "value": 0.0}],
        "diffusion": {"kind": "scalar", "exprs": [{"op": "const", "value": 2.5}]},
        "constants": {"K": 2.0, "k": 1.0, "eta": 1.0, "beta": 1.0,
                      "b_sup": 0.0, "grad_sigma_bound": 0.0},
    })
    with pytest.raises(AuditError):
        eval_sigma(bad, 0.0, [0.0], Measure.dirac([0.0]))


def test_b_sup_violation_raises():
    bad = Model.from_json({
        "name": "bad_drift", "dim": 1,
        "drift": [{"op": "const", "value": 1.0}],
        "diffusion": {"kind": "scalar", "exprs": [{"op": "const", "value": 1.0}]},
        "constants": {"K": 1.5, "k": 1.0, "eta": 1.0, "beta": 1.0,
                      "b_sup": 0.5, "grad_sigma_bound": 0.0},
    })
    with pytest.raises(AuditError):
        eval_drift(bad, 0.0, [0.0], Measure.dirac([0.0]))


def test_audit_failure_reports_witness():
    # Declared K understates the true ellipticity bound: sigma^2 = 2.25 > 2.
    understated = Model.from_json({
        "name": "understated", "dim": 1,
        "drift": [{"op": "const", "value": 0.0}],
        "diffusion": {"kind": "scalar", "exprs": [{"op": "const", "value": 1.5}]},
        "constants": {"K": 2.0, "k": 1.0, "eta": 1.0, "beta": 1.0,
                      "b_sup": 0.0, "grad_sigma_bound": 0.0},
    })
    with pytest.raises(AuditError):
        lipschitz_audit(understated, n_samples=50, seed=0)
    report = lipschitz_audit(understated, n_samples=50, seed=0, raise_on_failure=False)
    assert not report.passed
    assert report.witness is not None and "evaluation" in report.witness


def test_model_json_roundtrip(mixed_model):
    spec = mixed_model.to_json()
    back = Model.from_json(json.loads(json.dumps(spec)))
    assert back.to_json() == spec
    assert back.sigma_space_free == mixed_model.sigma_space_free


def test_config_errors_carry_pointers():
    with pytest.raises(ConfigError) as err:
        Model.from_json({"dim": 1, "drift": [{"op": "nope"}],
                         "diffusion": {"kind": "scalar", "exprs": []},
                         "constants": {"K": 2, "k": 1, "eta": 1, "beta": 1,
                                       "b_sup": 0, "grad_sigma_bound": 0}})
    assert "/drift/0/op" in str(err.value)
    with pytest.raises(ConfigError) as err2:
        Model.from_json({"dim": 1, "drift": [], "diffusion": {}, "constants": {"K": 2}})
    assert "/constants/" in str(err2.value)


def test_integral_nesting_rejected():
    with pytest.raises(ConfigError):
        Model.from_json({
            "name": "nested", "dim": 1,
            "drift": [{"op": "integral", "arg": {"op": "integral",
                                                 "arg": {"op": "coord", "index": 0}}}],
            "diffusion": {"kind": "scalar", "exprs": [{"op": "const", "value": 1.0}]},
            "constants": {"K": 1.5, "k": 1.0, "eta": 1.0, "beta": 1.0,
                          "b_sup": 1.0, "grad_sigma_bound": 0.0},
        })


def test_eval_determinism(mixed_model):
    rng = np.random.default_rng(1)
    mu = Measure.from_points(rng.normal(size=(20, 1)))
    x = [0.3]
    a = eval_drift(mixed_model, 0.2, x, mu)
    b = eval_drift(mixed_model, 0.2, x, mu)
    assert np.array_equal(a, b)
    s1 = eval_sigma(mixed_model, 0.2, x, mu)
    s2 = eval_sigma(mixed_model, 0.2, x, mu)
    assert np.array_equal(s1, s2)
