"""Declarative drift/diffusion models and the numerical audit of their constants.

A model declares drift components b_t(x, mu) and a diffusion sigma_t(x, mu)
as small composition trees over: constants, the time variable, coordinates,
the Euclidean norm, tanh / arctan, a min-with-1 clamp, linear combinations,
and integral functionals mu(psi) of the measure argument.  This is the
constructive class realizing the standing Lipschitz hypotheses: drift
functionals psi with growth <= 1+|y|^k give k-weighted-variation Lipschitz
drift, and diffusion functionals h that are Hoelder/growth-bounded give
transport-Lipschitz diffusion.

JSON schema (see ``Model.from_json``)::

    {"name": str, "dim": int,
     "drift": [<expr>, ...],                       # one expr per component
     "diffusion": {"kind": "scalar"|"diag", "exprs": [<expr>, ...]},
     "constants": {"K":, "k":, "eta":, "beta":, "b_sup":, "grad_sigma_bound":}}

    <expr> := {"op": "const", "value": float}
            | {"op": "time"} | {"op": "coord", "index": int} | {"op": "norm"}
            | {"op": "abs"|"tanh"|"arctan"|"min1", "arg": <expr>}
            | {"op": "lincomb", "const": float,
               "terms": [{"coef": float, "arg": <expr>}, ...]}
            | {"op": "integral", "arg": <expr>}    # arg is a function of y only
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AuditError, ConfigError, DomainError, NumericsError
from .measures import Measure
from . import metrics

_SPECTRUM_SLACK = 1e-9
_BSUP_SLACK = 1e-9


# ---------------------------------------------------------------------------
# Expression trees


class Expr:
    """Base class for composition nodes; subclasses are immutable."""

    def evaluate(self, t, points, measure):
        """Vectorized value over ``points`` of shape (n, d); returns (n,)."""
        raise NotImplementedError

    def bounds(self):
        """Conservative (lo, hi) interval of the node's range."""
        raise NotImplementedError

    def lipschitz(self) -> float:
        """Upper bound on the space-Lipschitz constant (may be inf)."""
        raise NotImplementedError

    def uses_space(self) -> bool:
        raise NotImplementedError

    def uses_measure(self) -> bool:
        raise NotImplementedError

    def integrals(self) -> list:
        """All integral-functional nodes in the tree."""
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Const(Expr):
    value: float

    def evaluate(self, t, points, measure):
        return np.full(points.shape[0], float(self.value))

    def bounds(self):
        return (self.value, self.value)

    def lipschitz(self):
        return 0.0

    def uses_space(self):
        return False

    def uses_measure(self):
        return False

    def integrals(self):
        return []

    def to_json(self):
        return {"op": "const", "value": self.value}


@dataclass(frozen=True)
class TimeVar(Expr):
    def evaluate(self, t, points, measure):
        return np.full(points.shape[0], float(t))

    def bounds(self):
        return (0.0, math.inf)

    def lipschitz(self):
        return 0.0

    def uses_space(self):
        return False

    def uses_measure(self):
        return False

    def integrals(self):
        return []

    def to_json(self):
        return {"op": "time"}


@dataclass(frozen=True)
class Coord(Expr):
    index: int

    def evaluate(self, t, points, measure):
        if self.index >= points.shape[1]:
            raise DomainError(f"coordinate index {self.index} out of range")
        return points[:, self.index].astype(float)

    def bounds(self):
        return (-math.inf, math.inf)

    def lipschitz(self):
        return 1.0

    def uses_space(self):
        return True

    def uses_measure(self):
        return False

    def integrals(self):
        return []

    def to_json(self):
        return {"op": "coord", "index": self.index}


@dataclass(frozen=True)
class Norm(Expr):
    def evaluate(self, t, points, measure):
        return np.linalg.norm(points, axis=1)

    def bounds(self):
        return (0.0, math.inf)

    def lipschitz(self):
        return 1.0

    def uses_space(self):
        return True

    def uses_measure(self):
        return False

    def integrals(self):
        return []

    def to_json(self):
        return {"op": "norm"}


def _abs_interval(lo, hi):
    if lo <= 0.0 <= hi:
        return (0.0, max(abs(lo), abs(hi)))
    return (min(abs(lo), abs(hi)), max(abs(lo), abs(hi)))


@dataclass(frozen=True)
class Unary(Expr):
    arg: Expr

    _OP = ""

    def uses_space(self):
        return self.arg.uses_space()

    def uses_measure(self):
        return self.arg.uses_measure()

    def integrals(self):
        return self.arg.integrals()

    def lipschitz(self):
        # abs/tanh/arctan/min-with-1 are all 1-Lipschitz outer maps.
        return self.arg.lipschitz()

    def to_json(self):
        return {"op": self._OP, "arg": self.arg.to_json()}


class Abs(Unary):
    _OP = "abs"

    def evaluate(self, t, points, measure):
        return np.abs(self.arg.evaluate(t, points, measure))

    def bounds(self):
        return _abs_interval(*self.arg.bounds())


class Tanh(Unary):
    _OP = "tanh"

    def evaluate(self, t, points, measure):
        return np.tanh(self.arg.evaluate(t, points, measure))

    def bounds(self):
        lo, hi = self.arg.bounds()
        return (math.tanh(lo) if lo > -math.inf else -1.0,
                math.tanh(hi) if hi < math.inf else 1.0)


class Arctan(Unary):
    _OP = "arctan"

    def evaluate(self, t, points, measure):
        return np.arctan(self.arg.evaluate(t, points, measure))

    def bounds(self):
        lo, hi = self.arg.bounds()
        return (math.atan(lo) if lo > -math.inf else -math.pi / 2,
                math.atan(hi) if hi < math.inf else math.pi / 2)


class Min1(Unary):
    """min(arg, 1) clamp; with Abs or Norm inside it builds bounded 1-Lipschitz functionals."""

    _OP = "min1"

    def evaluate(self, t, points, measure):
        return np.minimum(self.arg.evaluate(t, points, measure), 1.0)

    def bounds(self):
        lo, hi = self.arg.bounds()
        return (min(lo, 1.0), min(hi, 1.0))


@dataclass(frozen=True)
class LinComb(Expr):
    const: float
    terms: tuple  # of (coef, Expr)

    def evaluate(self, t, points, measure):
        out = np.full(points.shape[0], float(self.const))
        for coef, node in self.terms:
            out = out + coef * node.evaluate(t, points, measure)
        return out

    def bounds(self):
        lo = hi = float(self.const)
        for coef, node in self.terms:
            a, b = node.bounds()
            pa, pb = coef * a, coef * b
            lo += min(pa, pb)
            hi += max(pa, pb)
        return (lo, hi)

    def lipschitz(self):
        return sum(abs(c) * n.lipschitz() for c, n in self.terms)

    def uses_space(self):
        return any(n.uses_space() for _, n in self.terms)

    def uses_measure(self):
        return any(n.uses_measure() for _, n in self.terms)

    def integrals(self):
        out = []
        for _, n in self.terms:
            out.extend(n.integrals())
        return out

    def to_json(self):
        return {
            "op": "lincomb",
            "const": self.const,
            "terms": [{"coef": c, "arg": n.to_json()} for c, n in self.terms],
        }


@dataclass(frozen=True)
class Integral(Expr):
    """Mean-field functional mu(psi); psi is a function of the state variable only."""

    arg: Expr

    def __post_init__(self):
        if self.arg.uses_measure():
            raise ConfigError("integral functionals must not nest", "/integral/arg")

    def evaluate(self, t, points, measure):
        if measure is None:
            raise DomainError("integral functional evaluated without a measure")
        vals = self.arg.evaluate(t, measure.points, None)
        v = float(np.sum(measure.weights * vals))
        if not math.isfinite(v):
            raise NumericsError(
                f"integral functional {json.dumps(self.arg.to_json())} returned a non-finite value"
            )
        return np.full(points.shape[0], v)

    def bounds(self):
        return self.arg.bounds()

    def lipschitz(self):
        return 0.0  # constant in the space variable

    def uses_space(self):
        return False

    def uses_measure(self):
        return True

    def integrals(self):
        return [self]

    def to_json(self):
        return {"op": "integral", "arg": self.arg.to_json()}


_UNARY = {"abs": Abs, "tanh": Tanh, "arctan": Arctan, "min1": Min1}


def expr_from_json(spec, pointer="") -> Expr:
    if not isinstance(spec, dict) or "op" not in spec:
        raise ConfigError("expression node must be an object with an 'op' field", pointer)
    op = spec["op"]
    if op == "const":
        if "value" not in spec:
            raise ConfigError("const node needs 'value'", pointer + "/value")
        return Const(float(spec["value"]))
    if op == "time":
        return TimeVar()
    if op == "coord":
        if "index" not in spec:
            raise ConfigError("coord node needs 'index'", pointer + "/index")
        return Coord(int(spec["index"]))
    if op == "norm":
        return Norm()
    if op in _UNARY:
        if "arg" not in spec:
            raise ConfigError(f"{op} node needs 'arg'", pointer + "/arg")
        return _UNARY[op](expr_from_json(spec["arg"], pointer + "/arg"))
    if op == "lincomb":
        terms = []
        for i, term in enumerate(spec.get("terms", [])):
            tp = f"{pointer}/terms/{i}"
            if "coef" not in term or "arg" not in term:
                raise ConfigError("lincomb terms need 'coef' and 'arg'", tp)
            terms.append((float(term["coef"]), expr_from_json(term["arg"], tp + "/arg")))
        return LinComb(float(spec.get("const", 0.0)), tuple(terms))
    if op == "integral":
        if "arg" not in spec:
            raise ConfigError("integral node needs 'arg'", pointer + "/arg")
        return Integral(expr_from_json(spec["arg"], pointer + "/arg"))
    raise ConfigError(f"unknown expression op {op!r}", pointer + "/op")


# ---------------------------------------------------------------------------
# Model


@dataclass(frozen=True)
class ModelConstants:
    """Declared constants matching the standing assumptions."""

    K: float
    k: float
    eta: float
    beta: float
    b_sup: float
    grad_sigma_bound: float

    def __post_init__(self):
        if not self.K > 1:
            raise ConfigError(f"K must exceed 1, got {self.K}", "/constants/K")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}", "/constants/k")
        if not 0 < self.eta <= 1:
            raise ConfigError(f"eta must lie in (0,1], got {self.eta}", "/constants/eta")
        if not 0 < self.beta <= 1:
            raise ConfigError(f"beta must lie in (0,1], got {self.beta}", "/constants/beta")
        if self.b_sup < 0 or self.grad_sigma_bound < 0:
            raise ConfigError("b_sup and grad_sigma_bound must be nonnegative", "/constants")

    def to_json(self):
        return {
            "K": self.K, "k": self.k, "eta": self.eta, "beta": self.beta,
            "b_sup": self.b_sup, "grad_sigma_bound": self.grad_sigma_bound,
        }


@dataclass(frozen=True)
class Diffusion:
    """Diffusion spec: sigma = s*I ('scalar', one expr) or diag(s_1..s_d) ('diag')."""

    kind: str
    exprs: tuple

    def __post_init__(self):
        if self.kind not in ("scalar", "diag"):
            raise ConfigError(f"diffusion kind must be 'scalar' or 'diag', got {self.kind!r}",
                              "/diffusion/kind")

    def to_json(self):
        return {"kind": self.kind, "exprs": [e.to_json() for e in self.exprs]}


@dataclass(frozen=True)
class Model:
    name: str
    dim: int
    drift: tuple  # of Expr, one per component
    diffusion: Diffusion
    constants: ModelConstants

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError("dim must be >= 1", "/dim")
        if len(self.drift) != self.dim:
            raise ConfigError(f"drift needs {self.dim} components, got {len(self.drift)}",
                              "/drift")
        want = 1 if self.diffusion.kind == "scalar" else self.dim
        if len(self.diffusion.exprs) != want:
            raise ConfigError(
                f"diffusion kind {self.diffusion.kind!r} needs {want} exprs, "
                f"got {len(self.diffusion.exprs)}", "/diffusion/exprs")

    # Structural flags -----------------------------------------------------

    @property
    def sigma_space_free(self) -> bool:
        return not any(e.uses_space() for e in self.diffusion.exprs)

    @property
    def sigma_measure_free(self) -> bool:
        return not any(e.uses_measure() for e in self.diffusion.exprs)

    @property
    def drift_measure_free(self) -> bool:
        return not any(e.uses_measure() for e in self.drift)

    @property
    def sigma_wk_lipschitz(self) -> bool:
        """Every diffusion functional has a finite state-Lipschitz bound,
        so its measure sensitivity is controlled by W_1 <= W_k alone."""
        return all(
            math.isfinite(i.arg.lipschitz())
            for e in self.diffusion.exprs
            for i in e.integrals()
        )

    # Serialization ---------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "drift": [e.to_json() for e in self.drift],
            "diffusion": self.diffusion.to_json(),
            "constants": self.constants.to_json(),
        }

    @classmethod
    def from_json(cls, spec: dict) -> "Model":
        for key in ("dim", "drift", "diffusion", "constants"):
            if key not in spec:
                raise ConfigError(f"missing required field {key!r}", "/" + key)
        consts = spec["constants"]
        for key in ("K", "k", "eta", "beta", "b_sup", "grad_sigma_bound"):
            if key not in consts:
                raise ConfigError(f"missing constant {key!r}", "/constants/" + key)
        drift = tuple(
            expr_from_json(node, f"/drift/{i}") for i, node in enumerate(spec["drift"])
        )
        diff_spec = spec["diffusion"]
        exprs = tuple(
            expr_from_json(node, f"/diffusion/exprs/{i}")
            for i, node in enumerate(diff_spec.get("exprs", []))
        )
        return cls(
            name=str(spec.get("name", "model")),
            dim=int(spec["dim"]),
            drift=drift,
            diffusion=Diffusion(diff_spec.get("kind", "scalar"), exprs),
            constants=ModelConstants(**{k: float(consts[k]) for k in
                                        ("K", "k", "eta", "beta", "b_sup", "grad_sigma_bound")}),
        )


def load_model(path) -> Model:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model file is not valid JSON: {exc}") from exc
    return Model.from_json(spec)


# ---------------------------------------------------------------------------
# Evaluation


def drift_batch(model: Model, t: float, points: np.ndarray, m: Measure) -> np.ndarray:
    """Drift at every row of ``points``; returns (n, d).  Checks |b| <= b_sup."""
    points = np.asarray(points, dtype=float)
    cols = [e.evaluate(t, points, m) for e in model.drift]
    b = np.stack(cols, axis=1)
    if not np.all(np.isfinite(b)):
        raise NumericsError("drift evaluation produced non-finite values")
    norms = np.linalg.norm(b, axis=1)
    worst = float(norms.max())
    if worst > model.constants.b_sup + _BSUP_SLACK:
        i = int(norms.argmax())
        raise AuditError(
            f"|b|={worst:.6g} exceeds declared b_sup={model.constants.b_sup} "
            f"at t={t}, x={points[i]}"
        )
    return b


def sigma_batch(model: Model, t: float, points: np.ndarray, m: Measure) -> np.ndarray:
    """Diffusion factors at every row of ``points``.

    Returns shape (n,) for a scalar diffusion and (n, d) for a diagonal one.
    Raises :class:`AuditError` when the spectrum of sigma sigma* leaves
    [1/K, K].
    """
    points = np.asarray(points, dtype=float)
    K = model.constants.K
    vals = np.stack(
        [e.evaluate(t, points, m) for e in model.diffusion.exprs], axis=1
    )
    if not np.all(np.isfinite(vals)):
        raise NumericsError("diffusion evaluation produced non-finite values")
    sq = vals**2
    lo, hi = float(sq.min()), float(sq.max())
    if lo < 1.0 / K - _SPECTRUM_SLACK or hi > K + _SPECTRUM_SLACK:
        raise AuditError(
            f"spectrum of sigma*sigma^T in [{lo:.6g}, {hi:.6g}] leaves "
            f"[1/K, K] = [{1.0 / K:.6g}, {K:.6g}] at t={t}"
        )
    return vals[:, 0] if model.diffusion.kind == "scalar" else vals


def eval_drift(model: Model, t: float, x, m: Measure) -> np.ndarray:
    """b_t(x, m) as a length-d vector."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return drift_batch(model, t, x, m)[0]


def eval_sigma(model: Model, t: float, x, m: Measure) -> np.ndarray:
    """sigma_t(x, m) as a d x d matrix (scalar and diagonal specs embed into d x d)."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    s = sigma_batch(model, t, x, m)
    if model.diffusion.kind == "scalar":
        return float(s[0]) * np.eye(model.dim)
    return np.diag(s[0])


def diffusion_matrix_batch(model: Model, t: float, points: np.ndarray, m: Measure) -> np.ndarray:
    """sigma sigma* diagonal entries at every row; returns (n, d)."""
    s = sigma_batch(model, t, points, m)
    if model.diffusion.kind == "scalar":
        return np.repeat(s[:, None] ** 2, model.dim, axis=1)
    return s**2


# ---------------------------------------------------------------------------
# Audit


@dataclass(frozen=True)
class AuditReport:
    model: str
    n_samples: int
    seed: int
    ratios: dict          # max observed ratio per inequality
    ellipticity: tuple    # (min, max) eigenvalue of sigma sigma* over samples
    b_max: float
    declared_K: float
    flags: dict
    condition_i: bool
    condition_ii: bool
    passed: bool
    witness: dict | None = None

    def to_json(self) -> dict:
        return {
            "model": self.model,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "ratios": self.ratios,
            "ellipticity": list(self.ellipticity),
            "b_max": self.b_max,
            "declared_K": self.declared_K,
            "flags": self.flags,
            "condition_i": self.condition_i,
            "condition_ii": self.condition_ii,
            "passed": self.passed,
            "witness": self.witness,
        }


def _random_measure(rng, dim: int, n_atoms: int = 8) -> Measure:
    pts = rng.uniform(-3.0, 3.0, size=(n_atoms, dim))
    w = rng.uniform(0.2, 1.0, size=n_atoms)
    return Measure.from_points(pts, w)


def lipschitz_audit(model: Model, n_samples: int = 1000, seed: int = 0,
                    horizon: float = 1.0, raise_on_failure: bool = True) -> AuditReport:
    """Sampled audit of the declared constants.

    Draws (t, x, y, mu1, mu2) with x, y ~ N(0, 4I) and mu1, mu2 random
    8-atom measures supported in [-3, 3]^d, then estimates the worst ratio
    of each structural inequality against its declared right-hand side:

    * ``a1_space``:   |sigma(x,mu) - sigma(y,mu)| / |x-y|^beta
    * ``a1_measure``: |sigma(x,mu1) - sigma(x,mu2)| / (W_eta + W_k)
    * ``a2``:         |b(x,mu1) - b(x,mu2)| / (||mu1-mu2||_{k,var} + W_k)
    * ``a3``:         mixed second difference of sigma sigma* over
      |x-y|^beta (W_eta + W_k)

    Ellipticity and the drift bound are checked at every sample.  The audit
    also sets the structural flags deciding which regularity route the model
    supports: ``sigma_space_free`` (diffusion blind to the state variable)
    and ``sigma_wk_lipschitz`` (all diffusion functionals state-Lipschitz,
    hence W_k-controlled).
    """
    if n_samples < 1:
        raise DomainError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    c = model.constants
    ratios = {"a1_space": 0.0, "a1_measure": 0.0, "a2": 0.0, "a3": 0.0}
    witnesses = {}
    eig_lo, eig_hi = math.inf, -math.inf
    b_max = 0.0

    def _sigma_vec(t, x, mu):
        return np.atleast_1d(sigma_batch(model, t, x.reshape(1, -1), mu)[0])

    eval_failure = None
    for i in range(n_samples):
        t = rng.uniform(0.0, horizon)
        x = rng.normal(scale=2.0, size=model.dim)
        y = rng.normal(scale=2.0, size=model.dim)
        mu1 = _random_measure(rng, model.dim)
        mu2 = _random_measure(rng, model.dim)

        w_eta = metrics.wasserstein_eta(mu1, mu2, c.eta).value
        w_k = metrics.wasserstein(mu1, mu2, c.k).value
        kvar = metrics.weighted_variation_atoms(mu1, mu2, c.k).value

        try:
            s_x1 = _sigma_vec(t, x, mu1)
            s_y1 = _sigma_vec(t, y, mu1)
            s_x2 = _sigma_vec(t, x, mu2)
            s_y2 = _sigma_vec(t, y, mu2)
            b_x1 = drift_batch(model, t, x.reshape(1, -1), mu1)[0]
            b_x2 = drift_batch(model, t, x.reshape(1, -1), mu2)[0]
        except AuditError as exc:
            # A declared-constant violation at a sample point is itself an
            # audit failure, with the offending sample as witness.
            eval_failure = {"sample": i, "t": t, "x": x.tolist(), "error": str(exc)}
            break

        sq = np.concatenate([s_x1**2, s_y1**2, s_x2**2, s_y2**2])
        eig_lo = min(eig_lo, float(sq.min()))
        eig_hi = max(eig_hi, float(sq.max()))
        b_max = max(b_max, float(np.linalg.norm(b_x1)), float(np.linalg.norm(b_x2)))

        dx = float(np.linalg.norm(x - y))
        checks = []
        if dx > 1e-9:
            checks.append(("a1_space", float(np.max(np.abs(s_x1 - s_y1))), dx**c.beta))
        if w_eta + w_k > 1e-9:
            checks.append(("a1_measure", float(np.max(np.abs(s_x1 - s_x2))), w_eta + w_k))
            if dx > 1e-9:
                mixed = np.max(np.abs((s_x1**2 - s_y1**2) - (s_x2**2 - s_y2**2)))
                checks.append(("a3", float(mixed), dx**c.beta * (w_eta + w_k)))
        if kvar + w_k > 1e-9:
            checks.append(("a2", float(np.linalg.norm(b_x1 - b_x2)), kvar + w_k))
        for name, num, den in checks:
            r = num / den
            if r > ratios[name]:
                ratios[name] = r
                witnesses[name] = {
                    "sample": i, "t": t, "x": x.tolist(), "y": y.tolist(), "ratio": r,
                }

    flags = {
        "sigma_space_free": model.sigma_space_free,
        "sigma_measure_free": model.sigma_measure_free,
        "drift_measure_free": model.drift_measure_free,
        "sigma_wk_lipschitz": model.sigma_wk_lipschitz,
    }
    failures = []
    if eval_failure is not None:
        failures.append(("evaluation", eval_failure))
    if max(ratios.values()) > c.K:
        worst = max(ratios, key=ratios.get)
        failures.append((worst, witnesses.get(worst)))
    if eig_lo < 1.0 / c.K - _SPECTRUM_SLACK or eig_hi > c.K + _SPECTRUM_SLACK:
        failures.append(("ellipticity", {"eig_lo": eig_lo, "eig_hi": eig_hi}))
    if b_max > c.b_sup + _BSUP_SLACK:
        failures.append(("b_sup", {"b_max": b_max}))

    report = AuditReport(
        model=model.name,
        n_samples=n_samples,
        seed=seed,
        ratios=ratios,
        ellipticity=(eig_lo, eig_hi),
        b_max=b_max,
        declared_K=c.K,
        flags=flags,
        condition_i=model.sigma_wk_lipschitz,
        condition_ii=model.sigma_space_free,
        passed=not failures,
        witness=None if not failures else {failures[0][0]: failures[0][1]},
    )
    if failures and raise_on_failure:
        raise AuditError(f"model {model.name!r} failed audit: {report.witness}")
    return report
