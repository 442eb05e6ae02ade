"""Likelihood models for qubit characterization experiments.

Seven binary-outcome models are supported, each mapping a parameter
vector and experimental controls to an outcome probability:

- ``precession``:    P(1 | omega; t) = sin^2(omega t)
- ``multi-cosine``:  P(1 | w; t) = (1/dim) sum_d cos^2(w_d t / 2)
- ``t1-decay``:      P(1 | T1; t) = exp(-t / T1)
- ``hahn-echo-t2``:  P(1 | T2; t) = 1/2 + exp(-t / T2) / 2
- ``hahn-echo-ab``:  P(1 | T2; t) = A exp(-t / T2) + B, with calibrated A, B
- ``ramsey-decay``:  P(1 | delta, gamma; t) = exp(-gamma t) cos^2(delta t / 2)
                     + (1 - exp(-gamma t)) / 2, gamma = 1 / T2*
- ``ipe``:           P(0 | phi; m, x) = cos^2((m phi + x) / 2), controls are the
                     repetition count m and the rotation angle x

All operations are pure; outcome simulation takes an explicit RNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations

import numpy as np

from . import _backend
from ._backend import LOG_FLOOR
from .errors import ControlError, DomainError, GradientSingularityError

_KIND_CODES = {
    "precession": _backend.KIND_PRECESSION,
    "multi-cosine": _backend.KIND_MULTI_COS,
    "t1-decay": _backend.KIND_T1,
    "hahn-echo-t2": _backend.KIND_HAHN_T2,
    "hahn-echo-ab": _backend.KIND_HAHN_AB,
    "ramsey-decay": _backend.KIND_RAMSEY,
    "ipe": _backend.KIND_IPE,
}

_FIXED_DIM = {
    "precession": 1,
    "t1-decay": 1,
    "hahn-echo-t2": 1,
    "hahn-echo-ab": 1,
    "ramsey-decay": 2,
    "ipe": 1,
}


@dataclass(frozen=True)
class Controls:
    """Experimental controls for one shot.

    ``t`` is the evolution time (any time-controlled model); ``m`` and
    ``theta_ctl`` are the repetition count and rotation angle of the
    phase-estimation circuit and are ignored by the other models.
    """

    t: float = 0.0
    m: int = 1
    theta_ctl: float = 0.0

    def __post_init__(self):
        if self.t < 0:
            raise ControlError(f"negative evolution time {self.t}")
        if self.m < 1:
            raise ControlError(f"repetition count must be >= 1, got {self.m}")
        if not 0.0 <= self.theta_ctl < 2.0 * np.pi:
            raise ControlError(f"rotation angle {self.theta_ctl} outside [0, 2pi)")


@dataclass(frozen=True)
class Datum:
    """One measurement outcome together with the controls that produced it."""

    controls: Controls
    outcome: int

    def __post_init__(self):
        if self.outcome not in (0, 1):
            raise ControlError(f"outcome must be binary, got {self.outcome}")


@dataclass(frozen=True)
class ModelSpec:
    """A model kind plus its domain box and fixed hyperparameters."""

    kind: str
    dim: int
    lower: np.ndarray
    upper: np.ndarray
    hyper: tuple = ()

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown model kind {self.kind!r}")
        expect = _FIXED_DIM.get(self.kind)
        if expect is not None and self.dim != expect:
            raise ValueError(f"{self.kind} is {expect}-dimensional, got dim={self.dim}")
        lo = np.asarray(self.lower, dtype=np.float64).reshape(self.dim)
        hi = np.asarray(self.upper, dtype=np.float64).reshape(self.dim)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if not np.all(hi > lo):
            raise ValueError("domain box must have strictly positive volume")
        if self.kind == "hahn-echo-ab":
            if len(self.hyper) != 2:
                raise ValueError("hahn-echo-ab needs hyperparameters (A, B)")
        object.__setattr__(self, "hyper", tuple(float(h) for h in self.hyper))

    @property
    def code(self) -> int:
        return _KIND_CODES[self.kind]

    @property
    def hyper_arr(self) -> np.ndarray:
        return np.asarray(self.hyper, dtype=np.float64)

    @property
    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def contains(self, theta) -> np.ndarray:
        """Boolean inclusion test; broadcasts over leading axes of theta."""
        theta = np.asarray(theta, dtype=np.float64)
        return np.all((theta >= self.lower) & (theta <= self.upper), axis=-1)


def precession(omega_max=1.0, omega_min=0.0):
    return ModelSpec("precession", 1, [omega_min], [omega_max])


def multi_cosine(dim, lower=None, upper=None):
    lo = np.zeros(dim) if lower is None else lower
    hi = np.ones(dim) if upper is None else upper
    return ModelSpec("multi-cosine", dim, lo, hi)


def t1_decay(t1_max=100.0, t1_min=1e-3):
    return ModelSpec("t1-decay", 1, [t1_min], [t1_max])


def hahn_echo(t2_max=250.0, t2_min=1e-3):
    return ModelSpec("hahn-echo-t2", 1, [t2_min], [t2_max])


def hahn_echo_ab(a, b, t2_max=250.0, t2_min=1e-3):
    return ModelSpec("hahn-echo-ab", 1, [t2_min], [t2_max], hyper=(a, b))


def ramsey_decay(delta_max=5.0, gamma_max=1.0, delta_min=0.0, gamma_min=0.0):
    return ModelSpec("ramsey-decay", 2, [delta_min, gamma_min], [delta_max, gamma_max])


def ipe_phase():
    return ModelSpec("ipe", 1, [0.0], [2.0 * np.pi])


def _controls_arrays(spec: ModelSpec, d: Datum):
    c = d.controls
    if spec.kind == "ipe":
        return np.array([float(c.m)]), np.array([c.theta_ctl])
    return np.array([c.t]), np.array([0.0])


def _check_point(spec: ModelSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.shape[0] != spec.dim:
        raise DomainError(f"expected {spec.dim} parameters, got {theta.shape[0]}")
    if not spec.contains(theta):
        raise DomainError(f"parameter point {theta} outside domain box")
    return theta


def likelihood(spec: ModelSpec, theta, d: Datum) -> float:
    """P(outcome | theta; controls), in [0, 1]."""
    theta = _check_point(spec, theta)
    c1, c2 = _controls_arrays(spec, d)
    p1 = float(_backend.prob_one(spec.code, spec.hyper_arr, theta, c1[0], c2[0]))
    return p1 if d.outcome == 1 else 1.0 - p1


def log_likelihood(spec: ModelSpec, theta, d: Datum) -> float:
    """log P(outcome | theta; controls), clamped at ``LOG_FLOOR``.

    A return value of exactly ``LOG_FLOOR`` flags a zero-probability
    outcome (see :func:`is_clamped`); Metropolis callers then see a
    ratio of zero, while gradient-based callers can detect the cliff.
    """
    p = likelihood(spec, theta, d)
    return float(np.log(p)) if p > 0.0 else LOG_FLOOR


def is_clamped(log_l: float) -> bool:
    """True when a log-likelihood value hit the zero-probability clamp."""
    return log_l <= LOG_FLOOR


def grad_log_likelihood(spec: ModelSpec, theta, d: Datum) -> np.ndarray:
    """Analytic gradient of ``log_likelihood`` with respect to theta."""
    theta = _check_point(spec, theta)
    p = likelihood(spec, theta, d)
    if p < 1e-13:
        raise GradientSingularityError(
            f"gradient at a zero of the likelihood (P={p:.3e})"
        )
    c1, c2 = _controls_arrays(spec, d)
    g = _backend.grad_loglike_terms(
        spec.code, spec.hyper_arr, theta, c1, c2, np.array([d.outcome])
    )
    return g[0]


def simulate_outcome(spec: ModelSpec, theta_true, c: Controls, rng) -> Datum:
    """Draw one Bernoulli outcome from the model at the true parameters."""
    theta = _check_point(spec, theta_true)
    d1 = Datum(c, 1)
    p1 = likelihood(spec, theta, d1)
    return Datum(c, int(rng.random() < p1))


def mode_set(spec: ModelSpec, theta_true) -> list[np.ndarray]:
    """All coordinate permutations of the true parameter vector.

    These are the exact posterior modes of the multi-cosine model, whose
    likelihood is symmetric under permuting the frequencies.  Duplicate
    coordinates collapse to fewer distinct points.
    """
    if spec.kind != "multi-cosine":
        raise ValueError("mode_set is defined for the multi-cosine model")
    theta = _check_point(spec, theta_true)
    seen = set()
    out = []
    for perm in permutations(theta):
        if perm not in seen:
            seen.add(perm)
            out.append(np.array(perm))
    return out


def estimate_ab(freq_t0: float, freq_tinf: float) -> tuple[float, float]:
    """Hyperparameters (A, B) from empirical outcome-1 frequencies.

    ``freq_t0`` is measured at t = 0 (where P(1) = A + B) and
    ``freq_tinf`` at t >> T2 (where P(1) = B).
    """
    b = float(freq_tinf)
    a = float(freq_t0) - b
    if a <= 0:
        raise ValueError("calibration gave a non-positive decay amplitude")
    return a, b


@dataclass
class Dataset:
    """Column-oriented measurement record.

    One row per shot; repeated controls are stored as repeated rows.
    The ``m``/``theta_ctl`` columns are NaN-free only for phase
    estimation data and are written as empty CSV fields otherwise.
    """

    t: np.ndarray = field(default_factory=lambda: np.empty(0))
    m: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    theta_ctl: np.ndarray = field(default_factory=lambda: np.empty(0))
    outcomes: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __post_init__(self):
        self.t = np.ascontiguousarray(self.t, dtype=np.float64)
        self.m = np.ascontiguousarray(self.m, dtype=np.int64)
        self.theta_ctl = np.ascontiguousarray(self.theta_ctl, dtype=np.float64)
        self.outcomes = np.ascontiguousarray(self.outcomes, dtype=np.int64)
        n = len(self.outcomes)
        if not (len(self.t) == len(self.m) == len(self.theta_ctl) == n):
            raise ValueError("dataset columns must have equal length")

    def __len__(self) -> int:
        return len(self.outcomes)

    def __getitem__(self, i) -> Datum:
        c = Controls(t=float(self.t[i]), m=int(self.m[i]), theta_ctl=float(self.theta_ctl[i]))
        return Datum(c, int(self.outcomes[i]))

    def controls_arrays(self, spec: ModelSpec):
        """(c1, c2) control columns in the backend's layout."""
        if spec.kind == "ipe":
            return self.m.astype(np.float64), self.theta_ctl
        return self.t, np.zeros_like(self.t)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.t[idx], self.m[idx], self.theta_ctl[idx], self.outcomes[idx])

    @classmethod
    def from_data(cls, data: list[Datum]) -> "Dataset":
        return cls(
            np.array([d.controls.t for d in data]),
            np.array([d.controls.m for d in data], dtype=np.int64),
            np.array([d.controls.theta_ctl for d in data]),
            np.array([d.outcome for d in data], dtype=np.int64),
        )


def simulate_dataset(spec: ModelSpec, theta_true, controls: list[Controls], rng) -> Dataset:
    """Simulate one outcome per control, in order."""
    return Dataset.from_data(
        [simulate_outcome(spec, theta_true, c, rng) for c in controls]
    )
