"""Input perturbations and adversarial attacks on normalized MFCC maps.

White-box attacks (FGSM, PGD) use exact input gradients, which for LCA models
flow through every unrolled membrane update. The black-box evasion attack only
sees a :class:`QueryOracle`: it labels probe inputs through the oracle, fits a
surrogate on those labels and transfers FGSM perturbations crafted on the
surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import models
from .errors import NumericError
from .models import Classifier, ModelParams, ModelSpec, TrainConfig

KINDS = ("fgsm", "pgd", "gaussian", "evasion")


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    epsilon: float
    pgd_steps: int = 10
    pgd_alpha: Optional[float] = None  # defaults to epsilon / 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {KINDS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.pgd_steps < 1:
            raise ValueError("pgd_steps must be >= 1")
        if self.kind == "pgd" and self.alpha <= 0 and self.epsilon > 0:
            raise ValueError("pgd_alpha must be > 0")

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.pgd_alpha is None else self.pgd_alpha


class QueryOracle:
    """Label-only access to a target model, with a query counter.

    Wraps any callable mapping a batch of feature maps to predicted labels.
    """

    def __init__(self, predict_fn: Callable[[np.ndarray], np.ndarray]):
        self._predict_fn = predict_fn
        self.queries = 0

    @classmethod
    def from_classifier(cls, target: Classifier) -> "QueryOracle":
        return cls(lambda x: target.predict(x))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        labels = np.asarray(self._predict_fn(x))
        self.queries += len(x)
        return labels


def _ball(fm: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Lower/upper bounds of the L-inf ball, representable in fm's dtype and
    never more than ``epsilon`` away from ``fm``."""
    ref = fm.astype(np.float64)
    bounds = []
    for sign in (-1.0, 1.0):
        b = (ref + sign * epsilon).astype(fm.dtype)
        # rounding to fm's dtype may overshoot; step back towards fm until inside
        over = np.abs(b.astype(np.float64) - ref) > epsilon
        while over.any():
            b[over] = np.nextafter(b[over], fm[over])
            over = np.abs(b.astype(np.float64) - ref) > epsilon
        bounds.append(b)
    return bounds[0], bounds[1]


def _signed_gradient(model: Classifier, x: np.ndarray, labels) -> np.ndarray:
    g = model.loss_gradient(x, labels)
    if not np.all(np.isfinite(g)):
        bad = np.unique(np.nonzero(~np.isfinite(g))[0])
        raise NumericError(f"non-finite input gradient for samples {bad.tolist()}")
    return np.sign(g).astype(x.dtype)


def gaussian_perturb(fm: np.ndarray, epsilon: float, seed: int = 0) -> np.ndarray:
    """Add i.i.d. Normal(0, epsilon^2) noise from a seeded generator."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    fm = np.asarray(fm)
    if epsilon == 0:
        return fm.copy()
    noise = np.random.default_rng(seed).normal(0.0, epsilon, fm.shape)
    return (fm + noise).astype(fm.dtype)


def fgsm(model: Classifier, fm: np.ndarray, labels, epsilon: float) -> np.ndarray:
    """One signed-gradient step of size epsilon, kept inside the epsilon ball."""
    fm = np.asarray(fm)
    lo, hi = _ball(fm, epsilon)
    step = fm.dtype.type(epsilon) * _signed_gradient(model, fm, labels)
    return np.clip(fm + step, lo, hi)


def pgd(model: Classifier, fm: np.ndarray, labels, epsilon: float, alpha: float, steps: int,
        seed: int = 0, callback: Optional[Callable[[int, np.ndarray], None]] = None) -> np.ndarray:
    """Iterated signed-gradient ascent projected onto the epsilon ball.

    Starts at ``fm`` itself; ``seed`` is accepted for interface symmetry and
    unused because there is no random start.
    """
    fm = np.asarray(fm)
    lo, hi = _ball(fm, epsilon)
    a = fm.dtype.type(alpha)
    x = fm.copy()
    for t in range(steps):
        x = np.clip(x + a * _signed_gradient(model, x, labels), lo, hi)
        if callback is not None:
            callback(t, x)
    return x


@dataclass
class Surrogate:
    params: ModelParams
    spec: ModelSpec
    queries: int
    oracle_labels: np.ndarray

    @property
    def classifier(self) -> Classifier:
        return Classifier(self.params, self.spec)


def train_surrogate(oracle: QueryOracle, probes: np.ndarray, spec: ModelSpec,
                    config: TrainConfig, batch_size: int = 256) -> Surrogate:
    """Label every probe once through the oracle, then train ``spec`` on those labels.

    With ``config.epochs == 0`` the surrogate is left at its random initialization.
    """
    if len(probes) == 0:
        raise ValueError("probe set is empty")
    start = oracle.queries
    labels = np.concatenate([oracle(probes[i:i + batch_size])
                             for i in range(0, len(probes), batch_size)])
    params, _ = models.fit(spec, probes, labels, config)
    return Surrogate(params, spec, oracle.queries - start, labels)


def evasion_attack(surrogate: Classifier, fm: np.ndarray, labels, epsilon: float) -> np.ndarray:
    """FGSM computed on the surrogate; evaluate the result on the target."""
    return fgsm(surrogate, fm, labels, epsilon)


def agreement(oracle: QueryOracle, surrogate: Classifier, x: np.ndarray) -> float:
    return float(np.mean(oracle(x) == surrogate.predict(x)))
