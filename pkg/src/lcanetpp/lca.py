"""Convolutional sparse coding with the Locally Competitive Algorithm.

A layer holds a bank of unit-norm convolutional features ``phi``. Encoding
runs the leaky-integrator membrane dynamics

    M <- M + (1/gamma) * (D - M - (C*S - C)),    C = soft_threshold(M, lam)

where ``D = conv(x, phi)`` is the input drive and ``C*S - C`` is the lateral
inhibition every active neuron exerts on the others through feature overlap.
The fixed points minimize ``0.5*||x - convT(C, phi)||^2 + lam*||C||_1``.

The inhibition is computed as ``conv(convT(C, phi), phi) - C``; the Gram
tensor of feature overlaps is only built on request (:meth:`LateralSimilarity.gram`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import numerics as nx
from .errors import NumericError, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LcaConfig:
    lam: float = 1.0
    gamma: float = 50.0
    n_iter: int = 50
    nonneg: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.gamma <= 1:
            raise ValueError(f"gamma must be > 1, got {self.gamma}")
        if self.n_iter < 1:
            raise ValueError(f"n_iter must be >= 1, got {self.n_iter}")


@dataclass
class Dictionary:
    """Feature bank K x Cin x kh x kw applied with the given stride and zero padding."""

    phi: np.ndarray
    stride: int = 1
    pad: int = 0

    @property
    def n_features(self) -> int:
        return self.phi.shape[0]

    def norms(self) -> np.ndarray:
        return np.sqrt((self.phi.astype(np.float64) ** 2).reshape(self.n_features, -1).sum(axis=1))

    @classmethod
    def random(cls, n_features: int, in_channels: int, kernel: int, rng: np.random.Generator,
               stride: int = 1, pad: Optional[int] = None, dtype=nx.DTYPE) -> "Dictionary":
        phi = rng.standard_normal((n_features, in_channels, kernel, kernel))
        return cls(normalize_features(phi).astype(dtype), stride,
                   kernel // 2 if pad is None else pad)


@dataclass
class LcaState:
    membrane: np.ndarray
    code: np.ndarray


def normalize_features(phi: np.ndarray) -> np.ndarray:
    flat = phi.reshape(phi.shape[0], -1)
    norms = np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
    return (flat / norms[:, None]).reshape(phi.shape).astype(phi.dtype)


def input_drive(x, d: Dictionary) -> np.ndarray:
    """Feed-forward excitation: correlation of the input with every feature."""
    return nx.conv2d(np.asarray(x), d.phi, d.stride, d.pad)


def soft_threshold(m: np.ndarray, lam: float, nonneg: bool = True) -> np.ndarray:
    return nx.soft_threshold(m, lam, nonneg).value


class LateralSimilarity:
    """Competition operator ``S = phi (*) phi`` of one dictionary.

    Calling it on a code returns ``C*S``: for every neuron, the overlap-weighted
    activity of all neurons including itself. :meth:`inhibition` removes the
    self term, which is 1 at zero offset for unit-norm features.
    """

    def __init__(self, d: Dictionary, input_hw: tuple[int, int]):
        self.dictionary = d
        self.input_hw = tuple(input_hw)

    def __call__(self, code: np.ndarray) -> np.ndarray:
        d = self.dictionary
        recon = nx.conv2d_transpose(code, d.phi, d.stride, d.pad, self.input_hw)
        return nx.conv2d(recon, d.phi, d.stride, d.pad)

    def inhibition(self, code: np.ndarray) -> np.ndarray:
        return self(code) - code

    def gram(self) -> np.ndarray:
        """Explicit overlaps K x K x (2kh-1) x (2kw-1) between every pair of
        features at every relative offset."""
        phi = self.dictionary.phi
        kh, kw = phi.shape[2:]
        padded = np.pad(phi, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        return nx.conv2d(padded, phi, 1, 0)


def lateral_similarity(d: Dictionary, input_hw: tuple[int, int]) -> LateralSimilarity:
    return LateralSimilarity(d, input_hw)


def lca_step(state: LcaState, drive: np.ndarray, d: Dictionary, config: LcaConfig,
             input_hw: tuple[int, int], iteration: int = 0) -> LcaState:
    """One Euler step of the membrane dynamics followed by the soft threshold."""
    if state.membrane.shape != drive.shape:
        raise ShapeError(f"membrane {state.membrane.shape} does not match drive {drive.shape}")
    inhib = LateralSimilarity(d, input_hw).inhibition(state.code)
    dt = drive.dtype.type(1.0 / config.gamma)
    membrane = state.membrane + dt * (drive - state.membrane - inhib)
    if not np.all(np.isfinite(membrane)):
        raise NumericError(f"LCA membrane became non-finite at iteration {iteration}")
    return LcaState(membrane, soft_threshold(membrane, config.lam, config.nonneg))


def lca_encode(x, d: Dictionary, config: LcaConfig) -> nx.Var:
    """Sparse code of ``x`` after ``config.n_iter`` LCA steps from M = 0.

    ``x`` may be a :class:`~lcanetpp.numerics.Var` on a tape; every step is
    then recorded so the gradient flows back through the whole unrolled
    trajectory. The dictionary is always treated as a constant.
    """
    code, _ = lca_encode_with_state(x, d, config)
    return code


def lca_encode_with_state(x, d: Dictionary, config: LcaConfig) -> tuple[nx.Var, nx.Var]:
    x = nx.as_var(x)
    if x.value.ndim != 4 or x.shape[1] != d.phi.shape[1]:
        raise ShapeError(f"input {x.shape} does not match dictionary {d.phi.shape}")
    phi = d.phi.astype(x.value.dtype, copy=False)
    hw = x.shape[2:]
    drive = nx.conv(x, phi, d.stride, d.pad)
    rate = 1.0 / config.gamma
    membrane = nx.scale(drive, rate)  # first step from M = 0, C = 0
    code = nx.soft_threshold(membrane, config.lam, config.nonneg)
    for it in range(1, config.n_iter):
        recon = nx.conv_transpose(code, phi, d.stride, d.pad, hw)
        inhib = nx.sub(nx.conv(recon, phi, d.stride, d.pad), code)
        membrane = nx.add(membrane, nx.scale(nx.sub(nx.sub(drive, membrane), inhib), rate))
        if not np.all(np.isfinite(membrane.value)):
            raise NumericError(f"LCA membrane became non-finite at iteration {it}")
        code = nx.soft_threshold(membrane, config.lam, config.nonneg)
    return code, membrane


def reconstruct(code: np.ndarray, d: Dictionary, input_hw: tuple[int, int]) -> np.ndarray:
    return nx.conv2d_transpose(code, d.phi.astype(code.dtype, copy=False), d.stride, d.pad, input_hw)


def reconstruction_loss(x: np.ndarray, code: np.ndarray, d: Dictionary, lam: float) -> float:
    """``0.5*||x - convT(code, phi)||^2 + lam*||code||_1`` summed over the batch."""
    resid = x - reconstruct(code, d, x.shape[2:])
    return float(0.5 * np.sum(resid.astype(np.float64) ** 2)
                 + lam * np.sum(np.abs(code.astype(np.float64))))


def dictionary_gradient(d: Dictionary, x: np.ndarray, code: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. phi of the batch-mean reconstruction error
    ``0.5/B * sum_b ||x_b - convT(C_b, phi)||^2`` with the code held fixed."""
    resid = x - reconstruct(code, d, x.shape[2:])
    # d/dphi <resid, convT(C, phi)> = kernel_grad(resid, C)
    g = nx.conv2d_kernel_grad(resid, code, d.phi.shape, d.stride, d.pad)
    return -g / x.shape[0]


def dict_update(d: Dictionary, x: np.ndarray, code: np.ndarray, lr_dict: float,
                rng: Optional[np.random.Generator] = None) -> Dictionary:
    """One SGD step on the reconstruction error, then per-feature renormalization.

    A feature whose norm collapses to zero is redrawn from a Gaussian.
    """
    phi = d.phi
    if lr_dict != 0:
        grad = dictionary_gradient(d, x.astype(phi.dtype, copy=False),
                                   code.astype(phi.dtype, copy=False))
        phi = phi - phi.dtype.type(lr_dict) * grad
    flat = phi.reshape(phi.shape[0], -1).astype(np.float64)
    norms = np.sqrt((flat ** 2).sum(axis=1))
    dead = norms < 1e-12
    if dead.any():
        rng = rng if rng is not None else np.random.default_rng()
        for k in np.flatnonzero(dead):
            log.warning("dictionary feature %d collapsed to zero norm; reinitializing", k)
            flat[k] = rng.standard_normal(flat.shape[1])
            norms[k] = np.sqrt((flat[k] ** 2).sum())
    phi = (flat / norms[:, None]).reshape(phi.shape).astype(d.phi.dtype)
    return replace(d, phi=phi)
