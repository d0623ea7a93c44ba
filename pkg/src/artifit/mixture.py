"""Gaussian mixture with a uniform outlier component.

The cloud points are modelled as draws from isotropic Gaussians centred on
the posed template vertices (equal weights 1/M), mixed with a uniform
outlier density of weight ``mu``.  This module holds the E-step
(responsibilities), the negative log-likelihood, and the closed-form
variance update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .cloud import as_points, sqdist
from .errors import DegeneratePosterior, EmptyCloud, EmptyModel

SIGMA2_FLOOR = 1e-8
C_CONVENTIONS = ("cpd", "inverted")


@dataclass(frozen=True)
class MixtureConfig:
    """``mu`` is the outlier weight.  ``c_convention`` picks the outlier
    constant: ``"cpd"`` uses mu / (1 - mu), ``"inverted"``
    uses (1 - mu) / mu and is kept only for comparison runs."""

    mu: float = 0.0
    c_convention: str = "cpd"

    def __post_init__(self):
        if not 0.0 <= self.mu < 1.0:
            raise ValueError(f"mu must lie in [0, 1), got {self.mu}")
        if self.c_convention not in C_CONVENTIONS:
            raise ValueError(f"c_convention must be one of {C_CONVENTIONS}")


@dataclass(frozen=True)
class MixtureState:
    sigma2: float
    sigma2_itr: float
    iteration: int = 0

    def __post_init__(self):
        if not self.sigma2 >= SIGMA2_FLOOR:
            raise ValueError(f"sigma2 {self.sigma2!r} is below the floor {SIGMA2_FLOOR}")
        if not self.sigma2_itr >= SIGMA2_FLOOR:
            raise ValueError(f"sigma2_itr {self.sigma2_itr!r} is below the floor {SIGMA2_FLOOR}")


@dataclass(frozen=True, eq=False)
class PosteriorMatrix:
    """Soft correspondences ``resp[n, m] = p(m | v_n)``.

    ``outlier_mass[n]`` is whatever probability row n leaves to the
    uniform component and ``n_p`` is the total responsibility mass.
    """

    resp: np.ndarray
    outlier_mass: np.ndarray
    n_p: float

    @classmethod
    def from_resp(cls, resp) -> "PosteriorMatrix":
        resp = np.asarray(resp, dtype=np.float64)
        outlier = 1.0 - resp.sum(axis=1)
        return cls(resp, outlier, float(resp.sum()))

    @classmethod
    def one_hot(cls, index, n_model: int) -> "PosteriorMatrix":
        """Hard assignment of cloud point n to model vertex ``index[n]``."""
        index = np.asarray(index)
        resp = np.zeros((index.shape[0], n_model))
        resp[np.arange(index.shape[0]), index] = 1.0
        return cls.from_resp(resp)

    @property
    def shape(self):
        return self.resp.shape


def _check_inputs(cloud, verts):
    pts = as_points(cloud)
    verts = as_points(verts)
    if pts.shape[0] == 0:
        raise EmptyCloud("cloud has no points")
    if verts.shape[0] == 0:
        raise EmptyModel("model has no vertices")
    return pts, verts


def outlier_constant(cfg: MixtureConfig, sigma2: float, n_model: int, n_cloud: int) -> float:
    """Constant added to the posterior denominator for the uniform term."""
    mu = cfg.mu
    if cfg.c_convention == "cpd":
        if mu == 0.0:
            return 0.0
        ratio = mu / (1.0 - mu)
    else:
        if mu == 0.0:
            return np.inf
        ratio = (1.0 - mu) / mu
    return (2.0 * np.pi * sigma2) ** 1.5 * ratio * n_model / n_cloud


def posterior_from_sqdist(d2, cfg: MixtureConfig, sigma2_itr: float) -> PosteriorMatrix:
    d2 = np.ascontiguousarray(d2, dtype=np.float64)
    n_cloud, n_model = d2.shape
    c = outlier_constant(cfg, sigma2_itr, n_model, n_cloud)
    log_c = np.log(c) if c > 0 else -np.inf
    resp = np.empty_like(d2)
    rowsum = np.empty(n_cloud)
    _kernels.posterior_into(d2, 1.0 / (2.0 * sigma2_itr), log_c, resp, rowsum)
    # with no outlier term the rows are complete by construction
    outlier = 1.0 - rowsum if c > 0 else np.zeros(n_cloud)
    return PosteriorMatrix(resp, outlier, float(rowsum.sum()))


def posterior(cloud, verts, cfg: MixtureConfig, state: MixtureState) -> PosteriorMatrix:
    """E-step: responsibilities of every model vertex for every cloud point.

    Uses the annealed bandwidth ``state.sigma2_itr``; evaluated in the log
    domain so tiny bandwidths do not underflow the normaliser.
    """
    pts, verts = _check_inputs(cloud, verts)
    return posterior_from_sqdist(sqdist(pts, verts), cfg, state.sigma2_itr)


def energy_from_sqdist(d2, mu: float, sigma2: float) -> float:
    d2 = np.ascontiguousarray(d2, dtype=np.float64)
    n_cloud, n_model = d2.shape
    lse = np.empty(n_cloud)
    _kernels.row_logsumexp(d2, 1.0 / (2.0 * sigma2), lse)
    log_inlier = (np.log1p(-mu) - np.log(n_model) - 1.5 * np.log(2.0 * np.pi * sigma2) + lse)
    if mu > 0.0:
        log_p = np.logaddexp(log_inlier, np.log(mu) - np.log(n_cloud))
    else:
        log_p = log_inlier
    return float(-log_p.sum())


def energy(cloud, verts, cfg: MixtureConfig, state: MixtureState) -> float:
    """Negative log-likelihood of the cloud under the mixture at ``state.sigma2``."""
    pts, verts = _check_inputs(cloud, verts)
    return energy_from_sqdist(sqdist(pts, verts), cfg.mu, state.sigma2)


def weighted_sqdist_sum(resp, d2) -> float:
    """``sum(resp * d2)`` without the temporary, summed in row order."""
    rows = np.empty(resp.shape[0])
    _kernels.row_weighted_sum(np.ascontiguousarray(resp, dtype=np.float64),
                              np.ascontiguousarray(d2, dtype=np.float64), rows)
    return float(rows.sum())


def sigma2_from_sqdist(d2, post: PosteriorMatrix) -> float:
    if not post.n_p > 1e-12:
        raise DegeneratePosterior(f"total posterior mass {post.n_p:g} is too small")
    s2 = weighted_sqdist_sum(post.resp, d2) / (3.0 * post.n_p)
    return max(s2, SIGMA2_FLOOR)


def update_sigma2(cloud, verts, post: PosteriorMatrix) -> float:
    """Closed-form variance: responsibility-weighted mean squared residual
    per dimension, clamped to ``SIGMA2_FLOOR``."""
    pts, verts = _check_inputs(cloud, verts)
    return sigma2_from_sqdist(sqdist(pts, verts), post)
