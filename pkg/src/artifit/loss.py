"""Fitting objective: posterior-weighted squared residuals plus pose and
shape priors, and its exact gradient with the posterior held fixed."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cloud import as_points, sqdist
from .errors import DimensionMismatch
from .mixture import PosteriorMatrix
from .model import ModelParams, TemplateModel, forward


def squared_pose_prior(theta):
    """Quadratic deviation from the rest pose, with its gradient."""
    theta = np.asarray(theta)
    return float(np.sum(theta * theta)), 2.0 * theta


@dataclass(frozen=True)
class RegWeights:
    """Prior weights.  ``pose_prior`` maps theta (J, 3) to ``(value, grad)``
    and may be swapped for a learned prior."""

    lambda_theta: float = 20.0
    lambda_a: float = 225.0
    lambda_beta: float = 25.0
    pose_prior: Callable = field(default=squared_pose_prior, compare=False)

    def __post_init__(self):
        for name in ("lambda_theta", "lambda_a", "lambda_beta"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_dict(self):
        return {"lambda_theta": self.lambda_theta, "lambda_a": self.lambda_a,
                "lambda_beta": self.lambda_beta}


@dataclass(frozen=True)
class LossBreakdown:
    l_unsup: float
    l_theta: float
    l_a: float
    l_beta: float
    total: float

    def to_dict(self):
        return {"l_unsup": self.l_unsup, "l_theta": self.l_theta, "l_a": self.l_a,
                "l_beta": self.l_beta, "total": self.total}


def l_unsup(cloud, verts, post: PosteriorMatrix, sigma2: float) -> float:
    """Responsibility-weighted squared residuals divided by 2 sigma^2."""
    pts = as_points(cloud)
    verts = as_points(verts)
    if post.resp.shape != (pts.shape[0], verts.shape[0]):
        raise DimensionMismatch(
            f"posterior is {post.resp.shape}, expected {(pts.shape[0], verts.shape[0])}")
    return float(np.sum(post.resp * sqdist(pts, verts))) / (2.0 * sigma2)


def _hinge_terms(theta, hinges):
    value = 0.0
    grad = np.zeros_like(theta)
    for j, axis, sign in hinges:
        e = np.exp(sign * theta[j, axis])
        value += e
        grad[j, axis] += sign * e
    return value, grad


def l_reg(params: ModelParams, model: TemplateModel, w: RegWeights = RegWeights()):
    """Unweighted prior terms ``(l_theta, l_a, l_beta)``.

    ``l_a`` sums ``exp(sign * theta[joint, axis])`` over the model's hinge
    joints, so bending toward ``sign`` is penalised exponentially.
    """
    l_theta, _ = w.pose_prior(params.theta)
    l_a, _ = _hinge_terms(params.theta, model.hinge_joints)
    l_beta = float(params.beta @ params.beta)
    return float(l_theta), float(l_a), l_beta


def _reg_grad(params, model, w):
    _, g_theta = w.pose_prior(params.theta)
    _, g_a = _hinge_terms(params.theta, model.hinge_joints)
    return (w.lambda_theta * np.asarray(g_theta) + w.lambda_a * g_a,
            w.lambda_beta * 2.0 * params.beta)


def _compose(unsup, reg, w):
    l_theta, l_a, l_beta = reg
    total = unsup + w.lambda_theta * l_theta + w.lambda_a * l_a + w.lambda_beta * l_beta
    return LossBreakdown(unsup, l_theta, l_a, l_beta, total)


def total_loss(cloud, model: TemplateModel, params: ModelParams, post: PosteriorMatrix,
               sigma2: float, w: RegWeights = RegWeights()) -> LossBreakdown:
    verts = forward(model, params).vertices
    return _compose(l_unsup(cloud, verts, post, sigma2), l_reg(params, model, w), w)


def grad_total_loss(cloud, model: TemplateModel, params: ModelParams,
                    post: PosteriorMatrix, sigma2: float,
                    w: RegWeights = RegWeights()) -> ModelParams:
    """Exact gradient of ``total_loss`` over (beta, theta, rot6d, trans),
    with the posterior and sigma^2 treated as constants."""
    return FixedPosteriorObjective(cloud, model, post, sigma2, w).value_and_grad(params)[1]


class FixedPosteriorObjective:
    """``total_loss`` for one E-step, reduced to per-vertex statistics.

    With responsibilities fixed, the weighted residual sum splits into a
    constant scatter term plus ``sum_m c_m |x_m - ybar_m|^2`` where
    ``c_m`` is the column mass and ``ybar_m`` the responsibility-weighted
    mean of the cloud.  Each evaluation then costs O(M) after the skin.
    """

    def __init__(self, cloud, model: TemplateModel, post: PosteriorMatrix,
                 sigma2: float, w: RegWeights = RegWeights()):
        pts = as_points(cloud)
        resp = post.resp
        if resp.shape != (pts.shape[0], model.n_vertices):
            raise DimensionMismatch(
                f"posterior is {resp.shape}, expected {(pts.shape[0], model.n_vertices)}")
        self.model = model
        self.sigma2 = float(sigma2)
        self.weights = w
        # centring keeps the scatter expansion below free of cancellation
        centre = pts.mean(axis=0) if pts.shape[0] else np.zeros(3)
        local = pts - centre
        mass = resp.sum(axis=0)
        weighted = resp.T @ local
        ybar = np.zeros_like(weighted)
        nz = mass > 0
        ybar[nz] = weighted[nz] / mass[nz, None]
        rowsum = resp.sum(axis=1)
        scatter = float(rowsum @ np.sum(local * local, axis=1)
                        - mass @ np.sum(ybar * ybar, axis=1))
        self.mass = mass
        self.target = ybar + centre
        self.scatter = max(scatter, 0.0)

    def _unsup(self, verts):
        r = verts - self.target
        return (self.scatter + float(np.sum(self.mass * np.sum(r * r, axis=1)))) / (2.0 * self.sigma2), r

    def value(self, params: ModelParams) -> LossBreakdown:
        verts = forward(self.model, params).vertices
        unsup, _ = self._unsup(verts)
        return _compose(unsup, l_reg(params, self.model, self.weights), self.weights)

    def value_and_grad(self, params: ModelParams):
        res = forward(self.model, params)
        unsup, r = self._unsup(res.vertices)
        g = res.backward(self.mass[:, None] * r / self.sigma2)
        g_theta, g_beta = _reg_grad(params, self.model, self.weights)
        grad = ModelParams(g.beta + g_beta, g.theta + g_theta, g.rot6d, g.trans)
        return _compose(unsup, l_reg(params, self.model, self.weights), self.weights), grad
