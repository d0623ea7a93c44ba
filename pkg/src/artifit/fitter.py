"""Instance-level EM fitting of the template to a point cloud.

Each EM iteration computes responsibilities at the annealed bandwidth,
runs a fixed number of descent steps on the prior-regularised loss with
those responsibilities frozen, then recomputes responsibilities at the
same bandwidth to refresh sigma^2 for the next loss evaluation.  The
nearest-neighbour baseline runs the identical loop with one-hot
assignments in place of the soft posterior.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .cloud import as_points, sqdist
from .errors import DegenerateRotation, EmptyCloud, NonFiniteEnergy
from .loss import FixedPosteriorObjective, LossBreakdown, RegWeights
from .mixture import (SIGMA2_FLOOR, MixtureConfig, PosteriorMatrix,
                      energy_from_sqdist, posterior_from_sqdist,
                      sigma2_from_sqdist)
from .model import IDENTITY_6D, ModelParams, TemplateModel, forward

log = logging.getLogger(__name__)

M_STEPS = ("gradient_descent_backtracking", "quasi_newton")
SCHEDULES = ("geometric", "fixed")

ARMIJO_C1 = 1e-4
BACKTRACK = 0.5
MAX_BACKTRACKS = 60
LBFGS_MEMORY = 10


@dataclass(frozen=True)
class FitConfig:
    max_em_iters: int = 60
    m_step_iters: int = 20
    m_step: str = "gradient_descent_backtracking"
    sigma2_itr_init: float = 0.1
    anneal_decay: float = 0.95
    schedule: str = "geometric"
    mu: float = 0.0
    c_convention: str = "cpd"
    energy_rtol: float = 1e-6
    floor_patience: int = 3
    seed: int = 0
    weights: RegWeights = field(default_factory=RegWeights)

    def __post_init__(self):
        if self.max_em_iters < 1 or self.m_step_iters < 0:
            raise ValueError("max_em_iters must be >= 1 and m_step_iters >= 0")
        if not 0.0 < self.anneal_decay < 1.0:
            raise ValueError("anneal_decay must lie in (0, 1)")
        if self.m_step not in M_STEPS:
            raise ValueError(f"m_step must be one of {M_STEPS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if not self.sigma2_itr_init > 0:
            raise ValueError("sigma2_itr_init must be positive")
        MixtureConfig(self.mu, self.c_convention)

    @property
    def mixture(self) -> MixtureConfig:
        return MixtureConfig(self.mu, self.c_convention)

    def sigma2_itr(self, k: int) -> float:
        if self.schedule == "fixed":
            return max(SIGMA2_FLOOR, self.sigma2_itr_init)
        return max(SIGMA2_FLOOR, self.sigma2_itr_init * self.anneal_decay ** k)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "weights"}
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        weights = RegWeights(**d.pop("weights", {}))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown fit options: {sorted(unknown)}")
        return cls(weights=weights, **d)


# Settings for recovering a pose from a nearby start: a cooler start to the
# anneal avoids the crumpling the coarse, heavily blurred phase causes on
# thin limbs, and quasi-Newton steps make each EM iteration count.
RECOVERY_CONFIG = FitConfig(m_step="quasi_newton", sigma2_itr_init=1e-2, anneal_decay=0.9)


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    energy: float
    sigma2: float
    sigma2_itr: float
    loss: LossBreakdown
    steps: int

    def to_dict(self):
        return {"iteration": self.iteration, "energy": self.energy, "sigma2": self.sigma2,
                "sigma2_itr": self.sigma2_itr, "steps": self.steps,
                "loss": self.loss.to_dict()}


@dataclass(eq=False)
class FitReport:
    params: ModelParams
    trace: list
    wall_clock: float
    termination: str
    posterior: PosteriorMatrix
    sigma2: float
    # (loss before, loss after) for every accepted M-step line-search step
    descent_steps: list = field(default_factory=list, repr=False)
    param_trajectory: list = field(default_factory=list, repr=False)

    @property
    def descent_violations(self) -> int:
        return sum(1 for before, after in self.descent_steps if after > before)

    @property
    def iterations(self) -> int:
        return len(self.trace)

    def to_dict(self):
        return {"params": self.params.to_dict(),
                "termination": self.termination,
                "iterations": self.iterations,
                "sigma2": self.sigma2,
                "descent_steps": len(self.descent_steps),
                "descent_violations": self.descent_violations,
                "trace": [r.to_dict() for r in self.trace]}


def init_params(cloud, model: TemplateModel) -> ModelParams:
    """Rest pose, identity rotation, translation aligning the centroids."""
    pts = as_points(cloud)
    if pts.shape[0] == 0:
        raise EmptyCloud("cannot initialise from an empty cloud")
    rest = forward(model, model.zero_params()).vertices
    return ModelParams(np.zeros(model.n_shape), np.zeros((model.n_joints, 3)),
                       IDENTITY_6D.copy(), pts.mean(axis=0) - rest.mean(axis=0))


class _Descent:
    """Armijo backtracking along steepest descent or an L-BFGS direction."""

    def __init__(self, quasi_newton: bool):
        self.quasi_newton = quasi_newton
        self.alpha = None

    def _direction(self, g, mem):
        if not self.quasi_newton or not mem:
            return -g
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(mem):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        s, y, _ = mem[-1]
        q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(mem, reversed(alphas)):
            q += s * (a - rho * (y @ q))
        d = -q
        if not g @ d < 0:
            return -g
        return d

    def run(self, objective, params, n_steps, shape, record):
        n_shape, n_joints = shape
        x = params.to_vector()
        f, g = objective.value_and_grad(params)
        f_val, g = f.total, g.to_vector()
        mem = []
        last = f
        for _ in range(n_steps):
            d = self._direction(g, mem)
            slope = g @ d
            if not slope < 0:
                break
            if self.quasi_newton and mem:
                alpha = 1.0
            elif self.alpha is None:
                alpha = 0.1 / max(np.linalg.norm(d), 1e-300)
            else:
                alpha = 2.0 * self.alpha
            accepted = False
            for _ in range(MAX_BACKTRACKS):
                x_new = x + alpha * d
                try:
                    trial = ModelParams.from_vector(x_new, n_shape, n_joints)
                    f_new = objective.value(trial).total
                except (DegenerateRotation, ValueError):
                    f_new = np.inf
                if f_new <= f_val + ARMIJO_C1 * alpha * slope:
                    accepted = True
                    break
                alpha *= BACKTRACK
            if not accepted:
                break
            if not (self.quasi_newton and mem):
                self.alpha = alpha
            last, g_new = objective.value_and_grad(trial)
            g_new = g_new.to_vector()
            record.append((f_val, last.total))
            s, y = x_new - x, g_new - g
            sy = s @ y
            if self.quasi_newton and sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
                mem.append((s, y, 1.0 / sy))
                if len(mem) > LBFGS_MEMORY:
                    mem.pop(0)
            x, f_val, g, params = x_new, last.total, g_new, trial
        return params, last


def _nearest_posterior(d2):
    # argmin returns the first minimum: ties go to the lowest vertex index
    return PosteriorMatrix.one_hot(np.argmin(d2, axis=1), d2.shape[1])


def _fit(cloud, model, cfg: FitConfig, init, e_step, energy_mu, record_params=False):
    t0 = time.perf_counter()
    pts = as_points(cloud)
    if pts.shape[0] == 0:
        raise EmptyCloud("cannot fit an empty cloud")
    params = init if init is not None else init_params(pts, model)
    descent = _Descent(cfg.m_step == "quasi_newton")
    shape = (model.n_shape, model.n_joints)

    d2 = sqdist(pts, forward(model, params).vertices)
    sigma2 = None
    trace, steps = [], []
    trajectory = [params] if record_params else []
    termination = "max_iters"
    floor_run = 0
    prev_energy = None
    post = None
    for k in range(cfg.max_em_iters):
        s2_itr = cfg.sigma2_itr(k)
        post = e_step(d2, s2_itr)
        if sigma2 is None:
            sigma2 = sigma2_from_sqdist(d2, post)
        objective = FixedPosteriorObjective(pts, model, post, sigma2, cfg.weights)
        n_before = len(steps)
        params, loss = descent.run(objective, params, cfg.m_step_iters, shape, steps)
        if cfg.m_step_iters == 0 or len(steps) == n_before:
            loss = objective.value(params)

        d2 = sqdist(pts, forward(model, params).vertices)
        post = e_step(d2, s2_itr)
        sigma2_used = sigma2
        sigma2 = sigma2_from_sqdist(d2, post)
        e = energy_from_sqdist(d2, energy_mu, sigma2)
        if not np.isfinite(e):
            raise NonFiniteEnergy(
                f"energy became non-finite at EM iteration {k}",
                {"iteration": k, "sigma2": sigma2, "sigma2_itr": s2_itr,
                 "params": params.to_dict(), "loss": loss.to_dict()})
        trace.append(IterationRecord(k, e, sigma2_used, s2_itr, loss, len(steps) - n_before))
        if record_params:
            trajectory.append(params)
        log.debug("iter %d energy %.6g sigma2 %.3g sigma2_itr %.3g", k, e, sigma2, s2_itr)

        floor_run = floor_run + 1 if sigma2 <= SIGMA2_FLOOR else 0
        if floor_run >= cfg.floor_patience:
            termination = "sigma2_floor"
            break
        if prev_energy is not None and abs(e - prev_energy) < cfg.energy_rtol * max(abs(prev_energy), 1e-300):
            termination = "energy_converged"
            break
        prev_energy = e

    return FitReport(params, trace, time.perf_counter() - t0, termination, post, sigma2,
                     steps, trajectory)


def fit_em(cloud, model: TemplateModel, cfg: FitConfig = FitConfig(),
           init: ModelParams | None = None, record_params: bool = False) -> FitReport:
    """Fit with soft correspondences and a uniform outlier component."""
    mix = cfg.mixture
    return _fit(cloud, model, cfg, init,
                lambda d2, s2: posterior_from_sqdist(d2, mix, s2), cfg.mu, record_params)


def fit_chamfer_icp(cloud, model: TemplateModel, cfg: FitConfig = FitConfig(),
                    init: ModelParams | None = None, record_params: bool = False) -> FitReport:
    """Nearest-neighbour baseline: every cloud point is hard-assigned to its
    closest model vertex and no outlier term is used."""
    return _fit(cloud, model, replace(cfg, mu=0.0), init,
                lambda d2, s2: _nearest_posterior(d2), 0.0, record_params)
