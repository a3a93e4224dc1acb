"""Linear sensors and Kalman-type estimators (EKF, UKF) built from the model."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff
from .dynamics import DiscreteDynamics, StochasticModel

log = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12


class DegenerateMeasurement(np.linalg.LinAlgError):
    pass


class CovarianceNotPSD(np.linalg.LinAlgError):
    def __init__(self, matrix):
        super().__init__(f"covariance has no Cholesky factor:\n{matrix}")
        self.matrix = matrix


@dataclass
class SensorModel:
    """Discrete samples of dy = C x dt + D dv: y_k = C x_k + eta, eta ~ N(0, D D^T / dt)."""

    observation_matrix: np.ndarray
    noise_matrix: np.ndarray
    dt: float

    def __post_init__(self):
        self.observation_matrix = np.atleast_2d(np.asarray(self.observation_matrix, dtype=float))
        self.noise_matrix = np.atleast_2d(np.asarray(self.noise_matrix, dtype=float))
        if self.noise_matrix.shape[0] != self.observation_matrix.shape[0]:
            raise ValueError("C and D must have the same number of rows")
        if not self.dt > 0:
            raise ValueError("sensor dt must be positive")

    @property
    def p(self):
        return self.observation_matrix.shape[0]

    @property
    def noise_covariance(self) -> np.ndarray:
        D = self.noise_matrix
        return D @ D.T / self.dt

    @classmethod
    def perfect(cls, n: int, dt: float) -> "SensorModel":
        return cls(np.eye(n), np.zeros((n, n)), dt)


@dataclass
class GaussianBelief:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        P = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if P.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match the mean")
        self.covariance = P


def sense(sensor: SensorModel, x_true, rng: Optional[np.random.Generator]):
    C, D = sensor.observation_matrix, sensor.noise_matrix
    y = C @ np.asarray(x_true, dtype=float)
    if rng is None or not np.any(D):
        return y
    return y + D @ rng.standard_normal(D.shape[1]) / np.sqrt(sensor.dt)


def _symmetrize(P, where: str):
    asym = float(np.max(np.abs(P - P.T))) if P.size else 0.0
    if asym > SYMMETRY_TOL:
        log.debug("%s: re-symmetrized covariance (asymmetry %.2e)", where, asym)
    return 0.5 * (P + P.T)


def process_noise(dyn: DiscreteDynamics, mean) -> np.ndarray:
    """sigma(x) sigma(x)^T dt at the estimate; zero for deterministic plants."""
    if isinstance(dyn.model, StochasticModel):
        sigma = np.asarray(dyn.model.diffusion(np.asarray(mean, dtype=float)), dtype=float)
        return sigma @ sigma.T * dyn.dt
    return np.zeros((dyn.model.n, dyn.model.n))


def transition_jacobian(dyn: DiscreteDynamics, x, u):
    """Mean of F(x, u) and dF/dx by forward-mode differentiation."""
    u = np.asarray(u, dtype=float)
    return autodiff.value_and_jacobian(lambda z: dyn.mean_map(z, u), np.asarray(x, dtype=float))


def ekf_predict(belief: GaussianBelief, dyn: DiscreteDynamics, u, process_noise) -> GaussianBelief:
    mean, A = transition_jacobian(dyn, belief.mean, u)
    P = A @ belief.covariance @ A.T + np.asarray(process_noise, dtype=float)
    return GaussianBelief(mean, _symmetrize(P, "ekf_predict"))


def _gain(P, C, S, cross):
    try:
        cond = np.linalg.cond(S)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e14:
        raise DegenerateMeasurement(f"innovation covariance is singular (cond={cond:.3e})")
    return np.linalg.solve(S.T, cross.T).T


def ekf_update(belief: GaussianBelief, sensor: SensorModel, y) -> GaussianBelief:
    """Kalman measurement update with the Joseph-form covariance."""
    C = sensor.observation_matrix
    R = sensor.noise_covariance
    P = belief.covariance
    S = C @ P @ C.T + R
    K = _gain(P, C, S, P @ C.T)
    mean = belief.mean + K @ (np.asarray(y, dtype=float) - C @ belief.mean)
    I_KC = np.eye(P.shape[0]) - K @ C
    P_new = I_KC @ P @ I_KC.T + K @ R @ K.T
    return GaussianBelief(mean, _symmetrize(P_new, "ekf_update"))


@dataclass(frozen=True)
class UkfParams:
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0

    def weights(self, n: int):
        lam = self.alpha ** 2 * (n + self.kappa) - n
        c = n + lam
        wm = np.full(2 * n + 1, 0.5 / c)
        wc = wm.copy()
        wm[0] = lam / c
        wc[0] = lam / c + (1.0 - self.alpha ** 2 + self.beta)
        return wm, wc, c


def sigma_points(belief: GaussianBelief, params: UkfParams):
    n = belief.mean.size
    wm, wc, c = params.weights(n)
    try:
        L = np.linalg.cholesky(c * belief.covariance)
    except np.linalg.LinAlgError:
        # semidefinite covariances (e.g. a perfectly known state) still have a symmetric root
        w, V = np.linalg.eigh(belief.covariance)
        if w.min() < -1e-10 * max(1.0, abs(w.max())):
            raise CovarianceNotPSD(belief.covariance) from None
        L = V * np.sqrt(c * np.clip(w, 0.0, None))
    pts = np.vstack([belief.mean, belief.mean + L.T, belief.mean - L.T])
    return pts, wm, wc


def _unscented_moments(points, wm, wc):
    # weights sum to one, so offsetting from the centre point avoids cancelling the large central weight
    mean = points[0] + wm[1:] @ (points[1:] - points[0])
    d = points - mean
    cov = (wc[:, None] * d).T @ d
    return mean, cov, d


def ukf_predict(belief: GaussianBelief, dyn: DiscreteDynamics, u, process_noise,
                params: UkfParams = UkfParams()) -> GaussianBelief:
    pts, wm, wc = sigma_points(belief, params)
    prop = dyn.mean_map(pts, np.asarray(u, dtype=float))
    mean, cov, _ = _unscented_moments(prop, wm, wc)
    return GaussianBelief(mean, _symmetrize(cov + np.asarray(process_noise, dtype=float), "ukf_predict"))


def ukf_update(belief: GaussianBelief, sensor: SensorModel, y,
               params: UkfParams = UkfParams()) -> GaussianBelief:
    C = sensor.observation_matrix
    pts, wm, wc = sigma_points(belief, params)
    obs = pts @ C.T
    y_hat, S, dy = _unscented_moments(obs, wm, wc)
    S = S + sensor.noise_covariance
    dx = pts - (pts[0] + wm[1:] @ (pts[1:] - pts[0]))
    cross = (wc[:, None] * dx).T @ dy
    K = _gain(belief.covariance, C, S, cross)
    mean = belief.mean + K @ (np.asarray(y, dtype=float) - y_hat)
    P = belief.covariance - K @ S @ K.T
    return GaussianBelief(mean, _symmetrize(P, "ukf_update"))


class Estimator:
    """Predict/update loop around one of the filters; ``kind`` is 'ekf', 'ukf' or 'none'."""

    def __init__(self, kind: str, dyn: DiscreteDynamics, sensor: SensorModel,
                 belief: GaussianBelief, ukf_params: UkfParams = UkfParams()):
        if kind not in ("ekf", "ukf", "none"):
            raise ValueError(f"unknown estimator {kind!r}")
        self.kind = kind
        self.dyn = dyn
        self.sensor = sensor
        self.belief = belief
        self.ukf_params = ukf_params

    def update(self, y) -> np.ndarray:
        if self.kind == "none":
            # no filter: invert the sensor in the least-squares sense
            C = self.sensor.observation_matrix
            if np.array_equal(C, np.eye(C.shape[0])):
                mean = np.array(y, dtype=float)
            else:
                mean = np.linalg.lstsq(C, y, rcond=None)[0]
            self.belief = GaussianBelief(mean, self.belief.covariance)
        elif self.kind == "ekf":
            self.belief = ekf_update(self.belief, self.sensor, y)
        else:
            self.belief = ukf_update(self.belief, self.sensor, y, self.ukf_params)
        return self.belief.mean

    def predict(self, u) -> None:
        if self.kind == "none":
            return
        Q = process_noise(self.dyn, self.belief.mean)
        if self.kind == "ekf":
            self.belief = ekf_predict(self.belief, self.dyn, u, Q)
        else:
            self.belief = ukf_predict(self.belief, self.dyn, u, Q, self.ukf_params)
