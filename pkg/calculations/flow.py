"""
Deterministic characteristic flow d(theta)/ds = F(s, omega_s, theta), theta(0) = x
Log-determinant of the flow Jacobian by Liouville's formula, inverse by the
backward ODE with a Newton polish, and the two-sided growth bounds.
"""
import math
from typing import Optional, Tuple

import numpy as np

from calculations.coefficients import Coefficients
from core.errors import IntegrationFailureError, PathDomainError
from models.model_spec import FlowProbe, ModelSpec, OdeConfig
from models.paths import QuantilePath
from models.results import BoundCheck, BoundReport, FlowResult
from utils.logger import get_logger

logger = get_logger(__name__)

# Slack on the bound comparisons, relative to the size of the bound
_BOUND_TOL = 1e-9


def _check_path(omega: QuantilePath, t_from: float, t_to: float):
    for s in (t_from, t_to):
        if not omega.covers(s):
            raise PathDomainError(
                f"flow needs omega on [{min(t_from, t_to):.6g}, {max(t_from, t_to):.6g}], "
                f"path covers [{omega.t_start:.6g}, {omega.t_end:.6g}]"
            )


def _rk4(coeffs: Coefficients, omega: QuantilePath, X: np.ndarray, t_from: float, t_to: float,
         steps: int, with_jac: bool, record: bool):
    """
    Classical fourth-order steps on the augmented state (theta, log det, J).
    Returns theta, logdet, J, and the recorded path (or None); None for theta
    signals a non-finite state, together with the last good time.
    """
    M, n = X.shape
    h = (t_to - t_from) / steps
    theta = X.copy()
    logdet = np.zeros(M)
    J = np.broadcast_to(np.eye(n), (M, n, n)).copy() if with_jac else None
    times = [t_from]
    path = [theta.copy()] if record else None
    logs = [logdet.copy()] if record else None

    def rhs(s, th, jac):
        y = omega.at(s)
        grad = coeffs.dF(s, y, th)
        d_jac = grad @ jac if jac is not None else None
        return coeffs.F(s, y, th), np.trace(grad, axis1=1, axis2=2), d_jac

    for k in range(steps):
        s = t_from + k * h
        k1 = rhs(s, theta, J)
        k2 = rhs(s + 0.5 * h, theta + 0.5 * h * k1[0], None if J is None else J + 0.5 * h * k1[2])
        k3 = rhs(s + 0.5 * h, theta + 0.5 * h * k2[0], None if J is None else J + 0.5 * h * k2[2])
        k4 = rhs(s + h, theta + h * k3[0], None if J is None else J + h * k3[2])
        new_theta = theta + (h / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        if not np.all(np.isfinite(new_theta)):
            return None, None, None, None, s
        theta = new_theta
        logdet = logdet + (h / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        if J is not None:
            J = J + (h / 6.0) * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
        if record:
            times.append(s + h)
            path.append(theta.copy())
            logs.append(logdet.copy())

    recorded = (np.array(times), np.stack(path, axis=1), np.stack(logs, axis=1)) if record else None
    return theta, logdet, J, recorded, t_to


def integrate_flow(spec: ModelSpec, omega: QuantilePath, X: np.ndarray, t_from: float, t_to: float,
                   cfg: Optional[OdeConfig] = None, with_jac: bool = False, record: bool = False):
    """
    Batch integration between two times (t_to < t_from runs backward).
    The step is halved on non-finite states until it underflows cfg.min_step.
    """
    cfg = cfg or OdeConfig()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_path(omega, t_from, t_to)
    span = abs(t_to - t_from)
    if span == 0.0:
        M, n = X.shape
        J = np.broadcast_to(np.eye(n), (M, n, n)).copy() if with_jac else None
        recorded = (np.array([t_from]), X[:, None, :].copy(), np.zeros((M, 1))) if record else None
        return X.copy(), np.zeros(M), J, recorded

    coeffs = Coefficients(spec)
    steps = max(1, int(math.ceil(span / cfg.step - 1e-9)))
    while True:
        theta, logdet, J, recorded, last_good = _rk4(coeffs, omega, X, t_from, t_to, steps, with_jac, record)
        if theta is not None:
            return theta, logdet, J, recorded
        steps *= 2
        if span / steps < cfg.min_step:
            raise IntegrationFailureError("flow step underflow on non-finite state", last_good_time=last_good)
        logger.debug(f"Flow: non-finite state at t={last_good:.6g}, retrying with {steps} steps")


def forward_flow(spec: ModelSpec, omega: QuantilePath, x, t: float, cfg: Optional[OdeConfig] = None,
                 with_jacobian: bool = False) -> FlowResult:
    """theta^omega(t, x) and log det of its Jacobian"""
    cfg = cfg or OdeConfig()
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    theta, logdet, J, recorded = integrate_flow(
        spec, omega, x[None, :], omega.t_start, omega.t_start + t, cfg,
        with_jac=with_jacobian, record=cfg.record_path,
    )
    return FlowResult(
        theta=theta[0],
        log_jac_det=float(logdet[0]),
        jacobian=None if J is None else J[0],
        path_times=None if recorded is None else recorded[0],
        path=None if recorded is None else recorded[1][0],
        path_log_det=None if recorded is None else recorded[2][0],
    )


def _inverse_batch(spec: ModelSpec, omega: QuantilePath, Xi: np.ndarray, t: float,
                   cfg: OdeConfig) -> np.ndarray:
    t0 = omega.t_start
    X, _, _, _ = integrate_flow(spec, omega, Xi, t0 + t, t0, cfg)
    # Newton on the discrete forward map so forward(inverse(xi)) = xi to round-off
    for _ in range(cfg.newton_iterations):
        theta, _, J, _ = integrate_flow(spec, omega, X, t0, t0 + t, cfg, with_jac=True)
        residual = theta - Xi
        X = X - np.linalg.solve(J, residual[:, :, None])[:, :, 0]
    return X


def inverse_flow(spec: ModelSpec, omega: QuantilePath, xi, t: float,
                 cfg: Optional[OdeConfig] = None) -> np.ndarray:
    """x with theta^omega(t, x) = xi"""
    cfg = cfg or OdeConfig()
    xi = np.atleast_1d(np.asarray(xi, dtype=np.float64))
    return _inverse_batch(spec, omega, xi[None, :], t, cfg)[0]


def flow_bounds(kappa: float, n: int, x_norm, t) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower and upper bound on |theta| and the bound on |log det|"""
    x_norm = np.asarray(x_norm, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    lower = np.exp(-kappa * t) * x_norm - kappa * t
    upper = (x_norm + kappa * t) * np.exp(kappa * t)
    return lower, upper, n * kappa * t


def check_flow_bounds(spec: ModelSpec, omega: QuantilePath, probe: Optional[FlowProbe] = None,
                      cfg: Optional[OdeConfig] = None) -> BoundReport:
    """
    Growth bounds on |theta|, the log det bound, and the same bound for the
    inverse map, on random (x, t) probes; violations are reported.
    """
    probe = probe or FlowProbe()
    cfg = cfg or OdeConfig()
    rng = np.random.default_rng(probe.seed)
    n, kappa = spec.n, spec.kappa
    horizon = min(spec.T, omega.t_end - omega.t_start)
    P = probe.points

    xs = rng.uniform(-probe.radius, probe.radius, (P, n))
    # a handful of random times shared by many points keeps the integrator vectorized
    levels = horizon * (1.0 - rng.random(probe.time_levels))
    ts = levels[rng.integers(0, probe.time_levels, P)]

    theta = np.empty_like(xs)
    logdet = np.empty(P)
    inv_logdet = np.empty(P)
    identity_err = 0.0
    for level in np.unique(ts):
        idx = np.flatnonzero(ts == level)
        t0 = omega.t_start
        th, ld, _, _ = integrate_flow(spec, omega, xs[idx], t0, t0 + level, cfg)
        theta[idx], logdet[idx] = th, ld
        x_star = _inverse_batch(spec, omega, xs[idx], level, cfg)
        back, ld_star, _, _ = integrate_flow(spec, omega, x_star, t0, t0 + level, cfg)
        inv_logdet[idx] = -ld_star
        identity_err = max(identity_err, float(np.max(np.abs(back - xs[idx]))))

    x_norm = np.linalg.norm(xs, axis=1)
    th_norm = np.linalg.norm(theta, axis=1)
    lower, upper, det_bound = flow_bounds(kappa, n, x_norm, ts)
    tol = _BOUND_TOL * (1.0 + np.abs(upper))

    def summarize(name: str, margins: np.ndarray) -> BoundCheck:
        k = int(np.argmin(margins))
        violations = int(np.sum(margins < -tol))
        return BoundCheck(
            name=name, violations=violations, worst_margin=float(margins[k]),
            witness={"x": xs[k].tolist(), "t": float(ts[k]), "theta": theta[k].tolist()},
        )

    checks = [
        summarize("theta_lower", th_norm - lower),
        summarize("theta_upper", upper - th_norm),
        summarize("log_det", det_bound - np.abs(logdet)),
        summarize("inverse_log_det", det_bound - np.abs(inv_logdet)),
    ]
    report = BoundReport(n_probes=P, checks=checks, identity_error=identity_err)
    total = sum(c.violations for c in checks)
    if total:
        logger.warning(f"Flow bounds: {total} violations over {P} probes")
    logger.info(f"Flow bounds on '{spec.name}': {P} probes, identity error {identity_err:.2e}")
    return report
