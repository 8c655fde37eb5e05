"""
Pointwise Feynman-Kac evaluation of the frozen-path density u_t and its gradient

u_t(x) = E[ f(X_t) exp(int_0^t c ds) ] over the time-reversed diffusion of
particles.simulate_backward_fk; the gradient is the pathwise estimator
E[ exp(.) (grad f(X_t) J_t + f(X_t) int grad c . J ds) ].
"""
import math
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

import config
from calculations.coefficients import radial_grid, radial_weight, sphere_directions, suffix_sup, tail_share
from calculations.particles import simulate_backward_fk
from calculations.random_streams import STREAM_FK
from core.errors import ConfigurationError
from models.model_spec import InitialDensity, ModelSpec, RadialPlan
from models.paths import QuantilePath
from models.results import FKEstimate, FKGradientEstimate, FKSamples, UprimeEstimate
from utils.logger import get_logger

logger = get_logger(__name__)


def _check_time(spec: ModelSpec, t: float):
    if not 0.0 < t <= spec.T * (1.0 + 1e-12):
        raise ConfigurationError(f"Feynman-Kac time {t:g} outside (0, {spec.T:g}]", field="t")


def _near_initial(t: float, dt: float) -> bool:
    flag = t < config.NEAR_INITIAL_STEPS * dt
    if flag:
        logger.warning(f"Feynman-Kac at t={t:g} < {config.NEAR_INITIAL_STEPS}*dt: near-initial, elevated bias")
    return flag


def _weights(init: InitialDensity, samples: FKSamples) -> Tuple[np.ndarray, np.ndarray]:
    """f(X_t) and exp(exponent) per path"""
    f_vals = np.asarray(init.f(samples.terminal), dtype=np.float64)
    return f_vals, np.exp(samples.exponent)


def _mean_and_stderr(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    N = values.shape[0]
    ddof = 1 if N > 1 else 0
    return values.mean(axis=0), values.std(axis=0, ddof=ddof) / math.sqrt(N)


def density_terms(init: InitialDensity, samples: FKSamples) -> np.ndarray:
    """Per-path contributions f(X_t) e^E to u_t(x)"""
    f_vals, weight = _weights(init, samples)
    return f_vals * weight


def gradient_terms(init: InitialDensity, samples: FKSamples) -> np.ndarray:
    """Per-path contributions to grad u_t(x), shape (N, n)"""
    if init.grad_f is None:
        raise ConfigurationError("grad_f is required for gradient estimates", field="grad_f")
    if samples.jacobian is None or samples.c_grad_integral is None:
        raise ConfigurationError("samples lack the Jacobian or the grad-c integral", field="samples")
    f_vals, weight = _weights(init, samples)
    grad_f = np.asarray(init.grad_f(samples.terminal), dtype=np.float64).reshape(len(samples), -1)
    pushed = np.einsum("mi,mij->mj", grad_f, samples.jacobian)
    return weight[:, None] * (pushed + f_vals[:, None] * samples.c_grad_integral)


def evaluate_u(spec: ModelSpec, omega: QuantilePath, init: InitialDensity, t: float, x, N: int,
               dt: float, seed: int, threads: Optional[int] = None, stream: int = STREAM_FK) -> FKEstimate:
    """Monte Carlo estimate of u_t^omega(x) with its standard error"""
    _check_time(spec, t)
    samples = simulate_backward_fk(spec, omega, t, x, N, dt, seed, threads, stream)
    value, stderr = _mean_and_stderr(density_terms(init, samples))
    return FKEstimate(value=float(value), stderr=float(stderr), N=N, x=samples.x, t=t,
                      near_initial=_near_initial(t, dt))


def evaluate_grad_u(spec: ModelSpec, omega: QuantilePath, init: InitialDensity, t: float, x, N: int,
                    dt: float, seed: int, threads: Optional[int] = None,
                    stream: int = STREAM_FK) -> FKGradientEstimate:
    _check_time(spec, t)
    if init.grad_f is None:
        raise ConfigurationError("grad_f is required for gradient estimates", field="grad_f")
    samples = simulate_backward_fk(spec, omega, t, x, N, dt, seed, threads, stream,
                                   with_jacobian=True, with_c_gradient=True)
    value, stderr = _mean_and_stderr(gradient_terms(init, samples))
    return FKGradientEstimate(value=value, stderr=stderr, N=N, x=samples.x, t=t,
                              near_initial=_near_initial(t, dt))


def evaluate_u_batch(spec: ModelSpec, omega: QuantilePath, init: InitialDensity, points: pd.DataFrame,
                     N: int, dt: float, seed: int, threads: Optional[int] = None) -> pd.DataFrame:
    """Rows of (t, x1..xn) in, the same rows with value and stderr appended out"""
    columns = ["t"] + [f"x{j + 1}" for j in range(spec.n)]
    missing = [c for c in columns if c not in points.columns]
    if missing:
        raise ConfigurationError(f"point table lacks columns {missing}", field="points")
    values, errors = [], []
    for row in points[columns].itertuples(index=False):
        est = evaluate_u(spec, omega, init, float(row[0]), np.asarray(row[1:], dtype=np.float64),
                         N, dt, seed, threads)
        values.append(est.value)
        errors.append(est.stderr)
    out = points.copy()
    out["value"] = values
    out["stderr"] = errors
    logger.info(f"Feynman-Kac batch: {len(out)} points, N={N}")
    return out


def _uprime_times(t0: float, t: float) -> List[float]:
    times, s = [], t0
    while s < t:
        times.append(s)
        s *= 2.0
    times.append(t)
    return times


def estimate_Uprime(spec: ModelSpec, omega: QuantilePath, init: InitialDensity, t0: float, t: float,
                    plan: Optional[RadialPlan] = None, N: int = 2000,
                    threads: Optional[int] = None) -> UprimeEstimate:
    """
    Truncated radial evaluation of
        sup_s int_0^R [ sup_{|z|>=r} u_s(z)^2 + sup_{|z|>=r} |grad u_s(z)|^4 ] (r^{4n-1+eps} + r^{n-1}) dr
    with s over {t0, 2 t0, 4 t0, ...} below t, plus t itself. Every evaluation
    shares one seed so the time dependence is not masked by noise.
    """
    plan = plan or RadialPlan()
    if not 0.0 < t0 <= t:
        raise ConfigurationError(f"need 0 < t0 <= t, got t0={t0:g}, t={t:g}", field="t0")
    if init.grad_f is None:
        raise ConfigurationError("grad_f is required for the U' functional", field="grad_f")
    n = spec.n
    r = radial_grid(plan.r_min, plan.max_radius, plan.radial_nodes)
    dirs = sphere_directions(n, plan.directions, seed=plan.seed)
    weight = radial_weight(r, n, plan.eps)
    times = _uprime_times(t0, t)

    per_time, tails = [], []
    for s in times:
        _check_time(spec, s)
        u_env = np.zeros((r.size, dirs.shape[0]))
        g_env = np.zeros_like(u_env)
        for i, radius in enumerate(r):
            for k, direction in enumerate(dirs):
                samples = simulate_backward_fk(spec, omega, s, radius * direction, N, plan.dt, plan.seed,
                                               threads, STREAM_FK, with_jacobian=True, with_c_gradient=True)
                u_env[i, k] = abs(float(np.mean(density_terms(init, samples))))
                g_env[i, k] = float(np.linalg.norm(np.mean(gradient_terms(init, samples), axis=0)))
        integrand = (suffix_sup(np.max(u_env, axis=1) ** 2) + suffix_sup(np.max(g_env, axis=1) ** 4)) * weight
        per_time.append(float(trapezoid(integrand, r)))
        tails.append(tail_share(integrand, r))
        logger.debug(f"U' at s={s:.4g}: {per_time[-1]:.6g} (outer-half share {tails[-1]:.3g})")

    k = int(np.argmax(per_time))
    worst_tail = float(max(tails))
    finite = bool(np.all(np.isfinite(per_time)) and worst_tail <= plan.tail_tolerance)
    diagnostics = {"per_time": per_time, "tail_shares": tails, "argmax_time": times[k]}
    if not finite:
        logger.warning(f"U' envelope not decaying at R={plan.max_radius:g} (outer-half share {worst_tail:.3g})")
    return UprimeEstimate(
        value=per_time[k], finite=finite, truncation_radius=plan.max_radius,
        tail_fraction=worst_tail, t0=t0, times=times, diagnostics=diagnostics,
    )
