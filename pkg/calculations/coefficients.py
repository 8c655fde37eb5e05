"""
Fokker-Planck coefficients of the frozen-path equation and hypothesis probes

For d = 1 blocks and a = sigma^2:
    b = -F + e_1 * da/dx_1
    c = -sum_i dF_i/dx_i + 0.5 * d2a/dx_1^2
"""
import math
from typing import Callable, Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import gamma

from core.errors import ConfigurationError, HypothesisViolationError, IntegrabilityViolationError
from models.model_spec import HypothesisProbe, InitialDensity, ModelSpec, QuadraturePlan
from models.results import HypothesisCheck, HypothesisReport, IntegrabilityReport
from utils.logger import get_logger

logger = get_logger(__name__)

# Relative slack on the closed bounds of a and c
_BOUND_SLACK = 1e-9


def _as_batch(x) -> tuple:
    """Promote a single point to a batch of one; returns (batch, was_single)"""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def _fd_steps(x: np.ndarray, scale: float) -> np.ndarray:
    return scale * np.maximum(1.0, np.abs(x))


def central_gradient(func: Callable, x: np.ndarray, scale: float, columns=None) -> np.ndarray:
    """
    Central differences of a scalar batch function func(x) -> (M,)
    Returns (M, n); only `columns` are filled when given, others stay zero.
    """
    M, n = x.shape
    out = np.zeros((M, n))
    h = _fd_steps(x, scale)
    for j in (range(n) if columns is None else columns):
        xp = x.copy()
        xm = x.copy()
        xp[:, j] += h[:, j]
        xm[:, j] -= h[:, j]
        out[:, j] = (func(xp) - func(xm)) / (2.0 * h[:, j])
    return out


class Coefficients:
    """
    Resolved coefficient set of a ModelSpec
    Missing derivative callbacks fall back to central differences when the ModelSpec
    allows it; otherwise asking for them raises ConfigurationError.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.n = spec.n
        self._h = spec.fd_step_scale

    def _missing(self, name: str):
        if not self.spec.allow_finite_differences:
            raise ConfigurationError(
                "derivative callback is missing and finite differences are disabled", field=name
            )

    def F(self, t: float, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.spec.F(t, y, x), dtype=np.float64).reshape(x.shape)

    def sigma(self, t: float, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.spec.sigma(t, y, x), dtype=np.float64), (x.shape[0],))

    def a(self, t: float, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self.sigma(t, y, x) ** 2

    def dF(self, t: float, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.spec.dF is not None:
            return np.asarray(self.spec.dF(t, y, x), dtype=np.float64).reshape(x.shape[0], self.n, self.n)
        self._missing("dF")
        M = x.shape[0]
        h = _fd_steps(x, self._h)
        out = np.empty((M, self.n, self.n))
        for j in range(self.n):
            xp = x.copy()
            xm = x.copy()
            xp[:, j] += h[:, j]
            xm[:, j] -= h[:, j]
            out[:, :, j] = (self.F(t, y, xp) - self.F(t, y, xm)) / (2.0 * h[:, j])[:, None]
        return out

    def da(self, t: float, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.spec.da is not None:
            return np.broadcast_to(np.asarray(self.spec.da(t, y, x), dtype=np.float64), (x.shape[0],))
        self._missing("da")
        return central_gradient(lambda z: self.a(t, y, z), x, self._h, columns=[0])[:, 0]

    def d2a(self, t: float, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.spec.d2a is not None:
            return np.broadcast_to(np.asarray(self.spec.d2a(t, y, x), dtype=np.float64), (x.shape[0],))
        self._missing("d2a")
        return central_gradient(lambda z: self.da(t, y, z), x, self._h, columns=[0])[:, 0]

    def grad_sigma(self, t: float, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.spec.grad_sigma is not None:
            return np.asarray(self.spec.grad_sigma(t, y, x), dtype=np.float64).reshape(x.shape)
        self._missing("grad_sigma")
        return central_gradient(lambda z: self.sigma(t, y, z), x, self._h)

    def grad_da(self, t: float, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Spatial gradient of da/dx_1; the x_1 entry is d2a"""
        out = np.zeros_like(x)
        out[:, 0] = self.d2a(t, y, x)
        if self.n > 1:
            # mixed second derivatives only exist through numerical differencing
            out[:, 1:] = central_gradient(
                lambda z: self.da(t, y, z), x, self._h, columns=range(1, self.n)
            )[:, 1:]
        return out

    def b(self, t: float, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        out = -self.F(t, y, x)
        out[:, 0] += self.da(t, y, x)
        return out

    def grad_b(self, t: float, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        """(M, n, n) Jacobian of b"""
        out = -self.dF(t, y, x)
        out[:, 0, :] += self.grad_da(t, y, x)
        return out

    def c(self, t: float, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        trace = np.trace(self.dF(t, y, x), axis1=1, axis2=2)
        return -trace + 0.5 * self.d2a(t, y, x)

    def grad_c(self, t: float, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.spec.grad_c is not None:
            return np.asarray(self.spec.grad_c(t, y, x), dtype=np.float64).reshape(x.shape)
        self._missing("grad_c")
        return central_gradient(lambda z: self.c(t, y, z), x, self._h)

    def checked_a(self, t: float, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        values = self.a(t, y, x)
        lam = self.spec.Lambda
        lo, hi = (1.0 / lam) * (1.0 - _BOUND_SLACK), lam * (1.0 + _BOUND_SLACK)
        bad = (values < lo) | (values > hi) | ~np.isfinite(values)
        if np.any(bad):
            k = int(np.argmax(bad))
            raise HypothesisViolationError(
                f"a = {values[k]:.6g} outside [{1.0 / lam:.6g}, {lam:.6g}]",
                point={"t": t, "y": np.asarray(y), "x": x[k]},
            )
        return values

    def checked_c(self, t: float, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        values = self.c(t, y, x)
        bound = 2.0 * self.spec.kappa * (1.0 + _BOUND_SLACK)
        bad = (np.abs(values) > bound) | ~np.isfinite(values)
        if np.any(bad):
            k = int(np.argmax(bad))
            raise HypothesisViolationError(
                f"|c| = {abs(values[k]):.6g} exceeds 2*kappa = {2.0 * self.spec.kappa:.6g}",
                point={"t": t, "y": np.asarray(y), "x": x[k]},
            )
        return values


def _check_time(spec: ModelSpec, t: float):
    if t < 0.0 or t > spec.T * (1.0 + _BOUND_SLACK):
        raise ConfigurationError(f"time {t:.6g} outside [0, {spec.T:.6g}]", field="t")


def eval_a(spec: ModelSpec, t: float, y, x):
    """a = sigma^2, checked against the ellipticity range [1/Lambda, Lambda]"""
    _check_time(spec, t)
    xb, single = _as_batch(x)
    values = Coefficients(spec).checked_a(t, np.asarray(y, dtype=np.float64), xb)
    return float(values[0]) if single else values


def eval_b(spec: ModelSpec, t: float, y, x):
    """Drift of the backward Feynman-Kac process"""
    _check_time(spec, t)
    xb, single = _as_batch(x)
    values = Coefficients(spec).b(t, np.asarray(y, dtype=np.float64), xb)
    return values[0] if single else values


def eval_c(spec: ModelSpec, t: float, y, x):
    """Zeroth-order Fokker-Planck coefficient, checked against |c| <= 2 kappa"""
    _check_time(spec, t)
    xb, single = _as_batch(x)
    values = Coefficients(spec).checked_c(t, np.asarray(y, dtype=np.float64), xb)
    return float(values[0]) if single else values


# =============================================================================
# HYPOTHESIS PROBES
# =============================================================================

def _unit_vectors(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _witness(t, y, x) -> dict:
    return {"t": float(t), "y": np.asarray(y).tolist(), "x": np.asarray(x).tolist()}


def validate_hypotheses(spec: ModelSpec, probe: Optional[HypothesisProbe] = None) -> HypothesisReport:
    """
    Probe (H1)-(H5), the chain structure and the |c| <= 2 kappa bound at random
    points of [0, T] x box x box. Violations are reported, never raised.
    """
    probe = probe or HypothesisProbe()
    coeffs = Coefficients(spec)
    rng = np.random.default_rng(probe.seed)
    n, kappa = spec.n, spec.kappa
    P = probe.points

    ts = rng.uniform(0.0, spec.T, P)
    ys = rng.uniform(-probe.radius, probe.radius, (P, n))
    xs = rng.uniform(-probe.radius, probe.radius, (P, n))

    # Coefficients are vectorized in x for a fixed (t, y); probe one (t, y) per point
    F0 = np.empty(P)
    a_vals = np.empty(P)
    lip = np.empty(P)
    d2a_vals = np.empty(P)
    dF_max = np.empty(P)
    lip_d2 = np.empty(P)
    floor = np.full(P, np.inf)
    holder = np.zeros(P)
    chain = np.zeros(P)
    c_vals = np.empty(P)

    step = probe.local_step
    dirs = _unit_vectors(rng, P, 2 * n)
    # (H5) gaps in x_{i-1}, log-uniform between the local step and the probe radius
    gaps = np.exp(rng.uniform(math.log(step), math.log(2.0 * probe.radius), (P, max(n - 1, 1))))
    gaps *= rng.choice([-1.0, 1.0], gaps.shape)
    for k in range(P):
        t, y, x = ts[k], ys[k], xs[k:k + 1]
        zero = np.zeros((1, n))
        F0[k] = np.linalg.norm(coeffs.F(t, y, zero)[0])
        a_vals[k] = coeffs.a(t, y, x)[0]

        # (H3): joint Lipschitz ratio of F and sigma in (x, y)
        dx, dy = step * dirs[k, :n], step * dirs[k, n:]
        x2, y2 = x + dx, y + dy
        diff = (np.linalg.norm(coeffs.F(t, y2, x2)[0] - coeffs.F(t, y, x)[0])
                + abs(coeffs.sigma(t, y2, x2)[0] - coeffs.sigma(t, y, x)[0]))
        lip[k] = diff / (np.linalg.norm(dx) + np.linalg.norm(dy))

        # (H4): bounded d2a; Lipschitz d2a and diagonal of dF
        jac = coeffs.dF(t, y, x)[0]
        jac2 = coeffs.dF(t, y2, x2)[0]
        d2a = coeffs.d2a(t, y, x)[0]
        d2a_vals[k] = abs(d2a)
        dF_max[k] = np.max(np.abs(jac))
        lip_d2[k] = max(
            abs(coeffs.d2a(t, y2, x2)[0] - d2a),
            float(np.sum(np.abs(np.diag(jac2) - np.diag(jac)))),
        ) / (np.linalg.norm(dx) + np.linalg.norm(dy))

        # (H5): sub-diagonal floor; dF_i/dx_{i-1} eta-Holder in x_{i-1}
        if n > 1:
            sub = np.abs(np.diag(jac, k=-1))
            floor[k] = float(np.min(sub))
            for j in range(n - 1):
                xh = x.copy()
                xh[0, j] += gaps[k, j]
                moved = abs(coeffs.dF(t, y, xh)[0][j + 1, j] - jac[j + 1, j])
                holder[k] = max(holder[k], float(moved) / abs(gaps[k, j]) ** spec.eta)

        # chain: F_i must not see x_j for j <= i - 2
        if n > 2:
            base = coeffs.F(t, y, x)[0]
            for j in range(n - 2):
                xj = x.copy()
                xj[0, j] += 1.0 + abs(x[0, j])
                moved = np.abs(coeffs.F(t, y, xj)[0] - base)
                # F_i with i >= j + 2 (0-based i >= j + 2) must be unchanged
                chain[k] = max(chain[k], float(np.max(moved[j + 2:])))

        c_vals[k] = abs(coeffs.c(t, y, x)[0])

    def worst(values: np.ndarray, largest: bool = True) -> int:
        return int(np.argmax(values) if largest else np.argmin(values))

    checks = []

    k = worst(F0)
    checks.append(HypothesisCheck(
        name="H1", description="|F(t, y, 0)| <= kappa",
        passed=bool(F0[k] <= kappa), worst_value=float(F0[k]), bound=kappa,
        witness=_witness(ts[k], ys[k], np.zeros(n)),
    ))

    ellip = np.maximum(a_vals, 1.0 / np.maximum(a_vals, 1e-300))
    k = worst(ellip)
    checks.append(HypothesisCheck(
        name="H2", description="1/Lambda <= a <= Lambda",
        passed=bool(ellip[k] <= spec.Lambda * (1.0 + _BOUND_SLACK)),
        worst_value=float(a_vals[k]), bound=spec.Lambda,
        witness=_witness(ts[k], ys[k], xs[k]),
    ))

    k = worst(lip)
    checks.append(HypothesisCheck(
        name="H3", description="F and sigma kappa-Lipschitz in (x, y)",
        passed=bool(lip[k] <= kappa * (1.0 + 1e-6)), worst_value=float(lip[k]), bound=kappa,
        witness=_witness(ts[k], ys[k], xs[k]),
    ))

    h4 = np.maximum(np.maximum(d2a_vals, lip_d2), dF_max)
    k = worst(h4)
    checks.append(HypothesisCheck(
        name="H4", description="|d2a| <= kappa, d2a and div-diagonal of dF kappa-Lipschitz",
        passed=bool(h4[k] <= kappa * (1.0 + 1e-6)), worst_value=float(h4[k]), bound=kappa,
        witness=_witness(ts[k], ys[k], xs[k]),
    ))

    if n > 1:
        k = worst(floor, largest=False)
        kh = worst(holder)
        holder_ok = bool(holder[kh] <= kappa * (1.0 + 1e-6))
        passed = bool(floor[k] >= probe.h5_floor) and holder_ok
        at = k if holder_ok else kh
        checks.append(HypothesisCheck(
            name="H5", description="|dF_i/dx_{i-1}| >= floor and eta-Holder in x_{i-1}",
            passed=passed, worst_value=float(floor[k]), bound=probe.h5_floor,
            witness={**_witness(ts[at], ys[at], xs[at]), "holder_ratio": float(holder[kh])},
        ))
    else:
        checks.append(HypothesisCheck(
            name="H5", description="no sub-diagonal blocks for n = 1",
            passed=True, worst_value=float("inf"), bound=probe.h5_floor,
        ))

    k = worst(chain)
    checks.append(HypothesisCheck(
        name="chain", description="F_i independent of x_1..x_{i-2}",
        passed=bool(chain[k] <= probe.chain_tolerance), worst_value=float(chain[k]),
        bound=probe.chain_tolerance, witness=_witness(ts[k], ys[k], xs[k]),
    ))

    k = worst(c_vals)
    checks.append(HypothesisCheck(
        name="c_bound", description="|c| <= 2 kappa",
        passed=bool(c_vals[k] <= 2.0 * kappa * (1.0 + _BOUND_SLACK)), worst_value=float(c_vals[k]),
        bound=2.0 * kappa, witness=_witness(ts[k], ys[k], xs[k]),
    ))

    report = HypothesisReport(model_name=spec.name, n_points=P, radius=probe.radius, checks=checks)
    for check in report.failed():
        logger.warning(f"Hypothesis {check.name} failed: worst {check.worst_value:.6g} vs {check.bound:.6g}")
    logger.info(f"Probed hypotheses for '{spec.name}' at {P} points: "
                f"{'all passed' if report.all_passed else f'{len(report.failed())} failed'}")
    return report


# =============================================================================
# INTEGRABILITY FUNCTIONAL
# =============================================================================

def sphere_directions(n: int, count: int, seed: int = 0) -> np.ndarray:
    """Unit directions for sup-envelopes; {+1, -1} in one dimension"""
    if n == 1:
        return np.array([[1.0], [-1.0]])
    rng = np.random.default_rng(seed)
    dirs = _unit_vectors(rng, count, n)
    # coordinate axes keep product-form densities honest
    axes = np.vstack([np.eye(n), -np.eye(n)])
    return np.vstack([axes, dirs])


def radial_grid(r_min: float, r_max: float, nodes: int) -> np.ndarray:
    """0 followed by geometric spacing on [r_min, r_max]"""
    return np.concatenate([[0.0], np.geomspace(r_min, r_max, nodes - 1)])


def radial_weight(r: np.ndarray, n: int, eps: float) -> np.ndarray:
    """r^{4n - 1 + eps} + r^{n - 1}"""
    r = np.asarray(r, dtype=np.float64)
    return r ** (4 * n - 1 + eps) + r ** (n - 1)


def suffix_sup(values: np.ndarray) -> np.ndarray:
    """sup over radii >= r of values sampled on an increasing radial grid"""
    return np.maximum.accumulate(values[::-1])[::-1]


def tail_share(integrand: np.ndarray, r: np.ndarray) -> float:
    """Fraction of the trapezoid integral coming from the outer half of the range"""
    total = trapezoid(integrand, r)
    if total <= 0.0:
        return 0.0
    outer = r >= 0.5 * r[-1]
    return float(trapezoid(integrand[outer], r[outer]) / total)


def compute_U_report(init: InitialDensity, quad: Optional[QuadraturePlan] = None,
                     eps: float = 1.0) -> IntegrabilityReport:
    """Radial sup-envelope quadrature of U, plus the weakened local functional"""
    if eps <= 0:
        raise ConfigurationError("eps must be positive", field="eps")
    if init.grad_f is None:
        raise ConfigurationError("grad_f is required for the integrability functional", field="grad_f")
    quad = quad or QuadraturePlan()
    n = init.n
    r = radial_grid(quad.r_min, quad.truncation_radius, quad.radial_nodes)
    dirs = sphere_directions(n, quad.directions)

    # points (radius, direction) -> (R * D, n)
    pts = (r[:, None, None] * dirs[None, :, :]).reshape(-1, n)
    f_vals = np.asarray(init.f(pts), dtype=np.float64).reshape(r.size, -1)
    g_vals = np.linalg.norm(np.asarray(init.grad_f(pts), dtype=np.float64).reshape(-1, n), axis=1)
    g_vals = g_vals.reshape(r.size, -1)

    weight = radial_weight(r, n, eps)
    f_env = suffix_sup(np.max(f_vals, axis=1) ** 2)
    g_env = suffix_sup(np.max(g_vals, axis=1) ** 4)
    f_integrand = f_env * weight
    g_integrand = g_env * weight
    f_term = float(trapezoid(f_integrand, r))
    g_term = float(trapezoid(g_integrand, r))

    tail = max(tail_share(f_integrand, r), tail_share(g_integrand, r))
    if not np.isfinite(f_term + g_term) or tail > quad.tail_tolerance:
        raise IntegrabilityViolationError(
            f"radial integrand not decaying at R={quad.truncation_radius:g} "
            f"(outer-half share {tail:.3g} > {quad.tail_tolerance:g})",
            tail_fraction=tail,
        )

    # int f^2 (|y|^{n+eps} + 1) dy in polar form, sphere mean from the directions
    area = 2.0 * math.pi ** (n / 2.0) / gamma(n / 2.0)
    shell = np.mean(f_vals ** 2, axis=1) * (r ** (n + eps) + 1.0) * area * r ** (n - 1)
    U_local = float(trapezoid(shell, r)) + g_term

    report = IntegrabilityReport(
        U=f_term + g_term, U_local=U_local, f_term=f_term, grad_term=g_term,
        tail_fraction=tail, truncation_radius=quad.truncation_radius, eps=eps,
    )
    logger.info(f"Integrability for '{init.name}': U={report.U:.6g}, U_local={U_local:.6g}")
    return report


def compute_U(init: InitialDensity, quad: Optional[QuadraturePlan] = None, eps: float = 1.0) -> float:
    return compute_U_report(init, quad, eps).U
