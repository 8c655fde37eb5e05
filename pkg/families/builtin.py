"""
Built-in coefficient families and initial densities

Every family is a linear Langevin chain
    F(t, y, x) = A x + B y + c + e_1 * p * sin(w x_1)
    sigma(t, y, x) = s0 + s1 * sin(v x_1)
with analytic derivatives, so no finite differencing is needed.
"""
import math
from typing import List, Optional, Sequence

import numpy as np
from scipy import stats

from core.errors import ConfigurationError
from models.model_spec import InitialDensity, ModelSpec


def _vector(value, n: int, name: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.size == 1:
        arr = np.full(n, float(arr[0]))
    if arr.shape != (n,):
        raise ConfigurationError(f"expected {n} values, got {arr.size}", field=name)
    return arr


def _matrix(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 1:
        if arr.size != n * n:
            raise ConfigurationError(f"expected {n * n} row-major entries, got {arr.size}", field=name)
        arr = arr.reshape(n, n)
    if arr.shape != (n, n):
        raise ConfigurationError(f"expected an {n}x{n} matrix, got shape {arr.shape}", field=name)
    return arr


def chain_matrix(n: int, coupling: float = 1.0) -> np.ndarray:
    """Sub-diagonal matrix: F_i = coupling * x_{i-1}"""
    A = np.zeros((n, n))
    for i in range(1, n):
        A[i, i - 1] = coupling
    return A


def linear_chain(
    n: int,
    T: float,
    alpha,
    A,
    B=None,
    c=None,
    sigma0: float = 1.0,
    sigma_amplitude: float = 0.0,
    sigma_frequency: float = 1.0,
    drift_amplitude: float = 0.0,
    drift_frequency: float = 1.0,
    kappa: Optional[float] = None,
    Lambda: Optional[float] = None,
    eta: float = 1.0,
    name: str = "linear_chain",
) -> ModelSpec:
    """
    Linear chain with optional trigonometric perturbations of F_1 and sigma.
    kappa and Lambda default to the smallest values the coefficients admit
    (H1 is ignored when B couples the quantile into the drift).
    """
    alpha = _vector(alpha, n, "alpha")
    A = _matrix(A, n, "A")
    B = np.zeros((n, n)) if B is None else _matrix(B, n, "B")
    c = np.zeros(n) if c is None else _vector(c, n, "c")

    for i in range(2, n):
        if np.any(A[i, : i - 1] != 0.0):
            raise ConfigurationError(f"row {i + 1} of A couples to x_1..x_{i - 1}; not a chain", field="A")
    if sigma0 <= 0.0 or abs(sigma_amplitude) >= sigma0:
        raise ConfigurationError("need sigma0 > |sigma_amplitude| for uniform ellipticity", field="sigma0")

    s1, v = float(sigma_amplitude), float(sigma_frequency)
    p, w = float(drift_amplitude), float(drift_frequency)
    At = A.T.copy()

    def F(t, y, x):
        out = x @ At + (B @ y + c)[None, :]
        if p != 0.0:
            out[:, 0] += p * np.sin(w * x[:, 0])
        return out

    def dF(t, y, x):
        out = np.broadcast_to(A, (x.shape[0], n, n)).copy()
        if p != 0.0:
            out[:, 0, 0] += p * w * np.cos(w * x[:, 0])
        return out

    def sigma(t, y, x):
        return sigma0 + s1 * np.sin(v * x[:, 0])

    def _derivs(x):
        s = sigma0 + s1 * np.sin(v * x[:, 0])
        s_1 = s1 * v * np.cos(v * x[:, 0])
        s_2 = -s1 * v * v * np.sin(v * x[:, 0])
        s_3 = -s1 * v ** 3 * np.cos(v * x[:, 0])
        return s, s_1, s_2, s_3

    def da(t, y, x):
        s, s_1, _, _ = _derivs(x)
        return 2.0 * s * s_1

    def d2a(t, y, x):
        s, s_1, s_2, _ = _derivs(x)
        return 2.0 * s_1 * s_1 + 2.0 * s * s_2

    def grad_sigma(t, y, x):
        out = np.zeros_like(x)
        out[:, 0] = s1 * v * np.cos(v * x[:, 0])
        return out

    def grad_c(t, y, x):
        s, s_1, s_2, s_3 = _derivs(x)
        d3a = 6.0 * s_1 * s_2 + 2.0 * s * s_3
        out = np.zeros_like(x)
        out[:, 0] = p * w * w * np.sin(w * x[:, 0]) + 0.5 * d3a
        return out

    s_max = sigma0 + abs(s1)
    sv1, sv2, sv3 = abs(s1) * v, abs(s1) * v * v, abs(s1) * v ** 3
    d2a_max = 2.0 * sv1 ** 2 + 2.0 * s_max * sv2
    d3a_max = 6.0 * sv1 * sv2 + 2.0 * s_max * sv3
    lip = np.linalg.norm(A, 2) + np.linalg.norm(B, 2) + abs(p) * w + sv1
    c_max = abs(np.trace(A)) + abs(p) * w + 0.5 * d2a_max
    origin = 0.0 if np.any(B != 0.0) else float(np.linalg.norm(c)) + abs(p)
    if kappa is None:
        kappa = max(lip, 0.5 * c_max, d2a_max, d3a_max, abs(p) * w * w, float(np.max(np.abs(A))), origin, 1e-12)
    if Lambda is None:
        Lambda = max(s_max ** 2, 1.0 / (sigma0 - abs(s1)) ** 2, 1.0)

    return ModelSpec(
        name=name, n=n, T=T, alpha=alpha, F=F, sigma=sigma, dF=dF, da=da, d2a=d2a,
        grad_sigma=grad_sigma, grad_c=grad_c, eta=eta, kappa=float(kappa), Lambda=float(Lambda),
    )


def kolmogorov(n: int, T: float = 1.0, alpha=0.5, coupling: float = 1.0, sigma0: float = 1.0,
               **kwargs) -> ModelSpec:
    """F = (0, x_1, ..., x_{n-1}), constant sigma; the integrated Brownian cascade"""
    kwargs.setdefault("name", "kolmogorov")
    return linear_chain(n, T, alpha, chain_matrix(n, coupling), sigma0=sigma0, **kwargs)


def mean_reverting(n: int = 1, T: float = 1.0, alpha=0.5, theta: float = 1.0, coupling: float = 1.0,
                   sigma0: float = 1.0, **kwargs) -> ModelSpec:
    """F_1 = -theta (x_1 - y_1), F_i = coupling * x_{i-1} for i >= 2"""
    A = chain_matrix(n, coupling)
    A[0, 0] = -theta
    B = np.zeros((n, n))
    B[0, 0] = theta
    kwargs.setdefault("name", "mean_reverting")
    return linear_chain(n, T, alpha, A, B=B, sigma0=sigma0, **kwargs)


def zero_drift(n: int = 1, T: float = 1.0, alpha=0.5, sigma0: float = 1.0, **kwargs) -> ModelSpec:
    """F = 0; pure Brownian noise in the first block"""
    kwargs.setdefault("name", "zero_drift")
    return linear_chain(n, T, alpha, np.zeros((n, n)), sigma0=sigma0, **kwargs)


FAMILIES = {
    "kolmogorov": kolmogorov,
    "mean_reverting": mean_reverting,
    "linear_chain": linear_chain,
    "zero_drift": zero_drift,
}


# =============================================================================
# INITIAL DENSITIES
# =============================================================================

def gaussian_density(mean, var, n: Optional[int] = None) -> InitialDensity:
    """Product Gaussian N(mean, diag(var)) with an inverse-CDF sampler"""
    if n is None:
        n = np.atleast_1d(mean).size
    mean = _vector(mean, n, "init_mean")
    var = _vector(var, n, "init_var")
    if np.any(var <= 0.0):
        raise ConfigurationError("variances must be positive", field="init_var")
    sd = np.sqrt(var)
    norm_const = float(np.prod(1.0 / np.sqrt(2.0 * math.pi * var)))

    def f(x):
        z = (np.asarray(x) - mean) / sd
        return norm_const * np.exp(-0.5 * np.sum(z * z, axis=1))

    def grad_f(x):
        x = np.asarray(x)
        return -((x - mean) / var) * f(x)[:, None]

    def sampler(rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.random((size, n))
        return mean + sd * stats.norm.ppf(u)

    return InitialDensity(name="gaussian", n=n, f=f, grad_f=grad_f, sampler=sampler, product_form=True)


def product_density(marginals: Sequence, grad_step: float = 1e-5) -> InitialDensity:
    """Product of frozen scipy marginals; inverse-CDF sampling per coordinate"""
    marginals: List = list(marginals)
    n = len(marginals)

    def _pdfs(x):
        return np.column_stack([m.pdf(x[:, j]) for j, m in enumerate(marginals)])

    def f(x):
        return np.prod(_pdfs(np.asarray(x)), axis=1)

    def grad_f(x):
        x = np.asarray(x)
        pdfs = _pdfs(x)
        out = np.empty_like(x)
        for j, m in enumerate(marginals):
            h = grad_step * np.maximum(1.0, np.abs(x[:, j]))
            slope = (m.pdf(x[:, j] + h) - m.pdf(x[:, j] - h)) / (2.0 * h)
            others = np.prod(np.delete(pdfs, j, axis=1), axis=1) if n > 1 else 1.0
            out[:, j] = slope * others
        return out

    def sampler(rng: np.random.Generator, size: int) -> np.ndarray:
        u = rng.random((size, n))
        return np.column_stack([m.ppf(u[:, j]) for j, m in enumerate(marginals)])

    return InitialDensity(name="product", n=n, f=f, grad_f=grad_f, sampler=sampler, product_form=True)


def rejection_density(f, grad_f, n: int, envelope_mean, envelope_scale, bound: float,
                      name: str = "rejection") -> InitialDensity:
    """
    General positive density sampled by rejection under a Gaussian envelope g:
    f <= bound * g must hold everywhere
    """
    mean = _vector(envelope_mean, n, "envelope_mean")
    scale = _vector(envelope_scale, n, "envelope_scale")
    envelope = stats.multivariate_normal(mean=mean, cov=np.diag(scale ** 2))

    def sampler(rng: np.random.Generator, size: int) -> np.ndarray:
        accepted = []
        count = 0
        while count < size:
            batch = max(2 * (size - count), 64)
            z = mean + scale * rng.standard_normal((batch, n))
            ratio = np.asarray(f(z)) / (bound * np.atleast_1d(envelope.pdf(z)))
            if np.any(ratio > 1.0 + 1e-12):
                raise ConfigurationError("density exceeds bound * envelope", field="bound")
            keep = z[rng.random(batch) < ratio]
            accepted.append(keep)
            count += keep.shape[0]
        return np.vstack(accepted)[:size]

    return InitialDensity(name=name, n=n, f=f, grad_f=grad_f, sampler=sampler)


# =============================================================================
# CLOSED FORMS FOR THE KOLMOGOROV CHAIN
# =============================================================================

def kolmogorov_covariance(t: float, n: int, init_var=0.0, coupling: float = 1.0) -> np.ndarray:
    """
    Covariance of X_t for F_i = coupling * x_{i-1}, sigma = 1 and
    X_0 ~ N(0, diag(init_var)); block (i, j) of the noise part is
    coupling^{i+j-2} t^{i+j-1} / ((i-1)! (j-1)! (i+j-1))
    """
    init_var = _vector(init_var, n, "init_var")
    E = np.zeros((n, n))
    noise = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i >= j:
                E[i, j] = (coupling * t) ** (i - j) / math.factorial(i - j)
            noise[i, j] = (coupling ** (i + j) * t ** (i + j + 1)
                           / (math.factorial(i) * math.factorial(j) * (i + j + 1)))
    return E @ np.diag(init_var) @ E.T + noise


def kolmogorov_density(t: float, n: int, init_var=0.0, mean=None, coupling: float = 1.0):
    """Exact law of X_t as a frozen scipy multivariate normal"""
    mean = np.zeros(n) if mean is None else _vector(mean, n, "mean")
    E = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            E[i, j] = (coupling * t) ** (i - j) / math.factorial(i - j)
    return stats.multivariate_normal(mean=E @ mean, cov=kolmogorov_covariance(t, n, init_var, coupling))
