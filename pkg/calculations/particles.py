"""
Euler-Maruyama particle engines

- simulate_auxiliary: the frozen-path SDE dX = F(s, omega_s, X) ds + e_1 sigma dW
- simulate_mckean: the self-consistent system, omega replaced at every step by
  the empirical alpha-quantile of the current ensemble
- simulate_backward_fk: the time-reversed Feynman-Kac process with its
  exponent, Jacobian and grad-c path integral

Noise enters coordinate 1 only. Each particle block draws from its own
Philox stream (see random_streams), so results do not depend on threads.
Initial draws use the companion initial stream: draw_initial(f, seed, stream)
returns exactly the X_0 a run on (seed, stream) starts from.
"""
from typing import Dict, NamedTuple, Optional, Sequence, Union

import numpy as np

import config
from calculations.coefficients import Coefficients
from calculations.density import empirical_quantile
from calculations.random_streams import STREAM_FK, STREAM_FORWARD, BlockScheduler, initial_stream, time_grid
from core.errors import ConfigurationError, PathDomainError, SimulationBlowUpError
from models.model_spec import InitialDensity, ModelSpec
from models.paths import ParticleEnsemble, QuantilePath
from models.results import FKSamples
from utils.logger import get_logger

logger = get_logger(__name__)

Initial = Union[InitialDensity, ParticleEnsemble]


class ForwardRun(NamedTuple):
    states: np.ndarray
    path: Optional[QuantilePath]
    snapshots: Dict[float, np.ndarray]


def _threads(threads: Optional[int]) -> int:
    return config.WORKER_THREADS if threads is None else threads


def _start_time(init: Initial, t_start: Optional[float]) -> float:
    if t_start is not None:
        return float(t_start)
    return init.t if isinstance(init, ParticleEnsemble) else 0.0


def _initial_states(init: Initial, n: int, N: int, seed: int, stream: int,
                    threads: Optional[int]) -> np.ndarray:
    if isinstance(init, ParticleEnsemble):
        if init.N != N:
            raise ConfigurationError(f"initial ensemble has {init.N} particles, run asks for {N}", field="N")
        states = np.array(init.states, dtype=np.float64)
    else:
        def draw(b, sl, gen):
            size = sl.stop - sl.start
            return np.asarray(init.sampler(gen, size), dtype=np.float64).reshape(size, -1)
        with BlockScheduler(N, seed, initial_stream(stream), _threads(threads)) as scheduler:
            states = np.vstack(scheduler.map(draw))
    if states.shape != (N, n):
        raise ConfigurationError(f"initial states have shape {states.shape}, expected {(N, n)}", field="init")
    return states


def draw_initial(init: Initial, n: int, N: int, seed: int, stream: int = STREAM_FORWARD,
                 threads: Optional[int] = None) -> ParticleEnsemble:
    """Materialize the initial law as an ensemble at its start time"""
    if isinstance(init, ParticleEnsemble):
        return init
    states = _initial_states(init, n, N, seed, stream, threads)
    return ParticleEnsemble(states=states, t=0.0, seed=seed, stream=stream)


def _run_forward(spec: ModelSpec, omega: Optional[QuantilePath], init: Initial, t_start: float,
                 t_end: float, N: int, dt: float, seed: int, stream: int, threads: Optional[int],
                 record_every: Optional[int], snapshot_times: Sequence[float] = ()) -> ForwardRun:
    if N < 1 or dt <= 0.0:
        raise ConfigurationError("need N >= 1 and dt > 0", field="mc")
    if omega is not None and not (omega.covers(t_start) and omega.covers(t_end)):
        raise PathDomainError(
            f"simulation needs omega on [{t_start:.6g}, {t_end:.6g}], "
            f"path covers [{omega.t_start:.6g}, {omega.t_end:.6g}]"
        )
    coeffs = Coefficients(spec)
    alpha = spec.alpha
    steps, h = time_grid(t_start, t_end, dt)
    sqrt_h = np.sqrt(h)
    snap_index = {}
    for tau in snapshot_times:
        k = int(round((tau - t_start) / h)) if steps else 0
        snap_index.setdefault(min(max(k, 0), steps), []).append(float(tau))

    X = _initial_states(init, spec.n, N, seed, stream, threads)
    with BlockScheduler(N, seed, stream, _threads(threads)) as scheduler:
        node_times, node_values = [], []
        snapshots: Dict[float, np.ndarray] = {}

        def observe(k: int, s: float, y: Optional[np.ndarray]):
            if record_every and (k % record_every == 0 or k == steps):
                node_times.append(s)
                node_values.append(empirical_quantile(X, alpha) if y is None else y)
            for tau in snap_index.get(k, ()):
                snapshots[tau] = X.copy()

        y0 = None if omega is not None else empirical_quantile(X, alpha)
        observe(0, t_start, y0)
        for k in range(steps):
            s = t_start + k * h
            y = omega.at(s) if omega is not None else (y0 if k == 0 else empirical_quantile(X, alpha))

            def step(b, sl, gen, s=s, y=y):
                x = X[sl]
                dW = gen.standard_normal(x.shape[0]) * sqrt_h
                new = x + coeffs.F(s, y, x) * h
                new[:, 0] += coeffs.sigma(s, y, x) * dW
                X[sl] = new
                return int(np.count_nonzero(~np.isfinite(new).all(axis=1)))

            n_bad = sum(scheduler.map(step))
            if n_bad:
                raise SimulationBlowUpError(step=k + 1, time=s + h, n_bad=n_bad)
            observe(k + 1, t_start + (k + 1) * h, None)

    path = None
    if record_every:
        path = QuantilePath(times=np.array(node_times), values=np.vstack(node_values))
    return ForwardRun(states=X, path=path, snapshots=snapshots)


def simulate_auxiliary(spec: ModelSpec, omega: QuantilePath, init: Initial, t: float, N: int,
                       dt: float, seed: int, threads: Optional[int] = None,
                       stream: int = STREAM_FORWARD, t_start: Optional[float] = None,
                       record_every: Optional[int] = None) -> ParticleEnsemble:
    """
    Frozen-path simulation up to time t. With record_every set, the empirical
    quantile is recorded every that many steps and attached as `path`.
    """
    start = _start_time(init, t_start)
    logger.debug(f"Auxiliary run: N={N}, dt={dt}, seed={seed}, [{start:.4g}, {t:.4g}]")
    run = _run_forward(spec, omega, init, start, t, N, dt, seed, stream, threads, record_every)
    return ParticleEnsemble(states=run.states, t=t, seed=seed, dt=dt, stream=stream, path=run.path)


def simulate_snapshots(spec: ModelSpec, omega: Optional[QuantilePath], init: Initial,
                       times: Sequence[float], N: int, dt: float, seed: int,
                       threads: Optional[int] = None, stream: int = STREAM_FORWARD,
                       t_start: Optional[float] = None) -> Dict[float, ParticleEnsemble]:
    """Ensembles at each requested time (omega=None runs the self-consistent system)"""
    start = _start_time(init, t_start)
    times = sorted(float(s) for s in times)
    run = _run_forward(spec, omega, init, start, times[-1], N, dt, seed, stream, threads,
                       record_every=None, snapshot_times=times)
    return {
        s: ParticleEnsemble(states=run.snapshots[s], t=s, seed=seed, dt=dt, stream=stream)
        for s in times
    }


def simulate_mckean(spec: ModelSpec, init: Initial, t: float, N: int, dt: float, seed: int,
                    threads: Optional[int] = None, stream: int = STREAM_FORWARD,
                    record_every: int = 1):
    """Self-consistent simulation; returns the terminal ensemble and the recorded quantile path"""
    start = _start_time(init, None)
    logger.info(f"McKean-Vlasov run: N={N}, dt={dt}, seed={seed}, t={t:.4g}")
    run = _run_forward(spec, None, init, start, t, N, dt, seed, stream, threads, record_every)
    ensemble = ParticleEnsemble(states=run.states, t=t, seed=seed, dt=dt, stream=stream, path=run.path)
    return ensemble, run.path


def simulate_backward_fk(spec: ModelSpec, omega: QuantilePath, t: float, x, N: int, dt: float,
                         seed: int, threads: Optional[int] = None, stream: int = STREAM_FK,
                         with_jacobian: bool = False, with_c_gradient: bool = False) -> FKSamples:
    """
    dX_s = e_1 sigma(t-s, omega_{t-s}, X_s) dW_s + b(t-s, omega_{t-s}, X_s) ds, X_0 = x,
    with left-endpoint sums for the c-exponent and the grad-c term, and Euler
    steps of the variational equation for the Jacobian.
    """
    if t <= 0.0:
        raise ConfigurationError("backward Feynman-Kac time must be positive", field="t")
    if not (omega.covers(0.0) and omega.covers(t)):
        raise PathDomainError(f"Feynman-Kac at t={t:.6g} needs omega on [0, {t:.6g}]")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    n = spec.n
    coeffs = Coefficients(spec)
    steps, h = time_grid(0.0, t, dt)
    sqrt_h = np.sqrt(h)
    with_jacobian = with_jacobian or with_c_gradient

    def run_block(b, sl, gen):
        M = sl.stop - sl.start
        X = np.tile(x, (M, 1))
        E = np.zeros(M)
        J = np.broadcast_to(np.eye(n), (M, n, n)).copy() if with_jacobian else None
        G = np.zeros((M, n)) if with_c_gradient else None
        for k in range(steps):
            tau = t - k * h
            y = omega.at(tau)
            dW = gen.standard_normal(M) * sqrt_h
            c = coeffs.checked_c(tau, y, X)
            if G is not None:
                G += np.einsum("mi,mij->mj", coeffs.grad_c(tau, y, X), J) * h
            if J is not None:
                grad_b = coeffs.grad_b(tau, y, X)
                noise_row = np.einsum("mi,mij->mj", coeffs.grad_sigma(tau, y, X), J)
                J_new = J + (grad_b @ J) * h
                J_new[:, 0, :] += noise_row * dW[:, None]
            X_new = X + coeffs.b(tau, y, X) * h
            X_new[:, 0] += coeffs.sigma(tau, y, X) * dW
            if not np.all(np.isfinite(X_new)):
                raise SimulationBlowUpError(
                    step=k + 1, time=t - (k + 1) * h,
                    n_bad=int(np.count_nonzero(~np.isfinite(X_new).all(axis=1))),
                )
            E += c * h
            X = X_new
            if J is not None:
                J = J_new
        return X, E, J, G

    with BlockScheduler(N, seed, stream, _threads(threads)) as scheduler:
        blocks = scheduler.map(run_block)

    return FKSamples(
        x=x, t=t, dt=h, seed=seed,
        terminal=np.vstack([blk[0] for blk in blocks]),
        exponent=np.concatenate([blk[1] for blk in blocks]),
        jacobian=np.concatenate([blk[2] for blk in blocks]) if with_jacobian else None,
        c_grad_integral=np.concatenate([blk[3] for blk in blocks]) if with_c_gradient else None,
    )
