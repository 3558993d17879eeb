"""Reconstruction dynamics, fixed-step RK4 solver, and adjoint backward pass.

The reconstruction is the solution at t = T of

    dx/dt = f(x) = -lam * (gamma * A^T(A x - p) + mu * N_theta(x)),
    x(0)  = analytic reconstruction of p (FBP in 2D, FDK in 3D),

integrated with classic RK4 at fixed step h (S = T/h steps, 4 evaluations of
f per step).  Gradients for training come from the adjoint sensitivity
method: the augmented system

    dx/dt = f(x)                     (state, recomputed backward from x_T)
    da/dt = -(df/dx)^T a             (adjoint,  a(T) = dL/dx_T)
    dg_theta/dt = -(df/dtheta)^T a   (g(T) = 0)
    dg_gamma/dt = -(df/dgamma)^T a

is integrated from T down to 0 with the same RK4 scheme, yielding
a(0) = dL/dx0, g_theta(0) = dL/dtheta, g_gamma(0) = dL/dgamma.  No forward
trajectory is stored: the working set is a fixed handful of volume-sized
buffers (3 forward, 6 backward) regardless of S, which an AllocationProbe can
count.  The price of recomputation is a small reversibility error, measurable
by comparing the recovered x(0) against the true initializer.

The dynamics is autonomous; the solver still passes t to f so the test
harness can integrate time-dependent toy problems.
"""

from __future__ import annotations

import csv
import weakref
from dataclasses import dataclass, field

import numpy as np

from .analytic import fbp_fan, fdk_cone
from .errors import DivergenceError
from .geometry import VolumeGrid
from .network import NetParams, net_apply_array, net_vjp_array
from .projector import Sinogram, Volume, bind


@dataclass(frozen=True)
class OdeConfig:
    """Integration horizon, step size, and branch scalings.

    lam and mu default to 1: the trainable gamma and the network's own output
    scale absorb them.  t_end / step_size must be a whole number of steps.
    """

    t_end: float = 1.0
    step_size: float = 0.05
    lam: float = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if not self.t_end > 0:
            raise ValueError(f"t_end must be > 0, got {self.t_end}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        ratio = self.t_end / self.step_size
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(
                f"t_end / step_size = {ratio} is not a positive whole number of steps"
            )

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.step_size))


class AllocationProbe:
    """Counts live volume-sized working buffers the solver acquires.

    new() hands out arrays whose lifetimes are tracked via finalizers; peak
    is the highest simultaneous count, the quantity asserted to be step-count
    independent.
    """

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.total = 0

    def new(self, shape, dtype=np.float64) -> np.ndarray:
        arr = np.empty(shape, dtype)
        self.live += 1
        self.total += 1
        self.peak = max(self.peak, self.live)
        weakref.finalize(arr, self._release)
        return arr

    def _release(self):
        self.live -= 1


class _NullProbe:
    @staticmethod
    def new(shape, dtype=np.float64):
        return np.empty(shape, dtype)


_NULL_PROBE = _NullProbe()


@dataclass
class SolveLog:
    """Step/evaluation counters plus optional per-step rows for debugging."""

    n_steps: int = 0
    n_evals: int = 0
    rows: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "t", "x_norm", "f_norm", "residual_norm"])
            writer.writerows(self.rows)


def _check_finite(k: np.ndarray, step: int, x: np.ndarray):
    if not np.all(np.isfinite(k)):
        finite = x[np.isfinite(x)]
        max_abs = float(np.max(np.abs(finite), initial=0.0))
        raise DivergenceError(step, max_abs)


def rk4_solve(f, x0, cfg: OdeConfig, probe=None, capture=False):
    """Integrate dx/dt = f(x, t) from 0 to t_end with classic RK4.

    Parameters
    ----------
    f : callable(x, t) -> array_like
        The dynamics.  Called exactly 4 * n_steps times.
    x0 : Volume, ndarray, or float
        Initial state; the result has the same type.
    probe : AllocationProbe, optional
        Receives the solver's working-buffer allocations (3 buffers,
        regardless of step count).
    capture : bool
        Record per-step norms in the returned log.  When f has a
        residual_norm method it supplies the last column.

    Returns
    -------
    (x_T, SolveLog)
    """
    alloc = probe if probe is not None else _NULL_PROBE
    is_volume = isinstance(x0, Volume)
    scalar_input = np.isscalar(x0)
    x0_arr = np.asarray(x0.values if is_volume else x0, dtype=np.float64)

    x = alloc.new(x0_arr.shape)
    np.copyto(x, x0_arr)
    xt = alloc.new(x0_arr.shape)
    acc = alloc.new(x0_arr.shape)

    h = cfg.step_size
    log = SolveLog()
    residual_fn = getattr(f, "residual_norm", None)

    for step in range(cfg.n_steps):
        t = step * h
        if capture:
            res = float(residual_fn(x)) if residual_fn is not None else ""
            log.rows.append(
                [step, t, float(np.linalg.norm(x)), None, res]
            )

        k = np.asarray(f(x, t), dtype=np.float64)
        _check_finite(k, step, x)
        if capture:
            log.rows[-1][3] = float(np.linalg.norm(k))
        np.copyto(acc, k)
        np.multiply(k, h / 2.0, out=xt)
        xt += x

        k = np.asarray(f(xt, t + h / 2.0), dtype=np.float64)
        _check_finite(k, step, x)
        acc += k
        acc += k
        np.multiply(k, h / 2.0, out=xt)
        xt += x

        k = np.asarray(f(xt, t + h / 2.0), dtype=np.float64)
        _check_finite(k, step, x)
        acc += k
        acc += k
        np.multiply(k, h, out=xt)
        xt += x

        k = np.asarray(f(xt, t + h), dtype=np.float64)
        _check_finite(k, step, x)
        acc += k

        acc *= h / 6.0
        x += acc
        log.n_steps += 1
        log.n_evals += 4

    if capture:
        res = float(residual_fn(x)) if residual_fn is not None else ""
        log.rows.append(
            [cfg.n_steps, cfg.n_steps * h, float(np.linalg.norm(x)), "", res]
        )

    if is_volume:
        return Volume(x0.grid, x), log
    if scalar_input:
        return float(x), log
    return x, log


class NodeDynamics:
    """The reconstruction dynamics bound to one measurement, with VJPs.

    Callable as f(x, t) on bare arrays (t is ignored; the system is
    autonomous).  aug() evaluates the augmented backward rates.
    """

    def __init__(
        self,
        p: Sinogram,
        grid: VolumeGrid,
        params: NetParams,
        gamma: float,
        cfg: OdeConfig,
        pad_mode: str = "zeros",
    ):
        self.op = bind(p.geom, grid)
        self.grid = grid
        self.p_flat = p.values.reshape(-1).copy()
        self.params = params
        self.gamma = float(gamma)
        self.cfg = cfg
        self.pad_mode = pad_mode

    def __call__(self, x: np.ndarray, t: float = 0.0) -> np.ndarray:
        residual = self.op.forward(x) - self.p_flat
        dc = self.op.adjoint(residual)
        reg, _ = net_apply_array(self.params, x, self.pad_mode)
        return -self.cfg.lam * (self.gamma * dc + self.cfg.mu * reg)

    def residual_norm(self, x: np.ndarray) -> float:
        return float(np.linalg.norm(self.op.forward(x) - self.p_flat))

    def aug(self, x: np.ndarray, a: np.ndarray):
        """Backward-time rates (dx/dt, da/dt, dg_theta/dt, dg_gamma/dt).

        da/dt = -(df/dx)^T a = +lam (gamma A^T A a + mu (dN/dx)^T a);
        the g rates are -(df/d.)^T a so that integrating them from T down to
        0 with g(T) = 0 accumulates the true gradients.
        """
        lam, mu, gamma = self.cfg.lam, self.cfg.mu, self.gamma
        residual = self.op.forward(x) - self.p_flat
        dc = self.op.adjoint(residual)
        reg, tape = net_apply_array(self.params, x, self.pad_mode)
        fx = -lam * (gamma * dc + mu * reg)

        gtheta, gx_net = net_vjp_array(self.params, tape, a)
        fa = lam * (gamma * self.op.adjoint(self.op.forward(a)) + mu * gx_net)
        rate_theta = lam * mu * gtheta.flatten()
        rate_gamma = lam * float(dc.ravel() @ a.ravel())
        return fx, fa, rate_theta, rate_gamma


def dynamics(
    x: Volume, p: Sinogram, params: NetParams, gamma: float, cfg: OdeConfig
) -> Volume:
    """Evaluate dx/dt at one state; the right-hand side of the solve."""
    dyn = NodeDynamics(p, x.grid, params, gamma, cfg)
    return Volume(x.grid, dyn(x.values))


@dataclass
class AdjointResult:
    """Gradients from the backward pass, plus recomputation diagnostics."""

    grad_x0: Volume
    grad_params: NetParams
    grad_gamma: float
    x0_recovered: Volume
    n_evals: int


def adjoint_backward(
    f: NodeDynamics, x_T: Volume, dL_dxT: Volume, cfg: OdeConfig, probe=None
) -> AdjointResult:
    """Adjoint sensitivity method: integrate the augmented system T -> 0.

    f must be the NodeDynamics the forward solve used, with the same config;
    x_T its output.  Memory: six volume-sized working buffers regardless of
    the step count (the parameter-gradient accumulators are parameter-sized).
    """
    if f.cfg != cfg:
        raise ValueError("adjoint_backward config does not match the dynamics config")
    if x_T.values.shape != dL_dxT.values.shape:
        raise ValueError("dL_dxT shape does not match x_T")
    alloc = probe if probe is not None else _NULL_PROBE
    shape = x_T.values.shape

    x = alloc.new(shape)
    np.copyto(x, x_T.values)
    a = alloc.new(shape)
    np.copyto(a, dL_dxT.values)
    xt = alloc.new(shape)
    at = alloc.new(shape)
    acc_x = alloc.new(shape)
    acc_a = alloc.new(shape)

    n_theta = f.params.n_params
    g_theta = np.zeros(n_theta)
    acc_theta = np.zeros(n_theta)
    g_gamma = 0.0
    h = cfg.step_size
    n_evals = 0

    for step in reversed(range(cfg.n_steps)):
        kx, ka, kt, kg = f.aug(x, a)
        _check_finite(kx, step, x)
        _check_finite(ka, step, a)
        np.copyto(acc_x, kx)
        np.copyto(acc_a, ka)
        np.copyto(acc_theta, kt)
        acc_gamma = kg
        np.multiply(kx, -h / 2.0, out=xt)
        xt += x
        np.multiply(ka, -h / 2.0, out=at)
        at += a

        kx, ka, kt, kg = f.aug(xt, at)
        _check_finite(kx, step, x)
        _check_finite(ka, step, a)
        acc_x += kx
        acc_x += kx
        acc_a += ka
        acc_a += ka
        acc_theta += kt
        acc_theta += kt
        acc_gamma += 2.0 * kg
        np.multiply(kx, -h / 2.0, out=xt)
        xt += x
        np.multiply(ka, -h / 2.0, out=at)
        at += a

        kx, ka, kt, kg = f.aug(xt, at)
        _check_finite(kx, step, x)
        _check_finite(ka, step, a)
        acc_x += kx
        acc_x += kx
        acc_a += ka
        acc_a += ka
        acc_theta += kt
        acc_theta += kt
        acc_gamma += 2.0 * kg
        np.multiply(kx, -h, out=xt)
        xt += x
        np.multiply(ka, -h, out=at)
        at += a

        kx, ka, kt, kg = f.aug(xt, at)
        _check_finite(kx, step, x)
        _check_finite(ka, step, a)
        acc_x += kx
        acc_a += ka
        acc_theta += kt
        acc_gamma += kg

        acc_x *= h / 6.0
        x -= acc_x
        acc_a *= h / 6.0
        a -= acc_a
        g_theta -= (h / 6.0) * acc_theta
        g_gamma -= (h / 6.0) * acc_gamma
        n_evals += 4

    grid = x_T.grid
    return AdjointResult(
        grad_x0=Volume(grid, a),
        grad_params=NetParams.from_flat(f.params.arch, g_theta),
        grad_gamma=float(g_gamma),
        x0_recovered=Volume(grid, x),
        n_evals=n_evals,
    )


def initial_volume(p: Sinogram, grid: VolumeGrid, window: str = "ram-lak") -> Volume:
    """The ODE initial value x0: FBP for fan data, FDK for cone data."""
    if grid.ndim == 2:
        return fbp_fan(p, grid, window)
    return fdk_cone(p, grid, window)


def reconstruct_node(
    p: Sinogram,
    grid: VolumeGrid,
    params: NetParams,
    gamma: float,
    cfg: OdeConfig,
    window: str = "ram-lak",
    probe=None,
    log_path=None,
) -> Volume:
    """Full learned reconstruction: analytic initializer, then the ODE solve."""
    x0 = initial_volume(p, grid, window)
    dyn = NodeDynamics(p, grid, params, gamma, cfg)
    x_T, log = rk4_solve(dyn, x0, cfg, probe=probe, capture=log_path is not None)
    if log_path is not None:
        log.to_csv(log_path)
    return x_T
