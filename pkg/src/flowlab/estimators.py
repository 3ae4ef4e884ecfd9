"""Monte Carlo functionals over the flow and its derivative: moment
estimates and bound checks, two gradient estimators (stochastic-integral
weight vs common-random-number finite differences), approximation-family
convergence gaps, integration-by-parts residuals, occupation-measure ratio
checks, and Holder-modulus tables.

All estimators are deterministic functions of (inputs, master_seed): paths
are keyed by path index, chunk boundaries are fixed, and reductions run in
path-index order, so results are bit-identical across reruns and worker
counts.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .approximation import MollifiedFamily
from .coefficients import (
    CoefficientSystem,
    solve_spd,
    sym_eig_range,
    theta_g,
    ThetaBound,
)
from .engine import (
    BatchEuler,
    IntegratorConfig,
    exp_representation_terms,
    gaussian_increments,
    increments_block,
)

__all__ = [
    "EstimateReport",
    "MomentWindow",
    "PAYOFFS",
    "SmoothBump",
    "derivative_moment",
    "flow_moment_bound_check",
    "bel_gradient",
    "fd_gradient",
    "family_convergence",
    "ibp_residual",
    "krylov_check",
    "holder_modulus",
    "exp_representation_gaps",
    "CSV_HEADER",
    "csv_row",
]

CHUNK_PATHS = 4096
UNRELIABLE_FRACTION = 1e-3


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with Monte Carlo standard error and run bookkeeping."""

    value: float
    std_error: float
    n_paths: int
    h: float
    notes: dict

    @property
    def unreliable(self) -> bool:
        return bool(self.notes.get("unreliable", False))


@dataclass(frozen=True)
class MomentWindow:
    """Horizon kappa(p)/(d+2) on which the derivative moment bound is claimed."""

    p: float
    T0: float
    source: str

    @classmethod
    def for_system(cls, system: CoefficientSystem, p: float) -> "MomentWindow":
        kap = system.constants.kappa(p)
        return cls(p=p, T0=kap / (system.d + 2),
                   source=f"kappa={system.constants.kappa_label}")


PAYOFFS = {
    "identity": lambda x: x[..., 0],
    "sin": lambda x: np.sin(x[..., 0]),
    "gauss": lambda x: np.exp(-np.sum(x * x, axis=-1)),
    "constant": lambda x: np.ones(x.shape[:-1]),
}


def _chunk_ranges(n_paths: int, chunk: int = CHUNK_PATHS):
    return [(a, min(a + chunk, n_paths)) for a in range(0, n_paths, chunk)]

def _run_chunks(fn, n_paths: int, workers: int = 1, chunk: int = CHUNK_PATHS):
    """Map fn over fixed path ranges; order of results is by path index."""
    ranges = _chunk_ranges(n_paths, chunk)
    if workers > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda ab: fn(*ab), ranges))
    return [fn(a, b) for a, b in ranges]


def _tile(vec, n: int) -> np.ndarray:
    return np.tile(np.asarray(vec, dtype=float), (n, 1))


def _finish(samples: np.ndarray, ok: np.ndarray, n_paths: int, h: float,
            notes: dict) -> EstimateReport:
    n_bad = int(n_paths - np.sum(ok))
    notes = dict(notes)
    notes["n_excluded"] = n_bad
    notes["unreliable"] = n_bad > UNRELIABLE_FRACTION * n_paths
    good = samples[ok]
    if good.size == 0:
        return EstimateReport(math.nan, math.nan, n_paths, h, notes)
    value = float(np.mean(good))
    se = float(np.std(good, ddof=1) / math.sqrt(good.size)) if good.size > 1 else 0.0
    return EstimateReport(value, se, n_paths, h, notes)


# ---------------------------------------------------------------------------
# moments

def derivative_moment(system: CoefficientSystem, x, v, p: float, t: float,
                      n_paths: int, cfg: IntegratorConfig, master_seed: int = 0,
                      workers: int = 1) -> EstimateReport:
    """Mean of |v_t|^p across paths.

    The moment bound is only claimed for t inside the window T0(p); outside it
    the estimate is still returned with a window_exceeded note.
    """
    cfg_t = cfg.with_horizon(t)
    n_steps = cfg_t.n_steps

    def run(a, b):
        n = b - a
        dws = increments_block(master_seed, a, n, n_steps, cfg_t.h, system.m)
        drv = BatchEuler(system, _tile(x, n), _tile(v, n), dws, cfg_t).run()
        ok = ~drv.failed & ~drv.exploded
        vals = np.sum(drv.v**2, axis=-1) ** (p / 2.0)
        return vals, ok, int(np.sum(drv.clamped)), int(np.sum(drv.exploded))

    parts = _run_chunks(run, n_paths, workers)
    samples = np.concatenate([p_[0] for p_ in parts])
    ok = np.concatenate([p_[1] for p_ in parts])
    window = MomentWindow.for_system(system, p)
    notes = {
        "clamped_steps": sum(p_[2] for p_ in parts),
        "n_exploded": sum(p_[3] for p_ in parts),
        "window_T0": window.T0,
        "window_exceeded": t > window.T0 + 1e-12,
    }
    return _finish(samples, ok, n_paths, cfg_t.h, notes)


@dataclass(frozen=True)
class BoundCheckpoint:
    t: float
    lhs: float
    std_error: float
    rhs: float
    passed: bool


@dataclass(frozen=True)
class FlowBoundReport:
    checkpoints: tuple[BoundCheckpoint, ...]
    theta: ThetaBound
    lam: float
    n_paths: int
    all_passed: bool


def flow_moment_bound_check(system: CoefficientSystem, x, lam: float, T: float,
                            n_paths: int, cfg: IntegratorConfig,
                            n_checkpoints: int = 10, master_seed: int = 0,
                            workers: int = 1, theta_box: float = 50.0,
                            theta_points: int | None = None) -> FlowBoundReport:
    """Empirical E(1+|F_t|^2)^lam against (1+|x|^2)^lam e^{lam Theta t}.

    Theta is the grid maximum of the log-energy drift functional; each
    checkpoint passes when the empirical mean does not exceed the bound by
    more than three standard errors.
    """
    cfg_t = cfg.with_horizon(T)
    n_steps = cfg_t.n_steps
    check_steps = [max(1, round((j + 1) * n_steps / n_checkpoints))
                   for j in range(n_checkpoints)]

    def run(a, b):
        n = b - a
        dws = increments_block(master_seed, a, n, n_steps, cfg_t.h, system.m)
        drv = BatchEuler(system, _tile(x, n), _tile(np.zeros(system.d), n),
                         dws, cfg_t)
        vals = np.empty((n, n_checkpoints))
        for s in range(n_steps):
            drv.advance()
            # a step may serve several checkpoints when n_steps is small
            for j, cs in enumerate(check_steps):
                if s + 1 == cs:
                    vals[:, j] = (1.0 + np.sum(drv.x**2, axis=-1)) ** lam
        ok = ~drv.failed & ~drv.exploded
        return vals, ok

    parts = _run_chunks(run, n_paths, workers)
    vals = np.concatenate([p_[0] for p_ in parts])
    ok = np.concatenate([p_[1] for p_ in parts])
    theta = theta_g(system, lam, box=theta_box, n_points=theta_points)
    base = (1.0 + float(np.sum(np.asarray(x, dtype=float) ** 2))) ** lam
    rows = []
    for j, cs in enumerate(check_steps):
        t_j = cs * cfg_t.h
        good = vals[ok, j]
        lhs = float(np.mean(good))
        se = float(np.std(good, ddof=1) / math.sqrt(good.size))
        rhs = base * math.exp(lam * theta.value * t_j)
        rows.append(BoundCheckpoint(t=t_j, lhs=lhs, std_error=se, rhs=rhs,
                                    passed=lhs <= rhs + 3.0 * se))
    return FlowBoundReport(checkpoints=tuple(rows), theta=theta, lam=lam,
                           n_paths=n_paths, all_passed=all(r.passed for r in rows))


# ---------------------------------------------------------------------------
# gradients

def bel_gradient(system: CoefficientSystem, x, v, f, t: float, n_paths: int,
                 cfg: IntegratorConfig, master_seed: int = 0, workers: int = 1,
                 cond_max: float = 1e12) -> EstimateReport:
    """Gradient of E f(F_t(x)) along v via the stochastic-integral weight.

    Per path accumulates S = sum_s <Y(x_s)(v_s), dW_s> with the left-point
    Ito discretization and Y = Sigma^T A^{-1}, and returns the mean of
    f(x_t) S / t. Paths whose diffusion matrix fails the condition-number
    gate at any step are excluded and counted; a run with more than 0.1%
    exclusions is flagged unreliable.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    cfg_t = cfg.with_horizon(t)
    n_steps = cfg_t.n_steps

    def run(a, b):
        n = b - a
        dws = increments_block(master_seed, a, n, n_steps, cfg_t.h, system.m)
        drv = BatchEuler(system, _tile(x, n), _tile(v, n), dws, cfg_t)
        s_acc = np.zeros(n)
        gated = np.zeros(n, dtype=bool)
        for _, xs, vs, dw, active in drv.steps():
            sig = system.sigma(xs)
            a_mat = np.einsum("nik,njk->nij", sig, sig)
            lo, hi = sym_eig_range(a_mat)
            bad = ~(lo > 0.0) | (hi > cond_max * lo)
            gated |= bad & active
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                z = solve_spd(a_mat, vs)
                y = np.einsum("nik,ni->nk", sig, z)
                contrib = np.einsum("nk,nk->n", y, dw)
            s_acc += np.where(active & ~bad, contrib, 0.0)
        ok = ~drv.failed & ~drv.exploded & ~gated
        with np.errstate(invalid="ignore"):
            samples = np.where(ok, f(drv.x) * s_acc / t, 0.0)
        return samples, ok, int(np.sum(gated)), int(np.sum(drv.clamped))

    parts = _run_chunks(run, n_paths, workers)
    samples = np.concatenate([p_[0] for p_ in parts])
    ok = np.concatenate([p_[1] for p_ in parts])
    notes = {"gate_failures": sum(p_[2] for p_ in parts),
             "clamped_steps": sum(p_[3] for p_ in parts)}
    return _finish(samples, ok, n_paths, cfg_t.h, notes)


def fd_gradient(system: CoefficientSystem, x, v, f, t: float, n_paths: int,
                delta: float, cfg: IntegratorConfig, master_seed: int = 0,
                workers: int = 1) -> EstimateReport:
    """Central-difference gradient (P_t f(x + delta v) - P_t f(x - delta v))
    / (2 delta) with common random numbers: both endpoints of each path index
    consume identical increments."""
    if delta <= 0:
        raise ValueError("bump size delta must be positive")
    cfg_t = cfg.with_horizon(t)
    n_steps = cfg_t.n_steps
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)

    def run(a, b):
        n = b - a
        dws = increments_block(master_seed, a, n, n_steps, cfg_t.h, system.m)
        zero_v = np.zeros((n, system.d))
        up = BatchEuler(system, _tile(x + delta * v, n), zero_v, dws, cfg_t).run()
        dn = BatchEuler(system, _tile(x - delta * v, n), zero_v, dws, cfg_t).run()
        ok = ~up.failed & ~up.exploded & ~dn.failed & ~dn.exploded
        samples = (f(up.x) - f(dn.x)) / (2.0 * delta)
        return samples, ok

    parts = _run_chunks(run, n_paths, workers)
    samples = np.concatenate([p_[0] for p_ in parts])
    ok = np.concatenate([p_[1] for p_ in parts])
    return _finish(samples, ok, n_paths, cfg_t.h, {"delta": delta})


# ---------------------------------------------------------------------------
# approximation-family convergence

@dataclass(frozen=True)
class ConvergenceRow:
    eps: float
    eps_next: float
    gap_flow: float
    se_flow: float
    gap_derivative: float
    se_derivative: float


def family_convergence(fam: MollifiedFamily, eps_list, x, v, T: float,
                       n_paths: int, cfg: IntegratorConfig,
                       master_seed: int = 0,
                       workers: int = 1) -> list[ConvergenceRow]:
    """Common-noise sup-norm gaps between consecutive family members.

    eps_list must be sorted descending and lie inside (0, eps0); the finest
    member acts as the limit proxy. For each consecutive pair the mean over
    paths of sup_t |F^eps - F^eps'| and sup_t |V^eps - V^eps'| on the step
    grid is reported.
    """
    eps_list = [float(e) for e in eps_list]
    if sorted(eps_list, reverse=True) != eps_list:
        raise ValueError("eps_list must be sorted descending")
    members = [fam.member(e) for e in eps_list]
    cfg_t = cfg.with_horizon(T)
    n_steps = cfg_t.n_steps
    n_pairs = len(members) - 1

    def run(a, b):
        n = b - a
        dws = increments_block(master_seed, a, n, n_steps, cfg_t.h, fam.base.m)
        drivers = [BatchEuler(mem, _tile(x, n), _tile(v, n), dws, cfg_t)
                   for mem in members]
        sup_f = np.zeros((n, n_pairs))
        sup_v = np.zeros((n, n_pairs))
        for _ in range(n_steps):
            for drv in drivers:
                drv.advance()
            for j in range(n_pairs):
                gap_f = np.linalg.norm(drivers[j].x - drivers[j + 1].x, axis=-1)
                gap_v = np.linalg.norm(drivers[j].v - drivers[j + 1].v, axis=-1)
                sup_f[:, j] = np.maximum(sup_f[:, j], gap_f)
                sup_v[:, j] = np.maximum(sup_v[:, j], gap_v)
        ok = np.ones(n, dtype=bool)
        for drv in drivers:
            ok &= ~drv.failed & ~drv.exploded
        return sup_f, sup_v, ok

    parts = _run_chunks(run, n_paths, workers)
    sup_f = np.concatenate([p_[0] for p_ in parts])
    sup_v = np.concatenate([p_[1] for p_ in parts])
    ok = np.concatenate([p_[2] for p_ in parts])
    rows = []
    for j in range(n_pairs):
        gf, gv = sup_f[ok, j], sup_v[ok, j]
        rows.append(ConvergenceRow(
            eps=eps_list[j], eps_next=eps_list[j + 1],
            gap_flow=float(np.mean(gf)),
            se_flow=float(np.std(gf, ddof=1) / math.sqrt(gf.size)),
            gap_derivative=float(np.mean(gv)),
            se_derivative=float(np.std(gv, ddof=1) / math.sqrt(gv.size))))
    return rows


# ---------------------------------------------------------------------------
# integration by parts

class SmoothBump:
    """Compactly supported test function exp(1/((|x|/radius)^2 - 1)) with
    analytic partial derivatives; vanishes with all derivatives at |x|=radius."""

    def __init__(self, radius: float, center=None, d: int = 2):
        self.radius = float(radius)
        self.center = np.zeros(d) if center is None else np.asarray(center,
                                                                    dtype=float)
        self.d = d

    def value(self, x: np.ndarray) -> np.ndarray:
        u2 = np.sum((x - self.center) ** 2, axis=-1) / self.radius**2
        inside = u2 < 1.0
        return np.where(inside,
                        np.exp(1.0 / np.where(inside, u2 - 1.0, -1.0)), 0.0)

    def partial(self, x: np.ndarray, i: int) -> np.ndarray:
        z = x - self.center
        u2 = np.sum(z * z, axis=-1) / self.radius**2
        inside = u2 < 1.0
        denom = np.where(inside, u2 - 1.0, -1.0)
        return np.where(
            inside,
            np.exp(1.0 / denom) * (-1.0 / denom**2)
            * (2.0 * z[..., i] / self.radius**2), 0.0)


@dataclass(frozen=True)
class IbpReport:
    mean_residual: float
    max_residual: float
    per_omega: tuple[float, ...]
    n_grid: int
    h: float


def ibp_residual(system: CoefficientSystem, t: float, box: float, n_grid: int,
                 phi: SmoothBump, i_coord: int, n_omega: int,
                 cfg: IntegratorConfig, master_seed: int = 0) -> IbpReport:
    """Residual of the pathwise integration-by-parts identity.

    For each noise draw omega the whole grid of starts shares one increment
    sequence. The residual per output component j is
    | sum w dphi_i(x) F_t^j(x) + sum w phi(x) V_t^j(x, e_i) |
    over the uniform grid on [-box, box]^d; the report carries the mean and
    max over omega of the worst component.
    """
    cfg_t = cfg.with_horizon(t)
    n_steps = cfg_t.n_steps
    d = system.d
    axis = np.linspace(-box, box, n_grid)
    spacing = axis[1] - axis[0]
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    starts = np.stack([g.reshape(-1) for g in mesh], axis=-1)
    weight = spacing**d
    phi_vals = phi.value(starts)
    dphi_vals = phi.partial(starts, i_coord)
    e_i = np.zeros(d)
    e_i[i_coord] = 1.0
    residuals = []
    for omega in range(n_omega):
        dws = gaussian_increments(master_seed, omega, n_steps, cfg_t.h,
                                  system.m)[None]
        drv = BatchEuler(system, starts, _tile(e_i, len(starts)), dws,
                         cfg_t).run()
        worst = 0.0
        for j in range(d):
            r = abs(weight * float(np.sum(dphi_vals * drv.x[:, j]))
                    + weight * float(np.sum(phi_vals * drv.v[:, j])))
            worst = max(worst, r)
        residuals.append(worst)
    return IbpReport(mean_residual=float(np.mean(residuals)),
                     max_residual=float(np.max(residuals)),
                     per_omega=tuple(residuals), n_grid=n_grid, h=cfg_t.h)


# ---------------------------------------------------------------------------
# occupation-measure (Krylov-type) ratio

@dataclass(frozen=True)
class KrylovReport:
    lhs: float
    lhs_std_error: float
    a_hat: float
    b_hat: float
    f_norm: float
    rhs_shape: float
    ratio: float
    cd: float
    n_paths: int

    @property
    def rhs(self) -> float:
        return self.cd * self.rhs_shape


def _ball_volume(d: int, radius: float) -> float:
    return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0) * radius**d


def krylov_check(system: CoefficientSystem, x, T: float, R: float,
                 n_paths: int, cfg: IntegratorConfig, f=None,
                 f_norm: float | None = None, master_seed: int = 0,
                 workers: int = 1, cd: float = 1.0) -> KrylovReport:
    """Occupation-measure estimate against its growth-shaped majorant.

    lhs estimates E int_0^{T ^ tau_R} f(t, F_t - x) det(A(F_t))^{1/(d+1)} dt
    where tau_R is the exit time of the recentered flow from the R-ball; the
    majorant shape is e^T (A_hat + B_hat^2)^{d/(2(d+1))} ||f||_{d+1} with
    A_hat, B_hat the mean occupation integrals of tr A and |X_0|. The
    dimensional constant is not constructive, so the report carries the ratio
    lhs / shape from which any constant can be read off.
    """
    d = system.d
    if f is None:
        f = lambda ts, xs: np.ones(xs.shape[:-1])
        if f_norm is None:
            f_norm = (T * _ball_volume(d, R)) ** (1.0 / (d + 1))
    if f_norm is None:
        raise ValueError("custom f requires its cylinder L^{d+1} norm f_norm")
    cfg_t = cfg.with_horizon(T)
    n_steps = cfg_t.n_steps
    x_arr = np.asarray(x, dtype=float)
    power = 1.0 / (d + 1)

    def run(a, b):
        n = b - a
        dws = increments_block(master_seed, a, n, n_steps, cfg_t.h, system.m)
        drv = BatchEuler(system, _tile(x_arr, n), np.zeros((n, d)), dws, cfg_t)
        lhs_acc = np.zeros(n)
        a_acc = np.zeros(n)
        b_acc = np.zeros(n)
        inside = np.ones(n, dtype=bool)
        for s, xs, _, _, active in drv.steps():
            recentered = xs - x_arr
            inside &= np.linalg.norm(recentered, axis=-1) <= R
            live = inside & active
            if not np.any(live):
                break
            sig = system.sigma(xs)
            a_mat = np.einsum("nik,njk->nij", sig, sig)
            det = _det_spd(a_mat)
            fv = f(s * cfg_t.h, recentered)
            lhs_acc += np.where(live, fv * det**power * cfg_t.h, 0.0)
            a_acc += np.where(live,
                              np.trace(a_mat, axis1=-2, axis2=-1) * cfg_t.h, 0.0)
            b_acc += np.where(live,
                              np.linalg.norm(system.value(0, xs), axis=-1)
                              * cfg_t.h, 0.0)
        ok = ~drv.failed
        return lhs_acc, a_acc, b_acc, ok

    parts = _run_chunks(run, n_paths, workers)
    lhs_all = np.concatenate([p_[0] for p_ in parts])
    a_all = np.concatenate([p_[1] for p_ in parts])
    b_all = np.concatenate([p_[2] for p_ in parts])
    ok = np.concatenate([p_[3] for p_ in parts])
    lhs = float(np.mean(lhs_all[ok]))
    lhs_se = float(np.std(lhs_all[ok], ddof=1) / math.sqrt(np.sum(ok)))
    a_hat = float(np.mean(a_all[ok]))
    b_hat = float(np.mean(b_all[ok]))
    shape = math.exp(T) * (a_hat + b_hat**2) ** (d / (2.0 * (d + 1))) * f_norm
    ratio = lhs / shape if shape > 0.0 else math.nan
    return KrylovReport(lhs=lhs, lhs_std_error=lhs_se, a_hat=a_hat,
                        b_hat=b_hat, f_norm=f_norm, rhs_shape=shape,
                        ratio=ratio, cd=cd, n_paths=n_paths)


def _det_spd(a: np.ndarray) -> np.ndarray:
    d = a.shape[-1]
    if d == 1:
        return a[..., 0, 0]
    if d == 2:
        return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    return np.linalg.det(a)


# ---------------------------------------------------------------------------
# Holder modulus

@dataclass(frozen=True)
class HolderRow:
    x: tuple
    y: tuple
    separation: float
    ratio: float
    std_error: float


def holder_modulus(system: CoefficientSystem, pairs, p: float, t: float,
                   n_paths: int, cfg: IntegratorConfig, master_seed: int = 0,
                   workers: int = 1) -> list[HolderRow]:
    """E |F_t(x) - F_t(y)|^p / |x - y|^p per pair, common noise throughout.

    A locally uniform bound across pairs at fixed radius is the sampled form
    of the Lipschitz-in-mean estimate; the same increments are reused across
    pairs so that ratio comparisons are low-noise.
    """
    cfg_t = cfg.with_horizon(t)
    n_steps = cfg_t.n_steps
    rows = []
    for x, y in pairs:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        sep = float(np.linalg.norm(x - y))
        if sep == 0.0:
            raise ValueError("pair points must be distinct")

        def run(a, b):
            n = b - a
            dws = increments_block(master_seed, a, n, n_steps, cfg_t.h,
                                   system.m)
            zero_v = np.zeros((n, system.d))
            fx = BatchEuler(system, _tile(x, n), zero_v, dws, cfg_t).run()
            fy = BatchEuler(system, _tile(y, n), zero_v, dws, cfg_t).run()
            ok = ~fx.failed & ~fx.exploded & ~fy.failed & ~fy.exploded
            gap = np.linalg.norm(fx.x - fy.x, axis=-1) ** p
            return gap, ok

        parts = _run_chunks(run, n_paths, workers)
        gaps = np.concatenate([p_[0] for p_ in parts])
        ok = np.concatenate([p_[1] for p_ in parts])
        good = gaps[ok] / sep**p
        rows.append(HolderRow(
            x=tuple(map(float, x)), y=tuple(map(float, y)), separation=sep,
            ratio=float(np.mean(good)),
            std_error=float(np.std(good, ddof=1) / math.sqrt(good.size))))
    return rows


# ---------------------------------------------------------------------------
# exponential representation at scale

def exp_representation_gaps(system: CoefficientSystem, x, v, p: float,
                            T: float, n_paths: int, cfg: IntegratorConfig,
                            master_seed: int = 0,
                            workers: int = 1) -> np.ndarray:
    """Per-path relative gap between |v_T|^p and its exponential
    reconstruction, batched version of the single-trajectory check."""
    cfg_t = cfg.with_horizon(T)
    n_steps = cfg_t.n_steps
    v0_norm = float(np.linalg.norm(v))

    def run(a, b):
        n = b - a
        dws = increments_block(master_seed, a, n, n_steps, cfg_t.h, system.m)
        drv = BatchEuler(system, _tile(x, n), _tile(v, n), dws, cfg_t)
        m_acc = np.zeros(n)
        q_acc = np.zeros(n)
        a_acc = np.zeros(n)
        for _, xs, vs, dw, _ in drv.steps():
            dm, dq, da = exp_representation_terms(system, xs, vs, dw, cfg_t.h,
                                                  p, cfg_t.r_min)
            m_acc += dm
            q_acc += dq
            a_acc += da
        direct = np.sum(drv.v**2, axis=-1) ** (p / 2.0)
        recon = v0_norm**p * np.exp(m_acc - 0.5 * q_acc + a_acc)
        ok = ~drv.failed & ~drv.exploded
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.abs(direct - recon) / np.abs(direct)
        return rel, ok

    parts = _run_chunks(run, n_paths, workers)
    rel = np.concatenate([p_[0] for p_ in parts])
    ok = np.concatenate([p_[1] for p_ in parts])
    return rel[ok]


# ---------------------------------------------------------------------------
# CSV serialization

CSV_HEADER = "estimator,system,params_hash,t,value,std_error,n_paths,h,flags"


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def csv_row(estimator: str, system: str, params_hash: str, t: float,
            value: float, std_error: float, n_paths: int, h: float,
            flags: dict) -> str:
    """One fixed-order CSV line; floats print as shortest round-trip decimals."""
    tokens = []
    if "seed" in flags:
        tokens.append(f"seed={_fmt(flags['seed'])}")
    for key in sorted(k for k in flags if k != "seed"):
        val = flags[key]
        if isinstance(val, bool):
            if val:
                tokens.append(key)
        else:
            tokens.append(f"{key}={_fmt(val)}")
    return ",".join([estimator, system, params_hash, _fmt(t), _fmt(value),
                     _fmt(std_error), str(n_paths), _fmt(h),
                     ";".join(tokens)])
