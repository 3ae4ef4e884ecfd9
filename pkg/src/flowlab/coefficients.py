"""Coefficient systems: vector fields, Jacobians, spectral and growth diagnostics.

A coefficient system holds the drift field (index 0) and the m diffusion
fields (indices 1..m) of an Ito equation, together with the growth/ellipticity
constants used by the sampled condition checker. All field evaluations are
NumPy-vectorized over leading batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .errors import (
    NearSingularDiffusionError,
    ParameterConstraintError,
    SingularPointError,
)
from .quadrature import midpoint_ball_rule, sphere_points

__all__ = [
    "AssumptionConstants",
    "OriginPolicy",
    "CoefficientSystem",
    "SpectralReport",
    "ThetaBound",
    "CheckSpec",
    "ConditionReport",
    "make_system",
    "builtin",
    "diffusion_matrix",
    "right_inverse_apply",
    "kp_max",
    "theta_g",
    "check_assumptions",
    "fd_jacobian",
    "sym_eig_range",
    "BUILTIN_NAMES",
]

DEFAULT_COND_MAX = 1e12
DEFAULT_H_FD = 1e-5
DEFAULT_R_MIN = 1e-6


def _default_kappa(p: float) -> float:
    return 1.0 / p


@dataclass(frozen=True)
class AssumptionConstants:
    """Growth/ellipticity constants attached to a coefficient system.

    p1: ellipticity decay exponent, p2: field growth, p3/p4: Sobolev exponents
    for diffusion/drift, p5: Jacobian growth outside R1. kappa maps a moment
    order p to the exponential-integrability budget kappa(p) > 0.
    """

    p1: float
    p2: float
    p3: float
    p4: float
    p5: float
    C1: float
    C2: float
    C3: float
    R1: float
    delta: float = 1.0
    kappa: Callable[[float], float] = _default_kappa
    kappa_label: str = "1/p"

    def validate(self, d: int) -> None:
        for name in ("p1", "p2", "p3", "p4", "p5", "C1", "C2", "C3", "R1"):
            if getattr(self, name) <= 0:
                raise ValueError(f"constant {name} must be strictly positive")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0, 1]")
        if self.p3 <= 2 * (d + 1):
            raise ValueError(f"p3 must exceed 2(d+1) = {2 * (d + 1)}")
        if self.p4 <= d + 1:
            raise ValueError(f"p4 must exceed d+1 = {d + 1}")


@dataclass(frozen=True)
class OriginPolicy:
    """How to treat declared singular points of the Jacobians.

    Jacobian queries strictly inside radius r_min raise SingularPointError;
    the integrator clamps to the r_min sphere instead (and counts the clamp).
    """

    r_min: float = 0.0
    note: str = ""

    @property
    def singular(self) -> bool:
        return self.r_min > 0.0


@dataclass(frozen=True)
class CoefficientSystem:
    """Drift X_0 and diffusion fields X_1..X_m with their Jacobians.

    value_fn(k, x) returns X_k(x) for x of shape (..., d); jacobian_fn(k, x)
    returns the (..., d, d) matrix DX_k(x). jacobian_analytic records whether
    jacobian_fn is closed-form or finite-difference based.
    """

    name: str
    d: int
    m: int
    value_fn: Callable[[int, np.ndarray], np.ndarray]
    jacobian_fn: Callable[[int, np.ndarray], np.ndarray]
    constants: AssumptionConstants
    jacobian_analytic: bool = True
    origin_policy: OriginPolicy = OriginPolicy()
    params: Mapping[str, float] = field(default_factory=dict)
    # optional batched fast paths sharing work across the m+1 fields;
    # must agree with value_fn/jacobian_fn pointwise
    fields_fn: Callable[[np.ndarray], tuple] | None = None
    jacobians_fn: Callable[[np.ndarray], np.ndarray] | None = None

    def _check_k(self, k: int) -> None:
        if not 0 <= k <= self.m:
            raise IndexError(f"field index {k} outside 0..{self.m}")

    def value(self, k: int, x: np.ndarray) -> np.ndarray:
        self._check_k(k)
        x = np.asarray(x, dtype=float)
        return self.value_fn(k, x)

    def jacobian(self, k: int, x: np.ndarray) -> np.ndarray:
        """DX_k(x); raises SingularPointError inside the declared singular set."""
        self._check_k(k)
        x = np.asarray(x, dtype=float)
        if self.origin_policy.singular:
            r = np.linalg.norm(x, axis=-1)
            if np.any(r < self.origin_policy.r_min):
                raise SingularPointError(
                    f"{self.name}: Jacobian undefined for |x| < "
                    f"{self.origin_policy.r_min:g} (got |x|={np.min(r):.3e})")
        return self.jacobian_fn(k, x)

    def jacobian_clamped(self, k: int, x: np.ndarray) -> np.ndarray:
        """DX_k at x, with points inside r_min moved out to the r_min sphere.

        Exact origin points are moved along e_1. Used by the integrator; the
        caller is responsible for counting how often the clamp engaged.
        """
        x = np.asarray(x, dtype=float)
        r_min = self.origin_policy.r_min
        if not self.origin_policy.singular:
            return self.jacobian_fn(k, x)
        return self.jacobian_fn(k, clamp_to_radius(x, r_min))

    def drift(self, x: np.ndarray) -> np.ndarray:
        return self.value(0, x)

    def sigma(self, x: np.ndarray) -> np.ndarray:
        """The (..., d, m) matrix whose columns are X_1(x)..X_m(x)."""
        return self.fields(x)[1]

    def fields(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(drift, sigma) = (X_0(x), [X_1(x)..X_m(x)]) in one call."""
        x = np.asarray(x, dtype=float)
        if self.fields_fn is not None:
            return self.fields_fn(x)
        drift = self.value_fn(0, x)
        cols = [self.value_fn(k, x) for k in range(1, self.m + 1)]
        return drift, np.stack(cols, axis=-1)

    def jacobians_stacked(self, x: np.ndarray) -> np.ndarray:
        """All Jacobians as (..., m+1, d, d) with the drift at index 0.

        No singular-set guard: integrator paths clamp their evaluation points
        first; use jacobian() for guarded single-field access.
        """
        x = np.asarray(x, dtype=float)
        if self.jacobians_fn is not None:
            return self.jacobians_fn(x)
        mats = [self.jacobian_fn(k, x) for k in range(self.m + 1)]
        return np.stack(mats, axis=-3)


def clamp_to_radius(x: np.ndarray, r_min: float) -> np.ndarray:
    """Push points with |x| < r_min out to the r_min sphere (origin -> r_min e_1)."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    inside = r < r_min
    if not np.any(inside):
        return x
    at_zero = r == 0.0
    safe_r = np.where(at_zero, 1.0, r)
    scaled = x * (r_min / safe_r)
    e1 = np.zeros(x.shape[-1])
    e1[0] = r_min
    scaled = np.where(at_zero, e1, scaled)
    return np.where(inside, scaled, x)


def fd_jacobian(value_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                h: float = DEFAULT_H_FD) -> np.ndarray:
    """Central-difference Jacobian of a vector field, batched over x (..., d)."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        cols.append((value_fn(x + e) - value_fn(x - e)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def make_system(name: str, d: int, m: int,
                value_fn: Callable[[int, np.ndarray], np.ndarray],
                jacobian_fn: Callable[[int, np.ndarray], np.ndarray] | None = None,
                constants: AssumptionConstants | None = None,
                origin_policy: OriginPolicy = OriginPolicy(),
                params: Mapping[str, float] | None = None,
                h_fd: float = DEFAULT_H_FD) -> CoefficientSystem:
    """Assemble a system; a missing jacobian_fn falls back to central differences."""
    analytic = jacobian_fn is not None
    if jacobian_fn is None:
        def jacobian_fn(k, x, _v=value_fn, _h=h_fd):
            return fd_jacobian(lambda p: _v(k, p), x, _h)
    if constants is None:
        constants = AssumptionConstants(p1=0.5, p2=1.0, p3=2 * (d + 1) + 2.0,
                                        p4=d + 2.0, p5=0.5, C1=1.0, C2=2.0,
                                        C3=2.0, R1=1.0)
    return CoefficientSystem(name=name, d=d, m=m, value_fn=value_fn,
                             jacobian_fn=jacobian_fn, constants=constants,
                             jacobian_analytic=analytic,
                             origin_policy=origin_policy,
                             params=dict(params or {}))


# ---------------------------------------------------------------------------
# linear algebra helpers

def sym_eig_range(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(smallest, largest) eigenvalues of symmetric matrices, batched.

    Closed forms for d <= 2 keep the hot integrator path cheap and
    batch-size independent; larger d falls back to eigvalsh.
    """
    a = np.asarray(a, dtype=float)
    d = a.shape[-1]
    if d == 1:
        v = a[..., 0, 0]
        return v, v
    if d == 2:
        tr = a[..., 0, 0] + a[..., 1, 1]
        det = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
        disc = np.sqrt(np.maximum(tr * tr - 4.0 * det, 0.0))
        return 0.5 * (tr - disc), 0.5 * (tr + disc)
    w = np.linalg.eigvalsh(a)
    return w[..., 0], w[..., -1]


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ z = b for symmetric positive definite a, batched (..., d, d)."""
    d = a.shape[-1]
    if d == 1:
        return b / a[..., 0, 0:1]
    if d == 2:
        det = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
        z0 = (a[..., 1, 1] * b[..., 0] - a[..., 0, 1] * b[..., 1]) / det
        z1 = (a[..., 0, 0] * b[..., 1] - a[..., 1, 0] * b[..., 0]) / det
        return np.stack([z0, z1], axis=-1)
    return np.linalg.solve(a, b)


# ---------------------------------------------------------------------------
# operations

def diffusion_matrix(system: CoefficientSystem, x: np.ndarray) -> np.ndarray:
    """A(x) with entries a_ij = sum_k X_ki(x) X_kj(x); symmetric PSD."""
    sig = system.sigma(x)
    a = np.einsum("...ik,...jk->...ij", sig, sig)
    if not np.all(np.isfinite(a)):
        raise SingularPointError(
            f"{system.name}: diffusion matrix not finite at x={np.asarray(x)!r}")
    return a


def right_inverse_apply(system: CoefficientSystem, x: np.ndarray,
                        xi: np.ndarray,
                        cond_max: float = DEFAULT_COND_MAX) -> np.ndarray:
    """Y(x)(xi) = Sigma^T A(x)^{-1} xi, the minimal-norm right inverse of X.

    Satisfies X(x) Y(x)(xi) = xi whenever A(x) is well conditioned; rejects
    points where cond(A) exceeds cond_max.
    """
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    sig = system.sigma(x)
    a = np.einsum("...ik,...jk->...ij", sig, sig)
    lo, hi = sym_eig_range(a)
    bad = ~(np.asarray(lo) > 0.0) | (np.asarray(hi) > cond_max * np.asarray(lo))
    if np.any(bad):
        raise NearSingularDiffusionError(
            f"{system.name}: diffusion nearly singular "
            f"(smallest eigenvalue {float(np.min(lo)):.3e}, cond gate {cond_max:g})",
            smallest_eigenvalue=float(np.min(lo)))
    z = solve_spd(a, xi)
    return np.einsum("...ik,...i->...k", sig, z)


@dataclass(frozen=True)
class SpectralReport:
    """K_p(x) as the top eigenvalue of the symmetrized quadratic-form matrix."""

    x: np.ndarray
    p: float
    kp: float
    matrix: np.ndarray

    def quadratic_form(self, xi: np.ndarray) -> float:
        xi = np.asarray(xi, dtype=float)
        return float(xi @ self.matrix @ xi)


def kp_max(system: CoefficientSystem, x: np.ndarray, p: float) -> SpectralReport:
    """Largest eigenvalue of p(J0 + J0^T) + (2p-1)p sum_k J_k^T J_k at x.

    This equals sup over unit xi of
    2p<DX_0 xi, xi> + (2p-1)p sum_k |DX_k xi|^2.
    """
    if p <= 0:
        raise ValueError("order p must be positive")
    x = np.asarray(x, dtype=float)
    j0 = system.jacobian(0, x)
    mat = p * (j0 + np.swapaxes(j0, -1, -2))
    for k in range(1, system.m + 1):
        jk = system.jacobian(k, x)
        mat = mat + (2.0 * p - 1.0) * p * np.einsum("...ji,...jk->...ik", jk, jk)
    kp = np.linalg.eigvalsh(mat)[..., -1]
    return SpectralReport(x=x, p=p, kp=float(kp) if np.ndim(kp) == 0 else kp,
                          matrix=mat)


def _log_energy_expression(system: CoefficientSystem, lam: float,
                           x: np.ndarray) -> np.ndarray:
    """Dg(X_0) + (1/2) sum_k (lam |Dg(X_k)|^2 + D^2g(X_k, X_k)) for
    g(x) = log(1 + |x|^2), in closed form."""
    s = 1.0 + np.sum(x * x, axis=-1)
    x0 = system.value(0, x)
    out = 2.0 * np.sum(x * x0, axis=-1) / s
    for k in range(1, system.m + 1):
        xk = system.value(k, x)
        dot = np.sum(x * xk, axis=-1)
        norm2 = np.sum(xk * xk, axis=-1)
        out = out + 2.0 * (lam - 1.0) * dot * dot / (s * s) + norm2 / s
    return out


@dataclass(frozen=True)
class ThetaBound:
    """Grid supremum of the log-energy drift functional.

    certified is True only when the caller supplied a tail bound valid outside
    the search box that is dominated by the grid maximum; otherwise the value
    is an empirical (finite-sample) maximum.
    """

    value: float
    argmax: np.ndarray
    lam: float
    box: float
    n_points: int
    certified: bool


def theta_g(system: CoefficientSystem, lam: float, box: float = 50.0,
            n_points: int | None = None,
            tail_bound: float | None = None) -> ThetaBound:
    """Maximize the Lyapunov drift expression for g = log(1+|x|^2) on a grid.

    tail_bound, when given, asserts an upper bound for the expression outside
    [-box, box]^d; the result is flagged certified when that bound does not
    exceed the grid maximum.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    d = system.d
    if n_points is None:
        n_points = 401 if d <= 2 else 101
    axis = np.linspace(-box, box, n_points)
    grids = np.meshgrid(*([axis] * d), indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=-1)
    vals = _log_energy_expression(system, lam, pts)
    i = int(np.argmax(vals))
    certified = tail_bound is not None and tail_bound <= float(vals[i])
    return ThetaBound(value=float(vals[i]), argmax=pts[i], lam=lam, box=box,
                      n_points=n_points, certified=certified)


# ---------------------------------------------------------------------------
# sampled condition checks

@dataclass(frozen=True)
class CheckSpec:
    """Sampling plan and budgets for the condition checker.

    Budgets apply to the conditions whose constant the source leaves
    non-constructive: the checker reports the empirical constant and compares
    against the budget (default: no budget, report only).
    """

    radius: float = 10.0
    n_radial: int = 24
    n_angular: int = 16
    p_list: tuple[float, ...] = (2.0,)
    delta_samples: int = 6
    c2_budget: float = math.inf
    c4aa_budget: float = math.inf
    quad_budget: float = 1e9
    quad_levels: int = 3
    quad_n0: int = 16
    quad_radius: float = 1.0


@dataclass(frozen=True)
class ConditionReport:
    name: str
    status: str                      # "pass" | "fail" | "skipped"
    worst_point: np.ndarray | None
    worst_margin: float              # >= 0 means pass at every sample
    detail: dict
    skipped_points: int = 0

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def _probe_points(spec: CheckSpec, d: int, r_lo: float = 0.0,
                  r_hi: float | None = None) -> np.ndarray:
    r_hi = spec.radius if r_hi is None else r_hi
    radii = np.geomspace(max(r_lo, 1e-3 * r_hi), r_hi, spec.n_radial)
    dirs, _ = sphere_points(d, spec.n_angular)
    return (radii[:, None, None] * dirs[None, :, :]).reshape(-1, d)


def check_assumptions(system: CoefficientSystem,
                      spec: CheckSpec = CheckSpec()) -> dict[str, ConditionReport]:
    """Sampled pass/fail diagnostics for the growth and ellipticity conditions.

    These are grid-level checks, not proofs: pass means no violation was found
    at the sampled points, fail carries the worst violating point. Conditions
    that cannot be evaluated (Jacobian singularities at every sample) are
    reported as skipped.
    """
    c = system.constants
    d = system.d
    reports: dict[str, ConditionReport] = {}

    pts = _probe_points(spec, d)
    r = np.linalg.norm(pts, axis=-1)

    # (c1): smallest eigenvalue of A(x) >= C1 / (1 + |x|^p1)
    a = diffusion_matrix(system, pts)
    lo, _ = sym_eig_range(a)
    floor = c.C1 / (1.0 + r**c.p1)
    margin = lo - floor
    i = int(np.argmin(margin))
    reports["c1"] = ConditionReport(
        "c1", "pass" if margin[i] >= 0 else "fail", pts[i], float(margin[i]),
        {"C1": c.C1, "p1": c.p1})

    # (c2aa): |X_k(x)| <= C2 (1 + |x|^p2) for k = 0..m
    worst = np.inf
    worst_pt = None
    for k in range(system.m + 1):
        norm = np.linalg.norm(system.value(k, pts), axis=-1)
        m = c.C2 * (1.0 + r**c.p2) - norm
        j = int(np.argmin(m))
        if m[j] < worst:
            worst, worst_pt = float(m[j]), pts[j]
    reports["c2aa"] = ConditionReport(
        "c2aa", "pass" if worst >= 0 else "fail", worst_pt, worst,
        {"C2": c.C2, "p2": c.p2})

    # (c2): sup_{|y| <= delta} p sum |X_k(x+y)|^2 + <x, X_0(x+y)> <= C(p)(1+|x|^2)
    y_dirs, _ = sphere_points(d, spec.delta_samples)
    y_radii = np.linspace(0.0, c.delta, spec.delta_samples)
    offsets = (y_radii[:, None, None] * y_dirs[None, :, :]).reshape(-1, d)
    empirical = {}
    for p in spec.p_list:
        best = -np.inf
        for y in offsets:
            shifted = pts + y
            s = np.zeros(len(pts))
            for k in range(1, system.m + 1):
                s += np.sum(system.value(k, shifted) ** 2, axis=-1)
            lhs = p * s + np.sum(pts * system.value(0, shifted), axis=-1)
            best = np.maximum(best, lhs / (1.0 + r * r))
        empirical[p] = float(np.max(best))
    worst_c = max(empirical.values())
    reports["c2"] = ConditionReport(
        "c2", "pass" if worst_c <= spec.c2_budget else "fail", None,
        spec.c2_budget - worst_c if math.isfinite(spec.c2_budget) else math.inf,
        {"empirical_C": empirical, "budget": spec.c2_budget,
         "delta": c.delta})

    # (c3): refinement study of the exponential-integrability quadrature
    reports["c3"] = _check_c3(system, spec)

    # (c4): |DX_k(x)| <= C3 (1 + |x|^p5) outside R1
    reports["c4"] = _check_c4(system, spec)

    # (c4aa): K_p(x) <= C(p) log(1 + |x|^2) outside R1
    reports["c4aa"] = _check_c4aa(system, spec)
    return reports


def _check_c3(system: CoefficientSystem, spec: CheckSpec) -> ConditionReport:
    c = system.constants
    estimates: dict[float, list[float]] = {}
    skipped = 0
    r_min = system.origin_policy.r_min
    for p in spec.p_list:
        kap = c.kappa(p)
        levels = []
        for level in range(spec.quad_levels):
            n_rad = spec.quad_n0 * 2**level
            nodes, weights = midpoint_ball_rule(system.d, spec.quad_radius,
                                                n_rad, spec.n_angular)
            rr = np.linalg.norm(nodes, axis=-1)
            keep = rr >= r_min
            skipped += int(np.sum(~keep))
            nodes, weights = nodes[keep], weights[keep]
            if len(nodes) == 0:
                return ConditionReport("c3", "skipped", None, 0.0,
                                       {"reason": "all nodes singular"},
                                       skipped_points=skipped)
            kp_vals = _kp_values(system, nodes, p)
            with np.errstate(over="ignore"):
                integrand = np.exp(np.minimum(kap * kp_vals, 700.0))
            levels.append(float(np.sum(weights * integrand)))
        estimates[p] = levels
    worst_final = max(v[-1] for v in estimates.values())
    growing = any(len(v) >= 2 and v[-1] > 1.5 * v[-2] and v[-1] > 10.0
                  for v in estimates.values())
    ok = worst_final <= spec.quad_budget and not growing
    return ConditionReport(
        "c3", "pass" if ok else "fail", None,
        spec.quad_budget - worst_final,
        {"levels": estimates, "budget": spec.quad_budget,
         "diverging": growing}, skipped_points=skipped)


def _kp_values(system: CoefficientSystem, pts: np.ndarray, p: float) -> np.ndarray:
    """Batch K_p over points known to avoid the singular set."""
    j0 = system.jacobian(0, pts)
    mat = p * (j0 + np.swapaxes(j0, -1, -2))
    for k in range(1, system.m + 1):
        jk = system.jacobian(k, pts)
        mat = mat + (2.0 * p - 1.0) * p * np.einsum("...ji,...jk->...ik", jk, jk)
    return np.linalg.eigvalsh(mat)[..., -1]


def _check_c4(system: CoefficientSystem, spec: CheckSpec) -> ConditionReport:
    c = system.constants
    if spec.radius <= c.R1:
        return ConditionReport("c4", "skipped", None, 0.0,
                               {"reason": "probe radius inside R1"})
    pts = _probe_points(spec, system.d, r_lo=c.R1 * 1.01)
    r = np.linalg.norm(pts, axis=-1)
    worst = np.inf
    worst_pt = None
    skipped = 0
    for k in range(system.m + 1):
        try:
            jac = system.jacobian(k, pts)
        except SingularPointError:
            skipped += len(pts)
            continue
        norm = np.linalg.norm(jac, axis=(-2, -1))
        m = c.C3 * (1.0 + r**c.p5) - norm
        j = int(np.argmin(m))
        if m[j] < worst:
            worst, worst_pt = float(m[j]), pts[j]
    if worst_pt is None:
        return ConditionReport("c4", "skipped", None, 0.0,
                               {"reason": "no evaluable Jacobians"},
                               skipped_points=skipped)
    return ConditionReport("c4", "pass" if worst >= 0 else "fail", worst_pt,
                           worst, {"C3": c.C3, "p5": c.p5, "R1": c.R1},
                           skipped_points=skipped)


def _check_c4aa(system: CoefficientSystem, spec: CheckSpec) -> ConditionReport:
    c = system.constants
    if spec.radius <= c.R1:
        return ConditionReport("c4aa", "skipped", None, 0.0,
                               {"reason": "probe radius inside R1"})
    pts = _probe_points(spec, system.d, r_lo=c.R1 * 1.01)
    r = np.linalg.norm(pts, axis=-1)
    empirical = {}
    try:
        for p in spec.p_list:
            kp_vals = _kp_values(system, pts, p)
            empirical[p] = float(np.max(kp_vals / np.log1p(r * r)))
    except SingularPointError:
        return ConditionReport("c4aa", "skipped", None, 0.0,
                               {"reason": "Jacobian singular on probe set"},
                               skipped_points=len(pts))
    worst_c = max(empirical.values())
    ok = worst_c <= spec.c4aa_budget
    return ConditionReport(
        "c4aa", "pass" if ok else "fail", None,
        spec.c4aa_budget - worst_c if math.isfinite(spec.c4aa_budget) else math.inf,
        {"empirical_C": empirical, "budget": spec.c4aa_budget})


# ---------------------------------------------------------------------------
# built-in systems

BUILTIN_NAMES = ("example21", "ornstein_uhlenbeck", "geometric_bm", "constant",
                 "additive_noise")


def _smooth_step(t: np.ndarray) -> np.ndarray:
    """C^inf step: 0 for t <= 0, 1 for t >= 1, strictly increasing between."""
    t = np.asarray(t, dtype=float)
    def phi(u):
        pos = u > 0
        return np.where(pos, np.exp(-1.0 / np.where(pos, u, 1.0)), 0.0)
    a = phi(t)
    b = phi(1.0 - t)
    return a / (a + b)


def _batched(fn):
    """Normalize a (k, x)->array field function to arbitrary leading shapes."""
    def wrapped(k, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            return fn(k, x)
        if x.ndim == 1:
            return fn(k, x[None])[0]
        lead = x.shape[:-1]
        out = fn(k, x.reshape(-1, x.shape[-1]))
        return out.reshape(lead + out.shape[1:])
    return wrapped


def _batched_pair(fn):
    """Like _batched for an x -> (drift, sigma) function."""
    def wrapped(x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            return fn(x)
        if x.ndim == 1:
            drift, sigma = fn(x[None])
            return drift[0], sigma[0]
        lead = x.shape[:-1]
        drift, sigma = fn(x.reshape(-1, x.shape[-1]))
        return (drift.reshape(lead + drift.shape[1:]),
                sigma.reshape(lead + sigma.shape[1:]))
    return wrapped


def _batched_mats(fn):
    """Like _batched for an x -> stacked-matrices function."""
    def wrapped(x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            return fn(x)
        if x.ndim == 1:
            return fn(x[None])[0]
        lead = x.shape[:-1]
        out = fn(x.reshape(-1, x.shape[-1]))
        return out.reshape(lead + out.shape[1:])
    return wrapped


def _bumps(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """g1 (=1 inside radius 2, 0 outside 3) and g2 (=0 inside 1, 1 outside 2)."""
    return 1.0 - _smooth_step(r - 2.0), _smooth_step(r - 1.0)


def _example21(d: int = 2, q1: float = 0.8, q2: float = 0.5, q3: float = 0.5,
               q4: float = 1.0, r_min: float = DEFAULT_R_MIN,
               h_fd: float = DEFAULT_H_FD) -> CoefficientSystem:
    lo_q1 = 1.0 - d / (2.0 * (d + 1.0))
    if not q1 > lo_q1:
        raise ParameterConstraintError(
            f"example21 requires q1 > 1 - d/(2(d+1)) = {lo_q1:g}, got q1={q1}",
            "q1 > 1 - d/(2(d+1))")
    if not q1 < 1.0:
        raise ParameterConstraintError(
            f"example21 requires q1 < 1, got q1={q1}", "q1 < 1")
    if not q3 > 2.0 * (1.0 - q1):
        raise ParameterConstraintError(
            f"example21 requires q3 > 2(1-q1) = {2 * (1 - q1):g}, got q3={q3}",
            "q3 > 2(1-q1)")
    hi_q3 = d / (d + 1.0)
    if not q3 < hi_q3:
        raise ParameterConstraintError(
            f"example21 requires q3 < d/(d+1) = {hi_q3:g}, got q3={q3}",
            "q3 < d/(d+1)")
    if not q4 + 2.0 > 2.0 * q2:
        raise ParameterConstraintError(
            f"example21 requires q4 + 2 > 2*q2, got q4={q4}, q2={q2}",
            "q4 + 2 > 2*q2")
    if q3 <= 0 or q4 <= 0:
        raise ParameterConstraintError("example21 requires q3 > 0 and q4 > 0",
                                       "q3 > 0, q4 > 0")

    eye = np.eye(d)

    def diff_coeff(r, g1, g2):
        term2 = np.zeros_like(r)
        outer = r > 1.0
        term2[outer] = r[outer] ** q2 * g2[outer]
        return (1.0 + r**q1) * g1 + term2

    def drift_vec(x, r, g1, g2):
        unit = np.zeros_like(x)
        pos = r > 0
        unit[pos] = x[pos] / r[pos][..., None]
        # -(1 + r^{-q3}) g1 x = -g1 (x + r^{1-q3} unit); finite at 0
        inner = g1[..., None] * (x + (r ** (1.0 - q3))[..., None] * unit)
        outer = (g2 * r**q4)[..., None] * x
        return -inner - outer

    def value(k, x):
        r = np.linalg.norm(x, axis=-1)
        g1, g2 = _bumps(r)
        if k == 0:
            return drift_vec(x, r, g1, g2)
        return diff_coeff(r, g1, g2)[..., None] * np.broadcast_to(eye[k - 1],
                                                                  x.shape)

    def fields(x):
        r = np.linalg.norm(x, axis=-1)
        g1, g2 = _bumps(r)
        drift = drift_vec(x, r, g1, g2)
        sigma = diff_coeff(r, g1, g2)[..., None, None] \
            * np.broadcast_to(eye, x.shape + (d,))
        return drift, sigma

    def _drift_jac_closed(x, r, xx, core: bool):
        if core:
            return (q3 * r ** (-q3 - 2.0))[..., None, None] * xx \
                - (1.0 + r**-q3)[..., None, None] * eye
        return -(r**q4)[..., None, None] * eye \
            - (q4 * r ** (q4 - 2.0))[..., None, None] * xx

    def _diff_jac_closed(x, r, core: bool):
        # (..., m, d, d) with row k-1 of entry k equal to coef * x^T
        coef = q1 * r ** (q1 - 2.0) if core else q2 * r ** (q2 - 2.0)
        return coef[..., None, None, None] * np.einsum(
            "ki,...j->...kij", eye, x)

    def jacobian(k, x):
        return jacobians(x)[..., k, :, :]

    def jacobians(x):
        r = np.linalg.norm(x, axis=-1)
        out = np.empty(x.shape[:-1] + (d + 1, d, d))
        core = r <= 1.0
        shell = r >= 3.0
        mid = ~core & ~shell
        if np.any(core):
            xc, rc = x[core], r[core]
            xx = np.einsum("...i,...j->...ij", xc, xc)
            out[core, 0] = _drift_jac_closed(xc, rc, xx, core=True)
            out[core, 1:] = _diff_jac_closed(xc, rc, core=True)
        if np.any(shell):
            xs_, rs = x[shell], r[shell]
            xx = np.einsum("...i,...j->...ij", xs_, xs_)
            out[shell, 0] = _drift_jac_closed(xs_, rs, xx, core=False)
            out[shell, 1:] = _diff_jac_closed(xs_, rs, core=False)
        if np.any(mid):
            # bump transition annulus 1 < |x| < 3: no closed form published
            xm = x[mid]
            for k in range(d + 1):
                out[mid, k] = fd_jacobian(lambda p: value(k, p), xm, h_fd)
        return out

    constants = AssumptionConstants(
        p1=max(2.0 * abs(q2), 0.5),
        p2=max(q2, q4 + 1.0, 0.5),
        p3=0.5 * (2.0 * (d + 1.0) + d / (1.0 - q1)),
        p4=0.5 * (d + 1.0 + d / q3),
        p5=max(q4, q2 - 1.0, 0.5),
        C1=1.0,
        C2=4.0 + 3.0**q1,
        C3=2.0 + q4 + abs(q2),
        R1=3.0,
        delta=1.0)
    constants.validate(d)
    return CoefficientSystem(
        name="example21", d=d, m=d, value_fn=_batched(value),
        jacobian_fn=_batched(jacobian),
        fields_fn=_batched_pair(fields),
        jacobians_fn=_batched_mats(jacobians),
        constants=constants, jacobian_analytic=True,
        origin_policy=OriginPolicy(
            r_min=r_min,
            note="drift Jacobian blows up like |x|^{-q3} at the origin; "
                 "values use their continuous limits X_0(0)=0, X_k(0)=e_k"),
        params={"d": d, "q1": q1, "q2": q2, "q3": q3, "q4": q4,
                "r_min": r_min, "h_fd": h_fd})


def _ornstein_uhlenbeck(theta: float = 1.0, sigma: float = 1.0,
                        d: int = 1) -> CoefficientSystem:
    if sigma <= 0 or theta <= 0:
        raise ParameterConstraintError(
            "ornstein_uhlenbeck requires theta > 0 and sigma > 0",
            "theta > 0, sigma > 0")
    eye = np.eye(d)

    def value(k, x):
        if k == 0:
            return -theta * x
        return np.broadcast_to(sigma * eye[k - 1], x.shape).copy()

    def jacobian(k, x):
        shape = x.shape + (d,)
        if k == 0:
            return np.broadcast_to(-theta * eye, shape).copy()
        return np.zeros(shape)

    constants = AssumptionConstants(
        p1=0.5, p2=1.0, p3=2 * (d + 1) + 2.0, p4=d + 2.0, p5=0.5,
        C1=sigma**2, C2=max(sigma, theta) + 1.0, C3=theta + 1.0, R1=1.0)
    return CoefficientSystem(
        name="ornstein_uhlenbeck", d=d, m=d, value_fn=value,
        jacobian_fn=jacobian, constants=constants,
        params={"theta": theta, "sigma": sigma, "d": d})


def _geometric_bm(mu: float = 0.1, sigma: float = 0.2,
                  d: int = 1) -> CoefficientSystem:
    if sigma <= 0:
        raise ParameterConstraintError("geometric_bm requires sigma > 0",
                                       "sigma > 0")
    eye = np.eye(d)

    def value(k, x):
        if k == 0:
            return mu * x
        return sigma * x[..., k - 1:k] * eye[k - 1]

    def jacobian(k, x):
        shape = x.shape + (d,)
        if k == 0:
            return np.broadcast_to(mu * eye, shape).copy()
        return np.broadcast_to(sigma * np.outer(eye[k - 1], eye[k - 1]),
                               shape).copy()

    # not elliptic at the origin; the checker will report (c1) failures there
    constants = AssumptionConstants(
        p1=0.5, p2=1.0, p3=2 * (d + 1) + 2.0, p4=d + 2.0, p5=0.5,
        C1=sigma**2, C2=max(abs(mu), sigma) + 1.0, C3=abs(mu) + sigma + 1.0,
        R1=1.0)
    return CoefficientSystem(
        name="geometric_bm", d=d, m=d, value_fn=value, jacobian_fn=jacobian,
        constants=constants, params={"mu": mu, "sigma": sigma, "d": d})


def _constant(sigma: float = 1.0, d: int = 1, m: int | None = None,
              drift: tuple[float, ...] | None = None) -> CoefficientSystem:
    m = d if m is None else m
    if m != d:
        raise ParameterConstraintError(
            "constant builtin uses the basis fields sigma*e_k, so m must equal d",
            "m == d")
    eye = np.eye(d)
    b = np.zeros(d) if drift is None else np.asarray(drift, dtype=float)

    def value(k, x):
        if k == 0:
            return np.broadcast_to(b, x.shape).copy()
        return np.broadcast_to(sigma * eye[k - 1], x.shape).copy()

    def jacobian(k, x):
        return np.zeros(x.shape + (d,))

    constants = AssumptionConstants(
        p1=0.5, p2=0.5, p3=2 * (d + 1) + 2.0, p4=d + 2.0, p5=0.5,
        C1=sigma**2, C2=abs(sigma) + float(np.linalg.norm(b)) + 1.0, C3=1.0,
        R1=1.0)
    return CoefficientSystem(
        name="constant", d=d, m=m, value_fn=value, jacobian_fn=jacobian,
        constants=constants,
        params={"sigma": sigma, "d": d, "m": m,
                "drift": tuple(float(v) for v in b)})


def _additive_noise(sigma: float = 1.0, d: int = 1) -> CoefficientSystem:
    system = _constant(sigma=sigma, d=d)
    return replace(system, name="additive_noise",
                   params={"sigma": sigma, "d": d})


_BUILTIN_FACTORIES = {
    "example21": _example21,
    "ornstein_uhlenbeck": _ornstein_uhlenbeck,
    "geometric_bm": _geometric_bm,
    "constant": _constant,
    "additive_noise": _additive_noise,
}


def builtin(name: str, **params) -> CoefficientSystem:
    """Construct a built-in coefficient system by name.

    example21 validates its exponent inequalities and raises
    ParameterConstraintError naming the violated one.
    """
    try:
        factory = _BUILTIN_FACTORIES[name]
    except KeyError:
        raise ValueError(
            f"unknown builtin {name!r}; choose from {BUILTIN_NAMES}") from None
    return factory(**params)
