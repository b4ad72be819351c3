"""Measured regularity statements: Harnack quotients, boundedness ratios,
energy inequalities, maximum principles, oscillation decay, sharpness sweeps.

Every operation measures both sides of one inequality on a discrete solution
and reports the empirical constant; nothing is asserted here beyond
preconditions.  Pass flags encode the inequality with its documented slack,
so a failing flag is a finding, not an exception.

Ball averages are element-quadrature averages (centroid values times element
measure) over the elements whose centroid lies in the ball; sup/inf are nodal
over the nodes in the closed ball.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dc_field
from fractions import Fraction

import numpy as np

from . import _grid
from .exponents import (EllipticityProfile, ExponentSet, ParameterError,
                        is_inf, lambda_of_region, mean_power)
from .fields import MatrixField
from .solver import (Mesh, ScalarField, element_mean_square, energy, gradient,
                     solve_dirichlet)

_FLOOR = 1e-300  # guards 1/inf in Harnack-type quotients


@dataclass
class ExperimentReport:
    """One measurement campaign entry: tag, provenance, quantities, pass flags."""

    tag: str
    digest: str = ""
    d: int = 0
    n: int = 0
    seed: int = -1
    quantities: dict = dc_field(default_factory=dict)
    flags: dict = dc_field(default_factory=dict)
    wall_time: float = 0.0

    def rows(self) -> list[tuple[str, float, str]]:
        """(key, value, flag) triples for the long-format CSV."""
        out = [(k, float(v), "") for k, v in sorted(self.quantities.items())]
        out += [(k, 1.0 if v else 0.0, "flag") for k, v in sorted(self.flags.items())]
        return out


# ---------------------------------------------------------------------------
# selection helpers


def _ball_nodes(u: ScalarField, center, radius: float) -> np.ndarray:
    idx = u.mesh.nodes_in_ball(center, radius)
    if idx.size == 0:
        raise ParameterError(f"no nodes in B_{radius}; refine the mesh")
    return idx


def _ball_elements(mesh: Mesh, center, radius: float) -> np.ndarray:
    idx = mesh.elements_in_ball(center, radius)
    if idx.size == 0:
        raise ParameterError(f"no elements in B_{radius}; refine the mesh")
    return idx


def _element_centroid_values(u: ScalarField) -> np.ndarray:
    return u.values[u.mesh.elements].mean(axis=1)


def _ball_mean(u_vals_per_element: np.ndarray, idx: np.ndarray) -> float:
    return float(np.mean(u_vals_per_element[idx]))


def _profile_cells_in_ball(profile: EllipticityProfile, center, radius: float,
                           periodic: bool) -> np.ndarray:
    cells = _grid.cells_in_ball(profile.d, profile.n, profile.box, center,
                                radius, periodic)
    if cells.size == 0:
        raise ParameterError(f"no profile cells in B_{radius}")
    return cells


def _check_nonnegative(vals: np.ndarray, what: str) -> np.ndarray:
    scale = max(float(np.max(np.abs(vals))), _FLOOR)
    if float(np.min(vals)) < -1e-10 * scale:
        raise ParameterError(
            f"{what} undershoots zero beyond tolerance (min {np.min(vals):.3e})")
    return np.maximum(vals, 0.0)


def radial_ramp(mesh: Mesh, rho: float, sigma: float, center=None) -> ScalarField:
    """The standard cutoff: 1 on B_rho, linear ramp on the annulus, 0 outside."""
    if not 0 <= rho < sigma:
        raise ParameterError("need 0 <= rho < sigma")
    if center is None:
        center = np.zeros(mesh.d)
    r = np.linalg.norm(_grid.wrapped_delta(mesh.nodes, center, mesh.box,
                                           mesh.mode == "torus"), axis=1)
    vals = np.clip((sigma - r) / (sigma - rho), 0.0, 1.0)
    return ScalarField(mesh=mesh, values=vals)


# ---------------------------------------------------------------------------
# quotients and ratios


def harnack_quotient(u: ScalarField, center, radius: float,
                     theta: float = 0.5) -> dict:
    """sup / inf of u over the nodes of closed B_{theta R}.

    u must be nonnegative on B_R up to 1e-10 * scale undershoot; the inf is
    floored at 1e-300 so the quotient of a vanishing solution is inf, flagged.
    """
    if not 0 < theta < 1:
        raise ParameterError("theta must be in (0, 1)")
    ball = _check_nonnegative(u.values[_ball_nodes(u, center, radius)], "u on B_R")
    del ball
    inner = u.values[_ball_nodes(u, center, theta * radius)]
    inner = np.maximum(inner, 0.0)
    sup, inf = float(np.max(inner)), float(np.min(inner))
    floored = inf < _FLOOR
    quotient = sup / max(inf, _FLOOR)
    return {"sup": sup, "inf": inf, "quotient": quotient, "floored": floored,
            "theta": theta, "radius": radius}


def local_boundedness_ratio(u: ScalarField, profile: EllipticityProfile,
                            exps: ExponentSet, center, radius: float,
                            gamma: float = 1.0) -> dict:
    """Measured constant of  sup_{B_{R/2}} |u|  <=  C (avg_{B_R} |u|^gamma)^{1/gamma}
    against the predicted scale Lambda(B_R)^{p'(1+1/delta)/gamma}."""
    if gamma <= 0:
        raise ParameterError("gamma must be positive")
    sup_half = float(np.max(np.abs(u.values[_ball_nodes(u, center, radius / 2)])))
    cvals = np.abs(_element_centroid_values(u))
    idx = _ball_elements(u.mesh, center, radius)
    mean_gamma = float(np.mean(cvals[idx] ** gamma)) ** (1.0 / gamma)
    ratio = sup_half / mean_gamma if mean_gamma > 0 else math.inf

    cells = _profile_cells_in_ball(profile, center, radius, u.mesh.mode == "torus")
    lam_region = lambda_of_region(profile, cells, exps.p, exps.q)
    if exps.delta > 0 and not is_inf(exps.p_prime):
        expo = float(exps.p_prime) * (1.0 + 1.0 / float(exps.delta)) / gamma
        predicted = lam_region ** expo if math.isfinite(lam_region) else math.inf
    else:
        expo, predicted = math.nan, math.nan
    normalized = ratio / predicted if predicted and math.isfinite(predicted) else math.nan
    return {"sup_half": sup_half, "mean_gamma": mean_gamma, "ratio": ratio,
            "lambda_region": lam_region, "predicted_scale": predicted,
            "exponent": expo, "normalized": normalized, "gamma": gamma}


def weak_harnack_ratio(u: ScalarField, exps: ExponentSet, center, radius: float,
                       gamma: float, theta: float = 0.25, tau: float = 0.5) -> dict:
    """Measured constant of  (R^{-d} int_{B_{tau R}} u^gamma)^{1/gamma} <= C inf_{B_{theta R}} u.

    Requires 0 < theta < tau < 1, gamma < q*/2 (the integrability ceiling of
    the weak Harnack inequality), and u >= 0 on B_R up to undershoot tolerance.
    """
    if gamma <= 0:
        raise ParameterError("gamma must be positive")
    if not 0 < theta < tau < 1:
        raise ParameterError("need 0 < theta < tau < 1")
    if not is_inf(exps.q_star) and not gamma < float(exps.q_star) / 2:
        raise ParameterError(f"gamma={gamma} must be < q*/2 = {float(exps.q_star) / 2}")
    vals = _check_nonnegative(u.values[_ball_nodes(u, center, radius)], "u on B_R")
    del vals
    mesh = u.mesh
    cvals = np.maximum(_element_centroid_values(u), 0.0)
    idx = _ball_elements(mesh, center, tau * radius)
    integral = float(np.sum(cvals[idx] ** gamma)) * mesh.volume
    lhs = (radius ** (-mesh.d) * integral) ** (1.0 / gamma)
    inf_inner = float(np.min(np.maximum(
        u.values[_ball_nodes(u, center, theta * radius)], 0.0)))
    ratio = lhs / max(inf_inner, _FLOOR)
    return {"lhs": lhs, "inf": inf_inner, "ratio": ratio, "gamma": gamma,
            "theta": theta, "tau": tau, "floored": inf_inner < _FLOOR}


# ---------------------------------------------------------------------------
# energy inequalities


def caccioppoli_check(u: ScalarField, profile: EllipticityProfile,
                      eta: ScalarField, slack: float = 0.1) -> dict:
    """Audit of the truncated energy estimate

        int eta^2 lambda |grad u_+|^2  <=  4 (1 + slack) int u_+^2 mu |grad eta|^2

    for the nodal truncation u_+ = max(u, 0).  Both sides are exact integrals
    of the piecewise-P1 quantities (constant gradients, exact P1 squares).
    """
    mesh = u.mesh
    if eta.mesh is not mesh:
        raise ParameterError("u and eta live on different meshes")
    from .cutoff import _profile_cells  # shared element->profile-cell map

    cells = _profile_cells(mesh, profile)
    u_plus = ScalarField(mesh=mesh, values=np.maximum(u.values, 0.0))
    gu = gradient(u_plus)
    geta = gradient(eta)
    gu2 = np.einsum("ed,ed->e", gu, gu)
    geta2 = np.einsum("ed,ed->e", geta, geta)
    lhs = float(mesh.volume * np.sum(profile.lam[cells] * gu2 * element_mean_square(eta)))
    rhs = float(mesh.volume * np.sum(profile.mu[cells] * geta2 * element_mean_square(u_plus)))
    passed = lhs <= 4.0 * rhs * (1.0 + slack)
    ratio = lhs / (4.0 * rhs) if rhs > 0 else (0.0 if lhs == 0.0 else math.inf)
    return {"lhs": lhs, "rhs": rhs, "bound": 4.0 * rhs, "ratio": ratio,
            "slack": slack, "passed": passed}


def weighted_poincare_ratio(u: ScalarField, profile: EllipticityProfile,
                            field: MatrixField, exps: ExponentSet, center,
                            radius: float) -> dict:
    """Measured constant of the weighted Sobolev inequality

        (avg_{B_R} mu |u|^{2 kappa})^{1/kappa}
            <= c R^2 (avg mu^p)^{1/(kappa p)} (avg lambda^{-q})^{1/q} avg a grad u . grad u

    for u compactly supported in B_R; requires classical_ok (which makes
    kappa > 1 finite).
    """
    if not exps.classical_ok:
        raise ParameterError("weighted Poincare needs the classical condition 1/p+1/q < 2/d")
    if is_inf(exps.kappa):
        raise ParameterError("kappa is infinite; inequality degenerates")
    mesh = u.mesh
    outside = np.setdiff1d(np.arange(mesh.n_nodes), _ball_nodes(u, center, radius))
    scale = max(float(np.max(np.abs(u.values))), _FLOOR)
    if outside.size and float(np.max(np.abs(u.values[outside]))) > 1e-12 * scale:
        raise ParameterError("u is not compactly supported in B_R")

    kappa = float(exps.kappa)
    from .cutoff import _profile_cells

    cells_e = _profile_cells(mesh, profile)
    idx = _ball_elements(mesh, center, radius)
    measure = idx.size * mesh.volume
    cvals = np.abs(_element_centroid_values(u))
    lhs_mean = float(mesh.volume * np.sum(
        profile.mu[cells_e[idx]] * cvals[idx] ** (2.0 * kappa))) / measure
    lhs = lhs_mean ** (1.0 / kappa)

    cells_b = _profile_cells_in_ball(profile, center, radius,
                                     u.mesh.mode == "torus")
    mu_p = mean_power(profile.mu[cells_b], exps.p)          # (avg mu^p)^(1/p)
    mu_term = mu_p ** (1.0 / kappa)
    lam_q = mean_power(profile.lam[cells_b], -Fraction(exps.q)) if not is_inf(exps.q) \
        else float(np.min(profile.lam[cells_b]))
    lam_term = math.inf if lam_q == 0.0 else 1.0 / lam_q    # (avg lambda^-q)^(1/q)
    dirichlet = energy(u, field, center=center, radius=radius) / measure
    rhs = radius ** 2 * mu_term * lam_term * dirichlet
    ratio = lhs / rhs if rhs > 0 else math.inf
    return {"lhs": lhs, "rhs": rhs, "ratio": ratio, "kappa": kappa,
            "dirichlet_mean": dirichlet}


def max_principle_check(u: ScalarField, center, radius: float,
                        ring_width: float = None, tol: float = 1e-8) -> dict:
    """Discrete maximum principle audit:  sup_{B_R} u <= sup_{ring} u_+ + tol*scale,
    where the ring is the outermost node layer of B_R (width 2h by default)."""
    mesh = u.mesh
    if ring_width is None:
        ring_width = 2.0 * mesh.h
    ball = _ball_nodes(u, center, radius)
    r = np.linalg.norm(_grid.wrapped_delta(mesh.nodes[ball], center, mesh.box,
                                           mesh.mode == "torus"), axis=1)
    ring = ball[r >= radius - ring_width]
    if ring.size == 0:
        raise ParameterError("ring width too small for this mesh")
    sup_ball = float(np.max(u.values[ball]))
    sup_ring = float(np.max(np.maximum(u.values[ring], 0.0)))
    scale = max(float(np.max(np.abs(u.values[ball]))), _FLOOR)
    passed = sup_ball <= sup_ring + tol * scale
    return {"sup_ball": sup_ball, "sup_ring_plus": sup_ring, "scale": scale,
            "ring_width": ring_width, "passed": passed}


def bound_2d_check(u: ScalarField, profile: EllipticityProfile,
                   field: MatrixField, center, radius: float) -> dict:
    """Two-dimensional boundedness audit (needs only mu, lambda^{-1} in L^1):

        sup_{B_{R/2}} |u|  <=  c [ R (avg_{B_R} lambda^{-1})^{1/2}
                                     (avg_{B_R} a grad u . grad u)^{1/2}
                                   + avg_{B_R} |u| ].

    Reports the empirical constant c_emp.
    """
    mesh = u.mesh
    if mesh.d != 2:
        raise ParameterError("this bound is specific to d = 2")
    lhs = float(np.max(np.abs(u.values[_ball_nodes(u, center, radius / 2)])))
    cells_b = _profile_cells_in_ball(profile, center, radius,
                                     mesh.mode == "torus")
    lam = profile.lam[cells_b]
    lam_inv = math.inf if np.any(lam == 0.0) else float(np.mean(1.0 / lam))
    idx = _ball_elements(mesh, center, radius)
    measure = idx.size * mesh.volume
    dirichlet = energy(u, field, center=center, radius=radius) / measure
    mean_abs = _ball_mean(np.abs(_element_centroid_values(u)), idx)
    rhs = radius * math.sqrt(lam_inv) * math.sqrt(dirichlet) + mean_abs
    c_emp = lhs / rhs if rhs > 0 else math.inf
    return {"lhs": lhs, "rhs": rhs, "c_emp": c_emp, "lambda_inv_mean": lam_inv,
            "dirichlet_mean": dirichlet, "mean_abs": mean_abs}


# ---------------------------------------------------------------------------
# decay and sweeps


def oscillation_decay(u: ScalarField, center, radius: float, levels: int = 4,
                      min_cells: float = 8.0) -> dict:
    """Nodal oscillation over B_{R 2^{-j}} and the log-log decay slope.

    Radii under min_cells * h are excluded from the fit (unresolved balls).
    """
    mesh = u.mesh
    radii, oscs = [], []
    for j in range(1, levels + 1):
        r = radius * 2.0 ** (-j)
        if r < min_cells * mesh.h:
            break
        vals = u.values[_ball_nodes(u, center, r)]
        radii.append(r)
        oscs.append(float(np.max(vals) - np.min(vals)))
    if len(radii) < 2:
        raise ParameterError("fewer than two resolved radii; enlarge R or refine")
    logs_r = np.log(radii)
    logs_o = np.log(np.maximum(oscs, _FLOOR))
    slope = float(np.polyfit(logs_r, logs_o, 1)[0])
    return {"radii": radii, "osc": oscs, "slope": slope}


def sharpness_sweep(alphas, ns, d: int = 2, box: float = 2.0,
                    boundary=None, stability_tol: float = 0.10,
                    rtol: float = 1e-10) -> list[dict]:
    """Radial-power probe: for each exponent alpha solve the Dirichlet problem
    on meshes ns and classify the sup norm as stable (< stability_tol relative
    change per refinement) or growing.

    Solver breakdowns are findings, not crashes: runs that hit the iteration
    cap are recorded with status "no-convergence", runs where the operator
    loses coercivity (a genuinely degenerate alpha) with status "not-coercive".
    """
    from .fields import make_radial_power
    from .solver import ConvergenceError, NotCoerciveError

    if boundary is None:
        boundary = lambda x: x[:, 0]
    out = []
    for alpha in alphas:
        sups, status = [], "ok"
        for n in ns:
            fld, _ = make_radial_power(d, n, alpha, box=box)
            mesh = Mesh(d, n, box, "box")
            t0 = time.time()
            try:
                u = solve_dirichlet(fld, mesh, boundary, rtol=rtol)
                sups.append(float(np.max(np.abs(u.values))))
            except (ConvergenceError, NotCoerciveError) as err:
                status = ("no-convergence" if isinstance(err, ConvergenceError)
                          else "not-coercive")
                out.append({"alpha": alpha, "n": n, "sup": math.nan,
                            "status": status,
                            "residual": getattr(err, "residual", math.nan),
                            "wall_time": time.time() - t0})
                continue
            out.append({"alpha": alpha, "n": n, "sup": sups[-1], "status": "ok",
                        "wall_time": time.time() - t0})
        if len(sups) >= 2:
            rel = max(abs(sups[k + 1] - sups[k]) / max(abs(sups[k]), _FLOOR)
                      for k in range(len(sups) - 1))
            verdict = "stable" if rel < stability_tol else "growing"
        else:
            verdict = "unresolved"
        out.append({"alpha": alpha, "n": 0, "sup": sups[-1] if sups else math.nan,
                    "status": verdict, "max_rel_change": rel if len(sups) >= 2 else math.nan})
    return out
