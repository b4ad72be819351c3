"""Weighted annulus cutoffs: shell binning against the circumference law,
the explicit radial optimum and its closed forms, the direct capacity solve,
radial-dominance and Hoelder-chain invariants, and the annulus-bound audit."""

import math

import numpy as np
import pytest

from dhlab.cutoff import (
    direct_cutoff_optimum,
    holder_shell_bound,
    optimal_radial_cutoff,
    radial_competitor_energy,
    shell_energy,
    shell_integrals,
    shell_profile_from_function,
    verify_cutoff_bound,
)
from dhlab.exponents import ParameterError, profile_of_field
from dhlab.fields import FieldSpec, make_constant, sample_random
from dhlab.solver import Mesh, ScalarField, element_mean_square, solve_dirichlet

TWO_PI_OVER_LN2 = 2.0 * math.pi / math.log(2.0)


def unit_setup(n, box=2.2):
    mesh = Mesh(2, n, box, "box")
    prof = profile_of_field(make_constant(2, n, np.eye(2), box=box))
    v = ScalarField(mesh=mesh, values=np.ones(mesh.n_nodes))
    return mesh, prof, v


def random_pair(seed, n=64, box=4.2):
    """Dirichlet solution and ellipticity profile of one random scalar field."""
    spec = FieldSpec(d=2, n=n, p0=4.0, q0=4.0, seed=seed, box=box)
    field = sample_random(spec)
    mesh = Mesh(2, n, box, "box")
    v = solve_dirichlet(field, mesh, lambda pts: pts[:, 0])
    return v, profile_of_field(field)


def _profile_with_mass(edges, mass):
    from dhlab.cutoff import ShellProfile
    return ShellProfile(rho=float(edges[0]), sigma=float(edges[-1]),
                        edges=np.asarray(edges, float),
                        mass=np.asarray(mass, float),
                        counts=np.ones(len(mass), dtype=np.int64))


class TestShellIntegrals:
    def test_circumference_law(self):
        # mu v^2 = 1: shell masses recover m(r) = 2 pi r within 2%
        _, prof, v = unit_setup(256)
        sp = shell_integrals(v, prof, 0.25, 1.0, m=32)
        mids = 0.5 * (sp.edges[:-1] + sp.edges[1:])
        rel = np.max(np.abs(sp.mass - 2.0 * np.pi * mids) / (2.0 * np.pi * mids))
        assert rel <= 0.02
        assert not sp.merged

    def test_refinement_shrinks_binning_error(self):
        errs = {}
        for n in (64, 128):
            _, prof, v = unit_setup(n)
            sp = shell_integrals(v, prof, 0.25, 1.0, m=16)
            mids = 0.5 * (sp.edges[:-1] + sp.edges[1:])
            errs[n] = np.max(np.abs(sp.mass - 2.0 * np.pi * mids) / (2.0 * np.pi * mids))
        assert errs[64] / errs[128] >= 1.7

    def test_zero_function_zero_mass(self):
        mesh, prof, _ = unit_setup(32)
        zero = ScalarField(mesh=mesh, values=np.zeros(mesh.n_nodes))
        sp = shell_integrals(zero, prof, 0.25, 1.0, m=8)
        np.testing.assert_array_equal(sp.mass, 0.0)

    def test_total_matches_element_quadrature(self):
        v, prof = random_pair(0, n=32)
        sp = shell_integrals(v, prof, 0.8, 1.9, m=8)
        mesh = v.mesh
        radii = np.linalg.norm(mesh.centroids, axis=1)
        inside = (radii >= 0.8) & (radii < 1.9)
        mu = prof.mu[_cells(mesh, prof)]
        direct = float(np.sum((mu * mesh.volume * element_mean_square(v))[inside]))
        np.testing.assert_allclose(sp.total(), direct, rtol=1e-12)

    def test_empty_shells_merged_and_flagged(self):
        _, prof, v = unit_setup(16)
        sp = shell_integrals(v, prof, 0.25, 1.0, m=64)
        assert sp.merged
        assert np.all(sp.counts > 0)
        assert np.all(np.diff(sp.edges) > 0)
        assert sp.edges[0] == 0.25 and sp.edges[-1] == 1.0
        # merging only re-bins: the annulus integral is preserved
        fine = shell_integrals(v, prof, 0.25, 1.0, m=8)
        np.testing.assert_allclose(sp.total(), fine.total(), rtol=1e-12)

    def test_bad_annulus_rejected(self):
        _, prof, v = unit_setup(16)
        with pytest.raises(ParameterError):
            shell_integrals(v, prof, 1.0, 0.5)
        with pytest.raises(ParameterError):
            shell_integrals(v, prof, -0.1, 0.5)


def _cells(mesh, prof):
    from dhlab.cutoff import _profile_cells
    return _profile_cells(mesh, prof)


class TestRadialOptimum:
    def test_constant_mass_linear_cutoff(self):
        sp = shell_profile_from_function(lambda r: 3.7, 1.0, 2.0, 20)
        rc = optimal_radial_cutoff(sp)
        np.testing.assert_allclose(rc.j_value, 3.7, rtol=1e-12)
        np.testing.assert_allclose(rc.eta_edges, np.linspace(1.0, 0.0, 21),
                                   atol=1e-12)

    def test_annulus_capacity_closed_form(self):
        # m(r) = 2 pi r on (1,2): J = (int dr/(2 pi r))^{-1} = 2 pi / ln 2
        sp = shell_profile_from_function(lambda r: 2.0 * np.pi * r, 1.0, 2.0, 4096)
        rc = optimal_radial_cutoff(sp)
        np.testing.assert_allclose(rc.j_value, TWO_PI_OVER_LN2, rtol=1e-6)

    def test_shell_route_matches_capacity(self):
        _, prof, v = unit_setup(256, box=4.2)
        sp = shell_integrals(v, prof, 1.0, 2.0, m=32)
        rc = optimal_radial_cutoff(sp)
        assert abs(rc.j_value - TWO_PI_OVER_LN2) / TWO_PI_OVER_LN2 <= 0.015

    def test_cutoff_profile_contract(self):
        rng = np.random.default_rng(7)
        sp = _profile_with_mass(np.linspace(1.0, 2.0, 17), rng.uniform(0.2, 5.0, 16))
        for eps in (0.0, 0.3):
            rc = optimal_radial_cutoff(sp, eps=eps)
            assert rc.eta_edges[0] == 1.0 and rc.eta_edges[-1] == 0.0
            assert np.all(np.diff(rc.eta_edges) <= 1e-12)
            # eta'(r) = -J/(m + eps) shell by shell
            slopes = np.diff(rc.eta_edges) / sp.widths
            np.testing.assert_allclose(slopes * (sp.mass + eps), -rc.j_value,
                                       rtol=1e-10)
            # plugging the minimizer back reproduces J
            np.testing.assert_allclose(shell_energy(rc), rc.j_value, rtol=1e-8)

    def test_eps_monotone_and_continuous_at_zero(self):
        rng = np.random.default_rng(11)
        sp = _profile_with_mass(np.linspace(0.5, 2.0, 13), rng.uniform(0.1, 3.0, 12))
        values = [optimal_radial_cutoff(sp, eps=e).j_value
                  for e in (0.0, 1e-12, 1e-2, 0.1, 1.0, 10.0)]
        assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))
        assert abs(values[1] - values[0]) <= 1e-9 * values[0]

    def test_large_eps_forces_linear_cutoff(self):
        sp = shell_profile_from_function(lambda r: 2.0 * np.pi * r, 1.0, 2.0, 64)
        rc = optimal_radial_cutoff(sp, eps=1e12)
        np.testing.assert_allclose(rc.eta_edges, np.linspace(1.0, 0.0, 65),
                                   atol=1e-6)

    def test_zero_shell_degenerates(self):
        mass = np.array([1.0, 0.0, 2.0])
        sp = _profile_with_mass(np.linspace(1.0, 2.0, 4), mass)
        rc = optimal_radial_cutoff(sp, eps=0.0)
        assert rc.degenerate and rc.j_value == 0.0
        # the minimizing sequence concentrates its drop in the zero shell
        np.testing.assert_array_equal(rc.eta_edges, [1.0, 1.0, 0.0, 0.0])
        reg = optimal_radial_cutoff(sp, eps=0.5)
        assert not reg.degenerate and reg.j_value > 0.0

    def test_negative_eps_rejected(self):
        sp = shell_profile_from_function(lambda r: 1.0, 1.0, 2.0, 4)
        with pytest.raises(ParameterError):
            optimal_radial_cutoff(sp, eps=-1e-3)

    def test_eta_of_r_clamps(self):
        sp = shell_profile_from_function(lambda r: 1.0, 1.0, 2.0, 4)
        rc = optimal_radial_cutoff(sp)
        r = np.array([0.0, 0.5, 1.0, 2.0, 3.0])
        vals = rc.eta_of_r(r)
        np.testing.assert_array_equal(vals[:3], [1.0, 1.0, 1.0])
        np.testing.assert_array_equal(vals[3:], [0.0, 0.0])


class TestHolderChain:
    def test_gamma_one_equality_for_constant_mass(self):
        sp = shell_profile_from_function(lambda r: 2.5, 1.0, 2.0, 16)
        rc = optimal_radial_cutoff(sp)
        np.testing.assert_allclose(holder_shell_bound(sp, 1.0), rc.j_value,
                                   rtol=1e-12)

    @pytest.mark.parametrize("gamma", [0.5, 1.0 / 3.0, 1.0])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_bound_dominates_radial_optimum(self, gamma, seed):
        rng = np.random.default_rng(seed)
        sp = _profile_with_mass(np.linspace(1.0, 2.0, 25), rng.uniform(0.05, 8.0, 24))
        rc = optimal_radial_cutoff(sp)
        assert rc.j_value <= holder_shell_bound(sp, gamma) * (1.0 + 1e-12)

    def test_gamma_range_checked(self):
        sp = shell_profile_from_function(lambda r: 1.0, 1.0, 2.0, 4)
        for gamma in (0.0, -0.5, 1.5):
            with pytest.raises(ParameterError):
                holder_shell_bound(sp, gamma)


class TestDirectOptimum:
    def test_annulus_capacity(self):
        # constant weight: the discrete capacity approaches 2 pi / ln 2
        _, prof, v = unit_setup(256, box=4.2)
        dc = direct_cutoff_optimum(v, prof, 1.0, 2.0)
        assert abs(dc.j_value - TWO_PI_OVER_LN2) / TWO_PI_OVER_LN2 <= 0.03
        vals = dc.eta.values
        assert np.all(vals[dc.inner_nodes] == 1.0)
        assert np.all(vals[dc.outer_nodes] == 0.0)
        assert vals.min() >= -1e-10 and vals.max() <= 1.0 + 1e-10

    def test_zero_weight_inside_annulus(self):
        # v vanishing on B_sigma: nothing to cut off, J = 0
        mesh, prof, _ = unit_setup(64, box=4.2)
        radii = np.linalg.norm(mesh.nodes, axis=1)
        v = ScalarField(mesh=mesh, values=np.where(radii >= 2.05, 1.0, 0.0))
        dc = direct_cutoff_optimum(v, prof, 1.0, 2.0)
        assert dc.j_value <= 1e-14

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_radial_dominance(self, seed):
        # radial cutoffs are admissible: the direct optimum can only undercut
        # both the interpolated competitor (exactly) and J1d (5% slack)
        v, prof = random_pair(seed)
        dc = direct_cutoff_optimum(v, prof, 1.0, 2.0)
        sp = shell_integrals(v, prof, 1.0, 2.0)
        rc = optimal_radial_cutoff(sp)
        interp = radial_competitor_energy(v, prof, rc)
        assert dc.j_value <= interp * (1.0 + 1e-8)
        assert dc.j_value <= rc.j_value * 1.05

    def test_requires_box_mesh(self):
        mesh = Mesh(2, 16, 4.2, "torus")
        prof = profile_of_field(make_constant(2, 16, np.eye(2), box=4.2,
                                              mode="torus"))
        v = ScalarField(mesh=mesh, values=np.ones(mesh.n_nodes))
        with pytest.raises(ParameterError):
            direct_cutoff_optimum(v, prof, 1.0, 2.0)

    def test_unresolved_inner_ball_rejected(self):
        mesh, prof, v = unit_setup(16)
        with pytest.raises(ParameterError):
            direct_cutoff_optimum(v, prof, 1e-6, 1.0, center=(0.013, 0.021))


class TestVerifyBound:
    def test_unit_function_closed_form_pieces(self):
        _, prof, v = unit_setup(128, box=4.2)
        rep = verify_cutoff_bound(v, prof, 2, 1.0, 2.0)
        area = rep["mu_norm"] ** 2  # |annulus|^{1/p} with mu = 1, p = 2
        np.testing.assert_allclose(area, 3.0 * np.pi, rtol=0.01)
        assert rep["grad_norm"] == 0.0
        assert rep["passed"] and math.isfinite(rep["c_emp"])

    def test_stable_under_refinement(self):
        vals = {}
        for n in (64, 128):
            _, prof, v = unit_setup(n, box=4.2)
            vals[n] = verify_cutoff_bound(v, prof, 2, 1.0, 2.0)["c_emp"]
        assert abs(vals[64] - vals[128]) / vals[128] <= 0.15

    def test_zero_function_guarded(self):
        mesh, prof, _ = unit_setup(32, box=4.2)
        zero = ScalarField(mesh=mesh, values=np.zeros(mesh.n_nodes))
        rep = verify_cutoff_bound(zero, prof, 2, 1.0, 2.0)
        assert not rep["passed"]

    def test_exponent_range(self):
        _, prof, v = unit_setup(32, box=4.2)
        with pytest.raises(ParameterError):
            verify_cutoff_bound(v, prof, 0.9, 1.0, 2.0)
        mesh3 = Mesh(3, 8, 4.2, "box")
        prof3 = profile_of_field(make_constant(3, 8, np.eye(3), box=4.2))
        v3 = ScalarField(mesh=mesh3, values=np.ones(mesh3.n_nodes))
        with pytest.raises(ParameterError):
            verify_cutoff_bound(v3, prof3, 1, 1.0, 2.0)  # needs p > (d-1)/2 = 1

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_random_fields_finite_ratio(self, seed):
        v, prof = random_pair(seed, n=32)
        rep = verify_cutoff_bound(v, prof, 2, 1.0, 2.0)
        assert rep["passed"]
        assert 0.0 < rep["c_emp"] < math.inf
