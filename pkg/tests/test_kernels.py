import math

import numpy as np
import pytest

from flemvi.kernels import (
    InitialLaw,
    KernelKind,
    RelocationKernel,
    admissible_from_perturbation,
    relocation_density,
    reweighted_mixture,
    sample_curvature_weighted,
    sample_ground_mode,
    sample_initial_configuration,
    sample_relocation,
    validate_admissible,
)
from flemvi.measures import EmpiricalMeasure
from flemvi.spectral import DensityMeasure

PI = math.pi


# -- admissibility --------------------------------------------------------------

def test_stationary_profile_admissible(basis_1d):
    prof = DensityMeasure.stationary_profile(basis_1d)
    ad = validate_admissible(prof, 1.6)
    assert ad.c == 1.6
    assert ad.curvature_mass == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        validate_admissible(prof, 1.5)  # ratio bound needs c >= L1 norm here


def test_auto_comparison_constant(basis_1d):
    ad = admissible_from_perturbation(basis_1d, {})
    assert 1.59 < ad.c < 1.61
    ad2 = admissible_from_perturbation(basis_1d, {2: 0.1})
    assert ad2.c > 7.0  # strongly tilted profile needs a large constant


def test_two_mode_perturbation_needs_larger_comparison_constant(basis_1d):
    # the 5% mode-2 tilt already needs c > 2.6 because of the curvature bound
    mu = admissible_from_perturbation(basis_1d, {2: 0.05}).mu
    with pytest.raises(ValueError):
        validate_admissible(mu, 2.0)
    validate_admissible(mu, 2.7)


def test_admissible_rejects_nonpositive_density(basis_1d):
    with pytest.raises(ValueError):
        admissible_from_perturbation(basis_1d, {2: 2.0})


def test_admissible_2d(basis_2d):
    ad = admissible_from_perturbation(basis_2d, {2: 0.05})
    assert ad.c > 1.0
    assert ad.curvature_mass > 0


# -- sampling from densities -----------------------------------------------------

def test_density_sampling_matches_cdf(basis_1d, rng):
    ad = admissible_from_perturbation(basis_1d, {2: 0.1})
    pts = ad.sample(rng, 4000)[:, 0]
    assert np.all((pts > 0) & (pts < PI))
    for q in (0.8, 1.5, 2.3):
        emp = float(np.mean(pts < q))
        exact = float(ad.mu.cdf_1d(q))
        se = math.sqrt(exact * (1 - exact) / len(pts))
        assert abs(emp - exact) < 4 * se + 1e-3


def test_curvature_sampling_in_domain(basis_1d, rng):
    ad = admissible_from_perturbation(basis_1d, {2: 0.05})
    pts = ad.sample_neg_half_laplacian(rng, 500)
    assert np.all(basis_1d.domain.contains_many(pts))


def test_ground_mode_sampling(basis_1d, rng):
    pts = sample_ground_mode(basis_1d, rng, 3000)[:, 0]
    assert np.all((pts > 0) & (pts < PI))
    # ground-mode profile is symmetric about the center
    assert abs(np.mean(pts < PI / 2) - 0.5) < 0.03


# -- mixtures --------------------------------------------------------------------

def test_mixture_weight_normalization(basis_1d):
    law = InitialLaw(
        (
            (2.0, admissible_from_perturbation(basis_1d, {})),
            (6.0, admissible_from_perturbation(basis_1d, {2: 0.05})),
        )
    )
    np.testing.assert_allclose(law.weights, [0.25, 0.75], atol=1e-15)
    assert law.max_c >= 2.6


def test_mixture_rejects_bad_weights(basis_1d):
    ad = admissible_from_perturbation(basis_1d, {})
    with pytest.raises(ValueError):
        InitialLaw(((0.0, ad),))
    with pytest.raises(ValueError):
        InitialLaw(())


def test_pick_component_frequencies(perturbed_law, rng):
    picks = np.array([perturbed_law.pick_component(rng) for _ in range(4000)])
    freq = np.mean(picks == 0)
    se = math.sqrt(0.6 * 0.4 / 4000)
    assert abs(freq - 0.6) < 4 * se


def test_initial_configuration_exchangeable(perturbed_law, rng):
    emp = sample_initial_configuration(perturbed_law, 12, rng)
    assert emp.n == 12
    assert np.all(perturbed_law.basis.domain.contains_many(emp.positions))


# -- relocation kernels ------------------------------------------------------------

def test_kernel_kinds(basis_1d, stationary_law):
    assert RelocationKernel.uniform_survivor().kind is KernelKind.UNIFORM_SURVIVOR
    assert RelocationKernel.ground_mode(basis_1d).kind is KernelKind.GROUND_MODE
    k = RelocationKernel.mixture_reweighted(stationary_law)
    assert k.kind is KernelKind.MIXTURE_REWEIGHTED
    assert k.envelope_c >= 1.0


def test_reweighted_mixture_is_probability(perturbed_law, basis_1d, rng):
    others = rng.uniform(0.3, 2.8, size=(9, 1))
    mixed, rho = reweighted_mixture(perturbed_law, others)
    assert mixed.mass() == pytest.approx(1.0, abs=1e-10)
    assert rho > 0
    grid = basis_1d.interior_grid(256)
    dens = np.array([relocation_density(perturbed_law, others, x) for x in grid])
    assert np.all(dens > -1e-12)
    np.testing.assert_allclose(dens, mixed.density(grid), atol=1e-10)


def test_single_component_relocation_is_the_component(stationary_law, rng):
    #  with one mixture component the reweighting has nothing to reweight
    others = rng.uniform(0.3, 2.8, size=(5, 1))
    mixed, _rho = reweighted_mixture(stationary_law, others)
    np.testing.assert_allclose(
        mixed.coeffs, stationary_law.components[0][1].mu.coeffs, atol=1e-14
    )


def test_sample_relocation_interior(perturbed_law, basis_1d, rng):
    others = rng.uniform(0.3, 2.8, size=(9, 1))
    for kernel in (
        RelocationKernel.uniform_survivor(),
        RelocationKernel.ground_mode(basis_1d),
        RelocationKernel.mixture_reweighted(perturbed_law),
    ):
        for _ in range(25):
            y = sample_relocation(kernel, others, rng)
            assert basis_1d.domain.contains(y)


def test_uniform_survivor_copies_a_survivor(rng):
    kernel = RelocationKernel.uniform_survivor()
    others = np.array([[0.5], [1.5], [2.5]])
    for _ in range(20):
        y = sample_relocation(kernel, others, rng)
        assert any(np.allclose(y, o) for o in others)


# -- curvature-weighted configuration law -------------------------------------------

def test_curvature_weighted_mass(stationary_law, rng):
    n = 6
    masses = []
    for _ in range(400):
        emp, mass = sample_curvature_weighted(stationary_law, n, rng)
        assert emp.n == n
        masses.append(mass)
    # for the stationary profile the total weight is n * curvature mass = n/2
    mean = float(np.mean(masses))
    assert mean == pytest.approx(n * 0.5, abs=1e-12)


def test_curvature_weighted_positions_interior(perturbed_law, rng):
    emp, mass = sample_curvature_weighted(perturbed_law, 5, rng)
    assert np.all(perturbed_law.basis.domain.contains_many(emp.positions))
    assert mass > 0
