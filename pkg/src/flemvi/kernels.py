"""Admissible initial densities, finite-mixture initial laws, and the
relocation kernels driving boundary-triggered jumps.

The admissible class consists of probability densities comparable to the
ground mode from above and below (constant c), whose negative half-Laplacian
is likewise comparable to the ground mode.  Finite mixtures of such densities
make every limit-side integral an exact finite sum plus quadrature.

The configuration-dependent kernel builds, for a relocating particle, the
mixture over components reweighted by the likelihood of the *other* particle
positions and by the mean curvature ratio of those positions; the result is
renormalized to integrate to exactly one, with the pre-normalization mass
kept as a diagnostic (it tends to one as n grows).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .measures import EmpiricalMeasure
from .spectral import DensityMeasure, SpectralBasis, initial_decay_rate

__all__ = [
    "AdmissibleDensity",
    "InitialLaw",
    "KernelKind",
    "RelocationKernel",
    "validate_admissible",
    "admissible_from_perturbation",
    "sample_ground_mode",
    "sample_initial_configuration",
    "relocation_density",
    "reweighted_mixture",
    "sample_relocation",
    "sample_curvature_weighted",
]

_MAX_PROPOSALS = 10**6


@dataclass(frozen=True)
class AdmissibleDensity:
    """A validated member of the admissible class.

    ``mu`` is the probability density (spectral form), ``c`` the comparison
    constant, ``curvature_mass`` the total mass of the negative half-Laplacian
    (equal to minus the initial decay rate of the survival normalizer).
    """

    mu: DensityMeasure
    c: float
    curvature_mass: float

    @property
    def basis(self) -> SpectralBasis:
        return self.mu.basis

    def density_values(self, pts):
        return self.mu.density(pts)

    def neg_half_laplacian_values(self, pts):
        return -self.mu.half_laplacian(pts)

    def sample(self, rng, size=1):
        """i.i.d. draws by rejection against the ground-mode envelope."""
        basis = self.basis
        return _rejection_sample(
            rng,
            size,
            basis,
            target=self.mu.density,
            envelope_factor=self.c,
        )

    def sample_neg_half_laplacian(self, rng, size=1):
        """i.i.d. draws from the normalized negative half-Laplacian."""
        basis = self.basis
        neg_lam1 = -basis.lambdas[0]
        return _rejection_sample(
            rng,
            size,
            basis,
            target=lambda pts: -self.mu.half_laplacian(pts),
            envelope_factor=neg_lam1 * self.c,
        )


def sample_ground_mode(basis: SpectralBasis, rng, size=1):
    """i.i.d. draws from the normalized ground mode, by per-axis inversion."""
    d = basis.domain.dimension
    u = rng.random((size, d))
    out = np.empty((size, d))
    for ax in range(d):
        a = basis.domain.lo[ax]
        L = basis.domain.sides[ax]
        out[:, ax] = a + (L / math.pi) * np.arccos(1.0 - 2.0 * u[:, ax])
    return out


def _rejection_sample(rng, size, basis, target, envelope_factor):
    """Draw from ``target`` (a density up to scale) under the envelope
    envelope_factor times the ground mode, proposing from it normalized."""
    out = np.empty((size, basis.domain.dimension))
    got = 0
    used = 0
    l1_h1 = basis.unit_integrals[0]
    while got < size:
        want = size - got
        batch = min(max(64, int(want * envelope_factor * l1_h1 * 1.2)), 1 << 17)
        if used + batch > _MAX_PROPOSALS + size * 64:
            raise RuntimeError(
                f"rejection sampler exhausted {used} proposals for {size} draws"
            )
        props = sample_ground_mode(basis, rng, batch)
        used += batch
        accept = rng.random(batch) * (envelope_factor * basis.eigenfunction(1, props)) < target(props)
        take = props[accept][:want]
        out[got : got + len(take)] = take
        got += len(take)
    return out


def validate_admissible(d: DensityMeasure, c, grid_per_axis=512) -> AdmissibleDensity:
    """Check the two-sided ground-mode comparisons on a uniform interior grid
    and return the validated density; raises with the violation count."""
    c = float(c)
    if not c > 1.0:
        raise ValueError("comparison constant must exceed 1")
    mass = d.mass()
    if abs(mass - 1.0) > 1e-8:
        raise ValueError(f"density mass {mass!r} is not 1 within 1e-8")
    basis = d.basis
    grid = basis.interior_grid(grid_per_axis)
    h1 = basis.eigenfunction(1, grid)
    dens = d.density(grid)
    neglap = -d.half_laplacian(grid)
    neg_lam1 = -basis.lambdas[0]
    slack = 1e-12
    bad = (
        (dens < h1 / c - slack)
        | (dens > c * h1 + slack)
        | (neglap < neg_lam1 * h1 / c - slack)
        | (neglap > neg_lam1 * c * h1 + slack)
    )
    if bad.any():
        idx = np.flatnonzero(bad)
        raise ValueError(
            f"admissibility bounds violated at {len(idx)} of {len(grid)} grid "
            f"points for c={c:g} (first at {tuple(grid[idx[0]])})"
        )
    K = -initial_decay_rate(d)
    if not K > 0.0:
        raise ValueError(f"curvature mass {K!r} is not positive")
    return AdmissibleDensity(d, c, K)


def admissible_from_perturbation(basis, higher_coeffs, c=None, c_cap=10.0):
    """Density proportional to the ground mode plus higher-mode terms.

    ``higher_coeffs`` is either a mapping {mode index >= 2: amplitude} or a
    sequence giving amplitudes for modes 2, 3, ...  With c=None the smallest
    valid constant is found on the validation grid (with a tiny safety
    margin) and rejected if it exceeds ``c_cap``.
    """
    raw = np.zeros(basis.K)
    raw[0] = 1.0
    if isinstance(higher_coeffs, dict):
        items = higher_coeffs.items()
    else:
        items = enumerate(higher_coeffs, start=2)
    for k, a_k in items:
        k = int(k)
        if not 2 <= k <= basis.K:
            raise ValueError(f"perturbation mode {k} out of range 2..{basis.K}")
        raw[k - 1] = float(a_k)
    Z = math.fsum(raw * basis.unit_integrals)
    if Z <= 0:
        raise ValueError("perturbation destroys the positivity of the total mass")
    d = DensityMeasure(basis, raw / Z, 1.0)
    if c is None:
        grid = basis.interior_grid()
        h1 = basis.eigenfunction(1, grid)
        dens = d.density(grid)
        neglap = -d.half_laplacian(grid)
        neg_lam1 = -basis.lambdas[0]
        if dens.min() <= 0.0 or neglap.min() <= 0.0:
            raise ValueError("density or its curvature loses positivity")
        c_min = max(
            float((dens / h1).max()),
            float((h1 / dens).max()),
            float((neglap / (neg_lam1 * h1)).max()),
            float(((neg_lam1 * h1) / neglap).max()),
        )
        c = c_min * (1.0 + 1e-9)
        if c > c_cap:
            raise ValueError(
                f"smallest admissible constant {c:.4f} exceeds the cap {c_cap:g}"
            )
    return validate_admissible(d, c)


@dataclass(frozen=True)
class InitialLaw:
    """Finite mixture over admissible densities; weights normalized."""

    components: tuple

    def __post_init__(self):
        comps = tuple((float(w), ad) for w, ad in self.components)
        if not comps:
            raise ValueError("mixture needs at least one component")
        if any(w <= 0 for w, _ in comps):
            raise ValueError("mixture weights must be positive")
        total = math.fsum(w for w, _ in comps)
        comps = tuple((w / total, ad) for w, ad in comps)
        first = comps[0][1].basis
        if any(ad.basis is not first for _, ad in comps[1:]):
            raise ValueError("all components must share one basis")
        object.__setattr__(self, "components", comps)

    @classmethod
    def single(cls, ad: AdmissibleDensity):
        return cls(((1.0, ad),))

    @property
    def basis(self) -> SpectralBasis:
        return self.components[0][1].basis

    @property
    def weights(self):
        return np.array([w for w, _ in self.components])

    @property
    def max_c(self) -> float:
        return max(ad.c for _, ad in self.components)

    def pick_component(self, rng) -> int:
        return int(rng.choice(len(self.components), p=self.weights))


class KernelKind(enum.Enum):
    UNIFORM_SURVIVOR = "uniform_survivor"
    GROUND_MODE = "ground_mode"
    MIXTURE_REWEIGHTED = "lll"


@dataclass(frozen=True)
class RelocationKernel:
    """Where a boundary-hitting particle reappears.

    UNIFORM_SURVIVOR copies a uniformly chosen other atom; GROUND_MODE draws
    from the normalized ground mode regardless of the configuration;
    MIXTURE_REWEIGHTED draws from the configuration-reweighted mixture.  ``envelope_c`` is
    the declared two-sided ground-mode comparison constant for the kernel
    density (None when the kernel has no density, i.e. atom copying).
    """

    kind: KernelKind
    basis: SpectralBasis = None
    law: InitialLaw = None
    envelope_c: float = None

    @classmethod
    def uniform_survivor(cls):
        return cls(KernelKind.UNIFORM_SURVIVOR)

    @classmethod
    def ground_mode(cls, basis: SpectralBasis):
        u1 = basis.unit_integrals[0]
        return cls(KernelKind.GROUND_MODE, basis=basis, envelope_c=max(u1, 1.0 / u1))

    @classmethod
    def mixture_reweighted(cls, law: InitialLaw):
        return cls(
            KernelKind.MIXTURE_REWEIGHTED, basis=law.basis, law=law, envelope_c=law.max_c**3
        )


def _mixture_log_weights(law: InitialLaw, others):
    """Per-component logs of w_m * L_m * prod_j d_m(z_j) (mixture numerator)
    and of w_m * K_m * prod_j d_m(z_j) (mass denominator)."""
    others = np.atleast_2d(np.asarray(others, dtype=float))
    n = len(others) + 1
    log_num = np.empty(len(law.components))
    log_den = np.empty(len(law.components))
    for m, (w, ad) in enumerate(law.components):
        dens = ad.density_values(others)
        neglap = ad.neg_half_laplacian_values(others)
        log_prod = math.fsum(np.log(dens))
        likelihood = math.fsum(neglap / dens) / n
        log_num[m] = math.log(w) + math.log(likelihood) + log_prod
        log_den[m] = math.log(w) + math.log(ad.curvature_mass) + log_prod
    return log_num, log_den


def reweighted_mixture(law: InitialLaw, others):
    """Renormalized relocation density as a DensityMeasure, plus the
    pre-normalization mass diagnostic (tends to 1 as n grows)."""
    log_num, log_den = _mixture_log_weights(law, others)
    alpha = np.exp(log_num - logsumexp(log_num))
    alpha = alpha / math.fsum(alpha)
    rho = float(math.exp(logsumexp(log_num) - logsumexp(log_den)))
    coeffs = np.zeros(law.basis.K)
    for a_m, (_, ad) in zip(alpha, law.components):
        coeffs += a_m * ad.mu.coeffs
    return DensityMeasure(law.basis, coeffs, 1.0), rho


def relocation_density(law: InitialLaw, others, x) -> float:
    """Relocation-density value at x given the other particle positions."""
    measure, _ = reweighted_mixture(law, others)
    return float(measure.density(x)[0])


def _mixture_component_probs(law: InitialLaw, others):
    if len(law.components) == 1:
        return np.ones(1)
    log_num, _ = _mixture_log_weights(law, others)
    alpha = np.exp(log_num - logsumexp(log_num))
    return alpha / math.fsum(alpha)


def sample_relocation(kernel: RelocationKernel, others, rng):
    """Draw the reappearance point given the other particles' positions."""
    if kernel.kind is KernelKind.UNIFORM_SURVIVOR:
        others = np.atleast_2d(np.asarray(others, dtype=float))
        if len(others) == 0:
            raise ValueError("no surviving particle to copy from")
        return others[int(rng.integers(len(others)))].copy()
    if kernel.kind is KernelKind.GROUND_MODE:
        return sample_ground_mode(kernel.basis, rng, 1)[0]
    if kernel.kind is KernelKind.MIXTURE_REWEIGHTED:
        alpha = _mixture_component_probs(kernel.law, others)
        m = int(rng.choice(len(alpha), p=alpha))
        return kernel.law.components[m][1].sample(rng, 1)[0]
    raise ValueError(f"unknown kernel kind {kernel.kind!r}")


def sample_initial_configuration(law: InitialLaw, n: int, rng) -> EmpiricalMeasure:
    """Exchangeable initial configuration: one mixture component for the
    whole configuration, atoms i.i.d. from it."""
    if n < 1:
        raise ValueError("need at least one particle")
    m = law.pick_component(rng)
    atoms = law.components[m][1].sample(rng, n)
    return EmpiricalMeasure(law.basis.domain, atoms)


def sample_curvature_weighted(law: InitialLaw, n: int, rng):
    """Sample a configuration from the normalized curvature-weighted law.

    One component is drawn proportionally to weight times curvature mass,
    one atom position from the normalized negative half-Laplacian, the rest
    i.i.d. from the component density.  Returns (configuration, total mass),
    the total mass being n times the mixture curvature mass.
    """
    if n < 1:
        raise ValueError("need at least one particle")
    wK = np.array([w * ad.curvature_mass for w, ad in law.components])
    total_mass = float(n * math.fsum(wK))
    m = int(rng.choice(len(wK), p=wK / wK.sum()))
    ad = law.components[m][1]
    i = int(rng.integers(n))
    special = ad.sample_neg_half_laplacian(rng, 1)[0]
    if n == 1:
        atoms = special[None, :]
    else:
        rest = ad.sample(rng, n - 1)
        atoms = np.insert(rest, i, special, axis=0)
    return EmpiricalMeasure(law.basis.domain, atoms), total_mass
