"""State-space objects: empirical measures on the boundary-collapsed box,
cylinder observables, the collapse metric, a bounded-Lipschitz distance over
a fixed dictionary, and the n-particle (pre-limit) generator.

Boundary handling follows one convention everywhere: the whole boundary is a
single point of the state space, every eigenfunction (and dictionary entry)
vanishes there, and an atom parked on the boundary therefore contributes zero
to all pairings while still counting in the atom total n.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Domain
from .spectral import DensityMeasure, SpectralBasis

__all__ = [
    "BOUNDARY",
    "EmpiricalMeasure",
    "CylinderFunction",
    "boundary_glued_metric",
    "pair",
    "cylinder_value",
    "bl_distance",
    "default_dictionary",
    "discrete_generator",
    "write_atoms_csv",
    "read_atoms_csv",
]


class _Boundary:
    """Sentinel for the collapsed boundary point."""

    __slots__ = ()

    def __repr__(self):
        return "<boundary>"


BOUNDARY = _Boundary()


def boundary_glued_metric(domain: Domain, x, y) -> float:
    """Collapse metric: Euclidean distance capped by the sum of the two
    boundary distances; the collapsed boundary point is at distance
    dist_to_boundary from any interior point and 0 from itself."""
    x_bdry = x is BOUNDARY or domain.on_boundary(x)
    y_bdry = y is BOUNDARY or domain.on_boundary(y)
    if x_bdry and y_bdry:
        return 0.0
    if x_bdry:
        return float(domain.dist_to_boundary(y))
    if y_bdry:
        return float(domain.dist_to_boundary(x))
    p = np.asarray(x, dtype=float)
    q = np.asarray(y, dtype=float)
    euc = float(np.linalg.norm(p - q))
    via_boundary = domain.dist_to_boundary(p) + domain.dist_to_boundary(q)
    return min(euc, via_boundary)


@dataclass(eq=False)
class EmpiricalMeasure:
    """Uniform measure (weight 1/n each) on n atoms in the closed box.

    ``positions`` keeps coordinates for every atom, including boundary ones
    (useful for logs); ``boundary_mask`` marks which atoms sit on the
    collapsed boundary and hence pair to zero.
    """

    domain: Domain
    positions: np.ndarray
    boundary_mask: np.ndarray = None

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.positions.shape[1] != self.domain.dimension:
            raise ValueError("atom coordinates do not match the domain dimension")
        if self.boundary_mask is None:
            self.boundary_mask = np.zeros(len(self.positions), dtype=bool)
        else:
            self.boundary_mask = np.asarray(self.boundary_mask, dtype=bool)
        if self.boundary_mask.shape != (len(self.positions),):
            raise ValueError("boundary mask length does not match atom count")
        interior = self.positions[~self.boundary_mask]
        if len(interior) and not np.all(self.domain.contains_many(interior)):
            raise ValueError("non-boundary atom outside the open domain")

    @property
    def n(self) -> int:
        return len(self.positions)

    @property
    def interior_positions(self) -> np.ndarray:
        return self.positions[~self.boundary_mask]

    def with_atom(self, i, position, on_boundary=False):
        """Copy with atom i replaced."""
        pos = self.positions.copy()
        pos[i] = np.asarray(position, dtype=float)
        mask = self.boundary_mask.copy()
        mask[i] = on_boundary
        return EmpiricalMeasure(self.domain, pos, mask)


@dataclass(frozen=True)
class CylinderFunction:
    """Observable of the form phi applied to finitely many eigenfunction
    pairings of the measure.

    ``grad`` and ``hess`` return the gradient vector and Hessian matrix of
    phi at an argument vector; they must stay bounded on the reachable box
    of pairings (automatic for the polynomial builders below).
    """

    mode_indices: tuple
    phi: object
    grad: object
    hess: object
    name: str = "cylinder"

    @property
    def n_modes(self) -> int:
        return len(self.mode_indices)

    @classmethod
    def constant(cls, value=1.0):
        v = float(value)
        return cls(
            (),
            lambda a: v,
            lambda a: np.zeros(0),
            lambda a: np.zeros((0, 0)),
            name=f"const[{v:g}]",
        )

    @classmethod
    def coordinate(cls, k):
        """The linear observable: pairing with eigenfunction k."""
        return cls(
            (int(k),),
            lambda a: float(a[0]),
            lambda a: np.ones(1),
            lambda a: np.zeros((1, 1)),
            name=f"pair[{k}]",
        )

    @classmethod
    def polynomial(cls, mode_indices, terms, name=None):
        """phi(x) = sum of coef * prod_i x_i^p_i over ``terms``.

        ``terms`` is a list of (coef, powers) with one integer power per
        mode index.  Derivatives are exact (symbolic on the monomials).
        """
        mode_indices = tuple(int(k) for k in mode_indices)
        r = len(mode_indices)
        clean = []
        for coef, powers in terms:
            powers = tuple(int(p) for p in powers)
            if len(powers) != r:
                raise ValueError("each power tuple needs one entry per mode")
            if any(p < 0 for p in powers):
                raise ValueError("negative powers are not allowed")
            clean.append((float(coef), powers))

        def _d(coef, powers, i):
            if powers[i] == 0:
                return 0.0, powers
            q = list(powers)
            q[i] -= 1
            return coef * powers[i], tuple(q)

        def _eval(terms_, a):
            return math.fsum(
                c * np.prod(np.asarray(a, dtype=float) ** np.array(p))
                for c, p in terms_
                if c != 0.0
            )

        def phi(a):
            return float(_eval(clean, a))

        def grad(a):
            out = np.empty(r)
            for i in range(r):
                out[i] = _eval([_d(c, p, i) for c, p in clean], a)
            return out

        def hess(a):
            out = np.empty((r, r))
            for i in range(r):
                di = [_d(c, p, i) for c, p in clean]
                for j in range(r):
                    out[i, j] = _eval([_d(c, p, j) for c, p in di], a)
            return out

        if name is None:
            name = "poly[" + ",".join(str(k) for k in mode_indices) + "]"
        return cls(mode_indices, phi, grad, hess, name=name)


def pair(k, mu, basis: SpectralBasis = None) -> float:
    """Pairing of eigenfunction k with a measure.

    DensityMeasure: the stored coefficient.  EmpiricalMeasure: average of
    eigenfunction k over the atoms, boundary atoms contributing zero
    (needs ``basis``).
    """
    if isinstance(mu, DensityMeasure):
        return mu.pair(k)
    if basis is None:
        raise ValueError("pairing with an empirical measure needs a basis")
    interior = mu.interior_positions
    if len(interior) == 0:
        return 0.0
    vals = basis.eigenfunction(k, interior)
    return float(math.fsum(vals) / mu.n)


def cylinder_value(f: CylinderFunction, mu, basis: SpectralBasis = None) -> float:
    """Evaluate a cylinder observable on either kind of measure."""
    args = np.array([pair(k, mu, basis) for k in f.mode_indices])
    return float(f.phi(args))


@dataclass(frozen=True)
class _DictEntry:
    """Dictionary test function: ``fn`` on interior points, zero on the
    boundary, Lipschitz-1 for the collapse metric and bounded by 1."""

    name: str
    fn: object


def _entry_integral(entry: _DictEntry, mu, basis: SpectralBasis = None) -> float:
    if isinstance(mu, DensityMeasure):
        return mu.basis.integrate(
            lambda pts: entry.fn(pts) * mu.density(pts)
        )
    interior = mu.interior_positions
    if len(interior) == 0:
        return 0.0
    return float(math.fsum(entry.fn(interior)) / mu.n)


def bl_distance(mu1, mu2, dictionary, basis: SpectralBasis = None) -> float:
    """max over the dictionary of |integral against mu1 - integral against
    mu2| — a lower bound for the bounded-Lipschitz distance."""
    if not dictionary:
        raise ValueError("empty test-function dictionary")
    diffs = [
        abs(_entry_integral(e, mu1, basis) - _entry_integral(e, mu2, basis))
        for e in dictionary
    ]
    return max(diffs)


def _grad_sup_bound(basis: SpectralBasis, k) -> float:
    """Upper bound on the sup of |gradient of eigenfunction k| (exact in 1D)."""
    multi = basis.mode_indices[k - 1]
    sides = basis.domain.sides
    if basis.domain.dimension == 1:
        (j,) = multi
        (L,) = sides
        return math.sqrt(2.0 / L) * j * math.pi / L
    amp = math.sqrt(4.0 / (sides[0] * sides[1]))
    return amp * math.hypot(
        multi[0] * math.pi / sides[0], multi[1] * math.pi / sides[1]
    )


def default_dictionary(basis: SpectralBasis, n_modes=8, n_tents=8):
    """Eigenfunctions rescaled to Lipschitz-1 plus tent functions.

    A function vanishing on the boundary with Euclidean Lipschitz constant 1
    is automatically Lipschitz-1 for the collapse metric, so rescaling by the
    gradient sup makes the modes admissible; tents of height at most the
    center's boundary distance (clipped at 1) are admissible the same way.
    """
    entries = []
    for k in range(1, min(n_modes, basis.K) + 1):
        scale = 1.0 / _grad_sup_bound(basis, k)
        entries.append(
            _DictEntry(f"mode{k}", lambda pts, k=k, s=scale: s * basis.eigenfunction(k, pts))
        )

    domain = basis.domain
    if domain.dimension == 1:
        fracs = (np.arange(n_tents) + 1.0) / (n_tents + 1.0)
        centers = [np.array([domain.lo[0] + f * domain.sides[0]]) for f in fracs]
    else:
        rel = [
            (i, j)
            for i in (0.25, 0.5, 0.75)
            for j in (0.25, 0.5, 0.75)
            if (i, j) != (0.5, 0.5)
        ][:n_tents]
        centers = [
            np.array(
                [
                    domain.lo[0] + i * domain.sides[0],
                    domain.lo[1] + j * domain.sides[1],
                ]
            )
            for i, j in rel
        ]
    for idx, m in enumerate(centers):
        w = min(1.0, domain.dist_to_boundary(m))

        def tent(pts, m=m, w=w):
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            return np.maximum(0.0, w - np.linalg.norm(pts - m, axis=1))

        entries.append(_DictEntry(f"tent{idx}", tent))
    return entries


def discrete_generator(f: CylinderFunction, mu: EmpiricalMeasure, basis: SpectralBasis) -> float:
    """n-particle generator on a cylinder observable.

    First-order part: eigenvalue- and gradient-weighted sum of the
    observable's pairings.  Diffusive
    correction: (1/2n) sum over (i, j) of d2phi/dx_i dx_j times the pairing
    of atom-averaged eigenfunction-gradient dots.  Equals half the flat
    Laplacian of the
    lifted function on the n-fold product domain.
    """
    if mu.boundary_mask.any():
        raise ValueError("discrete generator needs every atom interior")
    args = np.array([pair(k, mu, basis) for k in f.mode_indices])
    g = np.asarray(f.grad(args), dtype=float)
    lams = np.array([basis.lambdas[k - 1] for k in f.mode_indices])
    first = math.fsum(g * lams * args)
    if f.n_modes == 0:
        return float(first)
    H = np.asarray(f.hess(args), dtype=float)
    grads = np.stack([basis.eigenfunction_gradient(k, mu.positions) for k in f.mode_indices])
    dots = np.einsum("ind,jnd->ij", grads, grads) / mu.n  # atom-averaged gradient dots
    second = math.fsum((H * dots).ravel()) / (2.0 * mu.n)
    return float(first + second)


def write_atoms_csv(mu: EmpiricalMeasure, path):
    """One row per atom: x1[,x2],boundary (17-significant-digit floats)."""
    cols = [f"x{i + 1}" for i in range(mu.domain.dimension)] + ["boundary"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row, flag in zip(mu.positions, mu.boundary_mask):
            writer.writerow([format(v, ".17g") for v in row] + [int(flag)])


def read_atoms_csv(domain: Domain, path) -> EmpiricalMeasure:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-1] != "boundary" or len(header) != domain.dimension + 1:
            raise ValueError(f"unexpected atom-CSV header: {header}")
        positions, mask = [], []
        for row in reader:
            positions.append([float(v) for v in row[:-1]])
            mask.append(bool(int(row[-1])))
    return EmpiricalMeasure(domain, np.array(positions), np.array(mask))
