"""Cubic B-spline basis: evaluation, Gram and roughness matrices.

Every curve in the package is carried as a coefficient vector on a
:class:`BasisSpec`, so inner products and integrals reduce to quadratic
forms in the (exact) Gram matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .exceptions import DomainError

DEGREE = 3  # cubic splines throughout

# Gauss-Legendre order per knot span; order 5 integrates products of two
# cubic pieces (degree 6) exactly.
_QUAD_ORDER = 5


def _clamped_knots(domain, n_basis, interior=None):
    a, b = float(domain[0]), float(domain[1])
    if not b > a:
        raise DomainError(f"domain must satisfy a < b, got [{a}, {b}]")
    if interior is None:
        interior = np.linspace(a, b, n_basis - DEGREE + 1)[1:-1]
    else:
        interior = np.asarray(interior, dtype=float)
        if interior.size != n_basis - DEGREE - 1:
            raise ValueError(
                f"{n_basis} basis functions need {n_basis - DEGREE - 1} interior knots, "
                f"got {interior.size}"
            )
        if np.any(np.diff(interior) < 0) or np.any(interior <= a) or np.any(interior >= b):
            raise ValueError("interior knots must be nondecreasing and strictly inside the domain")
    return np.r_[[a] * (DEGREE + 1), interior, [b] * (DEGREE + 1)]


@dataclass(frozen=True)
class BasisSpec:
    """Clamped cubic B-spline basis on a closed interval.

    Parameters
    ----------
    domain : (float, float)
        Closed interval [a, b] of the curve argument.
    n_basis : int
        Number of basis functions, at least 4 (= cubic order).
    penalty : float, default 0.0
        Nonnegative roughness penalty applied to the integrated squared
        second derivative when smoothing raw data.
    interior_knots : array-like, optional
        Interior knots; uniform by default.
    """

    domain: tuple[float, float]
    n_basis: int
    penalty: float = 0.0
    interior_knots: tuple = field(default=None)

    def __post_init__(self):
        if self.n_basis < DEGREE + 1:
            raise ValueError(f"n_basis must be >= {DEGREE + 1}, got {self.n_basis}")
        if self.penalty < 0:
            raise ValueError("penalty must be nonnegative")
        knots = _clamped_knots(self.domain, self.n_basis, self.interior_knots)
        object.__setattr__(self, "domain", (float(self.domain[0]), float(self.domain[1])))
        object.__setattr__(self, "_knots", knots)
        if self.interior_knots is not None:
            object.__setattr__(self, "interior_knots", tuple(float(u) for u in self.interior_knots))

    @property
    def knots(self) -> np.ndarray:
        """Full clamped knot vector (length n_basis + 4)."""
        return self._knots.copy()

    def eval_grid(self, n_points: int = 101) -> np.ndarray:
        """Equally spaced evaluation grid over the domain."""
        return np.linspace(self.domain[0], self.domain[1], n_points)

    def to_dict(self) -> dict:
        return {
            "domain": list(self.domain),
            "n_basis": self.n_basis,
            "penalty": self.penalty,
            "knots": self._knots.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        interior = d["knots"][DEGREE + 1 : -(DEGREE + 1)]
        return cls(
            domain=tuple(d["domain"]),
            n_basis=int(d["n_basis"]),
            penalty=float(d.get("penalty", 0.0)),
            interior_knots=tuple(interior) if interior else None,
        )


def eval_basis(spec: BasisSpec, grid) -> np.ndarray:
    """Evaluate all basis functions on a grid.

    Returns an M x n_basis matrix whose rows sum to one (partition of
    unity). Raises :class:`DomainError` for points outside the domain.
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    a, b = spec.domain
    if np.any(grid < a) or np.any(grid > b):
        raise DomainError(f"grid points must lie in [{a}, {b}]")
    return BSpline.design_matrix(grid, spec._knots, DEGREE).toarray()


def eval_basis_deriv2(spec: BasisSpec, grid) -> np.ndarray:
    """Second derivatives of all basis functions on a grid (M x n_basis)."""
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    a, b = spec.domain
    if np.any(grid < a) or np.any(grid > b):
        raise DomainError(f"grid points must lie in [{a}, {b}]")
    spl = BSpline(spec._knots, np.eye(spec.n_basis), DEGREE, extrapolate=False)
    return spl.derivative(2)(grid)


def _span_quadrature(spec: BasisSpec):
    """Gauss-Legendre nodes/weights assembled over all knot spans."""
    breaks = np.unique(spec._knots)
    gx, gw = np.polynomial.legendre.leggauss(_QUAD_ORDER)
    nodes, weights = [], []
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        half = 0.5 * (hi - lo)
        nodes.append(half * gx + 0.5 * (hi + lo))
        weights.append(half * gw)
    return np.concatenate(nodes), np.concatenate(weights)


def gram_matrix(spec: BasisSpec) -> np.ndarray:
    """Exact Gram matrix G_jk = integral of B_j(t) B_k(t) over the domain."""
    nodes, weights = _span_quadrature(spec)
    B = eval_basis(spec, nodes)
    return B.T @ (weights[:, None] * B)


def penalty_matrix(spec: BasisSpec) -> np.ndarray:
    """Exact roughness matrix P_jk = integral of B_j''(t) B_k''(t)."""
    nodes, weights = _span_quadrature(spec)
    B2 = eval_basis_deriv2(spec, nodes)
    return B2.T @ (weights[:, None] * B2)
