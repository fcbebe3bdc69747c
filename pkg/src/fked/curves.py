"""Functional data on a shared B-spline basis.

Raw discrete observations arrive as a long table ``site_id, x, y, t, value``;
:func:`smooth` turns them into a :class:`CurveSet` by penalized per-site
least squares, with :func:`fcv_select` picking ``(n_basis, penalty)`` by a
generalized cross-validation score averaged over curves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .basis import BasisSpec, eval_basis, gram_matrix, penalty_matrix
from .exceptions import BasisMismatchError, IllPosedFitError, SelectionError

RAW_COLUMNS = ("site_id", "x", "y", "t", "value")


@dataclass(frozen=True)
class CurveSet:
    """A set of curves sharing one basis, one curve per spatial site.

    Attributes
    ----------
    site_ids : tuple of str
    coords : ndarray, shape (n, 2)
        Planar site coordinates; pairwise distinct.
    coeffs : ndarray, shape (n, n_basis)
        Spline coefficients, row i is the curve at site i.
    basis : BasisSpec
    grid : ndarray, shape (M,)
        Default evaluation grid (strictly increasing, inside the domain).
    """

    site_ids: tuple
    coords: np.ndarray
    coeffs: np.ndarray
    basis: BasisSpec
    grid: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        coeffs = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        grid = np.asarray(self.grid, dtype=float)
        object.__setattr__(self, "site_ids", tuple(str(s) for s in self.site_ids))
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "grid", grid)
        n = len(self.site_ids)
        if coords.shape != (n, 2):
            raise ValueError(f"coords must have shape ({n}, 2), got {coords.shape}")
        if coeffs.shape != (n, self.basis.n_basis):
            raise ValueError(
                f"coeffs must have shape ({n}, {self.basis.n_basis}), got {coeffs.shape}"
            )
        if n > 1:
            d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
            if np.min(d[np.triu_indices(n, 1)]) <= 0:
                raise ValueError("site coordinates must be pairwise distinct")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("coefficients must be finite")

    @property
    def n_sites(self) -> int:
        return len(self.site_ids)

    def values(self, grid=None) -> np.ndarray:
        """Evaluate every curve on a grid, shape (n, len(grid))."""
        grid = self.grid if grid is None else np.asarray(grid, dtype=float)
        return self.coeffs @ eval_basis(self.basis, grid).T

    def with_coeffs(self, coeffs) -> "CurveSet":
        """Same sites/basis/grid with replaced coefficient rows."""
        return CurveSet(self.site_ids, self.coords, coeffs, self.basis, self.grid)

    def subset(self, indices) -> "CurveSet":
        indices = list(indices)
        return CurveSet(
            tuple(self.site_ids[i] for i in indices),
            self.coords[indices],
            self.coeffs[indices],
            self.basis,
            self.grid,
        )


def read_raw_csv(path) -> pd.DataFrame:
    """Read a long-format observation table ``site_id,x,y,t,value``."""
    raw = pd.read_csv(path)
    missing = [c for c in RAW_COLUMNS if c not in raw.columns]
    if missing:
        raise ValueError(f"raw CSV is missing columns {missing}")
    if len(raw) == 0:
        raise ValueError("raw CSV contains no observations")
    return raw


def _site_table(raw: pd.DataFrame):
    """Per-site (id, x, y) in first-appearance order, checking consistency."""
    raw = raw.copy()
    raw["site_id"] = raw["site_id"].astype(str)
    ids = list(dict.fromkeys(raw["site_id"]))
    coords = np.empty((len(ids), 2))
    for k, sid in enumerate(ids):
        block = raw.loc[raw["site_id"] == sid, ["x", "y"]].to_numpy(dtype=float)
        if np.ptp(block, axis=0).max() > 0:
            raise ValueError(f"site {sid!r} has inconsistent coordinates")
        coords[k] = block[0]
    return ids, coords, raw


def smooth(raw: pd.DataFrame, spec: BasisSpec, grid=None) -> CurveSet:
    """Fit one penalized regression spline per site.

    Coefficients minimize ``sum (y - c.B(t))^2 + penalty * int c.B''(t)^2``
    independently for each site. With ``penalty == 0`` the per-site design
    must have full column rank.
    """
    ids, coords, raw = _site_table(raw)
    P = penalty_matrix(spec)
    coeffs = np.empty((len(ids), spec.n_basis))
    for k, sid in enumerate(ids):
        block = raw[raw["site_id"] == sid]
        t = block["t"].to_numpy(dtype=float)
        y = block["value"].to_numpy(dtype=float)
        B = eval_basis(spec, t)
        A = B.T @ B + spec.penalty * P
        if spec.penalty == 0:
            if len(t) < spec.n_basis or np.linalg.matrix_rank(B) < spec.n_basis:
                raise IllPosedFitError(
                    f"site {sid!r}: {len(t)} observation points cannot identify "
                    f"{spec.n_basis} basis functions without a penalty"
                )
            coeffs[k] = np.linalg.solve(A, B.T @ y)
        else:
            coeffs[k] = np.linalg.solve(A, B.T @ y)
    if grid is None:
        grid = spec.eval_grid()
    return CurveSet(ids, coords, coeffs, spec, np.asarray(grid, dtype=float))


def gcv_score(raw: pd.DataFrame, spec: BasisSpec) -> float:
    """Generalized cross-validation score, averaged over sites.

    Per site: ``(RSS/M) / (1 - tr(H)/M)^2`` with H the smoothing hat
    matrix. Returns ``inf`` when any site is saturated (tr(H) >= M).
    """
    ids, _, raw = _site_table(raw)
    P = penalty_matrix(spec)
    scores = []
    for sid in ids:
        block = raw[raw["site_id"] == sid]
        t = block["t"].to_numpy(dtype=float)
        y = block["value"].to_numpy(dtype=float)
        m = len(t)
        B = eval_basis(spec, t)
        A = B.T @ B + spec.penalty * P
        try:
            c = np.linalg.solve(A, B.T @ y)
            edf = np.trace(np.linalg.solve(A, B.T @ B))
        except np.linalg.LinAlgError:
            return np.inf
        if edf >= m - 1e-9:
            return np.inf
        rss = float(np.sum((y - B @ c) ** 2))
        scores.append((rss / m) / (1.0 - edf / m) ** 2)
    return float(np.mean(scores))


def fcv_select(raw: pd.DataFrame, n_basis_candidates, penalty_candidates, domain=None):
    """Pick ``(n_basis, penalty)`` minimizing the mean GCV score.

    Deterministic: candidates are scanned in the given order and ties keep
    the earlier pair. Raises :class:`SelectionError` when every candidate
    is ill posed.
    """
    n_basis_candidates = list(n_basis_candidates)
    penalty_candidates = list(penalty_candidates)
    if not n_basis_candidates or not penalty_candidates:
        raise ValueError("candidate sets must be nonempty")
    if domain is None:
        t = raw["t"].to_numpy(dtype=float)
        domain = (float(t.min()), float(t.max()))
    best = None
    best_score = np.inf
    for nb in n_basis_candidates:
        for lam in penalty_candidates:
            try:
                score = gcv_score(raw, BasisSpec(domain, int(nb), float(lam)))
            except (IllPosedFitError, np.linalg.LinAlgError):
                continue
            if np.isfinite(score) and score < best_score:
                best, best_score = (int(nb), float(lam)), score
    if best is None:
        raise SelectionError("every (n_basis, penalty) candidate was ill posed")
    return best


def l2_inner(coef_a, coef_b, basis: BasisSpec, gram=None) -> float:
    """Inner product of two curves via the basis Gram matrix."""
    coef_a = np.asarray(coef_a, dtype=float)
    coef_b = np.asarray(coef_b, dtype=float)
    if coef_a.shape != (basis.n_basis,) or coef_b.shape != (basis.n_basis,):
        raise BasisMismatchError(
            f"coefficient vectors must have length {basis.n_basis}, "
            f"got {coef_a.shape} and {coef_b.shape}"
        )
    G = gram_matrix(basis) if gram is None else gram
    return float(coef_a @ G @ coef_b)


def write_curveset_csv(cs: CurveSet, csv_path, basis_json_path=None):
    """Export ``site_id,x,y,coef_1..coef_Nb`` plus a JSON basis descriptor."""
    cols = {"site_id": cs.site_ids, "x": cs.coords[:, 0], "y": cs.coords[:, 1]}
    for j in range(cs.basis.n_basis):
        cols[f"coef_{j + 1}"] = cs.coeffs[:, j]
    pd.DataFrame(cols).to_csv(csv_path, index=False)
    if basis_json_path is not None:
        with open(basis_json_path, "w") as fh:
            json.dump(cs.basis.to_dict(), fh, indent=2)


def read_curveset_csv(csv_path, basis_json_path, grid=None) -> CurveSet:
    """Inverse of :func:`write_curveset_csv`."""
    table = pd.read_csv(csv_path)
    with open(basis_json_path) as fh:
        spec = BasisSpec.from_dict(json.load(fh))
    coef_cols = [f"coef_{j + 1}" for j in range(spec.n_basis)]
    missing = [c for c in ["site_id", "x", "y", *coef_cols] if c not in table.columns]
    if missing:
        raise ValueError(f"curve CSV is missing columns {missing}")
    if grid is None:
        grid = spec.eval_grid()
    return CurveSet(
        tuple(table["site_id"].astype(str)),
        table[["x", "y"]].to_numpy(dtype=float),
        table[coef_cols].to_numpy(dtype=float),
        spec,
        np.asarray(grid, dtype=float),
    )
