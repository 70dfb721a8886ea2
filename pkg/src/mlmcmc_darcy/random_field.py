"""Truncated Karhunen-Loeve representation of a lognormal permeability field.

The log-permeability is a mean-zero Gaussian field on the unit square with
separable exponential covariance

    C(x, y) = variance * exp(-(|x1-y1| + |x2-y2|) / correlation_length),

so its covariance operator factorises into two copies of the 1D operator
with kernel exp(-|s-t|/lambda) on [0, 1]. The 1D eigenpairs are available in
closed form (two interleaved root families of a transcendental equation, one
per eigenfunction parity), and every 2D eigenpair is a tensor product of 1D
eigenpairs. Realisations are

    log k(x) = sum_n sqrt(mu_n) * phi_n(x) * xi_n,    xi_n ~ N(0, 1) iid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import bisect

__all__ = [
    "CovarianceSpec",
    "Eigenpair1D",
    "KLBasis",
    "ModeVector",
    "solve_1d_eigenpairs",
    "build_2d_basis",
    "build_kl_basis",
    "evaluate_log_k",
    "mode_matrix",
    "synthesize_element_field",
    "tabulate_basis",
]

_HALF = 0.5  # eigenfunctions are parity eigenstates about the interval midpoint


class RootBracketError(RuntimeError):
    """Raised when a certified root bracket fails to produce a sign change."""


@dataclass(frozen=True)
class CovarianceSpec:
    """Exponential covariance of the log-permeability field.

    Only the separable 1-norm kernel is supported; `norm_order` exists so the
    restriction is explicit at construction time.
    """

    variance: float = 1.0
    correlation_length: float = 0.5
    norm_order: int = 1

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")
        if not self.correlation_length > 0:
            raise ValueError(
                f"correlation_length must be positive, got {self.correlation_length}"
            )
        if self.norm_order != 1:
            raise ValueError("only the 1-norm (separable) kernel is supported")


@dataclass(frozen=True)
class Eigenpair1D:
    """One eigenpair of the unit-variance 1D kernel exp(-|s-t|/lambda) on [0,1].

    The eigenfunction is phi(t) = normalization * cos(frequency*(t-1/2)) for
    even parity and normalization * sin(frequency*(t-1/2)) for odd parity,
    L2-normalised on [0, 1].
    """

    eigenvalue: float
    frequency: float
    normalization: float
    even: bool


def _even_root_eq(w: float, c: float) -> float:
    # c*cos(w/2) - w*sin(w/2) = 0, tan-free form valid across the bracket
    return c * np.cos(w * _HALF) - w * np.sin(w * _HALF)


def _odd_root_eq(w: float, c: float) -> float:
    # w*cos(w/2) + c*sin(w/2) = 0
    return w * np.cos(w * _HALF) + c * np.sin(w * _HALF)


def solve_1d_eigenpairs(correlation_length: float, count: int) -> list[Eigenpair1D]:
    """Solve for the `count` largest 1D eigenpairs of the unit-variance kernel.

    The k-th frequency (k = 1, 2, ...) lies in the certified bracket
    ((k-1)*pi, k*pi); odd k belong to the even-parity family and even k to the
    odd-parity family, which interleave. Roots are found by bisection to
    1e-12 relative tolerance and each eigenfunction's L2 normalisation is
    verified at build time.
    """
    if correlation_length <= 0:
        raise ValueError("correlation_length must be positive")
    if count < 0:
        raise ValueError("count must be nonnegative")
    c = 1.0 / correlation_length
    pairs: list[Eigenpair1D] = []
    for k in range(1, count + 1):
        even = k % 2 == 1
        eq = _even_root_eq if even else _odd_root_eq
        lo = (k - 1) * np.pi
        hi = k * np.pi
        # endpoints of the bracket are exact zeros of sin/cos factors; nudge
        # inward so the sign change is strict
        eps = 1e-13 * max(1.0, hi)
        flo, fhi = eq(lo + eps, c), eq(hi - eps, c)
        if flo * fhi >= 0:
            raise RootBracketError(
                f"no sign change in bracket for mode {k} "
                f"(lambda={correlation_length}, bracket=({lo}, {hi}))"
            )
        w = bisect(eq, lo + eps, hi - eps, args=(c,), rtol=1e-12, xtol=1e-14)
        nu = 2.0 * c / (w * w + c * c)
        if even:
            norm_sq = _HALF + np.sin(w) / (2.0 * w)
        else:
            norm_sq = _HALF - np.sin(w) / (2.0 * w)
        pair = Eigenpair1D(
            eigenvalue=nu, frequency=w, normalization=1.0 / np.sqrt(norm_sq), even=even
        )
        _verify_normalization(pair, k)
        pairs.append(pair)
    return pairs


def _verify_normalization(pair: Eigenpair1D, k: int, tol: float = 1e-10) -> None:
    # composite Simpson; the node count scales with the mode frequency so the
    # quadrature error stays below the tolerance for every mode
    n = max(2049, int(150 * pair.frequency) | 1)
    x = np.linspace(0.0, 1.0, n)
    vals = eigenfunction_1d(pair, x) ** 2
    h = x[1] - x[0]
    integral = h / 3.0 * (vals[0] + vals[-1] + 4 * vals[1:-1:2].sum() + 2 * vals[2:-1:2].sum())
    if abs(integral - 1.0) > tol:
        raise RootBracketError(
            f"eigenfunction {k} failed L2 normalisation check: int phi^2 = {integral}"
        )


def eigenfunction_1d(pair: Eigenpair1D, x: np.ndarray) -> np.ndarray:
    """Evaluate one L2-normalised 1D eigenfunction at points in [0, 1]."""
    t = np.asarray(x, dtype=float) - _HALF
    if pair.even:
        return pair.normalization * np.cos(pair.frequency * t)
    return pair.normalization * np.sin(pair.frequency * t)


@dataclass(frozen=True, eq=False)
class KLBasis:
    """Tensor-product 2D eigenbasis, sorted by decreasing eigenvalue.

    `index_i[n]`, `index_j[n]` are 0-based positions into `pairs_1d` for the
    horizontal and vertical factors of mode n;
    `eigenvalues[n] = variance * nu_i * nu_j`. Ties in the eigenvalue are
    broken lexicographically by (i, j) so the ordering is deterministic.
    Immutable after construction; evaluation is pure and safe to share
    between concurrently running chains.
    """

    spec: CovarianceSpec
    pairs_1d: tuple[Eigenpair1D, ...]
    index_i: np.ndarray
    index_j: np.ndarray
    eigenvalues: np.ndarray

    @property
    def r_max(self) -> int:
        return len(self.eigenvalues)


@dataclass(frozen=True, eq=False)
class ModeVector:
    """KL coefficient vector of one level with its coarse/fine partition.

    The first `coarse_len` entries are the modes shared with the next-coarser
    level; under the prior every coefficient is an independent standard
    normal.
    """

    level: int
    coefficients: np.ndarray
    coarse_len: int = 0

    def __post_init__(self):
        coeff = np.asarray(self.coefficients, dtype=float)
        object.__setattr__(self, "coefficients", coeff)
        if coeff.ndim != 1:
            raise ValueError("coefficients must be a 1D vector")
        if not 0 <= self.coarse_len <= coeff.size:
            raise ValueError(
                f"coarse_len {self.coarse_len} outside [0, {coeff.size}]"
            )

    def __len__(self) -> int:
        return self.coefficients.size

    @property
    def coarse(self) -> np.ndarray:
        return self.coefficients[: self.coarse_len]

    @property
    def fine(self) -> np.ndarray:
        return self.coefficients[self.coarse_len:]


class BasisTruncationError(RuntimeError):
    """Raised when the 1D candidate pool cannot certify the requested top modes."""


def build_2d_basis(
    pairs: list[Eigenpair1D], variance: float, r_max: int
) -> KLBasis:
    """Form the top `r_max` tensor-product modes from a pool of 1D eigenpairs.

    The pool must be deep enough to certify the ordering: every omitted
    product (one 1D index beyond the pool) is bounded by nu_1 * nu_pool_last,
    which must not exceed the smallest kept eigenvalue.
    """
    if variance <= 0:
        raise ValueError("variance must be positive")
    if r_max < 1:
        raise ValueError("r_max must be at least 1")
    n1 = len(pairs)
    if n1 * n1 < r_max:
        raise BasisTruncationError(
            f"pool of {n1} 1D eigenpairs provides only {n1 * n1} products; "
            f"need at least {r_max}"
        )
    nus = np.array([p.eigenvalue for p in pairs])
    ii, jj = np.meshgrid(np.arange(n1), np.arange(n1), indexing="ij")
    mu = variance * nus[ii] * nus[jj]
    flat_mu = mu.ravel()
    flat_i = ii.ravel()
    flat_j = jj.ravel()
    order = np.lexsort((flat_j, flat_i, -flat_mu))
    keep = order[:r_max]
    smallest_kept = flat_mu[keep[-1]]
    omitted_bound = variance * nus[0] * nus[-1]
    if omitted_bound > smallest_kept:
        raise BasisTruncationError(
            f"cannot certify top-{r_max} ordering: largest product outside the "
            f"pool may reach {omitted_bound:.3e} > smallest kept "
            f"{smallest_kept:.3e}; solve more 1D eigenpairs"
        )
    spec = CovarianceSpec(variance=variance, correlation_length=_infer_length(pairs))
    return KLBasis(
        spec=spec,
        pairs_1d=tuple(pairs),
        index_i=flat_i[keep].copy(),
        index_j=flat_j[keep].copy(),
        eigenvalues=flat_mu[keep].copy(),
    )


def _infer_length(pairs: list[Eigenpair1D]) -> float:
    # nu = 2c/(w^2+c^2) inverts to c for any mode; use the leading one
    nu, w = pairs[0].eigenvalue, pairs[0].frequency
    disc = max(1.0 - nu * nu * w * w, 0.0)
    c = (1.0 + np.sqrt(disc)) / nu
    return 1.0 / c


def build_kl_basis(
    spec: CovarianceSpec, r_max: int, initial_pool: int = 32
) -> KLBasis:
    """Convenience constructor: grow the 1D pool until the top-`r_max`
    ordering is certified."""
    n1 = max(initial_pool, int(np.ceil(np.sqrt(r_max))) + 2)
    while True:
        pairs = solve_1d_eigenpairs(spec.correlation_length, n1)
        try:
            basis = build_2d_basis(pairs, spec.variance, r_max)
        except BasisTruncationError:
            if n1 > 4096:
                raise
            n1 *= 2
            continue
        return basis


def mode_matrix(
    basis: KLBasis, points: np.ndarray, truncation: int | None = None
) -> np.ndarray:
    """Evaluate phi_n at each point: returns (npoints, truncation).

    This is the workhorse for evaluating fields; callers that reuse a fixed
    point set (element centroids, observation points) should cache the
    result.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != 2:
        raise ValueError("points must have shape (n, 2)")
    r = basis.r_max if truncation is None else truncation
    if r > basis.r_max:
        raise ValueError(f"truncation {r} exceeds basis size {basis.r_max}")
    used = sorted(set(basis.index_i[:r]) | set(basis.index_j[:r]))
    pos = {u: p for p, u in enumerate(used)}
    ex = np.column_stack([eigenfunction_1d(basis.pairs_1d[u], pts[:, 0]) for u in used])
    ey = np.column_stack([eigenfunction_1d(basis.pairs_1d[u], pts[:, 1]) for u in used])
    ci = np.array([pos[i] for i in basis.index_i[:r]])
    cj = np.array([pos[j] for j in basis.index_j[:r]])
    return ex[:, ci] * ey[:, cj]


def evaluate_log_k(
    basis: KLBasis, theta: "ModeVector | np.ndarray", points: np.ndarray
) -> np.ndarray:
    """Evaluate the truncated log-permeability sum at the given points.

    Linear in theta; the truncation is the length of theta.
    """
    coeff = theta.coefficients if isinstance(theta, ModeVector) else np.asarray(theta, float)
    r = coeff.size
    if r > basis.r_max:
        raise ValueError(f"theta has {r} modes but basis holds only {basis.r_max}")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(pts < 0.0) or np.any(pts > 1.0):
        raise ValueError("points must lie inside the unit square")
    if r == 0:
        return np.zeros(pts.shape[0])
    phi = mode_matrix(basis, pts, truncation=r)
    return phi @ (np.sqrt(basis.eigenvalues[:r]) * coeff)


def synthesize_element_field(basis: KLBasis, theta, mesh) -> np.ndarray:
    """Per-element permeability: exp(log k) at each element centroid."""
    log_k = evaluate_log_k(basis, theta, mesh.centroids)
    return np.exp(log_k)


def tabulate_basis(basis: KLBasis) -> str:
    """Debug export: one row per mode with index, 1D factors and frequencies."""
    lines = ["index\ti\tj\tmu\tomega_i\tomega_j"]
    for n in range(basis.r_max):
        i = int(basis.index_i[n])
        j = int(basis.index_j[n])
        lines.append(
            f"{n + 1}\t{i + 1}\t{j + 1}\t{basis.eigenvalues[n]!r}\t"
            f"{basis.pairs_1d[i].frequency!r}\t{basis.pairs_1d[j].frequency!r}"
        )
    return "\n".join(lines) + "\n"
