"""Graph Fourier and heat-kernel graph wavelet transforms.

Two routes produce a wavelet basis ``(psi, psi_inv)`` at scale ``s``:

* :func:`exact_wavelet` diagonalizes the Laplacian (Jacobi rotations) and
  applies ``exp(-s*lambda)`` / ``exp(+s*lambda)`` to the spectrum.
* :func:`chebyshev_wavelet` expands the same kernels in Chebyshev
  polynomials of the rescaled Laplacian, with no eigensolve.

The exact route doubles as the reference for checking the approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, NoConvergence, NotSymmetric, ShapeError
from .graph import NORMALIZED, Graph, laplacian

DEFAULT_SPARSIFY_THRESHOLD = 1e-4


@dataclass(frozen=True)
class EigenSystem:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # orthonormal columns


@dataclass(frozen=True)
class WaveletBasis:
    scale: float
    psi: np.ndarray
    psi_inv: np.ndarray
    method: str  # "exact" or "chebyshev"
    order: int | None = None
    sparsify_threshold: float = 0.0

    @property
    def n(self) -> int:
        return self.psi.shape[0]

    def identity_error(self) -> float:
        """Max-abs deviation of ``psi @ psi_inv`` from the identity.

        Near machine precision for the exact method; for Chebyshev bases this
        is the documented approximation error of the pair.
        """
        return float(np.abs(self.psi @ self.psi_inv - np.eye(self.n)).max())

    def density(self) -> tuple[float, float]:
        n2 = self.n * self.n
        return np.count_nonzero(self.psi) / n2, np.count_nonzero(self.psi_inv) / n2


def _round_robin_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint index pairings covering every (p, q) once per sweep."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def eig_sym(m: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> EigenSystem:
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the rotations of one round act on disjoint rows/columns and can be
    applied together. Iteration stops once the off-diagonal Frobenius norm
    drops below ``tol * ||m||_F``.
    """
    a = np.array(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"eig_sym needs a square matrix, got shape {a.shape}")
    n = a.shape[0]
    scale = max(1.0, float(np.abs(a).max()) if a.size else 1.0)
    if a.size and np.abs(a - a.T).max() > 1e-10 * scale:
        raise NotSymmetric(f"asymmetry {np.abs(a - a.T).max():.3e} exceeds 1e-10")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    target = tol * np.linalg.norm(a)
    rounds = _round_robin_pairs(n)

    def off_norm() -> float:
        return float(np.linalg.norm(a - np.diag(np.diag(a))))

    sweeps = 0
    while off_norm() > target:
        if sweeps == max_sweeps:
            raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps (off={off_norm():.3e})")
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            # A <- J^T A J, with J_pp = J_qq = c, J_pq = s, J_qp = -s
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            a[p, q] = 0.0
            a[q, p] = 0.0
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        sweeps += 1
    lam = np.diag(a).copy()
    order = np.argsort(lam, kind="stable")
    return EigenSystem(eigenvalues=lam[order], eigenvectors=v[:, order])


def heat_kernel(s: float, lambdas) -> np.ndarray:
    return np.exp(-s * np.asarray(lambdas, dtype=float))


def _check_scale(s: float) -> float:
    s = float(s)
    if not math.isfinite(s) or s < 0:
        raise ConfigError(f"wavelet scale must be finite and >= 0, got {s}")
    return s


def exact_wavelet(lap: np.ndarray, s: float, es: EigenSystem | None = None) -> WaveletBasis:
    """Heat-kernel wavelets from the eigendecomposition of ``lap``.

    Pass a precomputed ``es`` to reuse one decomposition across scales.
    """
    s = _check_scale(s)
    if es is None:
        es = eig_sym(lap)
    u, lam = es.eigenvectors, es.eigenvalues
    psi = (u * heat_kernel(s, lam)) @ u.T
    psi_inv = (u * heat_kernel(-s, lam)) @ u.T
    return WaveletBasis(scale=s, psi=psi, psi_inv=psi_inv, method="exact")


def chebyshev_coeffs(s: float, lambda_max: float, k: int, sign: int = 1) -> np.ndarray:
    """Chebyshev coefficients of ``exp(-sign*s*lambda)`` on ``[0, lambda_max]``.

    Computed by Chebyshev-Gauss quadrature on ``max(k+1, 64)`` nodes; the
    returned ``c`` satisfies ``f(x) ~= sum_j c_j T_j(x)`` (``c_0`` already
    carries the 1/2 weight).
    """
    if lambda_max <= 0:
        raise ConfigError(f"lambda_max must be positive, got {lambda_max}")
    if k < 0:
        raise ConfigError(f"Chebyshev order must be >= 0, got {k}")
    if s == 0:
        return np.eye(1, k + 1).ravel()
    m = max(k + 1, 64)
    theta = np.pi * (np.arange(m) + 0.5) / m
    lam = 0.5 * lambda_max * (np.cos(theta) + 1.0)
    h = np.exp(-sign * s * lam)
    j = np.arange(k + 1)
    c = (2.0 / m) * (np.cos(np.outer(j, theta)) @ h)
    c[0] *= 0.5
    return c


def chebyshev_eval(coeffs: np.ndarray, lam, lambda_max: float) -> np.ndarray:
    """Evaluate a Chebyshev expansion at spectral points ``lam``."""
    x = 2.0 * np.asarray(lam, dtype=float) / lambda_max - 1.0
    return np.polynomial.chebyshev.chebval(x, coeffs)


def gershgorin_bound(m: np.ndarray) -> float:
    """Upper bound on the largest eigenvalue from Gershgorin disks."""
    off = np.abs(m).sum(axis=1) - np.abs(np.diag(m))
    return float(np.max(np.diag(m) + off))


def _chebyshev_matrix(lap_scaled: np.ndarray, coeffs: np.ndarray) -> np.ndarray:
    n = lap_scaled.shape[0]
    t_prev = np.eye(n)
    out = coeffs[0] * t_prev
    if len(coeffs) == 1:
        return out
    t_cur = lap_scaled.copy()
    out = out + coeffs[1] * t_cur
    for c in coeffs[2:]:
        t_prev, t_cur = t_cur, 2.0 * lap_scaled @ t_cur - t_prev
        out = out + c * t_cur
    return out


def chebyshev_wavelet(
    lap: np.ndarray,
    s: float,
    k: int,
    lambda_max: float | None = None,
    sparsify_threshold: float = 0.0,
) -> WaveletBasis:
    """Order-``k`` Chebyshev approximation of the heat-kernel wavelet pair.

    ``lambda_max`` defaults to the Gershgorin bound of ``lap``; pass 2.0 for
    a symmetric normalized Laplacian. Entries below ``sparsify_threshold`` in
    magnitude are zeroed after the expansion.
    """
    s = _check_scale(s)
    lap = np.asarray(lap, dtype=float)
    if lambda_max is None:
        lambda_max = gershgorin_bound(lap)
    lap_scaled = (2.0 / lambda_max) * lap - np.eye(lap.shape[0])
    psi = _chebyshev_matrix(lap_scaled, chebyshev_coeffs(s, lambda_max, k, sign=1))
    psi_inv = _chebyshev_matrix(lap_scaled, chebyshev_coeffs(s, lambda_max, k, sign=-1))
    if sparsify_threshold > 0:
        psi, _ = sparsify(psi, sparsify_threshold)
        psi_inv, _ = sparsify(psi_inv, sparsify_threshold)
    return WaveletBasis(
        scale=s, psi=psi, psi_inv=psi_inv, method="chebyshev", order=int(k),
        sparsify_threshold=float(sparsify_threshold),
    )


def sparsify(m: np.ndarray, threshold: float) -> tuple[np.ndarray, float]:
    """Zero entries with ``|v| < threshold``; return the matrix and its density."""
    if threshold < 0:
        raise ConfigError(f"sparsify threshold must be >= 0, got {threshold}")
    out = np.where(np.abs(m) < threshold, 0.0, m)
    return out, np.count_nonzero(out) / out.size


def graph_fourier_convolve(x, kernel_diag, es: EigenSystem) -> np.ndarray:
    """Filter ``x`` in the graph Fourier domain: ``U diag(kernel) U^T x``."""
    x = np.asarray(x, dtype=float)
    kernel = np.asarray(kernel_diag, dtype=float)
    u = es.eigenvectors
    if x.shape[0] != u.shape[0] or kernel.shape != (u.shape[0],):
        raise ShapeError(f"signal {x.shape} / kernel {kernel.shape} do not match N={u.shape[0]}")
    return u @ (kernel * (u.T @ x)) if x.ndim == 1 else u @ (kernel[:, None] * (u.T @ x))


def wavelet_convolve(x, gamma, basis: WaveletBasis) -> np.ndarray:
    """``psi diag(gamma) psi_inv x`` for a signal on the graph nodes."""
    x = np.asarray(x, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    n = basis.n
    if x.shape[0] != n or gamma.shape != (n,):
        raise ShapeError(f"signal {x.shape} / gamma {gamma.shape} do not match N={n}")
    hat = basis.psi_inv @ x
    hat = gamma * hat if x.ndim == 1 else gamma[:, None] * hat
    return basis.psi @ hat


def diagonal_mass_ratio(m: np.ndarray) -> float:
    m = np.abs(np.asarray(m, dtype=float))
    return float(np.trace(m) / m.sum())


def build_bases(
    graph: Graph,
    scales: Sequence[float],
    method: str = "chebyshev",
    order: int = 3,
    kind: str = NORMALIZED,
    sparsify_threshold: float = DEFAULT_SPARSIFY_THRESHOLD,
) -> list[WaveletBasis]:
    """One wavelet basis per scale for ``graph``.

    Repeated scale values share a basis object. The exact method computes a
    single eigendecomposition for all scales and is never sparsified.
    """
    lap = laplacian(graph, kind)
    cache: dict[float, WaveletBasis] = {}
    if method == "exact":
        es = eig_sym(lap)
        make = lambda s: exact_wavelet(lap, s, es)  # noqa: E731
    elif method == "chebyshev":
        lmax = 2.0 if kind == NORMALIZED else gershgorin_bound(lap)
        make = lambda s: chebyshev_wavelet(lap, s, order, lmax, sparsify_threshold)  # noqa: E731
    else:
        raise ConfigError(f"unknown wavelet method {method!r}")
    out = []
    for s in scales:
        s = float(s)
        if s not in cache:
            cache[s] = make(s)
        out.append(cache[s])
    return out


def save_basis_csv(basis: WaveletBasis, psi_path: str | Path, psi_inv_path: str | Path) -> None:
    """Dense row-major CSV dump at 17 significant digits."""
    np.savetxt(psi_path, basis.psi, fmt="%.17g", delimiter=",")
    np.savetxt(psi_inv_path, basis.psi_inv, fmt="%.17g", delimiter=",")
