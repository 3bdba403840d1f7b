"""Maximal element (static deflator) of the convex hull of finitely many payoffs.

The maximal element f̂ of conv{g_1..g_n} under a measure q maximizes
sum_{w in S} q_w log f(w) on the union S of the q-charged supports, and is
characterized by E_q[g_i 1_S / f̂] <= q[S] for every i.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, SolverError
from .prob import DEFAULT_TOL, Measure

ARMIJO = 1e-4
POSITIVITY_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class StaticDeflatorResult:
    weights: np.ndarray
    f_hat: np.ndarray
    support: np.ndarray
    kkt_residual: float
    objective: float
    iterations: int = 0
    method: str = "trivial"

    def combine(self, columns: np.ndarray) -> np.ndarray:
        """The raw combination sum_i w_i g_i, including on q-null atoms."""
        return np.asarray(columns, dtype=float) @ self.weights


def _as_matrix(columns) -> np.ndarray:
    if isinstance(columns, np.ndarray) and columns.ndim == 2:
        return np.asarray(columns, dtype=float)
    cols = [np.asarray(c, dtype=float) for c in columns]
    if not cols:
        raise InputError("maximal_element needs at least one generator")
    return np.column_stack(cols)


def undominated_columns(a: np.ndarray) -> np.ndarray:
    """Indices of columns not weakly dominated atomwise by another column.

    Of several identical columns only the first is kept.
    """
    n = a.shape[1]
    if n == 1:
        return np.array([0])
    c = a.T
    if n * n * a.shape[0] > 4_000_000:
        keep = []
        for i in range(n):
            ge = (c >= c[i]).all(axis=1)
            gt = (c > c[i]).any(axis=1)
            dom = ge & (gt | (np.arange(n) < i))
            dom[i] = False
            if not dom.any():
                keep.append(i)
        return np.array(keep)
    ge = (c[None, :, :] >= c[:, None, :]).all(axis=2)
    gt = (c[None, :, :] > c[:, None, :]).any(axis=2)
    earlier = np.arange(n)[None, :] < np.arange(n)[:, None]
    dom = ge & (gt | earlier)
    np.fill_diagonal(dom, False)
    return np.flatnonzero(~dom.any(axis=1))


def _objective(b: np.ndarray, q: np.ndarray, lam: np.ndarray) -> float:
    f = b @ lam
    if np.any(f <= 0):
        return -np.inf
    return float(np.dot(q, np.log(f)))


def _gradient(b, q, lam):
    f = b @ lam
    return f, b.T @ (q / f)


def _cover_warm_start(b, q, lam, iters=30):
    for _ in range(iters):
        _, g = _gradient(b, q, lam)
        lam = lam * g
        lam /= lam.sum()
    return lam


def _newton_active_set(b, q, lam, tol, max_iter):
    """Projected Newton on the simplex face spanned by the active weights.

    ``q`` is normalized, so optimality reads grad_i <= 1 with equality on
    the active set.
    """
    n = b.shape[1]
    active = lam > 1e-10 * lam.max()
    lam = np.where(active, lam, 0.0)
    lam /= lam.sum()
    for it in range(max_iter):
        f, g = _gradient(b, q, lam)
        ga = g[active]
        face_gap = float(np.max(np.abs(ga - 1.0)))
        resid = float(g.max() - 1.0)
        if face_gap <= tol and resid <= tol:
            return lam, it, True
        if face_gap <= tol:
            j = int(np.argmax(np.where(active, -np.inf, g)))
            active[j] = True
            continue
        idx = np.flatnonzero(active)
        ba = b[:, idx]
        h = -(ba.T * (q / f**2)) @ ba
        k = len(idx)
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = h
        kkt[:k, k] = -1.0
        kkt[k, :k] = 1.0
        rhs = np.concatenate([-ga, [0.0]])
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        d = sol[:k]
        slope = float(ga @ d)
        if np.isfinite(slope) and abs(slope) < 1e-13 and np.all(lam[idx] + d >= 0):
            # near the optimum the objective is flat to rounding; take the pure Newton step
            trial = lam.copy()
            trial[idx] = lam[idx] + d
            if np.all(b @ trial > 0):
                lam = trial / trial.sum()
                continue
        if not np.isfinite(slope) or slope <= 1e-16:
            # Newton direction degenerate: fall back to the face gradient.
            d = ga - ga.mean()
            slope = float(ga @ d)
            if slope <= 1e-18:
                return lam, it, False
        neg = d < 0
        alpha_max = float(np.min(-lam[idx][neg] / d[neg])) if neg.any() else np.inf
        alpha = min(1.0, alpha_max)
        phi0 = _objective(b, q, lam)
        while alpha > 1e-14:
            trial = lam.copy()
            trial[idx] = np.maximum(lam[idx] + alpha * d, 0.0)
            phi = _objective(b, q, trial)
            if phi >= phi0 + ARMIJO * alpha * slope:
                break
            alpha *= 0.5
        else:
            return lam, it, False
        if alpha >= alpha_max:
            blocking = idx[neg][np.argmin(-lam[idx][neg] / d[neg])]
            trial[blocking] = 0.0
            active[blocking] = False
        lam = trial / trial.sum()
    return lam, max_iter, False


def _frank_wolfe(b, q, lam, tol, max_iter):
    for it in range(max_iter):
        f, g = _gradient(b, q, lam)
        if g.max() - 1.0 <= tol:
            return lam, it, True
        j = int(np.argmax(g))
        d = -lam.copy()
        d[j] += 1.0
        lo, hi = 0.0, 1.0
        # derivative of phi along d is decreasing (concavity); bisect on its sign
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            fm = f + mid * (b @ d)
            if np.any(fm <= 0) or np.dot(q, (b @ d) / fm) < 0:
                hi = mid
            else:
                lo = mid
        lam = lam + lo * d
        lam = np.maximum(lam, 0.0)
        lam /= lam.sum()
    f, g = _gradient(b, q, lam)
    return lam, max_iter, bool(g.max() - 1.0 <= tol)


def maximal_element(columns, q: Measure, tol: float = DEFAULT_TOL,
                    max_iter: int = 500) -> StaticDeflatorResult:
    """Log-optimal element of the convex hull of ``columns`` under ``q``.

    ``columns`` is a list of random variables or an (atom x generator) array.
    """
    g_all = _as_matrix(columns)
    if q.is_null:
        raise InputError("maximal_element under the null measure")
    if np.any(g_all < 0) or np.any(np.isnan(g_all)):
        raise InputError("generators must be nonnegative")
    n_atoms, n_gen = g_all.shape
    w = q.weights
    support = (w > 0) & (g_all > 0).any(axis=1)
    weights = np.zeros(n_gen)
    if not support.any():
        weights[:] = 1.0 / n_gen
        return StaticDeflatorResult(weights, np.zeros(n_atoms), support, 0.0, 0.0)
    a = g_all[support]
    if np.any(np.isinf(a)):
        raise SolverError("unbounded objective: infinite payoff on the support")
    qs = w[support]
    mass = float(qs.sum())
    qn = qs / mass

    keep = undominated_columns(a)
    b = a[:, keep]
    iters, method = 0, "trivial"
    if len(keep) == 1:
        lam = np.ones(1)
    else:
        inner_tol = min(tol, 1e-11)
        lam = _cover_warm_start(b, qn, np.full(len(keep), 1.0 / len(keep)))
        lam, iters, ok = _newton_active_set(b, qn, lam, inner_tol, max_iter)
        method = "newton"
        if not ok:
            lam, more, ok = _frank_wolfe(b, qn, lam, inner_tol, max_iter * 20)
            iters += more
            method = "frank-wolfe"
    weights[keep] = lam
    weights /= weights.sum()

    f = a @ weights
    if np.any(f < POSITIVITY_FLOOR * max(1.0, float(a.max()))):
        raise SolverError("maximal element vanishes on its own support")
    ratios = (a.T * qs) @ (1.0 / f)
    residual = max(0.0, float(ratios.max() - mass))
    if residual > tol:
        raise SolverError(f"KKT certificate failed: residual {residual:.3e}", residual)
    f_hat = np.zeros(n_atoms)
    f_hat[support] = f
    objective = float(np.dot(qs, np.log(f)))
    return StaticDeflatorResult(weights, f_hat, support, residual, objective, iters, method)
