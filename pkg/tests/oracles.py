"""Independent reference implementations used only to check the library.

These deliberately avoid the code paths they verify: the Gram oracle is a
triple loop, the eigensolver is characteristic-polynomial bisection plus
shifted inverse iteration, reductions are plain serial folds.
"""

from __future__ import annotations

import numpy as np


def gram_triple_loop(block: np.ndarray) -> np.ndarray:
    """Entry-wise dot products, no matrix multiply."""
    m, n = block.shape
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(m):
                acc += block[k, i] * block[k, j]
            out[i, j] = acc
    return out


def serial_rank_ordered_sum(parts):
    acc = np.array(parts[0], dtype=np.float64, copy=True)
    for part in parts[1:]:
        acc += part
    acc += 0.0
    return acc


def serial_elementwise_max(parts):
    acc = np.array(parts[0], dtype=np.float64, copy=True)
    for part in parts[1:]:
        acc = np.maximum(acc, part)
    return acc


# ---------------------------------------------------------------------------
# symmetric eigensolver via Sturm bisection on the tridiagonal form

def _householder_tridiagonal(a: np.ndarray):
    """Reduce a symmetric matrix to tridiagonal form."""
    a = a.copy()
    n = a.shape[0]
    for k in range(n - 2):
        x = a[k + 1 :, k].copy()
        norm_x = np.sqrt(np.sum(x * x))
        if norm_x == 0.0:
            continue
        v = x.copy()
        v[0] += np.sign(x[0]) * norm_x if x[0] != 0 else norm_x
        v /= np.sqrt(np.sum(v * v))
        h = np.eye(n)
        h[k + 1 :, k + 1 :] -= 2.0 * np.outer(v, v)
        a = h @ a @ h
    return np.diag(a).copy(), np.diag(a, 1).copy()


def _count_below(diag, off, x) -> int:
    """Eigenvalues of the tridiagonal matrix strictly below x (Sturm count)."""
    count = 0
    d = 1.0
    for i in range(len(diag)):
        beta_sq = off[i - 1] ** 2 if i > 0 else 0.0
        d = (diag[i] - x) - (beta_sq / d if d != 0.0 else beta_sq / 1e-300)
        if d < 0:
            count += 1
    return count


def eig_sym_bisection(a: np.ndarray, tol: float = 1e-14):
    """Eigenpairs of a symmetric matrix, descending, via bisection plus
    shifted inverse iteration. Independent of LAPACK's symmetric drivers."""
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    diag, off = _householder_tridiagonal(a)
    radius = np.max(np.abs(diag)) + 2.0 * (np.max(np.abs(off)) if len(off) else 0.0)
    lo0, hi0 = -radius - 1.0, radius + 1.0

    eigenvalues = []
    for idx in range(n):  # idx-th smallest
        lo, hi = lo0, hi0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if _count_below(diag, off, mid) <= idx:
                lo = mid
            else:
                hi = mid
            if hi - lo < tol * max(1.0, abs(mid)):
                break
        eigenvalues.append(0.5 * (lo + hi))
    eigenvalues = np.array(eigenvalues[::-1])  # descending

    vectors = np.empty((n, n))
    rng = np.random.default_rng(7)
    for k, lam in enumerate(eigenvalues):
        shift = lam + 1e-10 * max(1.0, abs(lam))
        v = rng.standard_normal(n)
        v /= np.linalg.norm(v)
        for _ in range(50):
            try:
                w = np.linalg.solve(a - shift * np.eye(n), v)
            except np.linalg.LinAlgError:
                shift += 1e-9 * max(1.0, abs(lam))
                continue
            w /= np.linalg.norm(w)
            if np.linalg.norm(w - v) < 1e-13 or np.linalg.norm(w + v) < 1e-13:
                v = w
                break
            v = w
        vectors[:, k] = v

    for k in range(n):
        lead = int(np.argmax(np.abs(vectors[:, k])))
        if vectors[lead, k] < 0:
            vectors[:, k] = -vectors[:, k]
    return eigenvalues, vectors


def quadratic_apply_full_kronecker(h_full: np.ndarray, q: np.ndarray) -> np.ndarray:
    """H (q kron q) with the full r x r^2 operator."""
    return h_full @ np.kron(q, q)


def max_r_integer_scan(n_rows: int, full_kronecker: bool = False) -> int:
    best = 0
    for r in range(1, n_rows + 2):
        cols = r + (r * r if full_kronecker else r * (r + 1) // 2) + 1
        if cols <= n_rows:
            best = r
        else:
            break
    return best


def energy_rank_scan(eigenvalues, threshold: float) -> int:
    total = float(np.sum(eigenvalues))
    running = 0.0
    for k, lam in enumerate(eigenvalues, start=1):
        running += float(lam)
        if running / total >= threshold:
            return k
    return len(eigenvalues)
