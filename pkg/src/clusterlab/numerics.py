"""Dense linear algebra and clustering primitives.

Matrices are plain 2-D ``float64`` numpy arrays. The SVD is a one-sided
(Hestenes) Jacobi iteration with a round-robin pair ordering, so each
rotation round is a handful of vectorized column operations.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NumericalError

MAX_SWEEPS = 60
KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-8


def as_matrix(a, name="matrix"):
    """Validate ``a`` as a finite, non-empty 2-D float64 array."""
    m = np.array(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DomainError(f"{name} must be a non-empty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DomainError(f"{name} contains NaN or Inf entries")
    return m


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # m x k
    sigma: np.ndarray  # k, non-increasing
    v: np.ndarray  # n x k

    def reconstruct(self):
        return (self.u * self.sigma) @ self.v.T


@dataclass(frozen=True)
class KmeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    inertia_trace: list = field(default_factory=list)


def _round_robin(n):
    """Tournament schedule: n-1 rounds of n/2 disjoint index pairs (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(b, tol):
    """Orthogonalize the columns of ``b`` in place; return (b, v, sweeps)."""
    m, n = b.shape
    v = np.eye(n)
    if n == 1:
        return b, v, 0
    padded = n + (n % 2)
    if padded != n:
        b = np.hstack([b, np.zeros((m, 1))])
        v = np.pad(v, ((0, 1), (0, 1)))
    schedule = _round_robin(padded)
    # columns below this squared norm are numerically zero and never rotated
    negligible = (np.finfo(float).eps * np.linalg.norm(b)) ** 2
    worst = np.inf
    for sweep in range(1, MAX_SWEEPS + 1):
        rotated = False
        worst = 0.0
        for p, q in schedule:
            bp, bq = b[:, p], b[:, q]
            alpha = np.einsum("ij,ij->j", bp, bp)
            beta = np.einsum("ij,ij->j", bq, bq)
            gamma = np.einsum("ij,ij->j", bp, bq)
            scale = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                cosine = np.where(scale > 0, np.abs(gamma) / scale, 0.0)
            worst = max(worst, float(cosine.max()))
            act = (cosine > tol) & (np.minimum(alpha, beta) > negligible)
            if not act.any():
                continue
            rotated = True
            g = np.where(act, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(act, c, 1.0)
            s = np.where(act, s, 0.0)
            b[:, p], b[:, q] = c * bp - s * bq, s * bp + c * bq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            return b[:, :n], v[:n, :n], sweep
    raise NumericalError(
        f"one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps", residual=worst
    )


def _complete_basis(u, filled):
    """Fill columns ``filled:`` of ``u`` with unit vectors orthogonal to the rest.

    Candidates are the DCT-II cosine vectors, so a degenerate spectrum is
    completed with smooth, balanced directions rather than coordinate axes.
    """
    m, k = u.shape
    j = filled
    grid = (np.arange(m) + 0.5) * np.pi / m
    for freq in range(m):
        if j >= k:
            break
        x = np.cos(freq * grid)
        for _ in range(2):
            x -= u[:, :j] @ (u[:, :j].T @ x)
        norm = np.linalg.norm(x)
        if norm > 1e-6:
            u[:, j] = x / norm
            j += 1
    return u


def svd_truncated(a, k):
    """Top-``k`` singular triplets of ``a``.

    Each left singular vector is sign-normalized so that its entry of
    largest magnitude (first such entry on ties) is non-negative.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    if not isinstance(k, (int, np.integer)) or k < 1 or k > min(m, n):
        raise DomainError(f"k must be in [1, {min(m, n)}], got {k}")
    transposed = m < n
    b = (a.T if transposed else a).copy()
    rows = b.shape[0]
    tol = max(rows, 1) * np.finfo(float).eps
    b, v, _ = _jacobi_columns(b, tol)

    sigma = np.sqrt(np.einsum("ij,ij->j", b, b))
    order = np.argsort(-sigma, kind="stable")[:k]
    sigma = sigma[order]
    v = v[:, order]
    b = b[:, order]

    cutoff = sigma[0] * max(m, n) * np.finfo(float).eps if sigma[0] > 0 else 0.0
    live = int(np.sum(sigma > cutoff)) if sigma[0] > 0 else 0
    u = np.zeros((rows, k))
    u[:, :live] = b[:, :live] / sigma[:live]
    sigma[live:] = np.where(sigma[live:] > 0, sigma[live:], 0.0)
    if live < k:
        u = _complete_basis(u, live)

    if transposed:
        u, v = v, u
    # sign convention on the left vectors
    idx = np.argmax(np.abs(u), axis=0)
    flip = np.where(u[idx, np.arange(k)] < 0, -1.0, 1.0)
    return SvdResult(u=u * flip, sigma=sigma, v=v * flip)


def _assign(points, centroids):
    d2 = (
        np.einsum("ij,ij->i", points, points)[:, None]
        - 2.0 * points @ centroids.T
        + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    )
    # exact distances for the chosen centroid; the expansion above is only for ranking
    labels = np.argmin(d2, axis=1)
    diff = points - centroids[labels]
    return labels, np.einsum("ij,ij->i", diff, diff)


def _plusplus(points, k, rng):
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
            while d2[idx] == 0:  # cumsum rounding can land on a zero-weight point
                idx -= 1
        else:
            # every point coincides with a chosen centre
            idx = next(i for i in range(n) if i not in chosen)
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return points[chosen].copy()


def _update(points, labels, d2, k):
    labels = labels.copy()
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        # steal the worst-fitting point from a cluster that can spare one
        donors = counts[labels] > 1
        cand = np.where(donors, d2, -1.0)
        i = int(np.argmax(cand))
        counts[labels[i]] -= 1
        labels[i] = j
        counts[j] = 1
        d2 = d2.copy()
        d2[i] = 0.0
    centroids = np.zeros((k, points.shape[1]))
    np.add.at(centroids, labels, points)
    centroids /= counts[:, None]
    return labels, centroids


def kmeans(points, k, seed):
    """Lloyd's algorithm from a k-means++ start; one restart, fully seeded.

    Nearest-centroid ties go to the lowest centroid index. Empty clusters
    are refilled with the point farthest from its centroid.
    """
    points = as_matrix(points, "points")
    n = points.shape[0]
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise DomainError(f"k must be a positive integer, got {k}")
    if n < k:
        raise DomainError(f"k-means needs at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = _plusplus(points, k, rng)
    trace = []
    n_iter = 0
    for n_iter in range(1, KMEANS_MAX_ITER + 1):
        labels, d2 = _assign(points, centroids)
        trace.append(float(d2.sum()))
        labels, new = _update(points, labels, d2, k)
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        if shift < KMEANS_TOL:
            break
    labels, d2 = _assign(points, centroids)
    if np.bincount(labels, minlength=k).min() == 0:
        labels, centroids = _update(points, labels, d2, k)
        diff = points - centroids[labels]
        d2 = np.einsum("ij,ij->i", diff, diff)
    inertia = float(d2.sum())
    trace.append(inertia)
    return KmeansResult(
        assignments=labels.astype(np.int64),
        centroids=centroids,
        inertia=inertia,
        n_iter=n_iter,
        inertia_trace=trace,
    )
