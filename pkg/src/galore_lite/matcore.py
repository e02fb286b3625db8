"""Deterministic dense linear algebra core.

Matrices are plain 2-D float64 numpy arrays in C (row-major) order; this
module is the only place that touches matrix factorizations, and every
other module builds on it.  The standard primitives (`qr_thin`,
`svd_full`) are LAPACK-backed behind fixed sign conventions; the
randomized SVD pipeline is assembled here explicitly (Gaussian sketch,
stabilized power iteration, projection, small exact SVD), and a
self-contained preconditioned one-sided Jacobi SVD (`svd_jacobi`) is kept
as a library-independent reference for cross-checking.

Determinism contract: every routine is a pure function of its inputs plus
the explicit `Rng` stream.  With a fixed BLAS thread count the results
are bit-reproducible run to run; the integer random stream itself is
exact across platforms (the Gaussian transform may differ in the last ulp
where libm differs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DimensionError, NumericError, ParameterError

# splitmix64 constants (Steele, Lea & Flood 2014)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_TWO_NEG53 = 2.0 ** -53


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """Counter-based deterministic random stream.

    Word i of the stream is ``mix64(seed + (i + 1) * GOLDEN)`` where
    ``mix64`` is the splitmix64 finalizer.  Because each word depends only
    on the seed and its index, draws vectorize cleanly and the stream is
    identical for identical seeds on every platform.  Uniforms take the
    top 53 bits; normals use the Box-Muller transform on uniform pairs.
    """

    def __init__(self, seed: int, _counter: int = 0):
        self._seed = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._counter = int(_counter)

    @property
    def seed(self) -> int:
        return int(self._seed)

    def _words(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix64(self._seed + idx * _GOLDEN)

    def uniforms(self, n: int) -> np.ndarray:
        """n uniforms in [0, 1) with 53-bit resolution."""
        return (self._words(n) >> np.uint64(11)).astype(np.float64) * _TWO_NEG53

    def normals(self, n: int) -> np.ndarray:
        """n i.i.d. standard normals via Box-Muller."""
        half = (n + 1) // 2
        u1 = self.uniforms(half)
        u2 = self.uniforms(half)
        # 1 - u1 lies in (0, 1], so the log is finite.
        radius = np.sqrt(-2.0 * np.log1p(-u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * half)
        out[0::2] = radius * np.cos(theta)
        out[1::2] = radius * np.sin(theta)
        return out[:n]

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n integers uniform in [0, bound). Modulo bias is negligible for
        bound << 2**64, which covers every use in this package."""
        if bound <= 0:
            raise ParameterError(f"integer bound must be positive, got {bound}")
        return (self._words(n) % np.uint64(bound)).astype(np.int64)

    def spawn(self, tag: int) -> "Rng":
        """Derive an independent child stream from an integer tag.

        Spawning is a pure function of (seed, tag); it does not consume
        from the parent stream.
        """
        tagged = _mix64(np.array([np.uint64(tag)], dtype=np.uint64) * _GOLDEN)
        child = _mix64(self._seed ^ tagged)
        return Rng(int(child[0]))


def as_matrix(data) -> np.ndarray:
    """Validate and convert user input to a 2-D float64 C-order array.

    Raises DimensionError for non-2-D input and NumericError if any entry
    is NaN or infinite.
    """
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got ndim={arr.ndim}")
    if not np.isfinite(arr).all():
        raise NumericError("matrix entries must be finite (no NaN/Inf)")
    return arr


def gaussian(rng: Rng, rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix of i.i.d. standard normals from `rng`."""
    if rows < 1 or cols < 1:
        raise ParameterError(f"gaussian shape must be >= 1x1, got {rows}x{cols}")
    return rng.normals(rows * cols).reshape(rows, cols)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check.

    Summation order is fixed for a given shape and thread count, so
    repeated calls are bit-identical.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul operands must be 2-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def qr_thin(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR of an m x n matrix with m >= n.

    Returns (q, r) with q m x n orthonormal and r n x n upper triangular
    with non-negative diagonal (columns of q are flipped to enforce the
    sign convention, which makes the factorization unique for full-rank
    input).  Zero columns produce a zero diagonal entry in r and no error.

    Backed by LAPACK's Householder factorization; q is orthonormal even
    for rank-deficient input because it is assembled from exact
    reflections.
    """
    if a.ndim != 2:
        raise DimensionError("qr_thin expects a 2-D matrix")
    m, n = a.shape
    if m < n:
        raise DimensionError(f"qr_thin requires rows >= cols, got {m}x{n}")
    q, r = np.linalg.qr(a, mode="reduced")
    q = np.ascontiguousarray(q)
    r = np.ascontiguousarray(r)
    flip = np.diagonal(r) < 0.0
    if flip.any():
        r[flip, :] *= -1.0
        q[:, flip] *= -1.0
    return q, r


@dataclass
class SvdResult:
    """Thin SVD factors: a = u @ diag(s) @ v.T.

    u is m x k, s is length k non-increasing and non-negative, v is n x k.
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


def sign_canonicalize(res: SvdResult) -> SvdResult:
    """Fix the sign indeterminacy of SVD factors.

    For each column j the entry of u[:, j] with the largest magnitude is
    made non-negative (ties broken by lowest row index, which is what
    argmax returns); v[:, j] is flipped together with u[:, j] so the
    reconstruction u @ diag(s) @ v.T is bit-identical.  Idempotent.
    """
    u = res.u.copy()
    v = res.v.copy()
    k = u.shape[1]
    if k:
        lead = np.argmax(np.abs(u), axis=0)
        signs = np.where(u[lead, np.arange(k)] < 0.0, -1.0, 1.0)
        u *= signs
        v *= signs
    return SvdResult(u=u, s=res.s.copy(), v=v)


def _round_robin_rounds(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds of disjoint column pairs covering
    all n*(n-1)/2 pairs (a bye index is inserted when n is odd)."""
    idx = list(range(n))
    if n % 2 == 1:
        idx.append(-1)
    size = len(idx)
    fixed, rest = idx[0], idx[1:]
    rounds = []
    for _ in range(size - 1):
        order = [fixed] + rest
        pairs = [(order[i], order[size - 1 - i]) for i in range(size // 2)]
        pairs = [(p, q) for p, q in pairs if p != -1 and q != -1]
        ps = np.array([p for p, _ in pairs], dtype=np.intp)
        qs = np.array([q for _, q in pairs], dtype=np.intp)
        rounds.append((ps, qs))
        rest = rest[-1:] + rest[:-1]
    return rounds


def _complete_null_columns(u: np.ndarray, null_idx: np.ndarray) -> None:
    """Replace the columns listed in null_idx with a deterministic
    orthonormal completion. In place.

    For each column to fill, the standard basis vector with the largest
    residual against the current columns is chosen (lowest index on ties)
    and orthonormalized with two Gram-Schmidt passes.
    """
    m, k = u.shape
    null_set = set(null_idx.tolist())
    basis = [u[:, j].copy() for j in range(k) if j not in null_set]
    # residual mass of e_i against an orthonormal set is 1 - ||row i||^2
    row_mass = np.zeros(m)
    for b in basis:
        row_mass += b * b
    for j in null_idx:
        pick = int(np.argmax(1.0 - row_mass))
        vec = np.zeros(m)
        vec[pick] = 1.0
        for _ in range(2):
            for b in basis:
                vec -= (b @ vec) * b
        norm = np.linalg.norm(vec)
        if norm <= 1e-6:
            raise ConvergenceError("could not complete orthonormal basis")
        vec /= norm
        u[:, j] = vec
        basis.append(vec)
        row_mass += vec * vec


_JACOBI_TOL = 1e-13
_JACOBI_MAX_SWEEPS = 60
_PRECONDITION_MIN_COLS = 64


def _jacobi_svd_core(a: np.ndarray) -> SvdResult:
    """One-sided Jacobi SVD of an m x n matrix with m >= n (no final sign
    canonicalization; callers handle that).

    Column pairs are processed in a round-robin parallel ordering (all
    pairs in a round are disjoint, so their rotations commute and apply
    vectorized).  A sweep visits every pair once; sweeps repeat until no
    pair exceeds the relative off-diagonal tolerance.  Exceeding the sweep
    limit raises ConvergenceError naming the limit.

    The working matrix is stored transposed (each column of `a` is a
    contiguous row) with the right-factor accumulator stacked alongside so
    the rotations of the columns and of v share one scatter.  Columns are
    presorted by norm, which speeds convergence on graded spectra; the
    identity block is laid down pre-permuted so v comes out in the
    original column indexing.
    """
    m, n = a.shape
    presort = np.argsort(-np.linalg.norm(a, axis=0), kind="stable")
    work = np.zeros((n, m + n))
    work[:, :m] = a.T[presort]
    work[np.arange(n), m + presort] = 1.0
    col_floor = 1e-15 * np.linalg.norm(a)

    rounds = _round_robin_rounds(n)
    converged = n <= 1 or col_floor == 0.0
    sweep = 0
    while not converged:
        sweep += 1
        if sweep > _JACOBI_MAX_SWEEPS:
            raise ConvergenceError(
                f"one-sided Jacobi SVD did not converge within {_JACOBI_MAX_SWEEPS} sweeps"
            )
        rotated = False
        for ps, qs in rounds:
            gp = work[ps, :m]
            gq = work[qs, :m]
            app = np.einsum("ij,ij->i", gp, gp)
            aqq = np.einsum("ij,ij->i", gq, gq)
            apq = np.einsum("ij,ij->i", gp, gq)
            # Numerically null columns are left alone; they are fixed up
            # by the orthonormal completion below.
            active = np.minimum(app, aqq) > col_floor * col_floor
            need = active & (np.abs(apq) > _JACOBI_TOL * np.sqrt(app * aqq))
            if not need.any():
                continue
            rotated = True
            pn = ps[need]
            qn = qs[need]
            theta = (aqq[need] - app[need]) / (2.0 * apq[need])
            t = np.where(theta >= 0.0, 1.0, -1.0) / (
                np.abs(theta) + np.sqrt(1.0 + theta * theta)
            )
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = t[:, None] * c
            rp = work[pn]
            rq = work[qn]
            work[pn] = c * rp - s * rq
            work[qn] = s * rp + c * rq
        converged = not rotated

    sigma = np.linalg.norm(work[:, :m], axis=1)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[order]

    u = np.zeros((m, n))
    smax = sigma[0] if n else 0.0
    null_cut = smax * 1e-13
    nonnull = sigma > null_cut
    u[:, nonnull] = (work[nonnull, :m] / sigma[nonnull, None]).T
    v = work[:, m:].T.copy()
    null_idx = np.flatnonzero(~nonnull)
    if null_idx.size:
        sigma = sigma.copy()
        sigma[null_idx] = 0.0
        _complete_null_columns(u, null_idx)
    return SvdResult(u=u, s=sigma, v=v)


def _qr_pivoted(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Householder QR with column pivoting: a[:, perm] = q @ r.

    Used to precondition the Jacobi SVD of larger matrices.  Column norms
    are downdated and recomputed when they have shrunk enough that the
    downdate is untrustworthy.
    """
    m, n = a.shape
    r = np.array(a, dtype=np.float64, copy=True)
    perm = np.arange(n)
    norms2 = np.einsum("ij,ij->j", r, r)
    orig2 = norms2.copy()
    reflectors: list[np.ndarray | None] = []
    for k in range(n):
        j = k + int(np.argmax(norms2[k:]))
        if j != k:
            r[:, [k, j]] = r[:, [j, k]]
            perm[[k, j]] = perm[[j, k]]
            norms2[[k, j]] = norms2[[j, k]]
            orig2[[k, j]] = orig2[[j, k]]
        x = r[k:, k]
        norm_x = np.linalg.norm(x)
        if norm_x == 0.0:
            reflectors.append(None)
            continue
        alpha = -norm_x if x[0] >= 0 else norm_x
        v = x.copy()
        v[0] -= alpha
        v /= np.linalg.norm(v)
        r[k:, k:] -= np.outer(2.0 * v, v @ r[k:, k:])
        r[k + 1:, k] = 0.0
        reflectors.append(v)
        if k + 1 < n:
            norms2[k + 1:] = np.maximum(norms2[k + 1:] - r[k, k + 1:] ** 2, 0.0)
            stale = norms2[k + 1:] < 1e-12 * orig2[k + 1:]
            if stale.any():
                cols = k + 1 + np.flatnonzero(stale)
                norms2[cols] = np.einsum("ij,ij->j", r[k + 1:, cols], r[k + 1:, cols])
                orig2[cols] = norms2[cols]
    q = np.zeros((m, n))
    np.fill_diagonal(q, 1.0)
    for k in range(n - 1, -1, -1):
        v = reflectors[k]
        if v is None:
            continue
        q[k:, :] -= np.outer(2.0 * v, v @ q[k:, :])
    return q, np.triu(r[:n, :]), perm


def svd_full(a: np.ndarray) -> SvdResult:
    """Full thin SVD, sign-canonicalized.

    Returns u (m x k), s (length k, non-increasing, non-negative) and
    v (n x k) with k = min(m, n) such that a = u @ diag(s) @ v.T.  Backed
    by LAPACK; `svd_jacobi` is the library-independent reference
    implementation used to cross-check this one.
    """
    if a.ndim != 2:
        raise DimensionError("svd_full expects a 2-D matrix")
    try:
        u, s, vh = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"SVD iteration failed to converge: {exc}") from exc
    return sign_canonicalize(
        SvdResult(u=np.ascontiguousarray(u), s=s, v=np.ascontiguousarray(vh.T))
    )


def svd_jacobi(a: np.ndarray) -> SvdResult:
    """Full thin SVD by preconditioned one-sided Jacobi rotations.

    Self-contained reference implementation (no LAPACK factorizations
    anywhere in its path): larger matrices are first reduced with a
    pivoted Householder QR and the Jacobi iteration runs on the n x n
    triangular factor; the factors are then lifted back.  Slower than
    `svd_full` but with the same contract, it serves as an independent
    oracle in the test suite and as a bit-stable fallback where LAPACK
    behaviour is in question.
    """
    if a.ndim != 2:
        raise DimensionError("svd_jacobi expects a 2-D matrix")
    m, n = a.shape
    if m < n:
        res = svd_jacobi(a.T)
        return sign_canonicalize(SvdResult(u=res.v, s=res.s, v=res.u))
    if n > _PRECONDITION_MIN_COLS:
        q1, r1, perm = _qr_pivoted(a)
        inner = _jacobi_svd_core(r1)
        u = q1 @ inner.u
        v = np.zeros((n, n))
        v[perm, :] = inner.v
        return sign_canonicalize(SvdResult(u=u, s=inner.s, v=v))
    return sign_canonicalize(_jacobi_svd_core(a))


def randomized_svd(
    a: np.ndarray,
    rank: int,
    oversample: int = 8,
    power_iters: int = 1,
    rng: Rng | None = None,
) -> SvdResult:
    """Halko-style randomized truncated SVD.

    Sketch Y = A @ Omega with a Gaussian Omega of n x (rank + oversample)
    columns, orthonormalize, optionally run power iterations (with QR
    re-orthonormalization between applications for stability), project
    B = Q.T @ A, take the small exact SVD of B, and lift U = Q @ U_b.
    The result is truncated to `rank` and sign-canonicalized.
    """
    if a.ndim != 2:
        raise DimensionError("randomized_svd expects a 2-D matrix")
    if rng is None:
        raise ParameterError("randomized_svd requires an explicit Rng")
    m, n = a.shape
    small = min(m, n)
    if rank < 1 or rank > small:
        raise ParameterError(f"rank must be in [1, {small}], got {rank}")
    if oversample < 0:
        raise ParameterError(f"oversample must be >= 0, got {oversample}")
    if rank + oversample > small:
        raise ParameterError(
            f"rank + oversample = {rank + oversample} exceeds min(m, n) = {small}"
        )
    if power_iters < 0:
        raise ParameterError(f"power_iters must be >= 0, got {power_iters}")

    sketch = rank + oversample
    omega = gaussian(rng, n, sketch)
    q = qr_thin(matmul(a, omega))[0]
    for _ in range(power_iters):
        z = qr_thin(matmul(a.T, q))[0]
        q = qr_thin(matmul(a, z))[0]
    b = matmul(q.T, a)
    small_res = svd_full(b)
    u = matmul(q, small_res.u)
    return sign_canonicalize(
        SvdResult(u=u[:, :rank], s=small_res.s[:rank], v=small_res.v[:, :rank])
    )
