"""Sparse symmetric matrices, Cholesky factorization, solves and partial inversion.

Matrices are stored as the lower triangle in compressed-column form.  The
factorization keeps a fill-reducing permutation; numerically it uses a dense
LAPACK backend below ``DENSE_CUTOFF`` and a left-looking sparse Cholesky above
it.  Correctness is permutation-invariant, so callers may pass any ordering.
"""

import math

import numpy as np
import scipy.linalg

DENSE_CUTOFF = 400
MARGVAR_DENSE_CUTOFF = 500


class NotPositiveDefinite(ValueError):
    """Raised when a pivot is not positive; carries the offending index."""

    def __init__(self, pivot_index, pivot_value=None):
        self.pivot_index = int(pivot_index)
        self.pivot_value = pivot_value
        msg = f"matrix is not positive definite (pivot {pivot_index}"
        if pivot_value is not None:
            msg += f" = {pivot_value:.3e}"
        super().__init__(msg + ")")


class SparseSymmetric:
    """Symmetric matrix, lower triangle in CSC layout (indptr, indices, data)."""

    def __init__(self, n, indptr, indices, data):
        self.n = int(n)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.data = np.asarray(data, dtype=float)
        if self.indptr.shape != (self.n + 1,):
            raise ValueError("indptr must have length n + 1")
        if self.indices.shape != self.data.shape:
            raise ValueError("indices and data must have equal length")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("matrix entries must be finite")

    @classmethod
    def from_coo(cls, n, rows, cols, vals):
        """Build from triplets; upper-triangle entries are mirrored down and
        duplicates are summed."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        tri_row = np.maximum(rows, cols)
        tri_col = np.minimum(rows, cols)
        codes = tri_col * n + tri_row  # column-major over the lower triangle
        order = np.argsort(codes, kind="stable")
        codes = codes[order]
        vals = vals[order]
        uniq, start = np.unique(codes, return_index=True)
        summed = np.add.reduceat(vals, start)
        out_cols = uniq // n
        out_rows = uniq % n
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, out_cols + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(n, indptr, out_rows, summed)

    @classmethod
    def from_dense(cls, a, tol=0.0):
        a = np.asarray(a, dtype=float)
        n = a.shape[0]
        if a.shape != (n, n):
            raise ValueError("expected a square matrix")
        if not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max())):
            raise ValueError("matrix is not symmetric")
        rows, cols = np.nonzero(np.abs(np.tril(a)) > tol)
        keep = rows >= cols
        return cls.from_coo(n, rows[keep], cols[keep], a[rows[keep], cols[keep]])

    def _cols(self):
        # expanded column index per entry, shared across with_data copies
        cache = getattr(self, "_struct_cache", None)
        if cache is None:
            cache = {}
            self._struct_cache = cache
        if "cols" not in cache:
            cache["cols"] = np.repeat(np.arange(self.n), np.diff(self.indptr))
            cache["offdiag"] = self.indices != cache["cols"]
        return cache["cols"]

    def to_dense(self):
        cols = self._cols()
        a = np.zeros((self.n, self.n))
        a[self.indices, cols] = self.data
        a[cols, self.indices] = self.data
        return a

    def permuted_dense(self, perm, iperm):
        """Dense P Q P' without forming the unpermuted matrix."""
        self._cols()
        cache = self._struct_cache
        key = ("perm", perm.tobytes())
        if key not in cache:
            cache[key] = (iperm[self.indices], iperm[cache["cols"]])
        pi, pj = cache[key]
        a = np.zeros((self.n, self.n))
        a[pi, pj] = self.data
        a[pj, pi] = self.data
        return a

    def diagonal(self):
        d = np.zeros(self.n)
        cols = self._cols()
        on = ~self._struct_cache["offdiag"]
        d[cols[on]] = self.data[on]
        return d

    def with_data(self, data):
        """Same pattern, new values (no copy of the structure arrays)."""
        out = SparseSymmetric.__new__(SparseSymmetric)
        out.n = self.n
        out.indptr = self.indptr
        out.indices = self.indices
        out.data = np.asarray(data, dtype=float)
        if hasattr(self, "_struct_cache"):
            out._struct_cache = self._struct_cache
        return out

    def quad_form(self, x):
        """x' Q x computed from the lower triangle."""
        cols = self._cols()
        off = self._struct_cache["offdiag"]
        prod = self.data * x[self.indices] * x[cols]
        return float(prod.sum() + prod[off].sum())

    def matvec(self, x):
        cols = self._cols()
        off = self._struct_cache["offdiag"]
        y = np.zeros(self.n)
        np.add.at(y, self.indices, self.data * x[cols])
        np.add.at(y, cols[off], self.data[off] * x[self.indices[off]])
        return y


def min_degree_ordering(n, indptr, indices):
    """Greedy minimum-degree ordering on the sparsity graph (lower triangle in)."""
    adj = [set() for _ in range(n)]
    for j in range(n):
        for i in indices[indptr[j]:indptr[j + 1]]:
            if i != j:
                adj[i].add(j)
                adj[j].add(i)
    alive = np.ones(n, dtype=bool)
    degree = np.array([len(a) for a in adj], dtype=np.int64)
    perm = np.empty(n, dtype=np.int64)
    for step in range(n):
        best = -1
        best_deg = n + 1
        for v in range(n):
            if alive[v] and degree[v] < best_deg:
                best = v
                best_deg = degree[v]
        perm[step] = best
        alive[best] = False
        nbrs = [u for u in adj[best] if alive[u]]
        for u in nbrs:
            adj[u].discard(best)
        for a in range(len(nbrs)):
            u = nbrs[a]
            for b in range(a + 1, len(nbrs)):
                w = nbrs[b]
                if w not in adj[u]:
                    adj[u].add(w)
                    adj[w].add(u)
        for u in nbrs:
            degree[u] = len(adj[u])
    return perm


class CholeskyFactor:
    """Cholesky factor of a permuted SPD matrix: P Q P' = L L'."""

    def __init__(self, n, perm, dense_l=None, sparse_l=None):
        self.n = n
        self.perm = perm
        self._iperm = np.argsort(perm)
        self._dense_l = dense_l
        self._sparse_l = sparse_l  # (indptr, indices, data), diagonal first per column
        if dense_l is not None:
            diag = np.diag(dense_l)
        else:
            lp, li, lx = sparse_l
            diag = lx[lp[:-1]]
        self.log_det = float(2.0 * np.sum(np.log(diag)))
        self._factor_diag = diag

    @property
    def is_dense(self):
        return self._dense_l is not None

    def l_matrix(self):
        """Lower factor as a dense array (testing/inspection helper)."""
        if self.is_dense:
            return self._dense_l.copy()
        lp, li, lx = self._sparse_l
        out = np.zeros((self.n, self.n))
        for j in range(self.n):
            out[li[lp[j]:lp[j + 1]], j] = lx[lp[j]:lp[j + 1]]
        return out

    def solve(self, b):
        """Solve Q x = b."""
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"right-hand side has length {b.shape[0]}, expected {self.n}")
        bp = b[self.perm]
        if self.is_dense:
            y = scipy.linalg.solve_triangular(self._dense_l, bp, lower=True)
            xp = scipy.linalg.solve_triangular(self._dense_l, y, lower=True, trans="T")
        else:
            xp = self._sparse_backsolve(self._sparse_forward(bp))
        return xp[self._iperm]

    def solve_many(self, b):
        """Solve Q X = B for a (n, k) right-hand side."""
        return self.solve(b)

    def solve_lt(self, b):
        """Solve L' w = b in permuted space, returning P' w.

        With b standard normal this yields a draw with covariance Q^-1.
        """
        b = np.asarray(b, dtype=float)
        if self.is_dense:
            w = scipy.linalg.solve_triangular(self._dense_l, b, lower=True, trans="T")
        else:
            w = self._sparse_backsolve(b)
        return w[self._iperm]

    def _sparse_forward(self, b):
        lp, li, lx = self._sparse_l
        y = np.array(b, dtype=float, copy=True)
        for j in range(self.n):
            s, e = lp[j], lp[j + 1]
            yj = y[j] / lx[s]
            y[j] = yj
            if e > s + 1:
                if y.ndim == 1:
                    y[li[s + 1:e]] -= yj * lx[s + 1:e]
                else:
                    y[li[s + 1:e]] -= np.outer(lx[s + 1:e], yj)
        return y

    def _sparse_backsolve(self, y):
        lp, li, lx = self._sparse_l
        x = np.array(y, dtype=float, copy=True)
        for j in range(self.n - 1, -1, -1):
            s, e = lp[j], lp[j + 1]
            if e > s + 1:
                x[j] -= lx[s + 1:e] @ x[li[s + 1:e]]
            x[j] /= lx[s]
        return x

    def marginal_variances(self):
        """Diagonal of Q^-1 in the original ordering."""
        if self.n <= MARGVAR_DENSE_CUTOFF or self.is_dense:
            if self.is_dense:
                sig = scipy.linalg.cho_solve((self._dense_l, True), np.eye(self.n))
                diag_p = np.diag(sig)
            else:
                diag_p = np.diag(self._takahashi_dense_fallback())
        else:
            diag_p = self._takahashi_diag()
        out = np.empty(self.n)
        out[self.perm] = diag_p
        return out

    def _takahashi_dense_fallback(self):
        eye = np.eye(self.n)
        return self._sparse_backsolve(self._sparse_forward(eye))

    def _takahashi_diag(self):
        """Partial inversion on the factor pattern (Takahashi recursion)."""
        lp, li, lx = self._sparse_l
        n = self.n
        dinv = 1.0 / (lx[lp[:-1]] ** 2)
        # unit lower factor columns, diagonal stripped
        cols_rows = [li[lp[j] + 1:lp[j + 1]] for j in range(n)]
        cols_vals = [lx[lp[j] + 1:lp[j + 1]] / lx[lp[j]] for j in range(n)]
        sig_diag = np.zeros(n)
        sig_cols = [np.zeros(len(r)) for r in cols_rows]

        def lookup(r, c):
            if r == c:
                return sig_diag[r]
            rr, cc = (r, c) if r > c else (c, r)
            pos = np.searchsorted(cols_rows[cc], rr)
            if pos < len(cols_rows[cc]) and cols_rows[cc][pos] == rr:
                return sig_cols[cc][pos]
            return 0.0

        for j in range(n - 1, -1, -1):
            rows_j = cols_rows[j]
            vals_j = cols_vals[j]
            m = len(rows_j)
            for a in range(m - 1, -1, -1):
                i = rows_j[a]
                acc = 0.0
                for b in range(m):
                    acc += vals_j[b] * lookup(rows_j[b], i)
                sig_cols[j][a] = -acc
            acc = 0.0
            for b in range(m):
                acc += vals_j[b] * sig_cols[j][b]
            sig_diag[j] = dinv[j] - acc
        return sig_diag


def factorize(q, ordering=None, method="auto"):
    """Cholesky-factorize a SparseSymmetric SPD matrix.

    ordering: optional precomputed permutation; a greedy minimum-degree
    ordering is used when omitted.  method selects the numeric backend
    ("auto", "dense" or "sparse").
    """
    n = q.n
    if ordering is None:
        ordering = min_degree_ordering(n, q.indptr, q.indices)
    else:
        ordering = np.asarray(ordering, dtype=np.int64)
        if sorted(ordering.tolist()) != list(range(n)):
            raise ValueError("ordering must be a permutation of 0..n-1")
    if method == "auto":
        method = "dense" if n <= DENSE_CUTOFF else "sparse"
    if method == "dense":
        return _factorize_dense(q, ordering)
    if method == "sparse":
        return _factorize_sparse(q, ordering)
    raise ValueError(f"unknown factorization method: {method}")


def _factorize_dense(q, perm):
    a = q.permuted_dense(perm, np.argsort(perm))
    try:
        l = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        _locate_bad_pivot(a, perm)
        raise
    return CholeskyFactor(q.n, perm, dense_l=l)


def _locate_bad_pivot(a, perm):
    a = a.copy()
    n = a.shape[0]
    for j in range(n):
        piv = a[j, j]
        if piv <= 0.0 or not math.isfinite(piv):
            raise NotPositiveDefinite(perm[j], piv)
        r = math.sqrt(piv)
        a[j:, j] /= r
        a[j + 1:, j + 1:] -= np.outer(a[j + 1:, j], a[j + 1:, j])


def _factorize_sparse(q, perm):
    n = q.n
    iperm = np.argsort(perm)
    # permuted lower-triangle columns, rows sorted
    pcols = [[] for _ in range(n)]
    for j in range(n):
        for t in range(q.indptr[j], q.indptr[j + 1]):
            i = q.indices[t]
            pi, pj = iperm[i], iperm[j]
            lo, hi = (pj, pi) if pi > pj else (pi, pj)
            pcols[lo].append((hi, q.data[t]))

    col_rows = [None] * n
    col_vals = [None] * n
    row_updates = [[] for _ in range(n)]  # (k, l_jk) pairs finalized earlier
    x = np.zeros(n)
    for j in range(n):
        touched = [j]
        for i, v in pcols[j]:
            if x[i] == 0.0 and i != j:
                touched.append(i)
            x[i] += v
        for k, ljk in row_updates[j]:
            rows_k = col_rows[k]
            vals_k = col_vals[k]
            s = np.searchsorted(rows_k, j)
            seg = rows_k[s:]
            newly = seg[x[seg] == 0.0]
            x[seg] -= ljk * vals_k[s:]
            touched.extend(int(t) for t in newly if t != j)
        piv = x[j]
        if piv <= 0.0 or not math.isfinite(piv):
            raise NotPositiveDefinite(perm[j], piv)
        root = math.sqrt(piv)
        rows_j = np.array(sorted(set(int(t) for t in touched if t > j)), dtype=np.int64)
        vals_j = x[rows_j] / root
        for pos, i in enumerate(rows_j):
            row_updates[i].append((j, vals_j[pos]))
        x[rows_j] = 0.0
        x[j] = 0.0
        col_rows[j] = np.concatenate(([j], rows_j))
        col_vals[j] = np.concatenate(([root], vals_j))

    lp = np.zeros(n + 1, dtype=np.int64)
    for j in range(n):
        lp[j + 1] = lp[j] + len(col_rows[j])
    li = np.concatenate(col_rows)
    lx = np.concatenate(col_vals)
    return CholeskyFactor(n, perm, sparse_l=(lp, li, lx))


def solve(factor, b):
    """Solve Q x = b against a CholeskyFactor."""
    return factor.solve(b)


def marginal_variances(factor):
    """Diagonal of Q^-1."""
    return factor.marginal_variances()


def solve_for_columns(factor, a):
    """For a (k, n) combination matrix A return (A Q^-1 A', A Q^-1)."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[1] != factor.n:
        raise ValueError(f"combination matrix must be (k, {factor.n})")
    x = factor.solve_many(a.T)  # Q^-1 A'
    aqa = a @ x
    aqa = 0.5 * (aqa + aqa.T)
    return aqa, x.T
