"""Hot inner loops, each in a numba-compiled and a pure-numpy flavour.

The compiled path is used when numba imports and ``VOLPARAM_DISABLE_NUMBA`` is
unset (or set to ``0``/``false``).  Both flavours are always importable under
their suffixed names (``*_numpy``, ``*_numba``) so tests and the benchmark can
compare them directly.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.special import comb

try:
    import numba as nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None
    HAVE_NUMBA = False


def _flag_disabled() -> bool:
    val = os.environ.get("VOLPARAM_DISABLE_NUMBA", "").strip().lower()
    return val not in ("", "0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and not _flag_disabled()


def _njit(func):
    if not HAVE_NUMBA:
        return None
    return nb.njit(cache=True, nogil=True)(func)


# ---------------------------------------------------------------------------
# B-spline basis functions and derivatives (Cox-de Boor, triangular table)
# ---------------------------------------------------------------------------


def basis_ders_numpy(knots, p, spans, us, nder):
    """Nonzero basis values and derivatives, vectorized over points.

    Returns an array of shape ``(len(us), nder + 1, p + 1)``; entry
    ``[n, k, r]`` is the ``k``-th derivative of ``N_{span-p+r}`` at ``us[n]``.
    """
    us = np.asarray(us, dtype=np.float64)
    spans = np.asarray(spans, dtype=np.int64)
    npts = us.shape[0]
    ndu = np.zeros((npts, p + 1, p + 1))
    ndu[:, 0, 0] = 1.0
    left = np.zeros((npts, p + 1))
    right = np.zeros((npts, p + 1))
    for j in range(1, p + 1):
        left[:, j] = us - knots[spans + 1 - j]
        right[:, j] = knots[spans + j] - us
        saved = np.zeros(npts)
        for r in range(j):
            ndu[:, j, r] = right[:, r + 1] + left[:, j - r]
            temp = ndu[:, r, j - 1] / ndu[:, j, r]
            ndu[:, r, j] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        ndu[:, j, j] = saved

    ders = np.zeros((npts, nder + 1, p + 1))
    ders[:, 0, :] = ndu[:, :, p]
    top = min(nder, p)
    a = np.zeros((npts, 2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[:] = 0.0
        a[:, 0, 0] = 1.0
        for k in range(1, top + 1):
            d = np.zeros(npts)
            rk = r - k
            pk = p - k
            if r >= k:
                a[:, s2, 0] = a[:, s1, 0] / ndu[:, pk + 1, rk]
                d = a[:, s2, 0] * ndu[:, rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[:, s2, j] = (a[:, s1, j] - a[:, s1, j - 1]) / ndu[:, pk + 1, rk + j]
                d = d + a[:, s2, j] * ndu[:, rk + j, pk]
            if r <= pk:
                a[:, s2, k] = -a[:, s1, k - 1] / ndu[:, pk + 1, r]
                d = d + a[:, s2, k] * ndu[:, r, pk]
            ders[:, k, r] = d
            s1, s2 = s2, s1
    fac = float(p)
    for k in range(1, top + 1):
        ders[:, k, :] *= fac
        fac *= p - k
    return ders


def _basis_ders_loop(knots, p, spans, us, nder):
    npts = us.shape[0]
    ders = np.zeros((npts, nder + 1, p + 1))
    ndu = np.zeros((p + 1, p + 1))
    left = np.zeros(p + 1)
    right = np.zeros(p + 1)
    a = np.zeros((2, p + 1))
    top = min(nder, p)
    for n in range(npts):
        u = us[n]
        span = spans[n]
        ndu[0, 0] = 1.0
        for j in range(1, p + 1):
            left[j] = u - knots[span + 1 - j]
            right[j] = knots[span + j] - u
            saved = 0.0
            for r in range(j):
                ndu[j, r] = right[r + 1] + left[j - r]
                temp = ndu[r, j - 1] / ndu[j, r]
                ndu[r, j] = saved + right[r + 1] * temp
                saved = left[j - r] * temp
            ndu[j, j] = saved
        for j in range(p + 1):
            ders[n, 0, j] = ndu[j, p]
        for r in range(p + 1):
            s1 = 0
            s2 = 1
            for c in range(p + 1):
                a[0, c] = 0.0
                a[1, c] = 0.0
            a[0, 0] = 1.0
            for k in range(1, top + 1):
                d = 0.0
                rk = r - k
                pk = p - k
                if r >= k:
                    a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                    d = a[s2, 0] * ndu[rk, pk]
                j1 = 1 if rk >= -1 else -rk
                j2 = k - 1 if r - 1 <= pk else p - r
                for j in range(j1, j2 + 1):
                    a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                    d += a[s2, j] * ndu[rk + j, pk]
                if r <= pk:
                    a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                    d += a[s2, k] * ndu[r, pk]
                ders[n, k, r] = d
                tmp = s1
                s1 = s2
                s2 = tmp
        fac = float(p)
        for k in range(1, top + 1):
            for j in range(p + 1):
                ders[n, k, j] *= fac
            fac *= p - k
    return ders


_basis_ders_nb = _njit(_basis_ders_loop)


def basis_ders_numba(knots, p, spans, us, nder):
    return _basis_ders_nb(
        np.ascontiguousarray(knots, dtype=np.float64),
        int(p),
        np.ascontiguousarray(spans, dtype=np.int64),
        np.ascontiguousarray(us, dtype=np.float64),
        int(nder),
    )


# ---------------------------------------------------------------------------
# Tensor-product contraction of local control blocks with basis rows
# ---------------------------------------------------------------------------


def tensor_contract_numpy(ctrl, su, sv, sw, bu, bv, bw):
    """``sum_ijk ctrl[su+i, sv+j, sw+k] * bu[:, i] * bv[:, j] * bw[:, k]``.

    ``su``, ``sv``, ``sw`` are the first active control index per point.
    """
    pu, pv, pw = bu.shape[1], bv.shape[1], bw.shape[1]
    iu = su[:, None] + np.arange(pu)
    iv = sv[:, None] + np.arange(pv)
    iw = sw[:, None] + np.arange(pw)
    block = ctrl[iu[:, :, None, None], iv[:, None, :, None], iw[:, None, None, :]]
    return np.einsum("ni,nj,nk,nijkd->nd", bu, bv, bw, block, optimize=True)


def _tensor_contract_loop(ctrl, su, sv, sw, bu, bv, bw):
    npts = su.shape[0]
    dim = ctrl.shape[3]
    pu = bu.shape[1]
    pv = bv.shape[1]
    pw = bw.shape[1]
    out = np.zeros((npts, dim))
    for n in range(npts):
        for k in range(pw):
            wk = bw[n, k]
            if wk == 0.0:
                continue
            for j in range(pv):
                wjk = bv[n, j] * wk
                if wjk == 0.0:
                    continue
                for i in range(pu):
                    w = bu[n, i] * wjk
                    for d in range(dim):
                        out[n, d] += w * ctrl[su[n] + i, sv[n] + j, sw[n] + k, d]
    return out


_tensor_contract_nb = _njit(_tensor_contract_loop)


def tensor_contract_numba(ctrl, su, sv, sw, bu, bv, bw):
    return _tensor_contract_nb(
        np.ascontiguousarray(ctrl, dtype=np.float64),
        np.ascontiguousarray(su, dtype=np.int64),
        np.ascontiguousarray(sv, dtype=np.int64),
        np.ascontiguousarray(sw, dtype=np.int64),
        np.ascontiguousarray(bu, dtype=np.float64),
        np.ascontiguousarray(bv, dtype=np.float64),
        np.ascontiguousarray(bw, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# de Casteljau split of batched coefficient arrays along one axis
# ---------------------------------------------------------------------------


def casteljau_split_numpy(c, t):
    """Split ``c`` of shape ``(B, d+1, M)`` at ``t`` along axis 1."""
    work = np.array(c, dtype=np.float64, copy=True)
    deg = work.shape[1] - 1
    left = np.empty_like(work)
    right = np.empty_like(work)
    left[:, 0] = work[:, 0]
    right[:, deg] = work[:, deg]
    for level in range(1, deg + 1):
        work[:, : deg - level + 1] = (1.0 - t) * work[:, : deg - level + 1] + t * work[:, 1 : deg - level + 2]
        left[:, level] = work[:, 0]
        right[:, deg - level] = work[:, deg - level]
    return left, right


def _casteljau_split_loop(c, t):
    nb_, n1, m = c.shape
    deg = n1 - 1
    left = np.empty_like(c)
    right = np.empty_like(c)
    work = np.empty(n1)
    s = 1.0 - t
    for b in range(nb_):
        for col in range(m):
            for i in range(n1):
                work[i] = c[b, i, col]
            left[b, 0, col] = work[0]
            right[b, deg, col] = work[deg]
            for level in range(1, deg + 1):
                for i in range(deg - level + 1):
                    work[i] = s * work[i] + t * work[i + 1]
                left[b, level, col] = work[0]
                right[b, deg - level, col] = work[deg - level]
    return left, right


_casteljau_split_nb = _njit(_casteljau_split_loop)


def casteljau_split_numba(c, t):
    return _casteljau_split_nb(np.ascontiguousarray(c, dtype=np.float64), float(t))


# ---------------------------------------------------------------------------
# Products of trivariate Bernstein polynomials (batched)
# ---------------------------------------------------------------------------


def _scales(shape):
    d1, d2, d3 = (s - 1 for s in shape)
    return (
        comb(d1, np.arange(d1 + 1))[:, None, None]
        * comb(d2, np.arange(d2 + 1))[None, :, None]
        * comb(d3, np.arange(d3 + 1))[None, None, :]
    )


def bern_product_numpy(a, b):
    """Bernstein coefficients of ``a * b`` for batched ``(B, m1+1, m2+1, m3+1)`` inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ma = a.shape[1:]
    mb = b.shape[1:]
    out_shape = tuple(x + y - 1 for x, y in zip(ma, mb))
    sa = a * _scales(ma)
    sb = b * _scales(mb)
    out = np.zeros((a.shape[0],) + out_shape)
    for i in range(ma[0]):
        for j in range(ma[1]):
            for k in range(ma[2]):
                out[:, i : i + mb[0], j : j + mb[1], k : k + mb[2]] += sa[:, i, j, k, None, None, None] * sb
    return out / _scales(out_shape)


def _bern_product_loop(sa, sb, out):
    nb_ = sa.shape[0]
    a1, a2, a3 = sa.shape[1], sa.shape[2], sa.shape[3]
    b1, b2, b3 = sb.shape[1], sb.shape[2], sb.shape[3]
    for n in range(nb_):
        for i in range(a1):
            for j in range(a2):
                for k in range(a3):
                    av = sa[n, i, j, k]
                    if av == 0.0:
                        continue
                    for ii in range(b1):
                        for jj in range(b2):
                            for kk in range(b3):
                                out[n, i + ii, j + jj, k + kk] += av * sb[n, ii, jj, kk]
    return out


_bern_product_nb = _njit(_bern_product_loop)


def bern_product_numba(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ma = a.shape[1:]
    mb = b.shape[1:]
    out_shape = tuple(x + y - 1 for x, y in zip(ma, mb))
    sa = np.ascontiguousarray(a * _scales(ma))
    sb = np.ascontiguousarray(b * _scales(mb))
    out = np.zeros((a.shape[0],) + out_shape)
    _bern_product_nb(sa, sb, out)
    return out / _scales(out_shape)


# ---------------------------------------------------------------------------
# Scatter-add of per-point local contributions into a global array
# ---------------------------------------------------------------------------


def scatter_add_numpy(nrows, idx, vals):
    """Sum ``vals[n, a, :]`` into row ``idx[n, a]`` of a ``(nrows, d)`` array."""
    dim = vals.shape[-1]
    flat_idx = idx.reshape(-1)
    flat_vals = vals.reshape(-1, dim)
    out = np.empty((nrows, dim))
    for d in range(dim):
        out[:, d] = np.bincount(flat_idx, weights=flat_vals[:, d], minlength=nrows)
    return out


def _scatter_add_loop(nrows, idx, vals):
    npts, nloc = idx.shape
    dim = vals.shape[2]
    out = np.zeros((nrows, dim))
    for n in range(npts):
        for a in range(nloc):
            r = idx[n, a]
            for d in range(dim):
                out[r, d] += vals[n, a, d]
    return out


_scatter_add_nb = _njit(_scatter_add_loop)


def scatter_add_numba(nrows, idx, vals):
    return _scatter_add_nb(
        int(nrows),
        np.ascontiguousarray(idx, dtype=np.int64),
        np.ascontiguousarray(vals, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Zero-fill incomplete Cholesky and triangular solves on CSR storage
# ---------------------------------------------------------------------------


def _ic0_loop(n, indptr, indices, data):
    """In-place IC(0) of a lower-triangular CSR pattern (sorted columns, diagonal last).

    Returns 0 on success or ``row + 1`` of the first non-positive pivot.
    """
    diag_pos = np.empty(n, dtype=np.int64)
    for i in range(n):
        diag_pos[i] = indptr[i + 1] - 1
    for i in range(n):
        row_start = indptr[i]
        row_end = indptr[i + 1]
        for kk in range(row_start, row_end):
            j = indices[kk]
            # s = sum_{m<j} L[i,m] * L[j,m] over the shared pattern
            s = 0.0
            pa = row_start
            pb = indptr[j]
            end_b = indptr[j + 1]
            while pa < kk and pb < end_b:
                ca = indices[pa]
                cb = indices[pb]
                if cb >= j:
                    break
                if ca == cb:
                    s += data[pa] * data[pb]
                    pa += 1
                    pb += 1
                elif ca < cb:
                    pa += 1
                else:
                    pb += 1
            if j == i:
                val = data[kk] - s
                if val <= 0.0:
                    return i + 1
                data[kk] = np.sqrt(val)
            else:
                data[kk] = (data[kk] - s) / data[diag_pos[j]]
    return 0


def _lower_solve_loop(n, indptr, indices, data, b):
    x = b.copy()
    for i in range(n):
        s = x[i]
        end = indptr[i + 1] - 1
        for kk in range(indptr[i], end):
            s -= data[kk] * x[indices[kk]]
        x[i] = s / data[end]
    return x


def _upper_t_solve_loop(n, indptr, indices, data, b):
    # solves L^T x = b using the row storage of L
    x = b.copy()
    for i in range(n - 1, -1, -1):
        end = indptr[i + 1] - 1
        x[i] = x[i] / data[end]
        xi = x[i]
        for kk in range(indptr[i], end):
            x[indices[kk]] -= data[kk] * xi
    return x


ic0_numpy = _ic0_loop
lower_solve_numpy = _lower_solve_loop
upper_t_solve_numpy = _upper_t_solve_loop
ic0_numba = _njit(_ic0_loop)
lower_solve_numba = _njit(_lower_solve_loop)
upper_t_solve_numba = _njit(_upper_t_solve_loop)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

if USE_NUMBA:
    basis_ders = basis_ders_numba
    tensor_contract = tensor_contract_numba
    casteljau_split = casteljau_split_numba
    bern_product = bern_product_numba
    scatter_add = scatter_add_numba
    ic0 = ic0_numba
    lower_solve = lower_solve_numba
    upper_t_solve = upper_t_solve_numba
else:
    basis_ders = basis_ders_numpy
    tensor_contract = tensor_contract_numpy
    casteljau_split = casteljau_split_numpy
    bern_product = bern_product_numpy
    scatter_add = scatter_add_numpy
    ic0 = ic0_numpy
    lower_solve = lower_solve_numpy
    upper_t_solve = upper_t_solve_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
