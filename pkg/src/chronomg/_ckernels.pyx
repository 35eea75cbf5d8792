# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled bulk kernels.

Native versions of the theta-Euler and two-stage Runge-Kutta steppers for the
built-in models, plus the interval sweep and QR iteration drivers.  The GIL is
released for the whole of every sweep so interval chunks can run on threads.
"""

from libc.math cimport fabs, sqrt, log, isfinite
from libc.stdlib cimport malloc, calloc, free
from libc.string cimport memcpy, memset
from scipy.linalg.cython_lapack cimport dgbtrf, dgbtrs

cdef enum:
    MODEL_DAHLQUIST = 0
    MODEL_LORENZ = 1
    MODEL_KS = 2
    SCHEME_THETA = 0
    SCHEME_RK2 = 1
    PRED_NONE = 0
    PRED_EULER = 1
    PRED_AUTO = 2

# status codes returned by the nogil routines
cdef enum:
    OK = 0
    NEWTON_FAIL = 1
    SINGULAR = 2
    NONFINITE = 3
    DEGENERATE = 4


cdef struct Model:
    int kind
    int n
    double lam
    double sigma, rho, beta
    double c1[7]
    double c2[7]
    double c4[7]


cdef struct Scheme:
    int kind
    double theta
    double A[4]
    double b[2]
    double c[2]
    double tol
    int maxit
    int pred


cdef struct Work:
    int n, S, P, kmax, banded
    double* fx
    double* base
    double* Y
    double* F
    double* G
    double* dz
    double* mat       # dense S*S, or periodic rows S*(2P+1)
    double* dense     # dense LU storage S*S
    int* dpiv
    double* J         # dense jacobian n*n, or 2 stage row blocks n*7 each
    double* rhs       # S*kmax
    double* tmp       # n*kmax
    double* tmp2      # n*kmax
    # periodic banded LU
    double* ab
    int* ipiv
    double* X
    double* A21
    double* Sch
    int* spiv
    double* col
    int newton_it
    double newton_res


# ---------------------------------------------------------------------------
# models

cdef void model_rhs(const Model* M, const double* u, double* out) noexcept nogil:
    cdef int i, o, n = M.n, j
    cdef double d1, d2, d4
    if M.kind == MODEL_DAHLQUIST:
        out[0] = M.lam * u[0]
    elif M.kind == MODEL_LORENZ:
        out[0] = M.sigma * (u[1] - u[0])
        out[1] = u[0] * (M.rho - u[2]) - u[1]
        out[2] = u[0] * u[1] - M.beta * u[2]
    else:
        for i in range(n):
            d1 = 0.0
            d2 = 0.0
            d4 = 0.0
            for o in range(7):
                j = i + o - 3
                if j < 0:
                    j += n
                elif j >= n:
                    j -= n
                d1 += M.c1[o] * u[j]
                d2 += M.c2[o] * u[j]
                d4 += M.c4[o] * u[j]
            out[i] = -d2 - d4 - u[i] * d1


cdef void model_jac_dense(const Model* M, const double* u, double* J) noexcept nogil:
    if M.kind == MODEL_DAHLQUIST:
        J[0] = M.lam
    elif M.kind == MODEL_LORENZ:
        J[0] = -M.sigma
        J[1] = M.sigma
        J[2] = 0.0
        J[3] = M.rho - u[2]
        J[4] = -1.0
        J[5] = -u[0]
        J[6] = u[1]
        J[7] = u[0]
        J[8] = -M.beta


cdef void model_jac_rows(const Model* M, const double* u, double* rows) noexcept nogil:
    # rows[i*7 + o+3] = J[i, (i+o) % n]
    cdef int i, o, j, n = M.n
    cdef double du
    for i in range(n):
        du = 0.0
        for o in range(7):
            j = i + o - 3
            if j < 0:
                j += n
            elif j >= n:
                j -= n
            du += M.c1[o] * u[j]
        for o in range(7):
            rows[i * 7 + o] = -(M.c2[o] + M.c4[o]) - u[i] * M.c1[o]
        rows[i * 7 + 3] -= du


cdef void model_jac_apply(const Model* M, const double* u, const double* V, int k,
                          double* out, double* J) noexcept nogil:
    """out (n x k) = J(u) V; ``J`` is scratch of size n*n (dense) or n*7."""
    cdef int i, j, c, o, n = M.n
    cdef double s
    if M.kind == MODEL_KS:
        model_jac_rows(M, u, J)
        for i in range(n):
            for c in range(k):
                s = 0.0
                for o in range(7):
                    j = i + o - 3
                    if j < 0:
                        j += n
                    elif j >= n:
                        j -= n
                    s += J[i * 7 + o] * V[j * k + c]
                out[i * k + c] = s
    else:
        model_jac_dense(M, u, J)
        for i in range(n):
            for c in range(k):
                s = 0.0
                for j in range(n):
                    s += J[i * n + j] * V[j * k + c]
                out[i * k + c] = s


cdef double model_stiffness(const Model* M, const double* u, double* J) noexcept nogil:
    cdef int i, j, n = M.n
    cdef double s, best = 0.0
    if M.kind == MODEL_KS:
        model_jac_rows(M, u, J)
        for i in range(n):
            s = 0.0
            for j in range(7):
                s += fabs(J[i * 7 + j])
            if s > best:
                best = s
    else:
        model_jac_dense(M, u, J)
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += fabs(J[i * n + j])
            if s > best:
                best = s
    return best


# ---------------------------------------------------------------------------
# dense LU, row-major, partial pivoting

cdef int lu_factor(double* a, int n, int* piv) noexcept nogil:
    cdef int i, j, r, p
    cdef double big, t, f
    for j in range(n):
        p = j
        big = fabs(a[j * n + j])
        for i in range(j + 1, n):
            if fabs(a[i * n + j]) > big:
                big = fabs(a[i * n + j])
                p = i
        piv[j] = p
        if big == 0.0:
            return SINGULAR
        if p != j:
            for r in range(n):
                t = a[j * n + r]
                a[j * n + r] = a[p * n + r]
                a[p * n + r] = t
        for i in range(j + 1, n):
            f = a[i * n + j] / a[j * n + j]
            a[i * n + j] = f
            if f != 0.0:
                for r in range(j + 1, n):
                    a[i * n + r] -= f * a[j * n + r]
    return OK


cdef void lu_solve(const double* a, int n, const int* piv, double* b, int k) noexcept nogil:
    """In-place solve for a row-major n x k right-hand side."""
    cdef int i, j, c, p
    cdef double t, f
    for i in range(n):
        p = piv[i]
        if p != i:
            for c in range(k):
                t = b[i * k + c]
                b[i * k + c] = b[p * k + c]
                b[p * k + c] = t
    for i in range(n):
        for j in range(i):
            f = a[i * n + j]
            if f != 0.0:
                for c in range(k):
                    b[i * k + c] -= f * b[j * k + c]
    for i in range(n - 1, -1, -1):
        for j in range(i + 1, n):
            f = a[i * n + j]
            if f != 0.0:
                for c in range(k):
                    b[i * k + c] -= f * b[j * k + c]
        f = a[i * n + i]
        for c in range(k):
            b[i * k + c] /= f


# ---------------------------------------------------------------------------
# periodic banded LU (same corner split as the Python version)

cdef int pb_factor(Work* w) noexcept nogil:
    cdef int S = w.S, P = w.P, width = 2 * P + 1
    cdef int M = S - P, kl = P, ku = P, ldab = 3 * P + 1, info = 0
    cdef int i, kk, o, j, c, r, nrhs = P
    cdef double v, s
    cdef double* rows = w.mat
    memset(w.ab, 0, ldab * M * sizeof(double))
    memset(w.X, 0, M * P * sizeof(double))
    memset(w.A21, 0, P * M * sizeof(double))
    memset(w.Sch, 0, P * P * sizeof(double))
    for i in range(S):
        for kk in range(width):
            o = kk - P
            v = rows[i * width + kk]
            j = i + o
            if j < 0:
                j += S
            elif j >= S:
                j -= S
            if i < M and j < M:
                w.ab[(kl + ku + i - j) + j * ldab] += v
            elif i < M:
                w.X[(j - M) * M + i] += v          # A12, column-major M x P
            elif j < M:
                w.A21[(i - M) * M + j] += v        # row-major P x M
            else:
                w.Sch[(i - M) * P + (j - M)] += v  # A22
    dgbtrf(&M, &M, &kl, &ku, w.ab, &ldab, w.ipiv, &info)
    if info != 0:
        return SINGULAR
    dgbtrs(b"N", &M, &kl, &ku, &nrhs, w.ab, &ldab, w.ipiv, w.X, &M, &info)
    # Schur complement S = A22 - A21 X
    for r in range(P):
        for c in range(P):
            s = 0.0
            for j in range(M):
                s += w.A21[r * M + j] * w.X[c * M + j]
            w.Sch[r * P + c] -= s
    return lu_factor(w.Sch, P, w.spiv)


cdef void pb_solve(Work* w, double* b, int k) noexcept nogil:
    """In-place solve, ``b`` row-major S x k."""
    cdef int S = w.S, P = w.P, M = S - P, kl = P, ku = P, ldab = 3 * P + 1, info = 0
    cdef int i, c, j
    cdef double s
    for c in range(k):
        for i in range(M):
            w.col[c * M + i] = b[i * k + c]
    dgbtrs(b"N", &M, &kl, &ku, &k, w.ab, &ldab, w.ipiv, w.col, &M, &info)
    # x2 = Sch^{-1} (b2 - A21 y1), written into b[M:]
    for i in range(P):
        for c in range(k):
            s = 0.0
            for j in range(M):
                s += w.A21[i * M + j] * w.col[c * M + j]
            b[(M + i) * k + c] -= s
    lu_solve(w.Sch, P, w.spiv, b + M * k, k)
    # x1 = y1 - X x2
    for i in range(M):
        for c in range(k):
            s = w.col[c * M + i]
            for j in range(P):
                s -= w.X[j * M + i] * b[(M + j) * k + c]
            b[i * k + c] = s


cdef int sys_factor(Work* w) noexcept nogil:
    cdef int S = w.S, P = w.P, width, i, kk, j
    if w.banded == 1:
        return pb_factor(w)
    if w.banded == 2:
        # periodic rows too short for the corner split: expand densely
        width = 2 * P + 1
        memset(w.dense, 0, S * S * sizeof(double))
        for i in range(S):
            for kk in range(width):
                j = (i + kk - P) % S
                if j < 0:
                    j += S
                w.dense[i * S + j] += w.mat[i * width + kk]
    else:
        memcpy(w.dense, w.mat, S * S * sizeof(double))
    return lu_factor(w.dense, S, w.dpiv)


cdef void sys_solve(Work* w, double* b, int k) noexcept nogil:
    if w.banded == 1:
        pb_solve(w, b, k)
    else:
        lu_solve(w.dense, w.S, w.dpiv, b, k)


# ---------------------------------------------------------------------------
# Newton matrices

cdef void assemble_theta(const Model* M, const Scheme* sc, Work* w, const double* y, double h) noexcept nogil:
    cdef int n = M.n, i, j
    cdef double c = h * (1.0 - sc.theta)
    if M.kind == MODEL_KS:
        model_jac_rows(M, y, w.mat)
        for i in range(n * 7):
            w.mat[i] = -c * w.mat[i]
        for i in range(n):
            w.mat[i * 7 + 3] += 1.0
    else:
        model_jac_dense(M, y, w.J)
        for i in range(n):
            for j in range(n):
                w.mat[i * n + j] = -c * w.J[i * n + j]
            w.mat[i * n + i] += 1.0


cdef void assemble_rk2(const Model* M, const Scheme* sc, Work* w, const double* Y, double h) noexcept nogil:
    cdef int n = M.n, S = w.S, i, j, r, c, o, P, width, kk
    cdef double a
    cdef double* J0
    if M.kind == MODEL_KS:
        P = w.P
        width = 2 * P + 1
        J0 = w.J
        model_jac_rows(M, Y, J0)
        model_jac_rows(M, Y + n, J0 + n * 7)
        memset(w.mat, 0, S * width * sizeof(double))
        for i in range(2):
            for j in range(2):
                a = sc.A[i * 2 + j]
                if a == 0.0:
                    continue
                for r in range(n):
                    for kk in range(7):
                        o = kk - 3
                        w.mat[(2 * r + i) * width + 2 * o + (j - i) + P] -= h * a * J0[j * n * 7 + r * 7 + kk]
        for r in range(S):
            w.mat[r * width + P] += 1.0
    else:
        memset(w.mat, 0, S * S * sizeof(double))
        for j in range(2):
            model_jac_dense(M, Y + j * n, w.J)
            for i in range(2):
                a = sc.A[i * 2 + j]
                for r in range(n):
                    for c in range(n):
                        w.mat[(i * n + r) * S + j * n + c] = -h * a * w.J[r * n + c]
        for r in range(S):
            w.mat[r * S + r] += 1.0


# pack stage-major (2, n, k) data into the ordering of the Newton system
cdef void pack(const Model* M, const double* src, double* dst, int k) noexcept nogil:
    cdef int n = M.n, i, r, c
    if M.kind == MODEL_KS:
        for i in range(2):
            for r in range(n):
                for c in range(k):
                    dst[(2 * r + i) * k + c] = src[(i * n + r) * k + c]
    else:
        memcpy(dst, src, 2 * n * k * sizeof(double))


cdef void unpack(const Model* M, const double* src, double* dst, int k) noexcept nogil:
    cdef int n = M.n, i, r, c
    if M.kind == MODEL_KS:
        for i in range(2):
            for r in range(n):
                for c in range(k):
                    dst[(i * n + r) * k + c] = src[(2 * r + i) * k + c]
    else:
        memcpy(dst, src, 2 * n * k * sizeof(double))


# ---------------------------------------------------------------------------
# steppers

cdef double amax(const double* v, int n) noexcept nogil:
    cdef int i
    cdef double m = 0.0
    for i in range(n):
        if fabs(v[i]) > m:
            m = fabs(v[i])
    return m


cdef int use_predictor(const Model* M, const Scheme* sc, Work* w, const double* x, double h) noexcept nogil:
    if sc.pred == PRED_AUTO:
        return h * model_stiffness(M, x, w.J) <= 1.0
    return sc.pred == PRED_EULER


cdef int step_theta(const Model* M, const Scheme* sc, Work* w, const double* x, double h,
                    double* y, const double* V, int k, double* W) noexcept nogil:
    cdef int n = M.n, i, it, st
    cdef double c = h * (1.0 - sc.theta), scale, res
    model_rhs(M, x, w.fx)
    w.newton_it = 0
    w.newton_res = 0.0
    if sc.theta == 1.0:
        for i in range(n):
            y[i] = x[i] + h * w.fx[i]
        if V != NULL:
            model_jac_apply(M, x, V, k, W, w.J)
            for i in range(n * k):
                W[i] = V[i] + h * W[i]
        return OK
    for i in range(n):
        w.base[i] = x[i] + h * sc.theta * w.fx[i]
    if use_predictor(M, sc, w, x, h):
        for i in range(n):
            y[i] = x[i] + h * w.fx[i]
    else:
        memcpy(y, x, n * sizeof(double))
    scale = sc.tol * (1.0 + amax(x, n))
    it = 0
    while True:
        model_rhs(M, y, w.F)
        res = 0.0
        for i in range(n):
            w.G[i] = y[i] - w.base[i] - c * w.F[i]
            if not fabs(w.G[i]) <= res:
                res = fabs(w.G[i])
        w.newton_it = it
        w.newton_res = res
        if res <= scale:
            break
        if not isfinite(res) or it == sc.maxit:
            return NEWTON_FAIL
        assemble_theta(M, sc, w, y, h)
        st = sys_factor(w)
        if st != OK:
            return st
        sys_solve(w, w.G, 1)
        for i in range(n):
            y[i] -= w.G[i]
        it += 1
    if V != NULL:
        model_jac_apply(M, x, V, k, w.rhs, w.J)
        for i in range(n * k):
            w.rhs[i] = V[i] + h * sc.theta * w.rhs[i]
        assemble_theta(M, sc, w, y, h)
        st = sys_factor(w)
        if st != OK:
            return st
        sys_solve(w, w.rhs, k)
        memcpy(W, w.rhs, n * k * sizeof(double))
    return OK


cdef int step_rk2(const Model* M, const Scheme* sc, Work* w, const double* x, double h,
                  double* y, const double* V, int k, double* W) noexcept nogil:
    cdef int n = M.n, i, j, r, it, st
    cdef double scale, res, g
    cdef double* Y = w.Y
    cdef double* F = w.F
    if use_predictor(M, sc, w, x, h):
        model_rhs(M, x, w.fx)
        for j in range(2):
            for i in range(n):
                Y[j * n + i] = x[i] + h * sc.c[j] * w.fx[i]
    else:
        memcpy(Y, x, n * sizeof(double))
        memcpy(Y + n, x, n * sizeof(double))
    scale = sc.tol * (1.0 + amax(x, n))
    it = 0
    while True:
        model_rhs(M, Y, F)
        model_rhs(M, Y + n, F + n)
        res = 0.0
        for j in range(2):
            for i in range(n):
                g = Y[j * n + i] - x[i] - h * (sc.A[j * 2] * F[i] + sc.A[j * 2 + 1] * F[n + i])
                w.G[j * n + i] = g
                if not fabs(g) <= res:
                    res = fabs(g)
        w.newton_it = it
        w.newton_res = res
        if res <= scale:
            break
        if not isfinite(res) or it == sc.maxit:
            return NEWTON_FAIL
        assemble_rk2(M, sc, w, Y, h)
        st = sys_factor(w)
        if st != OK:
            return st
        pack(M, w.G, w.dz, 1)
        sys_solve(w, w.dz, 1)
        unpack(M, w.dz, w.G, 1)
        for i in range(2 * n):
            Y[i] -= w.G[i]
        it += 1
    for i in range(n):
        y[i] = x[i] + h * (sc.b[0] * F[i] + sc.b[1] * F[n + i])
    if V != NULL:
        assemble_rk2(M, sc, w, Y, h)
        st = sys_factor(w)
        if st != OK:
            return st
        _pack_twice(M, V, w.rhs, k)
        sys_solve(w, w.rhs, k)
        memcpy(W, V, n * k * sizeof(double))
        for j in range(2):
            if sc.b[j] == 0.0:
                continue
            _unpack_stage(M, w.rhs, w.tmp2, k, j)
            model_jac_apply(M, Y + j * n, w.tmp2, k, w.tmp, w.J)
            for i in range(n * k):
                W[i] += h * sc.b[j] * w.tmp[i]
    return OK


cdef void _pack_twice(const Model* M, const double* V, double* dst, int k) noexcept nogil:
    cdef int n = M.n, i, r, c
    if M.kind == MODEL_KS:
        for r in range(n):
            for i in range(2):
                for c in range(k):
                    dst[(2 * r + i) * k + c] = V[r * k + c]
    else:
        memcpy(dst, V, n * k * sizeof(double))
        memcpy(dst + n * k, V, n * k * sizeof(double))


cdef void _unpack_stage(const Model* M, const double* src, double* dst, int k, int j) noexcept nogil:
    cdef int n = M.n, r, c
    if M.kind == MODEL_KS:
        for r in range(n):
            for c in range(k):
                dst[r * k + c] = src[(2 * r + j) * k + c]
    else:
        memcpy(dst, src + j * n * k, n * k * sizeof(double))


cdef inline int cstep(const Model* M, const Scheme* sc, Work* w, const double* x, double h,
                      double* y, const double* V, int k, double* W) noexcept nogil:
    if sc.kind == SCHEME_THETA:
        return step_theta(M, sc, w, x, h, y, V, k, W)
    return step_rk2(M, sc, w, x, h, y, V, k, W)


# ---------------------------------------------------------------------------
# workspace

cdef Work* work_new(const Model* M, const Scheme* sc, int kmax) noexcept nogil:
    cdef Work* w = <Work*> calloc(1, sizeof(Work))
    cdef int n = M.n, S, P, width, Mb
    if w == NULL:
        return NULL
    if kmax < 1:
        kmax = 1
    S = n if sc.kind == SCHEME_THETA else 2 * n
    P = 0
    w.banded = 0
    if M.kind == MODEL_KS:
        P = 3 if sc.kind == SCHEME_THETA else 7
        w.banded = 1 if S >= 4 * P + 2 else 2
    w.n = n
    w.S = S
    w.P = P
    w.kmax = kmax
    width = 2 * P + 1
    Mb = S - P
    w.fx = <double*> malloc(n * sizeof(double))
    w.base = <double*> malloc(n * sizeof(double))
    w.Y = <double*> malloc(2 * n * sizeof(double))
    w.F = <double*> malloc(2 * n * sizeof(double))
    w.G = <double*> malloc(S * sizeof(double))
    w.dz = <double*> malloc(S * sizeof(double))
    w.mat = <double*> malloc((S * width if M.kind == MODEL_KS else S * S) * sizeof(double))
    w.dense = <double*> malloc(S * S * sizeof(double))
    w.dpiv = <int*> malloc(S * sizeof(int))
    w.J = <double*> malloc((2 * n * 7 if M.kind == MODEL_KS else n * n) * sizeof(double))
    w.rhs = <double*> malloc(S * kmax * sizeof(double))
    w.tmp = <double*> malloc(n * kmax * sizeof(double))
    w.tmp2 = <double*> malloc(n * kmax * sizeof(double))
    if w.banded == 1:
        w.ab = <double*> malloc((3 * P + 1) * Mb * sizeof(double))
        w.ipiv = <int*> malloc(Mb * sizeof(int))
        w.X = <double*> malloc(Mb * P * sizeof(double))
        w.A21 = <double*> malloc(P * Mb * sizeof(double))
        w.Sch = <double*> malloc(P * P * sizeof(double))
        w.spiv = <int*> malloc(P * sizeof(int))
        w.col = <double*> malloc(Mb * (kmax if kmax > 1 else 1) * sizeof(double))
    return w


cdef void work_free(Work* w) noexcept nogil:
    if w == NULL:
        return
    free(w.fx); free(w.base); free(w.Y); free(w.F); free(w.G); free(w.dz)
    free(w.mat); free(w.dense); free(w.dpiv); free(w.J)
    free(w.rhs); free(w.tmp); free(w.tmp2)
    free(w.ab); free(w.ipiv); free(w.X); free(w.A21); free(w.Sch); free(w.spiv); free(w.col)
    free(w)


# ---------------------------------------------------------------------------
# Python-facing stepper handle

cdef class CStepper:
    """Native stepper built from a ``cspec`` tuple."""

    cdef Model model
    cdef Scheme scheme
    cdef public object spec

    def __init__(self, scheme_spec):
        cdef int i
        self.spec = scheme_spec
        kind, mspec = scheme_spec[0], scheme_spec[1]
        memset(&self.model, 0, sizeof(Model))
        memset(&self.scheme, 0, sizeof(Scheme))
        name = mspec[0]
        if name == "dahlquist":
            self.model.kind = MODEL_DAHLQUIST
            self.model.n = 1
            self.model.lam = mspec[1]
        elif name == "lorenz":
            self.model.kind = MODEL_LORENZ
            self.model.n = 3
            self.model.sigma, self.model.rho, self.model.beta = mspec[1], mspec[2], mspec[3]
        elif name == "ks":
            self.model.kind = MODEL_KS
            self.model.n = mspec[1]
            dx = mspec[2]
            d1 = (0.0, 1.0, -8.0, 0.0, 8.0, -1.0, 0.0)
            d2 = (0.0, -1.0, 16.0, -30.0, 16.0, -1.0, 0.0)
            d4 = (-1.0, 12.0, -39.0, 56.0, -39.0, 12.0, -1.0)
            for i in range(7):
                self.model.c1[i] = d1[i] / 12.0 / dx
                self.model.c2[i] = d2[i] / 12.0 / dx ** 2
                self.model.c4[i] = d4[i] / 6.0 / dx ** 4
        else:
            raise ValueError(f"no native model {name!r}")
        preds = {"none": PRED_NONE, "euler": PRED_EULER, "auto": PRED_AUTO}
        if kind == "theta":
            self.scheme.kind = SCHEME_THETA
            self.scheme.theta = scheme_spec[2]
            self.scheme.tol, self.scheme.maxit = scheme_spec[3], scheme_spec[4]
            self.scheme.pred = preds[scheme_spec[5]]
        elif kind == "rk2":
            self.scheme.kind = SCHEME_RK2
            A, b = scheme_spec[2], scheme_spec[3]
            for i in range(4):
                self.scheme.A[i] = A[i]
            self.scheme.b[0], self.scheme.b[1] = b[0], b[1]
            self.scheme.c[0] = A[0] + A[1]
            self.scheme.c[1] = A[2] + A[3]
            self.scheme.tol, self.scheme.maxit = scheme_spec[4], scheme_spec[5]
            self.scheme.pred = preds[scheme_spec[6]]
        else:
            raise ValueError(f"no native scheme {kind!r}")

    @property
    def n(self):
        return self.model.n

    def step(self, double[::1] x, double h, double[:, ::1] V=None):
        """One step; returns ``(y, W, status, newton_iterations, residual)``."""
        import numpy as np
        cdef int n = self.model.n, k = 0, st
        y = np.empty(n)
        cdef double[::1] yv = y
        cdef double[:, ::1] Wv
        W = None
        if V is not None:
            k = V.shape[1]
            W = np.empty((n, k))
            Wv = W
        cdef Work* w = work_new(&self.model, &self.scheme, k)
        if w == NULL:
            raise MemoryError()
        with nogil:
            if k:
                st = cstep(&self.model, &self.scheme, w, &x[0], h, &yv[0], &V[0, 0], k, &Wv[0, 0])
            else:
                st = cstep(&self.model, &self.scheme, w, &x[0], h, &yv[0], NULL, 0, NULL)
        its, res = w.newton_it, w.newton_res
        work_free(w)
        return y, W, st, its, res


# ---------------------------------------------------------------------------
# drivers

def propagate(CStepper st, double h, double[:, ::1] U, double[:, ::1] G,
              long long[::1] starts, int m, bint write, double[:, ::1] phi=None,
              int corr_kind=0, double[:, :, ::1] D=None, double[:, :, ::1] P=None,
              double[:, :, ::1] Q=None, double[:, :, ::1] V=None,
              double[:, :, ::1] W=None):
    """Interval sweep; see the Python reference for the semantics.

    Returns ``(status, index, newton_iterations, newton_residual)``; status 0
    means success.
    """
    cdef int n = st.model.n, k = 0, r = 0, nint = starts.shape[0]
    cdef int tan = V is not None, has_phi = phi is not None
    cdef long long s, i
    cdef int j, a, b, c, status = OK, q
    cdef long long bad = -1
    cdef double acc
    cdef Work* w
    cdef double* x
    cdef double* y
    cdef double* Vk
    cdef double* Wk
    cdef double* pq
    cdef double* t
    if tan:
        k = V.shape[2]
    if corr_kind == 2:
        r = P.shape[2]
    w = work_new(&st.model, &st.scheme, k)
    x = <double*> malloc(n * sizeof(double))
    y = <double*> malloc(n * sizeof(double))
    Vk = <double*> malloc((n * k + 1) * sizeof(double))
    Wk = <double*> malloc((n * k + 1) * sizeof(double))
    pq = <double*> malloc((r * (k if k > 1 else 1) + 1) * sizeof(double))
    if w == NULL or x == NULL or y == NULL or Vk == NULL or Wk == NULL or pq == NULL:
        work_free(w); free(x); free(y); free(Vk); free(Wk); free(pq)
        raise MemoryError()
    with nogil:
        for q in range(nint):
            s = starts[q]
            memcpy(x, &U[s, 0], n * sizeof(double))
            if tan:
                memcpy(Vk, &V[q, 0, 0], n * k * sizeof(double))
            for j in range(1, m + 1):
                i = s + j
                if tan:
                    status = cstep(&st.model, &st.scheme, w, x, h, y, Vk, k, Wk)
                else:
                    status = cstep(&st.model, &st.scheme, w, x, h, y, NULL, 0, NULL)
                if status != OK:
                    bad = i
                    break
                if corr_kind == 1:
                    for a in range(n):
                        acc = 0.0
                        for b in range(n):
                            acc += D[i, a, b] * x[b]
                        y[a] += acc
                    if tan:
                        for a in range(n):
                            for c in range(k):
                                acc = 0.0
                                for b in range(n):
                                    acc += D[i, a, b] * Vk[b * k + c]
                                Wk[a * k + c] += acc
                elif corr_kind == 2:
                    # y += P (Q^T x)
                    for c in range(r):
                        acc = 0.0
                        for b in range(n):
                            acc += Q[i, b, c] * x[b]
                        pq[c] = acc
                    for a in range(n):
                        acc = 0.0
                        for c in range(r):
                            acc += P[i, a, c] * pq[c]
                        y[a] += acc
                    if tan:
                        for c in range(r):
                            for b in range(k):
                                acc = 0.0
                                for a in range(n):
                                    acc += Q[i, a, c] * Vk[a * k + b]
                                pq[c * k + b] = acc
                        for a in range(n):
                            for b in range(k):
                                acc = 0.0
                                for c in range(r):
                                    acc += P[i, a, c] * pq[c * k + b]
                                Wk[a * k + b] += acc
                if j < m:
                    for a in range(n):
                        y[a] += G[i, a]
                        if not isfinite(y[a]):
                            status = NONFINITE
                    if status != OK:
                        bad = i
                        break
                    if write:
                        memcpy(&U[i, 0], y, n * sizeof(double))
                t = x
                x = y
                y = t
                if tan:
                    t = Vk
                    Vk = Wk
                    Wk = t
            if status != OK:
                break
            if has_phi:
                memcpy(&phi[q, 0], x, n * sizeof(double))
            if tan:
                memcpy(&W[q, 0, 0], Vk, n * k * sizeof(double))
    its, res = w.newton_it, w.newton_res
    work_free(w); free(x); free(y); free(Vk); free(Wk); free(pq)
    return status, bad, its, res


cdef int mgs_pass(double* Q, int n, int k, double* rd) noexcept nogil:
    cdef int i, j, a
    cdef double s
    for j in range(k):
        for i in range(j):
            s = 0.0
            for a in range(n):
                s += Q[a * k + i] * Q[a * k + j]
            for a in range(n):
                Q[a * k + j] -= s * Q[a * k + i]
        s = 0.0
        for a in range(n):
            s += Q[a * k + j] * Q[a * k + j]
        s = sqrt(s)
        if not s > 1e-300:
            return DEGENERATE
        for a in range(n):
            Q[a * k + j] /= s
        rd[j] = s
    return OK


cdef int mgs(double* Q, int n, int k, double* rd, double* rd2) noexcept nogil:
    cdef int i, j, a, st
    cdef double s, err = 0.0
    st = mgs_pass(Q, n, k, rd)
    if st != OK:
        return st
    for i in range(k):
        for j in range(i, k):
            s = 0.0
            for a in range(n):
                s += Q[a * k + i] * Q[a * k + j]
            if i == j:
                s -= 1.0
            if fabs(s) > err:
                err = fabs(s)
    if err > 1e-10:
        st = mgs_pass(Q, n, k, rd2)
        if st != OK:
            return st
        for j in range(k):
            rd[j] *= rd2[j]
    return OK


def mgs_qr(double[:, ::1] W):
    """Compiled counterpart of the Python ``mgs_qr``; returns ``(Q, rdiag, status)``."""
    import numpy as np
    Q = np.array(W, dtype=float, copy=True)
    cdef double[:, ::1] Qv = Q
    cdef int n = W.shape[0], k = W.shape[1], st
    rd = np.empty(k)
    rd2 = np.empty(k)
    cdef double[::1] rv = rd, rv2 = rd2
    with nogil:
        st = mgs(&Qv[0, 0], n, k, &rv[0], &rv2[0])
    return Q, rd, st


def qr_run(CStepper st, double h, double[::1] x0, double[:, ::1] Q0, long long n_steps,
           long long every, long long discard, double[:, ::1] traj=None):
    """QR iteration; returns ``(x, Q, logsum, counted, status, index)``."""
    import numpy as np
    cdef int n = st.model.n, k = Q0.shape[1], status = OK, j
    cdef long long i, last = 0, counted = 0, bad = -1
    cdef int has_traj = traj is not None
    xo = np.array(x0, dtype=float, copy=True)
    Qo = np.array(Q0, dtype=float, copy=True)
    logsum = np.zeros(k)
    cdef double[::1] xv = xo
    cdef double[:, ::1] Qv = Qo
    cdef double[::1] lv = logsum
    cdef Work* w = work_new(&st.model, &st.scheme, k)
    cdef double* y = <double*> malloc(n * sizeof(double))
    cdef double* Wk = <double*> malloc(n * k * sizeof(double))
    cdef double* rd = <double*> malloc(k * sizeof(double))
    cdef double* rd2 = <double*> malloc(k * sizeof(double))
    cdef const double* xi
    if w == NULL or y == NULL or Wk == NULL or rd == NULL or rd2 == NULL:
        work_free(w); free(y); free(Wk); free(rd); free(rd2)
        raise MemoryError()
    with nogil:
        for i in range(n_steps):
            xi = &traj[i, 0] if has_traj else &xv[0]
            status = cstep(&st.model, &st.scheme, w, xi, h, y, &Qv[0, 0], k, Wk)
            if status != OK:
                bad = i + 1
                break
            memcpy(&xv[0], y, n * sizeof(double))
            memcpy(&Qv[0, 0], Wk, n * k * sizeof(double))
            if (i + 1) % every == 0 or i + 1 == n_steps:
                status = mgs(&Qv[0, 0], n, k, rd, rd2)
                if status != OK:
                    bad = i + 1
                    break
                if last >= discard:
                    for j in range(k):
                        lv[j] += log(rd[j])
                    counted += i + 1 - last
                last = i + 1
    work_free(w); free(y); free(Wk); free(rd); free(rd2)
    if has_traj and status == OK:
        xo = np.array(traj[n_steps], dtype=float, copy=True)
    return xo, Qo, logsum, counted, status, bad
