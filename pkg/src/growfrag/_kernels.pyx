# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Monte Carlo kernels (fast backend).

Operation-for-operation mirror of ``growfrag._kernels_py``: same draw
protocol, same formula structure (flow always as phi_inv(phi(x) + dt)),
same piecewise-cubic evaluation.  Given the same bit-generator state the
two backends produce bit-identical results; tests enforce this.

Only the closed-form model families are representable here; other models
run on the pure-Python backend.
"""

import numpy as np

from cpython.pycapsule cimport PyCapsule_GetPointer, PyCapsule_IsValid
from libc.math cimport INFINITY, exp, fabs, log, log1p, pow, sqrt
from numpy.random cimport bitgen_t

GROWTH_LINEAR, GROWTH_SATURATING, GROWTH_HUMP = 0, 1, 2
FISSION_CONSTANT, FISSION_SATURATING, FISSION_SIGMOID = 0, 1, 2
KERNEL_UNIFORM, KERNEL_FIXED, KERNEL_POWER = 0, 1, 2


cdef struct Model:
    int gf
    double ga
    int ff
    double fb
    double bmax
    int kf
    double kp


cdef Model _make_model(tuple args):
    cdef Model m
    m.gf = args[0]
    m.ga = args[1]
    m.ff = args[2]
    m.fb = args[3]
    m.bmax = args[4]
    m.kf = args[5]
    m.kp = args[6]
    return m


cdef bitgen_t* _get_bitgen(object bitgen) except NULL:
    cdef const char* name = "BitGenerator"
    capsule = bitgen.capsule
    if not PyCapsule_IsValid(capsule, name):
        raise ValueError("object is not a numpy BitGenerator")
    return <bitgen_t*> PyCapsule_GetPointer(capsule, name)


cdef inline double _u(bitgen_t* rng) noexcept nogil:
    return rng.next_double(rng.state)


# -- family formulas (keep literally in sync with families.py) --------------

cdef inline double _B(Model* m, double x) noexcept nogil:
    if m.ff == 0:
        return m.fb
    elif m.ff == 1:
        return m.fb * x / (1.0 + x)
    return m.fb * x * x / (1.0 + x * x)


cdef inline double _phi(Model* m, double x) noexcept nogil:
    if m.gf == 0:
        return log(x) / m.ga
    elif m.gf == 1:
        return (log(x) + x) / m.ga
    return (x - 1.0 / x) / m.ga


cdef inline double _phi_inv(Model* m, double s) noexcept nogil:
    cdef double k, u_, e, g, step
    cdef int it
    if m.gf == 0:
        return exp(m.ga * s)
    elif m.gf == 1:
        # solve u + e^u = a*s (same Newton as families.solve_log_plus_exp)
        k = m.ga * s
        u_ = log(k) if k > 1.0 else k - 1.0
        for it in range(60):
            e = exp(u_)
            g = u_ + e - k
            step = g / (1.0 + e)
            u_ -= step
            if fabs(step) <= 1e-15 * (1.0 + fabs(u_)):
                break
        return exp(u_)
    k = m.ga * s
    return 0.5 * (k + sqrt(k * k + 4.0))


cdef inline double _flow_dt(Model* m, double x, double dt) noexcept nogil:
    return _phi_inv(m, _phi(m, x) + dt)


cdef inline double _time_to(Model* m, double x, double y) noexcept nogil:
    return _phi(m, y) - _phi(m, x)


cdef inline double _icdf(Model* m, double u) noexcept nogil:
    if m.kf == 0:
        return 0.5 * (1.0 - u)
    elif m.kf == 1:
        return m.kp
    return 0.5 * pow(1.0 - u, 1.0 / m.kp)


# ---------------------------------------------------------------------------
# hitting / first-return sampling


cdef int _hit_one(Model* m, bitgen_t* rng, double x0, double y, double t0,
                  double lw0, double horizon, double* out) noexcept nogil:
    """out = (t_end, logw, x_end, jumps); returns 1 on hit, 0 on truncation."""
    cdef double t = t0, x = x0, lw = lw0
    cdef double dt_c, t_next, s, xc, xe, rr, k
    cdef long nj = 0
    cdef double bmax = m.bmax
    while True:
        dt_c = INFINITY if bmax <= 0.0 else -log1p(-_u(rng)) / bmax
        t_next = t + dt_c
        if x < y:
            s = _time_to(m, x, y)
            if t + s <= t_next and t + s <= horizon:
                out[0] = t + s
                out[1] = lw + log(y / x)
                out[2] = y
                out[3] = <double> nj
                return 1
        if t_next >= horizon:
            xe = _flow_dt(m, x, horizon - t)
            out[0] = horizon
            out[1] = lw + log(xe / x)
            out[2] = xe
            out[3] = <double> nj
            return 0
        xc = _flow_dt(m, x, dt_c)
        lw += log(xc / x)
        x = xc
        t = t_next
        if _u(rng) * bmax < _B(m, x):
            rr = _icdf(m, _u(rng))
            k = rr if _u(rng) < rr else 1.0 - rr
            x *= k
            nj += 1


def hitting_batch(tuple args, double x, double y, double horizon,
                  Py_ssize_t n, object bitgen):
    cdef Model m = _make_model(args)
    cdef bitgen_t* rng = _get_bitgen(bitgen)
    hit = np.zeros(n, dtype=np.uint8)
    t_end = np.empty(n)
    logw = np.empty(n)
    x_end = np.empty(n)
    jumps = np.zeros(n, dtype=np.int64)
    cdef unsigned char[::1] hit_v = hit
    cdef double[::1] t_v = t_end, lw_v = logw, x_v = x_end
    cdef long[::1] j_v = jumps
    cdef double out[4]
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            hit_v[i] = <unsigned char> _hit_one(&m, rng, x, y, 0.0, 0.0, horizon, out)
            t_v[i] = out[0]
            lw_v[i] = out[1]
            x_v[i] = out[2]
            j_v[i] = <long> out[3]
    return hit, t_end, logw, x_end, jumps


def hitting_continue(tuple args, double[::1] xs, double[::1] lws, double y,
                     double t0, double horizon, object bitgen):
    cdef Model m = _make_model(args)
    cdef bitgen_t* rng = _get_bitgen(bitgen)
    cdef Py_ssize_t n = xs.shape[0]
    hit = np.zeros(n, dtype=np.uint8)
    t_end = np.empty(n)
    logw = np.empty(n)
    x_end = np.empty(n)
    jumps = np.zeros(n, dtype=np.int64)
    cdef unsigned char[::1] hit_v = hit
    cdef double[::1] t_v = t_end, lw_v = logw, x_v = x_end
    cdef long[::1] j_v = jumps
    cdef double out[4]
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            hit_v[i] = <unsigned char> _hit_one(&m, rng, xs[i], y, t0, lws[i], horizon, out)
            t_v[i] = out[0]
            lw_v[i] = out[1]
            x_v[i] = out[2]
            j_v[i] = <long> out[3]
    return hit, t_end, logw, x_end, jumps


# ---------------------------------------------------------------------------
# state at fixed observation times


def path_at_times(tuple args, double x0, double[::1] ts, Py_ssize_t n,
                  object bitgen):
    cdef Model m = _make_model(args)
    cdef bitgen_t* rng = _get_bitgen(bitgen)
    cdef Py_ssize_t nt = ts.shape[0]
    xs = np.empty((n, nt))
    lws = np.empty((n, nt))
    jumps = np.zeros(n, dtype=np.int64)
    cdef double[:, ::1] xs_v = xs, lw_v = lws
    cdef long[::1] j_v = jumps
    cdef Py_ssize_t i, k
    cdef double t, x, lw, dt_c, t_next, xo, xc, rr, kk
    cdef long nj
    cdef double bmax = m.bmax
    with nogil:
        for i in range(n):
            t = 0.0
            x = x0
            lw = 0.0
            k = 0
            nj = 0
            while k < nt:
                dt_c = INFINITY if bmax <= 0.0 else -log1p(-_u(rng)) / bmax
                t_next = t + dt_c
                while k < nt and ts[k] <= t_next:
                    xo = _flow_dt(&m, x, ts[k] - t)
                    lw += log(xo / x)
                    x = xo
                    t = ts[k]
                    xs_v[i, k] = xo
                    lw_v[i, k] = lw
                    k += 1
                if k >= nt:
                    break
                xc = _flow_dt(&m, x, t_next - t)
                lw += log(xc / x)
                x = xc
                t = t_next
                if _u(rng) * bmax < _B(&m, x):
                    rr = _icdf(&m, _u(rng))
                    kk = rr if _u(rng) < rr else 1.0 - rr
                    x *= kk
                    nj += 1
            j_v[i] = nj
    return xs, lws, jumps


# ---------------------------------------------------------------------------
# stopping lines

LINE_FIXED_TIME = 0
LINE_JUMP_COUNT = 1
LINE_FIRST_ENTRANCE = 2


cdef int _stopped_one(Model* m, bitgen_t* rng, double x0, int kind, double p1,
                      double p2, double horizon, double* out) noexcept nogil:
    cdef double t = 0.0, x = x0, lw = 0.0
    cdef double dt_c, t_next, t_stop, xo, xe, xc, rr, k, x_post
    cdef long nj = 0
    cdef double bmax = m.bmax
    if kind == 2 and p1 <= x0 and x0 < p2:
        out[0] = 0.0
        out[1] = x0
        out[2] = 0.0
        out[3] = 0.0
        return 1
    while True:
        dt_c = INFINITY if bmax <= 0.0 else -log1p(-_u(rng)) / bmax
        t_next = t + dt_c
        t_stop = INFINITY
        if kind == 0:
            t_stop = p1
        elif kind == 2 and x < p1:
            t_stop = t + _time_to(m, x, p1)
        if t_stop <= t_next and t_stop <= horizon:
            xo = _flow_dt(m, x, t_stop - t)
            out[0] = t_stop
            out[1] = xo
            out[2] = lw + log(xo / x)
            out[3] = <double> nj
            return 1
        if t_next >= horizon:
            xe = _flow_dt(m, x, horizon - t)
            out[0] = horizon
            out[1] = xe
            out[2] = lw + log(xe / x)
            out[3] = <double> nj
            return 0
        xc = _flow_dt(m, x, dt_c)
        lw += log(xc / x)
        x = xc
        t = t_next
        if _u(rng) * bmax < _B(m, x):
            rr = _icdf(m, _u(rng))
            k = rr if _u(rng) < rr else 1.0 - rr
            x_post = x * k
            nj += 1
            # weight is continuous across the jump
            if kind == 1 and nj >= <long> p1:
                out[0] = t
                out[1] = x_post
                out[2] = lw
                out[3] = <double> nj
                return 1
            if kind == 2 and p1 <= x_post and x_post < p2:
                out[0] = t
                out[1] = x_post
                out[2] = lw
                out[3] = <double> nj
                return 1
            x = x_post


def stopped_line_batch(tuple args, double x0, int kind, double p1, double p2,
                       double horizon, Py_ssize_t n, object bitgen):
    cdef Model m = _make_model(args)
    cdef bitgen_t* rng = _get_bitgen(bitgen)
    stopped = np.zeros(n, dtype=np.uint8)
    t_arr = np.empty(n)
    x_arr = np.empty(n)
    lw_arr = np.empty(n)
    jumps = np.zeros(n, dtype=np.int64)
    cdef unsigned char[::1] s_v = stopped
    cdef double[::1] t_v = t_arr, x_v = x_arr, lw_v = lw_arr
    cdef long[::1] j_v = jumps
    cdef double out[4]
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            s_v[i] = <unsigned char> _stopped_one(&m, rng, x0, kind, p1, p2, horizon, out)
            t_v[i] = out[0]
            x_v[i] = out[1]
            lw_v[i] = out[2]
            j_v[i] = <long> out[3]
    return stopped, t_arr, x_arr, lw_arr, jumps


# ---------------------------------------------------------------------------
# spine kernel


cdef inline double _ppoly_eval(double[::1] knots, double[:, ::1] coefs,
                               double v) noexcept nogil:
    cdef double lo = knots[0]
    cdef double hi = knots[knots.shape[0] - 1]
    cdef Py_ssize_t mseg = knots.shape[0] - 1
    cdef Py_ssize_t j
    cdef double s
    if v <= lo:
        v = lo
    elif v >= hi:
        v = hi
    j = <Py_ssize_t> ((v - lo) / (knots[1] - lo))
    if j >= mseg:
        j = mseg - 1
    s = v - knots[j]
    return ((coefs[0, j] * s + coefs[1, j]) * s + coefs[2, j]) * s + coefs[3, j]


cdef inline double _h_eval(double[::1] knots, double[:, ::1] coefs,
                           double x) noexcept nogil:
    return x * exp(_ppoly_eval(knots, coefs, log(x)))


def spine_batch(tuple args, object sp, double x0, double horizon, double burn_in,
                double[::1] edges, double[::1] edge_phi, Py_ssize_t max_returns,
                object bitgen):
    cdef Model m = _make_model(args)
    cdef bitgen_t* rng = _get_bitgen(bitgen)
    cdef double[::1] l_knots = sp.l_knots
    cdef double[:, ::1] l_coefs = sp.l_coefs
    cdef double[::1] w_knots = sp.w_knots
    cdef double[:, ::1] w_coefs = sp.w_coefs
    cdef double lmax = sp.lmax
    cdef double btilde_max = sp.btilde_max
    cdef double op_lo = sp.op_lo
    cdef double op_hi = sp.op_hi

    cdef Py_ssize_t nbins = edges.shape[0] - 1
    occ = np.zeros((2, nbins))
    rets = np.empty(max_returns)
    cdef double[:, ::1] occ_v = occ
    cdef double[::1] rets_v = rets

    cdef double t_mid = burn_in + 0.5 * (horizon - burn_in)
    cdef double log_e0 = log(edges[0])
    cdef double dlog = log(edges[1]) - log_e0
    cdef double t = 0.0, x = x0
    cdef long nj = 0, n_ret = 0
    cdef double sup_mass = x0
    cdef double last_cross = -1.0
    cdef int escaped = 0
    cdef double bmax = btilde_max

    cdef double dt_c, t_next, x_next, tc, bt, rr, hr, ho, x_post
    cdef double x1, x2, t1, t2, tcur, phi1, seg_hi_phi, dt_bin
    cdef Py_ssize_t i1, i2, j, half

    with nogil:
        while t < horizon:
            dt_c = INFINITY if bmax <= 0.0 else -log1p(-_u(rng)) / bmax
            t_next = t + dt_c
            if t_next > horizon:
                t_next = horizon
            x_next = _flow_dt(&m, x, t_next - t)

            # accumulate occupation for the flow stretch x -> min(x_next, op_hi)
            x1 = x
            x2 = x_next if x_next <= op_hi else op_hi
            t1 = t
            t2 = t1 + (_phi(&m, x2) - _phi(&m, x1))
            if t2 > burn_in:
                if t1 < burn_in:
                    x1 = _phi_inv(&m, _phi(&m, x1) + (burn_in - t1))
                    t1 = burn_in
                i1 = <Py_ssize_t> ((log(x1) - log_e0) / dlog)
                if i1 < 0:
                    i1 = 0
                if i1 > nbins - 1:
                    i1 = nbins - 1
                i2 = <Py_ssize_t> ((log(x2) - log_e0) / dlog)
                if i2 < 0:
                    i2 = 0
                if i2 > nbins - 1:
                    i2 = nbins - 1
                tcur = t1
                phi1 = _phi(&m, x1)
                for j in range(i1, i2 + 1):
                    seg_hi_phi = edge_phi[j + 1] if j < i2 else _phi(&m, x2)
                    dt_bin = seg_hi_phi - phi1
                    if dt_bin > 0.0:
                        half = 0 if tcur < t_mid else 1
                        if tcur < t_mid and t_mid < tcur + dt_bin:
                            occ_v[0, j] += t_mid - tcur
                            occ_v[1, j] += tcur + dt_bin - t_mid
                        else:
                            occ_v[half, j] += dt_bin
                        tcur += dt_bin
                        phi1 = seg_hi_phi

            if x_next > op_hi:
                escaped = 1
                t = t + _time_to(&m, x, op_hi)
                x = op_hi
                break

            if x < x0 and x0 <= x_next:
                tc = t + _time_to(&m, x, x0)
                if last_cross >= 0.0 and tc >= burn_in and last_cross >= burn_in:
                    if n_ret < max_returns:
                        rets_v[n_ret] = tc - last_cross
                    n_ret += 1
                last_cross = tc
            x = x_next
            t = t_next
            if x > sup_mass:
                sup_mass = x
            if t >= horizon:
                break
            bt = exp(_ppoly_eval(w_knots, w_coefs, log(x))) * _B(&m, x) \
                / _h_eval(l_knots, l_coefs, x)
            if _u(rng) * bmax < bt:
                while True:
                    rr = _icdf(&m, _u(rng))
                    hr = _h_eval(l_knots, l_coefs, rr * x)
                    ho = _h_eval(l_knots, l_coefs, (1.0 - rr) * x)
                    if _u(rng) * (lmax * x) < hr + ho:
                        break
                x_post = rr * x if _u(rng) * (hr + ho) < hr else (1.0 - rr) * x
                nj += 1
                x = x_post
                if x < op_lo:
                    escaped = 1
                    break

    n_stored = min(n_ret, max_returns)
    return (occ, rets[:n_stored].copy(), int(n_ret), int(escaped), float(t),
            int(nj), float(sup_mass))
