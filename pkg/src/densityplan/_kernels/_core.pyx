# cython: language_level=3
"""Compiled rollout kernels.

Mirrors ``pure.py`` (see its module docstring for the math and conventions);
expression order follows the numpy implementation so both backends agree to
a few ulps. Tests cross-check every public function against the fallback.
"""

import numpy as np

from libc.math cimport cos, fmod, sin, sqrt

CAR_PAR_LEN = 10

cdef double PI = 3.141592653589793
cdef double TWO_PI = 6.283185307179586


cdef inline double c_wrap(double a) noexcept nogil:
    cdef double w = fmod(a + PI, TWO_PI)
    if w < 0.0:
        w += TWO_PI
    return w - PI


cdef inline void c_sat(double z, double lo, double hi, double m,
                       double* val, double* d1, double* d2) noexcept nogil:
    # C^2 clamp: identity inside the margin-shrunk box, algebraic tails
    # s + m * u / sqrt(1 + u^2) outside (see pure._sat)
    cdef double s_hi = hi - m
    cdef double s_lo = lo + m
    cdef double u, r
    if z > s_hi:
        u = (z - s_hi) / m
        r = 1.0 / sqrt(1.0 + u * u)
        val[0] = s_hi + m * u * r
        d1[0] = r * r * r
        d2[0] = -3.0 * u * (r * r * r * r * r) / m
    elif z < s_lo:
        u = (z - s_lo) / m
        r = 1.0 / sqrt(1.0 + u * u)
        val[0] = s_lo + m * u * r
        d1[0] = r * r * r
        d2[0] = -3.0 * u * (r * r * r * r * r) / m
    else:
        val[0] = z
        d1[0] = 1.0
        d2[0] = 0.0


cdef inline void interp_pos(double t, int K, double horizon,
                            int* j, double* w) noexcept nogil:
    cdef double eta = t * (K - 1) / horizon
    cdef int jj = <int>eta
    cdef double ww
    if jj > K - 2:
        jj = K - 2
    if jj < 0:
        jj = 0
    ww = eta - jj
    if ww < 0.0:
        ww = 0.0
    if ww > 1.0:
        ww = 1.0
    j[0] = jj
    w[0] = ww


# Controller scalars at one (sample, reference, input) point.
# out layout: 0 om, 1 a, 2 som1, 3 som2, 4 sa1, 5 sa2, 6 div,
#             7..11 g_om_x, 12..16 g_a_x, 17..20 g_om_z, 21..24 g_a_z
cdef inline void ctrl_eval(const double* x, const double* z,
                           double om_ref, double a_ref,
                           const double* car, bint with_grad,
                           double* o) noexcept nogil:
    cdef double k_th = car[0]
    cdef double k_y = car[1]
    cdef double k_v = car[2]
    cdef double k_x = car[3]
    cdef double th_meas = x[2] + x[4]
    cdef double v_meas = x[3]
    cdef double dx = z[0] - x[0]
    cdef double dy = z[1] - x[1]
    cdef double cr = cos(z[2])
    cdef double sr = sin(z[2])
    cdef double e_lon = cr * dx + sr * dy
    cdef double e_lat = -sr * dx + cr * dy
    cdef double e_th = c_wrap(z[2] - th_meas)
    cdef double om_raw = om_ref + k_th * e_th + k_y * e_lat * v_meas
    cdef double a_raw = a_ref + k_v * (z[3] - v_meas) + k_x * e_lon
    c_sat(om_raw, car[4], car[5], car[8], &o[0], &o[2], &o[3])
    c_sat(a_raw, car[6], car[7], car[9], &o[1], &o[4], &o[5])
    o[6] = -k_th * o[2] - k_v * o[4]
    if with_grad:
        o[7] = k_y * v_meas * sr
        o[8] = -k_y * v_meas * cr
        o[9] = -k_th
        o[10] = k_y * e_lat
        o[11] = -k_th
        o[12] = -k_x * cr
        o[13] = -k_x * sr
        o[14] = 0.0
        o[15] = -k_v
        o[16] = 0.0
        o[17] = -k_y * v_meas * sr
        o[18] = k_y * v_meas * cr
        o[19] = k_th - k_y * v_meas * e_lon
        o[20] = 0.0
        o[21] = k_x * cr
        o[22] = k_x * sr
        o[23] = k_x * e_lat
        o[24] = k_v


def ref_rollout(x0, knots, double dt, int n_steps, int substeps, car,
                bint with_grad=False):
    """Open-loop reference rollout; see pure.ref_rollout."""
    x0_arr = np.ascontiguousarray(x0, dtype=np.float64)
    knots_arr = np.ascontiguousarray(knots, dtype=np.float64)
    cdef double[:, ::1] x0v = x0_arr
    cdef double[:, :, ::1] kn = knots_arr
    cdef int B = kn.shape[0]
    cdef int K = kn.shape[1]
    cdef int P = 2 * K
    cdef double horizon = n_steps * dt
    cdef double h = dt / substeps

    states_arr = np.empty((B, n_steps + 1, 4))
    inputs_arr = np.empty((B, n_steps, 2))
    cdef double[:, :, ::1] states = states_arr
    cdef double[:, :, ::1] inputs = inputs_arr

    dstates_arr = np.empty((B, n_steps + 1, 4, P)) if with_grad else np.empty((1, 1, 1, 1))
    dinputs_arr = np.zeros((B, n_steps, 2, P)) if with_grad else np.zeros((1, 1, 1, 1))
    cdef double[:, :, :, ::1] dstates = dstates_arr
    cdef double[:, :, :, ::1] dinputs = dinputs_arr

    # working state and tangents for one trajectory
    x_arr = np.empty(4)
    S_arr = np.zeros((4, P))
    kbuf_arr = np.empty((4, 4))       # k1..k4 state stage derivatives
    dbuf_arr = np.empty((4, 4, P))    # tangent stage derivatives
    xin_arr = np.empty(4)
    Sin_arr = np.empty((4, P))
    cdef double[::1] x = x_arr
    cdef double[:, ::1] S = S_arr
    cdef double[:, ::1] kbuf = kbuf_arr
    cdef double[:, :, ::1] dbuf = dbuf_arr
    cdef double[::1] xin = xin_arr
    cdef double[:, ::1] Sin = Sin_arr

    cdef int b, k, i, st, p, j, c
    cdef double t0, ts, w, cw, u0, u1, sin_t, cos_t, fac
    cdef double[4] stage_off
    stage_off[0] = 0.0
    stage_off[1] = 0.5
    stage_off[2] = 0.5
    stage_off[3] = 1.0

    for b in range(B):
        for c in range(4):
            x[c] = x0v[b, c]
        if with_grad:
            for c in range(4):
                for p in range(P):
                    S[c, p] = 0.0
        for k in range(n_steps):
            for c in range(4):
                states[b, k, c] = x[c]
            interp_pos(k * dt, K, horizon, &j, &w)
            inputs[b, k, 0] = (1.0 - w) * kn[b, j, 0] + w * kn[b, j + 1, 0]
            inputs[b, k, 1] = (1.0 - w) * kn[b, j, 1] + w * kn[b, j + 1, 1]
            if with_grad:
                for c in range(4):
                    for p in range(P):
                        dstates[b, k, c, p] = S[c, p]
                dinputs[b, k, 0, 2 * j] = 1.0 - w
                dinputs[b, k, 0, 2 * (j + 1)] = w
                dinputs[b, k, 1, 2 * j + 1] = 1.0 - w
                dinputs[b, k, 1, 2 * (j + 1) + 1] = w
            for i in range(substeps):
                t0 = (k * substeps + i) * h
                for st in range(4):
                    ts = t0 + stage_off[st] * h
                    fac = stage_off[st] * h
                    if st == 0:
                        for c in range(4):
                            xin[c] = x[c]
                    else:
                        for c in range(4):
                            xin[c] = x[c] + fac * kbuf[st - 1, c]
                    interp_pos(ts, K, horizon, &j, &w)
                    u0 = (1.0 - w) * kn[b, j, 0] + w * kn[b, j + 1, 0]
                    u1 = (1.0 - w) * kn[b, j, 1] + w * kn[b, j + 1, 1]
                    sin_t = sin(xin[2])
                    cos_t = cos(xin[2])
                    kbuf[st, 0] = xin[3] * cos_t
                    kbuf[st, 1] = xin[3] * sin_t
                    kbuf[st, 2] = u0
                    kbuf[st, 3] = u1
                    if with_grad:
                        if st == 0:
                            for c in range(4):
                                for p in range(P):
                                    Sin[c, p] = S[c, p]
                        else:
                            for c in range(4):
                                for p in range(P):
                                    Sin[c, p] = S[c, p] + fac * dbuf[st - 1, c, p]
                        for p in range(P):
                            dbuf[st, 0, p] = -xin[3] * sin_t * Sin[2, p] + cos_t * Sin[3, p]
                            dbuf[st, 1, p] = xin[3] * cos_t * Sin[2, p] + sin_t * Sin[3, p]
                            dbuf[st, 2, p] = 0.0
                            dbuf[st, 3, p] = 0.0
                        dbuf[st, 2, 2 * j] += 1.0 - w
                        dbuf[st, 2, 2 * (j + 1)] += w
                        dbuf[st, 3, 2 * j + 1] += 1.0 - w
                        dbuf[st, 3, 2 * (j + 1) + 1] += w
                for c in range(4):
                    x[c] = x[c] + (h / 6.0) * (((kbuf[0, c] + 2.0 * kbuf[1, c])
                                                + 2.0 * kbuf[2, c]) + kbuf[3, c])
                if with_grad:
                    for c in range(4):
                        for p in range(P):
                            S[c, p] = S[c, p] + (h / 6.0) * (((dbuf[0, c, p] + 2.0 * dbuf[1, c, p])
                                                              + 2.0 * dbuf[2, c, p]) + dbuf[3, c, p])
        for c in range(4):
            states[b, n_steps, c] = x[c]
        if with_grad:
            for c in range(4):
                for p in range(P):
                    dstates[b, n_steps, c, p] = S[c, p]
    if with_grad:
        return states_arr, inputs_arr, dstates_arr, dinputs_arr
    return states_arr, inputs_arr


def closed_rollout(x0, ref0, knots, double dt, int n_steps, int substeps, car,
                   bint with_grad=False):
    """Closed-loop tracking rollout with log-density factor; see pure.closed_rollout."""
    x0_arr = np.ascontiguousarray(x0, dtype=np.float64)
    ref0_arr = np.ascontiguousarray(ref0, dtype=np.float64)
    knots_arr = np.ascontiguousarray(knots, dtype=np.float64)
    car_arr = np.ascontiguousarray(car, dtype=np.float64)
    cdef double[:, ::1] x0v = x0_arr
    cdef double[::1] ref0v = ref0_arr
    cdef double[:, ::1] kn = knots_arr
    cdef double[::1] cv = car_arr
    cdef int S = x0v.shape[0]
    cdef int K = kn.shape[0]
    cdef int P = 2 * K
    cdef double horizon = n_steps * dt
    cdef double h = dt / substeps
    cdef double k_th = cv[0]
    cdef double k_v = cv[2]

    states_arr = np.empty((S, n_steps + 1, 5))
    g_arr = np.empty((S, n_steps + 1))
    inputs_arr = np.empty((S, n_steps, 2))
    ref_arr = np.empty((n_steps + 1, 4))
    cdef double[:, :, ::1] states = states_arr
    cdef double[:, ::1] gout = g_arr
    cdef double[:, :, ::1] inputs = inputs_arr
    cdef double[:, ::1] refv = ref_arr

    dstates_arr = np.empty((S, n_steps + 1, 5, P)) if with_grad else np.empty((1, 1, 1, 1))
    dg_arr = np.empty((S, n_steps + 1, P)) if with_grad else np.empty((1, 1, 1))
    dinputs_arr = np.empty((S, n_steps, 2, P)) if with_grad else np.empty((1, 1, 1, 1))
    dref_arr = np.empty((n_steps + 1, 4, P)) if with_grad else np.empty((1, 1, 1))
    cdef double[:, :, :, ::1] dstates = dstates_arr
    cdef double[:, :, ::1] dgv = dg_arr
    cdef double[:, :, :, ::1] dinputs = dinputs_arr
    cdef double[:, :, ::1] drefv = dref_arr

    # live state, reference, g and tangents
    x_arr = np.empty((S, 5)); x_arr[:] = x0_arr
    z_arr = np.empty(4); z_arr[:] = ref0_arr
    gacc_arr = np.zeros(S)
    Sx_arr = np.zeros((S, 5, P))
    Sz_arr = np.zeros((4, P))
    Sg_arr = np.zeros((S, P))
    cdef double[:, ::1] x = x_arr
    cdef double[::1] z = z_arr
    cdef double[::1] gacc = gacc_arr
    cdef double[:, :, ::1] Sx = Sx_arr
    cdef double[:, ::1] Sz = Sz_arr
    cdef double[:, ::1] Sg = Sg_arr

    # stage buffers
    kx_arr = np.empty((4, S, 5))
    kz_arr = np.empty((4, 4))
    kg_arr = np.empty((4, S))
    dx_arr = np.empty((4, S, 5, P)) if with_grad else np.empty((1, 1, 1, 1))
    dz_arr = np.empty((4, 4, P)) if with_grad else np.empty((1, 1, 1))
    dgst_arr = np.empty((4, S, P)) if with_grad else np.empty((1, 1, 1))
    cdef double[:, :, ::1] kx = kx_arr
    cdef double[:, ::1] kz = kz_arr
    cdef double[:, ::1] kg = kg_arr
    cdef double[:, :, :, ::1] dxst = dx_arr
    cdef double[:, :, ::1] dzst = dz_arr
    cdef double[:, :, ::1] dgst = dgst_arr

    xin_arr = np.empty(5)
    zin_arr = np.empty(4)
    Sxin_arr = np.empty((5, P)) if with_grad else np.empty((1, 1))
    Szin_arr = np.empty((4, P)) if with_grad else np.empty((1, 1))
    cdef double[::1] xin = xin_arr
    cdef double[::1] zin = zin_arr
    cdef double[:, ::1] Sxin = Sxin_arr
    cdef double[:, ::1] Szin = Szin_arr

    cdef double[25] o
    cdef int s, k, i, st, p, j, c
    cdef double t0, ts, w, fac, sin_t, cos_t, d_or, d_ar
    cdef double[4] stage_off
    stage_off[0] = 0.0
    stage_off[1] = 0.5
    stage_off[2] = 0.5
    stage_off[3] = 1.0

    for k in range(n_steps):
        # record output-grid quantities
        for s in range(S):
            for c in range(5):
                states[s, k, c] = x[s, c]
            gout[s, k] = gacc[s]
        for c in range(4):
            refv[k, c] = z[c]
        if with_grad:
            for s in range(S):
                for c in range(5):
                    for p in range(P):
                        dstates[s, k, c, p] = Sx[s, c, p]
                for p in range(P):
                    dgv[s, k, p] = Sg[s, p]
            for c in range(4):
                for p in range(P):
                    drefv[k, c, p] = Sz[c, p]
        # realized input at t_k
        interp_pos(k * dt, K, horizon, &j, &w)
        for s in range(S):
            ctrl_eval(&x[s, 0], &z[0],
                      (1.0 - w) * kn[j, 0] + w * kn[j + 1, 0],
                      (1.0 - w) * kn[j, 1] + w * kn[j + 1, 1],
                      &cv[0], with_grad, o)
            inputs[s, k, 0] = o[0]
            inputs[s, k, 1] = o[1]
            if with_grad:
                for p in range(P):
                    d_or = (o[7] * Sx[s, 0, p] + o[8] * Sx[s, 1, p]
                            + o[9] * Sx[s, 2, p] + o[10] * Sx[s, 3, p]
                            + o[11] * Sx[s, 4, p]
                            + o[17] * Sz[0, p] + o[18] * Sz[1, p]
                            + o[19] * Sz[2, p] + o[20] * Sz[3, p])
                    d_ar = (o[12] * Sx[s, 0, p] + o[13] * Sx[s, 1, p]
                            + o[14] * Sx[s, 2, p] + o[15] * Sx[s, 3, p]
                            + o[16] * Sx[s, 4, p]
                            + o[21] * Sz[0, p] + o[22] * Sz[1, p]
                            + o[23] * Sz[2, p] + o[24] * Sz[3, p])
                    if p == 2 * j:
                        d_or += 1.0 - w
                    elif p == 2 * (j + 1):
                        d_or += w
                    elif p == 2 * j + 1:
                        d_ar += 1.0 - w
                    elif p == 2 * (j + 1) + 1:
                        d_ar += w
                    dinputs[s, k, 0, p] = o[2] * d_or
                    dinputs[s, k, 1, p] = o[4] * d_ar
        # integrate one output step
        for i in range(substeps):
            t0 = (k * substeps + i) * h
            for st in range(4):
                ts = t0 + stage_off[st] * h
                fac = stage_off[st] * h
                interp_pos(ts, K, horizon, &j, &w)
                if st == 0:
                    for c in range(4):
                        zin[c] = z[c]
                else:
                    for c in range(4):
                        zin[c] = z[c] + fac * kz[st - 1, c]
                # reference stage derivative (shared by all samples)
                kz[st, 0] = zin[3] * cos(zin[2])
                kz[st, 1] = zin[3] * sin(zin[2])
                kz[st, 2] = (1.0 - w) * kn[j, 0] + w * kn[j + 1, 0]
                kz[st, 3] = (1.0 - w) * kn[j, 1] + w * kn[j + 1, 1]
                if with_grad:
                    if st == 0:
                        for c in range(4):
                            for p in range(P):
                                Szin[c, p] = Sz[c, p]
                    else:
                        for c in range(4):
                            for p in range(P):
                                Szin[c, p] = Sz[c, p] + fac * dzst[st - 1, c, p]
                    sin_t = sin(zin[2])
                    cos_t = cos(zin[2])
                    for p in range(P):
                        dzst[st, 0, p] = -zin[3] * sin_t * Szin[2, p] + cos_t * Szin[3, p]
                        dzst[st, 1, p] = zin[3] * cos_t * Szin[2, p] + sin_t * Szin[3, p]
                        dzst[st, 2, p] = 0.0
                        dzst[st, 3, p] = 0.0
                    dzst[st, 2, 2 * j] += 1.0 - w
                    dzst[st, 2, 2 * (j + 1)] += w
                    dzst[st, 3, 2 * j + 1] += 1.0 - w
                    dzst[st, 3, 2 * (j + 1) + 1] += w
                for s in range(S):
                    if st == 0:
                        for c in range(5):
                            xin[c] = x[s, c]
                    else:
                        for c in range(5):
                            xin[c] = x[s, c] + fac * kx[st - 1, s, c]
                    ctrl_eval(&xin[0], &zin[0], kz[st, 2], kz[st, 3], &cv[0],
                              with_grad, o)
                    sin_t = sin(xin[2])
                    cos_t = cos(xin[2])
                    kx[st, s, 0] = xin[3] * cos_t
                    kx[st, s, 1] = xin[3] * sin_t
                    kx[st, s, 2] = o[0]
                    kx[st, s, 3] = o[1]
                    kx[st, s, 4] = 0.0
                    kg[st, s] = -o[6]
                    if with_grad:
                        if st == 0:
                            for c in range(5):
                                for p in range(P):
                                    Sxin[c, p] = Sx[s, c, p]
                        else:
                            for c in range(5):
                                for p in range(P):
                                    Sxin[c, p] = Sx[s, c, p] + fac * dxst[st - 1, s, c, p]
                        for p in range(P):
                            d_or = (o[7] * Sxin[0, p] + o[8] * Sxin[1, p]
                                    + o[9] * Sxin[2, p] + o[10] * Sxin[3, p]
                                    + o[11] * Sxin[4, p]
                                    + o[17] * Szin[0, p] + o[18] * Szin[1, p]
                                    + o[19] * Szin[2, p] + o[20] * Szin[3, p])
                            d_ar = (o[12] * Sxin[0, p] + o[13] * Sxin[1, p]
                                    + o[14] * Sxin[2, p] + o[15] * Sxin[3, p]
                                    + o[16] * Sxin[4, p]
                                    + o[21] * Szin[0, p] + o[22] * Szin[1, p]
                                    + o[23] * Szin[2, p] + o[24] * Szin[3, p])
                            if p == 2 * j:
                                d_or += 1.0 - w
                            elif p == 2 * (j + 1):
                                d_or += w
                            elif p == 2 * j + 1:
                                d_ar += 1.0 - w
                            elif p == 2 * (j + 1) + 1:
                                d_ar += w
                            dxst[st, s, 0, p] = -xin[3] * sin_t * Sxin[2, p] + cos_t * Sxin[3, p]
                            dxst[st, s, 1, p] = xin[3] * cos_t * Sxin[2, p] + sin_t * Sxin[3, p]
                            dxst[st, s, 2, p] = o[2] * d_or
                            dxst[st, s, 3, p] = o[4] * d_ar
                            dxst[st, s, 4, p] = 0.0
                            dgst[st, s, p] = k_th * o[3] * d_or + k_v * o[5] * d_ar
            for c in range(4):
                z[c] = z[c] + (h / 6.0) * (((kz[0, c] + 2.0 * kz[1, c])
                                            + 2.0 * kz[2, c]) + kz[3, c])
            for s in range(S):
                for c in range(5):
                    x[s, c] = x[s, c] + (h / 6.0) * (((kx[0, s, c] + 2.0 * kx[1, s, c])
                                                      + 2.0 * kx[2, s, c]) + kx[3, s, c])
                gacc[s] = gacc[s] + (h / 6.0) * (((kg[0, s] + 2.0 * kg[1, s])
                                                  + 2.0 * kg[2, s]) + kg[3, s])
            if with_grad:
                for c in range(4):
                    for p in range(P):
                        Sz[c, p] = Sz[c, p] + (h / 6.0) * (((dzst[0, c, p] + 2.0 * dzst[1, c, p])
                                                            + 2.0 * dzst[2, c, p]) + dzst[3, c, p])
                for s in range(S):
                    for c in range(5):
                        for p in range(P):
                            Sx[s, c, p] = Sx[s, c, p] + (h / 6.0) * (((dxst[0, s, c, p] + 2.0 * dxst[1, s, c, p])
                                                                      + 2.0 * dxst[2, s, c, p]) + dxst[3, s, c, p])
                    for p in range(P):
                        Sg[s, p] = Sg[s, p] + (h / 6.0) * (((dgst[0, s, p] + 2.0 * dgst[1, s, p])
                                                            + 2.0 * dgst[2, s, p]) + dgst[3, s, p])
    for s in range(S):
        for c in range(5):
            states[s, n_steps, c] = x[s, c]
        gout[s, n_steps] = gacc[s]
    for c in range(4):
        refv[n_steps, c] = z[c]
    out = {"states": states_arr, "g": g_arr, "inputs": inputs_arr, "ref": ref_arr}
    if with_grad:
        for s in range(S):
            for c in range(5):
                for p in range(P):
                    dstates[s, n_steps, c, p] = Sx[s, c, p]
            for p in range(P):
                dgv[s, n_steps, p] = Sg[s, p]
        for c in range(4):
            for p in range(P):
                drefv[n_steps, c, p] = Sz[c, p]
        out["dstates"] = dstates_arr
        out["dg"] = dg_arr
        out["dinputs"] = dinputs_arr
        out["dref"] = dref_arr
    return out


def openloop_rollout(x0, u_raw, double dt, int substeps, car,
                     bint with_grad=False, bint squash=True):
    """Per-step constant input rollout; see pure.openloop_rollout."""
    x0_arr = np.ascontiguousarray(x0, dtype=np.float64)
    u_arr = np.ascontiguousarray(u_raw, dtype=np.float64)
    car_arr = np.ascontiguousarray(car, dtype=np.float64)
    cdef double[:, ::1] x0v = x0_arr
    cdef double[:, :, ::1] uv = u_arr
    cdef double[::1] cv = car_arr
    cdef int B = uv.shape[0]
    cdef int H = uv.shape[1]
    cdef int P = 2 * H
    cdef double h = dt / substeps

    u_eff_arr = np.empty((B, H, 2))
    du_eff_arr = np.empty((B, H, 2))
    states_arr = np.empty((B, H + 1, 5))
    cdef double[:, :, ::1] u_eff = u_eff_arr
    cdef double[:, :, ::1] du_eff = du_eff_arr
    cdef double[:, :, ::1] states = states_arr

    dstates_arr = np.empty((B, H + 1, 5, P)) if with_grad else np.empty((1, 1, 1, 1))
    cdef double[:, :, :, ::1] dstates = dstates_arr

    x_arr = np.empty(5)
    S_arr = np.zeros((5, P))
    kbuf_arr = np.empty((4, 5))
    dbuf_arr = np.empty((4, 5, P)) if with_grad else np.empty((1, 1, 1))
    xin_arr = np.empty(5)
    Sin_arr = np.empty((5, P)) if with_grad else np.empty((1, 1))
    cdef double[::1] x = x_arr
    cdef double[:, ::1] S = S_arr
    cdef double[:, ::1] kbuf = kbuf_arr
    cdef double[:, :, ::1] dbuf = dbuf_arr
    cdef double[::1] xin = xin_arr
    cdef double[:, ::1] Sin = Sin_arr

    cdef int b, k, i, st, p, c
    cdef double sin_t, cos_t, fac, d2dummy
    cdef double[4] stage_off
    stage_off[0] = 0.0
    stage_off[1] = 0.5
    stage_off[2] = 0.5
    stage_off[3] = 1.0

    for b in range(B):
        for k in range(H):
            if squash:
                c_sat(uv[b, k, 0], cv[4], cv[5], cv[8],
                      &u_eff[b, k, 0], &du_eff[b, k, 0], &d2dummy)
                c_sat(uv[b, k, 1], cv[6], cv[7], cv[9],
                      &u_eff[b, k, 1], &du_eff[b, k, 1], &d2dummy)
            else:
                u_eff[b, k, 0] = uv[b, k, 0]
                u_eff[b, k, 1] = uv[b, k, 1]
                du_eff[b, k, 0] = 1.0
                du_eff[b, k, 1] = 1.0

    for b in range(B):
        for c in range(5):
            x[c] = x0v[b, c]
        if with_grad:
            for c in range(5):
                for p in range(P):
                    S[c, p] = 0.0
        for k in range(H):
            for c in range(5):
                states[b, k, c] = x[c]
            if with_grad:
                for c in range(5):
                    for p in range(P):
                        dstates[b, k, c, p] = S[c, p]
            for i in range(substeps):
                for st in range(4):
                    fac = stage_off[st] * h
                    if st == 0:
                        for c in range(5):
                            xin[c] = x[c]
                    else:
                        for c in range(5):
                            xin[c] = x[c] + fac * kbuf[st - 1, c]
                    sin_t = sin(xin[2])
                    cos_t = cos(xin[2])
                    kbuf[st, 0] = xin[3] * cos_t
                    kbuf[st, 1] = xin[3] * sin_t
                    kbuf[st, 2] = u_eff[b, k, 0]
                    kbuf[st, 3] = u_eff[b, k, 1]
                    kbuf[st, 4] = 0.0
                    if with_grad:
                        if st == 0:
                            for c in range(5):
                                for p in range(P):
                                    Sin[c, p] = S[c, p]
                        else:
                            for c in range(5):
                                for p in range(P):
                                    Sin[c, p] = S[c, p] + fac * dbuf[st - 1, c, p]
                        for p in range(P):
                            dbuf[st, 0, p] = -xin[3] * sin_t * Sin[2, p] + cos_t * Sin[3, p]
                            dbuf[st, 1, p] = xin[3] * cos_t * Sin[2, p] + sin_t * Sin[3, p]
                            dbuf[st, 2, p] = 0.0
                            dbuf[st, 3, p] = 0.0
                            dbuf[st, 4, p] = 0.0
                        dbuf[st, 2, 2 * k] = du_eff[b, k, 0]
                        dbuf[st, 3, 2 * k + 1] = du_eff[b, k, 1]
                for c in range(5):
                    x[c] = x[c] + (h / 6.0) * (((kbuf[0, c] + 2.0 * kbuf[1, c])
                                                + 2.0 * kbuf[2, c]) + kbuf[3, c])
                if with_grad:
                    for c in range(5):
                        for p in range(P):
                            S[c, p] = S[c, p] + (h / 6.0) * (((dbuf[0, c, p] + 2.0 * dbuf[1, c, p])
                                                              + 2.0 * dbuf[2, c, p]) + dbuf[3, c, p])
        for c in range(5):
            states[b, H, c] = x[c]
        if with_grad:
            for c in range(5):
                for p in range(P):
                    dstates[b, H, c, p] = S[c, p]
    out = {"states": states_arr, "u_eff": u_eff_arr, "du_eff": du_eff_arr}
    if with_grad:
        out["dstates"] = dstates_arr
    return out
