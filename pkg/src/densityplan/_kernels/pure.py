"""Rollout kernels, pure numpy backend.

Three batched fixed-step RK4 rollouts of the kinematic car sit in every hot
loop of the planner and the baselines:

* ``ref_rollout``      -- open-loop rollout under a piecewise-linear knot
  input profile (reference recovery, stage-1 optimization, sampling planner).
* ``closed_rollout``   -- closed-loop tracking rollout with the accumulated
  log-density factor g(x0, t) = -int div f of the transport equation
  (density prediction, stage-2 refinement).
* ``openloop_rollout`` -- rollout under per-step constant inputs squashed
  onto the input box (MPC steps and the full-horizon oracle).

Each kernel optionally propagates tangents through the discrete RK4 map, so
the returned derivatives are exact (to roundoff) derivatives of the computed
trajectory with respect to the decision variables -- the same quantity a
central finite difference of the rollout approximates.

The compiled twin in ``_core.pyx`` mirrors these signatures; the test suite
asserts both backends agree.

Car parameters are passed as a flat float64 array (see ``CAR_PAR_LEN``):

    [k_theta, k_y, k_v, k_x, om_lo, om_hi, a_lo, a_hi, m_om, m_a]

Gains follow the tracking law

    omega = omega_ref + k_theta * wrap(theta_ref - theta_meas)
                      + k_y * e_lat * v_meas
    a     = a_ref + k_v * (v_ref - v_meas) + k_x * e_lon

with longitudinal/lateral errors expressed in the reference frame and the
measured heading biased by the constant offset carried in state component 4.
Both raw inputs are passed through a C^1 saturation that is exact identity on
the box shrunk by the margin m and decays exponentially onto the box outside.
"""

from __future__ import annotations

import numpy as np

CAR_PAR_LEN = 10

_TWO_PI = 2.0 * np.pi


def _wrap(angle):
    """Wrap angles to [-pi, pi). Used inside controller errors only."""
    return (angle + np.pi) % _TWO_PI - np.pi


def _sat(z, lo, hi, margin):
    """C^2 clamp onto (lo, hi): identity on [lo+m, hi-m], algebraic tails.

    The tail s + m * u / sqrt(1 + u^2) (u the seam distance in margins)
    matches value, slope and curvature at the seam, so the clamp is twice
    continuously differentiable everywhere -- central differences of
    quantities built on it keep their O(h^2) accuracy across the seam.
    Returns (value, first derivative, second derivative), elementwise.
    """
    z = np.asarray(z, dtype=float)
    s_hi = hi - margin
    s_lo = lo + margin
    up = z > s_hi
    dn = z < s_lo
    u_up = np.maximum(z - s_hi, 0.0) / margin
    u_dn = np.minimum(z - s_lo, 0.0) / margin
    r_up = 1.0 / np.sqrt(1.0 + u_up * u_up)
    r_dn = 1.0 / np.sqrt(1.0 + u_dn * u_dn)
    val = np.where(up, s_hi + margin * u_up * r_up,
                   np.where(dn, s_lo + margin * u_dn * r_dn, z))
    d1 = np.where(up, r_up ** 3, np.where(dn, r_dn ** 3, 1.0))
    d2 = np.where(up, -3.0 * u_up * r_up ** 5 / margin,
                  np.where(dn, -3.0 * u_dn * r_dn ** 5 / margin, 0.0))
    return val, d1, d2


def _interp_weights(t, n_knots, horizon):
    """Piecewise-linear knot interpolation position at time ``t``.

    Returns (j, w): the lower knot index and the weight of knot j+1.
    """
    eta = t * (n_knots - 1) / horizon
    j = min(int(eta), n_knots - 2)
    j = max(j, 0)
    w = min(max(eta - j, 0.0), 1.0)
    return j, w


def _uref_at(t, knots, horizon):
    j, w = _interp_weights(t, knots.shape[0], horizon)
    return (1.0 - w) * knots[j] + w * knots[j + 1], j, w


def _ctrl(x, zeta, uref, car, with_grad):
    """Tracking controller and its raw-input gradients, batched over samples.

    x: (S, 5), zeta: (4,), uref: (2,). Returns a dict with the saturated
    inputs, saturation derivatives, divergence, and (optionally) the
    gradients of the raw inputs w.r.t. the state (S, 5) and the reference
    state (S, 4).
    """
    k_th, k_y, k_v, k_x = car[0], car[1], car[2], car[3]
    th_meas = x[:, 2] + x[:, 4]
    v_meas = x[:, 3]
    dx = zeta[0] - x[:, 0]
    dy = zeta[1] - x[:, 1]
    cr = np.cos(zeta[2])
    sr = np.sin(zeta[2])
    e_lon = cr * dx + sr * dy
    e_lat = -sr * dx + cr * dy
    e_th = _wrap(zeta[2] - th_meas)

    om_raw = uref[0] + k_th * e_th + k_y * e_lat * v_meas
    a_raw = uref[1] + k_v * (zeta[3] - v_meas) + k_x * e_lon
    om, som1, som2 = _sat(om_raw, car[4], car[5], car[8])
    a, sa1, sa2 = _sat(a_raw, car[6], car[7], car[9])
    out = {
        "om": om, "a": a,
        "som1": som1, "som2": som2, "sa1": sa1, "sa2": sa2,
        "div": -k_th * som1 - k_v * sa1,
    }
    if with_grad:
        S = x.shape[0]
        g_om_x = np.empty((S, 5))
        g_om_x[:, 0] = k_y * v_meas * sr
        g_om_x[:, 1] = -k_y * v_meas * cr
        g_om_x[:, 2] = -k_th
        g_om_x[:, 3] = k_y * e_lat
        g_om_x[:, 4] = -k_th
        g_a_x = np.empty((S, 5))
        g_a_x[:, 0] = -k_x * cr
        g_a_x[:, 1] = -k_x * sr
        g_a_x[:, 2] = 0.0
        g_a_x[:, 3] = -k_v
        g_a_x[:, 4] = 0.0
        g_om_z = np.empty((S, 4))
        g_om_z[:, 0] = -k_y * v_meas * sr
        g_om_z[:, 1] = k_y * v_meas * cr
        g_om_z[:, 2] = k_th - k_y * v_meas * e_lon
        g_om_z[:, 3] = 0.0
        g_a_z = np.empty((S, 4))
        g_a_z[:, 0] = k_x * cr
        g_a_z[:, 1] = k_x * sr
        g_a_z[:, 2] = k_x * e_lat
        g_a_z[:, 3] = k_v
        out.update(g_om_x=g_om_x, g_a_x=g_a_x, g_om_z=g_om_z, g_a_z=g_a_z)
    return out


def controller(x, zeta, uref, car):
    """Saturated tracking inputs and closed-loop divergence at one batch point.

    x: (S, 5) sample states, zeta: (4,) reference state, uref: (2,) reference
    input. Returns (u (S, 2), div (S,)).
    """
    c = _ctrl(np.atleast_2d(np.asarray(x, dtype=float)), np.asarray(zeta, dtype=float),
              np.asarray(uref, dtype=float), car, with_grad=False)
    return np.stack([c["om"], c["a"]], axis=1), c["div"]


def _ref_field(zeta, uref):
    return np.array([
        zeta[3] * np.cos(zeta[2]),
        zeta[3] * np.sin(zeta[2]),
        uref[0],
        uref[1],
    ])


def ref_rollout(x0, knots, dt, n_steps, substeps, car, with_grad=False):
    """Open-loop rollout of the 4-state car under interpolated knot inputs.

    x0: (B, 4) start states, knots: (B, K, 2). Returns
    (states (B, N+1, 4), inputs (B, N, 2)) and, with gradients,
    (dstates (B, N+1, 4, P), dinputs (B, N, 2, P)) with P = 2K, parameters
    flattened knot-major ((knot 0, omega), (knot 0, a), (knot 1, omega), ...).
    """
    x0 = np.asarray(x0, dtype=float)
    knots = np.asarray(knots, dtype=float)
    B, K = knots.shape[0], knots.shape[1]
    P = 2 * K
    horizon = n_steps * dt
    h = dt / substeps

    states = np.empty((B, n_steps + 1, 4))
    inputs = np.empty((B, n_steps, 2))
    x = x0.copy()
    if with_grad:
        dstates = np.empty((B, n_steps + 1, 4, P))
        dinputs = np.zeros((B, n_steps, 2, P))
        Sx = np.zeros((B, 4, P))

    def field(xc, t, Sc):
        j, w = _interp_weights(t, K, horizon)
        u = (1.0 - w) * knots[:, j, :] + w * knots[:, j + 1, :]
        f = np.empty((B, 4))
        f[:, 0] = xc[:, 3] * np.cos(xc[:, 2])
        f[:, 1] = xc[:, 3] * np.sin(xc[:, 2])
        f[:, 2] = u[:, 0]
        f[:, 3] = u[:, 1]
        if Sc is None:
            return f, None
        df = np.empty((B, 4, P))
        sin_t = np.sin(xc[:, 2])[:, None]
        cos_t = np.cos(xc[:, 2])[:, None]
        df[:, 0, :] = -xc[:, 3, None] * sin_t * Sc[:, 2, :] + cos_t * Sc[:, 3, :]
        df[:, 1, :] = xc[:, 3, None] * cos_t * Sc[:, 2, :] + sin_t * Sc[:, 3, :]
        df[:, 2, :] = 0.0
        df[:, 3, :] = 0.0
        df[:, 2, 2 * j] += 1.0 - w
        df[:, 2, 2 * (j + 1)] += w
        df[:, 3, 2 * j + 1] += 1.0 - w
        df[:, 3, 2 * (j + 1) + 1] += w
        return f, df

    for k in range(n_steps):
        states[:, k] = x
        t_k = k * dt
        j, w = _interp_weights(t_k, K, horizon)
        inputs[:, k] = (1.0 - w) * knots[:, j, :] + w * knots[:, j + 1, :]
        if with_grad:
            dstates[:, k] = Sx
            dinputs[:, k, 0, 2 * j] = 1.0 - w
            dinputs[:, k, 0, 2 * (j + 1)] = w
            dinputs[:, k, 1, 2 * j + 1] = 1.0 - w
            dinputs[:, k, 1, 2 * (j + 1) + 1] = w
        for i in range(substeps):
            t0 = (k * substeps + i) * h
            S0 = Sx if with_grad else None
            k1, d1 = field(x, t0, S0)
            k2, d2 = field(x + 0.5 * h * k1, t0 + 0.5 * h,
                           None if not with_grad else Sx + 0.5 * h * d1)
            k3, d3 = field(x + 0.5 * h * k2, t0 + 0.5 * h,
                           None if not with_grad else Sx + 0.5 * h * d2)
            k4, d4 = field(x + h * k3, t0 + h,
                           None if not with_grad else Sx + h * d3)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if with_grad:
                Sx = Sx + (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
    states[:, n_steps] = x
    if with_grad:
        dstates[:, n_steps] = Sx
        return states, inputs, dstates, dinputs
    return states, inputs


def closed_rollout(x0, ref0, knots, dt, n_steps, substeps, car, with_grad=False):
    """Closed-loop tracking rollout with the transport log-factor.

    The reference state is integrated jointly (it is shared by all samples),
    the per-sample state follows the tracked closed loop, and g accumulates
    -div f along the sample trajectory so that rho(t) = rho0 * exp(g(t)).

    x0: (S, 5) sampled start states, ref0: (4,) reference start,
    knots: (K, 2). Returns a dict with

        states (S, N+1, 5), g (S, N+1), inputs (S, N, 2), ref (N+1, 4)

    plus, when ``with_grad``, the tangents w.r.t. the flattened knots:

        dstates (S, N+1, 5, P), dg (S, N+1, P), dinputs (S, N, 2, P),
        dref (N+1, 4, P).
    """
    x0 = np.asarray(x0, dtype=float)
    ref0 = np.asarray(ref0, dtype=float)
    knots = np.asarray(knots, dtype=float)
    S = x0.shape[0]
    K = knots.shape[0]
    P = 2 * K
    horizon = n_steps * dt
    h = dt / substeps
    k_th, k_v = car[0], car[2]

    states = np.empty((S, n_steps + 1, 5))
    g = np.empty((S, n_steps + 1))
    inputs = np.empty((S, n_steps, 2))
    ref = np.empty((n_steps + 1, 4))

    x = x0.copy()
    z = ref0.copy()
    gacc = np.zeros(S)
    if with_grad:
        dstates = np.empty((S, n_steps + 1, 5, P))
        dg = np.empty((S, n_steps + 1, P))
        dinputs = np.empty((S, n_steps, 2, P))
        dref = np.empty((n_steps + 1, 4, P))
        Sx = np.zeros((S, 5, P))
        Sz = np.zeros((4, P))
        Sg = np.zeros((S, P))

    def stage(xc, zc, t, Sxc, Szc):
        """Fields and tangents at one RK4 stage point."""
        uref, j, w = _uref_at(t, knots, horizon)
        c = _ctrl(xc, zc, uref, car, with_grad)
        fx = np.empty((S, 5))
        fx[:, 0] = xc[:, 3] * np.cos(xc[:, 2])
        fx[:, 1] = xc[:, 3] * np.sin(xc[:, 2])
        fx[:, 2] = c["om"]
        fx[:, 3] = c["a"]
        fx[:, 4] = 0.0
        fz = _ref_field(zc, uref)
        fg = -c["div"]
        if not with_grad:
            return fx, fz, fg, None, None, None
        # d(u_ref)/d(knots) rows for the two input channels at this time.
        # raw-input tangents: d(raw)/dp = g_x . Sx + g_z . Sz + W
        d_or = (np.einsum("si,sip->sp", c["g_om_x"], Sxc)
                + c["g_om_z"] @ Szc)
        d_or[:, 2 * j] += 1.0 - w
        d_or[:, 2 * (j + 1)] += w
        d_ar = (np.einsum("si,sip->sp", c["g_a_x"], Sxc)
                + c["g_a_z"] @ Szc)
        d_ar[:, 2 * j + 1] += 1.0 - w
        d_ar[:, 2 * (j + 1) + 1] += w
        dfx = np.empty((S, 5, P))
        sin_t = np.sin(xc[:, 2])[:, None]
        cos_t = np.cos(xc[:, 2])[:, None]
        dfx[:, 0, :] = -xc[:, 3, None] * sin_t * Sxc[:, 2, :] + cos_t * Sxc[:, 3, :]
        dfx[:, 1, :] = xc[:, 3, None] * cos_t * Sxc[:, 2, :] + sin_t * Sxc[:, 3, :]
        dfx[:, 2, :] = c["som1"][:, None] * d_or
        dfx[:, 3, :] = c["sa1"][:, None] * d_ar
        dfx[:, 4, :] = 0.0
        dfz = np.empty((4, P))
        dfz[0, :] = -zc[3] * np.sin(zc[2]) * Szc[2, :] + np.cos(zc[2]) * Szc[3, :]
        dfz[1, :] = zc[3] * np.cos(zc[2]) * Szc[2, :] + np.sin(zc[2]) * Szc[3, :]
        dfz[2, :] = 0.0
        dfz[3, :] = 0.0
        dfz[2, 2 * j] += 1.0 - w
        dfz[2, 2 * (j + 1)] += w
        dfz[3, 2 * j + 1] += 1.0 - w
        dfz[3, 2 * (j + 1) + 1] += w
        # d(-div)/dp = k_th * sat''_om * d(om_raw) + k_v * sat''_a * d(a_raw)
        dfg = k_th * c["som2"][:, None] * d_or + k_v * c["sa2"][:, None] * d_ar
        return fx, fz, fg, dfx, dfz, dfg

    def record_input(k):
        t_k = k * dt
        uref, j, w = _uref_at(t_k, knots, horizon)
        c = _ctrl(x, z, uref, car, with_grad)
        inputs[:, k, 0] = c["om"]
        inputs[:, k, 1] = c["a"]
        if with_grad:
            d_or = np.einsum("si,sip->sp", c["g_om_x"], Sx) + c["g_om_z"] @ Sz
            d_or[:, 2 * j] += 1.0 - w
            d_or[:, 2 * (j + 1)] += w
            d_ar = np.einsum("si,sip->sp", c["g_a_x"], Sx) + c["g_a_z"] @ Sz
            d_ar[:, 2 * j + 1] += 1.0 - w
            d_ar[:, 2 * (j + 1) + 1] += w
            dinputs[:, k, 0, :] = c["som1"][:, None] * d_or
            dinputs[:, k, 1, :] = c["sa1"][:, None] * d_ar

    for k in range(n_steps):
        states[:, k] = x
        ref[k] = z
        g[:, k] = gacc
        if with_grad:
            dstates[:, k] = Sx
            dref[k] = Sz
            dg[:, k] = Sg
        record_input(k)
        for i in range(substeps):
            t0 = (k * substeps + i) * h
            if with_grad:
                f1x, f1z, f1g, d1x, d1z, d1g = stage(x, z, t0, Sx, Sz)
                f2x, f2z, f2g, d2x, d2z, d2g = stage(
                    x + 0.5 * h * f1x, z + 0.5 * h * f1z, t0 + 0.5 * h,
                    Sx + 0.5 * h * d1x, Sz + 0.5 * h * d1z)
                f3x, f3z, f3g, d3x, d3z, d3g = stage(
                    x + 0.5 * h * f2x, z + 0.5 * h * f2z, t0 + 0.5 * h,
                    Sx + 0.5 * h * d2x, Sz + 0.5 * h * d2z)
                f4x, f4z, f4g, d4x, d4z, d4g = stage(
                    x + h * f3x, z + h * f3z, t0 + h,
                    Sx + h * d3x, Sz + h * d3z)
                Sx = Sx + (h / 6.0) * (d1x + 2.0 * d2x + 2.0 * d3x + d4x)
                Sz = Sz + (h / 6.0) * (d1z + 2.0 * d2z + 2.0 * d3z + d4z)
                Sg = Sg + (h / 6.0) * (d1g + 2.0 * d2g + 2.0 * d3g + d4g)
            else:
                f1x, f1z, f1g, _, _, _ = stage(x, z, t0, None, None)
                f2x, f2z, f2g, _, _, _ = stage(
                    x + 0.5 * h * f1x, z + 0.5 * h * f1z, t0 + 0.5 * h, None, None)
                f3x, f3z, f3g, _, _, _ = stage(
                    x + 0.5 * h * f2x, z + 0.5 * h * f2z, t0 + 0.5 * h, None, None)
                f4x, f4z, f4g, _, _, _ = stage(
                    x + h * f3x, z + h * f3z, t0 + h, None, None)
            x = x + (h / 6.0) * (f1x + 2.0 * f2x + 2.0 * f3x + f4x)
            z = z + (h / 6.0) * (f1z + 2.0 * f2z + 2.0 * f3z + f4z)
            gacc = gacc + (h / 6.0) * (f1g + 2.0 * f2g + 2.0 * f3g + f4g)
    states[:, n_steps] = x
    ref[n_steps] = z
    g[:, n_steps] = gacc
    out = {"states": states, "g": g, "inputs": inputs, "ref": ref}
    if with_grad:
        dstates[:, n_steps] = Sx
        dref[n_steps] = Sz
        dg[:, n_steps] = Sg
        out.update(dstates=dstates, dg=dg, dinputs=dinputs, dref=dref)
    return out


def openloop_rollout(x0, u_raw, dt, substeps, car, with_grad=False, squash=True):
    """Rollout under per-step constant inputs, optionally squashed to the box.

    x0: (B, 5), u_raw: (B, H, 2) raw decision variables. Returns a dict with
    states (B, H+1, 5), u_eff (B, H, 2) and, with gradients, dstates
    (B, H+1, 5, 2H) w.r.t. the flattened raw inputs plus du_eff (B, H, 2),
    the diagonal derivative of the effective input w.r.t. its own raw value.
    """
    x0 = np.asarray(x0, dtype=float)
    u_raw = np.asarray(u_raw, dtype=float)
    B, H = u_raw.shape[0], u_raw.shape[1]
    P = 2 * H
    h = dt / substeps

    if squash:
        om, dom, _ = _sat(u_raw[:, :, 0], car[4], car[5], car[8])
        a, da, _ = _sat(u_raw[:, :, 1], car[6], car[7], car[9])
        u_eff = np.stack([om, a], axis=2)
        du_eff = np.stack([dom, da], axis=2)
    else:
        u_eff = u_raw.copy()
        du_eff = np.ones_like(u_raw)

    states = np.empty((B, H + 1, 5))
    x = x0.copy()
    if with_grad:
        dstates = np.empty((B, H + 1, 5, P))
        Sx = np.zeros((B, 5, P))

    def field(xc, u, Sc, k):
        f = np.empty((B, 5))
        f[:, 0] = xc[:, 3] * np.cos(xc[:, 2])
        f[:, 1] = xc[:, 3] * np.sin(xc[:, 2])
        f[:, 2] = u[:, 0]
        f[:, 3] = u[:, 1]
        f[:, 4] = 0.0
        if Sc is None:
            return f, None
        df = np.zeros((B, 5, P))
        sin_t = np.sin(xc[:, 2])[:, None]
        cos_t = np.cos(xc[:, 2])[:, None]
        df[:, 0, :] = -xc[:, 3, None] * sin_t * Sc[:, 2, :] + cos_t * Sc[:, 3, :]
        df[:, 1, :] = xc[:, 3, None] * cos_t * Sc[:, 2, :] + sin_t * Sc[:, 3, :]
        df[:, 2, 2 * k] = du_eff[:, k, 0]
        df[:, 3, 2 * k + 1] = du_eff[:, k, 1]
        return f, df

    for k in range(H):
        states[:, k] = x
        if with_grad:
            dstates[:, k] = Sx
        u = u_eff[:, k, :]
        for _ in range(substeps):
            S0 = Sx if with_grad else None
            k1, d1 = field(x, u, S0, k)
            k2, d2 = field(x + 0.5 * h * k1, u,
                           None if not with_grad else Sx + 0.5 * h * d1, k)
            k3, d3 = field(x + 0.5 * h * k2, u,
                           None if not with_grad else Sx + 0.5 * h * d2, k)
            k4, d4 = field(x + h * k3, u,
                           None if not with_grad else Sx + h * d3, k)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if with_grad:
                Sx = Sx + (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
    states[:, H] = x
    out = {"states": states, "u_eff": u_eff, "du_eff": du_eff}
    if with_grad:
        dstates[:, H] = Sx
        out["dstates"] = dstates
    return out
