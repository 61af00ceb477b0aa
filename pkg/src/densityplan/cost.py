"""Four-term differentiable trajectory cost with staged activation.

    J = alpha_G * J_G + alpha_I * J_I + alpha_B * J_B + alpha_C * J_C

J_G: density-weighted squared goal distance of the final state.
J_I: control effort.
J_B: density-weighted hinge-squared state-bound violations.
J_C: collision risk surrogate -- per sample and timestep, the weight
     P_occ(cell) * rho times the squared distance to the desired position one
     occupancy-gradient step away.

During differentiation the collision weights and desired positions are held
constant (the binning that produces them is not differentiable); gradients
flow through the sample positions, the inputs, and the densities. The
functions here return cost values together with the partial derivatives with
respect to the trajectory quantities; the optimizer contracts those with the
rollout tangents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .collision import batch_collision_terms
from .dynamics import StateBounds
from .envmap import OccupancyGrid


@dataclass
class CostWeights:
    alpha_g: float = 1.0
    alpha_i: float = 0.01
    alpha_b: float = 100.0
    alpha_c: float = 10.0
    q_g: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 0.0, 0.0, 0.0]))
    q_i: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))
    q_bound: float = 1.0
    beta: float = 1.0
    grad_clip: float = 10.0

    def __post_init__(self):
        self.q_g = np.asarray(self.q_g, dtype=float)
        self.q_i = np.asarray(self.q_i, dtype=float)


@dataclass
class CostBreakdown:
    """Weighted cost terms; total = sum of alpha-weighted active terms."""

    j_g: float
    j_i: float
    j_b: float
    j_c: float
    total: float
    alpha_b_active: bool = True
    alpha_c_active: bool = True

    def to_dict(self):
        return {"J_G": self.j_g, "J_I": self.j_i, "J_B": self.j_b,
                "J_C": self.j_c, "total": self.total,
                "alpha_b_active": bool(self.alpha_b_active),
                "alpha_c_active": bool(self.alpha_c_active)}


# ---------------------------------------------------------------------------
# single-rollout operations

def goal_cost(rollout, x_g, q_g) -> float:
    """Final-state squared goal distance weighted by the final density."""
    d = rollout.states[-1] - np.asarray(x_g, dtype=float)
    return float(rollout.densities[-1] * np.sum(q_g * d * d))


def input_cost(inputs, q_i) -> float:
    """Control effort: sum of squared inputs under the diagonal weight."""
    u = np.asarray(inputs, dtype=float)
    return float(np.sum(q_i * u * u))


def bounds_cost(rollout, bounds: StateBounds, q_bound: float = 1.0) -> float:
    """Density-weighted hinge-squared violations of the state box."""
    lo = np.maximum(0.0, bounds.x_min - rollout.states)
    hi = np.maximum(0.0, rollout.states - bounds.x_max)
    per_step = q_bound * np.sum(lo * lo + hi * hi, axis=1)
    return float(np.sum(rollout.densities * per_step))


def collision_cost(rollouts, env: OccupancyGrid, gradients, beta: float = 1.0) -> float:
    """Collision risk surrogate summed over samples and timesteps."""
    positions = np.stack([r.states[:, :2] for r in rollouts])
    rho = np.stack([r.densities for r in rollouts])
    p_occ, desired = batch_collision_terms(positions, env, gradients, beta)
    d2 = np.sum((positions - desired) ** 2, axis=-1)
    return float(np.sum(p_occ * rho * d2))


def total_cost(rollouts, env: OccupancyGrid, gradients, goal, bounds,
               weights: CostWeights, alpha_b_on: bool = True,
               alpha_c_on: bool = True) -> CostBreakdown:
    """Weighted sum over a rollout batch with staged activation flags."""
    j_g = sum(goal_cost(r, goal, weights.q_g) for r in rollouts)
    j_i = 0.0
    for r in rollouts:
        if getattr(r, "inputs", None) is not None:
            j_i += input_cost(r.inputs, weights.q_i)
    j_b = sum(bounds_cost(r, bounds, weights.q_bound) for r in rollouts)
    j_c = collision_cost(rollouts, env, gradients, weights.beta) if alpha_c_on else 0.0
    j_b_eff = j_b if alpha_b_on else 0.0
    total = (weights.alpha_g * j_g + weights.alpha_i * j_i
             + weights.alpha_b * j_b_eff + weights.alpha_c * j_c)
    return CostBreakdown(j_g=j_g, j_i=j_i, j_b=j_b_eff, j_c=j_c, total=total,
                         alpha_b_active=alpha_b_on, alpha_c_active=alpha_c_on)


# ---------------------------------------------------------------------------
# batched evaluation with trajectory partials (optimizer backend)

@dataclass
class BatchCost:
    """Per-trajectory staged costs, their trajectory partials, and the frozen
    collision terms (weights / desired positions) of the evaluation point."""

    j_g: np.ndarray
    j_i: np.ndarray
    j_b: np.ndarray
    j_c: np.ndarray
    total: np.ndarray
    # partials of the *staged* per-trajectory total
    d_xlast: np.ndarray      # (B, 5)
    d_states: np.ndarray     # (B, T, 5)
    d_inputs: np.ndarray     # (B, T-1, 2)
    d_glast: np.ndarray      # (B,)
    d_g: np.ndarray          # (B, T)
    # frozen collision pieces
    coll_w: np.ndarray       # (B, T) weights P_occ * rho (detached)
    coll_desired: np.ndarray  # (B, T, 2) (detached)
    goal_dist: np.ndarray    # (B,) Euclidean position distance to goal


def batch_cost(states, inputs, rho, goal, bounds: StateBounds,
               weights: CostWeights, env: OccupancyGrid, gradients,
               alpha_b_on, alpha_c_on, frozen=None) -> BatchCost:
    """Evaluate the staged cost and its trajectory partials over a batch.

    states: (B, T, 5), inputs: (B, T-1, 2), rho: (B, T) densities or None
    (density one, no transport gradient). alpha_b_on / alpha_c_on: per-
    trajectory activation flags (B,). ``frozen`` optionally supplies
    (weights, desired) from a previous evaluation point -- used by the finite
    difference oracle, which must hold the detached terms constant.
    """
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    B, T = states.shape[0], states.shape[1]
    has_rho = rho is not None
    rho_arr = np.asarray(rho, dtype=float) if has_rho else np.ones((B, T))
    alpha_b_on = np.asarray(alpha_b_on, dtype=float)
    alpha_c_on = np.asarray(alpha_c_on, dtype=float)
    goal = np.asarray(goal, dtype=float)

    # goal term
    d_last = states[:, -1, :] - goal
    quad_g = np.sum(weights.q_g * d_last * d_last, axis=1)
    j_g = rho_arr[:, -1] * quad_g
    goal_dist = np.hypot(d_last[:, 0], d_last[:, 1])

    # input term
    j_i = np.einsum("bkc,c->b", inputs * inputs, weights.q_i)

    # bounds term
    lo = np.maximum(0.0, bounds.x_min - states)
    hi = np.maximum(0.0, states - bounds.x_max)
    per_step_b = weights.q_bound * np.sum(lo * lo + hi * hi, axis=2)
    j_b = np.sum(rho_arr * per_step_b, axis=1)

    # collision term (weights and desired positions detached)
    positions = states[:, :, :2]
    if frozen is None:
        p_occ, desired = batch_collision_terms(positions, env, gradients,
                                               weights.beta)
        coll_w = p_occ * rho_arr
    else:
        coll_w, desired = frozen
    diff = positions - desired
    d2 = np.sum(diff * diff, axis=2)
    j_c = np.sum(coll_w * d2, axis=1)

    total = (weights.alpha_g * j_g + weights.alpha_i * j_i
             + weights.alpha_b * alpha_b_on * j_b
             + weights.alpha_c * alpha_c_on * j_c)

    # partials of the staged total w.r.t. trajectory quantities
    d_xlast = (weights.alpha_g * rho_arr[:, -1, None]
               * 2.0 * weights.q_g * d_last)
    d_glast = weights.alpha_g * j_g if has_rho else np.zeros(B)
    d_inputs = weights.alpha_i * 2.0 * weights.q_i * inputs
    d_states = (weights.alpha_b * alpha_b_on)[:, None, None] \
        * rho_arr[:, :, None] * weights.q_bound * 2.0 * (hi - lo)
    d_g = (weights.alpha_b * alpha_b_on)[:, None] * rho_arr * per_step_b \
        if has_rho else np.zeros((B, T))
    d_states[:, :, :2] += (weights.alpha_c * alpha_c_on)[:, None, None] \
        * coll_w[:, :, None] * 2.0 * diff

    return BatchCost(j_g=j_g, j_i=j_i, j_b=j_b, j_c=j_c, total=total,
                     d_xlast=d_xlast, d_states=d_states, d_inputs=d_inputs,
                     d_glast=d_glast, d_g=d_g, coll_w=coll_w,
                     coll_desired=desired if frozen is None else frozen[1],
                     goal_dist=goal_dist)


def assemble_gradient(bc: BatchCost, dstates, dinputs, dg=None) -> np.ndarray:
    """Chain the trajectory partials with the rollout tangents.

    dstates: (B, T, D, P) with D = 4 (reference rollouts, bias column absent)
    or 5; dinputs: (B, T-1, 2, P); dg: (B, T, P) transport tangents or None.
    Returns the per-trajectory parameter gradient (B, P).
    """
    D = dstates.shape[2]
    grad = np.einsum("btd,btdp->bp", bc.d_states[:, :, :D], dstates)
    grad += np.einsum("bd,bdp->bp", bc.d_xlast[:, :D], dstates[:, -1])
    grad += np.einsum("bkc,bkcp->bp", bc.d_inputs, dinputs)
    if dg is not None:
        grad += np.einsum("bt,btp->bp", bc.d_g, dg)
        grad += bc.d_glast[:, None] * dg[:, -1]
    return grad


def clip_gradient(grad, limit: float) -> np.ndarray:
    """Componentwise clip to [-limit, limit] (numerical-stability guard)."""
    return np.clip(grad, -limit, limit)
