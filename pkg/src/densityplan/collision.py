"""Ego occupancy by density binning and collision probability.

The ego vehicle's positional distribution at each timestep is estimated by
assigning the propagated samples to grid cells, averaging the densities of
the samples sharing a cell (the occupancy logits), and normalizing the
logits over the plane. The per-timestep collision probability is the sum of
P_occ * P_ego over cells. The differentiable risk ingredients (per-sample
weights and gradient-descent "desired positions") also live here.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .envmap import GridGeometry, OccupancyGrid


@dataclass
class EgoOccupancy:
    """Normalized ego occupancy per cell and timestep.

    Timesteps where no sample lies inside the grid are flagged empty; their
    P_ego slice is all-zero and they are excluded from risk sums.
    """

    geometry: GridGeometry
    p_ego: np.ndarray            # (cx, cy, n_steps + 1)
    empty: np.ndarray            # (n_steps + 1,) bool
    normalizers: np.ndarray      # (n_steps + 1,) logit sums before normalization


@dataclass
class CollisionProfile:
    """Per-timestep total collision probability (and optional sample weights)."""

    totals: np.ndarray                    # (n_steps + 1,)
    sample_weights: np.ndarray | None = None

    @property
    def max(self) -> float:
        return float(self.totals.max())

    @property
    def sum(self) -> float:
        return float(self.totals.sum())


def bin_ego(rollouts, geom: GridGeometry) -> EgoOccupancy:
    """Bin density rollouts into the normalized ego occupancy grid."""
    if len(rollouts) == 0:
        raise ValueError("need at least one rollout")
    n_times = geom.n_times
    for r in rollouts:
        if r.states.shape[0] != n_times:
            raise ValueError("rollouts do not share the grid's time axis")
    positions = np.stack([r.states[:, :2] for r in rollouts])   # (S, T, 2)
    densities = np.stack([r.densities for r in rollouts])       # (S, T)

    p_ego = np.zeros((geom.cx, geom.cy, n_times))
    empty = np.zeros(n_times, dtype=bool)
    normalizers = np.zeros(n_times)
    cells = geom.cell_of(positions)                             # (S, T, 2)
    inside = geom.in_grid(cells)
    for k in range(n_times):
        mask = inside[:, k]
        if not np.any(mask):
            empty[k] = True
            continue
        flat = cells[mask, k, 0] * geom.cy + cells[mask, k, 1]
        sums = np.bincount(flat, weights=densities[mask, k],
                           minlength=geom.cx * geom.cy)
        counts = np.bincount(flat, minlength=geom.cx * geom.cy)
        occupied = counts > 0
        logits = np.zeros(geom.cx * geom.cy)
        logits[occupied] = sums[occupied] / counts[occupied]
        total = logits.sum()
        normalizers[k] = total
        if total > 0:
            p_ego[:, :, k] = (logits / total).reshape(geom.cx, geom.cy)
        else:
            # all in-grid samples carry zero density: uniform over their cells
            logits[occupied] = 1.0
            p_ego[:, :, k] = (logits / logits.sum()).reshape(geom.cx, geom.cy)
    if np.any(empty):
        warnings.warn("ego occupancy: timesteps with no in-grid samples were "
                      "flagged empty", stacklevel=2)
    return EgoOccupancy(geometry=geom, p_ego=p_ego, empty=empty,
                        normalizers=normalizers)


def collision_probability(ego: EgoOccupancy, env: OccupancyGrid) -> CollisionProfile:
    """Per-timestep sum over cells of P_occ * P_ego (zero on empty timesteps)."""
    if ego.geometry != env.geometry:
        raise ValueError("ego and environment grids must share geometry")
    totals = np.einsum("xyt,xyt->t", ego.p_ego, env.p_occ)
    totals[ego.empty] = 0.0
    return CollisionProfile(totals=totals)


def collision_profile_from_rollouts(rollouts, env: OccupancyGrid) -> CollisionProfile:
    """Collision profile of a rollout batch plus the per-sample weights.

    Totals follow the binned ego-occupancy product; the weight matrix
    (S, n_steps + 1) carries each sample's nearest-cell P_occ times its
    transported density (out-of-grid reads P_occ = 1).
    """
    ego = bin_ego(rollouts, env.geometry)
    profile = collision_probability(ego, env)
    positions = np.stack([r.states[:, :2] for r in rollouts])
    rho = np.stack([r.densities for r in rollouts])
    geom = env.geometry
    cells = geom.cell_of(positions)
    inside = geom.in_grid(cells)
    ci = np.clip(cells[..., 0], 0, geom.cx - 1)
    cj = np.clip(cells[..., 1], 0, geom.cy - 1)
    kk = np.broadcast_to(np.arange(geom.n_times), inside.shape)
    p_occ = np.where(inside, env.p_occ[ci, cj, kk], 1.0)
    profile.sample_weights = p_occ * rho
    return profile


def sample_coll_weight(x, k: int, env: OccupancyGrid, rho: float) -> float:
    """Collision weight of one sample: nearest-cell P_occ times its density.

    Out-of-grid positions read P_occ = 1 (conservative).
    """
    if rho < 0:
        raise ValueError("rho must be non-negative")
    x = np.asarray(x, dtype=float)
    return float(env.prob_at(x[:2], k) * rho)


def desired_position(x, k: int, env: OccupancyGrid, gradients, beta: float):
    """Desired position one gradient-descent step down the occupancy field.

    The (possibly fractional) desired cell coordinate c - beta * G at the
    sample's cell is transformed back to world coordinates; out-of-grid
    samples return their own position (zero pull).
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    x = np.asarray(x, dtype=float)
    geom = env.geometry
    cell = geom.cell_of(x[:2])
    if not geom.in_grid(cell):
        return np.array([x[0], x[1]])
    g_x, g_y = gradients
    c_des = geom.grid_coords(x[:2]) - beta * np.array([
        g_x[cell[0], cell[1], k], g_y[cell[0], cell[1], k]])
    return geom.center_of(c_des)


def batch_collision_terms(positions, env: OccupancyGrid, gradients, beta: float):
    """Vectorized weights and desired positions for trajectory batches.

    positions: (..., 2) world coordinates per sample and timestep, where the
    last-but-one axis is time (length n_steps + 1). Returns
    (p_occ (...,), desired (..., 2)) with out-of-grid entries reading
    P_occ = 1 and desired = own position.
    """
    positions = np.asarray(positions, dtype=float)
    geom = env.geometry
    lead = positions.shape[:-2]
    n_times = positions.shape[-2]
    if n_times != geom.n_times:
        raise ValueError("positions do not cover the grid's time axis")
    cells = geom.cell_of(positions)
    inside = geom.in_grid(cells)
    ci = np.clip(cells[..., 0], 0, geom.cx - 1)
    cj = np.clip(cells[..., 1], 0, geom.cy - 1)
    kk = np.broadcast_to(np.arange(n_times), lead + (n_times,))
    p_occ = np.where(inside, env.p_occ[ci, cj, kk], 1.0)
    g_x, g_y = gradients
    pull = np.stack([g_x[ci, cj, kk], g_y[ci, cj, kk]], axis=-1)
    desired = geom.center_of(geom.grid_coords(positions) - beta * pull)
    desired = np.where(inside[..., None], desired, positions)
    return p_occ, desired


def profile_to_csv(profile: CollisionProfile, dt: float, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "t", "total_P_coll"])
        for k, total in enumerate(profile.totals):
            writer.writerow([k, f"{k * dt:.6f}", repr(float(total))])
