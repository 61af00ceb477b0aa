"""Time-indexed probabilistic occupancy grids.

Grids are built three ways: rasterizing obstacle scenarios (anisotropic
Gaussian footprints skewed along the motion direction), generating random
scenarios, or ingesting inD-style trajectory CSVs. The module also provides
the finite-difference gradient fields consumed by the collision-risk
surrogate, disk inflation for the tube-MPC variants, and the binary/JSON
file formats.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

GRID_MAGIC = b"DPGRID01" + b"\x00" * 8


@dataclass(frozen=True)
class GridGeometry:
    """World <-> grid transform and the time axis of a grid stack.

    Cell (i, j) covers [origin + (i, j) * cell_size, origin + (i+1, j+1) *
    cell_size); its center sits at origin + (i + 0.5, j + 0.5) * cell_size.
    """

    origin: tuple
    cell_size: float
    cx: int
    cy: int
    n_steps: int
    dt: float

    def __post_init__(self):
        if self.cell_size <= 0 or self.cx < 1 or self.cy < 1:
            raise ValueError("invalid grid geometry")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def n_times(self) -> int:
        return self.n_steps + 1

    def cell_of(self, xy):
        """Integer cell indices of world points (..., 2); may be out of range."""
        xy = np.asarray(xy, dtype=float)
        return np.floor((xy - np.array(self.origin)) / self.cell_size).astype(np.int64)

    def in_grid(self, cells):
        cells = np.asarray(cells)
        return ((cells[..., 0] >= 0) & (cells[..., 0] < self.cx)
                & (cells[..., 1] >= 0) & (cells[..., 1] < self.cy))

    def center_of(self, cells):
        """World coordinates of (possibly fractional) grid coordinates."""
        cells = np.asarray(cells, dtype=float)
        return np.array(self.origin) + (cells + 0.5) * self.cell_size

    def grid_coords(self, xy):
        """Continuous grid coordinates whose integers align with cell centers."""
        xy = np.asarray(xy, dtype=float)
        return (xy - np.array(self.origin)) / self.cell_size - 0.5

    def cell_centers(self):
        """(cx,) and (cy,) arrays of cell-center world coordinates."""
        xs = self.origin[0] + (np.arange(self.cx) + 0.5) * self.cell_size
        ys = self.origin[1] + (np.arange(self.cy) + 0.5) * self.cell_size
        return xs, ys


@dataclass
class OccupancyGrid:
    """Per-cell, per-timestep occupancy probabilities."""

    geometry: GridGeometry
    p_occ: np.ndarray  # (cx, cy, n_steps + 1)
    empty_window: bool = False

    def __post_init__(self):
        expected = (self.geometry.cx, self.geometry.cy, self.geometry.n_times)
        if self.p_occ.shape != expected:
            raise ValueError(f"grid shape {self.p_occ.shape} != geometry {expected}")

    def prob_at(self, xy, k):
        """Nearest-cell P_occ at world positions; out-of-grid reads 1."""
        cells = self.geometry.cell_of(xy)
        inside = self.geometry.in_grid(cells)
        flat_inside = np.atleast_1d(inside)
        cells = np.atleast_2d(cells)
        out = np.ones(cells.shape[0])
        idx = np.nonzero(flat_inside)[0]
        out[idx] = self.p_occ[cells[idx, 0], cells[idx, 1], k]
        return out if np.ndim(xy) > 1 else float(out[0])


@dataclass
class ObstacleSpec:
    """One obstacle: footprint, per-timestep pose, and footprint uncertainty."""

    obstacle_id: int
    length: float
    width: float
    trajectory: np.ndarray         # (n_steps + 1, 4): x, y, heading, speed
    sigma: float                   # base standard deviation [m]
    skew_factor: float = 4.0       # variance multiplier along motion
    skew_shift: float = 0.5        # forward mean shift, in units of sigma

    def __post_init__(self):
        self.trajectory = np.asarray(self.trajectory, dtype=float)
        if self.trajectory.ndim != 2 or self.trajectory.shape[1] != 4:
            raise ValueError("trajectory must be (n_steps + 1, 4)")

    def sort_key(self):
        t0 = self.trajectory[0]
        return (t0[0], t0[1], self.length, self.width, self.sigma, self.obstacle_id)


_SPEED_EPS = 1e-9


def _footprint_density(obs: ObstacleSpec, k: int, geom: GridGeometry):
    """Cell-integrated Gaussian footprint of one obstacle at one timestep.

    Returns (xs slice, ys slice, probability submatrix) restricted to the
    +-5 sigma envelope; midpoint quadrature (density at the cell center times
    the cell area) is exact to ~1e-8 relative for sigma >= cell size.
    """
    x, y, heading, speed = obs.trajectory[k]
    moving = speed > _SPEED_EPS
    s_par = obs.sigma * (np.sqrt(obs.skew_factor) if moving else 1.0)
    s_perp = obs.sigma
    if moving:
        x = x + obs.skew_shift * obs.sigma * np.cos(heading)
        y = y + obs.skew_shift * obs.sigma * np.sin(heading)
    reach = 5.0 * max(s_par, s_perp)
    i0 = max(int(np.floor((x - reach - geom.origin[0]) / geom.cell_size)), 0)
    i1 = min(int(np.ceil((x + reach - geom.origin[0]) / geom.cell_size)), geom.cx)
    j0 = max(int(np.floor((y - reach - geom.origin[1]) / geom.cell_size)), 0)
    j1 = min(int(np.ceil((y + reach - geom.origin[1]) / geom.cell_size)), geom.cy)
    if i0 >= i1 or j0 >= j1:
        return None
    xs, ys = geom.cell_centers()
    dx = xs[i0:i1, None] - x
    dy = ys[None, j0:j1] - y
    if moving:
        c, s = np.cos(heading), np.sin(heading)
        d_par = c * dx + s * dy
        d_perp = -s * dx + c * dy
    else:
        d_par, d_perp = dx, dy
    q = (d_par / s_par) ** 2 + (d_perp / s_perp) ** 2
    dens = np.exp(-0.5 * q) / (2.0 * np.pi * s_par * s_perp)
    prob = np.clip(dens * geom.cell_size ** 2, 0.0, 1.0)
    return i0, i1, j0, j1, prob


def rasterize(obstacles, geom: GridGeometry) -> OccupancyGrid:
    """Rasterize obstacle footprints into an occupancy grid.

    Per cell, obstacles combine independently: P = 1 - prod(1 - P_i).
    Obstacles are processed in a canonical content-sorted order so the result
    is invariant to permutations of the input list.
    """
    free = np.ones((geom.cx, geom.cy, geom.n_times))
    for obs in sorted(obstacles, key=ObstacleSpec.sort_key):
        if obs.trajectory.shape[0] != geom.n_times:
            raise ValueError("obstacle trajectory does not cover the time grid")
        for k in range(geom.n_times):
            hit = _footprint_density(obs, k, geom)
            if hit is None:
                continue
            i0, i1, j0, j1, prob = hit
            free[i0:i1, j0:j1, k] *= 1.0 - prob
    return OccupancyGrid(geometry=geom, p_occ=1.0 - free)


def occ_gradients(grid: OccupancyGrid):
    """Central-difference gradients of P_occ in cell units, one-sided at borders."""
    g_x = np.gradient(grid.p_occ, axis=0)
    g_y = np.gradient(grid.p_occ, axis=1)
    return g_x, g_y


def inflate(grid: OccupancyGrid, radius: float) -> OccupancyGrid:
    """Per-cell max over the disk of cells within ``radius`` meters."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    r_cells = int(np.floor(radius / grid.geometry.cell_size))
    if r_cells == 0:
        return OccupancyGrid(grid.geometry, grid.p_occ.copy(), grid.empty_window)
    span = np.arange(-r_cells, r_cells + 1)
    disk = (span[:, None] ** 2 + span[None, :] ** 2) <= r_cells ** 2
    out = ndimage.maximum_filter(grid.p_occ, footprint=disk[:, :, None])
    return OccupancyGrid(grid.geometry, out, grid.empty_window)


@dataclass
class EnvGenConfig:
    """Ranges for the random scenario generator."""

    n_obstacles: tuple = (2, 6)
    dynamic_fraction: float = 0.5
    speed_range: tuple = (0.5, 2.5)
    length_range: tuple = (0.5, 3.0)
    width_range: tuple = (0.4, 2.0)
    sigma_range: tuple = (0.3, 1.2)
    skew_factor: float = 4.0
    skew_shift: float = 0.5
    cell_size: float = 0.5
    margin: float = 5.0
    dt: float = 0.1
    n_steps: int = 100
    start_goal_distance: tuple = (10.0, 70.0)
    v0_range: tuple = (1.0, 3.0)
    corridor_halfwidth: float = 8.0
    max_attempts: int = 1000
    free_threshold: float = 0.01


class EnvGenError(RuntimeError):
    pass


def _scenario_geometry(start, goal, obstacles, cfg: EnvGenConfig) -> GridGeometry:
    """Extent covering start, goal and all +-5 sigma envelopes with margin."""
    pts = [start[:2], goal[:2]]
    for obs in obstacles:
        reach = 5.0 * obs.sigma * np.sqrt(max(obs.skew_factor, 1.0)) \
            + abs(obs.skew_shift) * obs.sigma
        pts.append(obs.trajectory[:, :2].min(axis=0) - reach)
        pts.append(obs.trajectory[:, :2].max(axis=0) + reach)
    pts = np.array(pts)
    lo = pts.min(axis=0) - cfg.margin
    hi = pts.max(axis=0) + cfg.margin
    cx = int(np.ceil((hi[0] - lo[0]) / cfg.cell_size))
    cy = int(np.ceil((hi[1] - lo[1]) / cfg.cell_size))
    return GridGeometry(origin=(lo[0], lo[1]), cell_size=cfg.cell_size,
                        cx=cx, cy=cy, n_steps=cfg.n_steps, dt=cfg.dt)


def _straight_trajectory(x0, y0, heading, speed, n_times, dt):
    t = np.arange(n_times) * dt
    traj = np.empty((n_times, 4))
    traj[:, 0] = x0 + speed * t * np.cos(heading)
    traj[:, 1] = y0 + speed * t * np.sin(heading)
    traj[:, 2] = heading
    traj[:, 3] = speed
    return traj


def generate_random_env(cfg: EnvGenConfig, rng_seed: int):
    """Seeded random scenario: obstacles, grid, start state and goal state.

    The start-goal distance is uniform in the configured range; start and
    goal cells must be nearly free (P_occ below the threshold) at the first
    and last timestep respectively, retrying obstacle placement up to
    ``max_attempts`` times.
    """
    rng = np.random.default_rng(rng_seed)
    dist = rng.uniform(*cfg.start_goal_distance)
    bearing = rng.uniform(-np.pi, np.pi)
    start_xy = np.zeros(2)
    goal_xy = dist * np.array([np.cos(bearing), np.sin(bearing)])
    v0 = rng.uniform(*cfg.v0_range)
    start = np.array([start_xy[0], start_xy[1], bearing, v0, 0.0])
    goal = np.array([goal_xy[0], goal_xy[1], 0.0, 0.0, 0.0])

    n_times = cfg.n_steps + 1
    for _ in range(cfg.max_attempts):
        n_obs = int(rng.integers(cfg.n_obstacles[0], cfg.n_obstacles[1] + 1))
        obstacles = []
        for i in range(n_obs):
            # place along the start-goal corridor where it matters
            along = rng.uniform(0.1, 0.9)
            across = rng.uniform(-cfg.corridor_halfwidth, cfg.corridor_halfwidth)
            axis = (goal_xy - start_xy) / dist
            normal = np.array([-axis[1], axis[0]])
            pos = start_xy + along * dist * axis + across * normal
            heading = rng.uniform(-np.pi, np.pi)
            speed = rng.uniform(*cfg.speed_range) if rng.random() < cfg.dynamic_fraction else 0.0
            obstacles.append(ObstacleSpec(
                obstacle_id=i,
                length=rng.uniform(*cfg.length_range),
                width=rng.uniform(*cfg.width_range),
                trajectory=_straight_trajectory(pos[0], pos[1], heading, speed,
                                                n_times, cfg.dt),
                sigma=rng.uniform(*cfg.sigma_range),
                skew_factor=cfg.skew_factor,
                skew_shift=cfg.skew_shift,
            ))
        geom = _scenario_geometry(start, goal, obstacles, cfg)
        grid = rasterize(obstacles, geom)
        if (grid.prob_at(start_xy, 0) < cfg.free_threshold
                and grid.prob_at(goal_xy, cfg.n_steps) < cfg.free_threshold):
            return obstacles, grid, start, goal
    raise EnvGenError("environment generation failed")


# ---------------------------------------------------------------------------
# inD-style track ingestion

REQUIRED_COLUMNS = ("trackId", "frame", "xCenter", "yCenter", "heading",
                    "width", "length")


def _sidecar_path(csv_path):
    return str(csv_path) + ".json"


def read_sidecar(csv_path):
    with open(_sidecar_path(csv_path)) as fh:
        meta = json.load(fh)
    return float(meta["frame_rate_hz"]), tuple(meta.get("utm_origin", (0.0, 0.0)))


def ingest_tracks_csv(path, geom: GridGeometry, window) -> OccupancyGrid:
    """Build an occupancy grid from an inD-style trajectory CSV.

    Tracks are linearly resampled to the grid's dt over ``window = (t_start,
    t_end)`` (seconds in recording time), converted to obstacles with the
    footprint rule sigma = length + 1 m, then rasterized. A track contributes
    only inside its recorded span; the returned grid flags an empty window.
    """
    frame_rate, utm_origin = read_sidecar(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise ValueError(f"missing column: {col}")
        tracks = {}
        for row in reader:
            tracks.setdefault(row["trackId"], []).append((
                float(row["frame"]), float(row["xCenter"]), float(row["yCenter"]),
                float(row["heading"]), float(row["width"]), float(row["length"]),
            ))

    t_start, t_end = window
    n_times = geom.n_times
    times = t_start + np.arange(n_times) * geom.dt
    obstacles = []
    any_data = False
    for tid in sorted(tracks, key=lambda s: (len(s), s)):
        rows = np.array(sorted(tracks[tid], key=lambda r: r[0]))
        tt = rows[:, 0] / frame_rate
        inside = (times >= tt[0] - 1e-9) & (times <= tt[-1] + 1e-9)
        if not np.any(inside):
            continue
        any_data = True
        x = np.interp(times, tt, rows[:, 1]) + utm_origin[0]
        y = np.interp(times, tt, rows[:, 2]) + utm_origin[1]
        heading = np.deg2rad(np.interp(times, tt, rows[:, 3]))
        vx = np.gradient(x, geom.dt)
        vy = np.gradient(y, geom.dt)
        speed = np.hypot(vx, vy)
        length = float(rows[0, 5])
        width = float(rows[0, 4])
        traj = np.column_stack([x, y, heading, speed])
        # outside the recorded span the track does not exist: park it far
        # outside the grid so it rasterizes to nothing
        far = (geom.origin[0] - 1e6, geom.origin[1] - 1e6)
        traj[~inside, 0] = far[0]
        traj[~inside, 1] = far[1]
        traj[~inside, 3] = 0.0
        obstacles.append(ObstacleSpec(
            obstacle_id=int(tid) if str(tid).isdigit() else abs(hash(tid)) % 10 ** 9,
            length=length, width=width, trajectory=traj,
            sigma=length + 1.0, skew_factor=4.0, skew_shift=0.5,
        ))
    grid = rasterize(obstacles, geom)
    grid.empty_window = not any_data
    return grid


# ---------------------------------------------------------------------------
# file formats

def write_grid(grid: OccupancyGrid, path):
    """Binary grid format: 16-byte magic, LE header, float32 x-major data."""
    geom = grid.geometry
    header = struct.pack("<IIIddddd", geom.cx, geom.cy, geom.n_times,
                         geom.origin[0], geom.origin[1], geom.cell_size,
                         geom.dt, 0.0)
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(header)
        fh.write(np.ascontiguousarray(grid.p_occ, dtype="<f4").tobytes())


def read_grid(path) -> OccupancyGrid:
    with open(path, "rb") as fh:
        magic = fh.read(16)
        if magic != GRID_MAGIC:
            raise ValueError("not a DPGRID01 file")
        cx, cy, nt, ox, oy, cell, dt, _ = struct.unpack("<IIIddddd", fh.read(52))
        data = np.frombuffer(fh.read(cx * cy * nt * 4), dtype="<f4")
    geom = GridGeometry(origin=(ox, oy), cell_size=cell, cx=cx, cy=cy,
                        n_steps=nt - 1, dt=dt)
    return OccupancyGrid(geom, data.reshape(cx, cy, nt).astype(np.float64))


def environment_to_json(obstacles, geom: GridGeometry, start, goal, seed=None) -> str:
    return json.dumps({
        "seed": seed,
        "geometry": {
            "origin": list(geom.origin), "cell_size": geom.cell_size,
            "cx": geom.cx, "cy": geom.cy, "n_steps": geom.n_steps, "dt": geom.dt,
        },
        "start": np.asarray(start, dtype=float).tolist(),
        "goal": np.asarray(goal, dtype=float).tolist(),
        "obstacles": [{
            "id": o.obstacle_id, "length": o.length, "width": o.width,
            "sigma": o.sigma, "skew_factor": o.skew_factor,
            "skew_shift": o.skew_shift, "trajectory": o.trajectory.tolist(),
        } for o in obstacles],
    }, indent=1)


def environment_from_json(text: str):
    data = json.loads(text)
    g = data["geometry"]
    geom = GridGeometry(origin=tuple(g["origin"]), cell_size=g["cell_size"],
                        cx=g["cx"], cy=g["cy"], n_steps=g["n_steps"], dt=g["dt"])
    obstacles = [ObstacleSpec(
        obstacle_id=o["id"], length=o["length"], width=o["width"],
        trajectory=np.array(o["trajectory"], dtype=float), sigma=o["sigma"],
        skew_factor=o["skew_factor"], skew_shift=o["skew_shift"],
    ) for o in data["obstacles"]]
    return (obstacles, geom, np.array(data["start"], dtype=float),
            np.array(data["goal"], dtype=float), data.get("seed"))
