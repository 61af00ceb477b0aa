"""Density transport along closed-loop rollouts.

The density advected by a deterministic field f satisfies, along the flow,

    rho(x(t), t) = rho0(x0) * exp(g(x0, t)),
    g(x0, t) = -int_0^t div f(x(tau)) dtau,

so g is integrated jointly with the state in a single RK4 pass. The module
also provides the initial-distribution model, the batch predictor interface
(the exact integrator is the default backend; a file-loadable stub stands in
for a learned surrogate), and a generic transport integrator for arbitrary
test fields.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from ._kernels import closed_rollout
from .dynamics import CarConfig, IntegrationError, TimeGrid
from .policy import PolicyParams, _check_grid


@dataclass
class DensityRollout:
    """Per-sample trajectory with the transported density at each time."""

    states: np.ndarray      # (N+1, 5)
    g_log: np.ndarray       # (N+1,) accumulated log factor, g_log[0] = 0
    rho0: float

    @property
    def densities(self) -> np.ndarray:
        return self.rho0 * np.exp(self.g_log)


@dataclass
class InitialDistribution:
    """Initial state uncertainty model.

    Per component, the marginal law is "gaussian" (scale = sigma), "uniform"
    (scale = half-width) or, for a zero scale, a point mass. kind "gaussian"
    and kind "uniform-box" apply one family to every non-degenerate
    component; kind "product" takes an explicit per-component family list;
    kind "mixture" is a weighted list of sub-distributions.

    Point-mass components are excluded from the density value (the density is
    the product of the continuous-component marginals; downstream ego-grid
    normalization absorbs the convention).
    """

    kind: str
    mean: np.ndarray
    scale: np.ndarray | None = None
    laws: list | None = None
    components: list | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        if self.kind in ("gaussian", "uniform-box", "product"):
            self.scale = np.asarray(self.scale, dtype=float)
            if self.scale.shape != self.mean.shape or np.any(self.scale < 0):
                raise ValueError("scale must be non-negative, one per component")
            if self.kind == "product":
                if self.laws is None or len(self.laws) != self.mean.size:
                    raise ValueError("product kind needs one law per component")
            else:
                fam = "gaussian" if self.kind == "gaussian" else "uniform"
                self.laws = [fam] * self.mean.size
        elif self.kind == "mixture":
            if not self.components:
                raise ValueError("mixture needs components")
            self.weights = np.asarray(self.weights, dtype=float)
            self.weights = self.weights / self.weights.sum()
        else:
            raise ValueError(f"unknown distribution kind: {self.kind}")

    def pdf(self, x) -> float:
        """Density at ``x`` over the continuous components."""
        x = np.asarray(x, dtype=float)
        if self.kind == "mixture":
            return float(sum(w * c.pdf(x) for w, c in zip(self.weights, self.components)))
        d = x - self.mean
        val = 1.0
        for i in range(self.mean.size):
            s = self.scale[i]
            if s == 0.0:
                continue
            if self.laws[i] == "gaussian":
                val *= np.exp(-0.5 * (d[i] / s) ** 2) / (np.sqrt(2 * np.pi) * s)
            else:
                if abs(d[i]) > s:
                    return 0.0
                val *= 1.0 / (2.0 * s)
        return float(val)

    def draw(self, s: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "mixture":
            idx = rng.choice(len(self.components), size=s, p=self.weights)
            out = np.empty((s, self.mean.size))
            for i, ci in enumerate(idx):
                out[i] = self.components[ci].draw(1, rng)[0]
            return out
        out = np.tile(self.mean, (s, 1))
        for i in range(self.mean.size):
            if self.scale[i] == 0.0:
                continue
            if self.laws[i] == "gaussian":
                out[:, i] += self.scale[i] * rng.standard_normal(s)
            else:
                out[:, i] += self.scale[i] * rng.uniform(-1.0, 1.0, s)
        return out


def default_initial_distribution(mean_state, pos_sigma: float = 0.3,
                                 bias_halfwidth: float = 0.1) -> InitialDistribution:
    """Experiment default: Gaussian position uncertainty, point masses in
    heading and speed, uniform heading-measurement bias."""
    mean = np.asarray(mean_state, dtype=float).copy()
    mean[dynamics.BIAS] = 0.0
    return InitialDistribution(
        kind="product",
        mean=mean,
        scale=np.array([pos_sigma, pos_sigma, 0.0, 0.0, bias_halfwidth]),
        laws=["gaussian", "gaussian", "point", "point", "uniform"],
    )


def sample_initial(dist: InitialDistribution, s: int, rng_seed: int):
    """Draw ``s`` initial states with their densities; deterministic per seed."""
    if s < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(rng_seed)
    xs = dist.draw(s, rng)
    rhos = np.array([dist.pdf(x) for x in xs])
    return [(xs[i], float(rhos[i])) for i in range(s)]


def propagate(x0, rho0: float, policy: PolicyParams, grid: TimeGrid,
              car: CarConfig) -> DensityRollout:
    """Transport a single sample and its density along the closed loop."""
    if rho0 < 0:
        raise ValueError("rho0 must be non-negative")
    x0 = np.asarray(x0, dtype=float)
    _check_grid(policy, grid)
    out = closed_rollout(x0[None, :], policy.start_ref[:4], policy.knots,
                         grid.dt, grid.n_steps, grid.substeps, car.as_array())
    states = out["states"][0]
    if not np.all(np.isfinite(states)):
        raise IntegrationError("integration diverged")
    return DensityRollout(states=states, g_log=out["g"][0], rho0=rho0)


def propagate_batch(x0s, rho0s, policy: PolicyParams, grid: TimeGrid,
                    car: CarConfig):
    """Vectorized :func:`propagate` over a sample batch; one kernel call."""
    x0s = np.asarray(x0s, dtype=float)
    _check_grid(policy, grid)
    out = closed_rollout(x0s, policy.start_ref[:4], policy.knots,
                         grid.dt, grid.n_steps, grid.substeps, car.as_array())
    if not np.all(np.isfinite(out["states"])):
        raise IntegrationError("integration diverged")
    return [DensityRollout(states=out["states"][i], g_log=out["g"][i],
                           rho0=float(rho0s[i]))
            for i in range(x0s.shape[0])]


def propagate_field(f, div_f, x0, rho0: float, t_end: float, n_steps: int,
                    substeps: int = 5):
    """Generic transport integrator for an arbitrary autonomous field.

    ``f(x) -> xdot`` and ``div_f(x) -> scalar`` are evaluated with plain RK4
    on (x, g). Returns (states (N+1, dim), g (N+1,)). Intended for analytic
    test systems; the car uses the rollout kernels.
    """
    x = np.asarray(x0, dtype=float).copy()
    dim = x.size
    h = t_end / (n_steps * substeps)
    states = np.empty((n_steps + 1, dim))
    g = np.empty(n_steps + 1)
    gacc = 0.0
    states[0] = x
    g[0] = 0.0
    for k in range(n_steps):
        for _ in range(substeps):
            k1 = np.asarray(f(x));             l1 = -div_f(x)
            k2 = np.asarray(f(x + 0.5 * h * k1)); l2 = -div_f(x + 0.5 * h * k1)
            k3 = np.asarray(f(x + 0.5 * h * k2)); l3 = -div_f(x + 0.5 * h * k2)
            k4 = np.asarray(f(x + h * k3));    l4 = -div_f(x + h * k3)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            gacc += (h / 6.0) * (l1 + 2 * l2 + 2 * l3 + l4)
        states[k + 1] = x
        g[k + 1] = gacc
    return states, g


class DensityPredictor:
    """Interface for batch density prediction along a policy."""

    def predict_batch(self, x0s, rho0s, policy: PolicyParams, grid: TimeGrid):
        raise NotImplementedError


class ExactPredictor(DensityPredictor):
    """Default backend: exact transport integration of the closed loop."""

    def __init__(self, car: CarConfig):
        self.car = car

    def predict_batch(self, x0s, rho0s, policy, grid):
        return propagate_batch(x0s, rho0s, policy, grid, self.car)


class SurrogatePredictor(DensityPredictor):
    """File-loadable stand-in for a learned flow/density surrogate.

    Only the loading contract ships here; no training code. The file is an
    ``.npz`` archive with arrays ``states (S, N+1, 5)`` and ``g (S, N+1)``
    replayed verbatim (enough to exercise the interface end to end).
    """

    def __init__(self, path):
        try:
            data = np.load(path)
            self._states = data["states"]
            self._g = data["g"]
        except Exception as exc:
            raise RuntimeError("predictor unavailable") from exc

    def predict_batch(self, x0s, rho0s, policy, grid):
        if self._states.shape[0] < np.asarray(x0s).shape[0]:
            raise RuntimeError("predictor unavailable")
        return [DensityRollout(states=self._states[i], g_log=self._g[i],
                               rho0=float(rho0s[i]))
                for i in range(np.asarray(x0s).shape[0])]


def predict_batch(predictor: DensityPredictor, x0s, rho0s, policy, grid):
    """Backend-agnostic batch prediction (spec operation)."""
    return predictor.predict_batch(x0s, rho0s, policy, grid)


def rollouts_to_csv(rollouts, grid: TimeGrid, path):
    """Serialize a rollout batch to CSV."""
    times = grid.times()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "k", "t", "p_x", "p_y", "theta", "v",
                         "theta_bias", "rho"])
        for i, r in enumerate(rollouts):
            rho = r.densities
            for k in range(r.states.shape[0]):
                s = r.states[k]
                writer.writerow([i, k, f"{times[k]:.6f}", repr(s[0]), repr(s[1]),
                                 repr(s[2]), repr(s[3]), repr(s[4]), repr(rho[k])])
