"""Derivative-free optimization of electrode shapes.

The merit function penalizes vertical pseudopotential gradients along
the guide path (evaluated at the stations' mean path height, so a flat
path scores zero) and deviations of the vertical trap frequency from a
target.  Minimization uses a self-contained Nelder-Mead simplex with a
full evaluation history, so runs are reproducible and auditable.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import pseudopot as pp
from .electrostatics import Electrode, ElectrodeLayout
from .errors import ConfigError, EguideError

#: Merit value assigned to candidates with invalid geometry or a lost minimum.
PENALTY = 1.0e6

#: Normalization of the gradient term: 1 eV/mm expressed in eV/m.
_EV_PER_MM = 1.0e3


@dataclass(frozen=True)
class ControlPoint:
    """One movable vertex of the parametrized layout.

    ``direction`` is a unit 2-vector in the chip plane; the scalar
    parameter is the displacement along it, limited to ``bounds``.
    ``mirror_partner`` optionally names an (electrode, vertex) pair that
    moves together with this point under x -> -x, keeping the layout
    mirror symmetric.
    """

    electrode: int
    vertex: int
    direction: tuple
    bounds: tuple
    mirror_partner: tuple = None

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if d.shape != (2,) or not np.isfinite(d).all():
            raise ConfigError("control point direction must be a 2-vector")
        n = np.hypot(d[0], d[1])
        if n == 0.0:
            raise ConfigError("control point direction must be nonzero")
        object.__setattr__(self, "direction", (d[0] / n, d[1] / n))
        lo, hi = self.bounds
        if not lo < hi:
            raise ConfigError("control point bounds must satisfy lo < hi")


@dataclass
class LayoutParametrization:
    """Base layout plus control points; apply() maps parameters to a layout."""

    base: ElectrodeLayout
    points: list

    def __post_init__(self):
        for cp in self.points:
            if not 0 <= cp.electrode < len(self.base.electrodes):
                raise ConfigError("control point electrode index out of range")
            poly = self.base.electrodes[cp.electrode].polygon
            if not 0 <= cp.vertex < len(poly):
                raise ConfigError("control point vertex index out of range")

    @property
    def ndim(self):
        return len(self.points)

    def bounds_array(self):
        return np.array([cp.bounds for cp in self.points], dtype=float)

    def apply(self, params, validate=True):
        """Build the displaced layout; raises GeometryError when invalid."""
        params = np.asarray(params, dtype=float)
        if params.shape != (len(self.points),):
            raise ConfigError("parameter vector length mismatch")
        polys = [e.polygon.copy() for e in self.base.electrodes]
        for cp, val in zip(self.points, params):
            dx, dy = cp.direction
            polys[cp.electrode][cp.vertex] += (val * dx, val * dy)
            if cp.mirror_partner is not None:
                ei, vi = cp.mirror_partner
                polys[ei][vi] += (-val * dx, val * dy)
        layout = ElectrodeLayout(
            [Electrode(p, e.role) for p, e in zip(polys, self.base.electrodes)],
            mirror_symmetric_x=self.base.mirror_symmetric_x,
        )
        if validate:
            layout.validate()
        return layout


@dataclass
class MeritSpec:
    """Stations and weights of the scalar merit function."""

    stations: tuple
    target_omega_z: float
    weight_gradient: float = 1.0
    weight_omega: float = 1.0
    seed_guess: tuple = None  # (x, z) seed for the first station

    def __post_init__(self):
        if len(self.stations) < 2:
            raise ConfigError("merit needs at least 2 y stations")
        if self.weight_gradient < 0 or self.weight_omega < 0:
            raise ConfigError("merit weights must be non-negative")
        if self.weight_gradient == 0 and self.weight_omega == 0:
            raise ConfigError("at least one merit weight must be positive")
        if self.target_omega_z <= 0:
            raise ConfigError("target_omega_z must be positive")


def _station_minima(layout, drive, species, spec):
    """Transverse minimum (x >= 0 branch) at every station, by continuation."""
    guess = spec.seed_guess
    if guess is None:
        guess = (0.0, 450e-6)
    out = []
    for y in spec.stations:
        mins = pp.find_transverse_minimum(layout, drive, species, y, guess)
        m = max(mins, key=lambda t: t.x)
        out.append(m)
        guess = (m.x, m.z)
    return out


def merit(layout, drive, species, spec, details=None):
    """Scalar merit M >= 0; PENALTY when a station loses its minimum."""
    try:
        minima = _station_minima(layout, drive, species, spec)
    except EguideError as exc:
        if details is not None:
            details["penalty_reason"] = str(exc)
        return PENALTY
    z_ref = float(np.mean([m.z for m in minima]))
    m_grad = 0.0
    m_omega = 0.0
    for y, m in zip(spec.stations, minima):
        g = pp.pseudo_gradient(layout, drive, species,
                               np.array([m.x, y, z_ref]))
        m_grad += (g[2] / _EV_PER_MM) ** 2
        _, omega_z = pp.trap_frequencies(layout, drive, species, m)
        m_omega += ((omega_z - spec.target_omega_z) / spec.target_omega_z) ** 2
    total = spec.weight_gradient * m_grad + spec.weight_omega * m_omega
    if details is not None:
        details.update(z_ref=z_ref, gradient_term=m_grad, omega_term=m_omega,
                       minima=minima)
    return float(total)


def nelder_mead(f, x0, bounds, spread=0.05, diam_tol=1e-4, max_evals=2000):
    """Minimize f over a box with a standard Nelder-Mead simplex.

    Coefficients: reflection 1, expansion 2, contraction 0.5, shrink 0.5.
    The initial simplex is spread by ``spread`` of each bound range;
    candidates outside the box are clipped.  Stops when the simplex
    diameter falls below ``diam_tol`` of the bound range (per axis) or
    after ``max_evals`` evaluations.  Returns (x_best, f_best, history)
    with history rows (eval_index, params, value, best_so_far).
    """
    x0 = np.asarray(x0, dtype=float)
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    rng_width = hi - lo
    history = []
    state = {"best": np.inf}

    def feval(x):
        x = np.clip(x, lo, hi)
        v = f(x)
        state["best"] = min(state["best"], v)
        history.append((len(history), x.copy(), v, state["best"]))
        return v

    n = len(x0)
    if n == 0:
        v = f(x0)
        return x0, v, [(0, x0.copy(), v, v)]

    simplex = [np.clip(x0, lo, hi)]
    for i in range(n):
        x = simplex[0].copy()
        step = spread * rng_width[i]
        x[i] = x[i] + step if x[i] + step <= hi[i] else x[i] - step
        simplex.append(x)
    simplex = np.array(simplex)
    values = np.array([feval(x) for x in simplex])

    while len(history) < max_evals:
        order = np.argsort(values, kind="stable")
        simplex, values = simplex[order], values[order]
        diam = np.abs(simplex - simplex[0]).max(axis=0)
        if np.all(diam < diam_tol * rng_width):
            break
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + (centroid - worst)
        vr = feval(xr)
        if vr < values[0]:
            xe = centroid + 2.0 * (centroid - worst)
            ve = feval(xe)
            if ve < vr:
                simplex[-1], values[-1] = xe, ve
            else:
                simplex[-1], values[-1] = xr, vr
        elif vr < values[-2]:
            simplex[-1], values[-1] = xr, vr
        else:
            if vr < values[-1]:
                xc = centroid + 0.5 * (xr - centroid)
            else:
                xc = centroid + 0.5 * (worst - centroid)
            vc = feval(xc)
            if vc < min(vr, values[-1]):
                simplex[-1], values[-1] = xc, vc
            else:
                # shrink toward the best vertex
                for i in range(1, n + 1):
                    simplex[i] = simplex[0] + 0.5 * (simplex[i] - simplex[0])
                    values[i] = feval(simplex[i])
                    if len(history) >= max_evals:
                        break

    k = int(np.argmin(values))
    return simplex[k], float(values[k]), history


@dataclass
class OptimizationResult:
    best_params: np.ndarray
    best_merit: float
    best_layout: ElectrodeLayout
    history: list = field(repr=False)

    def history_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            ndim = len(self.best_params)
            w.writerow(["eval", "merit", "best_so_far"]
                       + [f"p{i}" for i in range(ndim)])
            for i, x, v, best in self.history:
                w.writerow([i, repr(v), repr(best)] + [repr(float(c)) for c in x])


def optimize_layout(parametrization, drive, species, spec, x0=None,
                    spread=0.05, diam_tol=1e-4, max_evals=2000):
    """Nelder-Mead search over the parametrization against the merit.

    Invalid candidate geometries and lost minima receive PENALTY and the
    search continues.  Deterministic for fixed inputs.
    """
    if x0 is None:
        x0 = np.zeros(parametrization.ndim)

    def objective(params):
        try:
            layout = parametrization.apply(params)
        except EguideError:
            return PENALTY
        return merit(layout, drive, species, spec)

    if parametrization.ndim == 0:
        v = objective(np.zeros(0))
        return OptimizationResult(np.zeros(0), v, parametrization.base,
                                  [(0, np.zeros(0), v, v)])

    x, v, history = nelder_mead(objective, x0, parametrization.bounds_array(),
                                spread=spread, diam_tol=diam_tol,
                                max_evals=max_evals)
    return OptimizationResult(x, v, parametrization.apply(x), history)
