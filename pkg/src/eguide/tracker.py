"""Classical electron trajectories in the oscillating chip field.

Trajectories integrate M r'' = Q E(r, t) with an adaptive Dormand-Prince
5(4) stepper (numba-compiled).  The field comes either from the exact
solid-angle electrostatics (direct mode) or from a trilinear-interpolated
cached grid of the unit-voltage field (fast mode for ensembles).  Past
the chip end the flight is field-free and electrons drift ballistically
to the detector plane.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from . import constants as cn
from . import pseudopot as pp
from .electrostatics import _grad_point, _phi_point
from .errors import ConfigError, DomainError, EguideError
from .layouts import CHIP_LENGTH, DETECTOR_PLANE, GUIDE_HEIGHT

# Domain box (loss boundaries).
X_MAX = 6.0e-3
Z_MAX = 3.0e-3
SOURCE_PLANE = -3.0e-3     # default release plane, upstream of the chip edge

# Trajectory status codes.
REACHED_END = 0       # crossed the chip-end plane, still in the box
LOST_SUBSTRATE = 1    # z <= 0
LOST_BOX = 2          # left the lateral/vertical domain box
TIMED_OUT = 3
STEP_UNDERFLOW = 4

_STATUS_NAMES = {
    REACHED_END: "reached_end",
    LOST_SUBSTRATE: "lost_substrate",
    LOST_BOX: "lost_box",
    TIMED_OUT: "timed_out",
    STEP_UNDERFLOW: "step_underflow",
}


# ---------------------------------------------------------------------------
# cached field grid
# ---------------------------------------------------------------------------

@dataclass
class FieldGrid:
    """Unit-voltage E field sampled on a regular grid, trilinear lookup.

    Arrays are indexed [ix, iy, iz] and stored float32; ``origin`` is the
    (x, y, z) of node (0, 0, 0) and ``spacing`` the uniform node pitch.
    Lookups outside the grid clamp to the boundary values.
    """

    origin: tuple
    spacing: float
    ex: np.ndarray
    ey: np.ndarray
    ez: np.ndarray

    @classmethod
    def build(cls, layout, x_extent=(-X_MAX, X_MAX),
              y_extent=(SOURCE_PLANE - 2.0e-4, CHIP_LENGTH + 2.0e-4),
              z_extent=(1.0e-5, Z_MAX), spacing=50.0e-6, chunk=2_000_000):
        """Evaluate the unit field of ``layout`` on the grid (one-time cost)."""
        xs = np.arange(x_extent[0], x_extent[1] + spacing / 2, spacing)
        ys = np.arange(y_extent[0], y_extent[1] + spacing / 2, spacing)
        zs = np.arange(z_extent[0], z_extent[1] + spacing / 2, spacing)
        pts = np.empty((len(xs) * len(ys) * len(zs), 3))
        xx, yy, zz = np.meshgrid(xs, ys, zs, indexing="ij")
        pts[:, 0], pts[:, 1], pts[:, 2] = xx.ravel(), yy.ravel(), zz.ravel()
        verts, offsets = layout.packed()
        shape = (len(xs), len(ys), len(zs))
        e = np.empty((pts.shape[0], 3), dtype=np.float32)
        from .electrostatics import _grad_many
        for k in range(0, pts.shape[0], chunk):
            e[k:k + chunk] = -_grad_many(verts, offsets, pts[k:k + chunk])
        e = e.reshape(shape + (3,))
        return cls((xs[0], ys[0], zs[0]), float(spacing),
                   np.ascontiguousarray(e[..., 0]),
                   np.ascontiguousarray(e[..., 1]),
                   np.ascontiguousarray(e[..., 2]))

    def save(self, path):
        np.savez_compressed(path, origin=np.array(self.origin),
                            spacing=self.spacing, ex=self.ex, ey=self.ey,
                            ez=self.ez)

    @classmethod
    def load(cls, path):
        d = np.load(path)
        return cls(tuple(d["origin"]), float(d["spacing"]),
                   d["ex"], d["ey"], d["ez"])

    def lookup(self, point):
        """Trilinear unit-field at a point (same code path as the stepper)."""
        x, y, z = point
        return np.array(_trilinear(self.ex, self.ey, self.ez,
                                   self.origin[0], self.origin[1],
                                   self.origin[2], 1.0 / self.spacing,
                                   x, y, z))

    def error_sample(self, layout, n=200, seed=0, margin=3):
        """Max relative interpolation error vs direct evaluation.

        Sampled at ``n`` random interior points at least ``margin`` cells
        from the grid boundary; relative to the local direct |E|.
        """
        rng = np.random.default_rng(seed)
        nx, ny, nz = self.ex.shape
        h = self.spacing
        lo = np.array(self.origin) + margin * h
        hi = (np.array(self.origin)
              + np.array([nx - 1 - margin, ny - 1 - margin, nz - 1 - margin]) * h)
        pts = rng.uniform(lo, hi, size=(n, 3))
        from .electrostatics import gradient_many
        exact = -gradient_many(layout, pts)
        worst = 0.0
        for p, ee in zip(pts, exact):
            approx = self.lookup(p)
            err = np.linalg.norm(approx - ee) / max(np.linalg.norm(ee), 1e-30)
            worst = max(worst, err)
        return worst


@njit(cache=True, inline="always")
def _trilinear(ex, ey, ez, x0, y0, z0, inv_h, x, y, z):
    fx = (x - x0) * inv_h
    fy = (y - y0) * inv_h
    fz = (z - z0) * inv_h
    nx, ny, nz = ex.shape
    if fx < 0.0:
        fx = 0.0
    elif fx > nx - 1.000001:
        fx = nx - 1.000001
    if fy < 0.0:
        fy = 0.0
    elif fy > ny - 1.000001:
        fy = ny - 1.000001
    if fz < 0.0:
        fz = 0.0
    elif fz > nz - 1.000001:
        fz = nz - 1.000001
    i, j, k = int(fx), int(fy), int(fz)
    ax, ay, az = fx - i, fy - j, fz - k
    bx, by, bz = 1.0 - ax, 1.0 - ay, 1.0 - az
    w000 = bx * by * bz
    w001 = bx * by * az
    w010 = bx * ay * bz
    w011 = bx * ay * az
    w100 = ax * by * bz
    w101 = ax * by * az
    w110 = ax * ay * bz
    w111 = ax * ay * az
    gx = (w000 * ex[i, j, k] + w001 * ex[i, j, k + 1]
          + w010 * ex[i, j + 1, k] + w011 * ex[i, j + 1, k + 1]
          + w100 * ex[i + 1, j, k] + w101 * ex[i + 1, j, k + 1]
          + w110 * ex[i + 1, j + 1, k] + w111 * ex[i + 1, j + 1, k + 1])
    gy = (w000 * ey[i, j, k] + w001 * ey[i, j, k + 1]
          + w010 * ey[i, j + 1, k] + w011 * ey[i, j + 1, k + 1]
          + w100 * ey[i + 1, j, k] + w101 * ey[i + 1, j, k + 1]
          + w110 * ey[i + 1, j + 1, k] + w111 * ey[i + 1, j + 1, k + 1])
    gz = (w000 * ez[i, j, k] + w001 * ez[i, j, k + 1]
          + w010 * ez[i, j + 1, k] + w011 * ez[i, j + 1, k + 1]
          + w100 * ez[i + 1, j, k] + w101 * ez[i + 1, j, k + 1]
          + w110 * ez[i + 1, j + 1, k] + w111 * ez[i + 1, j + 1, k + 1])
    return gx, gy, gz


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4) stepper
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def _accel(use_grid, ex, ey, ez, gx0, gy0, gz0, inv_h, verts, offsets,
           qm_v0, omega, phase, static, t, x, y, z):
    if use_grid:
        fx, fy, fz = _trilinear(ex, ey, ez, gx0, gy0, gz0, inv_h, x, y, z)
    else:
        px, py, pz = _grad_point(verts, offsets, x, y, z)
        fx, fy, fz = -px, -py, -pz
    if static:
        k = qm_v0 * math.cos(phase)
    else:
        k = qm_v0 * math.cos(omega * t + phase)
    return k * fx, k * fy, k * fz


@njit(cache=True)
def _integrate(state0, t0, use_grid, ex, ey, ez, gx0, gy0, gz0, inv_h,
               verts, offsets, qm_v0, omega, phase, static,
               y_end, y_eval, y_lo, t_max, h_max, rtol, atol_x, atol_v,
               sample_dt, samples, eval_state, exit_state):
    """DP5(4) with event interpolation.  Returns (status, t_exit, n_samples).

    ``samples`` is (max_n, 7) storage for (t, x, y, z, vx, vy, vz) at the
    fixed output stride; ``eval_state`` (7,) records the first crossing
    of the y_eval plane; ``exit_state`` (7,) the termination state.
    """
    # Butcher tableau (Dormand-Prince)
    c2, c3, c4, c5 = 0.2, 0.3, 0.8, 8.0 / 9.0
    a21 = 0.2
    a31, a32 = 3.0 / 40.0, 9.0 / 40.0
    a41, a42, a43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
    a51, a52, a53, a54 = (19372.0 / 6561.0, -25360.0 / 2187.0,
                          64448.0 / 6561.0, -212.0 / 729.0)
    a61, a62, a63, a64, a65 = (9017.0 / 3168.0, -355.0 / 33.0,
                               46732.0 / 5247.0, 49.0 / 176.0,
                               -5103.0 / 18656.0)
    b1, b3, b4, b5, b6 = (35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0,
                          -2187.0 / 6784.0, 11.0 / 84.0)
    e1, e3, e4, e5, e6, e7 = (71.0 / 57600.0, -71.0 / 16695.0,
                              71.0 / 1920.0, -17253.0 / 339200.0,
                              22.0 / 525.0, -1.0 / 40.0)

    y = state0.copy()
    t = t0
    h = h_max * 0.1
    n_samp = 0
    next_sample = t0
    max_samp = samples.shape[0]
    eval_done = False
    eval_state[0] = np.nan

    ax, ay, az = _accel(use_grid, ex, ey, ez, gx0, gy0, gz0, inv_h,
                        verts, offsets, qm_v0, omega, phase, static,
                        t, y[0], y[1], y[2])
    k1 = np.array([y[3], y[4], y[5], ax, ay, az])

    status = TIMED_OUT
    while True:
        if t >= t_max:
            status = TIMED_OUT
            for m in range(3):
                exit_state[1 + m] = y[m]
                exit_state[4 + m] = y[3 + m]
            exit_state[0] = t
            return status, t, n_samp
        if h > h_max:
            h = h_max
        if t + h > t_max:
            h = t_max - t
        if h < 1e-18:
            status = STEP_UNDERFLOW
            for m in range(3):
                exit_state[1 + m] = y[m]
                exit_state[4 + m] = y[3 + m]
            exit_state[0] = t
            return status, t, n_samp

        # stages
        y2 = y + h * a21 * k1
        ax, ay, az = _accel(use_grid, ex, ey, ez, gx0, gy0, gz0, inv_h,
                            verts, offsets, qm_v0, omega, phase, static,
                            t + c2 * h, y2[0], y2[1], y2[2])
        k2 = np.array([y2[3], y2[4], y2[5], ax, ay, az])
        y3 = y + h * (a31 * k1 + a32 * k2)
        ax, ay, az = _accel(use_grid, ex, ey, ez, gx0, gy0, gz0, inv_h,
                            verts, offsets, qm_v0, omega, phase, static,
                            t + c3 * h, y3[0], y3[1], y3[2])
        k3 = np.array([y3[3], y3[4], y3[5], ax, ay, az])
        y4 = y + h * (a41 * k1 + a42 * k2 + a43 * k3)
        ax, ay, az = _accel(use_grid, ex, ey, ez, gx0, gy0, gz0, inv_h,
                            verts, offsets, qm_v0, omega, phase, static,
                            t + c4 * h, y4[0], y4[1], y4[2])
        k4 = np.array([y4[3], y4[4], y4[5], ax, ay, az])
        y5 = y + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4)
        ax, ay, az = _accel(use_grid, ex, ey, ez, gx0, gy0, gz0, inv_h,
                            verts, offsets, qm_v0, omega, phase, static,
                            t + c5 * h, y5[0], y5[1], y5[2])
        k5 = np.array([y5[3], y5[4], y5[5], ax, ay, az])
        y6 = y + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5)
        ax, ay, az = _accel(use_grid, ex, ey, ez, gx0, gy0, gz0, inv_h,
                            verts, offsets, qm_v0, omega, phase, static,
                            t + h, y6[0], y6[1], y6[2])
        k6 = np.array([y6[3], y6[4], y6[5], ax, ay, az])
        ynew = y + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6)
        ax, ay, az = _accel(use_grid, ex, ey, ez, gx0, gy0, gz0, inv_h,
                            verts, offsets, qm_v0, omega, phase, static,
                            t + h, ynew[0], ynew[1], ynew[2])
        k7 = np.array([ynew[3], ynew[4], ynew[5], ax, ay, az])

        # embedded error estimate
        err = 0.0
        for m in range(6):
            ee = h * (e1 * k1[m] + e3 * k3[m] + e4 * k4[m] + e5 * k5[m]
                      + e6 * k6[m] + e7 * k7[m])
            atol = atol_x if m < 3 else atol_v
            sc = atol + rtol * max(abs(y[m]), abs(ynew[m]))
            r = ee / sc
            err += r * r
        err = math.sqrt(err / 6.0)

        if err <= 1.0:
            # accepted: check events inside [t, t+h] by linear interpolation
            theta = 2.0
            status_hit = -1
            if ynew[1] >= y_end and y[1] < y_end:
                th = (y_end - y[1]) / (ynew[1] - y[1])
                if th < theta:
                    theta, status_hit = th, REACHED_END
            if ynew[2] <= 0.0 and y[2] > 0.0:
                th = (0.0 - y[2]) / (ynew[2] - y[2])
                if th < theta:
                    theta, status_hit = th, LOST_SUBSTRATE
            if ynew[2] >= Z_MAX and y[2] < Z_MAX:
                th = (Z_MAX - y[2]) / (ynew[2] - y[2])
                if th < theta:
                    theta, status_hit = th, LOST_BOX
            if abs(ynew[0]) >= X_MAX and abs(y[0]) < X_MAX:
                xb = X_MAX if ynew[0] > 0.0 else -X_MAX
                th = (xb - y[0]) / (ynew[0] - y[0])
                if th < theta:
                    theta, status_hit = th, LOST_BOX
            if ynew[1] < y_lo and y[1] >= y_lo:
                th = (y_lo - y[1]) / (ynew[1] - y[1])
                if th < theta:
                    theta, status_hit = th, LOST_BOX

            t_stop = t + h if status_hit < 0 else t + theta * h
            y_stop = ynew if status_hit < 0 else y + theta * (ynew - y)

            # y_eval plane crossing (recorded, not terminating)
            if (not eval_done) and y[1] < y_eval <= y_stop[1]:
                th = (y_eval - y[1]) / (y_stop[1] - y[1])
                ye = y + th * (y_stop - y)
                eval_state[0] = t + th * (t_stop - t)
                for m in range(6):
                    eval_state[1 + m] = ye[m]
                eval_done = True

            # output samples: fixed stride (interpolated) or, when
            # sample_dt <= 0, the exact accepted step endpoints
            if sample_dt > 0.0:
                while next_sample <= t_stop and n_samp < max_samp:
                    th = 0.0 if t_stop == t else (next_sample - t) / (t_stop - t)
                    if th > 1.0:
                        th = 1.0
                    ys = y + th * (y_stop - y)
                    samples[n_samp, 0] = next_sample
                    for m in range(6):
                        samples[n_samp, 1 + m] = ys[m]
                    n_samp += 1
                    next_sample += sample_dt
            elif n_samp < max_samp and status_hit < 0:
                samples[n_samp, 0] = t_stop
                for m in range(6):
                    samples[n_samp, 1 + m] = y_stop[m]
                n_samp += 1

            if status_hit >= 0:
                exit_state[0] = t_stop
                for m in range(6):
                    exit_state[1 + m] = y_stop[m]
                return status_hit, t_stop, n_samp

            t = t_stop
            y = ynew
            k1 = k7  # FSAL
            fac = 0.9 * err ** -0.2 if err > 1e-12 else 5.0
            h *= min(5.0, max(0.2, fac))
        else:
            h *= max(0.2, 0.9 * err ** -0.2)


@njit(cache=True, parallel=True)
def _integrate_batch(states0, phases, use_grid, ex, ey, ez, gx0, gy0, gz0,
                     inv_h, verts, offsets, qm_v0, omega, static,
                     y_end, y_eval, y_lo, t_max, h_max, rtol, atol_x, atol_v,
                     sample_dt, all_samples, eval_states, exit_states,
                     statuses, n_samples):
    for i in prange(states0.shape[0]):
        st, t_exit, ns = _integrate(
            states0[i], 0.0, use_grid, ex, ey, ez, gx0, gy0, gz0, inv_h,
            verts, offsets, qm_v0, omega, phases[i], static,
            y_end, y_eval, y_lo, t_max, h_max, rtol, atol_x, atol_v,
            sample_dt, all_samples[i], eval_states[i], exit_states[i])
        statuses[i] = st
        n_samples[i] = ns


# ---------------------------------------------------------------------------
# sources, trajectories, detector images
# ---------------------------------------------------------------------------

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@dataclass(frozen=True)
class SourceSpec:
    """Electron source upstream of the chip entrance.

    Rays are placed on a sunflower (Fibonacci) lattice over the disk --
    deterministic and uniform -- and each ray is released at
    ``phases`` equally spaced instants of the drive period.  Velocity
    directions are drawn uniformly from a cone of ``half_angle`` around
    +y using the seeded generator (``cone=False`` gives a
    zero-divergence beam).

    The default release plane sits 3 mm before the chip edge so that
    electrons enter the guide through the decaying fringe field rather
    than being dropped instantaneously into the full RF field; a sudden
    start inside the guide imprints a large phase-dependent micromotion
    kick that is not present for a beam flying in from a distant gun.
    """

    center: tuple = (0.0, SOURCE_PLANE, GUIDE_HEIGHT)
    diameter: float = 100.0e-6
    rays: int = 100
    phases: int = 10
    energy_ev: float = 1.5
    half_angle: float = 7.0e-3
    seed: int = 1
    cone: bool = True

    def __post_init__(self):
        if self.diameter < 0 or self.rays < 1 or self.phases < 1:
            raise ConfigError("invalid source: need diameter >= 0, "
                              "rays >= 1, phases >= 1")
        if self.energy_ev <= 0:
            raise ConfigError("source energy must be positive")

    def displaced(self, dx):
        c = (self.center[0] + dx, self.center[1], self.center[2])
        return SourceSpec(c, self.diameter, self.rays, self.phases,
                          self.energy_ev, self.half_angle, self.seed,
                          self.cone)

    def mirrored(self):
        c = (-self.center[0], self.center[1], self.center[2])
        return SourceSpec(c, self.diameter, self.rays, self.phases,
                          self.energy_ev, self.half_angle, self.seed,
                          self.cone)

    def ray_states(self, species, mirror=False):
        """(N, 6) initial states and (N,) release phase offsets [rad]."""
        speed = cn.kinetic_speed(self.energy_ev, species.mass)
        rng = np.random.default_rng(self.seed)
        pos = np.empty((self.rays, 3))
        vel = np.empty((self.rays, 3))
        r_half = self.diameter / 2.0
        for i in range(self.rays):
            r = r_half * math.sqrt((i + 0.5) / self.rays)
            th = i * _GOLDEN_ANGLE
            pos[i] = (self.center[0] + r * math.cos(th), self.center[1],
                      self.center[2] + r * math.sin(th))
            if self.cone and self.half_angle > 0:
                mu = rng.uniform(math.cos(self.half_angle), 1.0)
                az = rng.uniform(0.0, 2.0 * math.pi)
                s = math.sqrt(1.0 - mu * mu)
                vel[i] = (speed * s * math.cos(az), speed * mu,
                          speed * s * math.sin(az))
            else:
                vel[i] = (0.0, speed, 0.0)
        if mirror:
            pos[:, 0] *= -1.0
            vel[:, 0] *= -1.0
        states = np.empty((self.rays * self.phases, 6))
        phases = np.empty(self.rays * self.phases)
        for k in range(self.phases):
            ph = 2.0 * math.pi * k / self.phases
            sl = slice(k * self.rays, (k + 1) * self.rays)
            states[sl, :3] = pos
            states[sl, 3:] = vel
            phases[sl] = ph
        return states, phases


@dataclass
class Trajectory:
    initial_position: np.ndarray
    initial_velocity: np.ndarray
    release_phase: float
    times: np.ndarray
    states: np.ndarray          # (n, 6) positions and velocities
    status: str
    outcome: str                # guided_left | guided_right | lost
    exit_record: np.ndarray     # (7,) t, position, velocity at termination
    detector_hit: np.ndarray = None   # (x, z) at the detector plane
    eval_record: np.ndarray = None    # (7,) state at the y_eval plane
    energy: np.ndarray = None         # per-sample total energy [J]


@dataclass
class DetectorImage:
    """2D histogram over (x, z) at the detector plane."""

    plane_y: float
    x_edges: np.ndarray
    z_edges: np.ndarray
    counts: np.ndarray
    totals: dict
    counts_guided: np.ndarray = None

    @property
    def n_detected(self):
        return int(self.counts.sum())

    @property
    def guided_fraction(self):
        det = self.n_detected
        if det == 0:
            return 0.0
        return (self.totals["guided_left"] + self.totals["guided_right"]) / det

    def x_marginal(self):
        centers = 0.5 * (self.x_edges[:-1] + self.x_edges[1:])
        return centers, self.counts.sum(axis=1)

    def spot_stats(self):
        """Per-side (mean_x, fwhm) of guided counts; None for empty sides.

        The FWHM comes from the guided-count marginal histogram on each
        side of x = 0 (the loss band is excluded so that the spot
        centroids are not pulled toward the axis).
        """
        out = []
        centers = 0.5 * (self.x_edges[:-1] + self.x_edges[1:])
        src = (self.counts_guided if self.counts_guided is not None
               and self.counts_guided.sum() > 0 else self.counts)
        marg = src.sum(axis=1)
        for sign in (-1.0, 1.0):
            sel = (centers * sign) > 0
            m = marg[sel]
            c = centers[sel]
            if m.sum() == 0:
                out.append(None)
                continue
            mean = float((c * m).sum() / m.sum())
            peak = m.max()
            above = c[m >= peak / 2.0]
            out.append((mean, float(above.max() - above.min())
                        + float(self.x_edges[1] - self.x_edges[0])))
        return out

    def spot_separation(self):
        left, right = self.spot_stats()
        if left is None or right is None:
            return 0.0
        return right[0] - left[0]

    def is_split(self, min_fraction=0.2):
        """True when both half-planes hold >= min_fraction of the counts
        and the central band (|x| < 0.4 mm) is depleted relative to the
        spot peaks."""
        centers, marg = self.x_marginal()
        total = marg.sum()
        if total == 0:
            return False
        lf = marg[centers < 0].sum() / total
        rf = marg[centers > 0].sum() / total
        if lf < min_fraction or rf < min_fraction:
            return False
        central = marg[np.abs(centers) < 4.0e-4].max(initial=0.0)
        peak = marg.max()
        return central < 0.5 * peak


@dataclass
class EnsembleResult:
    trajectories: list
    image: DetectorImage
    grid: FieldGrid = field(repr=False, default=None)

    @property
    def guided_fraction(self):
        return self.image.guided_fraction

    def outcome_counts(self):
        out = {"guided_left": 0, "guided_right": 0, "lost": 0}
        for tr in self.trajectories:
            out[tr.outcome] += 1
        return out

    def phase_guided_fractions(self):
        """Guided fraction per release phase (phase-robustness check)."""
        groups = {}
        for tr in self.trajectories:
            groups.setdefault(tr.release_phase, [0, 0])
            g = tr.outcome in ("guided_left", "guided_right")
            groups[tr.release_phase][0] += int(g)
            groups[tr.release_phase][1] += 1
        return {ph: g / n for ph, (g, n) in sorted(groups.items())}


_EMPTY_GRID = np.zeros((2, 2, 2), dtype=np.float32)
_EMPTY_VERTS = np.zeros((0, 2))
_EMPTY_OFFSETS = np.zeros(1, dtype=np.int64)


def integrate_trajectory(layout, drive, species, position, velocity,
                         release_phase=0.0, grid=None, y_end=CHIP_LENGTH,
                         y_eval=None, t_max=None, rtol=1e-9, atol_x=1e-12,
                         sample_dt=None, static=False, energy=False):
    """Integrate a single trajectory; direct field unless ``grid`` given.

    Returns a Trajectory (without port classification; outcome is left
    as 'lost' unless it reached the chip end, in which case it is marked
    by detector x sign after the field-free drift).
    """
    position = np.asarray(position, dtype=float)
    velocity = np.asarray(velocity, dtype=float)
    if position[2] <= 0:
        raise DomainError("initial position must have z > 0")
    period = drive.period
    h_max = period / 20.0
    if t_max is None:
        vy = max(abs(velocity[1]), 1.0)
        t_max = 4.0 * (y_end - position[1]) / vy if velocity[1] > 0 else 1e-6
    if sample_dt is None:
        sample_dt = period / 16.0
    state0 = np.concatenate([position, velocity])
    max_samp = int(t_max / sample_dt) + 2 if sample_dt > 0 else 400000
    samples = np.empty((max_samp, 7))
    eval_state = np.empty(7)
    exit_state = np.empty(7)
    qm_v0 = species.charge * drive.v0 / species.mass
    atol_v = atol_x * drive.omega

    if grid is not None:
        args = (True, grid.ex, grid.ey, grid.ez, grid.origin[0],
                grid.origin[1], grid.origin[2], 1.0 / grid.spacing,
                _EMPTY_VERTS, _EMPTY_OFFSETS)
    else:
        verts, offsets = layout.packed()
        args = (False, _EMPTY_GRID, _EMPTY_GRID, _EMPTY_GRID, 0.0, 0.0, 0.0,
                1.0, verts, offsets)
    y_lo = min(position[1] - 1.0e-3, -1.0e-3)
    status, t_exit, n_samp = _integrate(
        state0, 0.0, *args, qm_v0, drive.omega, release_phase, static,
        y_end, y_eval if y_eval is not None else y_end, y_lo, t_max, h_max,
        rtol, atol_x, atol_v, sample_dt, samples, eval_state, exit_state)

    samples = samples[:n_samp]
    tr = Trajectory(position, velocity, release_phase, samples[:, 0],
                    samples[:, 1:], _STATUS_NAMES[status], "lost",
                    exit_state.copy(),
                    eval_record=None if np.isnan(eval_state[0])
                    else eval_state.copy())
    if status == REACHED_END:
        tr.outcome = "guided_right" if exit_state[1] >= 0 else "guided_left"
    if energy:
        verts, offsets = layout.packed()
        e = np.empty(n_samp)
        for i in range(n_samp):
            t, x, y, z = samples[i, 0], samples[i, 1], samples[i, 2], samples[i, 3]
            phi = _phi_point(verts, offsets, x, y, z)
            cosf = (math.cos(release_phase) if static
                    else math.cos(drive.omega * t + release_phase))
            v2 = samples[i, 4]**2 + samples[i, 5]**2 + samples[i, 6]**2
            e[i] = 0.5 * species.mass * v2 + species.charge * drive.v0 * cosf * phi
        tr.energy = e
    return tr


def _exit_wells(layout, drive, species, y_eval, dy=4.0e-4):
    """Well centers, lateral path slope and escape depth at ``y_eval``.

    Returns (list of (x, z, psi_ev, dx/dy), depth_ev); empty list when
    the drive is off or no bound well exists.  The slope is the local
    rate at which the well center moves in x per unit y, needed to
    measure transverse energy in the frame that rides with the well.
    """
    if drive.v0 == 0.0:
        return [], 0.0
    try:
        mins = pp.find_transverse_minimum(layout, drive, species, y_eval,
                                          (0.0, GUIDE_HEIGHT))
        # fold onto |x|: the layout is mirror symmetric, so the optimizer
        # may report either or both wells depending on round-off
        m0 = max(mins, key=lambda m: abs(m.x))
        back = pp.find_transverse_minimum(layout, drive, species,
                                          y_eval - dy, (abs(m0.x), m0.z))
    except EguideError:
        return [], 0.0
    x_now = abs(m0.x)
    x_back = max(abs(m.x) for m in back)
    slope = (x_now - x_back) / dy
    if x_now > 1e-6:
        wells = [(x_now, m0.z, m0.psi_ev, slope),
                 (-x_now, m0.z, m0.psi_ev, -slope)]
    else:
        wells = [(0.0, m0.z, m0.psi_ev, 0.0)]
    depth = pp.trap_depth(layout, drive, species, m0)
    return wells, depth


def run_ensemble(layout, drive, species, source, detector_plane=DETECTOR_PLANE,
                 chip_end=CHIP_LENGTH, y_eval=None, grid=None,
                 build_grid=True, rtol=1e-9, atol_x=1e-12, sample_dt=None,
                 t_max=None, bin_size=1.0e-4, mirror=False,
                 well_radius=3.5e-4):
    """Track a full source ensemble and synthesize the detector image.

    Electrons keep their label 'guided' only if, at the ``y_eval`` plane
    near the chip end, they sit close to a well center and their
    transverse energy -- measured in the frame riding along the well
    path -- stays below the local escape depth (two-spot criterion).
    Everything else that still moves forward is drifted ballistically to
    the detector plane and forms the loss band of the image; this
    includes electrons ejected vertically in the splitting region, which
    leave the simulation box through the top but keep flying downstream
    in the weak far field.
    """
    if y_eval is None:
        # classify a few mm before the chip end: the edge fringe field
        # degrades the pseudopotential wells over the last ~2 mm, while
        # at -3 mm the double well is still clean and fully separated
        y_eval = chip_end - 3.0e-3
    y_src = source.center[1]
    if grid is None and build_grid:
        grid = FieldGrid.build(
            layout, y_extent=(min(0.0, y_src) - 2.0e-4, chip_end + 2.0e-4))
    states0, phases = source.ray_states(species, mirror=mirror)
    n = states0.shape[0]
    period = drive.period
    if sample_dt is None:
        sample_dt = period / 4.0
    speed = cn.kinetic_speed(source.energy_ev, species.mass)
    if t_max is None:
        t_max = 4.0 * (chip_end - y_src) / speed
    max_samp = int(t_max / sample_dt) + 2
    all_samples = np.empty((n, max_samp, 7))
    eval_states = np.empty((n, 7))
    exit_states = np.empty((n, 7))
    statuses = np.empty(n, dtype=np.int64)
    n_samples = np.empty(n, dtype=np.int64)
    qm_v0 = species.charge * drive.v0 / species.mass
    atol_v = atol_x * drive.omega

    if grid is not None:
        gargs = (True, grid.ex, grid.ey, grid.ez, grid.origin[0],
                 grid.origin[1], grid.origin[2], 1.0 / grid.spacing,
                 _EMPTY_VERTS, _EMPTY_OFFSETS)
    else:
        verts, offsets = layout.packed()
        gargs = (False, _EMPTY_GRID, _EMPTY_GRID, _EMPTY_GRID, 0.0, 0.0, 0.0,
                 1.0, verts, offsets)
    y_lo = min(y_src - 1.0e-3, -1.0e-3)
    _integrate_batch(states0, phases, *gargs, qm_v0, drive.omega, False,
                     chip_end, y_eval, y_lo, t_max, period / 20.0, rtol,
                     atol_x, atol_v, sample_dt, all_samples, eval_states,
                     exit_states, statuses, n_samples)

    wells, depth_ev = _exit_wells(layout, drive, species, y_eval)
    coeff = pp._coeff_ev(drive, species)

    trajectories = []
    hits = []          # (x_det, z_det, outcome)
    for i in range(n):
        ns = n_samples[i]
        samp = all_samples[i, :ns]
        status = int(statuses[i])
        exit_rec = exit_states[i].copy()
        eval_rec = None if np.isnan(eval_states[i, 0]) else eval_states[i].copy()
        outcome = "lost"
        det_hit = None
        t0, x, yy, z, vx, vy, vz = exit_rec
        if (status == REACHED_END or status == LOST_BOX) and vy > 0.0:
            # ballistic drift to the detector plane; box escapees fly on
            # through the weak far field and land in the loss band.  Past
            # the chip edge there is no substrate below, so the imaging
            # plane extends to z < 0 as well.
            dt = (detector_plane - yy) / vy
            x_det = x + vx * dt
            z_det = z + vz * dt
            det_hit = np.array([x_det, z_det])
        if status == REACHED_END and det_hit is not None:
            bound = False
            if eval_rec is not None and wells and depth_ev > 0:
                # RF-average position and velocity over one drive period
                # around the eval-plane crossing: the instantaneous
                # velocity is dominated by micromotion (kinetic energy of
                # order the local pseudopotential), so the bound test must
                # use secular quantities.
                t_ev = eval_rec[0]
                win = (samp[:, 0] >= t_ev - period / 2.0) & \
                      (samp[:, 0] <= t_ev + period / 2.0)
                if np.count_nonzero(win) >= 3:
                    sec = samp[win].mean(axis=0)
                else:
                    sec = eval_rec
                ex_, ez_ = sec[1], sec[3]
                evx, evy, evz = sec[4], sec[5], sec[6]
                best = None
                for (wx, wz, wpsi, wslope) in wells:
                    d2 = (ex_ - wx)**2 + (ez_ - wz)**2
                    if best is None or d2 < best[0]:
                        best = (d2, wx, wz, wpsi, wslope)
                d2, wx, wz, wpsi, wslope = best
                near = abs(ex_ - wx) < well_radius and abs(ez_ - wz) < well_radius
                if near:
                    # transverse energy in the frame riding the well path
                    vx_rel = evx - wslope * evy
                    et = 0.5 * species.mass * (vx_rel**2 + evz**2) / cn.EV
                    if grid is not None:
                        eu = grid.lookup((ex_, y_eval, ez_))
                        psi_here = coeff * (eu[0]**2 + eu[1]**2 + eu[2]**2)
                    else:
                        psi_here = pp.pseudopotential_at(
                            layout, drive, species,
                            np.array([ex_, y_eval, ez_]))
                    bound = et + psi_here - wpsi < depth_ev
            if bound:
                outcome = "guided_right" if det_hit[0] >= 0 else "guided_left"
        tr = Trajectory(states0[i, :3].copy(), states0[i, 3:].copy(),
                        float(phases[i]), samp[:, 0], samp[:, 1:],
                        _STATUS_NAMES[status], outcome, exit_rec,
                        detector_hit=det_hit, eval_record=eval_rec)
        trajectories.append(tr)
        if det_hit is not None:
            hits.append((det_hit[0], det_hit[1], outcome))

    x_edges = np.arange(-X_MAX, X_MAX + bin_size / 2, bin_size)
    z_edges = np.arange(0.0, Z_MAX + bin_size / 2, bin_size)
    counts = np.zeros((len(x_edges) - 1, len(z_edges) - 1), dtype=np.int64)
    counts_guided = np.zeros_like(counts)
    totals = {"guided_left": 0, "guided_right": 0, "lost": 0}
    for (x_det, z_det, outcome) in hits:
        ix = int(np.searchsorted(x_edges, min(max(x_det, -X_MAX), X_MAX - 1e-9)) - 1)
        iz = int(np.searchsorted(z_edges, min(max(z_det, 1e-9), Z_MAX - 1e-9)) - 1)
        if 0 <= ix < counts.shape[0] and 0 <= iz < counts.shape[1]:
            counts[ix, iz] += 1
            totals[outcome] += 1
            if outcome != "lost":
                counts_guided[ix, iz] += 1
    image = DetectorImage(detector_plane, x_edges, z_edges, counts, totals,
                          counts_guided)
    return EnsembleResult(trajectories, image, grid=grid)


def port_asymmetry(result):
    """A = (N_right - N_left) / (N_right + N_left) over guided electrons."""
    c = result.outcome_counts()
    nr, nl = c["guided_right"], c["guided_left"]
    if nr + nl == 0:
        return 0.0
    return (nr - nl) / (nr + nl)


def displaced_source_scan(layout, drive, species, source, offsets,
                          detector_plane=DETECTOR_PLANE, **kwargs):
    """run_ensemble per x offset of the source; reports port asymmetry.

    Returns a list of dicts {offset, result, asymmetry}; the field grid
    is built once and shared.
    """
    grid = kwargs.pop("grid", None)
    if grid is None and kwargs.get("build_grid", True):
        grid = FieldGrid.build(layout)
    out = []
    for dx in offsets:
        res = run_ensemble(layout, drive, species, source.displaced(dx),
                           detector_plane=detector_plane, grid=grid, **kwargs)
        out.append({"offset": dx, "result": res,
                    "asymmetry": port_asymmetry(res)})
    return out
