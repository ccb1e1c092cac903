"""Time-averaged pseudopotential and guide characterization.

The oscillating potential V0 cos(Omega t) phi(r) confines a particle in
the time-averaged pseudopotential

    Psi(r) = Q^2 V0^2 |grad phi(r)|^2 / (4 M Omega^2),

reported in eV throughout.  This module finds transverse minima of Psi,
traces them along the guide axis, fits trap frequencies and stability
parameters, and measures double-well separations and barrier heights.
"""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import constants as cn
from . import electrostatics as es
from .errors import ConvergenceError
from .params import DriveParams, ParticleSpecies  # re-exported on purpose

__all__ = [
    "DriveParams", "ParticleSpecies", "PseudoMap", "CharacterizedGuide",
    "pseudopotential_at", "pseudopotential_many", "pseudo_gradient",
    "find_transverse_minimum", "characterize_guide", "stability_q",
    "compute_pseudomap", "trap_depth", "transverse_cut",
]


def _coeff_ev(drive, species):
    """Q^2 V0^2 / (4 M Omega^2 e): |grad phi|^2 [V/m]^2 -> Psi [eV]."""
    return (species.charge ** 2 * drive.v0 ** 2
            / (4.0 * species.mass * drive.omega ** 2 * cn.EV))


def pseudopotential_at(layout, drive, species, point):
    """Pseudopotential [eV] at a point."""
    g = es.gradient_at(layout, point)
    return _coeff_ev(drive, species) * float(g @ g)


def pseudopotential_many(layout, drive, species, points):
    g = es.gradient_many(layout, points)
    return _coeff_ev(drive, species) * np.sum(g * g, axis=1)


def pseudo_gradient(layout, drive, species, point, step=None):
    """grad Psi [eV/m]: 2 c J^T g with J from central differences of grad phi."""
    point = np.asarray(point, dtype=float)
    if step is None:
        step = max(1e-9, 2e-6 * point[2])
    g = es.gradient_at(layout, point)
    jac = np.empty((3, 3))
    for i in range(3):
        d = np.zeros(3)
        d[i] = step
        jac[:, i] = (es.gradient_at(layout, point + d)
                     - es.gradient_at(layout, point - d)) / (2.0 * step)
    return 2.0 * _coeff_ev(drive, species) * (jac.T @ g)


# ---------------------------------------------------------------------------
# transverse minimum finding (fixed y, optimize over x and z)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransverseMinimum:
    y: float
    x: float
    z: float
    psi_ev: float
    grad_norm: float

    @property
    def point(self):
        return np.array([self.x, self.y, self.z])


def _lm_minimize(layout, y, x0, z0, gtol, coeff, max_iter=200):
    """Levenberg-Marquardt on the residual grad(phi)(x, y, z).

    Psi = coeff |g|^2 is a nonlinear least-squares objective in (x, z);
    works both at field nulls (zero residual) and at fringe-field minima.
    Returns (x, z) with |grad Psi| < gtol [eV/m].
    """
    p = np.array([x0, z0], dtype=float)
    lam = 1e-8

    def residual(p):
        return es.gradient_at(layout, np.array([p[0], y, p[1]]))

    def res_jac(p):
        h = max(1e-9, 1e-6 * p[1])
        jac = np.empty((3, 2))
        for i in range(2):
            d = np.zeros(2)
            d[i] = h
            jac[:, i] = (residual(p + d) - residual(p - d)) / (2.0 * h)
        return jac

    g = residual(p)
    for _ in range(max_iter):
        jac = res_jac(p)
        grad_psi = 2.0 * coeff * (jac.T @ g)
        gnorm = np.linalg.norm(grad_psi)
        if gnorm < gtol:
            return p, coeff * float(g @ g), gnorm
        jtj = jac.T @ jac
        scale = max(np.trace(jtj) / 2.0, 1e-300)
        accepted = False
        for _ in range(60):
            try:
                step = np.linalg.solve(jtj + lam * scale * np.eye(2), -(jac.T @ g))
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            pn = p + step
            if pn[1] <= 0.0:
                lam *= 10.0
                continue
            gn = residual(pn)
            if gn @ gn <= g @ g * (1.0 + 1e-14):
                p, g = pn, gn
                lam = max(lam * 0.25, 1e-14)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
    # full-Newton polish on grad Psi: Gauss-Newton stagnates at minima with
    # a nonzero field residual (fringe-field wells, finite-length g_y)
    def grad_psi_2d(p):
        jac = res_jac(p)
        return 2.0 * coeff * (jac.T @ residual(p))

    gp = grad_psi_2d(p)
    for _ in range(30):
        gnorm = np.linalg.norm(gp)
        if gnorm < gtol:
            return p, coeff * float(residual(p) @ residual(p)), gnorm
        h = max(1e-10, 1e-7 * p[1])
        hess = np.empty((2, 2))
        for i in range(2):
            d = np.zeros(2)
            d[i] = h
            hess[:, i] = (grad_psi_2d(p + d) - grad_psi_2d(p - d)) / (2.0 * h)
        try:
            step = np.linalg.solve(hess, -gp)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or p[1] + step[1] <= 0.0:
            break
        pn = p + step
        gpn = grad_psi_2d(pn)
        if np.linalg.norm(gpn) >= gnorm:
            break
        p, gp = pn, gpn
    gnorm = np.linalg.norm(grad_psi_2d(p))
    if gnorm < gtol:
        return p, coeff * float(residual(p) @ residual(p)), gnorm
    raise ConvergenceError(
        f"transverse minimum search stalled at x={p[0]:.6e}, z={p[1]:.6e}, "
        f"|grad Psi|={gnorm:.3e} eV/m",
        last_iterate={"x": p[0], "z": p[1], "grad_norm": gnorm})


def _coarse_scan(layout, drive, species, y, x_win, z_win, n=41):
    xs = np.linspace(x_win[0], x_win[1], n)
    zs = np.linspace(z_win[0], z_win[1], n)
    xx, zz = np.meshgrid(xs, zs, indexing="ij")
    pts = np.column_stack([xx.ravel(), np.full(xx.size, y), zz.ravel()])
    psi = pseudopotential_many(layout, drive, species, pts).reshape(n, n)
    # interior local minima of the sampled map
    seeds = []
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            v = psi[i, j]
            if (v <= psi[i - 1, j] and v <= psi[i + 1, j]
                    and v <= psi[i, j - 1] and v <= psi[i, j + 1]):
                seeds.append((v, xs[i], zs[j]))
    seeds.sort()
    return seeds


def find_transverse_minimum(layout, drive, species, y, initial_guess,
                            gtol=1e-9, probe_offsets=None, window=None):
    """Local minima of Psi in the xz-plane at fixed y.

    Returns a list of one or two TransverseMinimum, ordered left to right
    in x.  Probes around the seed to catch a bifurcated double well; results
    outside `window` (x_lo, x_hi, z_lo, z_hi) are rejected (the far field is
    a plateau of near-zero gradient that traps descent methods).
    """
    x0, z0 = float(initial_guess[0]), float(initial_guess[1])
    if z0 <= 0:
        raise ConvergenceError("initial guess must have z > 0")
    if window is None:
        window = (x0 - 3 * z0, x0 + 3 * z0, 0.02 * z0, 4 * z0)
    coeff = _coeff_ev(drive, species)
    if probe_offsets is None:
        probe_offsets = [0.0, -0.05 * z0, 0.05 * z0, -0.3 * z0, 0.3 * z0]

    def in_window(p):
        return (window[0] <= p[0] <= window[1]
                and window[2] <= p[1] <= window[3])

    found = []

    def try_seed(sx, sz):
        try:
            p, psi, gnorm = _lm_minimize(layout, y, sx, sz, gtol, coeff)
        except ConvergenceError:
            return
        if not in_window(p):
            return
        if not any(abs(p[0] - m.x) < 1e-3 * z0 and abs(p[1] - m.z) < 1e-3 * z0
                   for m in found):
            found.append(TransverseMinimum(y=y, x=p[0], z=p[1],
                                           psi_ev=psi, grad_norm=gnorm))

    for dx in probe_offsets:
        try_seed(x0 + dx, z0)
    if not found:
        seeds = _coarse_scan(layout, drive, species, y,
                             (window[0], window[1]),
                             (max(window[2], 0.05 * z0), min(window[3], 3 * z0)))
        for _, sx, sz in seeds[:6]:
            try_seed(sx, sz)
    if not found:
        raise ConvergenceError(f"no transverse minimum found at y={y:.4e}")
    found.sort(key=lambda m: m.x)
    if len(found) > 2:
        # keep the two deepest (spurious shallow side minima can appear in scans)
        found = sorted(found, key=lambda m: m.psi_ev)[:2]
        found.sort(key=lambda m: m.x)
    return found


def psi_hessian(layout, drive, species, point, step=None):
    """Hessian of Psi [eV/m^2] in the transverse (x, z) plane by central FD."""
    point = np.asarray(point, dtype=float)
    if step is None:
        step = 5e-3 * point[2]
    idx = [0, 2]
    h = np.zeros((2, 2))

    def psi(dx, dz):
        q = point.copy()
        q[0] += dx
        q[2] += dz
        return pseudopotential_at(layout, drive, species, q)

    p0 = psi(0, 0)
    h[0, 0] = (psi(step, 0) - 2 * p0 + psi(-step, 0)) / step ** 2
    h[1, 1] = (psi(0, step) - 2 * p0 + psi(0, -step)) / step ** 2
    h[0, 1] = h[1, 0] = (psi(step, step) - psi(step, -step)
                         - psi(-step, step) + psi(-step, -step)) / (4 * step ** 2)
    return h


def trap_frequencies(layout, drive, species, minimum, step=None):
    """(omega_x, omega_z) [rad/s] from the Psi Hessian at a minimum.

    Eigenvalues of the transverse Hessian; each is assigned to the axis its
    eigenvector is closest to.
    """
    h = psi_hessian(layout, drive, species, minimum.point, step=step) * cn.EV
    vals, vecs = np.linalg.eigh(h)
    vals = np.clip(vals, 0.0, None)
    om = np.sqrt(vals / species.mass)
    # vecs[:, k] in (x, z); pick assignment maximizing axis alignment
    if abs(vecs[0, 0]) >= abs(vecs[0, 1]):
        return om[0], om[1]
    return om[1], om[0]


def trap_depth(layout, drive, species, minimum, z_max_factor=8.0, n=200):
    """Depth [eV]: barrier along +z above the minimum (vertical escape)."""
    zs = np.linspace(minimum.z, z_max_factor * minimum.z, n)
    pts = np.column_stack([np.full(n, minimum.x), np.full(n, minimum.y), zs])
    psi = pseudopotential_many(layout, drive, species, pts)
    k = int(np.argmax(psi))
    if 0 < k < n - 1:
        # parabolic refinement of the sampled maximum
        a, b, c = psi[k - 1], psi[k], psi[k + 1]
        denom = a - 2 * b + c
        if denom < 0:
            b = b - 0.125 * (a - c) ** 2 / denom
        psi_max = b
    else:
        psi_max = psi[k]
    return float(psi_max - minimum.psi_ev)


# ---------------------------------------------------------------------------
# saddle between double-well minima: string method in the xz-plane
# ---------------------------------------------------------------------------

def string_barrier(layout, drive, species, min_left, min_right,
                   n_nodes=64, n_iter=300, tol=1e-4):
    """Barrier height [eV] over the minimum-energy path between two wells.

    String of n_nodes in the transverse plane, relaxed by projecting out
    the tangential force component and reparametrizing to equal arclength.
    Returns (barrier_ev, path) with barrier measured from the lower well.
    """
    y = min_left.y
    a = np.array([min_left.x, min_left.z])
    b = np.array([min_right.x, min_right.z])
    t = np.linspace(0.0, 1.0, n_nodes)
    path = a[None, :] + t[:, None] * (b - a)[None, :]
    # bow the initial guess upward: the saddle sits above the chord near x=0
    path[:, 1] += 0.08 * np.linalg.norm(b - a) * np.sin(np.pi * t)
    spacing = np.linalg.norm(b - a) / (n_nodes - 1)
    last_barrier = None
    for _ in range(n_iter):
        grads = np.array([
            pseudo_gradient(layout, drive, species,
                            np.array([p[0], y, p[1]]))[[0, 2]]
            for p in path])
        tang = np.zeros_like(path)
        tang[1:-1] = path[2:] - path[:-2]
        tang[0] = path[1] - path[0]
        tang[-1] = path[-1] - path[-2]
        tang /= np.linalg.norm(tang, axis=1)[:, None]
        perp = grads - np.sum(grads * tang, axis=1)[:, None] * tang
        gmax = np.abs(perp).max()
        if gmax > 0:
            alpha = 0.2 * spacing / gmax
            path[1:-1] -= alpha * perp[1:-1]
        # reparametrize to equal arclength
        seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        s /= s[-1]
        su = np.linspace(0.0, 1.0, n_nodes)
        path = np.column_stack([np.interp(su, s, path[:, 0]),
                                np.interp(su, s, path[:, 1])])
        psi = pseudopotential_many(
            layout, drive, species,
            np.column_stack([path[:, 0], np.full(n_nodes, y), path[:, 1]]))
        barrier = psi.max() - min(min_left.psi_ev, min_right.psi_ev)
        if last_barrier is not None and abs(barrier - last_barrier) <= tol * max(barrier, 1e-30):
            break
        last_barrier = barrier
    return float(barrier), path


# ---------------------------------------------------------------------------
# guide characterization along y
# ---------------------------------------------------------------------------

@dataclass
class CharacterizedGuide:
    """Minimum path(s) and derived guide properties per y station.

    Arrays are aligned with `y`.  For single-well stations x_left == x_right,
    well_separation == 0 and barrier_height == 0.
    """

    y: np.ndarray
    x_left: np.ndarray
    x_right: np.ndarray
    z_min: np.ndarray
    psi_min_ev: np.ndarray
    omega_x: np.ndarray
    omega_z: np.ndarray
    q_param: np.ndarray
    depth_ev: np.ndarray
    well_separation: np.ndarray
    barrier_height_ev: np.ndarray
    eta: float = math.nan
    u: float = math.nan
    drive: DriveParams = None
    truncated_reason: str = None

    @property
    def double_well(self):
        return self.well_separation > 0.0

    def station(self, y):
        i = int(np.argmin(np.abs(self.y - y)))
        return i

    def to_csv(self, path):
        cols = ["y", "x_left", "x_right", "z_min", "psi_min_ev", "omega_x",
                "omega_z", "q_param", "depth_ev", "well_separation",
                "barrier_height_ev"]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            for i in range(self.y.size):
                w.writerow([f"{getattr(self, c)[i]:.12e}" for c in cols])

    def summary_dict(self):
        return {
            "eta": self.eta,
            "u": self.u,
            "n_stations": int(self.y.size),
            "y_start": float(self.y[0]),
            "y_end": float(self.y[-1]),
            "double_well_fraction": float(np.mean(self.double_well)),
            "truncated_reason": self.truncated_reason,
            "scaling_note": (
                "omega = (q/sqrt(8)) Omega is used for q_param; the alternative "
                "level-spacing route (Delta E = hbar omega) is reported by the "
                "quantum-mode solver and may disagree with naive "
                "constant-q frequency scaling."),
        }

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.summary_dict(), f, indent=1)


def characterize_guide(layout, drive, species, y_range, step,
                       initial_guess=None, gtol=1e-9, barrier_nodes=64):
    """Trace the transverse minimum path(s) over y_range by continuation."""
    y0, y1 = y_range
    if step <= 0:
        raise ValueError("step must be > 0")
    ys = np.arange(y0, y1 + 0.5 * step, step)
    if initial_guess is None:
        initial_guess = (0.0, 450e-6)
    rows = {k: [] for k in ["y", "xl", "xr", "z", "psi", "ox", "oz",
                            "depth", "sep", "barrier"]}
    truncated = None
    seed = (float(initial_guess[0]), float(initial_guess[1]))
    prev = None
    for y in ys:
        try:
            probes = None
            if prev is not None and len(prev) == 2:
                # seed both wells explicitly
                minima = []
                for m in prev:
                    r = find_transverse_minimum(layout, drive, species, y,
                                                (m.x, m.z), gtol=gtol,
                                                probe_offsets=[0.0])
                    minima.extend(r)
                dedup = []
                for m in sorted(minima, key=lambda m: m.x):
                    if not any(abs(m.x - d.x) < 1e-3 * m.z for d in dedup):
                        dedup.append(m)
                minima = dedup
            else:
                minima = find_transverse_minimum(layout, drive, species, y,
                                                 seed, gtol=gtol,
                                                 probe_offsets=probes)
        except ConvergenceError as exc:
            truncated = f"continuation lost the minimum at y={y:.4e}: {exc}"
            break
        prev = minima
        seed = (minima[0].x, minima[0].z)
        m0 = minima[0]
        ox, oz = trap_frequencies(layout, drive, species, m0)
        depth = trap_depth(layout, drive, species, m0)
        if len(minima) == 2:
            sep = abs(minima[1].x - minima[0].x)
            barrier, _ = string_barrier(layout, drive, species,
                                        minima[0], minima[1],
                                        n_nodes=barrier_nodes)
            xl, xr = minima[0].x, minima[1].x
        else:
            sep = 0.0
            barrier = 0.0
            xl = xr = m0.x
        rows["y"].append(y)
        rows["xl"].append(xl)
        rows["xr"].append(xr)
        rows["z"].append(m0.z)
        rows["psi"].append(m0.psi_ev)
        rows["ox"].append(ox)
        rows["oz"].append(oz)
        rows["depth"].append(depth)
        rows["sep"].append(sep)
        rows["barrier"].append(barrier)
    if not rows["y"]:
        raise ConvergenceError("guide characterization failed at the first station")
    omega_fit = np.sqrt(np.array(rows["ox"]) * np.array(rows["oz"]))
    q = math.sqrt(8.0) * omega_fit / drive.omega
    guide = CharacterizedGuide(
        y=np.array(rows["y"]), x_left=np.array(rows["xl"]),
        x_right=np.array(rows["xr"]), z_min=np.array(rows["z"]),
        psi_min_ev=np.array(rows["psi"]),
        omega_x=np.array(rows["ox"]), omega_z=np.array(rows["oz"]),
        q_param=q, depth_ev=np.array(rows["depth"]),
        well_separation=np.array(rows["sep"]),
        barrier_height_ev=np.array(rows["barrier"]),
        drive=drive, truncated_reason=truncated)
    _fit_geometry_constants(guide, drive, species)
    return guide


def _fit_geometry_constants(guide, drive, species):
    """Fit eta (from the q formula) and u (from the depth formula).

    q = eta (|Q|/M) 2 V0 / (Omega^2 R0^2)  ->  eta per single-well station;
    U = (eta/u) (q/8) V0                   ->  u per station; medians stored.
    """
    single = ~guide.double_well
    if guide.drive.v0 == 0 or not np.any(single):
        return
    qm = abs(species.charge) / species.mass
    r0 = guide.z_min[single]
    q = guide.q_param[single]
    eta = q * drive.omega ** 2 * r0 ** 2 / (qm * 2.0 * drive.v0)
    guide.eta = float(np.median(eta))
    depth = guide.depth_ev[single]
    ok = depth > 0
    if np.any(ok):
        u = guide.eta * q[ok] * drive.v0 / (8.0 * depth[ok])
        guide.u = float(np.median(u))


@dataclass(frozen=True)
class StabilityResult:
    q: float
    stable: bool


def stability_q(eta, species, drive, r0):
    """Stability parameter q = eta (|Q|/M) 2 V0 / (Omega^2 r0^2)."""
    if r0 <= 0:
        raise ValueError("r0 must be > 0")
    q = eta * abs(species.charge) / species.mass * 2.0 * drive.v0 / (
        drive.omega ** 2 * r0 ** 2)
    return StabilityResult(q=float(q), stable=bool(0.0 < q < 0.9))


# ---------------------------------------------------------------------------
# sampled maps and 1D cuts
# ---------------------------------------------------------------------------

@dataclass
class PseudoMap:
    """Pseudopotential [eV] sampled on a rectilinear grid in one plane.

    plane is "xz" (fixed y) or "xy" (fixed z); axis1/axis2 are the grid
    vectors of the two in-plane coordinates in meters.
    """

    plane: str
    fixed_coord: float
    axis1: np.ndarray
    axis2: np.ndarray
    values_ev: np.ndarray

    def to_csv(self, path):
        n1 = {"xz": "x", "xy": "x"}[self.plane]
        n2 = {"xz": "z", "xy": "y"}[self.plane]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([n1, n2, "psi_ev"])
            for i, a in enumerate(self.axis1):
                for j, b in enumerate(self.axis2):
                    w.writerow([f"{a:.9e}", f"{b:.9e}",
                                f"{self.values_ev[i, j]:.12e}"])

    def minimum(self):
        i, j = np.unravel_index(np.argmin(self.values_ev), self.values_ev.shape)
        return self.axis1[i], self.axis2[j], self.values_ev[i, j]


def compute_pseudomap(layout, drive, species, plane, fixed_coord,
                      axis1, axis2):
    a1 = np.asarray(axis1, dtype=float)
    a2 = np.asarray(axis2, dtype=float)
    g1, g2 = np.meshgrid(a1, a2, indexing="ij")
    flat1, flat2 = g1.ravel(), g2.ravel()
    if plane == "xz":
        pts = np.column_stack([flat1, np.full(flat1.size, fixed_coord), flat2])
    elif plane == "xy":
        pts = np.column_stack([flat1, flat2, np.full(flat1.size, fixed_coord)])
    else:
        raise ValueError(f"unknown plane {plane!r}")
    vals = pseudopotential_many(layout, drive, species, pts)
    return PseudoMap(plane=plane, fixed_coord=fixed_coord, axis1=a1, axis2=a2,
                     values_ev=vals.reshape(a1.size, a2.size))


def transverse_cut(layout, drive, species, y, z, x_grid):
    """Psi(x) along x at fixed (y, z): the 1D splitting potential import."""
    x = np.asarray(x_grid, dtype=float)
    pts = np.column_stack([x, np.full(x.size, y), np.full(x.size, z)])
    return pseudopotential_many(layout, drive, species, pts)
