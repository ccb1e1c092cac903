"""Analytic potential and field of a planar electrode pattern.

The chip plane z = 0 is fully tiled by electrodes (gapless approximation).
With the signal electrodes at 1 V and the rest grounded, the potential in
the half space z > 0 is the sum of the solid angles the signal polygons
subtend at the query point, divided by 2*pi.  Solid angles are computed
per fan triangle with the Van Oosterom-Strackee arctangent formula; the
gradient is an analytic line integral along the polygon edges.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .errors import DomainError, GeometryError

TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# numba kernels over packed polygon arrays
#
# verts: (M, 2) vertex coordinates of all signal polygons, concatenated
# offsets: (n_poly + 1,) start index of each polygon in verts
# ---------------------------------------------------------------------------

@njit(cache=True)
def _solid_angle_poly(verts, lo, hi, px, py, pz):
    """Signed solid angle of one CCW polygon seen from (px, py, pz), z > 0.

    For a CCW polygon (normal +z) seen from above the plane the signed
    value is negative; callers flip the sign once.
    """
    ax = verts[lo, 0] - px
    ay = verts[lo, 1] - py
    az = -pz
    ra = np.sqrt(ax * ax + ay * ay + az * az)
    total = 0.0
    for k in range(lo + 1, hi - 1):
        bx = verts[k, 0] - px
        by = verts[k, 1] - py
        bz = az
        cx = verts[k + 1, 0] - px
        cy = verts[k + 1, 1] - py
        cz = az
        rb = np.sqrt(bx * bx + by * by + bz * bz)
        rc = np.sqrt(cx * cx + cy * cy + cz * cz)
        # a . (b x c)
        num = (ax * (by * cz - bz * cy)
               + ay * (bz * cx - bx * cz)
               + az * (bx * cy - by * cx))
        den = (ra * rb * rc
               + (ax * bx + ay * by + az * bz) * rc
               + (ax * cx + ay * cy + az * cz) * rb
               + (bx * cx + by * cy + bz * cz) * ra)
        total += 2.0 * np.arctan2(num, den)
    return total


@njit(cache=True)
def _solid_angle_grad_poly(verts, lo, hi, px, py, pz):
    """Gradient (w.r.t. the query point) of the signed solid angle above.

    Per straight edge a -> b the contribution is ((a - p) x (b - a)) * K
    with K = integral_0^1 dt / |a - p + t (b - a)|^3 in closed form.
    """
    gx = 0.0
    gy = 0.0
    gz = 0.0
    n = hi - lo
    for k in range(n):
        a0 = verts[lo + k, 0]
        a1 = verts[lo + k, 1]
        j = lo + (k + 1) % n
        b0 = verts[j, 0]
        b1 = verts[j, 1]
        ux = b0 - a0
        uy = b1 - a1
        wx = a0 - px
        wy = a1 - py
        wz = -pz
        A = ux * ux + uy * uy
        B = 2.0 * (ux * wx + uy * wy)
        C = wx * wx + wy * wy + wz * wz
        # 4AC - B^2 written as 4 |u x w|^2: cancellation-free for edges
        # nearly parallel to w (long guide rails)
        D = 4.0 * ((uy * wz) ** 2 + (ux * wz) ** 2 + (ux * wy - uy * wx) ** 2)
        K = (2.0 * (2.0 * A + B) / (D * np.sqrt(A + B + C))
             - 2.0 * B / (D * np.sqrt(C)))
        # (w x u); u has no z component
        cx = wy * 0.0 - wz * uy
        cy = wz * ux - wx * 0.0
        cz = wx * uy - wy * ux
        gx += cx * K
        gy += cy * K
        gz += cz * K
    return gx, gy, gz


@njit(cache=True)
def _phi_point(verts, offsets, px, py, pz):
    phi = 0.0
    for ip in range(offsets.size - 1):
        phi -= _solid_angle_poly(verts, offsets[ip], offsets[ip + 1], px, py, pz)
    return phi / TWO_PI


@njit(cache=True)
def _grad_point(verts, offsets, px, py, pz):
    gx = 0.0
    gy = 0.0
    gz = 0.0
    for ip in range(offsets.size - 1):
        ex, ey, ez = _solid_angle_grad_poly(
            verts, offsets[ip], offsets[ip + 1], px, py, pz)
        gx += ex
        gy += ey
        gz += ez
    return -gx / TWO_PI, -gy / TWO_PI, -gz / TWO_PI


@njit(parallel=True, cache=True)
def _phi_many(verts, offsets, pts):
    out = np.empty(pts.shape[0])
    for i in prange(pts.shape[0]):
        out[i] = _phi_point(verts, offsets, pts[i, 0], pts[i, 1], pts[i, 2])
    return out


@njit(parallel=True, cache=True)
def _grad_many(verts, offsets, pts):
    out = np.empty((pts.shape[0], 3))
    for i in prange(pts.shape[0]):
        gx, gy, gz = _grad_point(verts, offsets, pts[i, 0], pts[i, 1], pts[i, 2])
        out[i, 0] = gx
        out[i, 1] = gy
        out[i, 2] = gz
    return out


# ---------------------------------------------------------------------------
# geometry containers and validation
# ---------------------------------------------------------------------------

SIGNAL = "signal"
GROUND = "ground"

MIRROR_TOL = 1e-9  # 1 nm vertex tolerance for the x -> -x symmetry check


def _polygon_area(poly):
    x = poly[:, 0]
    y = poly[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def _segments_cross(p1, p2, p3, p4):
    """Proper intersection test for segments p1-p2 and p3-p4."""
    d1 = np.cross(p4 - p3, p1 - p3)
    d2 = np.cross(p4 - p3, p2 - p3)
    d3 = np.cross(p2 - p1, p3 - p1)
    d4 = np.cross(p2 - p1, p4 - p1)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def _is_simple(poly):
    n = len(poly)
    for i in range(n):
        a1, a2 = poly[i], poly[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or j == (i + 1) % n:
                continue
            if _segments_cross(a1, a2, poly[j], poly[(j + 1) % n]):
                return False
    return True


@dataclass(frozen=True)
class Electrode:
    """A polygonal electrode in the chip plane. Vertices in meters, CCW."""

    polygon: np.ndarray
    role: str = SIGNAL

    def __post_init__(self):
        poly = np.asarray(self.polygon, dtype=float)
        object.__setattr__(self, "polygon", poly)
        if self.role not in (SIGNAL, GROUND):
            raise GeometryError(f"unknown electrode role {self.role!r}")

    def validate(self, index=None):
        tag = "" if index is None else f" (electrode {index})"
        poly = self.polygon
        if poly.ndim != 2 or poly.shape[1] != 2 or poly.shape[0] < 3:
            raise GeometryError(f"polygon needs >= 3 two-dimensional vertices{tag}")
        if not np.all(np.isfinite(poly)):
            raise GeometryError(f"polygon has non-finite vertices{tag}")
        d = np.linalg.norm(np.roll(poly, -1, axis=0) - poly, axis=1)
        if np.any(d == 0.0):
            raise GeometryError(f"consecutive vertices coincide{tag}")
        area = _polygon_area(poly)
        if area == 0.0:
            raise GeometryError(f"degenerate (zero-area) polygon{tag}")
        if area < 0.0:
            raise GeometryError(f"vertices must be ordered counterclockwise{tag}")
        if not _is_simple(poly):
            raise GeometryError(f"polygon is self-intersecting{tag}")


@dataclass
class ElectrodeLayout:
    """Signal/ground electrode pattern on the chip plane z = 0."""

    electrodes: list
    mirror_symmetric_x: bool = False
    _packed: tuple = field(default=None, repr=False, compare=False)

    def validate(self):
        from shapely.geometry import Polygon
        from shapely.ops import unary_union
        from shapely import affinity

        polys = []
        for i, el in enumerate(self.electrodes):
            el.validate(index=i)
            polys.append(Polygon(el.polygon))
        for i in range(len(polys)):
            for j in range(i + 1, len(polys)):
                inter = polys[i].intersection(polys[j])
                if inter.area > 0.0:
                    raise GeometryError(
                        f"electrodes {i} and {j} overlap (area {inter.area:.3e} m^2)")
        if self.mirror_symmetric_x:
            sig = [p for p, el in zip(polys, self.electrodes) if el.role == SIGNAL]
            if sig:
                u = unary_union(sig)
                m = affinity.scale(u, xfact=-1.0, yfact=1.0, origin=(0, 0))
                mismatch = u.symmetric_difference(m).area
                if mismatch > MIRROR_TOL * max(u.length, MIRROR_TOL):
                    raise GeometryError(
                        "signal electrodes are not mirror symmetric in x "
                        f"(symmetric-difference area {mismatch:.3e} m^2)")
        return self

    def signal_electrodes(self):
        return [el for el in self.electrodes if el.role == SIGNAL]

    def packed(self):
        """(verts, offsets) arrays of the signal polygons for the kernels."""
        if self._packed is None:
            sig = self.signal_electrodes()
            if sig:
                verts = np.concatenate([el.polygon for el in sig]).astype(float)
                offsets = np.cumsum([0] + [len(el.polygon) for el in sig]).astype(np.int64)
            else:
                verts = np.zeros((0, 2))
                offsets = np.zeros(1, dtype=np.int64)
            self._packed = (np.ascontiguousarray(verts), offsets)
        return self._packed

    def bounding_box(self):
        """(xmin, xmax, ymin, ymax) over all electrodes."""
        allv = np.concatenate([el.polygon for el in self.electrodes])
        return (allv[:, 0].min(), allv[:, 0].max(),
                allv[:, 1].min(), allv[:, 1].max())


@dataclass(frozen=True)
class FieldSample:
    """Potential [V], field [V/m] and optional field Jacobian [V/m^2] at a point."""

    potential: float
    e_field: np.ndarray
    field_jacobian: np.ndarray = None


# ---------------------------------------------------------------------------
# field evaluation
# ---------------------------------------------------------------------------

def _check_point(point):
    point = np.asarray(point, dtype=float)
    if point.shape != (3,):
        raise DomainError("query point must be a 3-vector")
    if point[2] <= 0.0:
        raise DomainError(f"query point must have z > 0, got z = {point[2]:.3e}")
    return point


def potential_at(layout, point):
    """Unit-voltage potential [V]: signal electrodes at 1 V, ground at 0 V."""
    point = _check_point(point)
    verts, offsets = layout.packed()
    if verts.shape[0] == 0:
        return 0.0
    return float(_phi_point(verts, offsets, point[0], point[1], point[2]))


def potential_many(layout, points):
    points = np.ascontiguousarray(points, dtype=float)
    if np.any(points[:, 2] <= 0.0):
        raise DomainError("all query points must have z > 0")
    verts, offsets = layout.packed()
    if verts.shape[0] == 0:
        return np.zeros(points.shape[0])
    return _phi_many(verts, offsets, points)


def gradient_at(layout, point):
    """Gradient of the unit-voltage potential, d(phi)/dr [V/m]."""
    point = _check_point(point)
    verts, offsets = layout.packed()
    if verts.shape[0] == 0:
        return np.zeros(3)
    return np.array(_grad_point(verts, offsets, point[0], point[1], point[2]))


def gradient_many(layout, points):
    points = np.ascontiguousarray(points, dtype=float)
    if np.any(points[:, 2] <= 0.0):
        raise DomainError("all query points must have z > 0")
    verts, offsets = layout.packed()
    if verts.shape[0] == 0:
        return np.zeros((points.shape[0], 3))
    return _grad_many(verts, offsets, points)


def _jacobian_step(z):
    return max(1e-8, 1e-6 * z)


def field_jacobian_at(layout, point):
    """-grad grad phi by central differences of the analytic gradient."""
    point = _check_point(point)
    h = _jacobian_step(point[2])
    jac = np.empty((3, 3))
    for i in range(3):
        dp = np.zeros(3)
        dp[i] = h
        gp = gradient_at(layout, point + dp)
        gm = gradient_at(layout, point - dp)
        jac[:, i] = -(gp - gm) / (2.0 * h)
    return jac


def field_at(layout, point, jacobian=False):
    """Unit-voltage FieldSample at the point: e_field = -grad(phi)."""
    point = _check_point(point)
    phi = potential_at(layout, point)
    e = -gradient_at(layout, point)
    jac = field_jacobian_at(layout, point) if jacobian else None
    return FieldSample(potential=phi, e_field=e, field_jacobian=jac)


def instantaneous_field(layout, drive, point, t):
    """E(r, t) = V0 cos(Omega t + phase) * unit-voltage field."""
    amp = drive.v0 * np.cos(drive.omega * t + drive.phase)
    return amp * (-gradient_at(layout, point))


def solid_angle(layout, point):
    """Total solid angle [sr] the signal electrodes subtend at the point."""
    return potential_at(layout, point) * TWO_PI


# ---------------------------------------------------------------------------
# layout file I/O: JSON with vertex coordinates in micrometers
# ---------------------------------------------------------------------------

def layout_to_dict(layout):
    return {
        "mirror_symmetric_x": bool(layout.mirror_symmetric_x),
        "electrodes": [
            {"role": el.role, "vertices_um": (el.polygon / 1e-6).tolist()}
            for el in layout.electrodes
        ],
    }


def layout_from_dict(data):
    electrodes = []
    for i, entry in enumerate(data["electrodes"]):
        role = entry.get("role")
        if role not in (SIGNAL, GROUND):
            raise GeometryError(f"electrode {i}: bad role {role!r}")
        poly = np.asarray(entry["vertices_um"], dtype=float) * 1e-6
        electrodes.append(Electrode(polygon=poly, role=role))
    layout = ElectrodeLayout(
        electrodes=electrodes,
        mirror_symmetric_x=bool(data.get("mirror_symmetric_x", False)),
    )
    layout.validate()
    return layout


def save_layout(layout, path):
    with open(path, "w") as f:
        json.dump(layout_to_dict(layout), f, indent=1)


def load_layout(path):
    with open(path) as f:
        data = json.load(f)
    return layout_from_dict(data)
