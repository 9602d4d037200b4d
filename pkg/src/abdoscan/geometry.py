"""Scan meshes: OBJ loading, horizontal slicing and level-circumference extraction.

Internally the vertical axis is always the third coordinate and all lengths are
meters. Files whose vertical axis is something else are brought into that frame
with :func:`orient_vertical` (OBJ defaults to ``+Y``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    EmptySectionError,
    ExtractionError,
    MeshStructureError,
    ObjParseError,
    ParameterError,
)

logger = logging.getLogger(__name__)

N_LEVELS = 64
WELD_TOL = 1e-9
TANGENT_STEP = 1e-9
MIN_TRIANGLE_AREA = 1e-12
OPEN_CHAIN_FRACTION = 0.05
AXES = ("+X", "-X", "+Y", "-Y", "+Z", "-Z")


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise MeshStructureError("vertex coordinates must be finite")
        if len(t):
            if t.min() < 0 or t.max() >= len(v):
                bad = int(t.max() if t.max() >= len(v) else t.min())
                raise MeshStructureError(f"triangle index {bad} out of range for {len(v)} vertices")
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise MeshStructureError("triangle repeats a vertex")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def z_range(self):
        z = self.vertices[:, 2]
        return float(z.min()), float(z.max())

    def transformed(self, matrix=None, scale=1.0, offset=(0.0, 0.0, 0.0)):
        m = np.eye(3) if matrix is None else np.asarray(matrix, dtype=np.float64)
        v = (self.vertices @ m.T) * scale + np.asarray(offset, dtype=np.float64)
        return TriangleMesh(v, self.triangles.copy(), self.dropped)

    def flipped(self):
        """Same surface with reversed triangle winding."""
        return TriangleMesh(self.vertices.copy(), self.triangles[:, ::-1].copy(), self.dropped)


@dataclass(frozen=True)
class CrossSection:
    z: float
    loops: list
    perimeters: np.ndarray
    open_segments: int = 0
    total_segments: int = 0
    warnings: tuple = ()

    @property
    def watertight(self):
        return self.open_segments == 0


@dataclass(frozen=True)
class CircumferenceSequence:
    values: np.ndarray
    z_low: float
    z_high: float
    levels: np.ndarray = field(default=None)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.shape != (N_LEVELS,):
            raise ParameterError(f"expected {N_LEVELS} circumferences, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise ParameterError("circumferences must be finite and positive")
        if not self.z_low < self.z_high:
            raise ParameterError("z_low must be below z_high")
        object.__setattr__(self, "values", vals)
        if self.levels is None:
            object.__setattr__(self, "levels", level_heights(self.z_low, self.z_high))


def level_heights(z_low, z_high, n_levels=N_LEVELS):
    k = np.arange(n_levels, dtype=np.float64)
    return z_low + k * (z_high - z_low) / (n_levels - 1)


# ---------------------------------------------------------------------------
# OBJ input / output


def _face_index(token, n_vertices, line_no):
    head = token.split("/", 1)[0]
    try:
        idx = int(head)
    except ValueError:
        raise ObjParseError(line_no, f"bad face index {token!r}") from None
    if idx == 0:
        raise ObjParseError(line_no, "face index 0 is invalid (indices are 1-based)")
    if idx < 0:
        # relative to the vertices seen so far
        return n_vertices + idx, idx
    return idx - 1, idx


def parse_obj(content):
    """Parse ASCII Wavefront OBJ content into a :class:`TriangleMesh`.

    Only ``v`` and ``f`` records are read; polygons are fan-triangulated.
    Degenerate triangles (repeated index or area below 1e-12 m^2) are dropped
    and counted in ``mesh.dropped``.
    """
    if isinstance(content, bytes):
        try:
            content = content.decode("ascii")
        except UnicodeDecodeError as exc:
            raise ObjParseError(0, f"not ASCII: {exc}") from None
    vertices = []
    faces = []
    for line_no, raw in enumerate(content.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ObjParseError(line_no, "vertex record needs 3 coordinates")
            try:
                xyz = [float(p) for p in parts[1:4]]
            except ValueError:
                raise ObjParseError(line_no, f"bad vertex coordinate in {line!r}") from None
            if not all(np.isfinite(xyz)):
                raise ObjParseError(line_no, "non-finite vertex coordinate")
            vertices.append(xyz)
        elif tag == "f":
            if len(parts) < 4:
                raise ObjParseError(line_no, "face record needs at least 3 indices")
            idx = [_face_index(p, len(vertices), line_no) for p in parts[1:]]
            for i in range(1, len(idx) - 1):
                faces.append((idx[0], idx[i], idx[i + 1], line_no))

    n_v = len(vertices)
    verts = np.array(vertices, dtype=np.float64).reshape(-1, 3)
    if not faces:
        raise MeshStructureError("mesh has no usable triangles")
    tri = np.array([(a, b, c) for (a, _), (b, _), (c, _), _ in faces], dtype=np.int64)
    bad = np.flatnonzero(np.any((tri < 0) | (tri >= n_v), axis=1))
    if bad.size:
        k = int(bad[0])
        (a, ra), (b, rb), (c, rc), line_no = faces[k]
        raw_i = next(r for i, r in ((a, ra), (b, rb), (c, rc)) if not 0 <= i < n_v)
        raise MeshStructureError(f"line {line_no}: face index {raw_i} out of range ({n_v} vertices)")
    repeated = (tri[:, 0] == tri[:, 1]) | (tri[:, 1] == tri[:, 2]) | (tri[:, 0] == tri[:, 2])
    p0, p1, p2 = verts[tri[:, 0]], verts[tri[:, 1]], verts[tri[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(p1 - p0, p2 - p0), axis=1)
    keep = ~repeated & (area >= MIN_TRIANGLE_AREA)
    dropped = int(np.count_nonzero(~keep))
    tris = tri[keep]
    if not len(tris):
        raise MeshStructureError("mesh has no usable triangles")
    if dropped:
        logger.info("dropped %d degenerate faces", dropped)
    return TriangleMesh(verts, tris, dropped)


def load_obj(path, axis="+Y"):
    with open(path, "rb") as fh:
        mesh = parse_obj(fh.read())
    return orient_vertical(mesh, axis)


def to_obj(mesh):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles.tolist()]
    return "\n".join(lines) + "\n"


_AXIS_ROTATIONS = {
    # proper rotations taking the named axis onto +Z
    "+Z": np.eye(3),
    "+Y": np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
    "+X": np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]),
}


def orient_vertical(mesh, axis="+Y"):
    """Rotate ``mesh`` so that ``axis`` (one of +X, -X, +Y, -Y, +Z, -Z) becomes +Z."""
    axis = normalize_axis(axis)
    rot = _AXIS_ROTATIONS["+" + axis[1]].copy()
    if axis[0] == "-":
        rot = np.diag([-1.0, 1.0, -1.0]) @ rot
    if axis == "+Z":
        return mesh
    return mesh.transformed(rot)


def normalize_axis(axis):
    if axis is None or axis == "":
        return "+Y"
    axis = str(axis).strip().upper().replace("−", "-")
    if len(axis) == 1:
        axis = "+" + axis
    if axis not in AXES:
        raise ParameterError(f"vertical axis must be one of {', '.join(AXES)}, got {axis!r}")
    return axis


# ---------------------------------------------------------------------------
# slicing


def _plane_height(mesh, z):
    zmin, zmax = mesh.z_range
    if not np.isfinite(z) or z < zmin or z > zmax:
        raise EmptySectionError(f"height {z!r} outside mesh extent [{zmin}, {zmax}]")
    vz = mesh.vertices[:, 2]
    if not np.any(vz == z):
        return z
    for k in range(1, 9):
        for cand in (z + k * TANGENT_STEP, z - k * TANGENT_STEP):
            if zmin < cand < zmax and not np.any(vz == cand):
                return cand
    raise EmptySectionError(f"could not move plane off mesh vertices near {z!r}")


def _segments(mesh, z):
    tri = mesh.triangles
    d = mesh.vertices[:, 2] - z
    below = d[tri] < 0
    n_below = below.sum(axis=1)
    crossing = (n_below == 1) | (n_below == 2)
    tri = tri[crossing]
    below = below[crossing]
    if not len(tri):
        return np.empty((0, 2, 3))
    ends = []
    for i, j in ((0, 1), (1, 2), (2, 0)):
        a, b = tri[:, i], tri[:, j]
        cut = below[:, i] != below[:, j]
        # canonical endpoint order (below first) keeps shared-edge points bitwise equal
        lo = np.where(below[:, i], a, b)
        hi = np.where(below[:, i], b, a)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = d[lo] / (d[lo] - d[hi])
            p = mesh.vertices[lo] + t[:, None] * (mesh.vertices[hi] - mesh.vertices[lo])
        ends.append((cut, p))
    seg = np.empty((len(tri), 2, 3))
    slot = np.zeros(len(tri), dtype=np.int64)
    for cut, p in ends:
        rows = np.nonzero(cut)[0]
        seg[rows, slot[rows]] = p[rows]
        slot[rows] += 1
    return seg


def _weld(points, tol):
    n = len(points)
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in sorted(cKDTree(points).query_pairs(tol)):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(n)])
    _, ids = np.unique(roots, return_inverse=True)
    return ids


def _chain(seg):
    """Chain segments into closed loops; returns (loops as point lists, open segment count)."""
    m = len(seg)
    pts = seg.reshape(-1, 3)
    ids = _weld(pts, WELD_TOL).reshape(m, 2)
    n_nodes = int(ids.max()) + 1 if m else 0
    pos = np.zeros((n_nodes, 2))
    pos[ids.ravel()[::-1]] = pts[::-1, :2]  # first occurrence wins
    adjacency = [[] for _ in range(n_nodes)]
    for s, (a, b) in enumerate(ids.tolist()):
        if a == b:
            continue
        adjacency[a].append(s)
        adjacency[b].append(s)
    used = ids[:, 0] == ids[:, 1]
    loops = []
    open_segments = 0

    def walk(start, cur, chain):
        count = 0
        while True:
            nxt = next((s for s in adjacency[cur] if not used[s]), None)
            if nxt is None:
                return False, count
            used[nxt] = True
            count += 1
            a, b = ids[nxt]
            cur = b if a == cur else a
            if cur == start:
                return True, count
            chain.append(cur)

    for s in range(m):
        if used[s]:
            continue
        used[s] = True
        a, b = ids[s]
        chain = [a, b]
        closed, count = walk(a, b, chain)
        count += 1
        if not closed:
            back = []
            _, extra = walk(b, a, back)
            open_segments += count + extra
            continue
        loops.append(pos[chain])
    return loops, open_segments


def loop_perimeter(loop):
    loop = np.asarray(loop, dtype=np.float64)
    return float(np.linalg.norm(np.roll(loop, -1, axis=0) - loop, axis=1).sum())


def slice_at_height(mesh, z):
    """Intersect ``mesh`` with the horizontal plane at height ``z``."""
    z_eff = _plane_height(mesh, float(z))
    seg = _segments(mesh, z_eff)
    loops, open_segments = _chain(seg) if len(seg) else ([], 0)
    loops = [lp for lp in loops if len(lp) >= 3]
    warnings = ()
    if len(seg) and open_segments > OPEN_CHAIN_FRACTION * len(seg):
        warnings = (f"non-watertight section: {open_segments} of {len(seg)} segments left open",)
        logger.warning("z=%g: %s", z, warnings[0])
    perims = np.array([loop_perimeter(lp) for lp in loops], dtype=np.float64)
    return CrossSection(float(z), loops, perims, open_segments, len(seg), warnings)


# ---------------------------------------------------------------------------
# torso loop selection and sequence extraction


def polygon_area_centroid(loop):
    x, y = loop[:, 0], loop[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    if area == 0:
        return 0.0, loop.mean(axis=0)
    cx = ((x + xn) * cross).sum() / (6 * area)
    cy = ((y + yn) * cross).sum() / (6 * area)
    return float(area), np.array([cx, cy])


def point_in_polygon(point, loop):
    x, y = loop[:, 0], loop[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    px, py = point
    straddle = (y > py) != (yn > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = x + (py - y) * (xn - x) / (yn - y)
    return bool(np.count_nonzero(straddle & (px < x_cross)) % 2)


def section_centroid(section):
    total, acc = 0.0, np.zeros(2)
    for lp in section.loops:
        area, c = polygon_area_centroid(lp)
        total += abs(area)
        acc += abs(area) * c
    if total == 0:
        return None
    return acc / total


def select_torso_loop(section, axis_point):
    """Index of the loop enclosing ``axis_point``; the longest loop otherwise."""
    if not section.loops:
        return None
    if axis_point is not None:
        inside = [i for i, lp in enumerate(section.loops) if point_in_polygon(axis_point, lp)]
        if inside:
            return max(inside, key=lambda i: section.perimeters[i])
    return int(np.argmax(section.perimeters))


def extract_sequence(mesh, z_low, z_high, n_levels=N_LEVELS):
    """Sample ``n_levels`` torso circumferences evenly over ``[z_low, z_high]``."""
    z_low, z_high = float(z_low), float(z_high)
    if not z_low < z_high:
        raise ParameterError(f"z_low ({z_low}) must be below z_high ({z_high})")
    zmin, zmax = mesh.z_range
    if z_low < zmin or z_high > zmax:
        raise ParameterError(f"slab [{z_low}, {z_high}] outside mesh extent [{zmin}, {zmax}]")
    mid = slice_at_height(mesh, 0.5 * (z_low + z_high))
    axis_point = section_centroid(mid)
    values = np.empty(n_levels)
    levels = level_heights(z_low, z_high, n_levels)
    for k, z in enumerate(levels):
        section = slice_at_height(mesh, z)
        pick = select_torso_loop(section, axis_point)
        if pick is None:
            raise ExtractionError(k, f"no closed loop at height {z:.9g}")
        values[k] = section.perimeters[pick]
    if n_levels != N_LEVELS:
        return values
    return CircumferenceSequence(values, z_low, z_high, levels)


# ---------------------------------------------------------------------------
# analytic test solids


def box_mesh(lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0), quads=False):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    corners = np.array([[(hi if (i >> k) & 1 else lo)[k] for k in range(3)] for i in range(8)])
    quad_faces = [
        (0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5),
    ]
    if quads:
        return corners, quad_faces
    tris = []
    for a, b, c, d in quad_faces:
        tris += [(a, b, c), (a, c, d)]
    return TriangleMesh(corners, np.array(tris))


def lathe_mesh(heights, radii, segments=128):
    """Closed surface of revolution about +Z through the given (height, radius) rings.

    A zero radius at either end becomes a single apex vertex; otherwise the end
    ring is closed with a fan around a centre vertex.
    """
    heights = np.asarray(heights, float)
    radii = np.asarray(radii, float)
    theta = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    verts = []
    ring_start = []
    for h, r in zip(heights, radii):
        ring_start.append(len(verts))
        if r == 0:
            verts.append([0.0, 0.0, h])
        else:
            verts.extend(np.column_stack([r * ring, np.full(segments, h)]).tolist())
    tris = []
    for i in range(len(heights) - 1):
        a0, b0 = ring_start[i], ring_start[i + 1]
        ra, rb = radii[i] == 0, radii[i + 1] == 0
        for j in range(segments):
            j1 = (j + 1) % segments
            if ra and rb:
                continue
            if ra:
                tris.append((a0, b0 + j, b0 + j1))
            elif rb:
                tris.append((a0 + j, a0 + j1, b0))
            else:
                tris.append((a0 + j, a0 + j1, b0 + j1))
                tris.append((a0 + j, b0 + j1, b0 + j))
    for end, flip in ((0, True), (len(heights) - 1, False)):
        if radii[end] == 0:
            continue
        centre = len(verts)
        verts.append([0.0, 0.0, heights[end]])
        s = ring_start[end]
        for j in range(segments):
            j1 = (j + 1) % segments
            tris.append((centre, s + j1, s + j) if flip else (centre, s + j, s + j1))
    return TriangleMesh(np.array(verts), np.array(tris))


def uv_sphere_mesh(radius=1.0, segments=128, rings=64):
    phi = np.linspace(-np.pi / 2, np.pi / 2, rings + 1)
    return lathe_mesh(radius * np.sin(phi), np.round(radius * np.cos(phi), 15), segments)


def circumradius_for_perimeter(perimeter, segments):
    """Radius of the regular ``segments``-gon whose perimeter is ``perimeter``."""
    return perimeter / (2 * segments * np.sin(np.pi / segments))
