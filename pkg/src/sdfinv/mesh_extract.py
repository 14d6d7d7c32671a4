"""SDF -> colored triangle mesh via marching cubes over [-1,1]^3.

The 256-case table is generated once at import by walking cut edges around
each cube face: on every face, cut edges pair so that interior (d < 0)
corners stay separated, which fixes the ambiguous diagonal cases without an
asymptotic decider and makes the pairing depend only on the shared face's
signs -- adjoining cells therefore agree and the extracted surface is
watertight. Vertices are deduplicated per lattice edge; triangles are wound
so normals align with the SDF gradient (inside -> outside).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class UndefinedNormalError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray       # (V, 3) float
    triangles: np.ndarray      # (T, 3) int
    vertex_colors: np.ndarray  # (V, 3) float in [0,1]

    def __len__(self):
        return len(self.triangles)


# corner i sits at (i & 1, (i >> 1) & 1, (i >> 2) & 1)
_CORNERS = np.array([[i & 1, (i >> 1) & 1, (i >> 2) & 1] for i in range(8)],
                    dtype=float)
# edge list: 4 x-edges, 4 y-edges, 4 z-edges
_EDGES = [(0, 1), (2, 3), (4, 5), (6, 7),
          (0, 2), (1, 3), (4, 6), (5, 7),
          (0, 4), (1, 5), (2, 6), (3, 7)]
# local edge -> (axis, base-corner offset) in the cell lattice
_EDGE_CELL = [(0, (0, 0, 0)), (0, (0, 1, 0)), (0, (0, 0, 1)), (0, (0, 1, 1)),
              (1, (0, 0, 0)), (1, (1, 0, 0)), (1, (0, 0, 1)), (1, (1, 0, 1)),
              (2, (0, 0, 0)), (2, (1, 0, 0)), (2, (0, 1, 0)), (2, (1, 1, 0))]
_FACES = [
    (0, 2, 4, 6), (1, 3, 5, 7),      # x = 0, x = 1
    (0, 1, 4, 5), (2, 3, 6, 7),      # y = 0, y = 1
    (0, 1, 2, 3), (4, 5, 6, 7),      # z = 0, z = 1
]

_MAX_TRIS = 5


def _face_pairs(face, inside, cut):
    """Pair the cut edges of one face so inside corners stay separated."""
    face_edges = [e for e in cut
                  if _EDGES[e][0] in face and _EDGES[e][1] in face]
    if len(face_edges) == 2:
        return [tuple(face_edges)]
    if len(face_edges) == 4:
        pairs = []
        for c in face:
            if inside[c]:
                own = [e for e in face_edges if c in _EDGES[e]]
                pairs.append(tuple(own))
        return pairs
    return []


def _case_triangles(config):
    inside = [(config >> i) & 1 == 1 for i in range(8)]
    cut = [e for e, (a, b) in enumerate(_EDGES) if inside[a] != inside[b]]
    if not cut:
        return []
    partners = {e: [] for e in cut}
    for face in _FACES:
        for a, b in _face_pairs(face, inside, cut):
            partners[a].append(b)
            partners[b].append(a)
    # disjoint cycles over cut edges
    cycles = []
    seen = set()
    for start in cut:
        if start in seen:
            continue
        cycle = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            nxt = [p for p in partners[cur] if p != prev]
            nxt = nxt[0] if nxt else partners[cur][0]
            if nxt == start:
                break
            cycle.append(nxt)
            seen.add(nxt)
            prev, cur = cur, nxt
        cycles.append(cycle)

    mids = {e: 0.5 * (_CORNERS[a] + _CORNERS[b]) for e, (a, b) in
            enumerate(_EDGES)}
    # outward reference: from inside corners toward outside corners
    ref = np.zeros(3)
    for e in cut:
        a, b = _EDGES[e]
        ref += (_CORNERS[b] - _CORNERS[a]) * (1 if inside[a] else -1)
    tris = []
    for cycle in cycles:
        pts = np.array([mids[e] for e in cycle])
        normal = np.zeros(3)
        for i in range(len(pts)):       # Newell's method
            p, q = pts[i], pts[(i + 1) % len(pts)]
            normal += np.cross(p, q)
        if np.dot(normal, ref) < 0:
            cycle = cycle[::-1]
        for i in range(1, len(cycle) - 1):
            tris.append((cycle[0], cycle[i], cycle[i + 1]))
    return tris


def _build_table():
    table = np.full((256, _MAX_TRIS * 3), -1, dtype=np.int64)
    for config in range(256):
        tris = _case_triangles(config)
        flat = [v for t in tris for v in t]
        assert len(flat) <= _MAX_TRIS * 3
        table[config, :len(flat)] = flat
    return table


_TRI_TABLE = _build_table()


def sdf_values(field, pts, chunk=65536):
    """Field SDF sampled at pts (numpy, no gradients)."""
    if hasattr(field, "scene"):
        return field.scene.sdf(pts)
    out = np.empty(len(pts))
    with ad.no_grad():
        for lo in range(0, len(pts), chunk):
            x = ad.constant(pts[lo:lo + chunk].astype(field.cfg.np_dtype()))
            out[lo:lo + chunk] = field.sdf(x).value
    return out


def color_values(field, pts, chunk=65536):
    """View-independent vertex colors (view branch bypassed)."""
    if hasattr(field, "scene"):
        return np.clip(field.scene.color(pts), 0.0, 1.0)
    out = np.empty((len(pts), 3))
    with ad.no_grad():
        for lo in range(0, len(pts), chunk):
            x = ad.constant(pts[lo:lo + chunk].astype(field.cfg.np_dtype()))
            out[lo:lo + chunk] = field.query(x)["rgb"].value
    return np.clip(out, 0.0, 1.0)


def gradient_values(field, pts, chunk=65536):
    if hasattr(field, "scene"):
        return field.scene.sdf_grad(pts)
    out = np.empty((len(pts), 3))
    with ad.no_grad():
        for lo in range(0, len(pts), chunk):
            x = ad.constant(pts[lo:lo + chunk].astype(field.cfg.np_dtype()))
            out[lo:lo + chunk] = field.sdf_with_spatial_grad(x)[1].value
    return out


def extract_mesh(field, grid_resolution=64) -> TriMesh:
    """Marching cubes at the 0-level set with linear edge interpolation."""
    res = int(grid_resolution)
    if res < 8:
        raise ValueError("grid_resolution must be >= 8")
    n = res + 1
    xs = np.linspace(-1.0, 1.0, n)
    gx, gy, gz = np.meshgrid(xs, xs, xs, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    d = sdf_values(field, pts).reshape(n, n, n)
    d = np.where(d == 0.0, 1e-12, d)  # avoid vertices exactly on corners
    inside = d < 0

    config = np.zeros((res, res, res), dtype=np.int64)
    for i in range(8):
        dx, dy, dz = int(_CORNERS[i, 0]), int(_CORNERS[i, 1]), int(_CORNERS[i, 2])
        config |= (inside[dx:dx + res, dy:dy + res, dz:dz + res].astype(np.int64)
                   << i)

    # one shared vertex per cut lattice edge
    vid = []
    verts = []
    offset = 0
    axis_shapes = [(res, n, n), (n, res, n), (n, n, res)]
    for axis in range(3):
        sl_lo = [slice(None)] * 3
        sl_hi = [slice(None)] * 3
        sl_lo[axis] = slice(0, n - 1)
        sl_hi[axis] = slice(1, n)
        d0 = d[tuple(sl_lo)]
        d1 = d[tuple(sl_hi)]
        cutmask = (d0 < 0) != (d1 < 0)
        ids = np.full(axis_shapes[axis], -1, dtype=np.int64)
        count = int(cutmask.sum())
        ids[cutmask] = offset + np.arange(count)
        offset += count
        t = d0[cutmask] / (d0[cutmask] - d1[cutmask])
        base_idx = np.argwhere(cutmask)
        p0 = xs[base_idx]
        p0[:, axis] = xs[base_idx[:, axis]]
        p1 = p0.copy()
        p1[:, axis] = xs[base_idx[:, axis] + 1]
        verts.append(p0 + t[:, None] * (p1 - p0))
        vid.append(ids)
    vertices = (np.concatenate(verts, axis=0) if offset
                else np.zeros((0, 3)))

    active = np.argwhere((config > 0) & (config < 255))
    if len(active) == 0 or offset == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                       np.zeros((0, 3)))
    rows = _TRI_TABLE[config[active[:, 0], active[:, 1], active[:, 2]]]
    # per-cell global vertex id for each of the 12 local edges
    per_edge = np.empty((len(active), 12), dtype=np.int64)
    for le, (axis, (ox, oy, oz)) in enumerate(_EDGE_CELL):
        per_edge[:, le] = vid[axis][active[:, 0] + ox, active[:, 1] + oy,
                                    active[:, 2] + oz]
    gathered = np.take_along_axis(per_edge, np.maximum(rows, 0), axis=1)
    gathered[rows < 0] = -1
    tris = gathered.reshape(-1, 3)
    tris = tris[(tris >= 0).all(axis=1)]

    # drop degenerate triangles (zero area, e.g. from pathological fields)
    e1 = vertices[tris[:, 1]] - vertices[tris[:, 0]]
    e2 = vertices[tris[:, 2]] - vertices[tris[:, 0]]
    area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
    tris = tris[area2 > 2e-12]

    colors = (color_values(field, vertices) if len(vertices)
              else np.zeros((0, 3)))
    return TriMesh(vertices, tris, colors)


def surface_normals(field, points):
    """Unit normals grad d / |grad d| at points near the level set."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    g = gradient_values(field, pts)
    nrm = np.linalg.norm(g, axis=1, keepdims=True)
    if np.any(nrm < 1e-9):
        raise UndefinedNormalError("zero SDF gradient at a query point")
    return g / nrm


def save_ply(path, mesh: TriMesh, binary=False):
    """PLY export with per-vertex uchar RGB (ASCII by default)."""
    v = np.asarray(mesh.vertices, dtype=np.float32)
    t = np.asarray(mesh.triangles, dtype=np.int32)
    c = (np.clip(mesh.vertex_colors, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    fmt = "binary_little_endian" if binary else "ascii"
    header = "\n".join([
        "ply", f"format {fmt} 1.0",
        f"element vertex {len(v)}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        f"element face {len(t)}",
        "property list uchar int vertex_indices",
        "end_header", ""])
    if binary:
        with open(path, "wb") as f:
            f.write(header.encode())
            vert = np.zeros(len(v), dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
            vert["xyz"] = v
            vert["rgb"] = c
            f.write(vert.tobytes())
            face = np.zeros(len(t), dtype=[("n", "u1"), ("idx", "<i4", 3)])
            face["n"] = 3
            face["idx"] = t
            f.write(face.tobytes())
    else:
        with open(path, "w") as f:
            f.write(header)
            for p, col in zip(v, c):
                f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} "
                        f"{col[0]} {col[1]} {col[2]}\n")
            for tri in t:
                f.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")
