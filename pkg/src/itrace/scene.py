"""Scene handling: triangle meshes, wedge extraction, procedural generators.

Mesh files are plain text: "v x y z" vertex lines and "f i j k" one-based
triangle lines. Facet normals come from the vertex winding. Diffracting
wedges are extracted automatically: segments shared by exactly two facets
with a convex exterior dihedral become wedges, boundary segments of open
sheets become half-plane edges (collinear boundary chains are merged).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Edge, Facet, unit

# exterior wedge angle must exceed pi by this much to count as a wedge
WEDGE_MIN_EXCESS = 1e-6


class SceneError(ValueError):
    pass


@dataclass
class Scene:
    facets: list[Facet]
    edges: list[Edge]

    _arrays: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def bounds(self) -> np.ndarray:
        V = self.facet_vertices
        if len(self.facets) == 0:
            return np.zeros((2, 3))
        return np.stack([V.min(axis=(0, 1)), V.max(axis=(0, 1))])

    @property
    def diameter(self) -> float:
        b = self.bounds
        return float(np.linalg.norm(b[1] - b[0]))

    @property
    def facet_vertices(self) -> np.ndarray:
        """(F, 3, 3) vertex array, cached."""
        if "V" not in self._arrays:
            if self.facets:
                self._arrays["V"] = np.stack([f.vertices for f in self.facets])
            else:
                self._arrays["V"] = np.zeros((0, 3, 3))
        return self._arrays["V"]

    @property
    def facet_normals(self) -> np.ndarray:
        if "N" not in self._arrays:
            if self.facets:
                self._arrays["N"] = np.stack([f.n for f in self.facets])
            else:
                self._arrays["N"] = np.zeros((0, 3))
        return self._arrays["N"]

    @property
    def facet_d(self) -> np.ndarray:
        """Plane offsets d with n.p = d per facet."""
        if "D" not in self._arrays:
            self._arrays["D"] = np.einsum(
                "ij,ij->i", self.facet_normals, self.facet_vertices[:, 0, :]
            )
        return self._arrays["D"]

    @property
    def edge_p1(self) -> np.ndarray:
        if "E1" not in self._arrays:
            self._arrays["E1"] = (
                np.stack([e.p1 for e in self.edges]) if self.edges else np.zeros((0, 3))
            )
        return self._arrays["E1"]

    @property
    def edge_p2(self) -> np.ndarray:
        if "E2" not in self._arrays:
            self._arrays["E2"] = (
                np.stack([e.p2 for e in self.edges]) if self.edges else np.zeros((0, 3))
            )
        return self._arrays["E2"]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.facet_vertices).tobytes())
        h.update(np.ascontiguousarray(self.edge_p1).tobytes())
        h.update(np.ascontiguousarray(self.edge_p2).tobytes())
        h.update(np.array([e.nwedge for e in self.edges]).tobytes())
        return h.hexdigest()


def _extract_edges(vertices: np.ndarray, tris: np.ndarray, facets: list[Facet]) -> list[Edge]:
    """Wedges from facet adjacency. Shared segments with exterior dihedral
    angle in (pi, 2*pi] become wedges; boundary segments become half-plane
    edges, with collinear boundary chains merged into single edges."""
    seg_owners: dict[tuple[int, int], list[int]] = {}
    for fi, (a, b, c) in enumerate(tris):
        for i, j in ((a, b), (b, c), (c, a)):
            key = (min(i, j), max(i, j))
            seg_owners.setdefault(key, []).append(fi)

    bad = [(k, v) for k, v in seg_owners.items() if len(v) > 2]
    if bad:
        msgs = ", ".join(f"segment {k} shared by facets {v}" for k, v in bad[:5])
        raise SceneError(f"non-manifold mesh: {msgs}")

    edges: list[Edge] = []
    boundary: list[tuple[tuple[int, int], int]] = []
    for (i, j), owners in sorted(seg_owners.items()):
        p, q = vertices[i], vertices[j]
        if len(owners) == 2:
            e = _wedge_from_pair(p, q, facets[owners[0]], facets[owners[1]])
            if e is not None:
                edges.append(e)
        else:
            boundary.append(((i, j), owners[0]))

    edges.extend(_merged_boundary_edges(vertices, boundary, facets))
    return [
        Edge(k, e.p1, e.p2, e.nwedge, e.face_a, e.face_b, e.face0_dir)
        for k, e in enumerate(edges)
    ]


def _face_tangent(fac: Facet, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Unit vector in the facet plane, perpendicular to segment pq, pointing
    from the segment toward the facet interior."""
    e = unit(q - p)
    other = fac.v0 + fac.v1 + fac.v2 - p - q  # the vertex off the segment
    w = other - p
    t = w - (w @ e) * e
    return unit(t)


def _wedge_from_pair(p, q, fa: Facet, fb: Facet) -> Edge | None:
    ta = _face_tangent(fa, p, q)
    tb = _face_tangent(fb, p, q)
    ez = unit(q - p)
    # orient the edge so the sweep from face a through the exterior is
    # right-handed: moving off face a must start toward its outward normal
    ey = np.cross(ez, ta)
    if ey @ fa.n < 0.0:
        ez = -ez
        p, q = q, p
        ey = np.cross(ez, ta)
    phi_b = math.atan2(float(tb @ ey), float(tb @ ta)) % (2.0 * math.pi)
    nwedge = phi_b / math.pi
    if nwedge <= 1.0 + WEDGE_MIN_EXCESS or nwedge > 2.0:
        return None  # flat or concave junction: no diffraction
    return Edge(-1, p.copy(), q.copy(), nwedge, fa.id, fb.id, ta)


def _merged_boundary_edges(vertices, boundary, facets) -> list[Edge]:
    """Half-plane (n = 2) edges from open-mesh boundaries, merging chains of
    collinear coplanar segments into single edges."""
    if not boundary:
        return []
    segs = [(vertices[i], vertices[j], facets[f]) for (i, j), f in boundary]
    used = [False] * len(segs)
    out: list[Edge] = []
    for i, (p, q, fac) in enumerate(segs):
        if used[i]:
            continue
        used[i] = True
        d = unit(q - p)
        t = _face_tangent(fac, p, q)
        lo_pt, hi_pt = p, q
        grown = True
        while grown:
            grown = False
            for j, (pj, qj, fj) in enumerate(segs):
                if used[j] or abs(abs(unit(qj - pj) @ d) - 1.0) > 1e-9:
                    continue
                if abs((pj - p) @ np.cross(d, fac.n)) > 1e-9 or abs((pj - p) @ fac.n) > 1e-9:
                    continue
                for a, b in ((pj, qj), (qj, pj)):
                    if np.linalg.norm(a - hi_pt) < 1e-9:
                        hi_pt = b
                        used[j] = grown = True
                        break
                    if np.linalg.norm(a - lo_pt) < 1e-9:
                        lo_pt = b
                        used[j] = grown = True
                        break
        ez = unit(hi_pt - lo_pt)
        if np.cross(ez, t) @ fac.n < 0.0:
            lo_pt, hi_pt = hi_pt, lo_pt
        out.append(Edge(-1, lo_pt.copy(), hi_pt.copy(), 2.0, fac.id, fac.id, t))
    return out


def build_scene(vertices: np.ndarray, tris: np.ndarray) -> Scene:
    """Scene from raw arrays: (V, 3) float vertices, (T, 3) int triangles."""
    facets = []
    for fid, (a, b, c) in enumerate(tris):
        try:
            facets.append(Facet.from_vertices(fid, vertices[a], vertices[b], vertices[c]))
        except ValueError as exc:
            raise SceneError(str(exc)) from exc
    edges = _extract_edges(np.asarray(vertices, float), np.asarray(tris), facets)
    return Scene(facets=facets, edges=edges)


def load_scene(path) -> Scene:
    verts: list[list[float]] = []
    tris: list[list[int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "v" and len(parts) == 4:
                    verts.append([float(x) for x in parts[1:]])
                elif parts[0] == "f" and len(parts) == 4:
                    idx = [int(x) - 1 for x in parts[1:]]
                    for i in idx:
                        if i < 0 or i >= len(verts):
                            raise SceneError(
                                f"{path}:{lineno}: vertex index {i + 1} out of range"
                            )
                    tris.append(idx)
                else:
                    raise SceneError(f"{path}:{lineno}: unrecognized line {line!r}")
            except ValueError as exc:
                raise SceneError(f"{path}:{lineno}: {exc}") from exc
    if not tris:
        raise SceneError(f"{path}: no facets")
    return build_scene(np.asarray(verts, float), np.asarray(tris, int))


def write_scene(scene_or_mesh, path) -> None:
    """Write a mesh file. Accepts a (vertices, tris) tuple or a Scene (the
    Scene path re-emits one detached triangle per facet)."""
    if isinstance(scene_or_mesh, Scene):
        V = scene_or_mesh.facet_vertices.reshape(-1, 3)
        T = np.arange(len(V)).reshape(-1, 3)
    else:
        V, T = scene_or_mesh
    with open(path, "w", encoding="utf-8") as fh:
        for v in V:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in T:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


# ---------------------------------------------------------------------------
# Procedural generators (stand-ins for unavailable survey geometry)
# ---------------------------------------------------------------------------


def _box_mesh(x0, y0, x1, y1, z0, z1):
    """Closed axis-aligned box as 8 vertices / 12 outward-wound triangles."""
    v = np.array(
        [
            [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
            [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
        ]
    )
    t = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # bottom (normal -z)
            [4, 5, 6], [4, 6, 7],  # top (+z)
            [0, 1, 5], [0, 5, 4],  # y = y0 (-y)
            [1, 2, 6], [1, 6, 5],  # x = x1 (+x)
            [2, 3, 7], [2, 7, 6],  # y = y1 (+y)
            [3, 0, 4], [3, 4, 7],  # x = x0 (-x)
        ]
    )
    return v, t


def _ground_mesh(x0, y0, x1, y1, nx, ny, z=0.0):
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    V = np.array([[x, y, z] for y in ys for x in xs])
    T = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b = a + 1
            c = a + nx + 1
            d = c + 1
            T.extend([[a, b, d], [a, d, c]])  # wound for +z normals
    return V, np.array(T)


def _merge_meshes(meshes):
    Vs, Ts, off = [], [], 0
    for V, T in meshes:
        Vs.append(V)
        Ts.append(np.asarray(T) + off)
        off += len(V)
    return np.concatenate(Vs), np.concatenate(Ts)


def generate_scene(kind: str, **params):
    """Deterministic procedural scenes.

    kind="canyon": two rows of boxes flanking a straight street along x.
      params: buildings_per_side, building (w, d), height range, street width,
      ground margin/divisions, seed.
    kind="grid": rows x cols blocks of boxes with street gaps over a ground
      sheet. Same style of params.

    Returns (scene, mesh) where mesh is the (vertices, triangles) pair that
    reproduces the scene through the loader.
    """
    if kind == "canyon":
        mesh = _canyon_mesh(**params)
    elif kind == "grid":
        mesh = _grid_mesh(**params)
    else:
        raise SceneError(f"unknown scene kind {kind!r}")
    V, T = mesh
    return build_scene(V, T), mesh


def _canyon_mesh(
    buildings_per_side: int = 3,
    building_w: float = 30.0,
    building_d: float = 15.0,
    height_min: float = 12.0,
    height_max: float = 25.0,
    street_width: float = 20.0,
    gap: float = 8.0,
    ground_divisions: int = 1,
    ground_margin: float = 30.0,
    seed: int = 0,
):
    if building_w <= 0 or building_d <= 0 or street_width <= 0:
        raise SceneError("degenerate canyon dimensions")
    rng = np.random.default_rng(seed)
    meshes = []
    total_len = buildings_per_side * building_w + max(0, buildings_per_side - 1) * gap
    x_start = -total_len / 2.0
    for side in (0, 1):
        y0 = street_width / 2.0 if side == 0 else -street_width / 2.0 - building_d
        for i in range(buildings_per_side):
            h = float(rng.uniform(height_min, height_max))
            x0 = x_start + i * (building_w + gap)
            meshes.append(_box_mesh(x0, y0, x0 + building_w, y0 + building_d, -0.02, h))
    gx = total_len / 2.0 + ground_margin
    gy = street_width / 2.0 + building_d + ground_margin
    meshes.append(_ground_mesh(-gx, -gy, gx, gy, ground_divisions, ground_divisions))
    return _merge_meshes(meshes)


def _grid_mesh(
    rows: int = 4,
    cols: int = 5,
    block: float = 30.0,
    street: float = 25.0,
    height_min: float = 10.0,
    height_max: float = 35.0,
    ground_divisions: int = 2,
    ground_margin: float = 20.0,
    seed: int = 0,
):
    if rows <= 0 or cols <= 0 or block <= 0 or street <= 0:
        raise SceneError("degenerate grid dimensions")
    rng = np.random.default_rng(seed)
    meshes = []
    pitch = block + street
    w = cols * pitch - street
    h = rows * pitch - street
    for r in range(rows):
        for c in range(cols):
            x0 = -w / 2.0 + c * pitch
            y0 = -h / 2.0 + r * pitch
            hz = float(rng.uniform(height_min, height_max))
            meshes.append(_box_mesh(x0, y0, x0 + block, y0 + block, -0.02, hz))
    gx = w / 2.0 + ground_margin
    gy = h / 2.0 + ground_margin
    meshes.append(_ground_mesh(-gx, -gy, gx, gy, ground_divisions, ground_divisions))
    return _merge_meshes(meshes)
