"""Core 3D geometry: frames, mirroring, spherical angles, facet/edge primitives.

Points and vectors are plain float64 numpy arrays of shape (3,); batches are
(N, 3). All types here are immutable values and every operation is pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-12
DEGENERATE_AREA = 1e-9  # m^2, facets below this are rejected at load time
EPS_BARY = 1e-9  # inclusive barycentric tolerance for boundary hits


def vec3(x, y, z) -> np.ndarray:
    return np.array([x, y, z], dtype=float)


def dot3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise 3-vector dot in a fixed evaluation order. numpy's matmul
    picks different kernels by batch size, which perturbs the last ulp and
    would break bit-reproducibility across batch compositions."""
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def norm3(a: np.ndarray) -> np.ndarray:
    return np.sqrt(a[..., 0] ** 2 + a[..., 1] ** 2 + a[..., 2] ** 2)


def to_frame(pts: np.ndarray, origin: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Batch-size-stable variant of frame coordinates (see dot3)."""
    w = pts - origin
    return np.stack([dot3(w, R[:, 0]), dot3(w, R[:, 1]), dot3(w, R[:, 2])], axis=-1)


def norm(v: np.ndarray) -> float:
    return float(np.sqrt(v @ v))


def unit(v: np.ndarray) -> np.ndarray:
    n = norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize zero vector")
    return v / n


@dataclass(frozen=True)
class Plane:
    """Plane n.p = d with unit normal n."""

    n: np.ndarray
    d: float

    @classmethod
    def from_point_normal(cls, p: np.ndarray, n: np.ndarray) -> "Plane":
        nu = unit(np.asarray(n, dtype=float))
        return cls(n=nu, d=float(nu @ p))

    def signed_distance(self, p: np.ndarray) -> float:
        return float(self.n @ p - self.d)


@dataclass(frozen=True)
class Frame:
    """Right-handed orthonormal frame: origin plus basis ex, ey, ez."""

    origin: np.ndarray
    ex: np.ndarray
    ey: np.ndarray
    ez: np.ndarray

    @classmethod
    def identity(cls, origin=None) -> "Frame":
        o = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
        return cls(o, vec3(1, 0, 0), vec3(0, 1, 0), vec3(0, 0, 1))

    @property
    def rotation(self) -> np.ndarray:
        """3x3 matrix with basis vectors as columns (world <- local)."""
        return np.column_stack([self.ex, self.ey, self.ez])

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        """World points (..., 3) to frame coordinates."""
        return (np.asarray(pts, dtype=float) - self.origin) @ self.rotation

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.rotation.T + self.origin

    def validate(self) -> None:
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-11):
            raise ValueError("frame basis is not orthonormal")
        if norm(np.cross(self.ex, self.ey) - self.ez) > 1e-9:
            raise ValueError("frame is not right-handed")


@dataclass(frozen=True)
class Facet:
    id: int
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    n: np.ndarray

    @classmethod
    def from_vertices(cls, fid: int, v0, v1, v2) -> "Facet":
        v0, v1, v2 = (np.asarray(v, dtype=float) for v in (v0, v1, v2))
        cr = np.cross(v1 - v0, v2 - v0)
        area = 0.5 * norm(cr)
        if area < DEGENERATE_AREA:
            raise ValueError(f"facet {fid} is degenerate (area={area:.3e} m^2)")
        return cls(fid, v0, v1, v2, cr / norm(cr))

    @property
    def vertices(self) -> np.ndarray:
        return np.stack([self.v0, self.v1, self.v2])

    @property
    def centroid(self) -> np.ndarray:
        return (self.v0 + self.v1 + self.v2) / 3.0

    @property
    def plane(self) -> Plane:
        return Plane(self.n, float(self.n @ self.v0))


@dataclass(frozen=True)
class Edge:
    """Straight diffracting wedge.

    nwedge is the exterior wedge angle divided by pi, in (1, 2]; n = 2 is a
    knife edge / half-plane. face0_dir is a unit tangent of the reference
    face, fixing azimuth 0 of the wedge; the exterior sector is then
    [0, nwedge*pi] when sweeping right-handed about (p2 - p1).
    """

    id: int
    p1: np.ndarray
    p2: np.ndarray
    nwedge: float
    face_a: int
    face_b: int
    face0_dir: np.ndarray

    def __post_init__(self):
        if not (1.0 < self.nwedge <= 2.0 + 1e-12):
            raise ValueError(f"edge {self.id}: nwedge={self.nwedge} outside (1, 2]")
        if norm(self.p2 - self.p1) < 1e-12:
            raise ValueError(f"edge {self.id} is degenerate")

    @property
    def direction(self) -> np.ndarray:
        return unit(self.p2 - self.p1)

    @property
    def length(self) -> float:
        return norm(self.p2 - self.p1)

    def point_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.p1 + np.multiply.outer(t, self.p2 - self.p1)


def mirror_point(p: np.ndarray, pl: Plane) -> np.ndarray:
    """Reflect a point (or (N,3) batch) across a plane."""
    p = np.asarray(p, dtype=float)
    dist = p @ pl.n - pl.d
    return p - 2.0 * np.multiply.outer(dist, pl.n)


def mirror_direction(v: np.ndarray, pl: Plane) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v - 2.0 * np.multiply.outer(v @ pl.n, pl.n)


def mirror_basis(f: Frame, pl: Plane) -> Frame:
    """Mirror a frame keeping it right-handed.

    ex and ey are mirrored as directions; ez is rebuilt as ex x ey (the
    mirrored ez itself would flip handedness). Azimuths about ez of mirrored
    points are thereby preserved, which is what lets an angular window be
    reused verbatim after a reflection.
    """
    ex = mirror_direction(f.ex, pl)
    ey = mirror_direction(f.ey, pl)
    return Frame(mirror_point(f.origin, pl), ex, ey, np.cross(ex, ey))


def mirror_edge(e: Edge, pl: Plane) -> Edge:
    return Edge(
        id=e.id,
        p1=mirror_point(e.p1, pl),
        p2=mirror_point(e.p2, pl),
        nwedge=e.nwedge,
        face_a=e.face_a,
        face_b=e.face_b,
        face0_dir=mirror_direction(e.face0_dir, pl),
    )


def spherical_angles(f: Frame, p: np.ndarray) -> tuple[float, float]:
    """(phi, theta) of a point in a frame: theta from ez, phi in [0, 2*pi).

    On the polar axis phi is reported as 0 by convention.
    """
    local = f.to_local(p)
    r = norm(local)
    if r == 0.0:
        raise ValueError("point coincides with frame origin")
    rho = float(np.hypot(local[0], local[1]))
    theta = float(np.arctan2(rho, local[2]))
    if rho == 0.0:
        return 0.0, theta
    phi = float(np.arctan2(local[1], local[0])) % (2.0 * np.pi)
    return phi, theta


def direction_from_angles(phi: float, theta: float) -> np.ndarray:
    st = np.sin(theta)
    return vec3(st * np.cos(phi), st * np.sin(phi), np.cos(theta))


def edge_frame(e: Edge) -> Frame:
    """Edge-aligned frame: origin at p1, ez along the edge, ex on face 0."""
    ez = e.direction
    ex = e.face0_dir - (e.face0_dir @ ez) * ez
    nx = norm(ex)
    if nx < 1e-9:
        raise ValueError(f"edge {e.id}: face0_dir is parallel to the edge")
    ex = ex / nx
    return Frame(e.p1.copy(), ex, np.cross(ez, ex), ez)


def barycentric(fac: Facet, p: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of p (projected onto the facet plane)."""
    u = fac.v1 - fac.v0
    v = fac.v2 - fac.v0
    w = np.asarray(p, dtype=float) - fac.v0
    uu, uv, vv = u @ u, u @ v, v @ v
    wu, wv = w @ u, w @ v
    den = uu * vv - uv * uv
    b1 = (vv * wu - uv * wv) / den
    b2 = (uu * wv - uv * wu) / den
    return np.array([1.0 - b1 - b2, b1, b2])


def point_in_facet(fac: Facet, p: np.ndarray, eps: float = EPS_BARY) -> bool:
    """True iff p is inside the facet triangle, boundaries inclusive."""
    return bool(np.all(barycentric(fac, p) >= -eps))


def points_in_triangle(v0, v1, v2, pts: np.ndarray, eps: float = EPS_BARY) -> np.ndarray:
    """Vectorized barycentric inclusion test for a (N, 3) batch."""
    u = v1 - v0
    v = v2 - v0
    w = pts - v0
    uu, uv, vv = u @ u, u @ v, v @ v
    wu = w @ u
    wv = w @ v
    den = uu * vv - uv * uv
    b1 = (vv * wu - uv * wv) / den
    b2 = (uu * wv - uv * wu) / den
    return (b1 >= -eps) & (b2 >= -eps) & (1.0 - b1 - b2 >= -eps)
