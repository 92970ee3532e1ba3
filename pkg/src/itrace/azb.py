"""Angular-window (AZB rectangle) algebra and beam-shrinking clips.

Reflection beams are phi-theta windows around a (possibly imaged) source;
diffraction beams are phi-t windows around a (possibly imaged) edge. The
clipping routines here bound the portion of a primitive that a beam can
actually illuminate, so that deeper bounces only ever see the already-lit
part. All clips are conservative: they may keep a little extra, they never
lose an illuminated point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import Edge, Facet, Frame, unit

TWO_PI = 2.0 * math.pi

# Probe offset used to step off stationary/degenerate points, in normalized
# edge-length units. Large enough to escape the stationary point, small
# enough not to skip a case on meter-scale geometry.
PROBE_ALPHA = 1e-3
# Absolute tolerance for angular equality / window-membership tests.
ANGLE_TOL = 1e-9


def wrap2pi(a: float) -> float:
    return a % TWO_PI


def _circ_dist(a: float, b: float) -> float:
    d = abs(a - b) % TWO_PI
    return min(d, TWO_PI - d)


def _matches(angle: float, target: float) -> bool:
    """True if angle is the target rather than target + pi."""
    return _circ_dist(angle, target) <= _circ_dist(angle, target + math.pi) + 1e-12


@dataclass(frozen=True)
class ReflAzbRect:
    """phi-theta window: azimuth arc [phi_start, phi_start + phi_width] and
    polar interval [theta_min, theta_max]. phi_width == 2*pi encodes the
    full-azimuth case (facet straddling the polar axis)."""

    phi_start: float
    phi_width: float
    theta_min: float
    theta_max: float

    def __post_init__(self):
        if self.theta_min > self.theta_max + 1e-12:
            raise ValueError("theta_min > theta_max")
        if self.phi_width > TWO_PI + 1e-9:
            raise ValueError("phi_width > 2*pi")

    @property
    def full_azimuth(self) -> bool:
        return self.phi_width >= TWO_PI - 1e-12

    def contains_phi(self, phi: float, tol: float = ANGLE_TOL) -> bool:
        if self.full_azimuth:
            return True
        w = wrap2pi(phi - self.phi_start)
        return w <= self.phi_width + tol or w >= TWO_PI - tol

    def contains_theta(self, theta: float, tol: float = ANGLE_TOL) -> bool:
        return self.theta_min - tol <= theta <= self.theta_max + tol

    def contains(self, phi: float, theta: float, tol: float = ANGLE_TOL) -> bool:
        return self.contains_phi(phi, tol) and self.contains_theta(theta, tol)

    @classmethod
    def full_sphere(cls) -> "ReflAzbRect":
        return cls(0.0, TWO_PI, 0.0, math.pi)


@dataclass(frozen=True)
class DiffAzbRect:
    """phi-t window of a diffraction beam in the wedge frame:
    0 <= phi_min <= phi_max <= nwedge*pi, t normalized edge length."""

    phi_min: float
    phi_max: float
    t_min: float
    t_max: float

    def __post_init__(self):
        if self.phi_min > self.phi_max + 1e-12:
            raise ValueError("phi_min > phi_max")
        if self.t_min > self.t_max + 1e-12:
            raise ValueError("t_min > t_max")


@dataclass(frozen=True)
class EdgeClip:
    """Result of clipping an edge line against a reflection window."""

    t_phi_min: float
    t_phi_max: float
    t_theta_min: float
    t_theta_max: float
    t_min: float
    t_max: float

    @property
    def is_empty(self) -> bool:
        return math.isnan(self.t_min)

    @classmethod
    def empty(cls) -> "EdgeClip":
        nan = float("nan")
        return cls(nan, nan, nan, nan, nan, nan)


@dataclass(frozen=True)
class BoundingRegion:
    """Annular column (two arcs x z-extent) containing a facet, in the
    wedge frame: radial interval [r_inner, r_outer], height [z_min, z_max]."""

    r_inner: float
    r_outer: float
    z_min: float
    z_max: float

    def __post_init__(self):
        if not (0.0 <= self.r_inner <= self.r_outer + 1e-12):
            raise ValueError("invalid radial interval")
        if self.z_min > self.z_max + 1e-12:
            raise ValueError("z_min > z_max")


# ---------------------------------------------------------------------------
# Reflection windows
# ---------------------------------------------------------------------------


def facet_rect(f: Frame, fac: Facet) -> ReflAzbRect:
    """Tight phi-theta window of a facet as seen from a frame's origin.

    Azimuth extremes of a triangle not straddling the polar axis are at its
    vertices. Polar-angle extremes can also occur at the stationary point of
    theta along a side (at most one per side), or at the polar-axis crossing
    itself, in which case the window covers the full azimuth circle.
    """
    d = float(fac.n @ (f.origin - fac.v0))
    if abs(d) < 1e-12:
        raise ValueError("frame origin lies on the facet plane")
    ps, pw, tmin, tmax = _facet_rects_batch(f, fac.vertices[None, :, :])
    return ReflAzbRect(float(ps[0]), float(pw[0]), float(tmin[0]), float(tmax[0]))


def _facet_rects_batch(frame: Frame, verts: np.ndarray):
    """Vectorized facet windows. verts: (F, 3, 3) world vertices.

    Returns (phi_start, phi_width, theta_min, theta_max) arrays of shape (F,).
    """
    V = (verts - frame.origin) @ frame.rotation  # (F,3,3) local
    x, y, z = V[..., 0], V[..., 1], V[..., 2]
    rho = np.hypot(x, y)
    theta_v = np.arctan2(rho, z)  # (F,3)

    nf = V.shape[0]
    th_min = theta_v.min(axis=1)
    th_max = theta_v.max(axis=1)

    # stationary point of theta along each side: linear equation in t
    for i, j in ((0, 1), (1, 2), (2, 0)):
        A = V[:, i, :]
        B = V[:, j, :] - V[:, i, :]
        b0 = A[:, 0] ** 2 + A[:, 1] ** 2
        b1 = A[:, 0] * B[:, 0] + A[:, 1] * B[:, 1]
        b2 = B[:, 0] ** 2 + B[:, 1] ** 2
        den = B[:, 2] * b1 - A[:, 2] * b2
        num = A[:, 2] * b1 - B[:, 2] * b0
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / den
        ok = np.isfinite(t) & (t > 0.0) & (t < 1.0)
        if np.any(ok):
            P = A[ok] + t[ok, None] * B[ok]
            th = np.arctan2(np.hypot(P[:, 0], P[:, 1]), P[:, 2])
            th_min[ok] = np.minimum(th_min[ok], th)
            th_max[ok] = np.maximum(th_max[ok], th)

    # polar-axis crossing: facet plane hit by the +/-z ray from the origin
    n_loc = np.cross(V[:, 1, :] - V[:, 0, :], V[:, 2, :] - V[:, 0, :])
    d_loc = np.einsum("ij,ij->i", n_loc, V[:, 0, :])
    nz = n_loc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        z0 = d_loc / nz
    has_z0 = np.abs(nz) > 1e-12 * np.linalg.norm(n_loc, axis=1)
    axis_pt = np.zeros((nf, 3))
    axis_pt[:, 2] = np.where(has_z0, z0, 0.0)
    inside = _points_in_triangles(V, axis_pt) & has_z0
    vert_on_axis = rho < 1e-12
    hit_pos = (inside & (axis_pt[:, 2] > 0.0)) | np.any(vert_on_axis & (z > 0), axis=1)
    hit_neg = (inside & (axis_pt[:, 2] < 0.0)) | np.any(vert_on_axis & (z <= 0), axis=1)
    full = hit_pos | hit_neg
    th_min = np.where(hit_pos, 0.0, th_min)
    th_max = np.where(hit_neg, math.pi, th_max)

    # minimal azimuth arc over the three vertices
    ang = np.sort(np.arctan2(y, x) % TWO_PI, axis=1)
    gaps = np.stack(
        [ang[:, 1] - ang[:, 0], ang[:, 2] - ang[:, 1], ang[:, 0] + TWO_PI - ang[:, 2]],
        axis=1,
    )
    kmax = np.argmax(gaps, axis=1)
    width = TWO_PI - gaps[np.arange(nf), kmax]
    start = ang[np.arange(nf), (kmax + 1) % 3]
    # arcs wider than pi only arise from near-axis numerics: go conservative
    full = full | (width >= math.pi - 1e-12)
    phi_start = np.where(full, 0.0, start)
    phi_width = np.where(full, TWO_PI, width)
    return phi_start, phi_width, th_min, th_max


def _points_in_triangles(V: np.ndarray, pts: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    """Per-row barycentric inclusion: V (F,3,3) triangles, pts (F,3)."""
    u = V[:, 1, :] - V[:, 0, :]
    v = V[:, 2, :] - V[:, 0, :]
    w = pts - V[:, 0, :]
    uu = np.einsum("ij,ij->i", u, u)
    uv = np.einsum("ij,ij->i", u, v)
    vv = np.einsum("ij,ij->i", v, v)
    wu = np.einsum("ij,ij->i", w, u)
    wv = np.einsum("ij,ij->i", w, v)
    den = uu * vv - uv * uv
    with np.errstate(divide="ignore", invalid="ignore"):
        b1 = (vv * wu - uv * wv) / den
        b2 = (uu * wv - uv * wu) / den
        ok = np.abs(den) > 0
        return ok & (b1 >= -eps) & (b2 >= -eps) & (1.0 - b1 - b2 >= -eps)


def refl_rect_intersect(a: ReflAzbRect, b: ReflAzbRect) -> ReflAzbRect | None:
    """Wrap-aware window intersection; None when empty. Zero-width results
    are kept so that grazing beams survive to shadow testing."""
    t_lo = max(a.theta_min, b.theta_min)
    t_hi = min(a.theta_max, b.theta_max)
    if t_hi < t_lo - 1e-12:
        return None
    t_hi = max(t_hi, t_lo)

    if a.full_azimuth and b.full_azimuth:
        return ReflAzbRect(0.0, TWO_PI, t_lo, t_hi)
    if a.full_azimuth:
        return ReflAzbRect(b.phi_start, b.phi_width, t_lo, t_hi)
    if b.full_azimuth:
        return ReflAzbRect(a.phi_start, a.phi_width, t_lo, t_hi)

    # overlap of arc b with arc a, in a-relative angle
    delta = wrap2pi(b.phi_start - a.phi_start)
    cands = []
    lo = max(0.0, delta)
    hi = min(a.phi_width, delta + b.phi_width)
    if hi >= lo - 1e-12:
        cands.append((lo, max(hi, lo)))
    if delta + b.phi_width > TWO_PI:
        hi2 = min(a.phi_width, delta + b.phi_width - TWO_PI)
        if hi2 >= -1e-12:
            cands.append((0.0, max(hi2, 0.0)))
    if not cands:
        return None
    # two components cannot occur for widths < pi; take the wider one if the
    # degenerate double-touch ever shows up
    lo, hi = max(cands, key=lambda c: c[1] - c[0])
    return ReflAzbRect(wrap2pi(a.phi_start + lo), hi - lo, t_lo, t_hi)


def shrink_after_reflection(r: ReflAzbRect) -> ReflAzbRect:
    """Map a window into the mirrored frame of the next bounce: the polar
    interval flips to [pi - theta_max, pi - theta_min], azimuth unchanged."""
    return ReflAzbRect(r.phi_start, r.phi_width, math.pi - r.theta_max, math.pi - r.theta_min)


# ---------------------------------------------------------------------------
# Edge clipping against a reflection window (reflection-diffraction)
# ---------------------------------------------------------------------------


def t_of_phi(A, B, phi: float) -> tuple[float, bool]:
    """t where the line A + t*B crosses azimuth phi.

    Returns (t, valid): valid means the crossing is at phi itself rather
    than phi + pi. An asymptote (line parallel to the phi direction) returns
    t = +inf with valid False.
    """
    c, s = math.cos(phi), math.sin(phi)
    num = A[1] * c - A[0] * s
    den = B[0] * s - B[1] * c
    scale = abs(B[0]) + abs(B[1])
    if abs(den) <= 1e-14 * max(scale, 1e-30):
        return math.inf, False
    t = num / den
    dx, dy = A[0] + t * B[0], A[1] + t * B[1]
    phi_t = math.atan2(dy, dx) % TWO_PI
    return t, _matches(phi_t, phi)


def theta_of_t(A, B, t: float) -> float:
    """Polar angle of the point A + t*B (angle from +z)."""
    x, y, z = A[0] + t * B[0], A[1] + t * B[1], A[2] + t * B[2]
    return math.atan2(math.hypot(x, y), z)


def t_of_theta(A, B, theta: float) -> list[tuple[float, bool]]:
    """Roots t of the polar-angle equation theta(t) = theta.

    theta(t) only determines cot^2, so each root is checked against the
    reconstructed angle: valid roots reproduce theta, rejected ones pi-theta.
    Degenerate quadratics yield one root or none.
    """
    st = math.sin(theta)
    if st <= 1e-12:
        return []
    ct2 = (math.cos(theta) / st) ** 2
    bxy2 = B[0] ** 2 + B[1] ** 2
    axy2 = A[0] ** 2 + A[1] ** 2
    ab = A[0] * B[0] + A[1] * B[1]
    alpha = bxy2 * ct2 - B[2] ** 2
    beta = 2.0 * (ab * ct2 - A[2] * B[2])
    gamma = axy2 * ct2 - A[2] ** 2
    scale = max(abs(alpha), abs(beta), abs(gamma), 1e-300)

    roots: list[float] = []
    if abs(alpha) <= 1e-13 * scale:
        if abs(beta) > 1e-13 * scale:
            roots = [-gamma / beta]
    else:
        disc = beta * beta - 4.0 * alpha * gamma
        if disc >= -1e-12 * scale * scale:
            sq = math.sqrt(max(disc, 0.0))
            if beta >= 0.0:
                q = -(beta + sq) / 2.0
            else:
                q = -(beta - sq) / 2.0
            if q != 0.0:
                roots = [q / alpha, gamma / q]
            else:
                roots = [0.0, -beta / alpha] if alpha != 0.0 else [0.0]

    out = []
    for t in sorted(set(roots)):
        th_t = theta_of_t(A, B, t)
        valid = abs(th_t - theta) <= abs(th_t - (math.pi - theta)) + 1e-12
        out.append((t, valid))
    return out


_INVALID = (float("nan"), float("nan"))


def t_phi_min_max(
    rect: ReflAzbRect, P1, P2, S=(0.0, 0.0, 0.0), alpha: float = PROBE_ALPHA
) -> tuple[float, float]:
    """Range of t for which the edge line P1 + t*(P2-P1) lies inside the
    azimuth span of the window, seen from S. Coordinates are in the window's
    frame. Returns (nan, nan) when the line never enters the span.

    Five cases: vertical edge; both margins crossed; one margin plus the
    opposite margin's back ray; projection through the origin; one margin
    plus a parallel asymptote.
    """
    if rect.full_azimuth:
        return -math.inf, math.inf
    phi_lo = wrap2pi(rect.phi_start)
    phi_hi = wrap2pi(rect.phi_start + rect.phi_width)

    B = (P2[0] - P1[0], P2[1] - P1[1], P2[2] - P1[2])
    b_len = math.sqrt(B[0] ** 2 + B[1] ** 2 + B[2] ** 2)
    A = (P1[0] - S[0], P1[1] - S[1], P1[2] - S[2])

    if math.hypot(B[0], B[1]) <= 1e-12 * max(b_len, 1e-30):
        # vertical edge: the whole line shares one azimuth
        if math.hypot(A[0], A[1]) <= 1e-12 * max(abs(A[2]), 1e-30):
            return -math.inf, math.inf  # on the polar axis: keep, ST decides
        a = math.atan2(A[1], A[0]) % TWO_PI
        if rect.contains_phi(a):
            return -math.inf, math.inf
        return _INVALID

    t1, _ = t_of_phi(A, B, phi_lo)
    t2, _ = t_of_phi(A, B, phi_hi)
    inf1, inf2 = math.isinf(t1), math.isinf(t2)

    def probe_in_window(t_from: float):
        cx = A[0] + (t_from + alpha) * B[0]
        cy = A[1] + (t_from + alpha) * B[1]
        return math.atan2(cy, cx) % TWO_PI

    if inf1 and inf2:
        return _INVALID
    if inf1 or inf2:
        t_fin = t2 if inf1 else t1
        margin = phi_hi if inf1 else phi_lo
        dx, dy = A[0] + t_fin * B[0], A[1] + t_fin * B[1]
        phi_fin = math.atan2(dy, dx) % TWO_PI
        if not _matches(phi_fin, margin):
            return _INVALID
        if rect.contains_phi(probe_in_window(t_fin)):
            return t_fin, math.inf
        return -math.inf, t_fin

    if abs(t1 - t2) <= 1e-9 * (1.0 + abs(t1) + abs(t2)):
        # projection of the edge line passes through the origin
        phi0 = probe_in_window(t1)
        if rect.contains_phi(phi0):
            return t1, math.inf
        if rect.contains_phi(wrap2pi(phi0 - math.pi)):
            return -math.inf, t1
        return _INVALID

    d1 = (A[0] + t1 * B[0], A[1] + t1 * B[1])
    d2 = (A[0] + t2 * B[0], A[1] + t2 * B[1])
    proper1 = _matches(math.atan2(d1[1], d1[0]) % TWO_PI, phi_lo)
    proper2 = _matches(math.atan2(d2[1], d2[0]) % TWO_PI, phi_hi)
    if proper1 and proper2:
        return min(t1, t2), max(t1, t2)
    if proper1 or proper2:
        t_prop = t1 if proper1 else t2
        t_improp = t2 if proper1 else t1
        if t_prop - t_improp > 0.0:
            return t_prop, math.inf
        return -math.inf, t_prop
    return _INVALID


def t_theta_min_max(
    rect: ReflAzbRect, A, B, eps: float = PROBE_ALPHA
) -> tuple[float, float]:
    """Range of t for which the edge line lies inside the polar span of the
    window, merged into a single conservative interval (disconnected
    preimages are never split). Returns (nan, nan) when no part qualifies.

    Dispatches on which of the margin-crossing roots are valid; at most one
    polar-angle extremum exists along a line, and a local minimum (maximum)
    can only occur where theta <= pi/2 (>= pi/2).
    """
    th_lo, th_hi = rect.theta_min, rect.theta_max
    half = math.pi / 2.0

    def in_th(x: float) -> bool:
        return th_lo - ANGLE_TOL <= x <= th_hi + ANGLE_TOL

    roots_lo = [t for t, v in t_of_theta(A, B, th_lo) if v]
    roots_hi = [t for t, v in t_of_theta(A, B, th_hi) if v]
    n_lo, n_hi = len(roots_lo), len(roots_hi)

    th = lambda t: theta_of_t(A, B, t)

    if n_lo == 0 and n_hi == 0:
        cr = (
            A[1] * B[2] - A[2] * B[1],
            A[2] * B[0] - A[0] * B[2],
            A[0] * B[1] - A[1] * B[0],
        )
        a_len = math.sqrt(A[0] ** 2 + A[1] ** 2 + A[2] ** 2)
        b_len = math.sqrt(B[0] ** 2 + B[1] ** 2 + B[2] ** 2)
        cr_len = math.sqrt(cr[0] ** 2 + cr[1] ** 2 + cr[2] ** 2)
        if cr_len > 1e-12 * max(a_len * b_len, 1e-30):
            # line misses the origin: no crossings means all-in or all-out
            return (-math.inf, math.inf) if in_th(th(0.0)) else _INVALID
        if b_len == 0.0:
            return _INVALID
        t0 = -(A[0] * B[0] + A[1] * B[1] + A[2] * B[2]) / (b_len * b_len)
        plus, minus = in_th(th(t0 + eps)), in_th(th(t0 - eps))
        if plus and minus:
            return -math.inf, math.inf
        if plus:
            return t0, math.inf
        if minus:
            return -math.inf, t0
        return _INVALID

    if n_lo + n_hi == 1:
        tv = (roots_lo + roots_hi)[0]
        if in_th(th(tv + eps)):
            return tv, math.inf
        return -math.inf, tv

    if n_lo == 1 and n_hi == 1:
        return min(roots_lo[0], roots_hi[0]), max(roots_lo[0], roots_hi[0])

    if {n_lo, n_hi} == {1, 2}:
        t_alone = (roots_lo if n_lo == 1 else roots_hi)[0]
        t_together = (roots_lo if n_lo == 2 else roots_hi)[0]
        if t_together - t_alone > 0.0:
            return t_alone, math.inf
        return -math.inf, t_alone

    if n_lo == 2 and n_hi == 2:
        allr = roots_lo + roots_hi
        return min(allr), max(allr)

    if n_lo == 2 and n_hi == 0:
        if th_lo < half:
            return -math.inf, math.inf
        return min(roots_lo), max(roots_lo)

    if n_hi == 2 and n_lo == 0:
        if th_hi < half:
            return min(roots_hi), max(roots_hi)
        return -math.inf, math.inf

    return _INVALID


def clip_edge_to_rect(
    rect: ReflAzbRect, e: Edge, S=None, frame: Frame | None = None
) -> EdgeClip:
    """Clamp of an edge to the portion inside a reflection window:
    t in [max(t_phi_min, t_theta_min, 0), min(t_phi_max, t_theta_max, 1)].
    Guaranteed superset of the exact inside set."""
    if frame is not None:
        P1 = frame.to_local(e.p1)
        P2 = frame.to_local(e.p2)
        S_l = frame.to_local(S) if S is not None else np.zeros(3)
    else:
        P1, P2 = e.p1, e.p2
        S_l = np.zeros(3) if S is None else np.asarray(S, dtype=float)

    tp = t_phi_min_max(rect, tuple(P1), tuple(P2), tuple(S_l))
    if math.isnan(tp[0]):
        return EdgeClip.empty()
    A = tuple(np.asarray(P1, dtype=float) - S_l)
    B = tuple(np.asarray(P2, dtype=float) - np.asarray(P1, dtype=float))
    tt = t_theta_min_max(rect, A, B)
    if math.isnan(tt[0]):
        return EdgeClip.empty()
    t_min = max(tp[0], tt[0], 0.0)
    t_max = min(tp[1], tt[1], 1.0)
    if t_min > t_max + 1e-12:
        return EdgeClip.empty()
    t_max = max(t_max, t_min)
    return EdgeClip(tp[0], tp[1], tt[0], tt[1], t_min, t_max)


# ---------------------------------------------------------------------------
# Diffraction windows (phi-t rectangles about a wedge)
# ---------------------------------------------------------------------------


def diff_rect_initial(e: Edge) -> DiffAzbRect:
    """First diffraction window of a wedge: full exterior azimuth sweep and
    the whole edge."""
    return DiffAzbRect(0.0, e.nwedge * math.pi, 0.0, 1.0)


def diff_rect_intersect(a: DiffAzbRect, b: DiffAzbRect) -> DiffAzbRect | None:
    p_lo, p_hi = max(a.phi_min, b.phi_min), min(a.phi_max, b.phi_max)
    t_lo, t_hi = max(a.t_min, b.t_min), min(a.t_max, b.t_max)
    if p_hi < p_lo - 1e-12 or t_hi < t_lo - 1e-12:
        return None
    return DiffAzbRect(p_lo, max(p_hi, p_lo), t_lo, max(t_hi, t_lo))


def facet_phi_range_from_edge(ef: Frame, fac: Facet, n: float) -> tuple[float, float] | None:
    """Wedge-frame azimuth span of a facet, clamped to [0, n*pi].

    Vertex azimuths are exact extremes for a triangle clear of the edge
    axis. A span straddling azimuth 0 (possible only for n = 2) degrades
    conservatively to the full exterior; a facet entirely inside the
    forbidden sector yields None.
    """
    V = ef.to_local(fac.vertices)
    rho = np.hypot(V[:, 0], V[:, 1])
    if np.any(rho < 1e-12) or bool(
        _points_in_triangles(V[None, :, :], np.zeros((1, 3)))[0]
    ):
        raise ValueError("facet intersects the edge line")
    ang = np.sort(np.arctan2(V[:, 1], V[:, 0]) % TWO_PI)
    gaps = np.array([ang[1] - ang[0], ang[2] - ang[1], ang[0] + TWO_PI - ang[2]])
    k = int(np.argmax(gaps))
    width = TWO_PI - gaps[k]
    start = float(ang[(k + 1) % 3])
    n_pi = n * math.pi
    if width >= math.pi - 1e-12 or start + width > TWO_PI + 1e-12:
        return 0.0, n_pi
    lo, hi = start, start + width
    if lo >= n_pi - 1e-12:
        return None  # entirely behind both faces
    return max(lo, 0.0), min(hi, n_pi)


def bounding_region(ef: Frame, fac: Facet) -> BoundingRegion:
    """Annular column around the wedge axis containing the facet: radial
    bounds from the projected triangle, height bounds from the vertices."""
    V = ef.to_local(fac.vertices)
    P = V[:, :2]
    r_outer = float(np.max(np.hypot(P[:, 0], P[:, 1])))
    r_inner = _dist_origin_to_triangle_2d(P)
    if r_inner < 1e-12:
        raise ValueError("facet touches the edge axis")
    return BoundingRegion(r_inner, r_outer, float(np.min(V[:, 2])), float(np.max(V[:, 2])))


def _dist_origin_to_triangle_2d(P: np.ndarray) -> float:
    """Distance from the 2D origin to a triangle (0 when inside)."""
    if bool(
        _points_in_triangles(
            np.concatenate([P, np.zeros((3, 1))], axis=1)[None, :, :], np.zeros((1, 3))
        )[0]
    ):
        return 0.0
    best = math.inf
    for i in range(3):
        a = P[i]
        b = P[(i + 1) % 3]
        ab = b - a
        denom = float(ab @ ab)
        t = 0.0 if denom == 0.0 else float(np.clip(-(a @ ab) / denom, 0.0, 1.0))
        q = a + t * ab
        best = min(best, float(np.hypot(q[0], q[1])))
    return best


def t_arc(
    ef: Frame, T, r_arc: float, z_arc: float, P1z: float, P2z: float
) -> float:
    """Normalized edge parameter shared by every diffraction through an arc
    of radius r_arc at height z_arc: on the diffraction cone the incident
    and exiting rays make equal angles with the edge, which pins the
    diffraction-point height to a weighted mean of source and arc heights."""
    Tl = ef.to_local(np.asarray(T, dtype=float))
    rT = float(np.hypot(Tl[0], Tl[1]))
    rR = float(r_arc)
    if rT + rR <= 0.0:
        raise ValueError("source and arc both on the edge axis")
    Dz = (rT * z_arc + rR * Tl[2]) / (rT + rR)
    return (Dz - P1z) / (P2z - P1z)


def region_t_range(
    ef: Frame, T, reg: BoundingRegion, P1z: float, P2z: float
) -> tuple[float, float]:
    """t-span a bounding region can receive, from the two extreme arcs
    picked by the source height relative to the region: above it, inside
    it, or below it. May extend beyond [0, 1]; window intersection clips."""
    Tz = float(ef.to_local(np.asarray(T, dtype=float))[2])
    if Tz > reg.z_max:
        arcs = ((reg.r_inner, reg.z_min), (reg.r_outer, reg.z_max))
    elif Tz >= reg.z_min:
        arcs = ((reg.r_inner, reg.z_min), (reg.r_inner, reg.z_max))
    else:
        arcs = ((reg.r_outer, reg.z_min), (reg.r_inner, reg.z_max))
    ta = t_arc(ef, T, arcs[0][0], arcs[0][1], P1z, P2z)
    tb = t_arc(ef, T, arcs[1][0], arcs[1][1], P1z, P2z)
    return (ta, tb) if ta <= tb else (tb, ta)


# ---------------------------------------------------------------------------
# Conservative segment windows (cheap pre-filter for edge candidates)
# ---------------------------------------------------------------------------


def _segment_rects_batch(frame: Frame, p1: np.ndarray, p2: np.ndarray):
    """Conservative phi-theta windows of segments seen from a frame origin.

    p1, p2: (E, 3) world endpoints. Wider than the exact clip but never
    narrower; used only to skip hopeless edge candidates cheaply.
    """
    Q1 = (p1 - frame.origin) @ frame.rotation
    Q2 = (p2 - frame.origin) @ frame.rotation
    x1, y1, z1 = Q1[:, 0], Q1[:, 1], Q1[:, 2]
    x2, y2, z2 = Q2[:, 0], Q2[:, 1], Q2[:, 2]
    th1 = np.arctan2(np.hypot(x1, y1), z1)
    th2 = np.arctan2(np.hypot(x2, y2), z2)
    th_min = np.minimum(th1, th2)
    th_max = np.maximum(th1, th2)

    A = Q1
    B = Q2 - Q1
    b0 = A[:, 0] ** 2 + A[:, 1] ** 2
    b1 = A[:, 0] * B[:, 0] + A[:, 1] * B[:, 1]
    b2 = B[:, 0] ** 2 + B[:, 1] ** 2
    den = B[:, 2] * b1 - A[:, 2] * b2
    num = A[:, 2] * b1 - B[:, 2] * b0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / den
    ok = np.isfinite(t) & (t > 0.0) & (t < 1.0)
    if np.any(ok):
        P = A[ok] + t[ok, None] * B[ok]
        th = np.arctan2(np.hypot(P[:, 0], P[:, 1]), P[:, 2])
        th_min[ok] = np.minimum(th_min[ok], th)
        th_max[ok] = np.maximum(th_max[ok], th)

    # azimuth sweep along a projected segment is monotone and below pi, so
    # the endpoint arc is exact; a chord through the origin has endpoints
    # exactly pi apart and degrades to the full circle (theta jumps there too)
    a1 = np.arctan2(y1, x1) % TWO_PI
    a2 = np.arctan2(y2, x2) % TWO_PI
    d = np.abs(a1 - a2)
    d = np.minimum(d, TWO_PI - d)
    start = np.where((a2 - a1) % TWO_PI <= math.pi, a1, a2)
    near_axis = (np.hypot(x1, y1) < 1e-9) | (np.hypot(x2, y2) < 1e-9)
    full = near_axis | (d >= math.pi - 1e-9)
    phi_start = np.where(full, 0.0, start)
    phi_width = np.where(full, TWO_PI, d)
    th_min = np.where(full, 0.0, th_min)
    th_max = np.where(full, math.pi, th_max)
    return phi_start, phi_width, th_min, th_max


def unit_from_angles(phi, theta):
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


__all__ = [
    "ReflAzbRect",
    "DiffAzbRect",
    "EdgeClip",
    "BoundingRegion",
    "facet_rect",
    "refl_rect_intersect",
    "shrink_after_reflection",
    "t_of_phi",
    "t_of_theta",
    "theta_of_t",
    "t_phi_min_max",
    "t_theta_min_max",
    "clip_edge_to_rect",
    "diff_rect_initial",
    "diff_rect_intersect",
    "facet_phi_range_from_edge",
    "bounding_region",
    "t_arc",
    "region_t_range",
    "unit",
]
