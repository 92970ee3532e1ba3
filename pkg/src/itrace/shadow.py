"""Occlusion acceleration, image-method path backtracing, shadow testing,
and batched observation-point attachment.

The acceleration structure is a binary AABB hierarchy built by median split
over the longest centroid axis, with an any-hit segment query that traverses
whole segment batches at once. Backtracing reconstructs exact specular /
diffraction geometry from a tree node's image chain, vectorized over
observation points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Edge, dot3, norm3, to_frame
from .scene import Scene
from .vistree import KIND_DIFFRACT, KIND_REFLECT, VisTree

PLANE_EPS = 1e-9  # strict side-of-plane margin for reflections, meters
SEG_MIN = 1e-9  # consecutive path points must be at least this far apart
ANG_TOL = 1e-9

DEFAULT_BATCH_CAP = 2**20


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hop:
    kind: str  # "reflect" | "diffract"
    primitive_id: int
    point: np.ndarray
    normal: np.ndarray | None = None  # reflect hops
    edge_dir: np.ndarray | None = None  # diffract hops
    phi_inc: float = 0.0
    phi_out: float = 0.0
    nwedge: float = 0.0


@dataclass(frozen=True)
class RayPath:
    tx: np.ndarray
    fop: np.ndarray
    hops: list[Hop]
    node_ref: object = None
    seq: tuple = ()


# ---------------------------------------------------------------------------
# BVH
# ---------------------------------------------------------------------------

_LEAF_SIZE = 4


@dataclass
class Accel:
    box_lo: np.ndarray  # (N,3)
    box_hi: np.ndarray
    left: np.ndarray  # child index or -1 for leaf
    right: np.ndarray
    leaf_start: np.ndarray
    leaf_count: np.ndarray
    tri_v0: np.ndarray  # (F,3) triangle data in traversal order
    tri_e1: np.ndarray
    tri_e2: np.ndarray
    shrink: float  # default endpoint shrink for self-intersection robustness
    n_facets: int = 0


def build_accel(scene: Scene) -> Accel:
    """Bounding-volume hierarchy over the scene facets with an any-hit
    segment query. Median split over the longest axis; deterministic."""
    if len(scene.facets) == 0:
        raise ValueError("empty scene")
    V = scene.facet_vertices
    lo = V.min(axis=1)
    hi = V.max(axis=1)
    cent = V.mean(axis=1)

    box_lo, box_hi, left, right, lstart, lcount = [], [], [], [], [], []
    order: list[int] = []

    def build(idx: np.ndarray) -> int:
        me = len(box_lo)
        box_lo.append(lo[idx].min(axis=0))
        box_hi.append(hi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        lstart.append(-1)
        lcount.append(0)
        if len(idx) <= _LEAF_SIZE:
            lstart[me] = len(order)
            lcount[me] = len(idx)
            order.extend(int(i) for i in idx)
            return me
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        key = c[:, axis]
        perm = np.argsort(key, kind="stable")
        half = len(idx) // 2
        li = build(idx[perm[:half]])
        ri = build(idx[perm[half:]])
        left[me], right[me] = li, ri
        return me

    build(np.arange(len(scene.facets)))
    order_arr = np.array(order, dtype=np.int64)
    v0 = V[order_arr, 0, :]
    e1 = V[order_arr, 1, :] - v0
    e2 = V[order_arr, 2, :] - v0
    return Accel(
        box_lo=np.array(box_lo),
        box_hi=np.array(box_hi),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        leaf_start=np.array(lstart, dtype=np.int64),
        leaf_count=np.array(lcount, dtype=np.int64),
        tri_v0=v0,
        tri_e1=e1,
        tri_e2=e2,
        shrink=1e-6 * max(scene.diameter, 1.0),
        n_facets=len(scene.facets),
    )


def _boxes_hit(accel: Accel, node: int, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Slab test of segments (o + t*d, t in [0,1]) against one node box."""
    safe_d = np.where(d == 0.0, 1e-300, d)
    t0 = (accel.box_lo[node] - o) / safe_d
    t1 = (accel.box_hi[node] - o) / safe_d
    tn = np.minimum(t0, t1).max(axis=1)
    tf = np.maximum(t0, t1).min(axis=1)
    return (tf >= tn) & (tf >= 0.0) & (tn <= 1.0)


def _tris_hit(accel: Accel, sl: slice, o: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Any-hit of segments against the triangles of a leaf."""
    hit = np.zeros(len(o), dtype=bool)
    for k in range(sl.start, sl.stop):
        v0, e1, e2 = accel.tri_v0[k], accel.tri_e1[k], accel.tri_e2[k]
        p = np.cross(d, e2)
        det = p @ e1
        live = np.abs(det) > 1e-300
        if not live.any():
            continue
        inv = np.where(live, 1.0 / np.where(live, det, 1.0), 0.0)
        tv = o - v0
        u = np.einsum("ij,ij->i", tv, p) * inv
        q = np.cross(tv, e1)
        v = np.einsum("ij,ij->i", q, d) * inv
        t = (q @ e2) * inv
        hit |= live & (u >= 0.0) & (v >= 0.0) & (u + v <= 1.0) & (t >= 0.0) & (t <= 1.0)
    return hit


def segments_occluded(
    accel: Accel, starts: np.ndarray, ends: np.ndarray, shrink: float | None = None
) -> np.ndarray:
    """True per segment iff any facet blocks it. Segments are shrunk at both
    ends so the primitives bounding the segment do not occlude it."""
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    ends = np.atleast_2d(np.asarray(ends, dtype=float))
    s = accel.shrink if shrink is None else shrink
    d = ends - starts
    lens = np.linalg.norm(d, axis=1)
    ok = lens > 2.0 * s
    out = np.zeros(len(starts), dtype=bool)
    if not ok.any():
        return out
    u = d[ok] / lens[ok, None]
    o = starts[ok] + s * u
    dd = d[ok] - 2.0 * s * u

    idx = np.arange(len(o))
    occ = np.zeros(len(o), dtype=bool)
    stack = [(0, idx)]
    while stack:
        node, active = stack.pop()
        active = active[~occ[active]]
        if len(active) == 0:
            continue
        m = _boxes_hit(accel, node, o[active], dd[active])
        active = active[m]
        if len(active) == 0:
            continue
        if accel.left[node] < 0:
            sl = slice(
                int(accel.leaf_start[node]),
                int(accel.leaf_start[node] + accel.leaf_count[node]),
            )
            occ[active] |= _tris_hit(accel, sl, o[active], dd[active])
        else:
            stack.append((int(accel.left[node]), active))
            stack.append((int(accel.right[node]), active))
    out[ok] = occ
    return out


# ---------------------------------------------------------------------------
# Backtracing
# ---------------------------------------------------------------------------


@dataclass
class BatchPaths:
    """Backtraced geometry of one tree node against a batch of observation
    points: hop points in path order, validity mask, and the diffraction
    parameters needed by the field stage."""

    valid: np.ndarray  # (B,)
    points: list[np.ndarray]  # per hop: (B,3)
    kinds: list[int]
    pids: list[int]
    normals: list[np.ndarray | None]  # per hop, world facet normal
    diff_index: int | None = None
    edge_dir: np.ndarray | None = None
    nwedge: float = 0.0
    phi_inc: np.ndarray | None = None  # (B,)
    phi_out: np.ndarray | None = None


def _plane_cross(S, Q, n, dplane):
    """Crossing points of segments [S -> Q] with a plane, with strict side
    checks: Q in front, S behind. S may be (3,) or (B,3)."""
    dQ = dot3(Q, n) - dplane
    if S.ndim == 2:
        dS = dot3(S, n) - dplane
    else:
        dS = np.full(len(Q), float(S[0] * n[0] + S[1] * n[1] + S[2] * n[2]) - dplane)
    ok = (dQ > PLANE_EPS) & (dS < -PLANE_EPS)
    denom = dQ - dS
    u = np.where(ok, dQ / np.where(denom == 0.0, 1.0, denom), 0.0)
    X = Q + u[:, None] * ((S - Q) if S.ndim == 2 else (S[None, :] - Q))
    return X, ok


def _in_facet_batch(scene: Scene, fid: int, pts: np.ndarray) -> np.ndarray:
    V = scene.facet_vertices[fid]
    u = V[1] - V[0]
    v = V[2] - V[0]
    w = pts - V[0]
    uu, uv, vv = float(u @ u), float(u @ v), float(v @ v)
    wu = dot3(w, u)
    wv = dot3(w, v)
    den = uu * vv - uv * uv
    b1 = (vv * wu - uv * wv) / den
    b2 = (uu * wv - uv * wu) / den
    return (b1 >= -1e-9) & (b2 >= -1e-9) & (1.0 - b1 - b2 >= -1e-9)


def backtrace_batch(tree: VisTree, node_idx: int, fops: np.ndarray) -> BatchPaths:
    """Exact path geometry from the tree's image chain for one node against
    (B,3) observation points. Walks backward from the observation point
    through the mirrored sources (and, past a diffraction, mirrored edges),
    validating plane crossings, facet membership, the edge parameter range,
    and the wedge exterior sector."""
    scene = tree.scene
    tx = tree.tx
    chain = tree.chain(node_idx)
    B = len(fops)
    valid = np.ones(B, dtype=bool)

    kinds = [n.kind for n in chain]
    pids = [n.pid for n in chain]
    d_idx = kinds.index(KIND_DIFFRACT) if KIND_DIFFRACT in kinds else None

    pts: list[np.ndarray | None] = [None] * len(chain)
    normals = [
        scene.facet_normals[n.pid] if n.kind == KIND_REFLECT else None for n in chain
    ]

    if d_idx is None:
        Q = fops
        for i in range(len(chain) - 1, -1, -1):
            n = chain[i]
            S_img = chain[i].orig  # image of Tx through hops 0..i
            X, ok = _plane_cross(S_img, Q, scene.facet_normals[n.pid], scene.facet_d[n.pid])
            ok &= _in_facet_batch(scene, n.pid, X)
            ok &= norm3(X - Q) > SEG_MIN
            valid &= ok
            pts[i] = X
            Q = X
        valid &= norm3(Q - tx) > SEG_MIN
        return BatchPaths(valid, pts, kinds, pids, normals)

    # single diffraction at d_idx
    dnode = chain[d_idx]
    edge = scene.edges[dnode.pid]
    last = chain[-1]
    ie1, ie2 = last.ie1, last.ie2
    e_vec = ie2 - ie1
    L = float(np.linalg.norm(e_vec))
    e_hat = e_vec / L
    S_star = last.orig

    w = fops - ie1
    Rz = dot3(w, e_hat)
    rR = norm3(w - Rz[:, None] * e_hat)
    ws = S_star - ie1
    Tz = float(ws @ e_hat)
    rT = float(np.linalg.norm(ws - Tz * e_hat))
    den = rT + rR
    valid &= den > 1e-12
    t = np.where(den > 1e-12, (rT * Rz + rR * Tz) / np.where(den > 1e-12, den, 1.0), 0.0) / L
    valid &= (t >= -1e-9) & (t <= 1.0 + 1e-9)
    t = np.clip(t, 0.0, 1.0)

    D_real = edge.p1 + t[:, None] * (edge.p2 - edge.p1)
    pts[d_idx] = D_real

    # exit chain: mirrored edge images vs. real observation points
    Q = fops
    exit_adj = fops
    for j in range(len(chain) - 1, d_idx, -1):
        n = chain[j]
        Dj = chain[j].ie1 + t[:, None] * (chain[j].ie2 - chain[j].ie1)
        nrm, dpl = scene.facet_normals[n.pid], scene.facet_d[n.pid]
        dQ = dot3(Q, nrm) - dpl
        dD = dot3(Dj, nrm) - dpl
        ok = (dQ > PLANE_EPS) & (dD < -PLANE_EPS)
        denom = dQ - dD
        u = np.where(ok, dQ / np.where(denom == 0.0, 1.0, denom), 0.0)
        X = Q + u[:, None] * (Dj - Q)
        ok &= _in_facet_batch(scene, n.pid, X)
        ok &= norm3(X - Q) > SEG_MIN
        valid &= ok
        pts[j] = X
        Q = X
        exit_adj = X
    valid &= norm3(D_real - exit_adj) > SEG_MIN

    # entry chain: mirrored sources vs. the real diffraction point
    Q = D_real
    entry_adj: np.ndarray | None = None
    for i in range(d_idx - 1, -1, -1):
        n = chain[i]
        S_img = chain[i].orig
        X, ok = _plane_cross(S_img, Q, scene.facet_normals[n.pid], scene.facet_d[n.pid])
        ok &= _in_facet_batch(scene, n.pid, X)
        ok &= norm3(X - Q) > SEG_MIN
        valid &= ok
        pts[i] = X
        Q = X
        if entry_adj is None:
            entry_adj = X
    if entry_adj is None:
        entry_adj = np.broadcast_to(tx, fops.shape)
        valid &= norm3(D_real - tx) > SEG_MIN

    # wedge sector checks in the real edge frame
    ef = _edge_frame_arrays(edge)
    n_pi = edge.nwedge * math.pi
    to_src = entry_adj - D_real
    to_obs = exit_adj - D_real
    phi_inc = _azimuth(ef, to_src)
    phi_out = _azimuth(ef, to_obs)
    valid &= (phi_inc >= -ANG_TOL) & (phi_inc <= n_pi + ANG_TOL)
    valid &= (phi_out >= -ANG_TOL) & (phi_out <= n_pi + ANG_TOL)
    d_in = D_real - entry_adj
    sinb = norm3(np.cross(d_in, edge.direction))
    valid &= sinb > 1e-6 * norm3(d_in)

    return BatchPaths(
        valid, pts, kinds, pids, normals,
        diff_index=d_idx,
        edge_dir=edge.direction,
        nwedge=edge.nwedge,
        phi_inc=phi_inc,
        phi_out=phi_out,
    )


def _edge_frame_arrays(edge: Edge):
    from .geom import edge_frame

    f = edge_frame(edge)
    return f.origin, f.rotation


def _azimuth(ef, vecs: np.ndarray) -> np.ndarray:
    _, R = ef
    return np.arctan2(dot3(vecs, R[:, 1]), dot3(vecs, R[:, 0])) % (2.0 * math.pi)


def backtrace(node, tx, fop) -> RayPath | None:
    """Single-pair convenience wrapper over the batched kernel: the exact
    geometric path for one tree node and one observation point, or None."""
    tree: VisTree = node.tree if hasattr(node, "tree") else node[0]
    idx = node.index if hasattr(node, "index") else node[1]
    fop = np.asarray(fop, dtype=float)
    bp = backtrace_batch(tree, idx, fop[None, :])
    if not bp.valid[0]:
        return None
    return _path_from_batch(tree, idx, bp, 0, fop)


def _path_from_batch(tree: VisTree, idx: int, bp: BatchPaths, b: int, fop) -> RayPath:
    scene = tree.scene
    hops = []
    for i, k in enumerate(bp.kinds):
        if k == KIND_REFLECT:
            hops.append(
                Hop("reflect", bp.pids[i], bp.points[i][b], normal=bp.normals[i])
            )
        else:
            hops.append(
                Hop(
                    "diffract",
                    bp.pids[i],
                    bp.points[i][b],
                    edge_dir=bp.edge_dir,
                    phi_inc=float(bp.phi_inc[b]),
                    phi_out=float(bp.phi_out[b]),
                    nwedge=bp.nwedge,
                )
            )
    seq = tuple((k, p) for k, p in zip(bp.kinds, bp.pids))
    return RayPath(tx=tree.tx, fop=np.asarray(fop, float), hops=hops, node_ref=idx, seq=seq)


def path_segments(path: RayPath):
    pts = [path.tx] + [h.point for h in path.hops] + [path.fop]
    return np.array(pts[:-1]), np.array(pts[1:])


def shadow_test(accel: Accel, path: RayPath) -> bool:
    """True iff every segment of the path is unoccluded (the primitives
    bounding each segment are excluded via the endpoint shrink)."""
    starts, ends = path_segments(path)
    return not segments_occluded(accel, starts, ends).any()


# ---------------------------------------------------------------------------
# Observation-point attachment
# ---------------------------------------------------------------------------


@dataclass
class StBatch:
    """A chunk of (node_index, fop_index) shadow-test work. node_index -1
    denotes the tree root (direct paths)."""

    pairs: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.pairs)


def fops_in_window(tree: VisTree, idx: int, fops: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Subset of candidate fop indices whose final-leg geometry lies inside
    the node's beam window (necessary condition for any path through the
    node to reach them)."""
    n = tree.nodes[idx]
    P = fops[cand]
    if not n.is_diff_win:
        local = (P - n.orig) @ n.R
        rho = np.hypot(local[:, 0], local[:, 1])
        theta = np.arctan2(rho, local[:, 2])
        ps, pw, tm, tM = n.win
        okt = (theta >= tm - ANG_TOL) & (theta <= tM + ANG_TOL)
        if pw >= 2.0 * math.pi - 1e-12:
            okp = np.ones(len(P), dtype=bool)
        else:
            phi = np.arctan2(local[:, 1], local[:, 0]) % (2.0 * math.pi)
            d = (phi - ps) % (2.0 * math.pi)
            okp = (d <= pw + ANG_TOL) | (d >= 2.0 * math.pi - ANG_TOL)
        return cand[okt & okp]

    pmin, pmax, tmin, tmax = n.win
    local = (P - n.eo) @ n.eR
    phi = np.arctan2(local[:, 1], local[:, 0]) % (2.0 * math.pi)
    okp = (phi >= pmin - ANG_TOL) & (phi <= pmax + ANG_TOL)

    e1l = (n.ie1 - n.eo) @ n.eR
    e2l = (n.ie2 - n.eo) @ n.eR
    P1z, P2z = e1l[2], e2l[2]
    Sl = (n.orig - n.eo) @ n.eR
    rT = math.hypot(Sl[0], Sl[1])
    Tz = Sl[2]
    rR = np.hypot(local[:, 0], local[:, 1])
    den = rT + rR
    with np.errstate(divide="ignore", invalid="ignore"):
        Dz = (rT * local[:, 2] + rR * Tz) / den
        t = (Dz - P1z) / (P2z - P1z)
    okt = (den > 1e-12) & (t >= tmin - 1e-9) & (t <= tmax + 1e-9)
    return cand[okp & okt]


def attach_fops(tree: VisTree, vis, fops: np.ndarray, batch_cap: int = DEFAULT_BATCH_CAP,
                include_direct: bool = True):
    """Stream of StBatch chunks pairing nodes with the observation points
    they can reach, ordered low level to high level; the root pairs every
    point (direct paths). The pair multiset is independent of batch_cap.
    include_direct=False omits the root pairs (used for all but the first
    partition of a partitioned run, where the root is shared)."""
    if batch_cap < 1:
        raise ValueError("batch_cap must be >= 1")
    fops = np.asarray(fops, dtype=float).reshape(-1, 3)
    pending: list[tuple[int, int]] = []

    def flush(force=False):
        while len(pending) >= batch_cap or (force and pending):
            chunk, pending[:] = pending[:batch_cap], pending[batch_cap:]
            yield StBatch(chunk)

    if include_direct:
        for f in range(len(fops)):
            pending.append((-1, f))
            yield from flush()

    for idx in tree.level_order():
        n = tree.nodes[idx]
        if n.kind == KIND_DIFFRACT:
            cand = np.nonzero(vis.edge_fop[n.pid])[0]
        else:
            cand = np.nonzero(vis.facet_fop[n.pid])[0]
        if len(cand) == 0:
            continue
        kept = fops_in_window(tree, idx, fops, cand)
        for f in kept:
            pending.append((idx, int(f)))
        yield from flush()
    yield from flush(force=True)
