"""Visibility tree: every primitive sequence a ray can bounce through,
with per-node beam windows shrunk at each hop.

Observation points are deliberately not attached here (that happens in the
shadow-testing stage), so the tree depends only on the source position and
can be reused across observation layouts. Root subtrees are independent and
can be built in parallel; node order is deterministic for any worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import azb
from .azb import (
    DiffAzbRect,
    ReflAzbRect,
    clip_edge_to_rect,
    _facet_rects_batch,
    _points_in_triangles,
    _segment_rects_batch,
)
from .geom import Edge, Frame, mirror_basis, mirror_edge, edge_frame as make_edge_frame
from .scene import Scene

TWO_PI = 2.0 * math.pi
EST_NODE_BYTES = 700  # rough arena cost per node, for the memory gate


class MemoryBudgetError(MemoryError):
    pass


@dataclass(frozen=True)
class TreeLimits:
    max_reflections: int = 2
    max_diffractions: int = 1
    partition_count: int = 1

    def __post_init__(self):
        if not (0 <= self.max_reflections <= 6):
            raise ValueError("max_reflections must be in [0, 6]")
        if self.max_diffractions not in (0, 1):
            raise ValueError("max_diffractions must be 0 or 1")
        if self.partition_count < 1:
            raise ValueError("partition_count must be >= 1")


KIND_REFLECT = 0
KIND_DIFFRACT = 1


class _Node:
    __slots__ = (
        "kind", "pid", "parent", "level", "n_refl",
        "win", "is_diff_win", "orig", "R", "eo", "eR", "ie1", "ie2",
    )

    def __init__(self, kind, pid, parent, level, n_refl, win, is_diff_win,
                 orig, R, eo=None, eR=None, ie1=None, ie2=None):
        self.kind = kind
        self.pid = pid
        self.parent = parent
        self.level = level
        self.n_refl = n_refl
        self.win = win  # 4-tuple; (phi_start, phi_width, th_min, th_max) or
        #                 (phi_min, phi_max, t_min, t_max) when is_diff_win
        self.is_diff_win = is_diff_win
        self.orig = orig  # image-source position (frame origin)
        self.R = R  # image-source basis, 3x3 columns
        self.eo = eo  # wedge-frame origin (diffraction branches)
        self.eR = eR  # wedge-frame basis
        self.ie1 = ie1  # image edge endpoints
        self.ie2 = ie2


@dataclass(frozen=True)
class VisNode:
    """Read-only view of a tree node."""

    kind: str
    primitive_id: int
    level: int
    frame: Frame
    window: object
    image_edge: Edge | None
    index: int
    parent_index: int


class VisTree:
    def __init__(self, scene: Scene, tx: np.ndarray, ars_enabled: bool):
        self.scene = scene
        self.tx = np.asarray(tx, dtype=float)
        self.ars_enabled = ars_enabled
        self.nodes: list[_Node] = []
        self.root_frame = Frame.identity(self.tx)

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, idx: int) -> VisNode:
        n = self.nodes[idx]
        R = n.R
        frame = Frame(n.orig, R[:, 0].copy(), R[:, 1].copy(), R[:, 2].copy())
        if n.is_diff_win:
            window = DiffAzbRect(*n.win)
        else:
            window = ReflAzbRect(*n.win)
        image_edge = None
        if n.eo is not None:
            e = self.scene.edges[self._edge_id_of(idx)]
            image_edge = Edge(e.id, n.ie1, n.ie2, e.nwedge, e.face_a, e.face_b,
                              n.eR[:, 0].copy())
        return VisNode(
            kind="reflection-facet" if n.kind == KIND_REFLECT else "diffraction-edge",
            primitive_id=n.pid,
            level=n.level,
            frame=frame,
            window=window,
            image_edge=image_edge,
            index=idx,
            parent_index=n.parent,
        )

    def _edge_id_of(self, idx: int) -> int:
        while idx >= 0:
            n = self.nodes[idx]
            if n.kind == KIND_DIFFRACT:
                return n.pid
            idx = n.parent
        raise ValueError("node is not in a diffraction branch")

    def chain(self, idx: int) -> list[_Node]:
        """Nodes from the first hop down to idx, in path order."""
        out = []
        while idx >= 0:
            out.append(self.nodes[idx])
            idx = self.nodes[idx].parent
        out.reverse()
        return out

    def seq_key(self, idx: int) -> tuple:
        return tuple((n.kind, n.pid) for n in self.chain(idx))

    def level_order(self) -> list[int]:
        return sorted(range(len(self.nodes)), key=lambda i: self.nodes[i].level)

    def stats(self) -> dict:
        per_level: dict[int, int] = {}
        per_kind = {"reflection-facet": 0, "diffraction-edge": 0}
        for n in self.nodes:
            per_level[n.level] = per_level.get(n.level, 0) + 1
            per_kind["reflection-facet" if n.kind == KIND_REFLECT else "diffraction-edge"] += 1
        return {
            "node_count": len(self.nodes),
            "nodes_per_level": {str(k): v for k, v in sorted(per_level.items())},
            "nodes_per_kind": per_kind,
        }


def _mirror_arrays(orig, R, n, d):
    """Mirror a frame origin and basis across plane (n, d), rebuilding the
    third axis as ex x ey so the frame stays right-handed."""
    o2 = orig - 2.0 * (orig @ n - d) * n
    ex = R[:, 0] - 2.0 * (R[:, 0] @ n) * n
    ey = R[:, 1] - 2.0 * (R[:, 1] @ n) * n
    ez = np.cross(ex, ey)
    return o2, np.column_stack([ex, ey, ez])


class _Builder:
    def __init__(self, scene: Scene, tx, vis, limits: TreeLimits, ars: bool,
                 memory_budget_bytes: int | None = None):
        self.scene = scene
        self.vis = vis
        self.limits = limits
        self.ars = ars
        self.tx = np.asarray(tx, dtype=float)
        self.budget = memory_budget_bytes
        self.V = scene.facet_vertices
        self.N = scene.facet_normals
        self.D = scene.facet_d
        self.total_nodes = 0

    def _gate(self, extra: int):
        self.total_nodes += extra
        self.check_budget(0)

    def check_budget(self, pending: int):
        if (
            self.budget is not None
            and (self.total_nodes + pending) * EST_NODE_BYTES > self.budget
        ):
            raise MemoryBudgetError(
                f"tree arena exceeds memory budget at {self.total_nodes + pending} "
                f"nodes (~{(self.total_nodes + pending) * EST_NODE_BYTES / 1e6:.0f} MB); "
                f"raise partition_count (currently {self.limits.partition_count})"
            )

    # -- reflection-window expansion ------------------------------------

    def _refl_children(self, tree: VisTree, parent_idx: int, node: _Node | None):
        """Children of the root or of a pre-diffraction reflection node."""
        scene = self.scene
        if node is None:
            win = ReflAzbRect.full_sphere()
            orig = self.tx
            R = np.eye(3)
            cand_f = np.nonzero(self.vis.tx_facet)[0]
            cand_e = np.nonzero(self.vis.tx_edge)[0]
            n_refl = 0
            level = 0
        else:
            win = ReflAzbRect(*node.win)
            orig, R = node.orig, node.R
            cand_f = np.nonzero(self.vis.facet_facet[node.pid])[0]
            cand_e = np.nonzero(self.vis.facet_edge[node.pid])[0]
            n_refl = node.n_refl
            level = node.level
        frame = Frame(orig, R[:, 0], R[:, 1], R[:, 2])

        out = []
        if n_refl < self.limits.max_reflections and len(cand_f):
            # the image source must be strictly in front of the next facet
            dist = self.N[cand_f] @ orig - self.D[cand_f]
            cand_f = cand_f[dist > 1e-9]
        else:
            cand_f = cand_f[:0]
        if len(cand_f):
            ps, pw, tmin, tmax = _facet_rects_batch(frame, self.V[cand_f])
            inter = _intersect_refl_batch(win, ps, pw, tmin, tmax)
            for j, fid in enumerate(cand_f):
                w = inter[j]
                if w is None:
                    continue
                own = (ps[j], pw[j], tmin[j], tmax[j]) if not self.ars else w
                n_pl, d_pl = self.N[fid], self.D[fid]
                o2, R2 = _mirror_arrays(orig, R, n_pl, d_pl)
                flipped = (own[0], own[1], math.pi - own[3], math.pi - own[2])
                out.append(_Node(KIND_REFLECT, int(fid), parent_idx, level + 1,
                                 n_refl + 1, flipped, False, o2, R2))

        allow_diff = self.limits.max_diffractions > 0
        if allow_diff and len(cand_e):
            p1 = scene.edge_p1[cand_e]
            p2 = scene.edge_p2[cand_e]
            eps, epw, etm, etM = _segment_rects_batch(frame, p1, p2)
            keep = [
                j for j in range(len(cand_e))
                if _refl_windows_overlap(win, eps[j], epw[j], etm[j], etM[j])
            ]
            for j in keep:
                eid = int(cand_e[j])
                e = scene.edges[eid]
                clip = clip_edge_to_rect(win, e, S=orig, frame=frame)
                if clip.is_empty:
                    continue
                ef = make_edge_frame(e)
                n_pi = e.nwedge * math.pi
                t_lo, t_hi = (0.0, 1.0) if not self.ars else (clip.t_min, clip.t_max)
                out.append(_Node(KIND_DIFFRACT, eid, parent_idx, level + 1,
                                 n_refl, (0.0, n_pi, t_lo, t_hi), True,
                                 orig.copy(), R.copy(),
                                 eo=ef.origin, eR=ef.rotation,
                                 ie1=e.p1.copy(), ie2=e.p2.copy()))
        return out

    # -- diffraction-window expansion ------------------------------------

    def _diff_children(self, tree: VisTree, parent_idx: int, node: _Node):
        """Reflection children of a node inside a diffraction branch."""
        if node.n_refl >= self.limits.max_reflections:
            return []
        scene = self.scene
        eid = tree_edge_id = None
        if node.kind == KIND_DIFFRACT:
            eid = node.pid
            cand = np.nonzero(self.vis.facet_edge[:, eid])[0]
        else:
            cand = np.nonzero(self.vis.facet_facet[node.pid])[0]
        _ = tree_edge_id
        if not len(cand):
            return []

        nwedge = _branch_nwedge(tree, node, self)
        n_pi = nwedge * math.pi
        eo, eR = node.eo, node.eR
        ie1, ie2 = node.ie1, node.ie2
        S = node.orig
        win = node.win  # (phi_min, phi_max, t_min, t_max)

        # some image-edge point must be in front of the candidate facet
        dist1 = self.N[cand] @ ie1 - self.D[cand]
        dist2 = self.N[cand] @ ie2 - self.D[cand]
        cand = cand[np.maximum(dist1, dist2) > 1e-9]
        if not len(cand):
            return []

        res = _diff_windows_batch(eo, eR, ie1, ie2, S, self.V[cand], n_pi)
        out = []
        for j, fid in enumerate(cand):
            r = res[j]
            if r is None:
                continue
            p_lo, p_hi, t_lo, t_hi = r
            ip_lo, ip_hi = max(p_lo, win[0]), min(p_hi, win[1])
            it_lo, it_hi = max(t_lo, win[2]), min(t_hi, win[3])
            if ip_hi < ip_lo - 1e-12 or it_hi < it_lo - 1e-12:
                continue
            neww = (
                (p_lo, p_hi, max(t_lo, 0.0), min(t_hi, 1.0))
                if not self.ars
                else (ip_lo, max(ip_hi, ip_lo), it_lo, max(it_hi, it_lo))
            )
            if neww[2] > neww[3]:
                continue
            n_pl, d_pl = self.N[fid], self.D[fid]
            o2, R2 = _mirror_arrays(S, node.R, n_pl, d_pl)
            eo2, eR2 = _mirror_arrays(eo, eR, n_pl, d_pl)
            m1 = ie1 - 2.0 * (ie1 @ n_pl - d_pl) * n_pl
            m2 = ie2 - 2.0 * (ie2 @ n_pl - d_pl) * n_pl
            out.append(_Node(KIND_REFLECT, int(fid), parent_idx, node.level + 1,
                             node.n_refl + 1, neww, True, o2, R2,
                             eo=eo2, eR=eR2, ie1=m1, ie2=m2))
        return out

    def expand(self, tree: VisTree, parent_idx: int) -> list[_Node]:
        node = tree.nodes[parent_idx] if parent_idx >= 0 else None
        if node is None or (node.kind == KIND_REFLECT and not node.is_diff_win):
            return self._refl_children(tree, parent_idx, node)
        return self._diff_children(tree, parent_idx, node)


def _branch_nwedge(tree: VisTree, node: _Node, builder) -> float:
    n = node
    idx_nodes = tree.nodes
    while n.kind != KIND_DIFFRACT:
        n = idx_nodes[n.parent]
    return builder.scene.edges[n.pid].nwedge


def _intersect_refl_batch(win: ReflAzbRect, ps, pw, tmin, tmax):
    """Intersect a window with a batch of facet windows; list with None for
    empty results."""
    out = []
    for j in range(len(ps)):
        r = azb.refl_rect_intersect(win, ReflAzbRect(ps[j], pw[j], tmin[j], tmax[j]))
        out.append(None if r is None else (r.phi_start, r.phi_width, r.theta_min, r.theta_max))
    return out


def _refl_windows_overlap(win: ReflAzbRect, ps, pw, tm, tM, tol=1e-9) -> bool:
    if tM < win.theta_min - tol or tm > win.theta_max + tol:
        return False
    if win.full_azimuth or pw >= TWO_PI - 1e-12:
        return True
    delta = (ps - win.phi_start) % TWO_PI
    if delta <= win.phi_width + tol or delta >= TWO_PI - tol:
        return True
    return delta + pw >= TWO_PI - tol


def _diff_windows_batch(eo, eR, ie1, ie2, S, verts, n_pi):
    """Conservative phi-t windows of candidate facets about an (image) wedge.

    Azimuth span from vertex azimuths in the wedge frame; t span from the
    two extreme arcs of the annular bounding region of each facet. Returns a
    list of (phi_lo, phi_hi, t_lo, t_hi) or None (provably out of sector).
    """
    C = len(verts)
    Vl = (verts - eo) @ eR
    x, y, z = Vl[..., 0], Vl[..., 1], Vl[..., 2]
    rho = np.hypot(x, y)

    # azimuth spans
    ang = np.sort(np.arctan2(y, x) % TWO_PI, axis=1)
    gaps = np.stack(
        [ang[:, 1] - ang[:, 0], ang[:, 2] - ang[:, 1], ang[:, 0] + TWO_PI - ang[:, 2]],
        axis=1,
    )
    kmax = np.argmax(gaps, axis=1)
    width = TWO_PI - gaps[np.arange(C), kmax]
    start = ang[np.arange(C), (kmax + 1) % 3]

    near_axis = np.any(rho < 1e-9, axis=1) | _points_in_triangles(
        np.concatenate([Vl[..., :2], np.zeros((C, 3, 1))], axis=2), np.zeros((C, 3))
    )
    full_phi = near_axis | (width >= math.pi - 1e-12) | (start + width > TWO_PI + 1e-12)
    drop = (~full_phi) & (start > n_pi + 1e-12)

    phi_lo = np.where(full_phi, 0.0, np.clip(start, 0.0, n_pi))
    phi_hi = np.where(full_phi, n_pi, np.clip(start + width, 0.0, n_pi))

    # t spans from the bounding region
    Sl = (S - eo) @ eR
    rT = float(np.hypot(Sl[0], Sl[1]))
    Tz = float(Sl[2])
    P1z = float(((ie1 - eo) @ eR)[2])
    P2z = float(((ie2 - eo) @ eR)[2])

    z_min = z.min(axis=1)
    z_max = z.max(axis=1)
    r_outer = rho.max(axis=1)
    r_inner = _dist_origin_to_triangles_2d(Vl[..., :2])
    bad_region = near_axis | (r_inner < 1e-9)

    above = Tz > z_max
    below = Tz < z_min
    lo_r = np.where(above, r_inner, np.where(below, r_outer, r_inner))
    lo_z = z_min
    hi_r = np.where(above, r_outer, r_inner)
    hi_z = z_max

    def arc_t(r_arc, z_arc):
        with np.errstate(divide="ignore", invalid="ignore"):
            Dz = (rT * z_arc + r_arc * Tz) / (rT + r_arc)
            return (Dz - P1z) / (P2z - P1z)

    ta = arc_t(lo_r, lo_z)
    tb = arc_t(hi_r, hi_z)
    t_lo = np.minimum(ta, tb)
    t_hi = np.maximum(ta, tb)
    t_lo = np.where(bad_region, -np.inf, t_lo)
    t_hi = np.where(bad_region, np.inf, t_hi)

    out = []
    for j in range(C):
        if drop[j]:
            out.append(None)
        else:
            out.append((float(phi_lo[j]), float(phi_hi[j]), float(t_lo[j]), float(t_hi[j])))
    return out


def _dist_origin_to_triangles_2d(P: np.ndarray) -> np.ndarray:
    """Distance from the origin to each 2D triangle boundary. P: (C, 3, 2).
    Callers handle the origin-inside case separately."""
    best = np.full(len(P), np.inf)
    for i in range(3):
        a = P[:, i, :]
        ab = P[:, (i + 1) % 3, :] - a
        denom = np.einsum("ij,ij->i", ab, ab)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.clip(-np.einsum("ij,ij->i", a, ab) / denom, 0.0, 1.0)
        t = np.where(denom > 0, t, 0.0)
        q = a + t[:, None] * ab
        best = np.minimum(best, np.hypot(q[:, 0], q[:, 1]))
    return best


# ---------------------------------------------------------------------------
# Tree construction
# ---------------------------------------------------------------------------


def expand_node(tree: VisTree, parent_index: int, scene: Scene, vis,
                limits: TreeLimits) -> list[VisNode]:
    """Single-step expansion of one node (or the root for parent_index=-1):
    the children that survive visibility and window clipping, in primitive-id
    order. Mostly useful for inspection and tests; build_tree drives the
    same machinery breadth-first."""
    b = _Builder(scene, tree.tx, vis, limits, tree.ars_enabled)
    recs = b.expand(tree, parent_index)
    start = len(tree.nodes)
    tree.nodes.extend(recs)
    return [tree.node(i) for i in range(start, len(tree.nodes))]


def build_tree(
    scene: Scene,
    tx,
    vis,
    limits: TreeLimits,
    ars_enabled: bool = True,
    workers: int = 1,
    memory_budget_bytes: int | None = None,
):
    """Build the visibility tree(s). Returns a list of VisTree, one per
    partition; the union of root-to-node sequences is independent of the
    partition count. Level-1 subtrees are built as independent parallel
    units and merged in deterministic root order."""
    builder = _Builder(scene, tx, vis, limits, ars_enabled, memory_budget_bytes)
    seed_tree = VisTree(scene, tx, ars_enabled)
    roots = builder.expand(seed_tree, -1)
    builder._gate(len(roots))

    k = min(limits.partition_count, max(1, len(roots)))
    groups = np.array_split(np.arange(len(roots)), k) if roots else [np.arange(0)]

    trees = []
    for g in groups:
        tree = VisTree(scene, tx, ars_enabled)
        group_roots = [roots[i] for i in g]

        def build_subtree(root: _Node):
            sub: list[_Node] = [root]
            sub[0].parent = -1
            queue = [0]
            local = VisTree(scene, tx, ars_enabled)
            local.nodes = sub
            while queue:
                idx = queue.pop(0)
                children = builder.expand(local, idx)
                for ch in children:
                    ch.parent = idx
                base = len(sub)
                sub.extend(children)
                queue.extend(range(base, len(sub)))
                builder.check_budget(len(sub))
            return sub

        if workers > 1 and len(group_roots) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                subtrees = list(pool.map(build_subtree, group_roots))
        else:
            subtrees = [build_subtree(r) for r in group_roots]

        for sub in subtrees:
            offset = len(tree.nodes)
            for n in sub:
                if n.parent >= 0:
                    n.parent += offset
            tree.nodes.extend(sub)
            builder._gate(len(sub) - 1)  # roots were gated above
        trees.append(tree)
    return trees
