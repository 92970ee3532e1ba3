"""Conservative visibility relations between scene primitives, the source,
and the observation points.

The default mode is an exact mutual-facing plane cull: a relation is marked
false only when it provably cannot contribute (nothing of one primitive is
in front of the other's plane). An optional occlusion-sampling mode also
ray-casts a sample grid between pairs and demotes fully blocked pairs; it is
faster downstream but documented as potentially lossy and off by default.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import Scene

FRONT_EPS = 1e-9  # strictly-in-front margin, meters


@dataclass
class VisibilityData:
    facet_facet: np.ndarray  # (F, F) bool, symmetric, False diagonal
    facet_edge: np.ndarray  # (F, E) bool
    tx_facet: np.ndarray  # (F,) bool
    tx_edge: np.ndarray  # (E,) bool
    facet_fop: np.ndarray  # (F, M) bool
    edge_fop: np.ndarray  # (E, M) bool


def _front_of_facets(scene: Scene, pts: np.ndarray) -> np.ndarray:
    """(F, M) bool: point m strictly in front of facet f's plane."""
    N = scene.facet_normals
    d = scene.facet_d
    if len(pts) == 0 or len(N) == 0:
        return np.zeros((len(N), len(pts)), dtype=bool)
    return (N @ pts.T - d[:, None]) > FRONT_EPS


def _exterior_of_edges(scene: Scene, pts: np.ndarray) -> np.ndarray:
    """(E, M) bool: point in the union of an edge's exterior half-spaces.
    Half-plane edges (n = 2) see both sides."""
    ne, m = len(scene.edges), len(pts)
    out = np.zeros((ne, m), dtype=bool)
    front = _front_of_facets(scene, pts)
    for k, e in enumerate(scene.edges):
        if e.nwedge >= 2.0 - 1e-12:
            out[k] = True
        else:
            out[k] = front[e.face_a] | front[e.face_b]
    return out


def precompute_visibility(
    scene: Scene,
    tx: np.ndarray,
    fops: np.ndarray,
    mode: str = "plane-cull",
    occlusion_samples: int = 8,
) -> VisibilityData:
    """Visibility relations facet-facet, facet-edge, Tx-facet, Tx-edge,
    facet-FOP and edge-FOP.

    mode "plane-cull" (default, exactly conservative): facets are mutually
    visible iff each has a vertex strictly in front of the other's plane;
    points are visible from a facet iff strictly in front of it, and from an
    edge iff inside the union of its exterior half-spaces.
    mode "plane-cull+occlusion-sampling" additionally drops facet pairs whose
    K x K sample-point grid is entirely occluded (potentially lossy).
    """
    if mode not in ("plane-cull", "plane-cull+occlusion-sampling"):
        raise ValueError(f"unknown visibility mode {mode!r}")
    if len(scene.facets) == 0:
        raise ValueError("empty scene")
    tx = np.asarray(tx, dtype=float)
    fops = np.asarray(fops, dtype=float).reshape(-1, 3)

    V = scene.facet_vertices  # (F,3,3)
    N = scene.facet_normals
    d = scene.facet_d
    nf = len(scene.facets)

    # vertex k of facet j in front of facet i: dist[i, j, k]
    flat = V.reshape(-1, 3)
    dist = (N @ flat.T) - d[:, None]
    front_any = (dist.reshape(nf, nf, 3) > FRONT_EPS).any(axis=2)
    ff = front_any & front_any.T
    np.fill_diagonal(ff, False)

    ep = np.concatenate([scene.edge_p1, scene.edge_p2]) if scene.edges else np.zeros((0, 3))
    ne = len(scene.edges)
    if ne:
        dist_e = (N @ ep.T) - d[:, None]
        edge_front = (dist_e[:, :ne] > FRONT_EPS) | (dist_e[:, ne:] > FRONT_EPS)
        vflat_ext = _exterior_of_edges(scene, V.reshape(-1, 3))  # (E, F*3)
        facet_in_ext = vflat_ext.reshape(ne, nf, 3).any(axis=2).T
        fe = edge_front & facet_in_ext
    else:
        fe = np.zeros((nf, 0), dtype=bool)

    tx_f = _front_of_facets(scene, tx[None, :])[:, 0]
    tx_e = _exterior_of_edges(scene, tx[None, :])[:, 0] if ne else np.zeros(0, bool)
    f_fop = _front_of_facets(scene, fops)
    e_fop = _exterior_of_edges(scene, fops) if ne else np.zeros((0, len(fops)), bool)

    vis = VisibilityData(ff, fe, tx_f, tx_e, f_fop, e_fop)
    if mode == "plane-cull+occlusion-sampling":
        _demote_occluded_pairs(scene, vis, occlusion_samples)
    return vis


def _demote_occluded_pairs(scene: Scene, vis: VisibilityData, k: int) -> None:
    """Drop facet-facet pairs whose K x K grid of connecting segments is
    entirely occluded. Lossy in principle; kept behind an explicit mode."""
    from .shadow import build_accel, segments_occluded

    accel = build_accel(scene)
    V = scene.facet_vertices
    # barycentric sample grid per facet
    uv = [(i / (k + 1), j / (k + 1)) for i in range(1, k + 1) for j in range(1, k + 1) if i + j <= k + 1]
    w = np.array([[1.0 - u - v, u, v] for u, v in uv])  # (S,3)
    samples = np.einsum("sk,fkx->fsx", w, V)  # (F,S,3)
    nf = len(scene.facets)
    idx_i, idx_j = np.nonzero(np.triu(vis.facet_facet, 1))
    for i, j in zip(idx_i, idx_j):
        a = samples[i]
        b = samples[j]
        starts = np.repeat(a, len(b), axis=0)
        ends = np.tile(b, (len(a), 1))
        occ = segments_occluded(accel, starts, ends, shrink=1e-6 * scene.diameter)
        if occ.all():
            vis.facet_facet[i, j] = vis.facet_facet[j, i] = False


def save_visibility(vis: VisibilityData, scene: Scene, path) -> None:
    """Binary cache keyed by the scene content hash."""
    np.savez_compressed(
        path,
        scene_hash=np.frombuffer(bytes.fromhex(scene.content_hash()), dtype=np.uint8),
        facet_facet=vis.facet_facet,
        facet_edge=vis.facet_edge,
        tx_facet=vis.tx_facet,
        tx_edge=vis.tx_edge,
        facet_fop=vis.facet_fop,
        edge_fop=vis.edge_fop,
    )


def load_visibility(path, scene: Scene) -> VisibilityData | None:
    """Load a cache if it exists and matches the scene; None otherwise."""
    p = Path(path)
    if not p.exists():
        return None
    data = np.load(p)
    stored = bytes(data["scene_hash"].tobytes()).hex()
    if stored != scene.content_hash():
        return None
    return VisibilityData(
        facet_facet=data["facet_facet"],
        facet_edge=data["facet_edge"],
        tx_facet=data["tx_facet"],
        tx_edge=data["tx_edge"],
        facet_fop=data["facet_fop"],
        edge_fop=data["edge_fop"],
    )
