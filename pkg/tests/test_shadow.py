import math

import numpy as np
import pytest

from itrace.geom import vec3
from itrace.scene import build_scene, _box_mesh, _ground_mesh, _merge_meshes
from itrace.shadow import (
    attach_fops,
    backtrace,
    backtrace_batch,
    build_accel,
    path_segments,
    segments_occluded,
    shadow_test,
)
from itrace.vistree import TreeLimits, build_tree
from itrace.visibility import precompute_visibility

RNG = np.random.default_rng(31337)


def _segment_hits_triangle(a, b, v0, v1, v2):
    """Scalar reference ray-triangle test for the linear-scan oracle."""
    d = b - a
    e1, e2 = v1 - v0, v2 - v0
    p = np.cross(d, e2)
    det = e1 @ p
    if abs(det) < 1e-300:
        return False
    inv = 1.0 / det
    tv = a - v0
    u = (tv @ p) * inv
    q = np.cross(tv, e1)
    v = (d @ q) * inv
    t = (e2 @ q) * inv
    return u >= 0 and v >= 0 and u + v <= 1 and 0 <= t <= 1


def random_scene(n_boxes=6, seed=1):
    rng = np.random.default_rng(seed)
    meshes = []
    for _ in range(n_boxes):
        c = rng.uniform(-20, 20, size=2)
        w, d, h = rng.uniform(2, 8, size=3)
        meshes.append(_box_mesh(c[0], c[1], c[0] + w, c[1] + d, 0.0, h))
    meshes.append(_ground_mesh(-30, -30, 30, 30, 2, 2))
    return build_scene(*_merge_meshes(meshes))


def test_single_facet_accel():
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float)
    s = build_scene(V, np.array([[0, 1, 2]]))
    accel = build_accel(s)
    assert accel.n_facets == 1
    occ = segments_occluded(
        accel, np.array([[0.2, 0.2, -1.0]]), np.array([[0.2, 0.2, 1.0]]), shrink=1e-9
    )
    assert occ[0]


def test_wall_blocks_segment():
    s = random_scene(1, seed=3)
    accel = build_accel(s)
    box = s.facets[0].vertices
    c = box.mean(axis=0)
    a = c + np.array([50.0, 0, 0])
    b = c - np.array([50.0, 0, 0])
    assert segments_occluded(accel, a[None], b[None])[0]


def test_bvh_agrees_with_linear_scan():
    s = random_scene(6, seed=11)
    accel = build_accel(s)
    n = 2000
    starts = RNG.uniform(-35, 35, size=(n, 3)) * np.array([1, 1, 0.3]) + [0, 0, 8]
    ends = RNG.uniform(-35, 35, size=(n, 3)) * np.array([1, 1, 0.3]) + [0, 0, 2]
    got = segments_occluded(accel, starts, ends, shrink=0.0)
    V = s.facet_vertices
    for i in range(n):
        ref = any(
            _segment_hits_triangle(starts[i], ends[i], *V[f]) for f in range(len(V))
        )
        assert got[i] == ref, i


def test_grazing_own_facet_not_occluding():
    # segment lying just above a ground plane passes (endpoint shrink)
    V, T = _ground_mesh(-10, -10, 10, 10, 1, 1)
    s = build_scene(V, T)
    accel = build_accel(s)
    a = np.array([[-5.0, 0.0, 0.0]])
    b = np.array([[5.0, 0.0, 0.0]])
    # exactly in-plane: hits; a epsilon above: passes
    assert segments_occluded(accel, a + [0, 0, 1e-3], b + [0, 0, 1e-3])[0] == False


# ---------------------------------------------------------------------------
# backtrace
# ---------------------------------------------------------------------------


def ground_scene():
    V, T = _ground_mesh(-50, -50, 600, 50, 1, 1)
    return build_scene(V, T)


class _TreeHandle:
    def __init__(self, tree, index):
        self.tree = tree
        self.index = index


def build_simple_tree(scene, tx, fops, limits=None):
    vis = precompute_visibility(scene, tx, fops)
    trees = build_tree(scene, tx, vis, limits or TreeLimits(1, 0, 1))
    return trees[0], vis


def test_backtrace_ground_reflection():
    s = ground_scene()
    tx = vec3(0, 0, 2)
    fop = vec3(4, 0, 2)
    tree, _ = build_simple_tree(s, tx, fop[None, :])
    refl_nodes = [i for i in range(len(tree)) if tree.nodes[i].kind == 0]
    paths = []
    for i in refl_nodes:
        p = backtrace(_TreeHandle(tree, i), tx, fop)
        if p is not None:
            paths.append(p)
    assert len(paths) == 1
    assert np.allclose(paths[0].hops[0].point, [2, 0, 0], atol=1e-9)


def test_backtrace_point_off_facet_is_rejected():
    # small ground patch: the specular point falls outside it
    V, T = _ground_mesh(10, 10, 12, 12, 1, 1)
    s = build_scene(V, T)
    tx = vec3(0, 0, 2)
    fop = vec3(4, 0, 2)
    tree, _ = build_simple_tree(s, tx, fop[None, :])
    for i in range(len(tree)):
        if tree.nodes[i].kind != 0:
            continue
        assert backtrace(_TreeHandle(tree, i), tx, fop) is None


def test_backtrace_specular_law_randomized():
    s = ground_scene()
    tx = vec3(0, 0, 7)
    fops = np.column_stack(
        [RNG.uniform(5, 400, 50), RNG.uniform(-30, 30, 50), RNG.uniform(1, 10, 50)]
    )
    tree, _ = build_simple_tree(s, tx, fops)
    worst = 0.0
    found = 0
    for i in range(len(tree)):
        if tree.nodes[i].kind != 0:
            continue
        bp = backtrace_batch(tree, i, fops)
        for b in np.nonzero(bp.valid)[0]:
            X = bp.points[0][b]
            d_in = (X - tx) / np.linalg.norm(X - tx)
            d_out = (fops[b] - X) / np.linalg.norm(fops[b] - X)
            n = np.array([0.0, 0.0, 1.0])
            worst = max(worst, abs((-d_in) @ n - d_out @ n))
            found += 1
    assert found == 50
    assert worst < 1e-9


def screen_with_edge():
    """Vertical half-plane screen: a thin sheet in the x=0 plane, z in [0,10],
    y in [-10, 0], with its top/side boundary edges."""
    V = np.array(
        [[0, -10, 0], [0, 0, 0], [0, 0, 10], [0, -10, 10]],
        dtype=float,
    )
    T = np.array([[0, 1, 2], [0, 2, 3]])
    return build_scene(V, T)


def test_backtrace_knife_edge_symmetry():
    s = screen_with_edge()
    # the vertical boundary edge at y=0
    edges = [e for e in s.edges
             if abs(e.p1[1]) < 1e-9 and abs(e.p2[1]) < 1e-9
             and abs(e.p1[0]) < 1e-9 and abs(e.p2[0] - 0) < 1e-9
             and abs(e.p1[2] - e.p2[2]) > 5]
    assert len(edges) == 1
    tx = vec3(-3, 3, 4)
    fop = vec3(3, 3, 4)  # mirrored across the screen plane, same height
    vis = precompute_visibility(s, tx, fop[None, :])
    trees = build_tree(s, tx, vis, TreeLimits(0, 1, 1))
    tree = trees[0]
    diff_nodes = [i for i in range(len(tree)) if tree.nodes[i].kind == 1
                  and tree.nodes[i].pid == edges[0].id]
    assert diff_nodes
    p = backtrace(_TreeHandle(tree, diff_nodes[0]), tx, fop)
    assert p is not None
    D = p.hops[0].point
    assert D[2] == pytest.approx(4.0, abs=1e-9)  # same height by symmetry
    e_hat = edges[0].direction
    d_in = (D - tx) / np.linalg.norm(D - tx)
    d_out = (fop - D) / np.linalg.norm(fop - D)
    assert d_in @ e_hat == pytest.approx(d_out @ e_hat, abs=1e-9)


def test_shadow_test_path():
    s = ground_scene()
    tx = vec3(0, 0, 2)
    fop = vec3(4, 0, 2)
    tree, _ = build_simple_tree(s, tx, fop[None, :])
    accel = build_accel(s)
    paths = [
        backtrace(_TreeHandle(tree, i), tx, fop)
        for i in range(len(tree))
        if tree.nodes[i].kind == 0
    ]
    paths = [p for p in paths if p is not None]
    assert len(paths) == 1
    assert shadow_test(accel, paths[0])
    starts, ends = path_segments(paths[0])
    assert len(starts) == 2 and len(ends) == 2


def test_shadow_test_blocked_by_inserted_wall():
    V, T = _merge_meshes(
        [
            _ground_mesh(-50, -50, 50, 50, 1, 1),
            _box_mesh(1.5, -5, 2.5, 5, 0, 10),  # wall between tx and fop
        ]
    )
    s = build_scene(V, T)
    tx = vec3(0, 0, 2)
    fop = vec3(4, 0, 2)
    vis = precompute_visibility(s, tx, fop[None, :])
    tree = build_tree(s, tx, vis, TreeLimits(1, 0, 1))[0]
    accel = build_accel(s)
    ground_nodes = [
        i for i in range(len(tree))
        if tree.nodes[i].kind == 0 and abs(s.facets[tree.nodes[i].pid].n[2] - 1) < 1e-9
        and s.facets[tree.nodes[i].pid].v0[2] == 0.0
    ]
    passed = 0
    for i in ground_nodes:
        p = backtrace(_TreeHandle(tree, i), tx, fop)
        if p is not None and shadow_test(accel, p):
            passed += 1
    assert passed == 0


# ---------------------------------------------------------------------------
# attach
# ---------------------------------------------------------------------------


def test_attach_chunking_and_multiset_invariance():
    s = random_scene(3, seed=7)
    tx = vec3(0, 0, 12)
    fops = np.column_stack(
        [RNG.uniform(-25, 25, 40), RNG.uniform(-25, 25, 40), np.full(40, 1.5)]
    )
    vis = precompute_visibility(s, tx, fops)
    tree = build_tree(s, tx, vis, TreeLimits(2, 1, 1))[0]

    def pair_multiset(cap):
        pairs = []
        for batch in attach_fops(tree, vis, fops, batch_cap=cap):
            assert len(batch) <= cap
            pairs.extend(batch.pairs)
        return sorted(pairs)

    base = pair_multiset(2**20)
    assert pair_multiset(7) == base
    assert pair_multiset(64) == base
    # root pairs every observation point
    assert sum(1 for n, _ in base if n == -1) == len(fops)
    # ordering low level to high level within the stream
    order = [n for batch in attach_fops(tree, vis, fops, 10**9) for n, _ in batch.pairs]
    levels = [0 if n < 0 else tree.nodes[n].level for n in order]
    assert levels == sorted(levels)


def test_attach_excludes_fop_behind_facet():
    s = facing = facing_wall = None
    V = np.array([[0, 0, 0], [0, 1, 0], [0, 1, 1], [0, 0, 1]], float)
    T = np.array([[0, 1, 2], [0, 2, 3]])
    s = build_scene(V, T)  # wall facing +x
    tx = vec3(2, 0.5, 0.5)
    fops = np.array([[1.0, 0.5, 0.5], [-1.0, 0.5, 0.5]])
    vis = precompute_visibility(s, tx, fops)
    tree = build_tree(s, tx, vis, TreeLimits(1, 0, 1))[0]
    pairs = [p for b in attach_fops(tree, vis, fops, 100) for p in b.pairs]
    node_pairs = [(n, f) for n, f in pairs if n >= 0]
    fops_attached = {f for _, f in node_pairs}
    assert 0 in fops_attached and 1 not in fops_attached
