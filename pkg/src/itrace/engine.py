"""End-to-end orchestration: visibility, per-partition tree builds, batched
shadow testing overlapped with field evaluation, deterministic accumulation,
and result output.

Results are bit-identical across worker counts, batch caps, partition counts
and pipelining on/off: per-pair math is elementwise, and the final per-point
sums run in a canonical path order.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .fields import (
    RadioConfig,
    accumulate,
    dipole_field_batch,
    diffract_field,
    go_reflect_batch,
)
from .scene import Scene
from .shadow import (
    BatchPaths,
    Accel,
    attach_fops,
    backtrace_batch,
    build_accel,
    segments_occluded,
)
from .geom import norm3
from .visibility import VisibilityData, precompute_visibility
from .vistree import KIND_DIFFRACT, KIND_REFLECT, TreeLimits, VisTree, _Builder, VisNode


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    radio: RadioConfig
    tx: np.ndarray
    fops: np.ndarray
    limits: TreeLimits = dc_field(default_factory=TreeLimits)
    batch_cap: int = 2**20
    ars_enabled: bool = True
    visibility_mode: str = "plane-cull"
    workers: int = 1
    pipeline: bool = True
    partition_count: int | None = None  # overrides limits.partition_count
    memory_budget_mb: float = 4096.0
    seed: int = 0
    dump_paths: str | None = None

    def __post_init__(self):
        self.tx = np.asarray(self.tx, dtype=float).reshape(3)
        self.fops = np.asarray(self.fops, dtype=float).reshape(-1, 3)
        if self.batch_cap < 1:
            raise ConfigError("batch_cap must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.partition_count is not None:
            self.limits = TreeLimits(
                self.limits.max_reflections,
                self.limits.max_diffractions,
                self.partition_count,
            )


@dataclass
class RunResult:
    fops: np.ndarray
    E: np.ndarray  # (M,3) complex
    path_count: np.ndarray  # (M,)
    st_pairs: int
    tree_stats: list
    peak_nodes: int
    timings: dict

    @property
    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.E, axis=1)


def fops_line(p0, p1, n: int) -> np.ndarray:
    """n observation points uniformly spaced on the segment p0 -> p1."""
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    ts = np.linspace(0.0, 1.0, n)
    return p0[None, :] + ts[:, None] * (p1 - p0)


def fops_grid(x0, y0, x1, y1, nx: int, ny: int, z: float) -> np.ndarray:
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    return np.array([[x, y, z] for y in ys for x in xs])


# ---------------------------------------------------------------------------
# Field evaluation for batched validated paths
# ---------------------------------------------------------------------------


def _fields_for_group(tree: VisTree, bp: BatchPaths, fop_pts: np.ndarray,
                      cfg: RadioConfig) -> np.ndarray:
    """Complex E at each observation point for the already-validated entries
    of one node group. Mirrors the per-path composition exactly; all ops are
    elementwise so results do not depend on how entries were batched."""
    tx = tree.tx
    k = cfg.wavenumber
    if not bp.kinds:
        return dipole_field_batch(cfg, tx, fop_pts)

    seq = [np.broadcast_to(tx, fop_pts.shape)] + bp.points + [fop_pts]
    E = dipole_field_batch(cfg, tx, seq[1])
    s_acc = norm3(seq[1] - tx)
    for i, kind in enumerate(bp.kinds):
        seg_in = seq[i + 1] - seq[i]
        d_in = seg_in / norm3(seg_in)[:, None]
        seg_out = seq[i + 2] - seq[i + 1]
        s_next = norm3(seg_out)
        d_out = seg_out / s_next[:, None]
        if kind == KIND_REFLECT:
            n = np.broadcast_to(bp.normals[i], d_in.shape)
            E, _ = go_reflect_batch(E, d_in, n)
            E = E * ((s_acc / (s_acc + s_next)) * np.exp(-1j * k * s_next))[:, None]
            s_acc = s_acc + s_next
        else:
            s_out_total = np.zeros(len(fop_pts))
            for j in range(i + 1, len(seq) - 1):
                s_out_total = s_out_total + norm3(seq[j + 1] - seq[j])
            E = diffract_field(
                E, d_in, d_out, bp.edge_dir, bp.phi_inc, bp.phi_out,
                bp.nwedge, s_acc, s_out_total, k,
            )
            for j in range(i + 1, len(bp.kinds)):
                seg = seq[j + 1] - seq[j]
                dj = seg / norm3(seg)[:, None]
                E, _ = go_reflect_batch(E, dj, np.broadcast_to(bp.normals[j], dj.shape))
            break
    return E


def _masked_batch(bp: BatchPaths, mask: np.ndarray) -> BatchPaths:
    return BatchPaths(
        valid=bp.valid[mask],
        points=[p[mask] for p in bp.points],
        kinds=bp.kinds,
        pids=bp.pids,
        normals=bp.normals,
        diff_index=bp.diff_index,
        edge_dir=bp.edge_dir,
        nwedge=bp.nwedge,
        phi_inc=None if bp.phi_inc is None else bp.phi_inc[mask],
        phi_out=None if bp.phi_out is None else bp.phi_out[mask],
    )


def _st_stage(tree: VisTree, accel: Accel, batch, fops: np.ndarray, workers: int):
    """Backtrace and shadow-test one StBatch. Returns a list of validated
    node groups: (seq_key, masked BatchPaths, fop indices, tested count)."""
    groups: dict[int, list[int]] = {}
    for node_idx, fop_idx in batch.pairs:
        groups.setdefault(node_idx, []).append(fop_idx)

    def process(item):
        node_idx, fop_list = item
        fidx = np.array(fop_list, dtype=np.int64)
        pts = fops[fidx]
        if node_idx < 0:
            # direct paths: a single unoccluded segment
            occ = segments_occluded(accel, np.broadcast_to(tree.tx, pts.shape), pts)
            mask = ~occ
            bp = BatchPaths(valid=mask, points=[], kinds=[], pids=[], normals=[])
            return ((), bp, fidx, mask, len(fidx))
        bp = backtrace_batch(tree, node_idx, pts)
        mask = bp.valid.copy()
        if mask.any():
            chain_pts = [np.broadcast_to(tree.tx, pts.shape)] + bp.points + [pts]
            starts = np.concatenate([chain_pts[i][mask] for i in range(len(chain_pts) - 1)])
            ends = np.concatenate([chain_pts[i + 1][mask] for i in range(len(chain_pts) - 1)])
            occ = segments_occluded(accel, starts, ends)
            blocked = occ.reshape(len(chain_pts) - 1, -1).any(axis=0)
            mask[mask] = ~blocked
        return (tree.seq_key(node_idx), bp, fidx, mask, len(fidx))

    items = sorted(groups.items())
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(process, items))
    else:
        results = [process(it) for it in items]
    return results


def _fields_stage(tree: VisTree, st_results, fops: np.ndarray, radio: RadioConfig):
    """Field contributions for the validated pairs of one batch."""
    out = []
    for seq_key, bp, fidx, mask, _tested in st_results:
        if not mask.any():
            continue
        bpm = _masked_batch(bp, mask)
        fop_pts = fops[fidx[mask]]
        E = _fields_for_group(tree, bpm, fop_pts, radio)
        for row, f in enumerate(fidx[mask]):
            out.append((int(f), seq_key, E[row]))
    return out


def run(cfg: SimConfig, scene: Scene, vis: VisibilityData | None = None) -> RunResult:
    """Execute visibility -> per-partition tree build -> batched, pipelined
    shadow-test / field stages -> canonical accumulation."""
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    if vis is None:
        vis = precompute_visibility(scene, cfg.tx, cfg.fops, cfg.visibility_mode)
    timings["visibility_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    accel = build_accel(scene)
    timings["accel_s"] = time.perf_counter() - t0

    budget = int(cfg.memory_budget_mb * 1e6)
    builder = _Builder(scene, cfg.tx, vis, cfg.limits, cfg.ars_enabled, budget)
    seed_tree = VisTree(scene, cfg.tx, cfg.ars_enabled)
    roots = builder.expand(seed_tree, -1)
    builder._gate(len(roots))
    k = min(cfg.limits.partition_count, max(1, len(roots)))
    groups = np.array_split(np.arange(len(roots)), k)

    contributions = []
    st_pairs = 0
    tree_stats = []
    peak_nodes = 0
    dump_fh = open(cfg.dump_paths, "w", encoding="utf-8") if cfg.dump_paths else None
    t_tree = t_st = t_fields = 0.0

    try:
        for part_i, g in enumerate(groups):
            t0 = time.perf_counter()
            tree = _build_partition(builder, scene, cfg, [roots[i] for i in g])
            t_tree += time.perf_counter() - t0
            peak_nodes = max(peak_nodes, len(tree.nodes))
            tree_stats.append(tree.stats())

            pool = ThreadPoolExecutor(max_workers=1) if cfg.pipeline else None
            pending = None
            for batch in attach_fops(
                tree, vis, cfg.fops, cfg.batch_cap, include_direct=(part_i == 0)
            ):
                st_pairs += len(batch)
                t0 = time.perf_counter()
                st_results = _st_stage(tree, accel, batch, cfg.fops, cfg.workers)
                t_st += time.perf_counter() - t0
                if dump_fh is not None:
                    _dump_batch(dump_fh, tree, st_results, cfg.fops)
                if pool is not None:
                    if pending is not None:
                        contributions.extend(pending.result())
                    pending = pool.submit(
                        _timed_fields, tree, st_results, cfg.fops, cfg.radio
                    )
                else:
                    t0 = time.perf_counter()
                    contributions.extend(
                        _fields_stage(tree, st_results, cfg.fops, cfg.radio)
                    )
                    t_fields += time.perf_counter() - t0
            if pool is not None:
                if pending is not None:
                    res = pending.result()
                    contributions.extend(res)
                pool.shutdown()
            builder.total_nodes -= len(tree.nodes) - len(g)  # partition released
    finally:
        if dump_fh is not None:
            dump_fh.close()

    timings["tree_s"] = t_tree
    timings["shadow_s"] = t_st
    timings["fields_s"] = t_fields

    t0 = time.perf_counter()
    E, counts = accumulate(contributions, len(cfg.fops))
    timings["accumulate_s"] = time.perf_counter() - t0
    timings["total_s"] = sum(timings.values())

    return RunResult(
        fops=cfg.fops,
        E=E,
        path_count=counts,
        st_pairs=st_pairs,
        tree_stats=tree_stats,
        peak_nodes=peak_nodes,
        timings=timings,
    )


def _timed_fields(tree, st_results, fops, radio):
    return _fields_stage(tree, st_results, fops, radio)


def _build_partition(builder: _Builder, scene: Scene, cfg: SimConfig, group_roots):
    tree = VisTree(scene, cfg.tx, cfg.ars_enabled)

    def build_subtree(root):
        local = VisTree(scene, cfg.tx, cfg.ars_enabled)
        root.parent = -1
        local.nodes = [root]
        queue = [0]
        while queue:
            idx = queue.pop(0)
            children = builder.expand(local, idx)
            for ch in children:
                ch.parent = idx
            base = len(local.nodes)
            local.nodes.extend(children)
            queue.extend(range(base, len(local.nodes)))
            builder.check_budget(len(local.nodes))
        return local.nodes

    if cfg.workers > 1 and len(group_roots) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            subtrees = list(pool.map(build_subtree, group_roots))
    else:
        subtrees = [build_subtree(r) for r in group_roots]

    for sub in subtrees:
        offset = len(tree.nodes)
        for n in sub:
            if n.parent >= 0:
                n.parent += offset
        tree.nodes.extend(sub)
        builder._gate(len(sub) - 1)
    return tree


def _dump_batch(fh, tree: VisTree, st_results, fops):
    for seq_key, bp, fidx, mask, _ in st_results:
        for row, f in enumerate(fidx):
            rec = {
                "fop": int(f),
                "seq": [["RD"[k], int(p)] for k, p in seq_key],
                "points": [list(map(float, p[row])) for p in bp.points]
                if bp.valid[row]
                else [],
                "passed": bool(mask[row]),
            }
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

CSV_HEADER = (
    "fop_index,x,y,z,Ex_re,Ex_im,Ey_re,Ey_im,Ez_re,Ez_im,"
    "Emag_V_per_m,Emag_dBuV_per_m,path_count"
)


def write_results(res: RunResult, path, stats_path=None) -> None:
    """Full-precision CSV per observation point plus a summary JSON with
    timings and tree statistics alongside."""
    path = Path(path)
    g = lambda x: format(float(x), ".17g")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        mags = res.magnitude
        for i in range(len(res.fops)):
            E = res.E[i]
            mag = mags[i]
            db = 20.0 * math.log10(mag / 1e-6) if mag > 0 else float("-inf")
            row = [
                str(i),
                g(res.fops[i][0]), g(res.fops[i][1]), g(res.fops[i][2]),
                g(E[0].real), g(E[0].imag),
                g(E[1].real), g(E[1].imag),
                g(E[2].real), g(E[2].imag),
                g(mag), g(db) if math.isfinite(db) else "-inf",
                str(int(res.path_count[i])),
            ]
            fh.write(",".join(row) + "\n")
    summary = {
        "fop_count": len(res.fops),
        "st_pairs": res.st_pairs,
        "peak_nodes": res.peak_nodes,
        "tree_stats": res.tree_stats,
        "timings": res.timings,
        "total_paths": int(res.path_count.sum()),
    }
    spath = Path(stats_path) if stats_path else path.with_suffix(path.suffix + ".summary.json")
    with open(spath, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)


def read_results_csv(path):
    """Round-trip reader for the results CSV (full float precision)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise ValueError("unexpected results header")
        for line in fh:
            parts = line.strip().split(",")
            rows.append(
                {
                    "fop_index": int(parts[0]),
                    "pos": np.array([float(parts[1]), float(parts[2]), float(parts[3])]),
                    "E": np.array(
                        [
                            float(parts[4]) + 1j * float(parts[5]),
                            float(parts[6]) + 1j * float(parts[7]),
                            float(parts[8]) + 1j * float(parts[9]),
                        ]
                    ),
                    "mag": float(parts[10]),
                    "db": float(parts[11]),
                    "path_count": int(parts[12]),
                }
            )
    return rows
