"""
Reflectivity-edge maps built from multi-laser scans.

Every return is filed under its laser perspective (the laser id for a
non-canted scanner). Each perspective keeps a sparse sum grid and a sparse
hit-count grid, so a perspective's mean reflectivity exists only where it
actually hit. The fused map averages the forward-difference gradients of the
per-perspective means, which cancels any per-laser constant offset exactly.
"""
import os
import glob
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import sparse

from config import THREADS
from src.denoise import fista_denoise
from src.grid_core import (GradientField, GridGeometry, MaskedGrid, gradient, magnitude,
                           ratio_gradient, from_frame)
from src.utils import InputError, read_grd, write_frame, write_grd, write_pgm


KEY_MODES = ("laser", "laser_geometry")


@dataclass
class PerspectiveStack:
    geometry: GridGeometry
    sums: dict = field(default_factory=dict)     # key -> scipy.sparse.csr_matrix
    counts: dict = field(default_factory=dict)   # key -> scipy.sparse.csr_matrix
    key_mode: str = "laser"
    dropped: int = 0

    def __post_init__(self):
        if self.key_mode not in KEY_MODES:
            raise ValueError(f"Unknown perspective key mode '{self.key_mode}'")

    @property
    def perspectives(self):
        return sorted(self.counts)

    def __len__(self):
        return len(self.counts)

    @property
    def is_empty(self):
        return not self.counts

    def mean_grid(self, key):
        """The map-perspective X^phi: mean reflectivity where this perspective hit."""
        s = self.sums[key].toarray()
        c = self.counts[key].toarray()
        avail = c > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(avail, s / np.where(avail, c, 1.0), 0.0)
        return MaskedGrid(self.geometry, mean, avail)

    def total_counts(self):
        total = np.zeros(self.geometry.shape)
        for c in self.counts.values():
            total += c.toarray()
        return total


@dataclass
class EdgeMap:
    """
    Edge magnitude over a grid, plus the fused gradient it came from (None for
    plain reflectivity maps). `frame_pose` is the vehicle pose expressed in the
    map's own coordinates; global maps leave it at the origin.
    """
    fused: GradientField
    edge: MaskedGrid
    frame_pose: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def geometry(self):
        return self.edge.geometry

    @property
    def domain(self):
        return self.edge.mask


def perspective_keys(scan, key_mode="laser", angle_bin=np.radians(1.0), range_bin=0.5):
    if key_mode == "laser":
        return [int(b) for b in scan.laser]
    # canted scanners: the same laser sees the ground under several geometries
    t_bin = np.floor(scan.incidence / angle_bin).astype(np.int64)
    r_bin = np.floor(scan.range / range_bin).astype(np.int64)
    return list(zip(scan.laser.astype(np.int64).tolist(), t_bin.tolist(), r_bin.tolist()))


def accumulate(stack, scan):
    """Adds a world-frame scan to the stack in place and returns it. Out-of-bounds returns are dropped and counted."""
    if len(scan) == 0:
        return stack
    i, j, inside = stack.geometry.cell_index(scan.x, scan.y)
    dropped = int((~inside).sum())
    if dropped:
        stack.dropped += dropped
        logging.debug(f"Dropped {dropped} out-of-bounds returns from scan at t={scan.timestamp:.3f}")
    if not inside.any():
        return stack

    i, j = i[inside], j[inside]
    refl = np.asarray(scan.refl, dtype=np.float64)[inside]
    if stack.key_mode == "laser":
        keys = np.asarray(scan.laser)[inside]
        groups = {int(k): keys == k for k in np.unique(keys)}
    else:
        all_keys = perspective_keys(scan.subset(inside), stack.key_mode)
        groups = {}
        for idx, key in enumerate(all_keys):
            groups.setdefault(key, []).append(idx)

    shape = stack.geometry.shape
    for key, sel in groups.items():
        s = sparse.coo_matrix((refl[sel], (i[sel], j[sel])), shape=shape).tocsr()
        c = sparse.coo_matrix((np.ones(len(refl[sel])), (i[sel], j[sel])), shape=shape).tocsr()
        if key in stack.counts:
            stack.sums[key] = stack.sums[key] + s
            stack.counts[key] = stack.counts[key] + c
        else:
            stack.sums[key] = s
            stack.counts[key] = c
    return stack


def merge_stacks(a, b):
    """Associative reduction of two partial stacks over the same geometry."""
    if a.geometry != b.geometry:
        raise ValueError("Cannot merge perspective stacks with different geometries")
    merged = PerspectiveStack(a.geometry, dict(a.sums), dict(a.counts), a.key_mode, a.dropped + b.dropped)
    for key in b.counts:
        if key in merged.counts:
            merged.sums[key] = merged.sums[key] + b.sums[key]
            merged.counts[key] = merged.counts[key] + b.counts[key]
        else:
            merged.sums[key] = b.sums[key]
            merged.counts[key] = b.counts[key]
    return merged


def _bounding_box(counts):
    coo = counts.tocoo()
    if coo.nnz == 0:
        return None
    return coo.row.min(), coo.row.max() + 1, coo.col.min(), coo.col.max() + 1


def fuse_gradients(stack):
    """
    Cell-wise average of the per-perspective gradients over the perspectives
    whose gradient is available at that cell.
    """
    shape = stack.geometry.shape
    acc_dx = np.zeros(shape)
    acc_dy = np.zeros(shape)
    n_dx = np.zeros(shape, dtype=np.int64)
    n_dy = np.zeros(shape, dtype=np.int64)

    for key in stack.perspectives:
        box = _bounding_box(stack.counts[key])
        if box is None:
            continue
        i0, i1, j0, j1 = box
        s = stack.sums[key][i0:i1, j0:j1].toarray()
        c = stack.counts[key][i0:i1, j0:j1].toarray()
        dx, mdx, dy, mdy = ratio_gradient(s, c)
        acc_dx[i0:i1, j0:j1] += dx
        acc_dy[i0:i1, j0:j1] += dy
        n_dx[i0:i1, j0:j1] += mdx
        n_dy[i0:i1, j0:j1] += mdy

    mdx = n_dx > 0
    mdy = n_dy > 0
    fused_dx = np.where(mdx, acc_dx / np.maximum(n_dx, 1), 0.0)
    fused_dy = np.where(mdy, acc_dy / np.maximum(n_dy, 1), 0.0)
    return GradientField(MaskedGrid(stack.geometry, fused_dx, mdx), MaskedGrid(stack.geometry, fused_dy, mdy))


def fuse(stack, denoise=None):
    """
    Fused gradient plus its magnitude. `denoise` optionally names a DenoiseConfig
    applied to the fused components before the magnitude is taken.
    """
    if stack.is_empty:
        empty = MaskedGrid.unavailable(stack.geometry)
        return EdgeMap(GradientField(empty, empty.copy()), empty.copy())

    fused = fuse_gradients(stack)
    if denoise is not None:
        fused = fista_denoise(fused, denoise)
    return EdgeMap(fused, magnitude(fused))


def edge_map_from_grid(grid):
    """Edge map of a single fully trusted grid, e.g. the simulator's ground truth."""
    fused = gradient(grid)
    return EdgeMap(fused, magnitude(fused))


def geometry_for_scans(scans, cell_size=0.10, margin=1.0):
    """Smallest whole-cell grid holding every return, padded by `margin` meters."""
    xs = [s.x for s in scans if len(s)]
    ys = [s.y for s in scans if len(s)]
    if not xs:
        raise InputError("No returns to build a map from")
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    ox = np.floor((x.min() - margin) / cell_size) * cell_size
    oy = np.floor((y.min() - margin) / cell_size) * cell_size
    nx = int(np.ceil((x.max() + margin - ox) / cell_size))
    ny = int(np.ceil((y.max() + margin - oy) / cell_size))
    return GridGeometry(max(nx, 1), max(ny, 1), cell_size, (ox, oy))


def matched_scans(scans, trajectory, max_range=None):
    """
    Pairs each world-frame scan with its pose. Scans without a pose at their
    timestamp are rejected; with `max_range`, returns further than that from the
    sensor are dropped.
    """
    matched = []
    rejected = 0
    for scan in scans:
        pose = trajectory.pose_at(scan.timestamp)
        if pose is None:
            rejected += 1
            logging.warning(f"Rejected scan at t={scan.timestamp:.6f}: no pose at that timestamp")
            continue
        if max_range is not None and len(scan):
            keep = np.hypot(scan.x - pose[0], scan.y - pose[1]) <= max_range
            scan = scan.subset(keep)
        matched.append((scan, pose))
    if rejected:
        print(f"Warning: {rejected} scan(s) had no matching pose and were skipped.")
    return matched


def build_global_stack(trajectory, scans, geometry=None, cell_size=0.10, key_mode="laser",
                       max_range=None, threads=None):
    """Accumulates all survey scans. Partial stacks over scan chunks are built concurrently and merged."""
    pairs = matched_scans(scans, trajectory, max_range)
    kept = [scan for scan, _ in pairs]
    if geometry is None:
        geometry = geometry_for_scans(kept, cell_size)

    threads = max(1, min(threads or THREADS, len(kept) or 1))
    chunks = [kept[k::threads] for k in range(threads)]

    def build(chunk):
        partial = PerspectiveStack(geometry, key_mode=key_mode)
        for scan in chunk:
            accumulate(partial, scan)
        return partial

    if threads == 1:
        stack = build(kept)
    else:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            partials = list(executor.map(build, chunks))
        stack = partials[0]
        for partial in partials[1:]:
            stack = merge_stacks(stack, partial)

    if stack.dropped:
        logging.info(f"Global map dropped {stack.dropped} out-of-bounds returns")
    logging.info(f"Accumulated {len(kept)} scans into {len(stack)} perspectives on a "
                 f"{geometry.nx}x{geometry.ny} grid")
    return stack


def build_global_map(trajectory, scans, geometry=None, cell_size=0.10, key_mode="laser",
                     denoise=None, max_range=None, threads=None):
    stack = build_global_stack(trajectory, scans, geometry, cell_size, key_mode, max_range, threads)
    return fuse(stack, denoise)


@dataclass
class LocalMapState:
    """
    Rolling window of the most recent scans, placed at the pose estimates they
    were taken at. The grid stays axis-aligned with the world and is moved in
    whole cells once the vehicle leaves the centre cell.
    """
    extent: float = 40.0
    cell_size: float = 0.10
    window: int = 8
    key_mode: str = "laser"
    lut: object = None   # LutCalibration for reflectivity maps; None builds edge maps
    denoise: object = None
    scans: deque = field(default=None)
    geometry: GridGeometry = None

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("Local map window must hold at least one scan")
        if self.scans is None:
            self.scans = deque(maxlen=self.window)


def _snapped_geometry(extent, cell_size, center):
    geometry = GridGeometry.centered(extent, cell_size, center)
    ox = np.round(geometry.origin[0] / cell_size) * cell_size
    oy = np.round(geometry.origin[1] / cell_size) * cell_size
    return GridGeometry(geometry.nx, geometry.ny, cell_size, (ox, oy))


def update_local_map(state, new_scan, current_pose_estimate):
    """
    Inserts a sensor-frame scan taken at `current_pose_estimate`, evicts the
    oldest scan beyond the window, and rebuilds the local map.
    """
    pose = np.asarray(current_pose_estimate, dtype=float)
    if not np.all(np.isfinite(pose)):
        raise ValueError(f"Pose estimate must be finite, got {pose}")

    wx, wy = from_frame(pose, new_scan.x, new_scan.y)
    state.scans.append(new_scan.with_points(wx, wy))

    if state.geometry is None or np.hypot(pose[0] - state.geometry.center[0],
                                          pose[1] - state.geometry.center[1]) > state.cell_size:
        state.geometry = _snapped_geometry(state.extent, state.cell_size, pose[:2])

    if state.lut is not None:
        local = intensity_map_from_scans(state.scans, state.lut, state.geometry)
    else:
        stack = PerspectiveStack(state.geometry, key_mode=state.key_mode)
        for scan in state.scans:
            accumulate(stack, scan)
        local = fuse(stack, state.denoise)
    local.frame_pose = pose.copy()
    return local


@dataclass
class LutCalibration:
    """Per-laser lookup table mapping raw 8-bit levels to calibrated reflectivity."""
    laser_ids: list
    table: np.ndarray   # (B, 256)

    @property
    def levels(self):
        return np.arange(self.table.shape[1], dtype=float)

    def row(self, laser_id):
        try:
            return self.table[self.laser_ids.index(int(laser_id))]
        except ValueError:
            return self.levels

    def apply(self, scan):
        """Calibrated reflectivity of every return; unknown lasers pass through unchanged."""
        out = np.asarray(scan.refl, dtype=float).copy()
        for b in np.unique(scan.laser):
            sel = scan.laser == b
            out[sel] = np.interp(scan.refl[sel], self.levels, self.row(b))
        return out


def cross_laser_mean(stack):
    """Cell-wise average of the per-perspective means over the perspectives that hit the cell."""
    total = np.zeros(stack.geometry.shape)
    seen = np.zeros(stack.geometry.shape, dtype=np.int64)
    for key in stack.perspectives:
        coo = stack.counts[key].tocoo()
        sums = np.asarray(stack.sums[key][coo.row, coo.col]).ravel()
        total[coo.row, coo.col] += sums / coo.data
        seen[coo.row, coo.col] += 1
    avail = seen > 0
    return MaskedGrid.from_values(stack.geometry, np.where(avail, total / np.maximum(seen, 1), 0.0), avail)


def build_lut_calibration(scans, trajectory, geometry=None, cell_size=0.10, laser_ids=None, threads=None):
    """
    One-pass lookup table: table[b][v] is the mean, over every return of laser b
    with raw level v, of the cross-laser cell mean at that return's cell.
    Levels never seen are interpolated from their observed neighbours.
    """
    stack = build_global_stack(trajectory, scans, geometry, cell_size, "laser", threads=threads)
    target = cross_laser_mean(stack)
    if laser_ids is None:
        laser_ids = sorted({int(b) for scan in scans for b in np.unique(scan.laser)})

    levels = np.arange(256)
    row_of = {b: r for r, b in enumerate(laser_ids)}
    sums = np.zeros((len(laser_ids), 256))
    hits = np.zeros((len(laser_ids), 256))
    for scan, _ in matched_scans(scans, trajectory):
        if len(scan) == 0:
            continue
        i, j, inside = stack.geometry.cell_index(scan.x, scan.y)
        lvl = np.clip(np.round(scan.refl[inside]), 0, 255).astype(np.int64)
        goal = target.values[i[inside], j[inside]]
        lasers = scan.laser[inside]
        for b in np.unique(lasers):
            if int(b) not in row_of:
                continue
            sel = lasers == b
            r = row_of[int(b)]
            sums[r] += np.bincount(lvl[sel], weights=goal[sel], minlength=256)
            hits[r] += np.bincount(lvl[sel], minlength=256)

    table = np.tile(levels.astype(float), (len(laser_ids), 1))
    for r, b in enumerate(laser_ids):
        seen = hits[r] > 0
        if not seen.any():
            logging.warning(f"Laser {b} has no returns; its lookup row defaults to identity")
            print(f"Warning: laser {b} has no returns, using an identity lookup row.")
            continue
        observed = sums[r, seen] / hits[r, seen]
        table[r] = np.interp(levels, levels[seen], observed)

    logging.info(f"Built lookup-table calibration for {len(laser_ids)} lasers")
    return LutCalibration(list(laser_ids), table)


def intensity_map_from_scans(scans, lut, geometry):
    """Mean calibrated reflectivity per cell, wrapped as an EdgeMap without a gradient."""
    shape = geometry.shape
    total = np.zeros(shape)
    hits = np.zeros(shape)
    for scan in scans:
        if len(scan) == 0:
            continue
        i, j, inside = geometry.cell_index(scan.x, scan.y)
        calibrated = lut.apply(scan)[inside]
        np.add.at(total, (i[inside], j[inside]), calibrated)
        np.add.at(hits, (i[inside], j[inside]), 1.0)
    avail = hits > 0
    grid = MaskedGrid.from_values(geometry, np.where(avail, total / np.maximum(hits, 1.0), 0.0), avail)
    return EdgeMap(None, grid)


def build_intensity_map(trajectory, scans, lut, geometry=None, cell_size=0.10, max_range=None):
    """Calibrated reflectivity grid of a survey, the map used by reflectivity matching."""
    kept = [scan for scan, _ in matched_scans(scans, trajectory, max_range)]
    if geometry is None:
        geometry = geometry_for_scans(kept, cell_size)
    return intensity_map_from_scans(kept, lut, geometry)


def save_edge_map(edge_map, directory, name="edge"):
    os.makedirs(directory, exist_ok=True)
    write_grd(edge_map.edge, os.path.join(directory, f"{name}.grd"))
    if edge_map.fused is not None:
        write_grd(edge_map.fused.dx, os.path.join(directory, f"{name}_dx.grd"))
        write_grd(edge_map.fused.dy, os.path.join(directory, f"{name}_dy.grd"))
    write_pgm(edge_map.edge, os.path.join(directory, f"{name}.pgm"))


def load_edge_map(directory, name="edge"):
    edge = read_grd(os.path.join(directory, f"{name}.grd"))
    dx_path = os.path.join(directory, f"{name}_dx.grd")
    dy_path = os.path.join(directory, f"{name}_dy.grd")
    fused = None
    if os.path.exists(dx_path) and os.path.exists(dy_path):
        fused = GradientField(read_grd(dx_path), read_grd(dy_path))
    return EdgeMap(fused, edge)


def _key_dirname(key):
    if isinstance(key, tuple):
        return "phi_" + "_".join(str(k) for k in key)
    return f"phi_{key}"


def save_stack(stack, directory):
    """Writes stack/phi_<key>/{sum,count}.grd under `directory`."""
    root = os.path.join(directory, "stack")
    for key in stack.perspectives:
        counts = stack.counts[key].toarray()
        avail = counts > 0
        target = os.path.join(root, _key_dirname(key))
        os.makedirs(target, exist_ok=True)
        write_grd(MaskedGrid.from_values(stack.geometry, stack.sums[key].toarray(), avail),
                  os.path.join(target, "sum.grd"))
        write_grd(MaskedGrid.from_values(stack.geometry, counts, avail),
                  os.path.join(target, "count.grd"))
    logging.info(f"Saved {len(stack)} perspectives to {root}")


def load_stack(directory):
    root = os.path.join(directory, "stack")
    folders = sorted(glob.glob(os.path.join(root, "phi_*")))
    if not folders:
        raise InputError(f"No perspective folders under {root}")

    stack = None
    for folder in folders:
        parts = os.path.basename(folder)[len("phi_"):].split("_")
        key = int(parts[0]) if len(parts) == 1 else tuple(int(p) for p in parts)
        s = read_grd(os.path.join(folder, "sum.grd"))
        c = read_grd(os.path.join(folder, "count.grd"))
        if stack is None:
            stack = PerspectiveStack(s.geometry, key_mode="laser" if len(parts) == 1 else "laser_geometry")
        stack.sums[key] = sparse.csr_matrix(np.where(c.mask, s.values, 0.0))
        stack.counts[key] = sparse.csr_matrix(np.where(c.mask, c.values, 0.0))
    return stack


def save_lut(lut, path):
    """Long-format CSV: laser, level, value."""
    levels = np.arange(lut.table.shape[1])
    df = pd.DataFrame({
        "laser": np.repeat(lut.laser_ids, len(levels)),
        "level": np.tile(levels, len(lut.laser_ids)),
        "value": lut.table.ravel(),
    })
    write_frame(df, path, float_format="%.9f")


def load_lut(path):
    try:
        df = pd.read_csv(path)
    except FileNotFoundError:
        raise InputError(f"Lookup table not found: {path}")
    missing = [c for c in ("laser", "level", "value") if c not in df.columns]
    if missing:
        raise InputError(f"{path} is missing columns: {', '.join(missing)}")
    laser_ids = sorted(int(b) for b in df["laser"].unique())
    table = np.tile(np.arange(256, dtype=float), (len(laser_ids), 1))
    for r, b in enumerate(laser_ids):
        rows = df[df["laser"] == b]
        table[r, rows["level"].to_numpy(dtype=int)] = rows["value"].to_numpy(dtype=float)
    return LutCalibration(laser_ids, table)
