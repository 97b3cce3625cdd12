"""
Map-to-map registration by normalized mutual information (NMI).

A local edge map is compared against the global edge map for every pose on a
regular (x, y, heading) lattice; the best-scoring pose becomes the measurement
and the spread of the score surface becomes its covariance.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from config import THREADS
from src.grid_core import compose, relative, wrap_angle
from src.utils import UndefinedEntropyError


BIN_MODES = ("range", "quantile")
PEAK_TO_EDGE = 100.0


@dataclass
class HistogramSpec:
    """
    `mode` "range": uniform bins over value_range, or over the 1st-99th
    percentile of the reference values when value_range is None.
    `mode` "quantile": equal-population bins computed per grid.
    """
    bin_count: int = 64
    value_range: tuple = None
    min_overlap: int = 100
    mode: str = "range"
    percentiles: tuple = (1.0, 99.0)

    def __post_init__(self):
        if self.bin_count < 2:
            raise ValueError(f"bin_count must be at least 2, got {self.bin_count}")
        if self.value_range is not None and not self.value_range[0] < self.value_range[1]:
            raise ValueError(f"value_range must satisfy lo < hi, got {self.value_range}")
        if self.mode not in BIN_MODES:
            raise ValueError(f"Unknown binning mode '{self.mode}'")


@dataclass
class SearchWindow:
    center: tuple
    half_extent: tuple
    step: tuple = (0.2, 0.2, np.radians(0.5))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.half_extent = np.asarray(self.half_extent, dtype=float)
        self.step = np.asarray(self.step, dtype=float)
        if np.any(self.step <= 0):
            raise ValueError(f"Search steps must be positive, got {self.step}")
        if np.any(self.half_extent < 0):
            raise ValueError(f"Search half extents must be non-negative, got {self.half_extent}")


@dataclass
class Lattice:
    xs: np.ndarray
    ys: np.ndarray
    hs: np.ndarray
    step: np.ndarray

    @classmethod
    def from_window(cls, window):
        axes = []
        for c, e, s in zip(window.center, window.half_extent, window.step):
            n = int(np.floor(e / s + 1e-9))
            axes.append(c + np.arange(-n, n + 1) * s)
        return cls(axes[0], axes[1], axes[2], window.step.copy())

    @property
    def shape(self):
        return (len(self.xs), len(self.ys), len(self.hs))

    @property
    def size(self):
        return int(np.prod(self.shape))

    def poses(self):
        """All candidates as an (N, 3) array in lexicographic (x, y, h) order."""
        gx, gy, gh = np.meshgrid(self.xs, self.ys, self.hs, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel(), gh.ravel()])

    def index_offsets(self):
        """Signed lattice steps of every candidate from the window centre, shape (N, 3)."""
        grids = np.meshgrid(*[np.arange(n) - (n - 1) // 2 for n in self.shape], indexing="ij")
        return np.column_stack([g.ravel() for g in grids])

    def boundary_mask(self):
        """Candidates on the outer face of any axis that has more than one value."""
        mask = np.zeros(self.shape, dtype=bool)
        for axis, n in enumerate(self.shape):
            if n < 2:
                continue
            index = [slice(None)] * 3
            index[axis] = 0
            mask[tuple(index)] = True
            index[axis] = n - 1
            mask[tuple(index)] = True
        return mask


@dataclass
class NmiValue:
    value: float
    overlap: int
    sufficient: bool
    h_a: float = float("nan")
    h_b: float = float("nan")
    h_ab: float = float("nan")


@dataclass
class RegistrationResult:
    best_pose: np.ndarray
    nmi_surface: np.ndarray
    overlap: np.ndarray
    measurement_cov: np.ndarray
    lattice: Lattice
    usable: bool = True
    best_nmi: float = float("nan")
    best_overlap: int = 0
    boundary_max: bool = False
    levels: list = field(default_factory=list)

    def surface_frame(self):
        """One row per candidate: x, y, h, nmi, overlap."""
        poses = self.lattice.poses()
        return pd.DataFrame({
            "x": poses[:, 0],
            "y": poses[:, 1],
            "h": poses[:, 2],
            "nmi": self.nmi_surface.ravel(),
            "overlap": self.overlap.ravel(),
        })


def histogram_edges(values, binning):
    """Bin edges (bin_count + 1 of them) for the given reference values."""
    values = np.asarray(values, dtype=float)
    nb = binning.bin_count
    if binning.mode == "quantile":
        if values.size == 0:
            raise UndefinedEntropyError("Cannot place quantile bins over zero values")
        return np.quantile(values, np.linspace(0.0, 1.0, nb + 1), method="inverted_cdf")

    if binning.value_range is not None:
        lo, hi = binning.value_range
    elif values.size:
        lo, hi = np.percentile(values, binning.percentiles)
    else:
        lo, hi = 0.0, 1.0
    if not hi > lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, nb + 1)


def bin_values(values, edges):
    """Bin index of every value; values outside the edges land in the first or last bin."""
    nb = len(edges) - 1
    idx = np.searchsorted(edges[1:-1], np.asarray(values, dtype=float), side="right")
    return np.clip(idx, 0, nb - 1)


def entropy_of_counts(counts):
    c = np.sort(np.asarray(counts, dtype=float)[np.asarray(counts) > 0])
    if c.size == 0:
        return 0.0
    p = c / c.sum()
    return float(-np.sum(p * np.log2(p))) + 0.0


def entropy(g, binning, edges=None):
    """Shannon entropy in bits of the binned available values of `g`."""
    values = g.available_values()
    if values.size == 0:
        raise UndefinedEntropyError("Entropy is undefined over a grid with no available cells")
    if edges is None:
        edges = histogram_edges(values, binning)
    counts = np.bincount(bin_values(values, edges), minlength=binning.bin_count)
    return entropy_of_counts(counts)


def _nmi_from_bins(bins_a, bins_b, nb):
    return _nmi_from_joint(np.bincount(bins_a * nb + bins_b, minlength=nb * nb).reshape(nb, nb))


def _nmi_from_joint(joint):
    h_a = entropy_of_counts(joint.sum(axis=1))
    h_b = entropy_of_counts(joint.sum(axis=0))
    h_ab = entropy_of_counts(joint)
    if h_ab <= 0.0:
        return 2.0, h_a, h_b, h_ab
    return float(np.clip((h_a + h_b) / h_ab, 1.0, 2.0)), h_a, h_b, h_ab


def nmi(a, b, binning, edges_a=None, edges_b=None):
    """
    (H(A) + H(B)) / H(A, B) over the cells available in both grids. With no
    edges given, range-mode bins come from the pooled overlap values and
    quantile-mode bins from each grid's own overlap values.
    """
    if a.geometry != b.geometry:
        raise ValueError("nmi needs two grids with identical geometry")
    overlap = a.mask & b.mask
    n = int(overlap.sum())
    if n < max(binning.min_overlap, 1):
        return NmiValue(float("nan"), n, False)

    va, vb = a.values[overlap], b.values[overlap]
    if edges_a is None:
        if binning.mode == "quantile":
            edges_a, edges_b = histogram_edges(va, binning), histogram_edges(vb, binning)
        else:
            edges_a = histogram_edges(np.concatenate([va, vb]), binning)
    if edges_b is None:
        edges_b = edges_a

    value, h_a, h_b, h_ab = _nmi_from_bins(bin_values(va, edges_a), bin_values(vb, edges_b), binning.bin_count)
    return NmiValue(value, n, True, h_a, h_b, h_ab)


def candidate_offset(candidate, frame_pose):
    """Rigid transform taking local-map coordinates into the global map for a candidate vehicle pose."""
    return compose(candidate, relative(frame_pose, np.zeros(3)))


def _heading_coordinates(h, lattice, local_pts, global_geometry, frame_pose):
    """Fractional global cell coordinates of the local points for the first (x, y) candidate at heading h."""
    tx, ty, th = candidate_offset((lattice.xs[0], lattice.ys[0], h), frame_pose)
    c, s = np.cos(th), np.sin(th)
    cs = global_geometry.cell_size
    u = (c * local_pts[0] - s * local_pts[1] + tx - global_geometry.origin[0]) / cs
    w = (s * local_pts[0] + c * local_pts[1] + ty - global_geometry.origin[1]) / cs
    return u, w


def _cell_shifts(lattice, cell_size):
    """Whole-cell offsets of every x and y candidate from the first one."""
    shift_i = np.round((lattice.xs - lattice.xs[0]) / cell_size).astype(np.int64)
    shift_j = np.round((lattice.ys - lattice.ys[0]) / cell_size).astype(np.int64)
    return shift_i, shift_j


def _padded_bin_table(global_bins, global_mask, nb, pad_i, pad_j):
    """Global bins with unavailable cells and a (pad_i, pad_j) margin set to the extra bin `nb`, flattened."""
    table = np.where(global_mask, global_bins, nb)
    return np.pad(table, ((pad_i, pad_i), (pad_j, pad_j)), constant_values=nb).ravel()


def _search_heading_shifted(h, lattice, local_pts, local_bins, table, shifts, global_geometry, frame_pose, nb,
                            min_overlap):
    """
    Integer-cell translations: every candidate reads the padded bin table at one
    fixed flat offset from the first candidate's cells, and the extra bin column
    of the joint histogram collects the points that miss the global map.
    """
    nx, ny, _ = lattice.shape
    surface = np.full((nx, ny), np.nan)
    overlap = np.zeros((nx, ny), dtype=np.int64)
    shift_i, shift_j = shifts
    pad_i, pad_j = int(shift_i[-1]), int(shift_j[-1])
    width = global_geometry.ny + 2 * pad_j

    u, w = _heading_coordinates(h, lattice, local_pts, global_geometry, frame_pose)
    base_i = np.floor(u).astype(np.int64)
    base_j = np.floor(w).astype(np.int64)
    # points no translation can bring onto the global map never count
    reach = ((base_i >= -pad_i) & (base_i < global_geometry.nx)
             & (base_j >= -pad_j) & (base_j < global_geometry.ny))
    codes = local_bins[reach] * (nb + 1)
    flat = (base_i[reach] + pad_i) * width + (base_j[reach] + pad_j)

    for a, di in enumerate(shift_i):
        for b, dj in enumerate(shift_j):
            joint = np.bincount(codes + np.take(table, flat + (di * width + dj)), minlength=nb * (nb + 1))
            joint = joint.reshape(nb, nb + 1)[:, :nb]
            n = int(joint.sum())
            overlap[a, b] = n
            if n < min_overlap:
                continue
            surface[a, b] = _nmi_from_joint(joint)[0]
    return surface, overlap


def _search_heading(h, lattice, local_pts, local_bins, global_bins, global_mask, global_geometry,
                    frame_pose, nb, min_overlap):
    nx, ny, _ = lattice.shape
    surface = np.full((nx, ny), np.nan)
    overlap = np.zeros((nx, ny), dtype=np.int64)

    u, w = _heading_coordinates(h, lattice, local_pts, global_geometry, frame_pose)
    cs = global_geometry.cell_size
    for a in range(nx):
        shift_x = (lattice.xs[a] - lattice.xs[0]) / cs
        for b in range(ny):
            shift_y = (lattice.ys[b] - lattice.ys[0]) / cs
            si = np.floor(u + shift_x).astype(np.int64)
            sj = np.floor(w + shift_y).astype(np.int64)
            inside = (si >= 0) & (si < global_geometry.nx) & (sj >= 0) & (sj < global_geometry.ny)
            ok = inside.copy()
            ok[inside] = global_mask[si[inside], sj[inside]]
            n = int(ok.sum())
            overlap[a, b] = n
            if n < min_overlap:
                continue
            surface[a, b], _, _, _ = _nmi_from_bins(local_bins[ok], global_bins[si[ok], sj[ok]], nb)
    return surface, overlap


def search(local, global_map, window, binning=None, bin_edges=None, threads=None):
    """
    Exhaustive NMI search of `window`. Every lattice pose is scored by pulling the
    global map into the local map's frame; the best pose is the maximiser, with
    ties going to the candidate closest to the window centre (counted in lattice
    steps) and then to the lexicographically smallest (x, y, h).

    `bin_edges` fixes the global (and, in range mode, shared) bin edges so
    repeated searches against one global map bin it only once.
    """
    binning = binning or HistogramSpec()
    lattice = Lattice.from_window(window)
    nb = binning.bin_count
    min_overlap = max(binning.min_overlap, 1)

    local_mask = local.edge.mask
    global_mask = global_map.edge.mask
    if bin_edges is None:
        bin_edges = histogram_edges(global_map.edge.available_values(), binning)
    if binning.mode == "quantile" and local_mask.any():
        local_edges = histogram_edges(local.edge.available_values(), binning)
    else:
        local_edges = bin_edges

    surface = np.full(lattice.shape, np.nan)
    overlap = np.zeros(lattice.shape, dtype=np.int64)

    if local_mask.sum() >= min_overlap:
        px, py = local.geometry.cell_centers()
        local_pts = (px[local_mask], py[local_mask])
        local_bins = bin_values(local.edge.values[local_mask], local_edges)
        global_bins = bin_values(global_map.edge.values, bin_edges)
        cs = global_map.geometry.cell_size
        ratios = lattice.step[:2] / cs
        integer_shift = bool(np.all(np.abs(ratios - np.round(ratios)) < 1e-9))

        if integer_shift:
            shifts = _cell_shifts(lattice, cs)
            table = _padded_bin_table(global_bins, global_mask, nb, int(shifts[0][-1]), int(shifts[1][-1]))

            def run(k):
                return _search_heading_shifted(lattice.hs[k], lattice, local_pts, local_bins, table, shifts,
                                               global_map.geometry, local.frame_pose, nb, min_overlap)
        else:
            def run(k):
                return _search_heading(lattice.hs[k], lattice, local_pts, local_bins, global_bins, global_mask,
                                       global_map.geometry, local.frame_pose, nb, min_overlap)

        workers = max(1, min(threads or THREADS, len(lattice.hs)))
        if workers == 1:
            results = [run(k) for k in range(len(lattice.hs))]
        else:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                results = list(executor.map(run, range(len(lattice.hs))))
        for k, (surf_k, ov_k) in enumerate(results):
            surface[:, :, k] = surf_k
            overlap[:, :, k] = ov_k

    flat = surface.ravel()
    valid = np.isfinite(flat)
    if not valid.any():
        logging.info(f"No candidate of {lattice.size} reached {min_overlap} overlapping cells")
        return RegistrationResult(np.asarray(window.center, dtype=float), surface, overlap, None, lattice,
                                  usable=False)

    best = best_candidate(surface, lattice)
    best_value = flat[best]

    pose = lattice.poses()[best]
    R, on_boundary = fit_covariance(surface, lattice, best_index=best)
    best_pose = np.array([pose[0], pose[1], float(wrap_angle(pose[2]))])
    return RegistrationResult(best_pose, surface, overlap, R, lattice, usable=R is not None,
                              best_nmi=float(best_value), best_overlap=int(overlap.ravel()[best]),
                              boundary_max=on_boundary)


def best_candidate(nmi_surface, lattice):
    """
    Flat index of the maximiser. Ties go to the smallest Euclidean distance from
    the window centre counted in lattice steps per axis (not metres and radians),
    then to the lowest flat index.
    """
    flat = np.asarray(nmi_surface, dtype=float).ravel()
    valid = np.isfinite(flat)
    ties = np.flatnonzero(valid & (flat == flat[valid].max()))
    if len(ties) > 1:
        dist = np.sqrt(np.sum(lattice.index_offsets()[ties] ** 2, axis=1))
        ties = ties[np.lexsort((ties, dist))]
    return int(ties[0])


def weight_rate(values, boundary):
    """
    Exponential rate kappa such that the weight of the best boundary candidate is
    1/100 of the peak weight; zero for a surface whose peak does not rise above
    its boundary.
    """
    finite = np.isfinite(values)
    peak = values[finite].max()
    edge_vals = values[boundary & finite]
    edge = edge_vals.max() if edge_vals.size else peak
    if peak - edge <= 0:
        return 0.0
    return float(np.log(PEAK_TO_EDGE) / (peak - edge))


def fit_covariance(nmi_surface, lattice, best_index=None):
    """
    Weighted second moment of the candidate poses with weights
    max(exp(kappa * (NMI - NMI_max)) - 1/100, 0), so candidates scoring no
    better than the best boundary candidate get no weight. Diagonals are floored
    at (step / 2)^2. A maximum on the window boundary inflates the result ten
    times and is reported through the second return value.
    """
    values = np.asarray(nmi_surface, dtype=float).ravel()
    finite = np.isfinite(values)
    if not finite.any():
        raise ValueError("Cannot fit a covariance to a surface with no scored candidates")

    boundary = lattice.boundary_mask().ravel()
    kappa = weight_rate(values, boundary)
    peak = values[finite].max()
    weights = np.zeros_like(values)
    if kappa == 0.0:
        weights[finite] = 1.0
    else:
        weights[finite] = np.maximum(np.exp(kappa * (values[finite] - peak)) - 1.0 / PEAK_TO_EDGE, 0.0)

    poses = lattice.poses()
    total = weights.sum()
    mean = (weights[:, None] * poses).sum(axis=0) / total
    centered = poses - mean
    R = (weights[:, None] * centered).T @ centered / total

    # weight on two or three candidates leaves R singular; lift every eigenvalue to the smallest floor first
    floor = (np.asarray(lattice.step, dtype=float) / 2.0) ** 2
    w, V = np.linalg.eigh(0.5 * (R + R.T))
    R = V @ np.diag(np.maximum(w, floor.min())) @ V.T
    idx = np.arange(3)
    R[idx, idx] = np.maximum(R[idx, idx], floor)
    R = 0.5 * (R + R.T)

    if best_index is None:
        best_index = best_candidate(values.reshape(lattice.shape), lattice)
    on_boundary = bool(boundary[best_index])
    if on_boundary:
        R = R * 10.0
        logging.warning("NMI maximum lies on the search window boundary; inflating its covariance")
    return R, on_boundary


def coarse_to_fine_search(local, global_map, center, half_extent, binning=None, bin_edges=None,
                          coarse_step=(0.6, 0.6, np.radians(1.5)), fine_step=(0.2, 0.2, np.radians(0.5)),
                          fine_half_extent=(1.0, 1.0, np.radians(1.5)), threads=None):
    """
    Two-level search: a coarse lattice over `half_extent`, then the fine lattice
    around the coarse peak. Windows no wider than the fine window skip the
    coarse level.
    """
    if np.all(np.asarray(half_extent) <= np.asarray(fine_half_extent) + 1e-12):
        result = search(local, global_map, SearchWindow(center, fine_half_extent, fine_step),
                        binning, bin_edges, threads)
        result.levels = ["fine"]
        return result

    coarse = search(local, global_map, SearchWindow(center, half_extent, coarse_step), binning, bin_edges, threads)
    if not coarse.usable:
        coarse.levels = ["coarse"]
        return coarse

    fine = search(local, global_map, SearchWindow(coarse.best_pose, fine_half_extent, fine_step),
                  binning, bin_edges, threads)
    fine.levels = ["coarse", "fine"]
    if not fine.usable:
        coarse.levels = ["coarse"]
        return coarse
    return fine
