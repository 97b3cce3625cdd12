import os
import struct
import logging

import numpy as np
import pandas as pd
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
from PIL import Image

from src.grid_core import GridGeometry, MaskedGrid


GRD_MAGIC = b"GRD1"
GRD_HEADER = struct.Struct("<4sIIddd")

SCAN_COLUMNS = ["t", "x", "y", "refl", "laser", "incidence", "range"]
TRAJECTORY_COLUMNS = ["t", "x", "y", "h", "odo_dx", "odo_dy", "odo_dh"]
DIAGNOSTIC_COLUMNS = ["t", "truth_x", "truth_y", "truth_h", "est_x", "est_y", "est_h",
                      "err_lon", "err_lat", "err_h", "nmi", "overlap", "coasted_flag"]


class GridlocError(Exception):
    """Base class for pipeline failures."""


class ConfigError(GridlocError):
    """Invalid or incomplete run configuration."""


class InputError(GridlocError):
    """Missing, empty or malformed input artifact."""


class UndefinedEntropyError(GridlocError):
    """Entropy requested over a grid with no available cells."""


def write_grd(grid, path):
    """
    Writes a MaskedGrid in the GRD1 layout: magic, little-endian u32 N_x, u32 N_y,
    f64 cell_size, f64 origin_x, f64 origin_y, N_x*N_y f32 values in column-wise
    vectorized order, then the availability bitmask packed LSB-first.
    """
    geo = grid.geometry
    values, mask = grid.vectorized()
    header = GRD_HEADER.pack(GRD_MAGIC, geo.nx, geo.ny, geo.cell_size, geo.origin[0], geo.origin[1])
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.where(mask, values, 0.0).astype("<f4").tobytes())
        f.write(np.packbits(mask.astype(np.uint8), bitorder="little").tobytes())
    logging.info(f"Wrote grid {geo.nx}x{geo.ny} to {path}")


def read_grd(path):
    """Reads a GRD1 file back into a MaskedGrid (values come back as float32 precision)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        raise InputError(f"Grid file not found: {path}")

    if len(raw) < GRD_HEADER.size or raw[:4] != GRD_MAGIC:
        raise InputError(f"Not a GRD1 file: {path}")
    _, nx, ny, cell_size, ox, oy = GRD_HEADER.unpack_from(raw)
    n = nx * ny
    values_end = GRD_HEADER.size + 4 * n
    mask_bytes = (n + 7) // 8
    if len(raw) < values_end + mask_bytes:
        raise InputError(f"Truncated GRD1 file: {path}")

    values = np.frombuffer(raw, dtype="<f4", count=n, offset=GRD_HEADER.size).astype(np.float64)
    bits = np.frombuffer(raw, dtype=np.uint8, count=mask_bytes, offset=values_end)
    mask = np.unpackbits(bits, bitorder="little")[:n].astype(bool)
    geometry = GridGeometry(nx, ny, cell_size, (ox, oy))
    return MaskedGrid(geometry, values.reshape(nx, ny), mask.reshape(nx, ny))


def grid_to_image(grid):
    """8-bit rendering: available cells min-max scaled to 0..255, unavailable cells 0, +y up."""
    img = np.zeros(grid.geometry.shape, dtype=np.uint8)
    if grid.mask.any():
        vals = grid.values[grid.mask]
        lo, hi = float(vals.min()), float(vals.max())
        span = hi - lo if hi > lo else 1.0
        img[grid.mask] = np.round(255.0 * (vals - lo) / span).astype(np.uint8)
    # rows of the image run along y, top row is the largest y
    return img.T[::-1, :]


def write_pgm(grid, path):
    """Binary (P5) PGM preview of a grid."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(np.ascontiguousarray(grid_to_image(grid))).save(path, format="PPM")
    logging.info(f"Wrote preview {path}")


def scans_to_frame(scans):
    """Stacks a list of Scan objects into one DataFrame with SCAN_COLUMNS."""
    frames = []
    for scan in scans:
        n = len(scan)
        frames.append(pd.DataFrame({
            "t": np.full(n, scan.timestamp),
            "x": scan.x,
            "y": scan.y,
            "refl": scan.refl,
            "laser": scan.laser,
            "incidence": scan.incidence,
            "range": scan.range,
        }))
    if not frames:
        return pd.DataFrame(columns=SCAN_COLUMNS)
    return pd.concat(frames, ignore_index=True)[SCAN_COLUMNS]


def write_scans_csv(scans, path):
    df = scans_to_frame(scans)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df.to_csv(path, index=False, float_format="%.6f")
    logging.info(f"Wrote {len(df)} returns from {len(scans)} scans to {path}")
    return df


def read_scans_csv(path):
    """Reads a scans CSV back into Scan objects, one per distinct timestamp."""
    from src.sim import Scan

    df = _read_csv(path, SCAN_COLUMNS)
    scans = []
    for t, group in df.groupby("t", sort=True):
        scans.append(Scan(
            timestamp=float(t),
            x=group["x"].to_numpy(dtype=float),
            y=group["y"].to_numpy(dtype=float),
            refl=group["refl"].to_numpy(dtype=float),
            laser=group["laser"].to_numpy(dtype=np.int64),
            incidence=group["incidence"].to_numpy(dtype=float),
            range=group["range"].to_numpy(dtype=float),
        ))
    return scans


def write_trajectory_csv(trajectory, path):
    df = pd.DataFrame({
        "t": trajectory.t,
        "x": trajectory.x,
        "y": trajectory.y,
        "h": trajectory.h,
        "odo_dx": trajectory.odometry[:, 0],
        "odo_dy": trajectory.odometry[:, 1],
        "odo_dh": trajectory.odometry[:, 2],
    })
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df.to_csv(path, index=False, float_format="%.9f")
    logging.info(f"Wrote trajectory with {len(df)} poses to {path}")
    return df


def read_trajectory_csv(path):
    from src.sim import Trajectory

    df = _read_csv(path, TRAJECTORY_COLUMNS)
    if df.empty:
        raise InputError(f"Trajectory file has no poses: {path}")
    return Trajectory(
        t=df["t"].to_numpy(dtype=float),
        x=df["x"].to_numpy(dtype=float),
        y=df["y"].to_numpy(dtype=float),
        h=df["h"].to_numpy(dtype=float),
        odometry=df[["odo_dx", "odo_dy", "odo_dh"]].to_numpy(dtype=float),
    )


def _read_csv(path, required_columns):
    try:
        df = pd.read_csv(path)
    except FileNotFoundError:
        raise InputError(f"File not found: {path}")
    except pd.errors.EmptyDataError:
        raise InputError(f"File is empty: {path}")

    missing = [col for col in required_columns if col not in df.columns]
    if missing:
        raise InputError(f"{path} is missing columns: {', '.join(missing)}")
    return df


def write_frame(df, path, float_format="%.6f"):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    df.to_csv(path, index=False, float_format=float_format)
    logging.info(f"Wrote {len(df)} rows to {path}")


def write_text(text, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(text)
    logging.info(f"Wrote {path}")


def plot_error_traces(diagnostics, filename, labels=None):
    """
    Plots longitudinal, lateral (cm) and heading (rad) error traces of one or more
    diagnostics DataFrames and saves the figure. Coasted steps are drawn as dots.

    Args:
        diagnostics: DataFrame or list of DataFrames with DIAGNOSTIC_COLUMNS.
        filename: Output image path.
        labels: Legend entries, one per DataFrame.
    """
    if isinstance(diagnostics, pd.DataFrame):
        diagnostics = [diagnostics]
    if labels is None:
        labels = [f"run {k + 1}" for k in range(len(diagnostics))]

    fig, axes = plt.subplots(3, 1, figsize=(12, 9), sharex=True)
    panels = [("err_lon", 100.0, "longitudinal (cm)"),
              ("err_lat", 100.0, "lateral (cm)"),
              ("err_h", 1.0, "heading (rad)")]

    for df, label in zip(diagnostics, labels):
        t = df["t"].to_numpy() - df["t"].iloc[0]
        coasted = df["coasted_flag"].astype(bool).to_numpy()
        for ax, (col, scale, _) in zip(axes, panels):
            line, = ax.plot(t, df[col].to_numpy() * scale, linewidth=0.8, label=label)
            if coasted.any():
                ax.plot(t[coasted], df[col].to_numpy()[coasted] * scale, ".", color=line.get_color(), markersize=3)

    for ax, (_, _, title) in zip(axes, panels):
        ax.set_ylabel(title)
        ax.grid(True, alpha=0.3)
    axes[0].axhline(20.0, color="grey", linestyle="--", linewidth=0.6)
    axes[0].axhline(-20.0, color="grey", linestyle="--", linewidth=0.6)
    axes[-1].set_xlabel("time (s)")
    axes[0].legend(loc="upper right")

    os.makedirs(os.path.dirname(os.path.abspath(filename)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(filename)
    plt.close(fig)
    logging.info(f"Saved error trace plot to {filename}")
