"""
Evaluation of map representations and localization runs.

Whitening is scored per cell as the Kullback-Leibler distance (in bits) between
the cell's sample histogram and the Gaussian with the same mean and variance.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import norm

from src.map_builder import build_global_stack, matched_scans
from src.sim import REGION_NAMES


KLD_BINS = 256
SPIKE_THRESHOLD = 0.20  # meters
QUANTIZATION = 1.0      # reflectivity level spacing


def kld_vs_gaussian(samples, bins=KLD_BINS, min_samples=30, resolution=None):
    """
    D(P || Q) in bits, P the sample histogram over `bins` uniform bins spanning
    the sample range padded by 5%, Q the moment-matched Gaussian integrated per
    bin. Zero-variance samples give 0 by convention.

    Samples derived from quantized returns sit on a lattice; pass its spacing as
    `resolution` so that no bin is narrower than one level (fewer bins are used).
    """
    x = np.asarray(samples, dtype=float)
    x = x[np.isfinite(x)]
    if x.size < min_samples:
        raise ValueError(f"KLD needs at least {min_samples} samples, got {x.size}")

    mu, sd = x.mean(), x.std()
    if not sd > 0:
        logging.debug("Degenerate sample set (zero variance); KLD taken as 0")
        return 0.0

    lo, hi = x.min(), x.max()
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    if resolution is not None and (hi - lo) / bins < resolution:
        bins = max(int(np.ceil((hi - lo) / resolution)), 1)
        hi = lo + bins * resolution
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(x, bins=edges)
    p = counts / x.size
    q = np.diff(norm.cdf(edges, loc=mu, scale=sd))
    nz = p > 0
    d = float(np.sum(p[nz] * np.log2(p[nz] / np.maximum(q[nz], 1e-12))))
    assert d >= -1e-9, f"negative KLD {d}"
    return max(d, 0.0)


@dataclass
class WhiteningReport:
    cells: pd.DataFrame
    summary: pd.DataFrame
    notes: list = field(default_factory=list)


def _return_table(world, scans, trajectory, lut):
    """One row per in-bounds return: cell, laser, raw and calibrated value, gradient samples."""
    geometry = world.geometry
    stack = build_global_stack(trajectory, scans, geometry=geometry, key_mode="laser", threads=1)

    frames = []
    for scan, _ in matched_scans(scans, trajectory):
        if len(scan) == 0:
            continue
        i, j, inside = geometry.cell_index(scan.x, scan.y)
        if not inside.any():
            continue
        refl = scan.refl[inside]
        frames.append(pd.DataFrame({
            "i": i[inside],
            "j": j[inside],
            "laser": scan.laser[inside],
            "raw": refl,
            "calibrated": lut.apply(scan)[inside] if lut is not None else np.nan,
        }))
    if not frames:
        return pd.DataFrame(columns=["i", "j", "laser", "raw", "calibrated", "gx", "gy", "cell"])
    df = pd.concat(frames, ignore_index=True)

    # gradient samples: neighbour mean of the same perspective minus this return
    df["gx"] = np.nan
    df["gy"] = np.nan
    for b, rows in df.groupby("laser").groups.items():
        sums, counts = stack.sums[int(b)], stack.counts[int(b)]
        i = df.loc[rows, "i"].to_numpy()
        j = df.loc[rows, "j"].to_numpy()
        y = df.loc[rows, "raw"].to_numpy()
        for col, di, dj in (("gx", 1, 0), ("gy", 0, 1)):
            ni, nj = i + di, j + dj
            ok = (ni < geometry.nx) & (nj < geometry.ny)
            out = np.full(len(rows), np.nan)
            if ok.any():
                c = np.asarray(counts[ni[ok], nj[ok]]).ravel()
                s = np.asarray(sums[ni[ok], nj[ok]]).ravel()
                with np.errstate(invalid="ignore", divide="ignore"):
                    out[ok] = np.where(c > 0, s / np.where(c > 0, c, 1.0) - y[ok], np.nan)
            df.loc[rows, col] = out

    df["cell"] = df["i"] * geometry.ny + df["j"]
    return df


def _safe_kld(values, min_samples):
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size < min_samples:
        return np.nan
    return kld_vs_gaussian(values, min_samples=min_samples, resolution=QUANTIZATION)


def whitening_report(world, scans, trajectory, lut=None, min_samples=30, min_perspectives=2):
    """
    Mean per-cell KLD by region for raw reflectivity, LUT-calibrated reflectivity
    (when `lut` is given) and the per-perspective gradient samples. Gradient
    samples are only scored in cells seen by at least `min_perspectives` lasers.
    """
    df = _return_table(world, scans, trajectory, lut)
    rows = []
    for cell, group in df.groupby("cell", sort=True):
        if len(group) < min_samples:
            continue
        i, j = divmod(int(cell), world.geometry.ny)
        record = {
            "cell": int(cell),
            "region": REGION_NAMES[int(world.labels[i, j])],
            "samples": len(group),
            "perspectives": group["laser"].nunique(),
            "raw": _safe_kld(group["raw"], min_samples),
            "calibrated": _safe_kld(group["calibrated"], min_samples) if lut is not None else np.nan,
            "gradient": np.nan,
        }
        if record["perspectives"] >= min_perspectives:
            parts = [_safe_kld(group[col], min_samples) for col in ("gx", "gy")]
            parts = [p for p in parts if np.isfinite(p)]
            if parts:
                record["gradient"] = float(np.mean(parts))
        rows.append(record)

    columns = ["cell", "region", "samples", "perspectives", "raw", "calibrated", "gradient"]
    cells = pd.DataFrame(rows, columns=columns)
    value_cols = ["raw", "calibrated", "gradient"] if lut is not None else ["raw", "gradient"]

    notes = []
    summary_rows = []
    for name in ("markings", "asphalt", "other"):
        part = cells[cells["region"] == name]
        if part.empty:
            note = f"region '{name}' has no cell with {min_samples} or more samples; row omitted"
            logging.warning(note)
            notes.append(note)
            continue
        summary_rows.append({"region": name, "cells": len(part), **{c: part[c].mean() for c in value_cols}})
    if not cells.empty:
        summary_rows.append({"region": "overall", "cells": len(cells), **{c: cells[c].mean() for c in value_cols}})

    summary = pd.DataFrame(summary_rows, columns=["region", "cells"] + value_cols)
    logging.info(f"Whitening report over {len(cells)} cells")
    return WhiteningReport(cells, summary, notes)


def rmse_report(diagnostics):
    """
    RMSE of longitudinal and lateral error (cm) and heading error (rad) over the
    non-coasted steps, with per-axis max |error| and the count of steps whose
    translation error exceeds 20 cm. A run with no corrected step (open loop) is
    scored over all its steps.
    """
    df = diagnostics
    used = df[df["coasted_flag"].astype(int) == 0]
    if used.empty:
        logging.info("No corrected steps in run; scoring every step")
        used = df
    if used.empty:
        return {"steps": 0, "lon_cm": 0.0, "lat_cm": 0.0, "head_rad": 0.0,
                "max_lon_cm": 0.0, "max_lat_cm": 0.0, "max_head_rad": 0.0, "spikes": 0}

    lon = used["err_lon"].to_numpy(dtype=float)
    lat = used["err_lat"].to_numpy(dtype=float)
    head = used["err_h"].to_numpy(dtype=float)
    spikes = int(np.sum((np.abs(lon) > SPIKE_THRESHOLD) | (np.abs(lat) > SPIKE_THRESHOLD)))
    return {
        "steps": int(len(used)),
        "lon_cm": 100.0 * float(np.sqrt(np.mean(lon ** 2))),
        "lat_cm": 100.0 * float(np.sqrt(np.mean(lat ** 2))),
        "head_rad": float(np.sqrt(np.mean(head ** 2))),
        "max_lon_cm": 100.0 * float(np.max(np.abs(lon))),
        "max_lat_cm": 100.0 * float(np.max(np.abs(lat))),
        "max_head_rad": float(np.max(np.abs(head))),
        "spikes": spikes,
    }


def histogram_dump(samples, bins=KLD_BINS):
    """bin,count table (plus bin centre) over the padded sample range, for plotting a cell's distribution."""
    x = np.asarray(samples, dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return pd.DataFrame(columns=["bin", "center", "count"])
    lo, hi = x.min(), x.max()
    pad = 0.05 * (hi - lo) if hi > lo else 0.5
    counts, edges = np.histogram(x, bins=bins, range=(lo - pad, hi + pad))
    return pd.DataFrame({"bin": np.arange(bins), "center": 0.5 * (edges[:-1] + edges[1:]), "count": counts})


def cell_histograms(world, scans, trajectory, cell, bins=KLD_BINS):
    """Raw and gradient sample histograms of one (i, j) cell side by side."""
    df = _return_table(world, scans, trajectory, lut=None)
    n = cell[0] * world.geometry.ny + cell[1]
    group = df[df["cell"] == n]
    raw = histogram_dump(group["raw"], bins).rename(columns={"center": "raw_center", "count": "raw_count"})
    grad = histogram_dump(pd.concat([group["gx"], group["gy"]]), bins)
    grad = grad.rename(columns={"center": "gradient_center", "count": "gradient_count"})
    return raw.merge(grad, on="bin", how="outer")


def render_whitening(report):
    lines = ["Mean per-cell KLD to the moment-matched Gaussian (bits)", ""]
    if report.summary.empty:
        lines.append("(no qualifying cells)")
    else:
        lines.append(report.summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    for note in report.notes:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


def render_rmse(rmse, label="run"):
    return (f"{label}: steps {rmse['steps']}\n"
            f"  RMSE   longitudinal {rmse['lon_cm']:8.2f} cm   lateral {rmse['lat_cm']:8.2f} cm   "
            f"heading {rmse['head_rad']:.5f} rad\n"
            f"  max    longitudinal {rmse['max_lon_cm']:8.2f} cm   lateral {rmse['max_lat_cm']:8.2f} cm   "
            f"heading {rmse['max_head_rad']:.5f} rad\n"
            f"  spikes over {100 * SPIKE_THRESHOLD:.0f} cm: {rmse['spikes']}\n")
