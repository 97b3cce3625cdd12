"""
Extended Kalman filter over the planar pose (x, y, heading), driven by body-frame
odometry and corrected by NMI registration of a rolling local map against the
global map.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from src.grid_core import compose, wrap_angle
from src.map_builder import LocalMapState, update_local_map
from src.register import HistogramSpec, coarse_to_fine_search, histogram_edges
from src.sim import Scan, scan_to_body
from src.utils import DIAGNOSTIC_COLUMNS


MATCH_MODES = ("edges", "intensity")


@dataclass
class PoseBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).copy()
        self.cov = np.asarray(self.cov, dtype=float).copy()
        if self.mean.shape != (3,) or self.cov.shape != (3, 3):
            raise ValueError("PoseBelief needs a 3-vector mean and a 3x3 covariance")
        self.mean[2] = wrap_angle(self.mean[2])

    @property
    def sigma(self):
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


@dataclass
class FilterConfig:
    process_noise: np.ndarray = field(default_factory=lambda: np.diag([0.02 ** 2, 0.02 ** 2, np.radians(0.2) ** 2]))
    init_cov: np.ndarray = field(default_factory=lambda: np.diag([5.0, 5.0, np.radians(10.0) ** 2]))
    gate_sigma: float = 4.0          # None disables gating
    min_half_extent: tuple = (1.0, 1.0, np.radians(1.5))
    max_half_extent: tuple = (4.0, 4.0, np.radians(10.0))
    coarse_step: tuple = (0.6, 0.6, np.radians(1.5))
    fine_step: tuple = (0.2, 0.2, np.radians(0.5))
    fine_half_extent: tuple = (1.0, 1.0, np.radians(1.5))

    def __post_init__(self):
        self.process_noise = np.asarray(self.process_noise, dtype=float)
        self.init_cov = np.asarray(self.init_cov, dtype=float)
        if np.linalg.eigvalsh(0.5 * (self.process_noise + self.process_noise.T)).min() < -1e-12:
            raise ValueError("Process noise Q must be positive semidefinite")


def motion_jacobian(heading, odometry):
    dx, dy, _ = odometry
    c, s = np.cos(heading), np.sin(heading)
    return np.array([
        [1.0, 0.0, -s * dx - c * dy],
        [0.0, 1.0, c * dx - s * dy],
        [0.0, 0.0, 1.0],
    ])


def predict(belief, odometry, Q):
    """Composes the mean with a body-frame increment and propagates the covariance."""
    F = motion_jacobian(belief.mean[2], odometry)
    cov = F @ belief.cov @ F.T + np.asarray(Q, dtype=float)
    return PoseBelief(compose(belief.mean, odometry), 0.5 * (cov + cov.T))


def is_positive_definite(R, tol=1e-12):
    """Finite, symmetric, and every eigenvalue above `tol` times the largest."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)) or not np.allclose(R, R.T):
        return False
    w = np.linalg.eigvalsh(0.5 * (R + R.T))
    return bool(w[-1] > 0.0 and w[0] > tol * w[-1])


def update(belief, z, R, gate_sigma=None):
    """
    Kalman update with a direct pose measurement (H = I) and Joseph-form
    covariance. Returns (posterior, accepted); a rejected measurement leaves the
    belief unchanged.
    """
    if not is_positive_definite(R):
        logging.warning("Rejected registration measurement: covariance is not positive definite")
        return belief, False

    R = np.asarray(R, dtype=float)
    innovation = np.asarray(z, dtype=float) - belief.mean
    innovation[2] = wrap_angle(innovation[2])
    S = belief.cov + R

    if gate_sigma is not None:
        d2 = float(innovation @ np.linalg.solve(S, innovation))
        if np.sqrt(max(d2, 0.0)) > gate_sigma:
            logging.warning(f"Rejected registration measurement: Mahalanobis distance {np.sqrt(d2):.2f} "
                            f"beyond {gate_sigma} sigma")
            return belief, False

    K = np.linalg.solve(S, belief.cov).T
    I_K = np.eye(3) - K
    cov = I_K @ belief.cov @ I_K.T + K @ R @ K.T
    return PoseBelief(belief.mean + K @ innovation, 0.5 * (cov + cov.T)), True


@dataclass
class StepDiagnostics:
    t: float
    estimate: np.ndarray
    nmi: float = float("nan")
    overlap: int = 0
    coasted: bool = True
    half_extent: np.ndarray = None
    truth: np.ndarray = None

    def errors(self):
        """(longitudinal, lateral, heading) error in the true heading frame."""
        if self.truth is None:
            return float("nan"), float("nan"), float("nan")
        ex, ey = self.estimate[0] - self.truth[0], self.estimate[1] - self.truth[1]
        c, s = np.cos(self.truth[2]), np.sin(self.truth[2])
        return c * ex + s * ey, -s * ex + c * ey, float(wrap_angle(self.estimate[2] - self.truth[2]))

    def row(self):
        lon, lat, head = self.errors()
        truth = self.truth if self.truth is not None else np.full(3, np.nan)
        return [self.t, truth[0], truth[1], truth[2], self.estimate[0], self.estimate[1], self.estimate[2],
                lon, lat, head, self.nmi, self.overlap, int(self.coasted)]


class Localizer:
    """
    Online localization session against one global map. `match_mode` "edges"
    registers reflectivity-edge maps; "intensity" registers LUT-calibrated
    reflectivity maps and needs `lut`.
    """

    def __init__(self, global_map, initial_pose, config=None, binning=None, match_mode="edges", lut=None,
                 registration_enabled=True, local_extent=40.0, window=8, denoise=None, threads=None):
        if match_mode not in MATCH_MODES:
            raise ValueError(f"Unknown match mode '{match_mode}'")
        if match_mode == "intensity" and lut is None:
            raise ValueError("Intensity matching needs a lookup-table calibration")

        self.global_map = global_map
        self.config = config or FilterConfig()
        self.binning = binning or HistogramSpec()
        self.match_mode = match_mode
        self.registration_enabled = registration_enabled
        self.threads = threads
        self.belief = PoseBelief(initial_pose, self.config.init_cov)
        self.local_state = LocalMapState(
            extent=local_extent,
            cell_size=global_map.geometry.cell_size,
            window=window,
            lut=lut if match_mode == "intensity" else None,
            denoise=denoise if match_mode == "edges" else None,
        )
        self.bin_edges = histogram_edges(global_map.edge.available_values(), self.binning)
        self.history = []
        self.last_registration = None

    def search_half_extent(self, belief):
        half = 3.0 * belief.sigma
        return np.clip(half, self.config.min_half_extent, self.config.max_half_extent)

    def step(self, scan, odometry, timestamp=0.0, truth=None):
        """
        One filter cycle for a sensor-frame scan: predict with odometry, insert the
        scan into the local map at the predicted pose, register, then update or coast.
        """
        predicted = predict(self.belief, odometry, self.config.process_noise)
        diag = StepDiagnostics(float(timestamp), predicted.mean, truth=None if truth is None else np.asarray(truth))

        if not self.registration_enabled:
            self.belief = predicted
            diag.estimate = predicted.mean.copy()
            self.history.append(diag)
            return self.belief, diag

        local = update_local_map(self.local_state, scan, predicted.mean)
        half = self.search_half_extent(predicted)
        diag.half_extent = half
        result = coarse_to_fine_search(
            local, self.global_map, predicted.mean, half, self.binning, self.bin_edges,
            coarse_step=self.config.coarse_step, fine_step=self.config.fine_step,
            fine_half_extent=self.config.fine_half_extent, threads=self.threads,
        )

        accepted = False
        if result.usable:
            diag.nmi = result.best_nmi
            diag.overlap = result.best_overlap
            self.last_registration = (float(timestamp), result)
            self.belief, accepted = update(predicted, result.best_pose, result.measurement_cov,
                                           self.config.gate_sigma)
        if not accepted:
            logging.info(f"t={timestamp:.2f}: coasting on odometry")
            self.belief = predicted

        diag.coasted = not accepted
        diag.estimate = self.belief.mean.copy()
        self.history.append(diag)
        return self.belief, diag

    def diagnostics(self):
        return pd.DataFrame([d.row() for d in self.history], columns=DIAGNOSTIC_COLUMNS)


def localize_run(localizer, trajectory, scans, progress_every=50):
    """
    Runs the localizer over a drive. World-frame scans are re-expressed in the
    sensor frame of their true pose; steps without a scan get an empty one.
    """
    by_time = {round(scan.timestamp, 6): scan for scan in scans}
    for k in range(len(trajectory)):
        t = trajectory.t[k]
        truth = trajectory.pose(k)
        scan = by_time.get(round(t, 6))
        body = scan_to_body(scan, truth) if scan is not None else Scan.empty(t)
        odometry = trajectory.odometry[k] if k > 0 else np.zeros(3)
        localizer.step(body, odometry, t, truth)
        if progress_every and (k + 1) % progress_every == 0:
            print(f"Localized {k + 1}/{len(trajectory)} steps")
    return localizer.diagnostics()
