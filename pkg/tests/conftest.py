"""Shared builders for hand-made scans, static trajectories and noise-free scanners."""
import numpy as np
import pytest

from src.sim import LaserModel, Scan, Trajectory


def _ring_laser(laser_id, radius, gain=1.0, offset=0.0, noise_sigma=0.0, sensor_height=2.0):
    """Laser meeting flat ground at `radius` with no incidence or range attenuation."""
    return LaserModel(
        laser_id=laser_id,
        gain=gain,
        offset=offset,
        incidence=float(np.arctan2(radius, sensor_height)),
        range=float(np.hypot(radius, sensor_height)),
        noise_sigma=noise_sigma,
        angle_exponent=0.0,
        range_exponent=0.0,
    )


@pytest.fixture
def make_scan():
    """Builds a world-frame scan with one return per listed (i, j) cell, placed at the cell centre."""
    def build(geometry, cells, values, laser=0, t=0.0):
        cells = np.asarray(cells, dtype=float).reshape(-1, 2)
        x = geometry.origin[0] + (cells[:, 0] + 0.5) * geometry.cell_size
        y = geometry.origin[1] + (cells[:, 1] + 0.5) * geometry.cell_size
        n = len(cells)
        lasers = np.broadcast_to(np.asarray(laser, dtype=np.int64), (n,)).copy()
        return Scan(float(t), x, y, np.asarray(values, dtype=float), lasers,
                    np.full(n, 0.5), np.full(n, 5.0))
    return build


@pytest.fixture
def static_trajectory():
    """Trajectory that stands still at `pose` for the given timestamps."""
    def build(times, pose=(0.0, 0.0, 0.0)):
        times = np.asarray(times, dtype=float)
        n = len(times)
        return Trajectory(times, np.full(n, pose[0]), np.full(n, pose[1]), np.full(n, pose[2]),
                          np.zeros((n, 3)))
    return build


@pytest.fixture
def identity_lasers():
    """Four noise-free unit-gain lasers on rings between 3 and 4.5 m."""
    return [_ring_laser(b, r) for b, r in enumerate((3.0, 3.5, 4.0, 4.5))]


@pytest.fixture
def ring_laser():
    return _ring_laser
