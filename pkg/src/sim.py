"""
Synthetic survey data: a flat ground world with lane markings on asphalt, a
multi-laser scanner whose response depends on laser, incidence angle and range,
and smooth vehicle trajectories with noisy odometry.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from matplotlib.path import Path
from scipy.integrate import cumulative_trapezoid
from scipy.ndimage import gaussian_filter

from src.grid_core import GridGeometry, MaskedGrid, compose, relative, to_frame, wrap_angle


REFERENCE_RANGE = 10.0  # r0 in the response model, meters

LABEL_ASPHALT = 0
LABEL_MARKING = 1
LABEL_OTHER = 2
REGION_NAMES = {LABEL_MARKING: "markings", LABEL_ASPHALT: "asphalt", LABEL_OTHER: "other"}


@dataclass
class StripeLayout:
    """Lane-marking geometry. Lines run along x at y = first_line_y + k * lane_width."""
    lane_width: float = 3.5
    line_width: float = 0.15
    first_line_y: float = 2.0
    dash_length: float = 3.0      # 0 -> solid lines
    dash_gap: float = 6.0
    solid_every: int = 3          # every n-th line is solid (road edge)
    crosswalk_spacing: float = 30.0  # 0 -> no crosswalks
    crosswalk_bar_width: float = 0.5
    crosswalk_bar_gap: float = 0.5
    crosswalk_bars: int = 6


@dataclass
class World:
    truth: MaskedGrid
    labels: np.ndarray
    rng_seed: int
    layout: StripeLayout = field(default_factory=StripeLayout)

    @property
    def geometry(self):
        return self.truth.geometry


@dataclass(frozen=True)
class LaserModel:
    laser_id: int
    gain: float = 1.0
    offset: float = 0.0
    incidence: float = 0.5
    range: float = 10.0
    noise_sigma: float = 0.0
    angle_exponent: float = 1.0
    range_exponent: float = 1.0

    def __post_init__(self):
        if not self.gain > 0:
            raise ValueError(f"Laser {self.laser_id}: gain must be positive")
        if self.noise_sigma < 0:
            raise ValueError(f"Laser {self.laser_id}: noise_sigma must be non-negative")
        if not 0 <= self.incidence < np.pi / 2:
            raise ValueError(f"Laser {self.laser_id}: incidence must lie in [0, pi/2)")
        if not self.range > 0:
            raise ValueError(f"Laser {self.laser_id}: range must be positive")

    @property
    def ring_radius(self):
        """Horizontal distance from the sensor to where this laser meets flat ground."""
        return self.range * np.sin(self.incidence)

    def expected_response(self, truth):
        return (self.gain * np.asarray(truth, dtype=float)
                * np.cos(self.incidence) ** self.angle_exponent
                * (REFERENCE_RANGE / self.range) ** self.range_exponent
                + self.offset)

    def respond(self, truth, rng):
        """8-bit reflectivity: quantized, clamped response plus Gaussian noise."""
        y = self.expected_response(truth)
        if self.noise_sigma > 0:
            y = y + rng.normal(0.0, self.noise_sigma, size=y.shape)
        return np.clip(np.floor(y + 0.5), 0.0, 255.0)


@dataclass
class Scan:
    timestamp: float
    x: np.ndarray
    y: np.ndarray
    refl: np.ndarray
    laser: np.ndarray
    incidence: np.ndarray
    range: np.ndarray

    def __len__(self):
        return len(self.x)

    @classmethod
    def empty(cls, timestamp):
        z = np.zeros(0)
        return cls(timestamp, z, z, z, np.zeros(0, dtype=np.int64), z, z)

    def subset(self, keep):
        return Scan(self.timestamp, self.x[keep], self.y[keep], self.refl[keep],
                    self.laser[keep], self.incidence[keep], self.range[keep])

    def with_points(self, x, y):
        return Scan(self.timestamp, np.asarray(x, dtype=float), np.asarray(y, dtype=float),
                    self.refl, self.laser, self.incidence, self.range)


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    h: np.ndarray
    odometry: np.ndarray  # (N, 3) body-frame increments; row k takes pose k-1 to pose k, row 0 is zero

    def __post_init__(self):
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("Trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.t)

    def pose(self, k):
        return np.array([self.x[k], self.y[k], self.h[k]])

    def poses(self):
        return np.column_stack([self.x, self.y, self.h])

    def pose_at(self, timestamp, tolerance=1e-6):
        """Pose whose timestamp matches within `tolerance`, else None."""
        k = int(np.searchsorted(self.t, timestamp))
        for idx in (k - 1, k):
            if 0 <= idx < len(self.t) and abs(self.t[idx] - timestamp) <= tolerance:
                return self.pose(idx)
        return None

    def integrate_odometry(self, start=None):
        """Dead-reckoned poses obtained by chaining the odometry from `start` (default: first true pose)."""
        pose = self.pose(0) if start is None else np.asarray(start, dtype=float)
        out = [pose]
        for k in range(1, len(self.t)):
            pose = compose(pose, self.odometry[k])
            out.append(pose)
        return np.array(out)


def default_lasers(count=64, seed=0, gain_range=(1.0, 1.0), offset_range=(0.0, 0.0),
                   noise_sigma=0.0, sensor_height=2.0, min_ring=3.0, max_ring=18.0,
                   angle_exponent=1.0, range_exponent=1.0):
    """
    A non-canted laser set: laser b meets the ground on a ring whose radius grows
    linearly with b, so its incidence and range are fixed by the sensor height.
    Gains and offsets are drawn uniformly from the given ranges.
    """
    rng = np.random.default_rng(seed)
    radii = np.linspace(min_ring, max_ring, count) if count > 1 else np.array([min_ring])
    gains = rng.uniform(gain_range[0], gain_range[1], size=count)
    offsets = rng.uniform(offset_range[0], offset_range[1], size=count)
    lasers = []
    for b in range(count):
        lasers.append(LaserModel(
            laser_id=b,
            gain=float(gains[b]),
            offset=float(offsets[b]),
            incidence=float(np.arctan2(radii[b], sensor_height)),
            range=float(np.hypot(radii[b], sensor_height)),
            noise_sigma=float(noise_sigma),
            angle_exponent=angle_exponent,
            range_exponent=range_exponent,
        ))
    return lasers


def stripe_mask(geometry, layout):
    """Analytic lane-marking layout evaluated at cell centres."""
    cx, cy = geometry.cell_centers()
    marking = np.zeros(geometry.shape, dtype=bool)

    if layout.lane_width > 0:
        k = np.round((cy - layout.first_line_y) / layout.lane_width)
        line_y = layout.first_line_y + k * layout.lane_width
        on_line = (np.abs(cy - line_y) <= 0.5 * layout.line_width) & (k >= 0)
        if layout.dash_length > 0:
            period = layout.dash_length + layout.dash_gap
            in_dash = np.mod(cx - geometry.origin[0], period) < layout.dash_length
            solid = (layout.solid_every > 0) & (np.mod(k, max(layout.solid_every, 1)) == 0)
            on_line &= in_dash | solid
        marking |= on_line

    if layout.crosswalk_spacing > 0:
        bar_period = layout.crosswalk_bar_width + layout.crosswalk_bar_gap
        walk_length = layout.crosswalk_bars * bar_period
        local_x = np.mod(cx - geometry.origin[0], layout.crosswalk_spacing)
        in_walk = local_x < walk_length
        on_bar = np.mod(local_x, bar_period) < layout.crosswalk_bar_width
        marking |= in_walk & on_bar

    return marking


def generate_world(extent=(80.0, 60.0), cell_size=0.10, seed=0, layout=None,
                   asphalt_mean=25.0, marking_mean=90.0, speckle_sigma=4.0,
                   speckle_scale=0.3, patch_count=12, patch_delta=12.0, origin=(0.0, 0.0)):
    """
    Procedural ground reflectivity: asphalt around `asphalt_mean`, lane markings
    around `marking_mean`, a few rectangular repair patches, and spatially
    correlated speckle. Values are integer 8-bit levels and fully available.
    """
    if extent[0] <= 0 or extent[1] <= 0:
        raise ValueError(f"World extent must be positive, got {extent}")
    layout = layout or StripeLayout()
    rng = np.random.default_rng(seed)
    geometry = GridGeometry(int(round(extent[0] / cell_size)), int(round(extent[1] / cell_size)),
                            cell_size, origin)

    marking = stripe_mask(geometry, layout)
    truth = np.where(marking, marking_mean, asphalt_mean).astype(float)

    # repair patches give the asphalt some structure away from the lane lines
    cx, cy = geometry.cell_centers()
    for _ in range(patch_count):
        w, h = rng.uniform(1.0, 4.0, size=2)
        px = rng.uniform(origin[0], origin[0] + extent[0] - w)
        py = rng.uniform(origin[1], origin[1] + extent[1] - h)
        inside = (cx >= px) & (cx < px + w) & (cy >= py) & (cy < py + h) & ~marking
        truth[inside] += rng.choice([-1.0, 1.0]) * patch_delta

    if speckle_sigma > 0:
        noise = rng.standard_normal(geometry.shape)
        sigma_cells = max(speckle_scale / cell_size, 1e-6)
        noise = gaussian_filter(noise, sigma=sigma_cells, mode="wrap")
        noise *= speckle_sigma / max(noise.std(), 1e-12)
        truth += noise

    truth = np.clip(np.floor(truth + 0.5), 0.0, 255.0)

    # cells bordering a marking are neither clean asphalt nor clean paint
    labels = np.full(geometry.shape, LABEL_ASPHALT, dtype=np.int8)
    labels[marking] = LABEL_MARKING
    border = np.zeros_like(marking)
    border[1:, :] |= marking[1:, :] != marking[:-1, :]
    border[:-1, :] |= marking[1:, :] != marking[:-1, :]
    border[:, 1:] |= marking[:, 1:] != marking[:, :-1]
    border[:, :-1] |= marking[:, 1:] != marking[:, :-1]
    labels[border] = LABEL_OTHER

    logging.info(f"Generated world {geometry.nx}x{geometry.ny} cells, seed {seed}, "
                 f"marking fraction {marking.mean():.4f}")
    return World(MaskedGrid(geometry, truth), labels, seed, layout)


def scan_once(world, pose, lasers, seed, timestamp=0.0, azimuth_count=360, footprint=0.3,
              max_range=20.0, occluders=None):
    """
    One revolution of every laser from `pose` over flat ground. Each laser samples
    `azimuth_count` directions around its ground ring; the radial position is
    jittered within the beam `footprint`. Returns beyond `max_range` or inside an
    occluder polygon are dropped. A pose outside the world gives an empty scan.
    """
    x0, y0, h0 = (float(v) for v in pose)
    if not world.geometry.contains(x0, y0):
        logging.warning(f"Pose ({x0:.2f}, {y0:.2f}) lies outside the world; returning an empty scan")
        return Scan.empty(timestamp)

    rng = np.random.default_rng(seed)
    n_lasers = len(lasers)
    phase = rng.uniform(0.0, 2.0 * np.pi / azimuth_count, size=n_lasers)
    az = (np.arange(azimuth_count)[None, :] * (2.0 * np.pi / azimuth_count)) + phase[:, None]
    radii = np.array([laser.ring_radius for laser in lasers])
    ranges = np.array([laser.range for laser in lasers])
    jitter = rng.uniform(-0.5 * footprint, 0.5 * footprint, size=az.shape) if footprint > 0 else 0.0
    rho = radii[:, None] + jitter

    px = x0 + rho * np.cos(h0 + az)
    py = y0 + rho * np.sin(h0 + az)
    laser_idx = np.repeat(np.arange(n_lasers), azimuth_count)
    px, py = px.ravel(), py.ravel()

    keep = np.repeat(ranges <= max_range, azimuth_count)
    i, j, inside = world.geometry.cell_index(px, py)
    keep &= inside
    if occluders:
        points = np.column_stack([px, py])
        for polygon in occluders:
            keep &= ~Path(np.asarray(polygon, dtype=float)).contains_points(points)

    truth = np.zeros(px.shape)
    truth[keep] = world.truth.values[i[keep], j[keep]]

    refl = np.zeros(px.shape)
    for b, laser in enumerate(lasers):
        sel = laser_idx == b
        refl[sel] = laser.respond(truth[sel], rng)

    laser_ids = np.array([laser.laser_id for laser in lasers], dtype=np.int64)
    incid = np.array([laser.incidence for laser in lasers])
    return Scan(
        timestamp=float(timestamp),
        x=px[keep],
        y=py[keep],
        refl=refl[keep],
        laser=laser_ids[laser_idx[keep]],
        incidence=incid[laser_idx[keep]],
        range=ranges[laser_idx[keep]],
    )


def scan_trajectory(world, trajectory, lasers, seed, every=1, **scan_kwargs):
    """Scans at every `every`-th pose; scan k uses the seed pair (seed, k)."""
    scans = []
    for k in range(0, len(trajectory), every):
        scans.append(scan_once(world, trajectory.pose(k), lasers, seed=[seed, k],
                               timestamp=trajectory.t[k], **scan_kwargs))
    return scans


def scan_to_body(scan, pose):
    """Re-expresses a world-frame scan in the sensor frame of `pose`."""
    bx, by = to_frame(pose, scan.x, scan.y)
    return scan.with_points(bx, by)


def _rounded_rectangle(s, length, width, radius):
    """Pose at arc length s along a counter-clockwise rounded rectangle starting mid-way along its bottom side."""
    straight_x = length - 2 * radius
    straight_y = width - 2 * radius
    quarter = 0.5 * np.pi * radius
    segments = [
        ("line", 0.5 * straight_x, (0.0, 0.0), 0.0),
        ("arc", quarter, (0.5 * straight_x, radius), -0.5 * np.pi),
        ("line", straight_y, (0.5 * straight_x + radius, radius), 0.5 * np.pi),
        ("arc", quarter, (0.5 * straight_x, radius + straight_y), 0.0),
        ("line", straight_x, (0.5 * straight_x, width), np.pi),
        ("arc", quarter, (-0.5 * straight_x, radius + straight_y), 0.5 * np.pi),
        ("line", straight_y, (-0.5 * straight_x - radius, radius + straight_y), -0.5 * np.pi),
        ("arc", quarter, (-0.5 * straight_x, radius), np.pi),
        ("line", 0.5 * straight_x, (-0.5 * straight_x, 0.0), 0.0),
    ]
    perimeter = sum(seg[1] for seg in segments)
    s = np.mod(s, perimeter)
    x = np.zeros_like(s)
    y = np.zeros_like(s)
    h = np.zeros_like(s)
    start = 0.0
    for kind, seg_len, anchor, angle in segments:
        sel = (s >= start) & (s < start + seg_len)
        u = s[sel] - start
        if kind == "line":
            x[sel] = anchor[0] + u * np.cos(angle)
            y[sel] = anchor[1] + u * np.sin(angle)
            h[sel] = angle
        else:
            # anchor is the arc centre, angle the polar angle where the arc starts
            phi = angle + u / radius
            x[sel] = anchor[0] + radius * np.cos(phi)
            y[sel] = anchor[1] + radius * np.sin(phi)
            h[sel] = phi + 0.5 * np.pi
        start += seg_len
    return x, y, wrap_angle(h), perimeter


def generate_trajectory(kind, duration, speed, seed, rate=10.0, start=(0.0, 0.0, 0.0),
                        odometry_sigma=(0.0, 0.0, 0.0), loop_radius=None,
                        curve_amplitude=0.35, curve_wavelength=40.0,
                        block_size=(60.0, 30.0), corner_radius=6.0,
                        drive_time=20.0, stop_time=3.0, accel=1.5):
    """
    Smooth pose sequence sampled at `rate` Hz.

    Kinds: "straight" (constant heading), "curvy" (sinusoidal heading along the
    path), "loop" (circle; radius defaults to one full lap over `duration`),
    "stop-and-go" (laps of a rounded-rectangle block with periodic full stops).
    Odometry is the true body-frame increment plus N(0, odometry_sigma^2) noise.
    """
    if duration <= 0 or speed <= 0:
        raise ValueError("duration and speed must be positive")
    rng = np.random.default_rng(seed)
    n = int(np.floor(duration * rate + 1e-9)) + 1
    t = np.arange(n) / rate
    x0, y0, h0 = (float(v) for v in start)

    if kind == "stop-and-go":
        s = _stop_and_go_distance(t, speed, drive_time, stop_time, accel)
    else:
        s = speed * t

    if kind == "straight":
        x = x0 + s * np.cos(h0)
        y = y0 + s * np.sin(h0)
        h = np.full(n, wrap_angle(h0))
    elif kind == "loop":
        radius = loop_radius if loop_radius is not None else speed * duration / (2 * np.pi)
        phi = s / radius
        # circle to the left of the start heading
        x = x0 + radius * (np.sin(h0 + phi) - np.sin(h0))
        y = y0 - radius * (np.cos(h0 + phi) - np.cos(h0))
        h = wrap_angle(h0 + phi)
    elif kind == "curvy":
        # heading along the path is h0 + A sin(2 pi s / wavelength); integrate on a fine grid
        s_fine = np.linspace(0.0, s[-1], max(10 * n, 2))
        h_fine = h0 + curve_amplitude * np.sin(2 * np.pi * s_fine / curve_wavelength)
        x_fine = x0 + cumulative_trapezoid(np.cos(h_fine), s_fine, initial=0.0)
        y_fine = y0 + cumulative_trapezoid(np.sin(h_fine), s_fine, initial=0.0)
        x = np.interp(s, s_fine, x_fine)
        y = np.interp(s, s_fine, y_fine)
        h = wrap_angle(h0 + curve_amplitude * np.sin(2 * np.pi * s / curve_wavelength))
    elif kind == "stop-and-go":
        bx, by, bh, _ = _rounded_rectangle(s, block_size[0], block_size[1], corner_radius)
        c, sn = np.cos(h0), np.sin(h0)
        x = x0 + c * bx - sn * by
        y = y0 + sn * bx + c * by
        h = wrap_angle(bh + h0)
    else:
        raise ValueError(f"Unknown trajectory kind '{kind}'")

    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    h = np.asarray(h, dtype=float)
    odometry = np.zeros((n, 3))
    for k in range(1, n):
        odometry[k] = relative((x[k - 1], y[k - 1], h[k - 1]), (x[k], y[k], h[k]))
    sigma = np.asarray(odometry_sigma, dtype=float)
    if np.any(sigma > 0):
        odometry[1:] += rng.normal(0.0, 1.0, size=(n - 1, 3)) * sigma

    return Trajectory(t, x, y, h, odometry)


def _stop_and_go_distance(t, speed, drive_time, stop_time, accel):
    """Distance travelled under a cycle of accelerate / cruise / brake / stand still."""
    ramp = min(speed / accel, 0.5 * drive_time)
    v_peak = accel * ramp
    cycle = drive_time + stop_time
    cycle_distance = v_peak * (drive_time - ramp)

    k = np.floor(t / cycle)
    u = t - k * cycle
    d = np.where(
        u < ramp, 0.5 * accel * u ** 2,
        np.where(u < drive_time - ramp,
                 0.5 * accel * ramp ** 2 + v_peak * (u - ramp),
                 np.where(u < drive_time,
                          cycle_distance - 0.5 * accel * np.clip(drive_time - u, 0.0, None) ** 2,
                          cycle_distance)))
    return k * cycle_distance + d
