"""
World, scanner and trajectory simulation.

Run with: pytest tests/test_sim.py -v
"""
import numpy as np
import pytest

from src.grid_core import wrap_angle
from src.sim import (LABEL_ASPHALT, LABEL_MARKING, LaserModel, StripeLayout, default_lasers,
                     generate_trajectory, generate_world, scan_once, scan_to_body, scan_trajectory,
                     stripe_mask)


@pytest.fixture(scope="module")
def world():
    return generate_world(extent=(30.0, 20.0), seed=11)


class TestWorld:
    def test_same_seed_gives_identical_world(self):
        a = generate_world(extent=(20.0, 10.0), seed=4)
        b = generate_world(extent=(20.0, 10.0), seed=4)
        np.testing.assert_array_equal(a.truth.values, b.truth.values)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_different_seed_changes_the_texture(self):
        a = generate_world(extent=(20.0, 10.0), seed=4)
        b = generate_world(extent=(20.0, 10.0), seed=5)
        assert not np.array_equal(a.truth.values, b.truth.values)

    def test_asphalt_mean(self, world):
        asphalt = world.truth.values[world.labels == LABEL_ASPHALT]
        assert abs(asphalt.mean() - 25.0) <= 5.0

    def test_values_are_eight_bit_levels(self, world):
        v = world.truth.values
        assert v.min() >= 0 and v.max() <= 255
        np.testing.assert_array_equal(v, np.round(v))

    def test_markings_are_brighter_than_asphalt(self, world):
        assert world.truth.values[world.labels == LABEL_MARKING].mean() > 60.0

    def test_stripe_fraction_matches_layout(self):
        # solid 0.3 m lines centred on cell centres every 3.5 m, no crosswalks
        layout = StripeLayout(lane_width=3.5, line_width=0.3, first_line_y=2.05, dash_length=0.0,
                              crosswalk_spacing=0.0)
        w = generate_world(extent=(40.0, 60.0), seed=2, layout=layout)
        lines = int(np.floor((60.0 - 2.05) / 3.5)) + 1
        expected = lines * 0.3 / 60.0
        fraction = stripe_mask(w.geometry, layout).mean()
        assert abs(fraction - expected) < 0.01

    def test_invalid_extent(self):
        with pytest.raises(ValueError):
            generate_world(extent=(0.0, 10.0))


class TestLaserModel:
    def test_linear_gain(self):
        laser = LaserModel(0, gain=2.0, angle_exponent=0.0, range_exponent=0.0)
        assert laser.respond(np.array([50.0]), np.random.default_rng(0))[0] == 100.0

    def test_clamped_at_255(self):
        laser = LaserModel(0, offset=300.0, angle_exponent=0.0, range_exponent=0.0)
        assert laser.respond(np.array([0.0]), np.random.default_rng(0))[0] == 255.0

    def test_clamped_at_zero(self):
        laser = LaserModel(0, offset=-300.0, angle_exponent=0.0, range_exponent=0.0)
        assert laser.respond(np.array([80.0]), np.random.default_rng(0))[0] == 0.0

    def test_attenuation_with_angle_and_range(self):
        laser = LaserModel(0, incidence=np.radians(60.0), range=20.0)
        assert laser.expected_response(np.array([100.0]))[0] == pytest.approx(100.0 * 0.5 * 0.5)

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            LaserModel(0, gain=0.0)
        with pytest.raises(ValueError):
            LaserModel(0, noise_sigma=-1.0)

    def test_noise_mean_matches_expected_response(self):
        laser = LaserModel(0, offset=3.0, noise_sigma=2.0, angle_exponent=0.0, range_exponent=0.0)
        y = laser.respond(np.full(20000, 40.0), np.random.default_rng(1))
        assert abs(y.mean() - 43.0) < 3 * 2.0 / np.sqrt(20000) + 0.01


class TestScan:
    def test_identity_response_returns_truth(self, world, identity_lasers):
        scan = scan_once(world, (15.0, 10.0, 0.3), identity_lasers, seed=0)
        assert len(scan) > 0
        i, j, inside = world.geometry.cell_index(scan.x, scan.y)
        assert inside.all()
        np.testing.assert_array_equal(scan.refl, world.truth.values[i, j])

    def test_returns_lie_on_the_laser_rings(self, world, identity_lasers):
        pose = (15.0, 10.0, 0.0)
        scan = scan_once(world, pose, identity_lasers, seed=1, footprint=0.3)
        radii = {l.laser_id: l.ring_radius for l in identity_lasers}
        rho = np.hypot(scan.x - pose[0], scan.y - pose[1])
        expected = np.array([radii[int(b)] for b in scan.laser])
        assert np.all(np.abs(rho - expected) <= 0.15 + 1e-9)

    def test_pose_outside_world_gives_empty_scan(self, world, identity_lasers):
        scan = scan_once(world, (-5.0, 3.0, 0.0), identity_lasers, seed=0)
        assert len(scan) == 0

    def test_same_seed_is_deterministic(self, world):
        lasers = default_lasers(count=8, seed=3, gain_range=(0.8, 1.2), offset_range=(-5, 5), noise_sigma=2.0,
                                max_ring=8.0)
        a = scan_once(world, (15.0, 10.0, 0.0), lasers, seed=[7, 2])
        b = scan_once(world, (15.0, 10.0, 0.0), lasers, seed=[7, 2])
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.refl, b.refl)

    def test_max_range_drops_outer_lasers(self, world):
        lasers = default_lasers(count=8, min_ring=3.0, max_ring=17.0)
        scan = scan_once(world, (15.0, 10.0, 0.0), lasers, seed=0, max_range=10.0)
        kept = {l.laser_id for l in lasers if l.range <= 10.0}
        assert set(np.unique(scan.laser)) <= kept

    def test_occluder_removes_returns(self, world, identity_lasers):
        pose = (15.0, 10.0, 0.0)
        box = [[15.0, 5.0], [25.0, 5.0], [25.0, 15.0], [15.0, 15.0]]
        scan = scan_once(world, pose, identity_lasers, seed=0, occluders=[box])
        assert len(scan) > 0
        assert not np.any(scan.x > 15.0)

    def test_body_frame_conversion(self, world, identity_lasers):
        pose = (15.0, 10.0, 1.2)
        scan = scan_once(world, pose, identity_lasers, seed=0)
        body = scan_to_body(scan, pose)
        np.testing.assert_allclose(np.hypot(body.x, body.y), np.hypot(scan.x - 15.0, scan.y - 10.0))

    def test_scan_trajectory_uses_pose_timestamps(self, world, identity_lasers):
        traj = generate_trajectory("straight", 1.0, 2.0, seed=0, start=(10.0, 10.0, 0.0))
        scans = scan_trajectory(world, traj, identity_lasers, seed=5, every=2)
        assert [s.timestamp for s in scans] == list(traj.t[::2])


class TestTrajectory:
    def test_straight_heading_is_constant(self):
        traj = generate_trajectory("straight", 10.0, 3.0, seed=0, start=(0.0, 0.0, 0.4))
        assert np.all(traj.h == traj.h[0])
        assert traj.h[0] == pytest.approx(0.4)

    def test_loop_closes_within_one_cell(self):
        traj = generate_trajectory("loop", 60.0, 2.0, seed=0, start=(5.0, 5.0, 0.0))
        assert traj.t[-1] == pytest.approx(60.0)
        assert np.hypot(traj.x[-1] - traj.x[0], traj.y[-1] - traj.y[0]) < 0.10

    def test_zero_noise_odometry_integrates_to_truth(self):
        for kind in ("straight", "curvy", "loop", "stop-and-go"):
            traj = generate_trajectory(kind, 30.0, 4.0, seed=1)
            integrated = traj.integrate_odometry()
            np.testing.assert_allclose(integrated[:, :2], traj.poses()[:, :2], atol=1e-9)
            assert np.all(np.abs(wrap_angle(integrated[:, 2] - traj.h)) < 1e-9)

    def test_noisy_odometry_drifts(self):
        traj = generate_trajectory("straight", 30.0, 4.0, seed=1, odometry_sigma=(0.02, 0.02, 0.0035))
        drift = np.hypot(*(traj.integrate_odometry()[-1, :2] - traj.poses()[-1, :2]))
        assert drift > 0.0
        assert np.all(traj.odometry[0] == 0.0)

    def test_stop_and_go_stands_still(self):
        traj = generate_trajectory("stop-and-go", 60.0, 5.0, seed=0, drive_time=20.0, stop_time=3.0)
        step = np.hypot(np.diff(traj.x), np.diff(traj.y))
        assert np.sum(step < 1e-9) >= 20
        assert step.max() <= 5.0 / 10.0 + 1e-6

    def test_curvy_speed_is_preserved(self):
        traj = generate_trajectory("curvy", 20.0, 5.0, seed=0)
        step = np.hypot(np.diff(traj.x), np.diff(traj.y))
        np.testing.assert_allclose(step, 0.5, rtol=0.01)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            generate_trajectory("zigzag", 10.0, 1.0, seed=0)

    def test_pose_lookup_by_timestamp(self):
        traj = generate_trajectory("straight", 2.0, 1.0, seed=0)
        np.testing.assert_array_equal(traj.pose_at(traj.t[5]), traj.pose(5))
        assert traj.pose_at(0.05) is None
