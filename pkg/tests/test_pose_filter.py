"""
Pose filter: prediction, Joseph-form update, gating and the localization loop.

The closed-loop test drives a noise-free scanner along a straight road, maps the
drive with the true poses, then localizes the same drive from a displaced start.

Run with: pytest tests/test_pose_filter.py -v
"""
import numpy as np
import pytest

from src.evaluation import rmse_report
from src.grid_core import compose, wrap_angle
from src.map_builder import build_global_map, edge_map_from_grid
from src.pose_filter import (FilterConfig, Localizer, PoseBelief, is_positive_definite, localize_run,
                             motion_jacobian, predict, update)
from src.sim import (Scan, default_lasers, generate_trajectory, generate_world, scan_once, scan_to_body,
                     scan_trajectory)
from src.utils import DIAGNOSTIC_COLUMNS


def random_spd(rng, scale=1.0):
    a = rng.normal(size=(3, 3))
    return scale * (a @ a.T + 0.1 * np.eye(3))


@pytest.fixture(scope="module")
def flat_map():
    world = generate_world(extent=(20.0, 20.0), seed=1)
    return edge_map_from_grid(world.truth)


class TestPredict:
    def test_zero_increment_without_noise_is_identity(self):
        belief = PoseBelief((1.0, 2.0, 0.3), np.diag([0.5, 0.2, 0.01]))
        out = predict(belief, np.zeros(3), np.zeros((3, 3)))
        np.testing.assert_allclose(out.mean, belief.mean)
        np.testing.assert_allclose(out.cov, belief.cov)

    def test_process_noise_adds(self):
        belief = PoseBelief((0.0, 0.0, 0.0), np.diag([0.5, 0.2, 0.01]))
        Q = np.diag([0.1, 0.2, 0.003])
        out = predict(belief, np.zeros(3), Q)
        np.testing.assert_allclose(out.cov, belief.cov + Q)

    def test_forward_step_follows_heading(self):
        belief = PoseBelief((0.0, 0.0, np.pi / 2), np.eye(3))
        out = predict(belief, (1.0, 0.0, 0.0), np.zeros((3, 3)))
        np.testing.assert_allclose(out.mean, (0.0, 1.0, np.pi / 2), atol=1e-12)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        eps = 1e-6
        for _ in range(20):
            mean = rng.uniform(-3, 3, size=3)
            odo = rng.uniform(-1, 1, size=3)
            numeric = np.zeros((3, 3))
            for k in range(3):
                d = np.zeros(3)
                d[k] = eps
                diff = compose(mean + d, odo) - compose(mean - d, odo)
                diff[2] = wrap_angle(diff[2])
                numeric[:, k] = diff / (2 * eps)
            np.testing.assert_allclose(motion_jacobian(mean[2], odo), numeric, atol=1e-6)

    def test_heading_is_wrapped(self):
        belief = PoseBelief((0.0, 0.0, np.pi - 0.1), np.eye(3))
        out = predict(belief, (0.0, 0.0, 0.3), np.zeros((3, 3)))
        assert out.mean[2] == pytest.approx(-np.pi + 0.2)


class TestUpdate:
    def test_equal_uncertainty_splits_the_difference(self):
        belief = PoseBelief(np.zeros(3), np.eye(3))
        out, accepted = update(belief, (2.0, 2.0, 0.2), np.eye(3))
        assert accepted
        np.testing.assert_allclose(out.mean, (1.0, 1.0, 0.1), atol=1e-12)
        np.testing.assert_allclose(out.cov, 0.5 * np.eye(3), atol=1e-12)

    def test_vague_measurement_keeps_the_prior(self):
        belief = PoseBelief((1.0, -1.0, 0.2), np.eye(3))
        out, accepted = update(belief, (2.0, 0.0, 0.4), 1e6 * np.eye(3))
        assert accepted
        np.testing.assert_allclose(out.mean, belief.mean, atol=1e-5)

    def test_exact_measurement_replaces_the_prior(self):
        belief = PoseBelief((1.0, -1.0, 0.2), np.eye(3))
        z = np.array([2.0, 0.0, 0.4])
        out, accepted = update(belief, z, 1e-12 * np.eye(3))
        assert accepted
        np.testing.assert_allclose(out.mean, z, atol=1e-9)

    def test_diagonal_covariances_give_a_diagonal_gain(self):
        belief = PoseBelief(np.zeros(3), np.diag([1.0, 4.0, 0.1]))
        R = np.diag([3.0, 4.0, 0.3])
        out, _ = update(belief, (4.0, 2.0, 0.4), R)
        np.testing.assert_allclose(out.mean, (1.0, 1.0, 0.1), atol=1e-12)
        np.testing.assert_allclose(out.cov, np.diag([0.75, 2.0, 0.075]), atol=1e-12)

    def test_heading_innovation_is_wrapped(self):
        belief = PoseBelief((0.0, 0.0, np.pi - 0.05), np.eye(3))
        out, _ = update(belief, (0.0, 0.0, -np.pi + 0.05), np.eye(3))
        assert abs(wrap_angle(out.mean[2] - np.pi)) < 1e-9

    @pytest.mark.parametrize("R", [np.diag([1.0, 1.0, -1.0]), np.array([[1.0, 0.5, 0.0], [0.0, 1.0, 0.0],
                                                                         [0.0, 0.0, 1.0]]),
                                   np.full((3, 3), np.nan), np.eye(2)])
    def test_invalid_measurement_covariance_is_rejected(self, R):
        belief = PoseBelief(np.zeros(3), np.eye(3))
        out, accepted = update(belief, (1.0, 1.0, 0.0), R)
        assert not accepted
        assert out is belief
        assert not is_positive_definite(R)

    def test_gating(self):
        belief = PoseBelief(np.zeros(3), 0.01 * np.eye(3))
        R = 0.01 * np.eye(3)
        out, accepted = update(belief, (1.0, 0.0, 0.0), R, gate_sigma=4.0)
        assert not accepted and out is belief
        _, accepted = update(belief, (0.1, 0.0, 0.0), R, gate_sigma=4.0)
        assert accepted

    def run_random_steps(self, steps, seed):
        rng = np.random.default_rng(seed)
        belief = PoseBelief(np.zeros(3), np.eye(3))
        Q = np.diag([0.01, 0.01, 1e-4])
        for _ in range(steps):
            belief = predict(belief, rng.normal(scale=0.5, size=3), Q)
            prior = belief.cov
            belief, accepted = update(belief, belief.mean + rng.normal(scale=0.1, size=3),
                                      random_spd(rng, scale=10.0 ** rng.uniform(-4, 1)))
            assert accepted
            np.testing.assert_array_equal(belief.cov, belief.cov.T)
            assert np.linalg.eigvalsh(belief.cov).min() > 0.0
            assert np.linalg.eigvalsh(prior - belief.cov).min() > -1e-9

    def test_joseph_update_stays_positive_definite(self):
        self.run_random_steps(2000, seed=0)

    @pytest.mark.slow
    def test_joseph_update_stays_positive_definite_long_run(self):
        self.run_random_steps(100_000, seed=1)


class TestLocalizer:
    def test_unknown_match_mode(self, flat_map):
        with pytest.raises(ValueError):
            Localizer(flat_map, (5.0, 5.0, 0.0), match_mode="icp")

    def test_intensity_matching_needs_a_lut(self, flat_map):
        with pytest.raises(ValueError):
            Localizer(flat_map, (5.0, 5.0, 0.0), match_mode="intensity")

    def test_negative_process_noise_is_rejected(self):
        with pytest.raises(ValueError):
            FilterConfig(process_noise=np.diag([0.01, -0.01, 0.0]))

    def test_search_window_is_clamped(self, flat_map):
        config = FilterConfig()
        loc = Localizer(flat_map, (5.0, 5.0, 0.0), config)
        wide = PoseBelief(np.zeros(3), np.diag([100.0, 100.0, 1.0]))
        narrow = PoseBelief(np.zeros(3), np.diag([1e-6, 1e-6, 1e-8]))
        np.testing.assert_allclose(loc.search_half_extent(wide), config.max_half_extent)
        np.testing.assert_allclose(loc.search_half_extent(narrow), config.min_half_extent)

    def test_empty_local_map_coasts(self, flat_map):
        loc = Localizer(flat_map, (10.0, 10.0, 0.0), local_extent=6.0)
        belief, diag = loc.step(Scan.empty(0.1), (0.5, 0.0, 0.0), 0.1)
        assert diag.coasted
        np.testing.assert_allclose(belief.mean, (10.5, 10.0, 0.0))
        assert np.isnan(diag.nmi)

    def test_open_loop_tracks_exact_odometry(self, flat_map):
        traj = generate_trajectory("straight", 5.0, 2.0, seed=0, start=(5.0, 5.0, 0.3))
        loc = Localizer(flat_map, traj.pose(0), registration_enabled=False)
        traces = []
        for k in range(len(traj)):
            odometry = traj.odometry[k] if k > 0 else np.zeros(3)
            belief, diag = loc.step(Scan.empty(traj.t[k]), odometry, traj.t[k], traj.pose(k))
            traces.append(np.trace(belief.cov))
            assert diag.coasted
        df = loc.diagnostics()
        assert list(df.columns) == DIAGNOSTIC_COLUMNS
        assert len(df) == len(traj)
        np.testing.assert_allclose(df[["est_x", "est_y"]].to_numpy(), traj.poses()[:, :2], atol=1e-9)
        assert np.abs(df["err_lat"]).max() < 1e-9
        assert np.all(np.diff(traces) > 0)

    def test_localize_run_pairs_scans_by_timestamp(self, flat_map):
        traj = generate_trajectory("straight", 1.0, 1.0, seed=0, start=(5.0, 5.0, 0.0))
        loc = Localizer(flat_map, traj.pose(0), registration_enabled=False)
        df = localize_run(loc, traj, [], progress_every=0)
        assert len(df) == len(traj)
        assert df["coasted_flag"].eq(1).all()


@pytest.fixture(scope="module")
def survey():
    world = generate_world(extent=(50.0, 30.0), seed=8)
    lasers = default_lasers(count=6, min_ring=3.0, max_ring=5.5, angle_exponent=0.0, range_exponent=0.0)
    traj = generate_trajectory("straight", 6.0, 2.0, seed=0, start=(15.0, 15.0, 0.0))
    scans = scan_trajectory(world, traj, lasers, seed=1)
    global_map = build_global_map(traj, scans, threads=1)
    return traj, scans, global_map


@pytest.mark.slow
class TestClosedLoop:
    def test_registration_pulls_a_displaced_start_onto_the_road(self, survey):
        traj, scans, global_map = survey
        start = traj.pose(0) + np.array([0.4, -0.3, np.radians(0.5)])
        config = FilterConfig(init_cov=np.diag([0.3 ** 2, 0.3 ** 2, np.radians(1.0) ** 2]))
        loc = Localizer(global_map, start, config, local_extent=12.0, window=4, threads=1)

        # first step has nothing to register and coasts on odometry
        _, first = loc.step(Scan.empty(traj.t[0]), np.zeros(3), traj.t[0], traj.pose(0))
        assert first.coasted

        for k in range(1, len(traj)):
            loc.step(scan_to_body(scans[k], traj.pose(k)), traj.odometry[k], traj.t[k], traj.pose(k))

        df = loc.diagnostics()
        assert (df["coasted_flag"] == 0).sum() >= len(df) // 2
        tail = df.iloc[-20:]
        assert np.hypot(tail["err_lon"], tail["err_lat"]).mean() < 0.15
        assert np.abs(tail["err_h"]).max() < np.radians(1.0)

    def test_covariance_grows_while_occluded_and_contracts_on_the_first_fix(self, survey):
        traj, scans, global_map = survey
        k = len(traj) // 2
        pose = traj.pose(k)
        config = FilterConfig(init_cov=np.diag([0.05 ** 2, 0.05 ** 2, np.radians(0.3) ** 2]))
        loc = Localizer(global_map, pose, config, local_extent=12.0, window=4, threads=1)

        traces = []
        for step in range(10):
            belief, diag = loc.step(Scan.empty(step * 0.1), np.zeros(3), step * 0.1, pose)
            assert diag.coasted
            traces.append(np.trace(belief.cov))
        assert np.all(np.diff(traces) > 0.0)
        assert loc.last_registration is None

        belief, diag = loc.step(scan_to_body(scans[k], pose), np.zeros(3), 1.0, pose)
        assert not diag.coasted
        assert np.trace(belief.cov) < traces[-1]
        t, result = loc.last_registration
        assert t == 1.0
        assert len(result.surface_frame()) == result.lattice.size


@pytest.mark.slow
class TestStopAndGoDrive:
    """Five minutes of stop-and-go laps around a block against a map surveyed on a different day."""

    def test_closed_loop_stays_on_the_lane_and_beats_odometry(self):
        world = generate_world(extent=(120.0, 80.0), seed=0)
        lasers = default_lasers(count=16, seed=1, gain_range=(0.7, 1.3), offset_range=(-10.0, 10.0),
                                noise_sigma=2.0, min_ring=3.0, max_ring=9.0)
        start = (60.0, 22.0, 0.0)
        survey = generate_trajectory("stop-and-go", 60.0, 5.0, seed=10, start=start)
        global_map = build_global_map(survey, scan_trajectory(world, survey, lasers, seed=11),
                                      geometry=world.geometry)

        drive = generate_trajectory("stop-and-go", 300.0, 5.0, seed=12, start=start,
                                    odometry_sigma=(0.02, 0.02, np.radians(0.2)))
        config = FilterConfig(init_cov=np.diag([0.3 ** 2, 0.3 ** 2, np.radians(1.0) ** 2]))
        closed = Localizer(global_map, drive.pose(0), config, local_extent=24.0, window=8)
        open_loop = Localizer(global_map, drive.pose(0), config, registration_enabled=False)
        for k in range(len(drive)):
            t, truth = drive.t[k], drive.pose(k)
            odometry = drive.odometry[k] if k > 0 else np.zeros(3)
            # drawn per step, never stored
            scan = scan_once(world, truth, lasers, seed=[13, k], timestamp=t)
            closed.step(scan_to_body(scan, truth), odometry, t, truth)
            open_loop.step(Scan.empty(t), odometry, t, truth)

        closed_df, open_df = closed.diagnostics(), open_loop.diagnostics()
        r = rmse_report(closed_df)
        assert r["steps"] >= len(drive) // 2
        assert r["lat_cm"] <= 10.0
        assert r["lon_cm"] <= 20.0
        assert r["head_rad"] <= 5e-3
        assert max(r["max_lon_cm"], r["max_lat_cm"]) <= 40.0

        def translation_rmse(df):
            return float(np.sqrt(np.mean(df["err_lon"] ** 2 + df["err_lat"] ** 2)))

        assert translation_rmse(closed_df) < 0.25 * translation_rmse(open_df)
