import os
import sys
import glob
import argparse
import logging

import numpy as np
import pandas as pd

from config import *
from src.denoise import DenoiseConfig, fista_denoise
from src.grid_core import MaskedGrid, magnitude
from src.map_builder import (EdgeMap, build_global_stack, build_intensity_map, build_lut_calibration, fuse,
                             load_edge_map, load_lut, save_edge_map, save_lut, save_stack)
from src.pose_filter import FilterConfig, Localizer, localize_run
from src.register import HistogramSpec
from src.sim import (StripeLayout, World, default_lasers, generate_trajectory, generate_world,
                     scan_trajectory)
from src.utils import (ConfigError, InputError,
                       plot_error_traces,
                       read_grd,
                       read_scans_csv,
                       read_trajectory_csv,
                       write_frame,
                       write_grd,
                       write_pgm,
                       write_scans_csv,
                       write_text,
                       write_trajectory_csv)
from src.evaluation import cell_histograms, render_rmse, render_whitening, rmse_report, whitening_report

logging.basicConfig(filename=LOG_FILE, level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
                    format="%(asctime)s - %(levelname)s - %(message)s")

EXIT_CONFIG_ERROR = 2
EXIT_INPUT_ERROR = 3
EXIT_RUNTIME_ERROR = 4


def artifact_paths(output_dir):
    return {
        "world": os.path.join(output_dir, "world"),
        "survey": os.path.join(output_dir, "survey"),
        "drive": os.path.join(output_dir, "drive"),
        "map": os.path.join(output_dir, "map"),
        "localize": os.path.join(output_dir, "localize"),
        "evaluate": os.path.join(output_dir, "evaluate"),
    }


def lasers_from_config(cfg):
    lc = cfg.lasers
    return default_lasers(count=lc.count, seed=cfg.seed + 1, gain_range=lc.gain_range,
                          offset_range=lc.offset_range, noise_sigma=lc.noise_sigma,
                          sensor_height=lc.sensor_height, min_ring=lc.min_ring, max_ring=lc.max_ring,
                          angle_exponent=lc.angle_exponent, range_exponent=lc.range_exponent)


def denoise_config(cfg):
    if not cfg.denoise.enabled:
        return None
    d = cfg.denoise
    return DenoiseConfig(lam=d.lam, step=d.step, max_iters=d.max_iters, rel_tol=d.rel_tol)


def filter_config(cfg):
    f = cfg.filter
    s = cfg.search
    return FilterConfig(
        process_noise=np.diag(np.square(f.process_sigma)),
        init_cov=np.diag(np.square(f.init_sigma)),
        gate_sigma=f.gate_sigma if f.gate_sigma > 0 else None,
        min_half_extent=f.min_half_extent,
        max_half_extent=f.max_half_extent,
        coarse_step=s.coarse_step,
        fine_step=s.fine_step,
        fine_half_extent=s.fine_half_extent,
    )


def load_world(world_dir):
    truth = read_grd(os.path.join(world_dir, "world.grd"))
    labels = read_grd(os.path.join(world_dir, "world_labels.grd"))
    return World(truth, labels.values.astype(np.int8), rng_seed=-1)


def load_survey(scans_path, trajectory_path):
    scans = read_scans_csv(scans_path)
    if not scans:
        raise InputError(f"No scans in {scans_path}")
    trajectory = read_trajectory_csv(trajectory_path)
    return scans, trajectory


def run_command(command, cfg, args):
    paths = artifact_paths(cfg.output_dir)

    if command == "simulate":
        wc, lc, tc = cfg.world, cfg.lasers, cfg.trajectory
        layout = StripeLayout(lane_width=wc.lane_width, line_width=wc.line_width, dash_length=wc.dash_length,
                              dash_gap=wc.dash_gap, crosswalk_spacing=wc.crosswalk_spacing)
        world = generate_world(wc.extent, wc.cell_size, cfg.seed, layout, asphalt_mean=wc.asphalt_mean,
                               marking_mean=wc.marking_mean, speckle_sigma=wc.speckle_sigma,
                               speckle_scale=wc.speckle_scale, patch_count=wc.patch_count)
        lasers = lasers_from_config(cfg)
        scan_kwargs = dict(azimuth_count=lc.azimuth_count, footprint=lc.footprint, max_range=lc.max_range,
                           occluders=lc.occluders or None)

        write_grd(world.truth, os.path.join(paths["world"], "world.grd"))
        write_grd(MaskedGrid(world.geometry, world.labels), os.path.join(paths["world"], "world_labels.grd"))
        write_pgm(world.truth, os.path.join(paths["world"], "world.pgm"))
        write_frame(pd.DataFrame([{
            "laser": l.laser_id, "gain": l.gain, "offset": l.offset, "incidence": l.incidence,
            "range": l.range, "noise_sigma": l.noise_sigma,
        } for l in lasers]), os.path.join(paths["world"], "lasers.csv"), float_format="%.9f")

        for name, kind, duration, odo_sigma, seed in (
                ("survey", tc.survey_kind, tc.survey_duration, (0.0, 0.0, 0.0), cfg.seed + 1000),
                ("drive", tc.drive_kind, tc.drive_duration, tc.odometry_sigma, cfg.seed + 2000)):
            trajectory = generate_trajectory(kind, duration, tc.speed, seed, rate=tc.rate, start=tc.start,
                                             odometry_sigma=odo_sigma, block_size=tc.block_size,
                                             corner_radius=tc.corner_radius)
            scans = scan_trajectory(world, trajectory, lasers, seed, **scan_kwargs)
            write_trajectory_csv(trajectory, os.path.join(paths[name], "trajectory.csv"))
            write_scans_csv(scans, os.path.join(paths[name], "scans.csv"))
            print(f"Simulated {name}: {len(trajectory)} poses, {sum(len(s) for s in scans)} returns")

    elif command == "build-map":
        scans, trajectory = load_survey(args.scans or os.path.join(paths["survey"], "scans.csv"),
                                        args.trajectory or os.path.join(paths["survey"], "trajectory.csv"))
        stack = build_global_stack(trajectory, scans, cell_size=cfg.map.cell_size, key_mode=cfg.map.key_mode,
                                   max_range=cfg.lasers.max_range)
        edge_map = fuse(stack, denoise_config(cfg))
        map_dir = args.map_dir or paths["map"]
        save_edge_map(edge_map, map_dir)
        if cfg.map.save_stack:
            save_stack(stack, map_dir)
        if args.lut or cfg.search.match == "intensity":
            lut = build_lut_calibration(scans, trajectory, geometry=stack.geometry)
            save_lut(lut, os.path.join(map_dir, "lut.csv"))
            save_edge_map(build_intensity_map(trajectory, scans, lut, geometry=stack.geometry), map_dir,
                          name="intensity")
        print(f"Built edge map over {edge_map.edge.available_count} cells "
              f"from {len(stack)} perspectives in {map_dir}")

    elif command == "denoise":
        map_dir = args.map_dir or paths["map"]
        edge_map = load_edge_map(map_dir)
        if edge_map.fused is None:
            raise InputError(f"No gradient components (edge_dx.grd, edge_dy.grd) in {map_dir}")
        d = cfg.denoise
        fused = fista_denoise(edge_map.fused, DenoiseConfig(d.lam, d.step, d.max_iters, d.rel_tol))
        save_edge_map(EdgeMap(fused, magnitude(fused)), map_dir, name="edge_denoised")
        print(f"Denoised gradient field with lambda={d.lam} into {map_dir}")

    elif command == "localize":
        map_dir = args.map_dir or paths["map"]
        scans, trajectory = load_survey(args.scans or os.path.join(paths["drive"], "scans.csv"),
                                        args.trajectory or os.path.join(paths["drive"], "trajectory.csv"))
        match = cfg.search.match
        lut = None
        if match == "intensity":
            global_map = load_edge_map(map_dir, name="intensity")
            lut = load_lut(os.path.join(map_dir, "lut.csv"))
        else:
            global_map = load_edge_map(map_dir)

        rng = np.random.default_rng(cfg.seed + 3000)
        initial = trajectory.pose(0) + rng.normal(0.0, 1.0, size=3) * np.asarray(cfg.filter.gps_sigma)
        localizer = Localizer(
            global_map, initial, filter_config(cfg),
            HistogramSpec(bin_count=cfg.search.bin_count, min_overlap=cfg.search.min_overlap,
                          mode=cfg.search.bin_mode),
            match_mode=match, lut=lut, registration_enabled=cfg.filter.registration_enabled,
            local_extent=cfg.map.local_extent, window=cfg.map.window, denoise=denoise_config(cfg),
        )
        diagnostics = localize_run(localizer, trajectory, scans)

        suffix = "" if cfg.filter.registration_enabled else "_open_loop"
        if match == "intensity":
            suffix += "_intensity"
        out_dir = paths["localize"]
        write_frame(diagnostics, os.path.join(out_dir, f"diagnostics{suffix}.csv"), float_format="%.9f")
        plot_error_traces(diagnostics, os.path.join(out_dir, f"errors{suffix}.png"), labels=[f"{match}{suffix}"])
        text = render_rmse(rmse_report(diagnostics), label=f"{match}{suffix}")
        write_text(text, os.path.join(out_dir, f"rmse{suffix}.txt"))
        if localizer.last_registration is not None:
            t, result = localizer.last_registration
            write_frame(result.surface_frame(), os.path.join(out_dir, f"nmi_surface{suffix}.csv"), float_format="%.9f")
            logging.info(f"NMI surface dumped for the registration at t={t:.2f}")
        print(text)

    elif command == "evaluate":
        out_dir = paths["evaluate"]
        world_dir = args.world_dir or paths["world"]
        if os.path.exists(os.path.join(world_dir, "world.grd")):
            world = load_world(world_dir)
            scans, trajectory = load_survey(args.scans or os.path.join(paths["survey"], "scans.csv"),
                                            args.trajectory or os.path.join(paths["survey"], "trajectory.csv"))
            lut = None
            if cfg.eval.compare_lut:
                lut = build_lut_calibration(scans, trajectory, geometry=world.geometry)
            report = whitening_report(world, scans, trajectory, lut, cfg.eval.min_samples,
                                      cfg.eval.min_perspectives)
            write_frame(report.cells, os.path.join(out_dir, "whitening_cells.csv"))
            write_frame(report.summary, os.path.join(out_dir, "whitening.csv"))
            text = render_whitening(report)
            write_text(text, os.path.join(out_dir, "whitening.txt"))
            if not report.cells.empty:
                cell = divmod(int(report.cells.loc[report.cells["samples"].idxmax(), "cell"]), world.geometry.ny)
                write_frame(cell_histograms(world, scans, trajectory, cell),
                            os.path.join(out_dir, "cell_histogram.csv"))
                logging.info(f"Histogram dump for cell {cell}")
            print(text)
        else:
            print(f"No world in {world_dir}; skipping the whitening report.")

        diagnostics_files = args.diagnostics or sorted(glob.glob(os.path.join(paths["localize"], "diagnostics*.csv")))
        rows, texts = [], []
        for path in diagnostics_files:
            try:
                df = pd.read_csv(path)
            except FileNotFoundError:
                raise InputError(f"Diagnostics file not found: {path}")
            label = os.path.splitext(os.path.basename(path))[0]
            rmse = rmse_report(df)
            rows.append({"run": label, **rmse})
            texts.append(render_rmse(rmse, label))
        if rows:
            write_frame(pd.DataFrame(rows), os.path.join(out_dir, "rmse.csv"))
            write_text("".join(texts), os.path.join(out_dir, "rmse.txt"))
            print("".join(texts))

    else:
        raise ConfigError(f"Unknown command '{command}'")


def overrides_from_args(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    if args.denoise:
        overrides["denoise.enabled"] = True
    if args.lam is not None:
        overrides["denoise.lam"] = args.lam
    if args.disable_registration:
        overrides["filter.registration_enabled"] = False
    if args.match is not None:
        overrides["search.match"] = args.match
    if args.save_stack:
        overrides["map.save_stack"] = True
    if args.compare == "lut":
        overrides["eval.compare_lut"] = True
    return overrides


def main(argv=None):
    parser = argparse.ArgumentParser(description="Reflectivity-edge map building and map-based localization.")
    parser.add_argument("command", choices=["simulate", "build-map", "localize", "evaluate", "denoise"],
                        help="Pipeline stage to run.")
    parser.add_argument("--config", help="Path to a JSON run configuration (see config_template.json).")
    parser.add_argument("--seed", type=int, help="Override the configured seed.")
    parser.add_argument("--output-dir", help="Override the configured output directory.")
    parser.add_argument("--denoise", action="store_true", help="Denoise the fused gradient before taking edges.")
    parser.add_argument("--lambda", dest="lam", type=float, help="Denoising regularization weight.")
    parser.add_argument("--disable-registration", action="store_true", help="Run the filter open loop.")
    parser.add_argument("--match", choices=["edges", "intensity"], help="Map representation to register.")
    parser.add_argument("--save-stack", action="store_true", help="Also write the per-perspective stack.")
    parser.add_argument("--lut", action="store_true", help="Also build the lookup-table calibration and intensity map.")
    parser.add_argument("--compare", choices=["lut"], help="Add the lookup-table baseline to the whitening report.")
    parser.add_argument("--scans", help="Scans CSV (defaults follow the output directory layout).")
    parser.add_argument("--trajectory", help="Trajectory CSV.")
    parser.add_argument("--map-dir", help="Directory holding the global map.")
    parser.add_argument("--world-dir", help="Directory holding world.grd and world_labels.grd.")
    parser.add_argument("--diagnostics", nargs="+", help="Diagnostics CSV files to score.")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, overrides_from_args(args))
        os.makedirs(cfg.output_dir, exist_ok=True)
        write_effective_config(cfg, cfg.output_dir)
        run_command(args.command, cfg, args)
    except ConfigError as e:
        logging.error(f"Configuration error: {e}")
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except InputError as e:
        logging.error(f"Input error: {e}")
        print(f"Input error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except Exception as e:
        logging.exception(f"{args.command} failed")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
