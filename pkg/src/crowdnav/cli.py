"""Operator entry point for the pipeline.

Subcommands: fit-homography, build-dataset, train, eval, simulate,
serve. Results go to stdout; every failure is a single-line diagnostic
on stderr with a nonzero exit (2 for usage problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from crowdnav import geometry, mapping, neuralnet, simworld, tracking
from crowdnav.config import PipelineConfig, default_config, load_config
from crowdnav.mapping import MapParams, Scene, TrainingRecord
from crowdnav.simworld import ScenarioSpec

TEST_FRACTION = 0.1  # held-out share for evaluation


class UsageError(ValueError):
    pass


def read_correspondences(path) -> tuple[list, list]:
    """Parse `sx,sy,dx,dy` lines into source and target point lists."""
    src, dst = [], []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise UsageError(f"correspondence line {lineno}: expected sx,sy,dx,dy")
            try:
                sx, sy, dx, dy = (float(p) for p in parts)
            except ValueError:
                raise UsageError(f"correspondence line {lineno}: non-numeric value") from None
            src.append((sx, sy))
            dst.append((dx, dy))
    return src, dst


def build_records_from_detections(
    detections: list,
    cfg: PipelineConfig,
    homography: geometry.Homography,
) -> list[TrainingRecord]:
    """Detection log -> floor poses -> labels -> occupancy records.

    One record per consecutive usable frame pair; pairs spanning frames
    with a missing marker are discarded.
    """
    scale = cfg.floor.scale()
    coeffs = cfg.distortion
    poses = tracking.poses_from_detections(detections, scale, homography, coeffs)
    humans = tracking.humans_by_frame(detections, scale, homography, coeffs)
    goal = tuple(cfg.dataset.goal)
    walls = tuple(tuple(w) for w in cfg.dataset.walls)
    params = MapParams(extent_cm=cfg.map.extent_cm, person_radius_cm=cfg.map.person_radius_cm)

    records = []
    for (f0, p0), (f1, p1) in zip(poses, poses[1:]):
        if f1 != f0 + 1:
            continue  # gap: a marker went missing in between
        labels = tracking.action_labels([p0, p1], cfg.dataset.dt)
        scene = Scene(
            robot=p0,
            goal=goal,
            pedestrians=tuple(
                (pos, params.person_radius_cm) for pos in humans.get(f0, [])
            ),
            walls=walls,
        )
        m, theta_rel = mapping.render_occupancy(scene, params)
        records.append(
            TrainingRecord(
                map=m,
                theta_rel=theta_rel,
                speed=labels[0].speed,
                rotation=labels[0].rotation,
            )
        )
    if not records:
        raise mapping.EmptyDatasetError(
            "no usable frame pairs (need both markers in consecutive frames)"
        )
    return records


def read_homography_file(path) -> geometry.Homography:
    """Read the 9 row-major values written by fit-homography."""
    with open(path, "r", encoding="utf-8") as f:
        values = f.read().split()
    if len(values) != 9:
        raise UsageError(f"homography file must hold 9 values, got {len(values)}")
    try:
        return geometry.Homography.from_values([float(v) for v in values])
    except ValueError as e:
        raise UsageError(f"bad homography file: {e}") from None


def _load_cfg(args) -> PipelineConfig:
    return load_config(args.config) if args.config else default_config()


def cmd_fit_homography(args) -> int:
    cfg = _load_cfg(args)
    src, dst = read_correspondences(args.correspondences)
    if len(src) < 4:
        raise UsageError(f"need at least 4 correspondences, got {len(src)}")
    gd = cfg.gd if args.seed is None else replace(cfg.gd, seed=args.seed)
    h, loss = geometry.homography_fit(src, dst, gd)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as f:
            f.write(" ".join(repr(v) for v in h.h) + "\n")
    worst = 0.0
    for s, d in zip(src, dst):
        px, py = geometry.homography_apply(h, s)
        worst = max(worst, ((px - d[0]) ** 2 + (py - d[1]) ** 2) ** 0.5)
    print(f"final_loss {loss!r}")
    print(f"max_residual_px {worst!r}")
    return 0


def cmd_build_dataset(args) -> int:
    cfg = _load_cfg(args)
    detections = tracking.read_detection_log(args.detections)
    h = read_homography_file(args.homography) if args.homography else geometry.Homography.identity()
    records = build_records_from_detections(detections, cfg, h)
    mapping.write_dataset(records, args.out)
    speed_avg, rot_avg = mapping.dataset_action_stats(records)
    print(f"records {len(records)}")
    print(f"{speed_avg!r},{rot_avg!r}")
    return 0


def _averages_line(label: str, speed: float, rotation: float) -> str:
    return (
        f"{label}: Speed average (cm/s): [{speed:.6f}], "
        f"Rotation average (degrees): [{rotation:.6f}]"
    )


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    records = mapping.read_dataset(args.dataset)
    if len(records) < 10:
        raise UsageError(f"dataset has {len(records)} records; need >= 10 to split")
    tc = cfg.train
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if args.steps is not None:
        tc = replace(tc, steps=args.steps)
    train_recs, test_recs = mapping.split_dataset(records, TEST_FRACTION, tc.seed)
    train_data = neuralnet.to_train_data(train_recs)
    test_data = neuralnet.to_train_data(test_recs)
    params0 = neuralnet.init_params(tc.seed)
    params, history = neuralnet.train(params0, train_data, tc)
    if args.out:
        neuralnet.save_params(params, args.out)
    if args.loss_out:
        neuralnet.export_loss_history(history, args.loss_out)

    train_pred = neuralnet.forward_batch(params, train_data.maps, train_data.extras)
    test_pred = neuralnet.forward_batch(params, test_data.maps, test_data.extras)
    train_mse = neuralnet.mse(train_pred, train_data.targets)
    test_mse = neuralnet.mse(test_pred, test_data.targets)
    base_s, base_r = mapping.dataset_action_stats(test_recs)
    net_s = float(abs(test_pred[:, 0]).mean())
    net_r = float(abs(test_pred[:, 1]).mean())
    print(f"train_mse {train_mse!r}")
    print(f"test_mse {test_mse!r}")
    print(_averages_line("Baseline", base_s, base_r))
    print(_averages_line("Using the Neural Net", net_s, net_r))
    return 0


def cmd_eval(args) -> int:
    params = neuralnet.load_params(args.params)
    records = mapping.read_dataset(args.dataset)
    if not records:
        raise UsageError("dataset is empty")
    data = neuralnet.to_train_data(records)
    pred = neuralnet.forward_batch(params, data.maps, data.extras)
    print(f"mse {neuralnet.mse(pred, data.targets)!r}")
    base_s, base_r = mapping.dataset_action_stats(records)
    print(_averages_line("Baseline", base_s, base_r))
    print(
        _averages_line(
            "Using the Neural Net",
            float(abs(pred[:, 0]).mean()),
            float(abs(pred[:, 1]).mean()),
        )
    )
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    map_params = MapParams(
        extent_cm=cfg.map.extent_cm, person_radius_cm=cfg.map.person_radius_cm
    )
    if args.policy == "oracle":
        policy = simworld.scripted_pilot
    else:
        try:
            params = neuralnet.load_params(args.policy)
        except (OSError, neuralnet.ParamsFormatError) as e:
            raise UsageError(f"cannot load policy file {args.policy}: {e}") from None
        policy = simworld.network_policy(params, map_params)

    arena = tuple(cfg.scenario.arena)
    seed0 = args.seed if args.seed is not None else 0
    successes = 0
    print("episode,success,steps,collisions,min_clearance")
    for i in range(args.episodes):
        spec = simworld.default_spec(args.scenario, seed0 + i, arena)
        res = simworld.run_episode(policy, spec, cfg.scenario.max_steps, cfg.scenario.dt)
        successes += res.success
        print(
            f"{i},{int(res.success)},{res.steps_taken},{res.collisions},"
            f"{res.min_clearance!r}"
        )
    print(f"success_rate,{successes / args.episodes!r}")
    return 0


def cmd_serve(args) -> int:
    from crowdnav import teleop  # deferred: pulls in the server stack

    cfg = _load_cfg(args)
    params = neuralnet.load_params(args.params) if args.params else None
    spec = simworld.default_spec(
        args.scenario, args.seed if args.seed is not None else 0, tuple(cfg.scenario.arena)
    )
    map_params = MapParams(
        extent_cm=cfg.map.extent_cm, person_radius_cm=cfg.map.person_radius_cm
    )
    port = args.port if args.port is not None else cfg.serve.port
    try:
        teleop.run_session(
            spec,
            map_params=map_params,
            params=params,
            out_dir=args.out or ".",
            host=cfg.serve.host,
            port=port,
            tick_rate=cfg.serve.tick_rate,
        )
    except KeyboardInterrupt:
        pass
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowdnav", description="crowd-navigation learning pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="pipeline config JSON", default=None)
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")

    p = sub.add_parser("fit-homography", help="fit the floor homography by gradient descent")
    common(p)
    p.add_argument("correspondences", help="text file of sx,sy,dx,dy lines")
    p.add_argument("--out", default=None, help="write the 9 values, one line")
    p.set_defaults(fn=cmd_fit_homography)

    p = sub.add_parser("build-dataset", help="detection log to training records")
    common(p)
    p.add_argument("detections", help="detection log (frame,kind,x,y)")
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument(
        "--homography",
        default=None,
        help="rectifying homography file for raw-pixel logs (default: identity)",
    )
    p.set_defaults(fn=cmd_build_dataset)

    p = sub.add_parser("train", help="train the action regressor (90/10 split)")
    common(p)
    p.add_argument("dataset", help="dataset file")
    p.add_argument("--out", default=None, help="parameter file to write")
    p.add_argument("--loss-out", default=None, help="write step,lr,loss history")
    p.add_argument("--steps", type=int, default=None, help="override configured steps")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved parameters on a dataset")
    common(p)
    p.add_argument("params", help="parameter file")
    p.add_argument("dataset", help="dataset file")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("simulate", help="run closed-loop episodes")
    common(p)
    p.add_argument("--policy", default="oracle", help="'oracle' or a parameter file")
    p.add_argument("--scenario", default="clear", choices=simworld.SCENARIO_CLASSES)
    p.add_argument("--episodes", type=int, default=10)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("serve", help="run the tele-operation server")
    common(p)
    p.add_argument("--scenario", default="clear", choices=simworld.SCENARIO_CLASSES)
    p.add_argument("--params", default=None, help="enable policy mode with these parameters")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--out", default=None, help="directory for recorded datasets")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 0
    except Exception as e:  # single-line diagnostic contract
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
