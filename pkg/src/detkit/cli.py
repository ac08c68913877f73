"""``detkit`` command line.

Exit status: 0 success, 1 check or validation failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data_io, losses, metrics, neck, regression
from .losses import Box, LOSS_IDS

DEFAULT_SEED = 0
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _unit_interval(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _box(text: str) -> Box:
    parts = text.split(",")
    try:
        box = Box(*(float(p) for p in parts))
    except (TypeError, ValueError):
        raise argparse.ArgumentTypeError(f"expected x1,y1,x2,y2, got {text!r}") from None
    if box.x2 <= box.x1 or box.y2 <= box.y1:
        raise argparse.ArgumentTypeError(f"box needs x2 > x1 and y2 > y1, got {text!r}")
    return box


def _emit(args, payload: dict, lines: list[str]) -> None:
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        print("\n".join(lines))


def cmd_grad_check(args) -> int:
    rep = losses.gradient_check(args.loss, args.pairs, args.seed, args.tol)
    a, g = rep.worst_pair
    payload = {
        "loss": rep.loss_id,
        "pairs": rep.pairs,
        "seed": args.seed,
        "tol": rep.tol,
        "max_rel_error": rep.max_rel_error,
        "worst_index": rep.worst_index,
        "worst_anchor": list(a),
        "worst_gt": list(g),
        "status": "pass" if rep.passed else "fail",
    }
    fmt = lambda b: "(" + ", ".join(f"{v:.6f}" for v in b) + ")"  # noqa: E731
    _emit(
        args,
        payload,
        [
            f"loss: {rep.loss_id}",
            f"pairs: {rep.pairs}",
            f"seed: {args.seed}",
            f"tol: {rep.tol:g}",
            f"max_rel_error: {rep.max_rel_error:.3e}",
            f"worst_pair: #{rep.worst_index} anchor={fmt(a)} gt={fmt(g)}",
            f"status: {payload['status'].upper()}",
        ],
    )
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_sim_regress(args) -> int:
    cfg = regression.SimConfig(
        loss_id=args.loss,
        attention_enabled=not args.no_attention,
        init_box=args.init,
        target_box=args.target,
        learning_rate=args.lr,
        steps=args.steps,
    )
    traj = regression.simulate(cfg)
    if args.out:
        try:
            regression.write_trajectory(traj, args.out)
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    if traj.error or not len(traj):
        print(f"error: trajectory became non-finite ({traj.error})", file=sys.stderr)
        return EXIT_FAIL
    rep = regression.detect_enlargement(traj, args.threshold)
    payload = {
        "loss": cfg.effective_loss,
        "steps": cfg.steps,
        "learning_rate": cfg.learning_rate,
        "final_iou": rep.final_iou,
        "max_area_ratio": rep.max_ratio,
        "max_area_ratio_step": rep.max_ratio_step,
        "enlargement_step": rep.event_step,
        "out": str(args.out) if args.out else None,
    }
    _emit(
        args,
        payload,
        [
            f"loss: {cfg.effective_loss}",
            f"steps: {cfg.steps}",
            f"learning_rate: {cfg.learning_rate:g}",
            f"final_iou: {rep.final_iou:.6f}",
            f"max_area_ratio: {rep.max_ratio:.6f} (step {rep.max_ratio_step})",
            f"enlargement_step: {'none' if rep.event_step is None else rep.event_step}",
        ]
        + ([f"trajectory: {args.out}"] if args.out else []),
    )
    return EXIT_OK


def cmd_neck_report(args) -> int:
    try:
        if args.preset:
            spec = data_io.load_preset(args.preset)
        else:
            spec = data_io.load_neck_config(Path(args.config).read_text(encoding="utf-8"), str(args.config))
    except data_io.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    text, ok = neck.neck_report(spec)
    if args.json:
        planned = neck.plan_channels(spec)
        diags = neck.validate_channels(planned)
        structural = any(d.message.startswith(("cycle", "unknown")) for d in diags)
        dist = {} if structural else neck.gradient_distances(planned)
        src = {} if structural else neck.edges(planned)
        known = [d for d in dist.values() if d is not None]
        payload = {
            "preset": spec.name,
            "link_policy": spec.link_policy,
            "prune_upsample": spec.prune_upsample,
            "nodes": [
                {
                    "node": n.name,
                    "level": n.level,
                    "layer": n.layer,
                    "direction": n.direction,
                    "op": n.op,
                    "in_channels": n.in_channels,
                    "out_channels": n.out_channels,
                    "distance": dist.get(n.name),
                    "inputs": src.get(n.name, []),
                }
                for n in planned.nodes
            ],
            "heads": dict(spec.heads),
            "max_gradient_distance": max(known) if known else None,
            "notices": list(spec.notices),
            "valid": ok,
            "diagnostics": [{"node": d.node, "message": d.message} for d in diags],
        }
        print(json.dumps(payload, indent=2))
    else:
        sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_eval(args) -> int:
    if not args.gt.exists():
        print(f"error: no such ground-truth path: {args.gt}", file=sys.stderr)
        return EXIT_USAGE
    gt = data_io.load_ground_truth(args.gt)
    for d in gt.diagnostics:
        print(f"warning: {d}", file=sys.stderr)
    try:
        det_text = Path(args.det).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: cannot read {args.det}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    parsed = data_io.read_detections(det_text, str(args.det))
    if not parsed.schema_ok:
        for d in parsed.diagnostics:
            print(f"error: {d}", file=sys.stderr)
        return EXIT_USAGE
    for d in parsed.diagnostics:
        print(f"warning: {d}", file=sys.stderr)
    try:
        rep = metrics.map_at(parsed.detections, gt.ground_truths, args.iou, args.points)
        rng = metrics.map_range(parsed.detections, gt.ground_truths, points=args.points) if args.range else None
    except metrics.EvaluationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    payload = rep.as_dict()
    if rng is not None:
        payload["map_50_95"] = rng
    names = data_io.VISDRONE
    lines = [f"iou_threshold: {rep.iou_threshold:g}"]
    lines += [f"ap[{c}:{names.name(c)}]: {rep.ap[c]:.6f}" for c in sorted(rep.ap)]
    lines += [f"map: {rep.map:.6f}", f"precision: {rep.precision:.6f}", f"recall: {rep.recall:.6f}"]
    lines += [f"tp: {rep.tp}", f"fp: {rep.fp}", f"fn: {rep.fn}"]
    if rng is not None:
        lines.append(f"map_50_95: {rng:.6f}")
    if args.confusion:
        classes = sorted({g.class_id for g in gt.ground_truths if not g.ignore} | {d.class_id for d in parsed.detections})
        cm = metrics.confusion_matrix(parsed.detections, gt.ground_truths, classes, args.iou, args.score_threshold)
        payload["confusion"] = {"classes": classes, "counts": cm.counts.tolist()}
        header = ["true\\pred"] + [str(c) for c in classes] + ["bg"]
        rows = [header] + [
            [str(c)] + [str(v) for v in cm.counts[i]] for i, c in enumerate(list(classes) + ["bg"])
        ]
        width = max(len(x) for r in rows for x in r)
        lines.append("confusion:")
        lines += ["  " + " ".join(x.rjust(width) for x in r) for r in rows]
    _emit(args, payload, lines)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="detkit", description="Box-loss, neck and evaluation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("grad-check", help="compare analytic and finite-difference loss gradients")
    p.add_argument("--loss", required=True, choices=LOSS_IDS)
    p.add_argument("--pairs", type=_positive_int, default=1000)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--tol", type=_positive_float, default=1e-4)
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("sim-regress", help="regress one anchor onto a target by gradient descent")
    p.add_argument("--loss", default="piou", choices=LOSS_IDS)
    p.add_argument("--no-attention", action="store_true", help="PIoU: drive with the corner penalty alone")
    p.add_argument("--lr", type=_positive_float, default=regression.DEFAULT_LR)
    p.add_argument("--steps", type=_positive_int, default=regression.DEFAULT_STEPS)
    p.add_argument("--init", type=_box, default=regression.DEFAULT_INIT, metavar="X1,Y1,X2,Y2")
    p.add_argument("--target", type=_box, default=regression.DEFAULT_TARGET, metavar="X1,Y1,X2,Y2")
    p.add_argument("--threshold", type=_positive_float, default=1.05, help="area ratio counted as enlargement")
    p.add_argument("--out", type=Path, help="trajectory CSV path")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="accepted for uniformity; the run is deterministic")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_sim_regress)

    p = sub.add_parser("neck-report", help="tabulate and validate a neck graph")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path)
    src.add_argument("--preset", choices=data_io.preset_names())
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_neck_report)

    p = sub.add_parser("eval", help="precision, recall, AP and mAP of a detection file")
    p.add_argument("--gt", required=True, type=Path, help="annotation file or directory of <image_id>.txt")
    p.add_argument("--det", required=True, type=Path, help="detection CSV")
    p.add_argument("--iou", type=_unit_interval, default=0.5)
    p.add_argument("--range", action="store_true", help="also report mAP over IoU 0.50:0.05:0.95")
    p.add_argument("--points", type=int, choices=(101,), default=None, help="sampled-recall AP instead of all-point")
    p.add_argument("--confusion", action="store_true", help="print the confusion matrix")
    p.add_argument("--score-threshold", type=_unit_interval, default=0.25)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
