"""Command-line entry point.

Subcommands:
  analyze     parameter / FLOP report for a network or the whole system
  run         stream a frame directory (or .tnsr stream) through the pipeline
  train-flow  toy-scale flow training on synthetic translation pairs
  sweep       cost grid over width multipliers and key-frame intervals
  selftest    gradient checks and oracle equivalences, pass/fail per item

`FLOWDET_NUM_THREADS` caps BLAS thread pools (set before heavy imports).
"""

import argparse
import os
import sys


def _apply_thread_env():
    n = os.environ.get("FLOWDET_NUM_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def _parse_input(text):
    try:
        w, h = text.lower().split("x")
        return int(h), int(w)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected WxH (e.g. 512x384), got {text!r}") from exc


def build_parser():
    parser = argparse.ArgumentParser(prog="flowdet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="static parameter/FLOP cost report")
    pa.add_argument("--net", choices=("light-flow", "flownet", "flownet-half", "system"), default="system")
    pa.add_argument("--alpha", type=float, default=1.0)
    pa.add_argument("--beta", type=float, default=1.0)
    pa.add_argument("--l", dest="key_interval", type=int, default=10, help="key frame interval")
    pa.add_argument("--input", type=_parse_input, default=None, help="input size as WxH")
    pa.add_argument("--no-flow", action="store_true", help="drop the flow network (single-frame style)")
    pa.add_argument("--no-gru", action="store_true", help="drop the aggregation module")
    pa.add_argument("--gru-layers", type=int, default=1)
    pa.add_argument("--fixed-interface", action="store_true", help="keep 128-d/490-d interface maps unscaled by alpha")
    pa.add_argument("--count-elementwise", action="store_true")
    pa.add_argument("--roi-count", type=int, default=0, help="proposals per frame to bill PSRoI/FC work for")
    pa.add_argument("--per-layer", action="store_true", help="print the per-layer table")
    pa.add_argument("--csv", metavar="PATH", default=None, help="append a summary CSV row")

    pr = sub.add_parser("run", help="run the video pipeline")
    pr.add_argument("--input", required=True, help="frame directory (png/ppm) or .tnsr stream file")
    pr.add_argument("--output", default=None, help="per-frame detection records file")
    pr.add_argument("--checkpoint", default=None)
    pr.add_argument("--random-weights", action="store_true")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--l", dest="key_interval", type=int, default=10)
    pr.add_argument("--alpha", type=float, default=1.0)
    pr.add_argument("--beta", type=float, default=1.0)
    pr.add_argument("--shorter-side", type=int, default=224)
    pr.add_argument("--score-thresh", type=float, default=0.05)
    pr.add_argument("--num-classes", type=int, default=30)
    pr.add_argument("--classes", default=None, help="class-name list file (one per line)")
    pr.add_argument("--summary-csv", default=None, help="append a sweep-style CSV row")
    pr.add_argument("--config", default=None, help="key = value file overriding defaults")

    pt = sub.add_parser("train-flow", help="toy flow training on synthetic pairs")
    pt.add_argument("--beta", type=float, default=0.25)
    pt.add_argument("--size", type=int, default=64)
    pt.add_argument("--pairs", type=int, default=256)
    pt.add_argument("--iterations", type=int, default=500)
    pt.add_argument("--batch", type=int, default=16)
    pt.add_argument("--lr", type=float, default=1e-3)
    pt.add_argument("--weight-decay", type=float, default=4e-5)
    pt.add_argument("--max-shift", type=float, default=8.0)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--out", default=None, help="write the trained flow checkpoint here")

    ps = sub.add_parser("sweep", help="cost grid over alpha, beta, l")
    ps.add_argument("--alphas", default="1.0,0.75,0.5")
    ps.add_argument("--betas", default="1.0,0.75,0.5")
    ps.add_argument("--ls", default="10")
    ps.add_argument("--input", type=_parse_input, default=None, help="detection input as WxH")
    ps.add_argument("--fixed-interface", action="store_true")
    ps.add_argument("--out", default=None, help="CSV output path (default stdout)")

    pc = sub.add_parser("selftest", help="gradient checks + oracle suites")
    pc.add_argument("--instances", type=int, default=5, help="random instances per gradient check")
    pc.add_argument("--seed", type=int, default=0)
    return parser


def cmd_analyze(args):
    from .analyzer import (
        SystemCostConfig,
        amortized_cost,
        count_network,
        format_report,
    )

    if args.net == "system":
        det_hw = args.input or (224, 400)
        cost = amortized_cost(
            SystemCostConfig(
                alpha=args.alpha,
                beta=args.beta,
                key_interval=args.key_interval,
                det_hw=det_hw,
                use_flow=not args.no_flow,
                use_gru=not args.no_gru,
                gru_layers=args.gru_layers,
                scale_interface=not args.fixed_interface,
                roi_count=args.roi_count,
                include_elementwise=args.count_elementwise,
            )
        )
        if args.per_layer:
            for name, report in cost.sections.items():
                print(f"-- {name} --")
                print(format_report(report))
        print(
            f"system alpha={args.alpha} beta={args.beta} l={args.key_interval} "
            f"input={det_hw[1]}x{det_hw[0]}"
        )
        print(f"params = {cost.params / 1e6:.3f} M")
        print(f"key_frame_flops = {cost.key_flops / 1e9:.4f} B")
        print(f"nonkey_frame_flops = {cost.nonkey_flops / 1e9:.4f} B")
        print(f"per_frame_flops = {cost.per_frame_flops / 1e9:.4f} B")
        if args.csv:
            _append_csv(args.csv, f"{args.alpha},{args.beta},{args.key_interval},{cost.params},{cost.per_frame_flops:.0f}")
        return 0

    hw = args.input or (384, 512)
    if args.net == "light-flow":
        from .lightflow import build_light_flow

        graph = build_light_flow(args.beta).graph
    else:
        from .baselines import build_flownet_half, build_flownet_s

        graph = build_flownet_s() if args.net == "flownet" else build_flownet_half()
    report = count_network(graph, {"Images": (6, hw[0], hw[1])}, args.count_elementwise)
    if args.per_layer:
        print(format_report(report))
    else:
        print(f"{args.net} input={hw[1]}x{hw[0]}" + (f" beta={args.beta}" if args.net == "light-flow" else ""))
        print(f"params = {report.params / 1e6:.3f} M")
        print(f"flops = {report.flops / 1e9:.4f} B")
    if args.csv:
        _append_csv(args.csv, f"{args.net},{args.beta},{report.params},{report.flops}")
    return 0


def _append_csv(path, row):
    with open(path, "a") as f:
        f.write(row + "\n")


def cmd_run(args):
    from .io import load_class_names, parse_config
    from .pipeline import PipelineConfig, build_nets, run_video, summary_csv_row, summary_text

    detector_keys = {
        "rpn_pre_nms": int,
        "rpn_post_nms": int,
        "rpn_nms_iou": float,
        "final_nms_iou": float,
        "min_box_size": float,
    }
    detector_overrides = {}
    if args.config:
        overrides = parse_config(args.config)
        casts = {
            "key_interval": int,
            "alpha": float,
            "beta": float,
            "shorter_side": int,
            "score_thresh": float,
            "num_classes": int,
            "seed": int,
        }
        for key, value in overrides.items():
            if key in detector_keys:
                detector_overrides[key] = detector_keys[key](value)
            elif key in casts:
                setattr(args, key, casts[key](value))
            else:
                raise ValueError(f"unknown config key {key!r}")
    if not args.checkpoint and not args.random_weights:
        raise ValueError("run: provide --checkpoint or pass --random-weights --seed S")
    cfg = PipelineConfig(
        key_interval=args.key_interval,
        alpha=args.alpha,
        beta=args.beta,
        shorter_side=args.shorter_side,
        score_thresh=args.score_thresh,
        num_classes=args.num_classes,
        seed=args.seed,
    )
    class_names = load_class_names(args.classes) if args.classes else []
    nets = build_nets(cfg, checkpoint=args.checkpoint)
    if class_names:
        nets.det_cfg.class_names = class_names
    for key, value in detector_overrides.items():
        setattr(nets.det_cfg, key, value)
    summary = run_video(cfg, args.input, sink=args.output, nets=nets)
    print(summary_text(summary, cfg))
    if args.summary_csv:
        _append_csv(args.summary_csv, summary_csv_row(summary, cfg))
    return 0


def cmd_train_flow(args):
    from .flow_training import OptConfig, make_dataset, train_toy
    from .io import save_checkpoint
    from .lightflow import build_light_flow

    dataset = make_dataset(count=args.pairs, size=args.size, max_shift=args.max_shift, seed=args.seed)
    spec = build_light_flow(args.beta)
    cfg = OptConfig(
        lr=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch,
        iterations=args.iterations,
        seed=args.seed,
    )
    result = train_toy(spec, dataset, cfg)
    for epoch, epe in enumerate(result.epe_history):
        print(f"epoch {epoch:3d}  mean_epe = {epe:.4f}")
    ratio = result.final_epe / result.initial_epe if result.initial_epe else float("nan")
    print(f"initial_epe = {result.initial_epe:.4f}")
    print(f"final_epe = {result.final_epe:.4f}")
    print(f"ratio = {ratio:.4f}")
    if args.out:
        save_checkpoint(args.out, {f"flow/{k}": v for k, v in result.params.items()})
        print(f"checkpoint = {args.out}")
    return 0


def cmd_sweep(args):
    from .analyzer import SystemCostConfig, amortized_cost

    alphas = [float(v) for v in args.alphas.split(",") if v]
    betas = [float(v) for v in args.betas.split(",") if v]
    ls = [int(v) for v in args.ls.split(",") if v]
    if not alphas or not betas or not ls:
        raise ValueError("sweep: empty grid")
    det_hw = args.input or (224, 400)
    rows = ["alpha,beta,l,params,flops_per_frame"]
    for a in alphas:
        for b in betas:
            for l in ls:
                cost = amortized_cost(
                    SystemCostConfig(
                        alpha=a,
                        beta=b,
                        key_interval=l,
                        det_hw=det_hw,
                        scale_interface=not args.fixed_interface,
                    )
                )
                rows.append(f"{a},{b},{l},{cost.params},{cost.per_frame_flops:.0f}")
    text = "\n".join(rows)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_selftest(args):
    from .selfcheck import run_all

    records, ok = run_all(gradient_instances=args.instances, seed=args.seed)
    for name, passed, detail in records:
        print(f"{'PASS' if passed else 'FAIL'}  {name}  ({detail})")
    print("selftest:", "OK" if ok else "FAILED")
    return 0 if ok else 1


def main(argv=None):
    _apply_thread_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "analyze": cmd_analyze,
        "run": cmd_run,
        "train-flow": cmd_train_flow,
        "sweep": cmd_sweep,
        "selftest": cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
