"""Command-line surface.

Exit codes: 0 ok, 2 graph-spec parse error, 3 checkpoint error, 4 mask or
shape mismatch, 5 numeric divergence. CLADELAB_THREADS caps BLAS thread
pools for this process (default: machine cores); it must act before numpy
loads, which is why it is handled at the very top of this module.
"""

import os

if os.environ.get("CLADELAB_THREADS"):
    _n = os.environ["CLADELAB_THREADS"]
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _n)

import argparse
import sys
from pathlib import Path

import numpy as np

from .analysis import analyze, dump_modulation_maps, report_csv, report_table
from .formats import (
    CheckpointError, SpecParseError, load_checkpoint, parse_graph_spec,
    read_mask, save_checkpoint, write_ppm,
)
from .generator import GraphError, generate
from .tensor import ShapeError
from .training import (
    TrainConfig, bench, make_dataset, make_instance_dataset, metrics_csv, train,
)

EXIT_OK = 0
EXIT_SPEC = 2
EXIT_CKPT = 3
EXIT_SHAPE = 4
EXIT_DIVERGED = 5


def _load_spec(path, mode=None):
    spec = parse_graph_spec(Path(path).read_text())
    if mode:
        spec.norm_mode = mode
        spec.validate()
    return spec


def _cmd_analyze(args):
    spec = _load_spec(args.spec, args.mode)
    report = analyze(spec, mac_as_2flops=args.mac_as_2flops)
    Path(args.out).write_text(report_csv(report))
    print(report_table(report))
    print(f"avg_param_ratio={100 * report.avg_param_ratio:.4f}% "
          f"avg_flops_ratio={100 * report.avg_flops_ratio:.4f}% "
          f"total_params={report.total_params} "
          f"total_flops={report.total_flops}")
    return EXIT_OK


def _cmd_train(args):
    spec = _load_spec(args.spec, args.mode)
    if args.instances:
        spec.use_edge = True
        dataset = make_instance_dataset(args.dataset_size, spec.image_size, args.seed)
        eval_set = make_instance_dataset(args.eval_size, spec.image_size, args.seed + 1)
    else:
        dataset = make_dataset(args.dataset_size, spec.image_size, spec.num_classes,
                               args.layout, args.seed)
        eval_set = make_dataset(args.eval_size, spec.image_size, spec.num_classes,
                                args.layout, args.seed + 1)
    config = TrainConfig(steps=args.steps, batch=args.batch, lr_g=args.lr_g,
                         lr_d=args.lr_d, gan_weight=args.gan_weight, seed=args.seed,
                         eval_interval=args.eval_interval)
    result = train(spec, dataset, config, eval_dataset=eval_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", result.model, seed=args.seed)
    (out / "metrics.csv").write_text(metrics_csv(result.log))
    for row in result.log:
        print(f"step {row['step']:>6}  l1 {row['loss_l1']:.4f}  "
              f"acc {row['pixel_acc']:.4f}  miou {row['miou']:.4f}")
    print(f"best pixel accuracy {result.best_acc:.4f}; "
          f"checkpoint written to {out / 'model.ckpt'}")
    if result.diverged:
        print("training diverged; last good checkpoint retained", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_synth(args):
    model, _ = load_checkpoint(args.ckpt)
    mask = read_mask(args.mask)
    if mask.num_classes > model.spec.num_classes:
        raise ShapeError(f"mask declares {mask.num_classes} classes, model "
                         f"supports {model.spec.num_classes}")
    instance_map = None
    if args.instances:
        instance_map = read_mask(args.instances).labels
    noise = np.random.default_rng(args.noise_seed) \
        .standard_normal(model.spec.noise_dim).astype(np.float32)
    out = generate(model, mask, noise, instance_map)
    write_ppm(args.out, out.data)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_bench(args):
    cfg = {"cin": args.cin, "cout": args.cout, "h": args.hw, "w": args.hw,
           "nc": args.nc, "cm": args.cm}
    stats = bench(args.mode, cfg, args.repeats)
    iqr = "n/a" if stats["iqr"] is None else f"{stats['iqr'] * 1e3:.3f}ms"
    print(f"mode={args.mode} median={stats['median'] * 1e3:.3f}ms iqr={iqr} "
          f"repeats={args.repeats}")
    return EXIT_OK


def _cmd_dump_maps(args):
    model, _ = load_checkpoint(args.ckpt)
    mask = read_mask(args.mask)
    if mask.shape != (model.spec.image_size, model.spec.image_size):
        raise ShapeError(f"mask {mask.shape} != model resolution "
                         f"{model.spec.image_size}")
    results = dump_modulation_maps(model, mask, out_dir=args.out)
    print(f"wrote {2 * len(results)} maps and spread.csv to {args.out}")
    return EXIT_OK


def _parser():
    p = argparse.ArgumentParser(prog="cladelab",
                                description="conditional-normalization lab")
    sub = p.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="static parameter/FLOPs report")
    pa.add_argument("--spec", required=True)
    pa.add_argument("--mode", choices=["spade", "clade", "bn"])
    pa.add_argument("--out", required=True)
    pa.add_argument("--mac-as-2flops", action="store_true")
    pa.set_defaults(fn=_cmd_analyze)

    pt = sub.add_parser("train", help="train a generator on synthetic scenes")
    pt.add_argument("--spec", required=True)
    pt.add_argument("--mode", choices=["spade", "clade", "bn"])
    pt.add_argument("--layout", default="voronoi",
                    choices=["stripes", "voronoi", "blobs"])
    pt.add_argument("--steps", type=int, required=True)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--out", required=True)
    pt.add_argument("--batch", type=int, default=2)
    pt.add_argument("--lr-g", type=float, default=1e-4)
    pt.add_argument("--lr-d", type=float, default=4e-4)
    pt.add_argument("--gan-weight", type=float, default=0.0)
    pt.add_argument("--eval-interval", type=int, default=200)
    pt.add_argument("--dataset-size", type=int, default=128)
    pt.add_argument("--eval-size", type=int, default=16)
    pt.add_argument("--instances", action="store_true",
                    help="instance-edge path: two-instance dataset, edge input")
    pt.set_defaults(fn=_cmd_train)

    ps = sub.add_parser("synth", help="synthesize an image from a checkpoint")
    ps.add_argument("--ckpt", required=True)
    ps.add_argument("--mask", required=True)
    ps.add_argument("--noise-seed", type=int, default=0)
    ps.add_argument("--instances")
    ps.add_argument("--out", required=True)
    ps.set_defaults(fn=_cmd_synth)

    pb = sub.add_parser("bench", help="time one norm-site forward")
    pb.add_argument("--mode", required=True, choices=["spade", "clade", "bn"])
    pb.add_argument("--cin", type=int, default=64)
    pb.add_argument("--cout", type=int, default=64)
    pb.add_argument("--hw", type=int, default=128)
    pb.add_argument("--nc", type=int, default=32)
    pb.add_argument("--cm", type=int, default=128)
    pb.add_argument("--repeats", type=int, default=200)
    pb.set_defaults(fn=_cmd_bench)

    pd = sub.add_parser("dump-maps", help="write per-site modulation maps")
    pd.add_argument("--ckpt", required=True)
    pd.add_argument("--mask", required=True)
    pd.add_argument("--out", required=True)
    pd.set_defaults(fn=_cmd_dump_maps)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        return args.fn(args)
    except (SpecParseError, GraphError) as e:
        print(f"spec error: {e}", file=sys.stderr)
        return EXIT_SPEC
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CKPT
    except (ShapeError, ValueError) as e:
        print(f"shape error: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return EXIT_SHAPE


if __name__ == "__main__":
    sys.exit(main())
