"""Command-line entry points.

Exit codes: 0 success, 1 validation error, 2 acceptance failure (grad-check).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time

GRAD_CHECK_THRESHOLD = 1e-4


def _pin_blas_threads():
    # single-threaded BLAS keeps tiny-matrix work fast and runs bit-reproducible
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fusedet",
        description="Encoder-free set-prediction detector: data generation, "
                    "training, evaluation, FLOP metering and reports.")
    ap.add_argument("--help-config", action="store_true",
                    help="print every config key with its default and exit")
    sub = ap.add_subparsers(dest="command")

    def common(p, out_required=False):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the relevant seed keys")
        p.add_argument("--out-dir", default="out" if not out_required else None,
                       required=out_required, help="output directory")
        p.add_argument("--no-figures", action="store_true",
                       help="write CSV reports without rendering charts")

    p = sub.add_parser("gen-data", help="generate train/ and val/ datasets")
    common(p, out_required=True)

    p = sub.add_parser("train", help="train a detector on a generated dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset root (gen-data output)")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--top-k", type=int, default=100)

    p = sub.add_parser("flops", help="count model FLOPs and write the scaling report")
    common(p)
    p.add_argument("--s-max", type=int, default=5,
                   help="largest fused-scale count in the scaling report")

    p = sub.add_parser("report-attn", help="per-scale cross-attention report")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=100, help="validation images to use")
    p.add_argument("--split", default="val", choices=("train", "val"))

    p = sub.add_parser("grad-check",
                       help="finite-difference check of the full loss gradient")
    common(p)
    p.add_argument("--threshold", type=float, default=GRAD_CHECK_THRESHOLD)
    return ap


def _dataset_dir(root, split):
    if os.path.exists(os.path.join(root, "meta.json")):
        return root
    cand = os.path.join(root, split)
    if os.path.exists(os.path.join(cand, "meta.json")):
        return cand
    raise FileNotFoundError(f"no dataset at {root} (or {cand})")


def _build_model(cfg_dict, seed=None):
    from .config import build_detector_config
    from .model import Detector
    if seed is not None:
        cfg_dict = dict(cfg_dict, **{"model.seed": seed})
    return Detector(build_detector_config(cfg_dict))


def cmd_gen_data(args, cfg):
    from .data import gen_synthetic_dataset
    seed = args.seed if args.seed is not None else cfg["data.seed"]
    size = cfg["data.image_size"]
    t0 = time.time()
    gen_synthetic_dataset(cfg["data.n_train"], size, seed,
                          os.path.join(args.out_dir, "train"))
    gen_synthetic_dataset(cfg["data.n_val"], size, seed + 1,
                          os.path.join(args.out_dir, "val"))
    print(f"wrote {cfg['data.n_train']}+{cfg['data.n_val']} images at "
          f"{size}x{size} to {args.out_dir} in {time.time() - t0:.1f}s")
    return 0


def cmd_train(args, cfg):
    from .config import build_train_config
    from .data import load_dataset
    from .train import train
    model = _build_model(cfg, args.seed)
    tcfg = build_train_config(cfg)
    if args.seed is not None:
        tcfg.seed = args.seed
    dataset = load_dataset(_dataset_dir(args.data, "train"))
    t0 = time.time()
    rows = train(model, dataset, tcfg, args.out_dir)
    print(f"trained {tcfg.epochs} epochs in {(time.time() - t0) / 60:.1f} min; "
          f"final total loss {rows[-1]['l_total']:.4f}")
    if not args.no_figures:
        from .figures import save_training_curves
        save_training_curves(rows, os.path.join(args.out_dir, "train_log.png"))
    return 0


def cmd_eval(args, cfg):
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .evaluate import evaluate_model, write_eval_csv
    model = _build_model(cfg, args.seed)
    model.store.load_state(load_checkpoint(args.ckpt))
    dataset = load_dataset(_dataset_dir(args.data, args.split))
    result = evaluate_model(model, dataset, top_k=args.top_k)
    for name, value in result.rows():
        print(f"{name}: {value:.4f}")
    os.makedirs(args.out_dir, exist_ok=True)
    write_eval_csv(result, os.path.join(args.out_dir, "eval_results.csv"))
    return 0


def cmd_flops(args, cfg):
    import numpy as np
    from .flops import scaling_report, write_scaling_csv, count_forward
    from .tensor import Tensor
    model = _build_model(cfg, args.seed)
    size = cfg["data.image_size"]
    img = Tensor(np.zeros((3, size, size)))
    report = count_forward(model.forward, img)
    print(f"{'block':<28}{'FLOPs':>14}")
    groups = {}
    for label, count in sorted(report.by_label.items()):
        top = ".".join(label.split(".")[:2])
        groups[top] = groups.get(top, 0) + count
    for label, count in sorted(groups.items()):
        print(f"{label:<28}{count:>14}")
    print(f"{'total':<28}{report.total:>14}")
    pool = cfg["model.pool"]
    width = cfg["model.fuse_width"]
    last = size // max(np.prod(cfg["model.patch_strides"]), 1)
    rows = scaling_report(h=max(last, 2), w=max(last, 2), c=width, pool=pool,
                          s_range=range(1, args.s_max + 1))
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "scaling_report.csv")
    write_scaling_csv(rows, csv_path)
    print(f"scaling report -> {csv_path}")
    if not args.no_figures:
        from .figures import save_scaling_chart
        save_scaling_chart(rows, os.path.join(args.out_dir, "scaling_report.png"))
    return 0


def cmd_report_attn(args, cfg):
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .evaluate import attention_scale_report, write_attention_csv
    model = _build_model(cfg, args.seed)
    model.store.load_state(load_checkpoint(args.ckpt))
    dataset = load_dataset(_dataset_dir(args.data, args.split))
    rows = attention_scale_report(model, dataset, n_images=args.n)
    os.makedirs(args.out_dir, exist_ok=True)
    csv_path = os.path.join(args.out_dir, "attention_report.csv")
    write_attention_csv(rows, csv_path)
    print(f"attention report ({args.n} images) -> {csv_path}")
    if not args.no_figures:
        from .figures import save_attention_chart
        save_attention_chart(rows, os.path.join(args.out_dir, "attention_report.png"))
    return 0


def cmd_grad_check(args, cfg):
    import numpy as np
    from .model import grad_check_model, micro_config, Detector
    from .data import make_sample
    if args.config is None:
        model = Detector(micro_config(seed=args.seed or 0))
    else:
        model = _build_model(cfg, args.seed)
    size = model.cfg.pyramid.image_size
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    smp = make_sample(rng, size)
    targets = [{"labels": smp.labels, "boxes": smp.boxes, "masks": smp.masks}]
    t0 = time.time()
    report = grad_check_model(model, smp.image[None], targets)
    worst = max(report.values())
    print(f"{'parameter group':<34}{'max rel err':>14}")
    for name, err in sorted(report.items(), key=lambda kv: -kv[1])[:10]:
        print(f"{name:<34}{err:>14.3e}")
    print(f"worst over {len(report)} groups: {worst:.3e} "
          f"({time.time() - t0:.0f}s)")
    if worst > args.threshold:
        print(f"FAIL: exceeds threshold {args.threshold:g}")
        return 2
    print(f"PASS: below threshold {args.threshold:g}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "flops": cmd_flops,
    "report-attn": cmd_report_attn,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    _pin_blas_threads()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.help_config:
        from .config import describe_schema
        print(describe_schema())
        return 0
    if args.command is None:
        parser.print_help()
        return 1
    from .config import ConfigError, load_config
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
