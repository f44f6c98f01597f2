"""Command-line entry point: ``riskbeam <command> ...``."""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import evaluation, gnn, trainer
from .channel import NetworkConfig, config_from_kv, generate_dataset, parse_kv, read_dataset


def _load_configs(path, seed=None):
    if path is None:
        net, tc = NetworkConfig(), trainer.TrainConfig()
    else:
        kv = parse_kv(Path(path).read_text())
        net, tc = config_from_kv(kv), trainer.train_config_from_kv(kv)
    if seed is not None:
        tc = tc.replace(seed=seed)
    return net, tc


def _manifest(out: Path, args, files):
    lines = [f"command={' '.join(sys.argv)}", f"time={_dt.datetime.now().isoformat(timespec='seconds')}"]
    for k, v in sorted(vars(args).items()):
        if k != "func":
            lines.append(f"arg.{k}={v}")
    for f in files:
        f = Path(f)
        if f.exists():
            lines.append(f"file.{f.name}={hashlib.sha256(f.read_bytes()).hexdigest()}")
    out.write_text("\n".join(lines) + "\n")


def cmd_generate(args):
    net, _ = _load_configs(args.config)
    seed = args.cell_seed if args.cell_seed is not None else (args.seed or 0)
    generate_dataset(net, seed, args.n, args.out, start=args.start)
    _manifest(Path(str(args.out) + ".manifest.txt"), args, [args.out])
    print(f"wrote {args.n} realizations to {args.out}")


def cmd_train(args):
    net, tc = _load_configs(args.config, args.seed)
    ds = read_dataset(args.dataset, expect=net)
    res = trainer.train(ds, net, tc, out_dir=args.out_dir, resume=args.resume, progress=not args.quiet)
    out = Path(args.out_dir)
    _manifest(out / "manifest.txt", args, [out / "policy.bin", out / "train_log.csv"])
    print(f"final checkpoint sha256={res.checkpoint_hashes[-1]}")


def cmd_baseline(args):
    net, tc = _load_configs(args.config)
    ds = read_dataset(args.dataset)
    if args.config is None:
        net = ds.config
    rep = evaluation.evaluate(args.method, ds, net, tc=tc, iters=args.iters, bins=args.bins)
    rep.write(args.out, density=args.density)
    _manifest(Path(str(args.out) + ".manifest.txt"), args, [args.out])
    print(f"{rep.method}: average sum rate {rep.sum_rate:.4f} bits/s/Hz")


def cmd_eval(args):
    net, tc = _load_configs(args.config, args.seed)
    ds = read_dataset(args.dataset)
    if args.config is None:
        net = ds.config
    params, _, _ = gnn.load_checkpoint(args.checkpoint)
    a = params.arch
    tc = tc.replace(L=a.L, d_u=a.d_u, d_w=a.d_w, hidden=a.hidden, msg=a.msg, shared=a.shared)
    rep = evaluation.evaluate("policy", ds, net, params, tc, label=args.label or Path(args.checkpoint).stem,
                              bins=args.bins)
    rep.write(args.out, density=args.density)
    _manifest(Path(str(args.out) + ".manifest.txt"), args, [args.out, args.checkpoint])
    print(f"{rep.method}: average sum rate {rep.sum_rate:.4f} bits/s/Hz")


def cmd_sweep(args):
    net, tc = _load_configs(args.config, args.seed)
    train_ds = read_dataset(args.dataset, expect=net)
    test_ds = read_dataset(args.test, expect=net)
    grid = [float(x) for x in args.grid.split(",")]
    rows, _ = evaluation.alpha_sweep(train_ds, test_ds, net, tc, grid, out_dir=args.out_dir,
                                     progress=not args.quiet)
    _manifest(Path(args.out_dir) / "manifest.txt", args, [Path(args.out_dir) / "sweep.csv"])
    for r in rows:
        print(f"alpha={r['alpha']:g} user={r['user']} sharpe={r['sharpe']:.3f}")


def cmd_compare(args):
    reports = [evaluation.read_report(p) for p in args.reports]
    rows = evaluation.compare(reports)
    Path(args.out).write_text(evaluation.rows_to_csv(rows, f"# reference={reports[0].method}\n"))
    _manifest(Path(str(args.out) + ".manifest.txt"), args, [args.out] + list(args.reports))
    for rep in reports:
        print(f"{rep.method}: average sum rate {rep.sum_rate:.4f} bits/s/Hz")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=1, help="BLAS threads")

    p = argparse.ArgumentParser(prog="riskbeam", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="sample a channel dataset")
    g.add_argument("--cell-seed", type=int, default=None)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--start", type=int, default=0, help="first sample index")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train a policy")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", default=None)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("baseline", parents=[common], help="evaluate WMMSE (or a fixed precoder)")
    b.add_argument("--dataset", required=True)
    b.add_argument("--iters", type=int, default=20)
    b.add_argument("--method", default="wmmse", choices=("wmmse", "uniform", "zero"))
    b.add_argument("--bins", type=int, default=200)
    b.add_argument("--density", action="store_true", help="histogram densities instead of counts")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("eval", parents=[common], help="evaluate a trained policy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--label", default=None)
    e.add_argument("--bins", type=int, default=200)
    e.add_argument("--density", action="store_true", help="histogram densities instead of counts")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="train and evaluate over a grid of risk levels")
    s.add_argument("--dataset", required=True, help="training set")
    s.add_argument("--test", required=True, help="test set")
    s.add_argument("--grid", default="0.3,0.7,1.0")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", parents=[common], help="side-by-side table of reports")
    c.add_argument("reports", nargs="+")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    with threadpool_limits(limits=args.threads):
        args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
