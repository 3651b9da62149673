"""Command-line front end.

Exit codes: 0 success, 1 usage error (bad subcommand, unknown flag, missing
argument), 2 runtime error (bad file, failed run). argparse's default exit
behaviour is remapped so the codes stay honest.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from .errors import MemsegError
from . import data as D
from . import network as N
from . import train as TR

__all__ = ["main", "build_parser"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser():
    parser = _Parser(prog="memseg",
                     description="similarity-memory segmentation harness")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic PGM dataset")
    g.add_argument("--config", help="run config (key = value lines)")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train and checkpoint a network")
    t.add_argument("--config", help="run config (key = value lines)")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--out", help="override the output directory")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="PGM dataset directory; omit to regenerate "
                                  "the held-out split from --config")
    e.add_argument("--config", help="run config for regeneration")
    e.add_argument("--seed", type=int, help="override the config seed")
    e.add_argument("--out", help="directory for eval.csv (default: stdout only)")

    i = sub.add_parser("inspect-memory", help="dump bank state from a checkpoint")
    i.add_argument("--checkpoint", required=True)

    s = sub.add_parser("simulate-k", help="replay a loss file through the "
                                          "update-budget rule")
    s.add_argument("--losses", required=True, help="text file, one loss per line")
    s.add_argument("--slots", type=int, default=32, help="bank rows M (default 32)")
    s.add_argument("--out", help="write epoch,k CSV here instead of stdout")
    return parser


def _load_run_config(path, seed=None, out=None):
    if path is None:
        train_cfg, net_cfg = TR.TrainConfig(), N.NetworkConfig()
    else:
        with open(path, "r") as fh:
            train_cfg, net_cfg = TR.parse_run_config(fh.read())
    if seed is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=seed)
        net_cfg = dataclasses.replace(net_cfg, seed=seed)
    if out is not None:
        train_cfg = dataclasses.replace(train_cfg, out_dir=out)
    return train_cfg, net_cfg


def _cmd_gen_data(args):
    train_cfg, net_cfg = _load_run_config(args.config, args.seed)
    samples = D.generate_synthetic_dataset(
        train_cfg.samples, net_cfg.res1, net_cfg.res1, net_cfg.classes,
        seed=train_cfg.seed)
    train_split, test_split = D.split_dataset(samples, 0.8)
    D.save_dataset(train_split, os.path.join(args.out, "train"))
    D.save_dataset(test_split, os.path.join(args.out, "test"))
    print("wrote %d train + %d held-out samples (%dx%d, %d classes) to %s"
          % (len(train_split), len(test_split), net_cfg.res1, net_cfg.res1,
             net_cfg.classes, args.out))
    return 0


def _cmd_train(args):
    train_cfg, net_cfg = _load_run_config(args.config, args.seed, args.out)
    summary = TR.train(train_cfg, net_cfg, progress=print)
    hd = ("%.4f" % summary.final_mean_hd95
          if summary.final_mean_hd95 is not None else "n/a")
    print("done: mean DSC %.4f, mean HD95 %s; checkpoint %s"
          % (summary.final_mean_dsc, hd, summary.checkpoint_path))
    return 0


def _eval_samples(args, net):
    if args.data is not None:
        return D.load_dataset(args.data)
    train_cfg, net_cfg = _load_run_config(args.config, args.seed)
    if N.format_config(net_cfg) != N.format_config(net.config):
        # the checkpoint knows its own architecture; the config only has to
        # describe the dataset, so only warn when they disagree
        print("note: config architecture differs from checkpoint; "
              "using the checkpoint's", file=sys.stderr)
    return TR.held_out_split(train_cfg, net.config)


def _cmd_eval(args):
    net = N.load_checkpoint(args.checkpoint)
    if not net.memory_ready():
        # banks never initialized: a zero-memory run, evaluate it that way
        net.set_memory_enabled(False)
    samples = _eval_samples(args, net)
    rows = TR.class_mean_rows(TR.evaluate_network(net, samples),
                              net.config.classes)
    mean_dsc, mean_hd = TR._means_of_rows(rows)
    lines = ["class,dsc,hd95"]
    for c, d, h in rows:
        lines.append("%d,%.6f,%s" % (c, d, TR._fmt_opt(h)))
    lines.append("mean,%.6f,%s" % (mean_dsc, TR._fmt_opt(mean_hd)))
    text = "\n".join(lines) + "\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        TR.write_text_atomic(os.path.join(args.out, "eval.csv"), text)
    sys.stdout.write(text)
    return 0


def _cmd_inspect_memory(args):
    net = N.load_checkpoint(args.checkpoint)
    for width in sorted(net.banks):
        bank = net.banks[width]
        lo, hi = bank.clamp_range()
        print("bank width=%d clusters=%d slots=%d clamp=[%d,%d]"
              % (width, bank.k, bank.slots, lo, hi))
        print("  initialized=%s k_current=%d loss_prev=%s loss_curr=%s"
              % (bank.initialized, bank.k_current, bank.loss_prev,
                 bank.loss_curr))
        if bank.initialized:
            norms = np.linalg.norm(bank.cores, axis=1)
            spreads = bank.priors.std(axis=(1, 2))
            for i in range(bank.k):
                print("  cluster %d: core norm %.4f, slot spread %.4f"
                      % (i, norms[i], spreads[i]))
    return 0


def _cmd_simulate_k(args):
    with open(args.losses, "r") as fh:
        losses = TR.parse_loss_file(fh.read())
    ks = TR.simulate_k(losses, args.slots)
    lines = ["epoch,k"] + ["%d,%d" % (e, k) for e, k in enumerate(ks, start=1)]
    text = "\n".join(lines) + "\n"
    if args.out:
        TR.write_text_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "inspect-memory": _cmd_inspect_memory,
    "simulate-k": _cmd_simulate_k,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("missing subcommand")
    except _UsageError as exc:
        print("usage error: %s" % exc, file=sys.stderr)
        print(parser.format_usage().rstrip(), file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (MemsegError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
