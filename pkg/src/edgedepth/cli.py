"""Command-line interface.

Subcommands: generate, train, eval, ablate-edges, denom-hist. A config file
(--config, JSON) provides base values, individual flags override it, and the
EDGEDEPTH_SEED environment variable overrides the seed last. Failures print
a machine-readable JSON error record to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import harness
from .errors import EdgeDepthError

# flag name -> path into the RunConfig dict
_OVERRIDES = {
    "seed": ("seed",),
    "n_train": ("n_train",),
    "n_val": ("n_val",),
    "strategy": ("strategy",),
    "template_kind": ("template", "kind"),
    "n_extra": ("template", "n_extra"),
    "sigma_px": ("noise", "sigma_px"),
    "sigma_3d": ("noise", "sigma_3d"),
    "p_outlier": ("noise", "p_outlier"),
    "outlier_px": ("noise", "outlier_px"),
    "layers": ("encoder", "layers"),
    "hidden": ("encoder", "hidden"),
    "feature_dim": ("encoder", "feature_dim"),
    "alpha": ("sinkhorn", "alpha"),
    "sinkhorn_max_iters": ("sinkhorn", "max_iters"),
    "sinkhorn_tol": ("sinkhorn", "tol"),
    "batch_size": ("train", "batch_size"),
    "epochs_cls": ("train", "epochs_cls"),
    "epochs_reg": ("train", "epochs_reg"),
    "lr": ("train", "lr"),
    "weight_decay": ("train", "weight_decay"),
    "beta": ("train", "beta"),
    "tau": ("selection", "tau"),
    "k": ("selection", "k"),
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (defaults otherwise)")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--strategy",
                   choices=("gmw", "uniform", "uncertainty", "inverse_denominator"))
    p.add_argument("--template-kind", choices=("box", "car_like"))
    p.add_argument("--n-extra", type=int)
    p.add_argument("--sigma-px", type=float)
    p.add_argument("--sigma-3d", type=float)
    p.add_argument("--p-outlier", type=float)
    p.add_argument("--outlier-px", type=float)
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--sinkhorn-max-iters", type=int)
    p.add_argument("--sinkhorn-tol", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs-cls", type=int)
    p.add_argument("--epochs-reg", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--k", type=int)


def build_config(args: argparse.Namespace) -> harness.RunConfig:
    if args.config:
        doc = harness.load_config(args.config).to_dict()
    else:
        doc = harness.RunConfig().to_dict()
    for flag, path in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = doc
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    env_seed = os.environ.get("EDGEDEPTH_SEED")
    if env_seed is not None:
        doc["seed"] = int(env_seed)
    return harness.RunConfig.from_dict(doc)


def _parse_ks(text: str):
    ks = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        ks.append("all" if tok == "all" else int(tok))
    return ks


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgedepth",
        description="Dense pair-depth estimation with graph-matching weighting",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic train/val datasets")
    p.add_argument("--out", required=True, help="existing output directory")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train the weighting network")
    p.add_argument("--data", required=True, help="directory with train/val jsonl")
    p.add_argument("--out", required=True, help="existing output directory")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate fused depth on a dataset")
    p.add_argument("--data", required=True, help="dataset .jsonl file")
    p.add_argument("--checkpoint", help="checkpoint for gmw/uncertainty")
    p.add_argument("--out-prefix", help="write PREFIX.report.json and PREFIX.hist.csv")
    _add_config_flags(p)

    p = sub.add_parser("ablate-edges", help="error vs. selected candidate count")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--ks", default="50,500,1500,all",
                   help="comma list of counts, 'all' for every pair")
    p.add_argument("--out", help="output CSV")
    _add_config_flags(p)

    p = sub.add_parser("denom-hist", help="candidate quality vs. denominator size")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output CSV")
    p.add_argument("--bins", type=int, default=10)
    _add_config_flags(p)

    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        config = build_config(args)
        if args.command == "generate":
            result = harness.cmd_generate(config, args.out)
        elif args.command == "train":
            result = harness.cmd_train(config, args.data, args.out)
        elif args.command == "eval":
            result = harness.cmd_eval(
                config, args.data, args.checkpoint, args.out_prefix
            ).to_dict()
        elif args.command == "ablate-edges":
            result = harness.cmd_ablate_edges(
                config, args.data, args.checkpoint, _parse_ks(args.ks), args.out)
        else:
            result = harness.cmd_denominator_histogram(
                config, args.data, args.out, args.bins)
    except (EdgeDepthError, OSError, ValueError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    json.dump(result, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
