"""Command line entry point: ``rml <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data
from . import encoder as enc
from . import experiment as exp
from .evaluation import evaluate_model
from .losses import VARIANTS, LossConfig
from .trainer import TrainConfig, train

log = logging.getLogger("rml")

DEFAULT_DATA = data.DatasetConfig()
DEFAULT_TRAIN = TrainConfig()


def _add_gen_data(sub):
    p = sub.add_parser("gen-data", help="generate a synthetic pair dataset")
    p.add_argument("--identities", type=int, default=DEFAULT_DATA.num_identities)
    p.add_argument("--images-per-id", type=int, default=DEFAULT_DATA.images_per_identity)
    p.add_argument("--captions-per-image", type=int, default=DEFAULT_DATA.captions_per_image)
    p.add_argument("--dim", type=int, default=DEFAULT_DATA.raw_dim, help="raw feature width")
    p.add_argument("--noise-std", type=float, default=DEFAULT_DATA.intra_identity_noise_std)
    p.add_argument("--latent-dim", type=int, default=None,
                   help=f"rank of the identity subspace (default: min({DEFAULT_DATA.latent_dim}, --dim))")
    p.add_argument("--noise-rate", type=float, default=0.0, help="fraction of pairs whose texts are shuffled")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)


def cmd_gen_data(args) -> int:
    latent = args.latent_dim if args.latent_dim is not None else min(DEFAULT_DATA.latent_dim, args.dim)
    cfg = data.DatasetConfig(args.identities, args.images_per_id, args.captions_per_image, args.dim,
                             args.noise_std, args.seed, latent)
    ds = data.generate(cfg)
    if args.noise_rate > 0:
        ds = data.inject_noise(ds, data.NoiseSpec(args.noise_rate, args.seed))
    data.save(ds, args.out)
    print(f"wrote {len(ds)} pairs to {args.out}")
    return 0


def _add_train(sub):
    d = DEFAULT_TRAIN
    p = sub.add_parser("train", help="train on a dataset file; the split is by identity")
    p.add_argument("--data", required=True)
    p.add_argument("--noise-rate", type=float, default=0.0,
                   help="noise injected into the training split of a clean data file")
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--margin", type=float, default=d.loss.margin)
    p.add_argument("--tau", type=float, default=d.loss.tau)
    p.add_argument("--select-ratio", type=float, default=d.select_ratio)
    p.add_argument("--loss", choices=VARIANTS, default=d.loss_variant)
    p.add_argument("--warmup-epochs", type=int, default=d.warmup_epochs)
    p.add_argument("--no-ccd", action="store_true", help="train on all pairs without division")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_train)


def cmd_train(args) -> int:
    ds = data.load(args.data)
    tr, va, te = data.split_by_identity(ds, seed=args.seed)
    if args.noise_rate > 0:
        if (tr.true_clean_flag == 0).any():
            raise exp.ExperimentConfigError("data file already carries noise; use --noise-rate 0")
        tr = data.inject_noise(tr, data.NoiseSpec(args.noise_rate, args.seed))
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.learning_rate,
        loss=LossConfig(args.margin, args.tau), select_ratio=args.select_ratio, loss_variant=args.loss,
        warmup_epochs=args.warmup_epochs, use_ccd=not args.no_ccd, seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = train(tr, cfg, val=va, audit_path=out / "division_audit.csv")
    exp.write_history(state, out / "history.csv")
    meta = {"select_ratio": cfg.select_ratio, "epoch": state.epoch}
    enc.save_checkpoint(state.params, out / "checkpoint.txt", meta)
    enc.save_checkpoint(state.best_params, out / "best_checkpoint.txt", dict(meta, epoch=state.best["epoch"]))
    data.save(te, out / "test.tsv")
    metrics = _metrics(state.params, te, cfg.select_ratio)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(json.dumps(metrics, sort_keys=True))
    return 0


def _metrics(params, dataset, ratio) -> dict:
    m = evaluate_model(params, dataset, ratio)
    return {k: m[k] for k in ("rank1", "rank5", "rank10", "mAP", "mINP", "num_queries", "num_gallery")}


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="text-to-image retrieval metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--select-ratio", type=float, default=None, help="defaults to the ratio stored in the checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)


def cmd_evaluate(args) -> int:
    params, meta = enc.load_checkpoint(args.checkpoint)
    ratio = args.select_ratio if args.select_ratio is not None else float(meta.get("select_ratio", 0.3))
    metrics = _metrics(params, data.load(args.data), ratio)
    Path(args.out).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    print(json.dumps(metrics, sort_keys=True))
    return 0


def _add_experiment(sub):
    p = sub.add_parser("experiment", help="run a seeded grid described by a key=value config")
    p.add_argument("--config", help="config file; omitted keys take library defaults")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable); wins over the file")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_experiment)


def cmd_experiment(args) -> int:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise exp.ExperimentConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.config:
        spec = exp.load_spec(args.config, overrides)
    else:
        spec = exp.build_spec(overrides)
    rows = exp.run_experiment(spec, args.out_dir)
    failed = [r["cell"] for r in rows if r["status"] != "ok"]
    print(f"{len(rows) - len(failed)}/{len(rows)} cells completed; summary in {Path(args.out_dir) / 'summary.csv'}")
    for name in failed:
        print(f"failed: {name}", file=sys.stderr)
    return 1 if failed else 0


def _add_report(sub):
    p = sub.add_parser("report", help="long-format sweep table from a summary CSV")
    p.add_argument("--summary", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)


def cmd_report(args) -> int:
    rows = exp.sweep_report(exp.read_summary(args.summary))
    exp.write_report(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rml", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_gen_data, _add_train, _add_evaluate, _add_experiment, _add_report):
        add(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"rml {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
