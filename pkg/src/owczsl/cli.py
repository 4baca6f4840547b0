"""Command-line entry point: ``owczsl {gen-data,feasibility,train,eval,ablate}``.

Exit codes: 0 success, 2 invalid arguments or input files, 3 infeasible
split, 4 missing word embeddings, 5 checkpoint/version mismatch.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablation, data, feasibility
from .config import RunConfig, defaults_help, load_config, parse_config
from .errors import CheckpointError, ContractError, InfeasibleSplitError, ParseError
from .evaluate import evaluate, predict, write_curve, write_predictions
from .model import Model
from .train import train, write_metrics

EXIT_ARGS, EXIT_SPLIT, EXIT_EMB, EXIT_CKPT = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _threads(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load_data(directory):
    try:
        return data.load_dataset(directory)
    except (OSError, ParseError) as exc:
        raise CliError(f"cannot load dataset from {directory}: {exc}", EXIT_ARGS) from None


def _load_mask(path, space, world="open"):
    if path is None:
        return feasibility.closed_world_mask(space) if world == "closed" else None
    try:
        mask, n_a, n_o, _, _ = feasibility.read_mask(path)
    except (OSError, ParseError) as exc:
        raise CliError(f"cannot read mask {path}: {exc}", EXIT_ARGS) from None
    if (n_a, n_o) != (space.n_attrs, space.n_objs):
        raise CliError(f"mask is {n_a}x{n_o}, dataset is {space.n_attrs}x{space.n_objs}", EXIT_ARGS)
    return mask


def _load_config(path) -> RunConfig:
    if path is None:
        return parse_config("")
    try:
        return load_config(path)
    except (OSError, ParseError, ContractError) as exc:
        raise CliError(f"bad config {path}: {exc}", EXIT_ARGS) from None


def _vocab(cfg: RunConfig):
    if not cfg.emb:
        return None
    try:
        return data.load_embeddings(cfg.emb)
    except (OSError, ParseError) as exc:
        raise CliError(f"cannot read embeddings {cfg.emb}: {exc}", EXIT_ARGS) from None


def _new_model(space, cfg: RunConfig, vocab=None) -> Model:
    try:
        return Model(space, cfg.backbone, cfg.slc, vocab=vocab, seed=cfg.train.seed, dtype=np.dtype(cfg.dtype))
    except ContractError as exc:
        raise CliError(str(exc), EXIT_ARGS) from None


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    try:
        space, samples = data.generate_dataset(args.attrs, args.objs, args.unseen_frac, args.samples_per_pair, args.image_size, args.seed)
    except InfeasibleSplitError as exc:
        raise CliError(str(exc), EXIT_SPLIT) from None
    except ValueError as exc:
        raise CliError(str(exc), EXIT_ARGS) from None
    out = Path(args.out)
    data.save_dataset(out, space, samples)
    words = list(space.attrs) + list(space.objs)
    (out / "embeddings").mkdir(exist_ok=True)
    data.write_embeddings(out / "embeddings" / "vocab1.txt", data.synthetic_embeddings(words, args.emb_dim, args.seed))
    data.write_embeddings(out / "embeddings" / "vocab2.txt", data.synthetic_embeddings(words, args.emb_dim, args.seed + 1))
    counts = data.split_counts(space, samples)
    for split, c in counts.items():
        print(f"{split}: {c['seen']} seen-pair samples, {c['unseen']} unseen-pair samples")
    print(f"pairs={space.n_pairs} seen={len(space.seen)} unseen={len(space.unseen)} samples={len(samples)}")
    return 0


def cmd_feasibility(args) -> int:
    space, samples = _load_data(args.data)
    try:
        v1, v2 = data.load_embeddings(args.emb1), data.load_embeddings(args.emb2)
    except (OSError, ParseError) as exc:
        raise CliError(f"cannot read embeddings: {exc}", EXIT_ARGS) from None
    missing = feasibility.missing_words(space, v1, v2)
    if missing:
        raise CliError("missing embeddings for: " + " ".join(missing), EXIT_EMB)
    scores = feasibility.score_table(space, v1, v2)
    val_unseen = feasibility.validation_unseen_pairs(space, samples)
    try:
        threshold = feasibility.calibrate_threshold(scores, space, args.keep_frac, val_unseen)
    except ContractError as exc:
        raise CliError(str(exc), EXIT_ARGS) from None
    table = feasibility.build_mask(scores, threshold, space, args.world)
    feasibility.write_mask(args.out, table, space)
    feasibility.write_scores(str(args.out) + ".scores", table, space)
    print(f"T={threshold!r} feasible={table.n_feasible} of {space.n_pairs} world={args.world}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    space, samples = _load_data(args.data)
    mask = _load_mask(args.mask, space)
    model = _new_model(space, cfg, _vocab(cfg))
    logs = train(model, samples, cfg.train, mask=mask)
    model.save(args.out)
    write_metrics(str(args.out) + ".metrics.tsv", logs)
    last = logs[-1] if logs else None
    if last is not None:
        print(last.tsv())
    print(f"checkpoint={args.out} params={model.n_parameters()}")
    return 0


def cmd_eval(args) -> int:
    try:
        model = Model.load(args.ckpt)
    except (OSError, CheckpointError) as exc:
        raise CliError(f"checkpoint problem: {exc}", EXIT_CKPT) from None
    space, samples = _load_data(args.data)
    if (space.attrs, space.objs, space.seen, space.unseen) != (model.space.attrs, model.space.objs, model.space.seen, model.space.unseen):
        raise CliError("checkpoint was trained on a different composition space", EXIT_CKPT)
    mask = _load_mask(args.mask, space, args.world) if args.world == "open" else feasibility.closed_world_mask(space)
    test = [s for s in samples if s.split == args.split]
    curve = evaluate(model, test, mask, args.world)
    curve_path = args.curve or str(args.ckpt) + f".{args.world}.curve.tsv"
    write_curve(curve_path, curve)
    if args.predictions:
        images = np.stack([s.image for s in test])
        preds = predict(model.pair_scores(images), mask, space)
        write_predictions(args.predictions, [s.id for s in test], [s.pair(space) for s in test], preds.scores)
    print(curve.summary())
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    space, samples = _load_data(args.data)
    mask = _load_mask(args.mask, space, args.world) if args.world == "open" else feasibility.closed_world_mask(space)
    vocab = _vocab(cfg)
    dtype = np.dtype(cfg.dtype)
    if args.mode == "topk":
        try:
            ks = [int(k) for k in args.k_list.split(",") if k]
        except ValueError:
            raise CliError(f"bad --k-list {args.k_list!r}", EXIT_ARGS) from None
        full = min(space.n_attrs, space.n_objs)
        if any(not 1 <= k <= full for k in ks):
            raise CliError(f"every K must lie in [1, {full}]", EXIT_ARGS)
        rows = ablation.ablate_topk(space, samples, cfg.backbone, cfg.train, ks, cfg.slc, vocab, mask, args.world, dtype)
        keys = ["k"]
    else:
        rows = ablation.ablate_head(space, samples, cfg.backbone, cfg.train, cfg.slc, vocab, mask, args.world, dtype)
        keys = ["params", "ratio"]
    ablation.write_report(args.out, rows, keys)
    for row in rows:
        print(row.tsv(keys))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="owczsl", description="Open-world compositional zero-shot learning on synthetic data.")
    parser.add_argument("--threads", type=int, default=0, help="cap on BLAS worker threads (0 = library default)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic attribute x object dataset")
    p.add_argument("--attrs", type=int, default=6, help="number of attributes")
    p.add_argument("--objs", type=int, default=8, help="number of objects")
    p.add_argument("--unseen-frac", type=float, default=0.2, help="fraction of pairs held out as unseen")
    p.add_argument("--samples-per-pair", type=int, default=40, help="images rendered per pair")
    p.add_argument("--image-size", type=int, default=16, help="image side in pixels")
    p.add_argument("--emb-dim", type=int, default=16, help="dimension of the synthetic word vectors written alongside")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("feasibility", help="score pair feasibility and write a mask")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--emb1", required=True, help="first embedding file")
    p.add_argument("--emb2", required=True, help="second embedding file")
    p.add_argument("--keep-frac", type=float, default=1.0, help="fraction of validation unseen pairs kept feasible")
    p.add_argument("--world", choices=("open", "closed"), default="open", help="mask type")
    p.add_argument("--out", required=True, help="mask file; scores go to <out>.scores")
    p.set_defaults(func=cmd_feasibility)

    p = sub.add_parser(
        "train",
        help="train a model",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys and defaults:\n" + defaults_help(),
    )
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--mask", help="feasibility mask used for validation metrics")
    p.add_argument("--out", required=True, help="checkpoint path; metrics go to <out>.metrics.tsv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with the bias sweep")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--mask", help="open-world feasibility mask (default: every pair feasible)")
    p.add_argument("--world", choices=("open", "closed"), default="open", help="evaluation setting")
    p.add_argument("--split", choices=data.SPLITS, default="test", help="split to evaluate")
    p.add_argument("--curve", help="curve TSV path (default: <ckpt>.<world>.curve.tsv)")
    p.add_argument("--predictions", help="optional per-sample score dump")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "ablate",
        help="TopK or head ablation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys and defaults:\n" + defaults_help(),
    )
    p.add_argument("--mode", choices=("topk", "head"), required=True, help="which ablation")
    p.add_argument("--k-list", default="1,3", help="comma-separated K values for --mode topk")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--mask", help="open-world feasibility mask")
    p.add_argument("--world", choices=("open", "closed"), default="closed", help="evaluation setting")
    p.add_argument("--out", required=True, help="report TSV path")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _threads(args.threads):
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
