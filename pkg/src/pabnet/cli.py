"""Command-line entry point: ``pabnet synth | train | embed | eval | gradcheck | ablate``.

Exit codes: 0 success, 2 config/usage, 3 divergence, 4 format mismatch,
5 protocol violation, 6 gradient check failure.
"""

import argparse
import hashlib
import json
import sys
from collections import Counter
from pathlib import Path

from . import pipeline
from .config import load_config
from .data import (
    generate_synthetic,
    load_images,
    read_manifest,
    save_images,
    write_manifest,
    yaw_bucket,
)
from .errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    FormatError,
    InvalidInputError,
    ProtocolError,
    ProviderStateError,
    SamplingError,
    ShapeError,
)
from .formats import load_embeddings, save_embeddings, write_table, write_trainlog
from .train import embed_records, grad_check, set_deterministic, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_FORMAT = 4
EXIT_PROTOCOL = 5
EXIT_GRADCHECK = 6


def _global_flags(suppress):
    default = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=default, help="YAML/JSON run config")
    p.add_argument("--seed", type=int, metavar="N", default=default,
                   help="overrides synth.seed and train.seed")
    p.add_argument("--deterministic", action="store_true",
                   default=argparse.SUPPRESS if suppress else False,
                   help="single-threaded deterministic kernels")
    p.add_argument("--out", metavar="PATH", default=default, help="output file or directory")
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="pabnet", parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_global_flags(True)]

    sub.add_parser("synth", parents=common, help="render a synthetic dataset and manifest")

    p = sub.add_parser("train", parents=common, help="train the coupled network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("embed", parents=common, help="embed every manifest record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pose-features", metavar="NPZ", help="external pose feature archive")

    p = sub.add_parser("eval", parents=common, help="score an embedding file")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--protocol", required=True, choices=("verify", "identify", "folds"))
    p.add_argument("--far", type=float, nargs="+", default=[0.01, 0.001])
    p.add_argument("--rank", type=int, default=5, help="largest CMC rank")
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--pairs-per-fold", type=int, default=70)
    p.add_argument("--bins", type=int, default=40)
    p.add_argument("--bucket", type=int, help="restrict verification to one yaw bucket")
    p.add_argument("--metric", choices=("cosine", "euclidean"))
    p.add_argument("--no-plot", action="store_true")

    p = sub.add_parser("gradcheck", parents=common, help="finite-difference gradient check")
    p.add_argument("--component", required=True)
    p.add_argument("--channels", type=int)
    p.add_argument("--side", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--pairs", type=int)

    p = sub.add_parser("ablate", parents=common, help="train with and without the PAB")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--bucket", type=int, default=90)
    return parser


def _require_out(args):
    if not args.out:
        raise ConfigError("--out", f"{args.command} needs an output path")
    return Path(args.out)


def _load_dataset(manifest):
    records = read_manifest(manifest)
    if not records:
        raise FormatError(f"{manifest}: manifest has no records")
    return load_images(records, Path(manifest).parent), records


def _check_image_size(images, size, source):
    if images.shape[-1] != size or images.shape[-2] != size:
        raise FormatError(
            f"{source}: images are {images.shape[-2]}x{images.shape[-1]}, "
            f"backbone.image_size is {size}"
        )


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_synth(args, cfg):
    out = _require_out(args)
    images, records = generate_synthetic(cfg.synth)
    out.mkdir(parents=True, exist_ok=True)
    save_images(images, records, out)
    write_manifest(out / "manifest.tsv", records, config=cfg.to_dict())
    buckets = Counter(yaw_bucket(r.yaw_degrees) for r in records)
    print(f"identities\t{cfg.synth.n_identities}")
    print(f"records\t{len(records)}")
    print("bucket\tcount")
    for b in sorted(buckets):
        print(f"{b}\t{buckets[b]}")
    print(f"manifest\t{out / 'manifest.tsv'}")
    return EXIT_OK


def cmd_train(args, cfg):
    out = _require_out(args)
    images, records = _load_dataset(args.manifest)
    _check_image_size(images, cfg.backbone.image_size, args.manifest)
    result = train(cfg.train, cfg.backbone, images, records)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"manifest_sha256": _sha256(args.manifest), "steps": len(result.log.losses)}
    pipeline.save_model(out, result.net, result.provider, cfg, meta)
    log_path = out.with_name(out.name + ".trainlog")
    result.log.config = cfg.to_dict()
    write_trainlog(log_path, result.log)
    if not args.no_plot and result.log.losses:
        from .plotting import plot_loss

        plot_loss(result.log.losses, out.with_name(out.name + ".loss.png"))
    last = result.log.epochs[-1]
    print("step\tloss\teval_loss\tgenuine_distance\timpostor_distance")
    first_loss = result.log.losses[0] if result.log.losses else float("nan")
    final_loss = result.log.losses[-1] if result.log.losses else float("nan")
    print(f"first\t{first_loss!r}\t{result.log.epochs[0]['loss']!r}\t"
          f"{result.log.epochs[0]['genuine_distance']!r}\t{result.log.epochs[0]['impostor_distance']!r}")
    print(f"{last['step']}\t{final_loss!r}\t{last['loss']!r}\t"
          f"{last['genuine_distance']!r}\t{last['impostor_distance']!r}")
    print(f"checkpoint\t{out}")
    print(f"trainlog\t{log_path}")
    return EXIT_OK


def cmd_embed(args, cfg, explicit_config):
    out = _require_out(args)
    net, provider, ckpt_cfg = pipeline.load_model(args.checkpoint, args.pose_features)
    if explicit_config:
        for key in ("embedding_dim", "image_size", "stage_channels", "pose_stage_channels"):
            mine, theirs = getattr(cfg.backbone, key), getattr(ckpt_cfg.backbone, key)
            if mine != theirs:
                raise FormatError(f"backbone.{key}: config has {mine!r}, checkpoint has {theirs!r}")
    images, records = _load_dataset(args.manifest)
    _check_image_size(images, ckpt_cfg.backbone.image_size, args.manifest)
    threshold = ckpt_cfg.train.frontal_threshold
    emb = embed_records(net, provider, images, records, threshold)
    out.parent.mkdir(parents=True, exist_ok=True)
    extra = {
        "config": ckpt_cfg.to_dict(),
        "frontal_threshold": threshold,
        "checkpoint_sha256": _sha256(args.checkpoint),
        "manifest_sha256": _sha256(args.manifest),
    }
    save_embeddings(out, emb, records, "cosine", extra)
    print(f"records\t{len(records)}")
    print(f"dim\t{emb.shape[1]}")
    print(f"embeddings\t{out}")
    return EXIT_OK


def _print_table(columns, rows):
    print("\t".join(columns))
    for row in rows:
        print("\t".join(repr(v) if isinstance(v, float) else str(v) for v in row))


def cmd_eval(args, cfg):
    out = _require_out(args)
    header, samples, emb = load_embeddings(args.embeddings)
    metric = args.metric or header.get("metric", "cosine")
    threshold = header.get("frontal_threshold", cfg.train.frontal_threshold)
    options = {
        "protocol": args.protocol, "metric": metric, "far": args.far, "rank": args.rank,
        "folds": args.folds, "pairs_per_fold": args.pairs_per_fold, "bins": args.bins,
        "bucket": args.bucket, "frontal_threshold": threshold, "seed": cfg.train.seed,
    }
    echo = {"embeddings": header.get("config"), "eval": options}
    for far in args.far:
        if not 0 < far < 1:
            raise ConfigError("--far", f"targets must lie in (0, 1), got {far}")
    out.mkdir(parents=True, exist_ok=True)
    plot = not args.no_plot
    if plot:
        from . import plotting

    if args.protocol == "verify":
        rows, roc, (edges, gen, imp) = pipeline.verify(
            samples, emb, args.far, args.bins, args.bucket, metric, threshold
        )
        write_table(out / "summary.tsv", "verify_summary", ("metric", "value"), rows, echo)
        write_table(out / "roc.tsv", "roc", ("threshold", "far", "gar"), roc.rows(), echo)
        hist_rows = [(float(a), float(b), float(g), float(i))
                     for a, b, g, i in zip(edges[:-1], edges[1:], gen, imp)]
        write_table(out / "histogram.tsv", "histogram",
                    ("bin_lo", "bin_hi", "genuine", "impostor"), hist_rows, echo)
        if plot:
            plotting.plot_histogram(edges, gen, imp, out / "histogram.png")
            plotting.plot_roc(roc, out / "roc.png")
        _print_table(("metric", "value"), rows)
    elif args.protocol == "identify":
        cmc, bucket_rows = pipeline.identify(samples, emb, args.rank, metric)
        cmc_rows = [(k + 1, float(a)) for k, a in enumerate(cmc.accuracy)]
        write_table(out / "cmc.tsv", "cmc", ("rank", "accuracy"), cmc_rows, echo)
        columns = ("row",) + tuple(f"+-{b}" for b, _, _ in bucket_rows)
        wide = [
            ("rank1",) + tuple(r for _, _, r in bucket_rows),
            ("n_probes",) + tuple(n for _, n, _ in bucket_rows),
        ]
        write_table(out / "rank1_by_yaw.tsv", "rank1_by_yaw", columns, wide, echo)
        if plot:
            plotting.plot_cmc(cmc.accuracy, out / "cmc.png")
            plotting.plot_bucket_rank1(bucket_rows, out / "rank1_by_yaw.png")
        _print_table(("rank", "accuracy"), cmc_rows)
        _print_table(columns, wide)
        if cmc.ties:
            print(f"ties\t{cmc.ties}")
    else:
        fold_rows, (acc_cell, eer_cell), dropped = pipeline.folds(
            samples, emb, args.folds, args.pairs_per_fold, cfg.train.seed, metric, threshold
        )
        columns = ("fold", "n_genuine", "n_impostor", "threshold", "accuracy", "eer")
        write_table(out / "folds.tsv", "folds", columns, fold_rows, echo)
        summary = [("Accuracy", acc_cell), ("EER", eer_cell), ("dropped_pairs", dropped)]
        write_table(out / "folds_summary.tsv", "folds_summary", ("metric", "mean(std)"),
                    summary, echo)
        _print_table(columns, fold_rows)
        _print_table(("metric", "mean(std)"), summary)
    print(f"tables\t{out}")
    return EXIT_OK


def cmd_gradcheck(args, cfg):
    size = {k: getattr(args, k) for k in ("channels", "side", "hidden", "dim", "pairs")
            if getattr(args, k) is not None}
    report = grad_check(args.component, size, cfg.train.seed)
    print("component\tmax_rel_error\tthreshold\tworst_parameter\tchecked\tstatus")
    status = "pass" if report.passed else "FAIL"
    print(f"{report.component}\t{report.max_rel_error:.3e}\t{report.threshold:g}\t"
          f"{report.worst_parameter}\t{report.n_checked}\t{status}")
    if not report.passed:
        print(f"pabnet: gradient check failed; worst parameter {report.worst_parameter}",
              file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_ablate(args, cfg):
    out = _require_out(args)
    images, records = _load_dataset(args.manifest)
    _check_image_size(images, cfg.backbone.image_size, args.manifest)
    rows = pipeline.ablation(cfg, images, records, args.seeds, args.bucket)
    columns = ("seed", "attention", "final_loss", f"cosine_gap_{args.bucket}")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(out, "ablation", columns, rows, cfg.to_dict())
    _print_table(columns, rows)
    return EXIT_OK


def _dispatch(args):
    cfg = load_config(args.config, args.seed)
    if args.deterministic:
        set_deterministic(True)
    if args.command == "synth":
        return cmd_synth(args, cfg)
    if args.command == "train":
        return cmd_train(args, cfg)
    if args.command == "embed":
        return cmd_embed(args, cfg, args.config is not None)
    if args.command == "eval":
        return cmd_eval(args, cfg)
    if args.command == "gradcheck":
        return cmd_gradcheck(args, cfg)
    return cmd_ablate(args, cfg)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"pabnet: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"pabnet: training diverged at step {exc.step}; "
              f"last finite loss {exc.last_finite_loss!r}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, ShapeError, ProviderStateError) as exc:
        print(f"pabnet: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ProtocolError, SamplingError, InvalidInputError, ContractError) as exc:
        print(f"pabnet: protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except OSError as exc:
        print(f"pabnet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except json.JSONDecodeError as exc:
        print(f"pabnet: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
