"""Command-line entry point: gen-synthetic, train, embed, search, evaluate.

Every config key is also a flag (``--optim.lr0 0.002``). Exit codes: 0 success,
1 usage or config error, 2 data error, 3 numeric failure.
"""

import argparse
import os
import sys

from . import config as cfgmod
from .datapipe import gen_synthetic, load_split, read_fmat, read_manifest
from .errors import ConfigError, FormatError, LayoutError, NumericError
from .retrieval import EmbeddingIndex, embed_split, evaluate_split, search, write_report
from .training import load_model, train

RUN_DIR_ENV = "DUALENC_RUN_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_run_dir():
    return os.environ.get(RUN_DIR_ENV, os.path.join("runs", "default"))


def _add_config_flags(parser):
    parser.add_argument("--config", help="key=value config file")
    group = parser.add_argument_group("config keys")
    for key in cfgmod.to_flat(cfgmod.TrainConfig()):
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="VALUE", default=None)


def _overrides(args):
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}


def _resolve(args, base=None):
    config = base or cfgmod.TrainConfig()
    if args.config:
        config = cfgmod.load_config(args.config, config)
    overrides = _overrides(args)
    return cfgmod.apply_overrides(config, overrides), overrides


def cmd_gen_synthetic(args):
    config, _ = _resolve(args)
    s = config.synthetic
    if s.n_pairs < 1:
        raise ConfigError(f"synthetic.n_pairs must be >= 1, got {s.n_pairs}")
    out = args.out or s.out_dir
    manifest = gen_synthetic(out, s.n_pairs, s.latent_dim, s.speech_T, s.speech_D, s.image_D,
                             s.noise_sigma, config.seed, s.dev_pairs, s.test_pairs)
    print(f"wrote {len(manifest.records)} pairs to {os.path.join(out, 'manifest.tsv')}")


def cmd_train(args):
    config, overrides = _resolve(args)
    run_dir = args.run_dir or _default_run_dir()
    _, loss = train(config, run_dir, resume=args.resume, overrides=overrides,
                    echo=None if args.quiet else print)
    print(f"final_loss={loss!r}")


def _load_for_inference(args):
    overrides = _overrides(args)
    if args.config:
        overrides = {**cfgmod.parse_lines(open(args.config, encoding="utf-8").read()), **overrides}
    return load_model(args.checkpoint, overrides)


def cmd_embed(args):
    model, config, _ = _load_for_inference(args)
    manifest = read_manifest(args.manifest)
    data = load_split(manifest, args.split, config.target_frames, config.data.crop_mode)
    speech, image = embed_split(model, data, config.chunk_window)
    for name, emb in (("speech", speech), ("image", image)):
        EmbeddingIndex(emb, data.ids).save(os.path.join(args.out_dir, name))
    print(f"embedded {len(data.ids)} records from split {args.split} into {args.out_dir}")


def cmd_search(args):
    index = EmbeddingIndex.load(args.index_dir, args.scoring)
    queries = read_fmat(args.query)
    rows, scores = search(index, queries, args.k)
    blocks = []
    for q in range(len(queries)):
        blocks.append("".join(f"{index.ids[r]}\t{s!r}\n" for r, s in
                              zip(rows[q], scores[q].tolist())))
    sys.stdout.write("\n".join(blocks))


def cmd_evaluate(args):
    model, config, _ = _load_for_inference(args)
    manifest = read_manifest(args.manifest)
    k_list = [int(k) for k in args.k_list.split(",")] if args.k_list else config.k_list
    report = evaluate_split(model, manifest, args.split, k_list, config.target_frames,
                            config.chunk_window, config.data.crop_mode, config.model.scoring)
    out = args.out or os.path.join(args.run_dir or _default_run_dir(), f"eval-{args.split}.txt")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_report(out, report)
    print(f"wrote {out}")


def build_parser():
    parser = _Parser(prog="dualenc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="write a synthetic paired corpus")
    p.add_argument("--out", help="output directory (default: synthetic.out_dir)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train with simulated replicas")
    p.add_argument("--run-dir")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed a split into per-modality indexes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out-dir", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("search", help="exact top-k search of an index")
    p.add_argument("--index-dir", required=True)
    p.add_argument("--query", required=True, help="FMAT file, one query per row")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--scoring", choices=("dot", "cosine"), default="dot")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", help="Recall@K report for a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--k-list")
    p.add_argument("--out")
    p.add_argument("--run-dir")
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, LayoutError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
