"""``hcsc`` command-line entry point.

Every subcommand builds a :class:`RunConfig` from an optional TOML file
(``--config``) overlaid with flags, and echoes the effective config into the
artifacts it writes.  Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import typing
from dataclasses import fields
from pathlib import Path

import numpy as np

from .autodiff import grad_check
from .config import ConfigError, RunConfig
from .data import SynthSpec, load_corpus, make_batches, save_corpus, sparsify_detail, synth_dataset

log = logging.getLogger("hcsc")

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config flags


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per RunConfig field; unset flags leave the file/default value."""
    group = parser.add_argument_group("run configuration")
    group.add_argument("--config", help="TOML file with RunConfig keys")
    hints = typing.get_type_hints(RunConfig)
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        hint = hints[f.name]
        kw = dict(dest=f"cfg_{f.name}", default=argparse.SUPPRESS)
        if hint is bool:
            group.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
        elif f.name in ("filter_sizes", "heads"):
            conv = int if f.name == "filter_sizes" else str
            group.add_argument(flag, nargs="+", type=conv, **kw)
        else:
            base = [a for a in typing.get_args(hint) if a is not type(None)] or [hint]
            group.add_argument(flag, type=base[0], **kw)


def effective_config(args: argparse.Namespace, **forced) -> RunConfig:
    values = RunConfig.load(args.config).to_dict() if getattr(args, "config", None) else {}
    for key, v in vars(args).items():
        if key.startswith("cfg_"):
            values[key[4:]] = v
    values.update({k: v for k, v in forced.items() if v is not None})
    return RunConfig.from_dict(values)


def _header(cfg: RunConfig, command: str) -> str:
    return f"hcsc {command}\nconfig: {cfg.to_json()}"


def _write(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


def _require(value, what: str):
    if not value:
        raise UsageError(f"{what} is required")
    return value


def _load_split(cfg: RunConfig, path, split: str, num_classes=None):
    return load_corpus(path, num_classes=num_classes or cfg.num_classes, split=split, max_len=cfg.max_len)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    from .training import save_checkpoint, train

    cfg = effective_config(args)
    train_c = _load_split(cfg, _require(cfg.train, "--train"), "train")
    dev = _load_split(cfg, cfg.dev, "dev", train_c.num_classes) if cfg.dev else None
    model, history = train(cfg, train_c, dev)
    out = Path(cfg.output or ".")
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckpt)
    record = {"config": cfg.to_dict(), **history.to_dict()}
    _write(out / "train_log.json", json.dumps(record, sort_keys=True, indent=1) + "\n")
    print(json.dumps({"checkpoint": str(ckpt), "best_epoch": history.best_epoch,
                      "best_dev_accuracy": history.best_dev_accuracy, "stopped": history.stopped}))
    return 0


def _model_and_split(args):
    from .training import load_checkpoint

    cfg = effective_config(args)
    model = load_checkpoint(_require(cfg.checkpoint, "--checkpoint"))
    path = _require(args.split or cfg.test, "--split (or --test)")
    corpus = _load_split(cfg, path, "test", model.num_classes)
    # echo the model's own settings, overlaid with anything set on this run
    run_cfg = model.cfg.replace(**{k: v for k, v in cfg.to_dict().items()
                                   if k in ("train", "dev", "test", "checkpoint", "output", "workers")})
    return run_cfg, model, corpus


def cmd_eval(args) -> int:
    from .metrics import report_csv
    from .training import evaluate

    cfg, model, corpus = _model_and_split(args)
    report = evaluate(model, corpus, cfg.batch_size, cfg.workers)
    print(json.dumps(report.summary(), sort_keys=True))
    if cfg.output:
        _write(cfg.output, report_csv(report, _header(cfg, "eval")))
    return 0


def cmd_analyze(args) -> int:
    from .metrics import buckets_csv, weibull_curve, weibull_curve_csv
    from .training import evaluate

    cfg, model, corpus = _model_and_split(args)
    out = Path(cfg.output or ".")
    header = _header(cfg, "analyze")
    report = evaluate(model, corpus, cfg.batch_size, cfg.workers)
    text = buckets_csv(report.user_buckets, "user", header)
    text += "".join(buckets_csv(report.product_buckets, "product").splitlines(keepends=True)[1:])
    _write(out / "buckets.csv", text)
    grid = np.round(np.arange(0, args.grid_max + 1e-9, args.grid_step), 10)
    curves = {"user": weibull_curve(model.users, grid), "product": weibull_curve(model.products, grid)}
    _write(out / "weibull.csv", weibull_curve_csv(curves, header))
    print(json.dumps({"buckets": str(out / "buckets.csv"), "weibull": str(out / "weibull.csv"),
                      **report.summary()}, sort_keys=True))
    return 0


def cmd_dump_attention(args) -> int:
    from .metrics import dump_attention, to_jsonl

    cfg, model, corpus = _model_and_split(args)
    docs = corpus.documents[: args.limit] if args.limit else corpus.documents
    text = to_jsonl(dump_attention(model, docs, cfg.batch_size), {"command": "dump-attention",
                                                                  "config": cfg.to_dict()})
    if cfg.output:
        _write(cfg.output, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_sparsify(args) -> int:
    cfg = effective_config(args)
    path = _require(args.input or cfg.train, "--input (or --train)")
    out = _require(args.out or cfg.output, "--out")
    corpus = _load_split(cfg, path, "train")
    seed = cfg.seed
    res = sparsify_detail(corpus, args.x, seed)
    save_corpus(res.corpus, out, args.format)
    meta = {"command": "sparsify", "input": str(path), "x": args.x, "seed": seed,
            "documents": len(res.corpus), "users": len(res.corpus.users), "products": len(res.corpus.products),
            "removed_users": res.removed_users, "removed_products": res.removed_products,
            "config": cfg.to_dict()}
    _write(f"{out}.meta.json", json.dumps(meta, sort_keys=True, indent=1) + "\n")
    print(json.dumps({k: meta[k] for k in ("documents", "users", "products")}))
    return 0


def cmd_synth(args) -> int:
    spec = SynthSpec(users=args.users, products=args.products, vocab=args.vocab, classes=args.classes,
                     docs=args.docs, signal=args.signal, seed=args.seed, dev_docs=args.dev_docs,
                     test_docs=args.test_docs, doc_len=args.doc_len, clusters=args.clusters,
                     cold_users=args.cold_users, cold_products=args.cold_products,
                     cold_fraction=args.cold_fraction)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for corpus in synth_dataset(spec):
        if len(corpus):
            save_corpus(corpus, out / f"{corpus.split}.txt", args.format)
            written[corpus.split] = len(corpus)
    meta = {"command": "synth", "spec": vars(spec), "documents": written}
    _write(out / "synth.meta.json", json.dumps(meta, sort_keys=True, indent=1) + "\n")
    print(json.dumps(written, sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    from .fixtures import tiny_problem
    from .training import build_model

    if args.tiny:
        model, batch, _ = tiny_problem(args.mode)
    else:
        cfg = effective_config(args)
        train_c = _load_split(cfg, _require(cfg.train, "--train or --tiny"), "train")
        model = build_model(cfg.replace(dropout=0.0), train_c)
        batch = make_batches(train_c, cfg.batch_size, shuffle=False, vocab=model.vocab)[0]
    params = list(model.named_parameters().values())
    err = grad_check(lambda seed: model.loss(batch), params, step=args.step)
    err = float(err)
    ok = bool(err < args.threshold)
    print(json.dumps({"max_relative_error": err, "threshold": args.threshold, "ok": ok,
                      "parameters": int(sum(p.size for p in params)), "config": model.cfg.to_dict()}))
    return 0 if ok else RUNTIME_ERROR


def cmd_bench(args) -> int:
    from .metrics import timing_csv, timing_report

    cfg = effective_config(args)
    if cfg.train:
        train_c = _load_split(cfg, cfg.train, "train")
    else:
        train_c, _, _ = synth_dataset(SynthSpec(docs=max(cfg.batch_size * 4, 64), signal="user",
                                                doc_len=args.doc_len, seed=cfg.seed))
    modes = tuple(args.modes)
    rows = timing_report(cfg, train_c, args.batches, modes=modes)
    text = timing_csv(rows, _header(cfg, "bench"))
    if cfg.output:
        _write(cfg.output, text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcsc", description="Hybrid contextualized sentiment classifier "
                                                              "with cold-start aware attention.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train a model; writes a checkpoint and train_log.json")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "accuracy and RMSE of a checkpoint on a split"),
                                 ("analyze", cmd_analyze, "frequency-bucket accuracy and Weibull curves"),
                                 ("dump-attention", cmd_dump_attention, "per-document attention as JSON lines")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--split", help="corpus file to score (defaults to --test)")
        _add_config_flags(p)
        if name == "analyze":
            p.add_argument("--grid-max", type=float, default=5.0)
            p.add_argument("--grid-step", type=float, default=0.1)
        if name == "dump-attention":
            p.add_argument("--limit", type=int, default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("sparsify", help="remove all reviews of x%% of users and products")
    p.add_argument("--x", type=float, required=True, help="percentage in (0, 100)")
    p.add_argument("--input", help="training corpus (defaults to --train)")
    p.add_argument("--out", help="output corpus path (defaults to --output)")
    p.add_argument("--format", choices=("tab", "jsonl"), default="tab")
    _add_config_flags(p)
    p.set_defaults(func=cmd_sparsify)

    p = sub.add_parser("synth", help="write synthetic train/dev/test corpora")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--signal", choices=("word", "user", "mixed"), default="word")
    for flag, default in (("users", 8), ("products", 8), ("vocab", 30), ("classes", 4), ("docs", 64),
                          ("seed", 0), ("dev-docs", 0), ("test-docs", 0), ("doc-len", 10),
                          ("cold-users", 0), ("cold-products", 0)):
        p.add_argument(f"--{flag}", type=int, default=default)
    p.add_argument("--clusters", type=int, default=None)
    p.add_argument("--cold-fraction", type=float, default=0.0)
    p.add_argument("--format", choices=("tab", "jsonl"), default="tab")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("grad-check", help="finite-difference check of the full loss")
    p.add_argument("--tiny", action="store_true", help="use the built-in D=8 problem")
    p.add_argument("--threshold", type=float, default=1e-3)
    p.add_argument("--step", type=float, default=1e-6)
    _add_config_flags(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("bench", help="per-variant training time over the first N batches")
    p.add_argument("--batches", type=int, default=100)
    p.add_argument("--modes", nargs="+", choices=("cnn-only", "rnn-only", "hybrid"),
                   default=["cnn-only", "rnn-only", "hybrid"])
    p.add_argument("--doc-len", type=int, default=20, help="length of synthetic documents without --train")
    _add_config_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "grad-check":
        args.mode = getattr(args, "cfg_mode", "hybrid")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"hcsc {args.command}: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"hcsc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
