"""Command-line entry point: every pipeline stage reads and writes one workspace directory.

Layout::

    manifest.json          seeds, resolved configs, config hashes, stage versions
    data/                  catalogs, events, search logs, labels, split.json
    vectors/               pca.tsv, products.tsv, <shop>.queries.tsv
    index/                 <shop>.index.tsv, <shop>.markov.tsv
    models/                <shop>.encdec_<variant>.ckpt
    reports/               evaluation reports (.tsv machine-readable, .txt table)
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .encdec import TrainConfig, load_checkpoint, save_checkpoint
from .evaluation import (context_for, cross_shop_benchmark, format_table, load_judgments, paired_cases, run_benchmark,
                         temporal_split, write_report)
from .experiment import (MODEL_NAMES, ExperimentConfig, ShopModels, WithinShopResult, view_contexts, benchmark,
                         eval_cases, fit_encdec, label_pairs, run_dispersion, run_window_sweep)
from .ingest import (SyntheticConfig, generate_synthetic, group_sessions, load_catalog, load_events, load_labels,
                     load_search_log, write_catalog, write_dataset, write_events, write_labels, write_search_log)
from .lm_index import (ErrorModel, build_trie, estimate_priors, fit_markov, load_index, load_markov, save_index,
                       save_markov, session_bucket)
from .models import ShopRouter
from .vectors import (build_query_vectors, load_product_vectors, load_query_vectors, reduce_catalogs, save_pca,
                      save_product_vectors, save_query_vectors)

log = logging.getLogger("sessionqac")

STAGE_VERSION = 1
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    """A runtime failure reported as ``error: <class>: <message>``."""

    def __init__(self, error_class: str, message: str):
        super().__init__(message)
        self.error_class = error_class


# -- workspace ----------------------------------------------------------------


class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def dir(self, name: str) -> Path:
        d = self.root / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            return {"tool_version": __version__, "stages": {}}
        return json.loads(self.manifest_path.read_text(encoding="utf-8"))

    def record(self, stage: str, config: dict, outputs: Sequence[Path]) -> None:
        manifest = self.manifest()
        manifest["stages"][stage] = {
            "stage_version": STAGE_VERSION,
            "config": config,
            "config_hash": config_hash(config),
            "outputs": sorted(str(p.relative_to(self.root)) for p in outputs),
        }
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def require(self, stage: str) -> dict:
        entry = self.manifest()["stages"].get(stage)
        if entry is None:
            raise CliError("MissingStage", f"workspace {self.root} has no {stage!r} output; run that stage first")
        return entry

    def split(self) -> dict:
        path = self.root / "data" / "split.json"
        if not path.exists():
            raise CliError("MissingStage", f"{path} not found; run generate or ingest first")
        return json.loads(path.read_text(encoding="utf-8"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def _print_config(command: str, config: dict) -> None:
    print(f"config {command} {json.dumps(config, sort_keys=True)}")


def _csv(text: str, convert: Callable = str) -> tuple:
    try:
        return tuple(convert(x.strip()) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid list {text!r}") from None


def _fraction(text: str) -> float:
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def _shop_path(text: str) -> tuple[str, str]:
    shop, sep, path = text.partition("=")
    if not sep or not shop or not path:
        raise argparse.ArgumentTypeError(f"expected SHOP=PATH, got {text!r}")
    return shop, path


# -- stage loaders --------------------------------------------------------------


def _shops(ws: Workspace) -> list[str]:
    return list(ws.split()["shops"])


def _load_data(ws: Workspace):
    split = ws.split()
    data = ws.root / "data"
    sessions = load_events(data / "events.tsv")
    logs = {shop: load_search_log(data / f"{shop}.searchlog.tsv", shop) for shop in split["shops"]}
    return split, sessions, logs


def _load_shop_models(ws: Workspace, shops: Sequence[str], variants: Sequence[str]) -> dict[str, ShopModels]:
    out = {}
    for shop in shops:
        index = load_index(ws.root / "index" / f"{shop}.index.tsv")
        markov = load_markov(ws.root / "index" / f"{shop}.markov.tsv")
        qv = load_query_vectors(ws.root / "vectors" / f"{shop}.queries.tsv")
        models = ShopModels(shop, index, qv, markov)
        for variant in variants:
            path = ws.root / "models" / f"{shop}.encdec_{variant}.ckpt"
            if not path.exists():
                raise CliError("MissingStage", f"{path} not found; run train --variants {variant}")
            models.encdec[variant] = load_checkpoint(path)
        out[shop] = models
    return out


# -- commands -------------------------------------------------------------------


def cmd_generate(args) -> int:
    ws = Workspace(args.workspace)
    overrides = {
        "rng_seed": args.seed, "n_sessions": args.sessions, "n_categories": args.categories,
        "cross_shop_fraction": args.cross_shop_fraction, "vector_dim": args.dim, "days": args.days,
    }
    cfg = SyntheticConfig(**{k: v for k, v in overrides.items() if v is not None})
    config = {k: v for k, v in dataclasses.asdict(cfg).items() if k != "query_vocabulary"}
    config["shops"] = list(cfg.shops)
    _print_config("generate", config)
    ds = generate_synthetic(cfg)
    data = ws.dir("data")
    files = list(write_dataset(ds, data).values())
    split = data / "split.json"
    split.write_text(json.dumps({"boundary": ds.boundary, "shops": list(cfg.shops)}, sort_keys=True) + "\n",
                     encoding="utf-8")
    ws.record("data", {"source": "generate", **config}, files + [split])
    print(f"generated {len(ds.events)} events, {len(ds.labels)} labeled sessions into {data}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    ws = Workspace(args.workspace)
    catalogs = dict(args.catalog)
    logs = dict(args.search_log or [])
    config = {"catalogs": catalogs, "events": args.events, "search_logs": logs, "boundary": args.boundary,
              "labels": args.labels}
    _print_config("ingest", config)
    data = ws.dir("data")
    files = []
    records = {shop: load_catalog(path, shop) for shop, path in sorted(catalogs.items())}
    sessions = load_events(args.events)
    train, _ = temporal_split(sessions, args.boundary, {s: load_search_log(p, s) for s, p in logs.items()} or None)
    for shop, recs in records.items():
        files.append(data / f"{shop}.catalog.tsv")
        write_catalog(recs, files[-1])
        if shop not in train.search_logs:
            raise CliError("IngestError", f"no search history for shop {shop!r}")
        files.append(data / f"{shop}.searchlog.tsv")
        write_search_log(train.search_logs[shop], files[-1])
    files.append(data / "events.tsv")
    write_events((ev for evs in sessions.values() for ev in evs), files[-1])
    if args.labels:
        files.append(data / "labels.tsv")
        write_labels(load_labels(args.labels), files[-1])
    split = data / "split.json"
    split.write_text(json.dumps({"boundary": args.boundary, "shops": sorted(records)}, sort_keys=True) + "\n",
                     encoding="utf-8")
    ws.record("data", {"source": "ingest", **config}, files + [split])
    print(f"ingested {sum(len(v) for v in sessions.values())} events for shops {', '.join(sorted(records))}")
    return EXIT_OK


def cmd_fit_vectors(args) -> int:
    ws = Workspace(args.workspace)
    ws.require("data")
    config = {"k": args.k, "per_shop": args.per_shop}
    _print_config("fit-vectors", config)
    split, _sessions, logs = _load_data(ws)
    catalogs = {shop: load_catalog(ws.root / "data" / f"{shop}.catalog.tsv", shop) for shop in split["shops"]}
    models, products = reduce_catalogs(catalogs, args.k, args.per_shop)
    out = ws.dir("vectors")
    files = []
    for shop in split["shops"]:
        name = f"{shop}.pca.tsv" if args.per_shop else "pca.tsv"
        if out / name not in files:
            save_pca(models[shop], out / name)
            files.append(out / name)
        qv = build_query_vectors(logs[shop], products.for_shop(shop))
        files.append(out / f"{shop}.queries.tsv")
        save_query_vectors(qv, files[-1])
        print(f"{shop}: {len(products.for_shop(shop))} products, {len(qv)} query vectors, "
              f"k={models[shop].k}, explained={models[shop].explained_variance_ratio.sum():.4f}")
    files.append(out / "products.tsv")
    save_product_vectors(products, files[-1])
    ws.record("vectors", config, files)
    return EXIT_OK


def cmd_build_index(args) -> int:
    ws = Workspace(args.workspace)
    ws.require("vectors")
    config = {"max_fanout": args.max_fanout, "exact_match_mass": args.exact_match_mass,
              "max_edits": args.max_edits, "markov_alpha": args.markov_alpha}
    _print_config("build-index", config)
    split, sessions, logs = _load_data(ws)
    products = load_product_vectors(ws.root / "vectors" / "products.tsv")
    train, _ = temporal_split(sessions, split["boundary"], logs)
    error_model = ErrorModel(exact_match_mass=args.exact_match_mass, max_edits=args.max_edits)
    out = ws.dir("index")
    files = []
    for shop in split["shops"]:
        index = build_trie(estimate_priors(logs[shop]), error_model, args.max_fanout)
        files.append(out / f"{shop}.index.tsv")
        save_index(index, files[-1])
        pairs = [(session_bucket([products.category(shop, s) for s in skus]) or "*", q)
                 for _, skus, q in view_contexts(train.sessions, shop)]
        files.append(out / f"{shop}.markov.tsv")
        save_markov(fit_markov(pairs, args.markov_alpha), files[-1])
        print(f"{shop}: {len(index.candidates)} candidates, {len(index.lists)} prefixes")
    ws.record("index", config, files)
    return EXIT_OK


def cmd_train(args) -> int:
    ws = Workspace(args.workspace)
    ws.require("vectors")
    tc = TrainConfig(learning_rate=args.lr, lr_decay=args.decay, batch_size=args.batch_size, max_epochs=args.epochs,
                     patience=min(args.patience, args.epochs), rng_seed=args.seed,
                     validation_fraction=args.validation_fraction)
    cfg = ExperimentConfig(hidden=args.hidden, train=tc, models=tuple(f"encdec_{v}" for v in args.variants))
    config = {"variants": list(args.variants), "hidden": args.hidden, **dataclasses.asdict(tc)}
    _print_config("train", config)
    split, sessions, logs = _load_data(ws)
    products = load_product_vectors(ws.root / "vectors" / "products.tsv")
    train, _ = temporal_split(sessions, split["boundary"], logs)
    out = ws.dir("models")
    files = []
    for shop in split["shops"]:
        for variant in args.variants:
            result = fit_encdec(train, shop, products, variant, cfg, print)
            if args.verbose:
                for rec in result.history:
                    val = "-" if rec.val_loss is None else f"{rec.val_loss:.4f}"
                    print(f"  epoch {rec.epoch:3d} train {rec.train_loss:.4f} val {val}")
            files.append(out / f"{shop}.encdec_{variant}.ckpt")
            save_checkpoint(result.model, files[-1])
    ws.record("train", config, files)
    return EXIT_OK


def _trained_config(ws: Workspace) -> tuple[TrainConfig, int]:
    """The training settings recorded by the train stage, for stages that refit models."""
    entry = ws.manifest()["stages"].get("train")
    if entry is None:
        return TrainConfig(), 128
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in entry["config"].items() if k in fields}), entry["config"]["hidden"]


def _experiment_config(args, models: Sequence[str], ws: Workspace) -> ExperimentConfig:
    tc, hidden = _trained_config(ws)
    return ExperimentConfig(k=args.k, runs=args.runs, sample_per_run=args.sample, rng_seed=args.seed,
                            seed_lengths=tuple(args.seed_lens), k_multiplier=args.k_multiplier,
                            length_norm=args.length_norm, models=tuple(models), hidden=hidden, train=tc)


def cmd_evaluate(args) -> int:
    ws = Workspace(args.workspace)
    ws.require("index")
    models = list(args.models)
    cfg = _experiment_config(args, models, ws)
    config = {"models": models, "k": cfg.k, "runs": cfg.runs, "sample_per_run": cfg.sample_per_run,
              "rng_seed": cfg.rng_seed, "seed_lengths": list(cfg.seed_lengths), "k_multiplier": cfg.k_multiplier,
              "length_norm": cfg.length_norm, "dispersion": args.dispersion, "judgments": args.judgments,
              "window_fractions": list(args.window_fractions or [])}
    _print_config("evaluate", config)
    split, sessions, logs = _load_data(ws)
    products = load_product_vectors(ws.root / "vectors" / "products.tsv")
    variants = [m.split("_", 1)[1] for m in models if m.startswith("encdec_")]
    shops = _load_shop_models(ws, split["shops"], variants)
    train, cases = temporal_split(sessions, split["boundary"], logs)
    cases = eval_cases(cases)
    out = ws.dir("reports")
    files = []
    if args.judgments:
        judged = load_judgments(args.judgments)
        per_shop = {shop: m.pipelines(cfg) for shop, m in shops.items()}
        routed = {MODEL_NAMES[n]: ShopRouter({s: p[n] for s, p in per_shop.items()}) for n in models}
        report = run_benchmark(routed, judged, cfg.k, cfg.runs, cfg.sample_per_run, cfg.rng_seed, None,
                               lambda c: context_for(c.context_skus, c.shop_id, products))
    else:
        report = benchmark(shops, cases, products, cfg)
    write_report(report, out / "eval.tsv", out / "eval.txt")
    files += [out / "eval.tsv", out / "eval.txt"]
    print(format_table(report), end="")
    if args.dispersion:
        disp = run_dispersion(WithinShopResult(report, shops, cases, products, train), cfg)
        write_report(disp, out / "dispersion.tsv", out / "dispersion.txt")
        files += [out / "dispersion.tsv", out / "dispersion.txt"]
        print(format_table(disp), end="")
    if args.window_fractions:
        sweep = run_window_sweep(train, cases, products, cfg, args.window_fractions)
        write_report(sweep, out / "window.tsv", out / "window.txt")
        files += [out / "window.tsv", out / "window.txt"]
        print(format_table(sweep), end="")
    ws.record("evaluate", config, files)
    return EXIT_OK


def cmd_cross_eval(args) -> int:
    ws = Workspace(args.workspace)
    ws.require("index")
    labels_path = ws.root / "data" / "labels.tsv"
    if not labels_path.exists():
        raise CliError("MissingStage", f"{labels_path} not found; cross-shop evaluation needs paired-session labels")
    with_encdec = not args.no_encdec
    config = {"k": args.k, "seed_length": args.seed_len, "encdec": with_encdec, "length_norm": args.length_norm}
    _print_config("cross-eval", config)
    split, sessions, _logs = _load_data(ws)
    products = load_product_vectors(ws.root / "vectors" / "products.tsv")
    shops = _load_shop_models(ws, split["shops"], ["avg"] if with_encdec else [])
    cfg = ExperimentConfig(k=args.k, length_norm=args.length_norm,
                           models=("popularity", "similarity") + (("encdec_avg",) if with_encdec else ()))
    pairs = paired_cases(sessions, label_pairs(load_labels(labels_path)), split["boundary"])
    report = cross_shop_benchmark(pairs, {s: m.pipelines(cfg) for s, m in shops.items()}, products, args.k,
                                  args.seed_len)
    out = ws.dir("reports")
    write_report(report, out / "cross.tsv", out / "cross.txt")
    print(format_table(report), end="")
    ws.record("cross-eval", config, [out / "cross.tsv", out / "cross.txt"])
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import ServiceConfig, SuggestionService, make_server
    from .session import CacheConfig, lookup_from_mapping

    ws = Workspace(args.workspace)
    ws.require("index")
    cfg = ServiceConfig(n_display=args.n, k_multiplier=args.k_multiplier, u_precompute=args.u,
                        model_mode=args.mode, host=args.host, port=args.port, queue_depth=args.queue_depth)
    cache_cfg = CacheConfig(ttl=args.ttl)
    _print_config("serve", {**dataclasses.asdict(cfg), "ttl": args.ttl})
    shops = _shops(ws)
    products = load_product_vectors(ws.root / "vectors" / "products.tsv")
    indexes = {shop: load_index(ws.root / "index" / f"{shop}.index.tsv") for shop in shops}
    query_vectors = {shop: load_query_vectors(ws.root / "vectors" / f"{shop}.queries.tsv") for shop in shops}
    models = {}
    if args.mode.startswith("encdec"):
        variant = args.mode.split("_", 1)[1]
        models = {shop: load_checkpoint(ws.root / "models" / f"{shop}.encdec_{variant}.ckpt") for shop in shops}
    service = SuggestionService(indexes, lookup_from_mapping(dict(products.items())), cfg, query_vectors, models,
                                cache_cfg)
    server = make_server(service)
    service.start()
    print(f"serving on http://{server.server_address[0]}:{server.server_address[1]}/v1/ (mode {args.mode})",
          flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()
        server.server_close()
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 2 after printing usage (argparse default), kept explicit here."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sessionqac", description="Session-aware query auto-completion toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name: str, fn, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--workspace", "-w", required=True, help="workspace directory")
        p.set_defaults(func=fn)
        return p

    p = add("generate", cmd_generate, "Generate a synthetic two-shop dataset.")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--sessions", type=int)
    p.add_argument("--categories", type=int)
    p.add_argument("--cross-shop-fraction", type=float)
    p.add_argument("--dim", type=int, help="raw product vector dimension")
    p.add_argument("--days", type=int)

    p = add("ingest", cmd_ingest, "Validate and import catalogs, events and search logs.")
    p.add_argument("--catalog", type=_shop_path, action="append", required=True, metavar="SHOP=PATH")
    p.add_argument("--events", required=True)
    p.add_argument("--search-log", type=_shop_path, action="append", metavar="SHOP=PATH",
                   help="pre-boundary search history; rebuilt from events when omitted")
    p.add_argument("--boundary", type=int, required=True, help="train/test boundary, epoch milliseconds")
    p.add_argument("--labels", help="paired-session labels for cross-eval")

    p = add("fit-vectors", cmd_fit_vectors, "Reduce product vectors with PCA and build query vectors.")
    p.add_argument("--k", type=int, help="components (default min(50, dim, n-1))")
    p.add_argument("--per-shop", action="store_true", help="fit one PCA per shop instead of a joint one")

    p = add("build-index", cmd_build_index, "Build the prefix index and the Markov baseline.")
    p.add_argument("--max-fanout", type=int, default=25)
    p.add_argument("--exact-match-mass", type=float, default=0.9)
    p.add_argument("--max-edits", type=int, default=1, choices=[0, 1])
    p.add_argument("--markov-alpha", type=float, default=1.0)

    p = add("train", cmd_train, "Train encoder-decoder models, one per shop and variant.")
    p.add_argument("--variants", type=lambda s: _csv(s), default=("avg",), help="comma list of avg,full")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--decay", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--validation-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true", help="print the loss history")

    def eval_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--k", type=int, default=5)
        p.add_argument("--length-norm", type=float, default=0.7)

    p = add("evaluate", cmd_evaluate, "Within-shop MRR@k benchmark over seed lengths.")
    eval_flags(p)
    p.add_argument("--models", type=lambda s: _csv(s), default=("popularity", "markov", "similarity"),
                   help=f"comma list of {','.join(MODEL_NAMES)}")
    p.add_argument("--seed-lens", type=lambda s: _csv(s, int), default=(0, 1))
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--sample", type=int, default=7500, help="cases sampled per run")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--k-multiplier", type=int, default=5)
    p.add_argument("--dispersion", action="store_true", help="also split Similarity MRR by query dispersion")
    p.add_argument("--judgments", help="score external relevance judgments instead of logged searches")
    p.add_argument("--window-fractions", type=lambda s: _csv(s, _fraction),
                   help="training-window sweep, e.g. 1/3,2/3,1")

    p = add("cross-eval", cmd_cross_eval, "Cross-shop transfer benchmark on paired sessions.")
    eval_flags(p)
    p.add_argument("--seed-len", type=int, default=1)
    p.add_argument("--no-encdec", action="store_true", help="skip the Cross-shop Enc-Dec condition")

    p = add("serve", cmd_serve, "Run the HTTP suggestion service in the foreground.")
    p.add_argument("--mode", default="popularity", choices=["popularity", "similarity", "encdec_avg", "encdec_full"])
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--n", type=int, default=5, help="suggestions displayed")
    p.add_argument("--k-multiplier", type=int, default=5)
    p.add_argument("--u", type=int, default=100, help="candidates precomputed per session")
    p.add_argument("--ttl", type=float, default=1800.0)
    p.add_argument("--queue-depth", type=int, default=1024)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "evaluate":
        unknown = [m for m in args.models if m not in MODEL_NAMES]
        if unknown:
            parser.error(f"unknown model(s): {', '.join(unknown)}")
    if args.command == "train":
        bad = [v for v in args.variants if v not in ("avg", "full")]
        if bad:
            parser.error(f"unknown variant(s): {', '.join(bad)}")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc.error_class}: {exc}", file=sys.stderr)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
