"""Command-line front end: ``crozenas {score,rank,search,correlate,synth}``.

Exit codes: 0 ok, 1 usage/config, 2 parse or I/O, 3 compute.
stdout carries only the command's payload; logs go to stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace

import numpy as np

from . import batchfile, evaluation, proxies, search, space
from .config import ConfigError, parse_config_text, resolve
from .perturb import INPUT_KINDS
from .tensor import NumericError

log = logging.getLogger("crozenas")

EXIT_USAGE, EXIT_PARSE, EXIT_COMPUTE = 1, 2, 3


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _report(EXIT_USAGE, message)
        raise SystemExit(EXIT_USAGE)


def _report(code, message):
    kind = {EXIT_USAGE: "usage", EXIT_PARSE: "parse", EXIT_COMPUTE: "compute"}.get(code, "error")
    print(json.dumps({"error": {"kind": kind, "code": code, "message": message}}), file=sys.stderr)


@contextlib.contextmanager
def atomic_write(path, mode="w"):
    """Write to a temp file beside ``path`` and rename into place on success."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        kwargs = {"newline": ""} if "b" not in mode else {}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _emit(path, render):
    """Write ``render(fh)`` to ``path`` atomically, or to stdout when path is None/'-'."""
    if path in (None, "-"):
        buf = io.StringIO()
        render(buf)
        sys.stdout.write(buf.getvalue())
    else:
        with atomic_write(path) as fh:
            render(fh)


# -- option groups ---------------------------------------------------------------

S = argparse.SUPPRESS


def _common(p):
    g = p.add_argument_group("run configuration")
    g.add_argument("--config", default=S, help="key=value config file; flags override it")
    g.add_argument("--space", choices=space.SPACE_KINDS, default=S)
    g.add_argument("--stack", default=S, metavar="C,stages,cells,H,W,classes")
    g.add_argument("--in-channels", dest="in_channels", type=int, default=S)
    g.add_argument("--beta", type=float, default=S)
    g.add_argument("--gamma", type=float, default=S)
    g.add_argument("--epsilon", type=float, default=S)
    g.add_argument("--sigma", type=float, default=S)
    g.add_argument("--perturb", choices=INPUT_KINDS, default=S)
    g.add_argument("--components", default=S, help="subset of ZPG, e.g. ZG")
    g.add_argument("--clip", default=S, metavar="LO,HI")
    g.add_argument("--exclude-head", dest="exclude_head", action="store_const", const=True, default=S)
    g.add_argument("--seed", type=int, default=S, help="falls back to $CROZE_SEED")
    g.add_argument("--jobs", type=int, default=S)
    g.add_argument("--proxy", choices=proxies.PROXY_KINDS, default=S)
    src = g.add_mutually_exclusive_group()
    src.add_argument("--batch", default=S, help="CRZB batch file")
    src.add_argument("--synthetic", nargs="*", default=S, metavar="KEY=VALUE",
                     help="synthetic batch, e.g. n=8 classes=10 seed=3")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="crozenas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("score", help="CRoZe breakdown of one architecture")
    p.add_argument("arch", help="architecture encoding")
    _common(p)

    p = sub.add_parser("rank", help="score many architectures into a CSV")
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--sample", type=int, metavar="N")
    what.add_argument("--enumerate", action="store_true")
    p.add_argument("--out", default=None, help="score CSV (default stdout)")
    p.add_argument("--breakdown", default=None, help="per-layer breakdown JSONL")
    _common(p)

    p = sub.add_parser("search", help="proxy-driven architecture search")
    p.add_argument("--algo", choices=search.ALGORITHMS, default=S)
    p.add_argument("--budget", type=int, default=S)
    p.add_argument("--warmup", default=S, metavar="P,K")
    p.add_argument("--move", default=S, metavar="R,F")
    p.add_argument("--population", type=int, default=S)
    p.add_argument("--ae-sample", dest="ae_sample", type=int, default=S)
    p.add_argument("--benchmark", default=S, help="benchmark CSV for ground-truth tracking")
    p.add_argument("--metric", default=S)
    p.add_argument("--shortlist", type=int, default=S)
    p.add_argument("--out", default="search.jsonl", help="JSONL log path")
    p.add_argument("--shortlist-out", default=None, help="shortlist CSV (default: <out>.csv)")
    _common(p)

    p = sub.add_parser("correlate", help="Spearman rho of scores against a benchmark")
    p.add_argument("--scores", required=True)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--metrics", default=None, help="comma-separated (default: all)")
    p.add_argument("--json", default=None, help="also write the JSON report here")
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("synth", help="generate a batch file or a synthetic benchmark")
    ss = p.add_subparsers(dest="what", required=True, parser_class=_Parser)
    b = ss.add_parser("batch")
    b.add_argument("--n", type=int, default=8)
    b.add_argument("--classes", type=int, default=10)
    b.add_argument("--shape", default="3,16,16", metavar="C,H,W")
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--out", required=True)
    b.add_argument("-v", "--verbose", action="store_true")
    t = ss.add_parser("benchmark")
    t.add_argument("--noise", type=float, default=2.0)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--planted-seed", type=int, default=None,
                   help="seed of the planted quality landscape (default: --seed)")
    t.add_argument("--metrics", default=None)
    t.add_argument("--sample", type=int, default=None, help="rows (default: whole NB201 space)")
    t.add_argument("--out", required=True)
    t.add_argument("--planted-out", default=None, help="planted quality as a score CSV")
    t.add_argument("-v", "--verbose", action="store_true")
    return parser


# -- helpers ------------------------------------------------------------------------

_RUN_KEYS = {"space", "stack", "in_channels", "beta", "gamma", "epsilon", "sigma", "perturb",
             "components", "clip", "exclude_head", "seed", "jobs", "proxy", "batch", "synthetic",
             "algo", "budget", "warmup", "move", "population", "ae_sample", "benchmark",
             "metric", "shortlist"}


def _run_config(args):
    flags = {k: v for k, v in vars(args).items() if k in _RUN_KEYS}
    if "synthetic" in flags:
        flags["synthetic"] = " ".join(flags["synthetic"]) or "n=8"
        flags["batch"] = None
    file_values = {}
    if hasattr(args, "config"):
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_values = parse_config_text(fh.read(), args.config)
        except OSError as exc:
            raise CliError(EXIT_PARSE, f"cannot read config {args.config}: {exc.strerror}")
        except ConfigError as exc:
            raise CliError(EXIT_PARSE, str(exc))
    try:
        return resolve(file_values, flags)
    except (ConfigError, ValueError) as exc:
        raise CliError(EXIT_USAGE, str(exc))


def _load_batch(cfg):
    """Batch from file or synthetic generator, plus the stack fitted to its shape."""
    stack = cfg.stack_config()
    if cfg.batch is not None:
        try:
            batch = batchfile.read_batch(cfg.batch)
        except FileNotFoundError:
            raise CliError(EXIT_PARSE, f"batch file not found: {cfg.batch}")
        except (OSError, batchfile.BatchFormatError) as exc:
            raise CliError(EXIT_PARSE, f"cannot read batch {cfg.batch}: {exc}")
        c, h, w = batch.images.shape[1:]
        try:
            stack = replace(stack, in_channels=c, height=h, width=w)
        except ValueError as exc:
            raise CliError(EXIT_PARSE, f"batch {cfg.batch}: {exc}")
    else:
        try:
            params = cfg.synthetic_params()
        except ConfigError as exc:
            raise CliError(EXIT_USAGE, str(exc))
        batch = batchfile.synthetic_batch(params["n"], params["classes"], stack.input_shape,
                                          params["seed"])
    if batch.labels.min() < 0 or batch.labels.max() >= stack.num_classes:
        raise CliError(EXIT_PARSE, f"batch labels fall outside [0, {stack.num_classes})")
    return batch, stack


def _scorer(cfg):
    if cfg.proxy in proxies.DATA_FREE:
        return proxies.Scorer(cfg.proxy, cfg.proxy_config(), cfg.stack_config(), None, cfg.seed)
    batch, stack = _load_batch(cfg)
    return proxies.Scorer(cfg.proxy, cfg.proxy_config(), stack, batch, cfg.seed)


def _progress(done, total):
    step = max(1, total // 10)
    if done % step == 0 or done == total:
        print(f"scored {done}/{total}", file=sys.stderr)


def _write_config(path, cfg):
    if path not in (None, "-"):
        with atomic_write(path + ".config") as fh:
            fh.write(cfg.to_text())


# -- commands -------------------------------------------------------------------------

def cmd_score(args):
    cfg = _run_config(args)
    cfg = replace(cfg, proxy="croze")
    try:
        space.decode(args.arch)
    except space.EncodingError as exc:
        raise CliError(EXIT_PARSE, f"bad architecture encoding: {exc}")
    row = _scorer(cfg).row(args.arch)
    if not row.ok:
        raise CliError(EXIT_COMPUTE, row.status)
    out = row.breakdown.to_dict()
    out["config"] = cfg.to_dict()
    sys.stdout.write(json.dumps(out, indent=2) + "\n")


def cmd_rank(args):
    cfg = _run_config(args)
    if args.enumerate:
        if cfg.space != space.NB201:
            raise CliError(EXIT_USAGE, "--enumerate is only supported for --space nb201")
        encodings = space.enumerate_space(space.NB201)
    else:
        if args.sample < 1:
            raise CliError(EXIT_USAGE, "--sample must be >= 1")
        rng = np.random.default_rng(cfg.seed)
        encodings = [space.encode(space.sample_uniform(cfg.space, rng)) for _ in range(args.sample)]
    scorer = _scorer(cfg)
    rows = proxies.score_many(encodings, scorer, jobs=cfg.jobs, progress=_progress)
    failed = sum(not r.ok for r in rows)
    if failed:
        log.warning("%d of %d rows failed", failed, len(rows))
    _emit(args.out, lambda fh: proxies.score_rows_to_csv(rows, fh))
    _write_config(args.out, cfg)
    if args.breakdown:
        with atomic_write(args.breakdown) as fh:
            for r in rows:
                if r.breakdown is not None:
                    fh.write(json.dumps(r.breakdown.to_dict()) + "\n")


def cmd_search(args):
    cfg = _run_config(args)
    sconf = search.SearchConfig(cfg.algo, cfg.budget, cfg.warmup, cfg.move, cfg.population,
                                cfg.ae_sample, cfg.seed, cfg.space, cfg.shortlist)
    try:
        sconf.validate()
    except search.SearchConfigError as exc:
        raise CliError(EXIT_USAGE, f"invalid search configuration: {exc}")
    table = None
    if cfg.benchmark is not None:
        table = _read_table(cfg.benchmark)
        if cfg.metric not in table.metrics:
            raise CliError(EXIT_PARSE, f"metric {cfg.metric!r} not in {cfg.benchmark}")
    scorer = _scorer(cfg)
    map_fn = None
    if cfg.jobs > 1:
        map_fn = lambda fn, items: proxies.parallel_map(fn, items, cfg.jobs)  # noqa: E731
    result = search.hybrid_search(cfg.space, scorer, sconf, table, map_fn=map_fn, metric=cfg.metric)
    header = {"config": cfg.to_dict(), "search": sconf.to_dict(), "notes": result.notes}
    with atomic_write(args.out) as fh:
        result.write_jsonl(fh, header)
    short = args.shortlist_out or os.path.splitext(args.out)[0] + ".csv"
    with atomic_write(short) as fh:
        result.write_shortlist(fh)
    print(f"best {result.best.encoding} proxy={result.best.proxy_score!r}", file=sys.stderr)


def _read_table(path, schema=None):
    try:
        return evaluation.load_benchmark(path, schema)
    except FileNotFoundError:
        raise CliError(EXIT_PARSE, f"benchmark file not found: {path}")
    except (OSError, evaluation.BenchmarkError) as exc:
        raise CliError(EXIT_PARSE, f"{path}: {exc}")


def cmd_correlate(args):
    metrics = [m.strip() for m in args.metrics.split(",")] if args.metrics else None
    table = _read_table(args.benchmark)
    for m in metrics or ():
        if m not in table.metrics:
            raise CliError(EXIT_PARSE, f"metric {m!r} not found in {args.benchmark}")
    try:
        with open(args.scores, newline="", encoding="utf-8") as fh:
            scores = proxies.read_score_csv(fh)
    except FileNotFoundError:
        raise CliError(EXIT_PARSE, f"scores file not found: {args.scores}")
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_PARSE, f"{args.scores}: {exc}")
    try:
        report = evaluation.correlate(scores, table, metrics)
    except ValueError as exc:
        raise CliError(EXIT_COMPUTE, str(exc))
    if args.json:
        with atomic_write(args.json) as fh:
            fh.write(report.to_json() + "\n")
    sys.stdout.write(report.to_json() + "\n" if args.format == "json" else report.to_text())


def cmd_synth(args):
    seed = args.seed if args.seed is not None else int(os.environ.get("CROZE_SEED", 0))
    if args.what == "batch":
        try:
            shape = tuple(int(v) for v in args.shape.split(","))
            if len(shape) != 3 or min(shape) < 1:
                raise ValueError
        except ValueError:
            raise CliError(EXIT_USAGE, f"--shape expects C,H,W, got {args.shape!r}")
        if args.n < 1 or args.classes < 1:
            raise CliError(EXIT_USAGE, "--n and --classes must be >= 1")
        batch = batchfile.synthetic_batch(args.n, args.classes, shape, seed)
        with atomic_write(args.out, "wb") as fh:
            fh.write(batchfile.encode_batch(batch))
        return
    metrics = tuple(m.strip() for m in args.metrics.split(",")) if args.metrics else evaluation.DEFAULT_METRICS
    planted_seed = args.planted_seed if args.planted_seed is not None else seed
    quality = evaluation.additive_quality(space.NB201, planted_seed)
    if args.sample:
        rng = np.random.default_rng(seed)
        encodings = list(dict.fromkeys(space.encode(space.sample_uniform(space.NB201, rng))
                                       for _ in range(args.sample)))
    else:
        encodings = space.enumerate_space(space.NB201)
    table = evaluation.synth_benchmark(encodings, quality, args.noise,
                                       np.random.default_rng(seed + 1), metrics)
    with atomic_write(args.out) as fh:
        table.to_csv(fh)
    if args.planted_out:
        rows = [proxies.ScoreRow(e, "planted", quality(e), None, planted_seed, "ok") for e in encodings]
        with atomic_write(args.planted_out) as fh:
            proxies.score_rows_to_csv(rows, fh)


COMMANDS = {"score": cmd_score, "rank": cmd_rank, "search": cmd_search,
            "correlate": cmd_correlate, "synth": cmd_synth}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except CliError as exc:
        _report(exc.code, str(exc))
        return exc.code
    except (NumericError, proxies.DegenerateArchitecture, ArithmeticError) as exc:
        _report(EXIT_COMPUTE, f"{type(exc).__name__}: {exc}")
        return EXIT_COMPUTE
    except OSError as exc:
        _report(EXIT_PARSE, f"I/O error: {exc}")
        return EXIT_PARSE
    return 0


if __name__ == "__main__":
    sys.exit(main())
