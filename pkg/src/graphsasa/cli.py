"""Command line: ``graphsasa {gen-synth,pretrain,finetune-eval,report,dump-aug}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import param_ratio
from .augmentation import build_augmented_edges
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .config import CONFIG_ENV, RunConfig, load_config, parse_override
from .errors import ConfigError, GraphSASAError, ValidationError
from .evaluation import MetricReport, evaluate_stream
from .graph_store import generate_synthetic_stream, parse_edge_stream, split_snapshots
from .training import pretrain

logger = logging.getLogger("graphsasa")

EMBEDDINGS = "embeddings.gsasa"
ADAPTER = "adapter.gsasa"
MANIFEST = "manifest.json"
REPORT_TSV = "report.tsv"
REPORT_TXT = "report.txt"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _limit_threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def _config(args) -> RunConfig:
    overrides = [parse_override(s) for s in args.set]
    for flag, key in (("data", "data.path"), ("out", "output_dir"), ("threads", "threads"),
                      ("seed", "seed"), ("rank", "eval.rank"), ("k", "eval.k")):
        value = getattr(args, flag, None)
        if value is None:
            continue
        overrides.append((key.split("."), value))
    if getattr(args, "epochs", None) is not None:
        section = "pretrain" if args.command == "pretrain" else "finetune"
        overrides.append(([section, "epochs"], args.epochs))
    return load_config(args.config, overrides)


def load_dataset(cfg: RunConfig):
    data = cfg.data
    if data.path is not None:
        try:
            records = parse_edge_stream(data.path)
        except OSError as exc:
            raise ValidationError(f"cannot read {data.path}: {exc.strerror}") from exc
        n_users, n_items = data.n_users, data.n_items
    else:
        syn = data.synthetic
        records = generate_synthetic_stream(
            syn.n_users, syn.n_items, syn.n_snapshots, syn.edges_per_snapshot, syn.power_exponent,
            syn.drift_rate, syn.seed, n_communities=syn.n_communities, affinity=syn.affinity,
            granularity=data.granularity)
        n_users, n_items = syn.n_users, syn.n_items
    return split_snapshots(records, data.granularity, n_users, n_items, data.n_pretrain)


def _dtype(cfg):
    return np.float32 if cfg.precision == "float32" else np.float64


def _outdir(cfg) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_synth(args) -> int:
    cfg = _config(args)
    syn = cfg.data.synthetic
    records = generate_synthetic_stream(
        syn.n_users, syn.n_items, syn.n_snapshots, syn.edges_per_snapshot, syn.power_exponent,
        syn.drift_rate, syn.seed, n_communities=syn.n_communities, affinity=syn.affinity,
        granularity=cfg.data.granularity)
    buf = io.StringIO()
    buf.write(f"# synthetic users={syn.n_users} items={syn.n_items} seed={syn.seed}\n")
    for r in records:
        buf.write(f"{r.user_id}\t{r.item_id}\t{r.timestamp}\n")
    atomic_write(args.output, buf.getvalue())
    print(f"wrote {len(records)} records to {args.output}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    with _limit_threads(cfg.threads):
        snapshots, manifest = load_dataset(cfg)
        train = [snapshots[t] for t in manifest.indices("pretrain")]
        if not train:
            raise ConfigError("no snapshots assigned to pre-training")
        out = _outdir(cfg)
        log = io.StringIO()
        t0 = time.perf_counter()
        x = pretrain(train, cfg.dim, cfg.pretrain, cfg.propagation, cfg.augmentation, log=log,
                     dtype=_dtype(cfg))
        ckpt = out / EMBEDDINGS
        save_checkpoint(ckpt, x)
        atomic_write(out / MANIFEST, json.dumps(manifest.to_dict(), indent=2) + "\n")
        atomic_write(out / "pretrain.log", log.getvalue())
        atomic_write(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    m, d = x.shape
    print(f"pre-trained {m}x{d} embeddings on {len(train)} snapshots "
          f"({cfg.pretrain.epochs} epochs each) in {time.perf_counter() - t0:.1f}s")
    print(f"checkpoint: {ckpt}")
    return 0


def _load_base(path, cfg, m_expected):
    x = load_checkpoint(path)
    m, d = x.shape
    if m != m_expected or d != cfg.dim:
        raise ValidationError(f"{path}: checkpoint is {m}x{d}, config expects {m_expected}x{cfg.dim}")
    return x.astype(_dtype(cfg))


def cmd_finetune_eval(args) -> int:
    cfg = _config(args)
    with _limit_threads(cfg.threads):
        snapshots, manifest = load_dataset(cfg)
        out = _outdir(cfg)
        ckpt = Path(args.checkpoint) if args.checkpoint else out / EMBEDDINGS
        x_pre = _load_base(ckpt, cfg, manifest.n_users + manifest.n_items)
        tests = manifest.indices("test")
        if not tests:
            raise ConfigError("no snapshots assigned to evaluation")
        log = io.StringIO()
        label = args.label or Path(cfg.output_dir).name
        report, adapter = evaluate_stream(x_pre, snapshots, tests, cfg.eval, cfg.propagation,
                                          cfg.augmentation, cfg.finetune, log=log, label=label)
        atomic_write(out / REPORT_TSV, "\n".join(report.to_lines()) + "\n")
        atomic_write(out / REPORT_TXT, report.table() + "\n")
        atomic_write(out / "finetune.log", log.getvalue())
        if adapter is not None:
            adapter.save(out / ADAPTER)
    m, d = x_pre.shape
    print(report.table())
    if cfg.eval.adapt:
        r = cfg.eval.rank
        print(f"trainable parameters: {(m + d) * r} (adapter rank {r}) vs {m * d} full")
        print(f"parameter ratio rho = {param_ratio(m, d, r):.6f}")
    else:
        print("trainable parameters: 0 (frozen embeddings)")
    print(f"report: {out / REPORT_TSV}")
    return 0


def _summary_rows(reports):
    rows = []
    for rep in reports:
        rec, nd = rep.recall, rep.ndcg
        rows.append({
            "report": rep.label,
            f"recall@{rep.k}": "" if rec is None else f"{rec:.6f}",
            f"ndcg@{rep.k}": "" if nd is None else f"{nd:.6f}",
            "snapshots": str(sum(1 for r in rep.records if not r.absent)),
            "users": str(rep.n_users),
            "trainable_params": "" if rep.trainable_params is None else str(rep.trainable_params),
            "param_ratio": "" if rep.param_ratio is None else f"{rep.param_ratio:.6f}",
        })
    return rows


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        try:
            rep = MetricReport.load(path)
        except OSError as exc:
            raise ValidationError(f"cannot read report {path}: {exc.strerror}") from exc
        if not rep.label:
            rep.label = Path(path).stem
        reports.append(rep)
    if len({r.k for r in reports}) > 1:
        raise ValidationError("reports use different k")
    rows = _summary_rows(reports)
    fields = list(rows[0].keys())
    table = [fields] + [[row[f] for f in fields] for row in rows]
    widths = [max(len(r[c]) for r in table) for c in range(len(fields))]
    for r in table:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    if args.csv:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\r\n")
        writer.writeheader()
        writer.writerows(rows)
        atomic_write(args.csv, buf.getvalue())
    return 0


def cmd_dump_aug(args) -> int:
    cfg = _config(args)
    snapshots, manifest = load_dataset(cfg)
    out = _outdir(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / EMBEDDINGS
    x = _load_base(ckpt, cfg, manifest.n_users + manifest.n_items)
    t = args.snapshot if args.snapshot is not None else len(snapshots) - 1
    if not 0 <= t < len(snapshots):
        raise ConfigError(f"snapshot {t} outside [0, {len(snapshots)})")
    edges = build_augmented_edges(x, snapshots[t], cfg.augmentation)
    lines = "".join(f"{int(u)}\t{int(i)}\t{float(s):.9g}\n" for u, i, s in zip(edges.users, edges.items, edges.scores))
    if args.output == "-":
        sys.stdout.write(lines)
    else:
        atomic_write(args.output, lines)
        print(f"wrote {len(edges)} augmented edges for snapshot {t} to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graphsasa", description="Dynamic graph recommendation with sparse "
                     "augmentation and low-rank singular adaptation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help=f"JSON config (default: ${CONFIG_ENV})")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key, e.g. finetune.epochs=3")
        p.add_argument("--data", help="edge stream file (user<TAB>item<TAB>timestamp)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="seed for every random component")
        p.add_argument("--threads", type=int, help="worker threads; 1 is deterministic")

    p = sub.add_parser("gen-synth", help="write a synthetic edge stream")
    common(p)
    p.add_argument("output")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("pretrain", help="pre-train embeddings and write a checkpoint")
    common(p)
    p.add_argument("--epochs", type=int, help="epochs per pre-training snapshot")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune-eval", help="fine-tune adapters and evaluate future snapshots")
    common(p)
    p.add_argument("--checkpoint", help="embedding checkpoint (default: OUT/embeddings.gsasa)")
    p.add_argument("--rank", type=int, help="adapter rank r")
    p.add_argument("--k", type=int, help="cutoff for recall@k / ndcg@k")
    p.add_argument("--epochs", type=int, help="fine-tuning epochs")
    p.add_argument("--label", help="name recorded in the report")
    p.set_defaults(func=cmd_finetune_eval)

    p = sub.add_parser("report", help="compare report files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("dump-aug", help="write augmented edges (user<TAB>item<TAB>score)")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--snapshot", type=int, help="snapshot index (default: last)")
    p.add_argument("-o", "--output", default="-")
    p.set_defaults(func=cmd_dump_aug)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GraphSASAError as exc:
        print(f"graphsasa: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"graphsasa: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
