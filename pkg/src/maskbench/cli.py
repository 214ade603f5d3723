"""Command-line front end: gen, train, probe, compare, score and filter.

Every command resolves its settings as built-in defaults, then the JSON file
given by ``--config``, then explicit flags, and writes the effective settings
next to its outputs so the run can be repeated from that file alone.

Exit codes: 0 success, 2 argument error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .encoder import RenderError
from .evalharness import encoder_embedder, evaluate_all, make_tasks, write_results
from .masking import STRATEGIES
from .synthdata import (
    CorpusConfig,
    CorpusFormatError,
    CorpusManifest,
    QAConfig,
    TemplateGenerator,
    build_behavior_pairs,
    difficulty_score,
    event_vocabulary,
    filter_hard,
    generate_corpus,
    hashed_bow_embedder,
    qa_pipeline,
    read_corpus,
    write_corpus,
)
from .trainer import (
    CheckpointError,
    NumericFailure,
    TrainConfig,
    Trainer,
    load_pairs,
    smoothed,
    train,
    write_loss_log,
)

logger = logging.getLogger("maskbench")

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATA_ENV = "MASKBENCH_DATA_DIR"
COMPARE_DEFAULT = ("causal", "hybrid_block", "bidirectional", "scheduler_linear", "ggsm")
GEN_DEFAULTS = {"users": 2000, "archetypes": 4, "noise": 0.05, "sample_k": 5, "qa": 0, "t_filter": 0.6, "seed": 7}
CORPUS_FILE, QA_FILE, MANIFEST_FILE = "corpus.jsonl", "qa.jsonl", "manifest.json"


class ArgError(ValueError):
    """Bad flags or config values (exit 2)."""


class DataError(RuntimeError):
    """Missing, malformed or protected files (exit 3)."""


def data_root() -> Path:
    return Path(os.environ.get(DATA_ENV) or "data")


def default_corpus() -> str | None:
    """``$MASKBENCH_DATA_DIR/corpus.jsonl`` when that variable is set, else the built-in corpus."""
    root = os.environ.get(DATA_ENV)
    return str(Path(root) / CORPUS_FILE) if root else None


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg, flush=True)


def _load_config(path: str | None, allowed: Sequence[str]) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ArgError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ArgError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ArgError(f"unknown keys in {path}: {unknown}")
    return cfg


def _merge(defaults: dict, config: dict, args: argparse.Namespace) -> dict:
    out = dict(defaults)
    out.update(config)
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _check_strategy(tag: str) -> None:
    if tag not in STRATEGIES:
        raise ArgError(f"unknown strategy {tag!r}; valid tags are: {', '.join(STRATEGIES)}")


def _train_config(args, extra_keys: Sequence[str] = ()) -> tuple[TrainConfig, dict]:
    defaults = asdict(TrainConfig())
    defaults["corpus"] = default_corpus()
    file_cfg = _load_config(args.config, list(defaults) + list(extra_keys))
    merged = _merge(defaults, {k: v for k, v in file_cfg.items() if k in defaults}, args)
    _check_strategy(merged["strategy"])
    try:
        cfg = TrainConfig(**merged)
    except (TypeError, ValueError) as e:
        raise ArgError(str(e)) from None
    return cfg, file_cfg


def _prepare_out(path: Path, force: bool, names: Sequence[str]) -> None:
    clash = [n for n in names if (path / n).exists()]
    if clash and not force:
        raise DataError(f"{path} already holds {', '.join(clash)}; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _progress(args, every: int = 100):
    if args.quiet:
        return None

    def cb(entry):
        if entry.step % every == 0:
            print(f"step {entry.step:5d}  loss {entry.loss:.4f}  alpha {entry.alpha_t:.3f}  lr {entry.lr:.2e}", flush=True)

    return cb


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    file_cfg = _load_config(args.config, GEN_DEFAULTS)
    g = _merge(GEN_DEFAULTS, file_cfg, args)
    if g["users"] < 1:
        raise ArgError("--users must be >= 1")
    if g["archetypes"] < 1:
        raise ArgError("--archetypes must be >= 1")
    if g["sample_k"] < 1:
        raise ArgError("--sample-k must be >= 1")
    if not 0.0 <= g["noise"] <= 1.0:
        raise ArgError("--noise must lie in [0, 1]")
    out = Path(args.out) if args.out else data_root()
    files = [CORPUS_FILE, MANIFEST_FILE] + ([QA_FILE] if g["qa"] > 0 else [])
    _prepare_out(out, args.force, files)

    users = generate_corpus(g["users"], g["archetypes"], g["seed"], g["noise"])
    pairs = build_behavior_pairs(users, g["sample_k"], g["seed"])
    write_corpus(out / CORPUS_FILE, pairs)
    counts = {"users": len(users), "archetypes": g["archetypes"], "behavior_pairs": len(pairs)}
    names = {"corpus": CORPUS_FILE}
    if g["qa"] > 0:
        stats: dict = {}
        qcfg = QAConfig(calibration_size=max(g["qa"], 1), T_filter=g["t_filter"], scale_n=g["qa"], seed=g["seed"])
        qa = qa_pipeline(users, TemplateGenerator(), hashed_bow_embedder(seed=g["seed"]), qcfg, stats)
        write_corpus(out / QA_FILE, qa)
        counts.update(qa_pairs=len(qa), qa_calibration=stats["calibration"], qa_hard=stats["hard"])
        names["qa"] = QA_FILE
    CorpusManifest(
        seed=g["seed"],
        counts=counts,
        vocab=event_vocabulary(CorpusConfig().n_features),
        T_filter=g["t_filter"] if g["qa"] > 0 else None,
        files=names,
        params=g,
    ).write(out / MANIFEST_FILE)
    _say(args, f"wrote {len(pairs)} behavior pairs for {len(users)} users to {out / CORPUS_FILE}")
    if g["qa"] > 0:
        _say(args, f"wrote {counts['qa_pairs']} qa pairs ({counts['qa_hard']} hard in calibration) to {out / QA_FILE}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, _ = _train_config(args)
    pairs = load_pairs(cfg.corpus)
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.strategy}-s{cfg.seed}-{cfg.hash()[:8]}"
    _prepare_out(out, args.force, ["config.json", "loss.tsv", "checkpoint.npz", "run.json"])
    _say(args, json.dumps(cfg.to_dict(), sort_keys=True))
    record, _ = train(cfg, out, pairs, evaluate=not args.no_eval, on_step=_progress(args))
    if record.mean_auc is not None:
        _say(args, f"mean probe AUC {record.mean_auc:.4f}")
    _say(args, f"run {record.run_id} written to {out}")
    return EXIT_OK


def _parse_tasks(spec: str | None, n_tasks: int) -> list[int]:
    if spec is None:
        return list(range(n_tasks))
    try:
        ids = [int(x) for x in spec.split(",") if x.strip()]
    except ValueError:
        raise ArgError(f"--tasks expects comma-separated task indices, got {spec!r}") from None
    bad = [i for i in ids if not 0 <= i < n_tasks]
    if bad or not ids:
        raise ArgError(f"--tasks must name indices in [0, {n_tasks}), got {spec!r}")
    return sorted(set(ids))


def cmd_probe(args) -> int:
    if args.untrained:
        cfg, _ = _train_config(args)
        pairs = load_pairs(cfg.corpus)
        trainer = Trainer(cfg, pairs)
    else:
        if not args.checkpoint:
            raise ArgError("probe needs --checkpoint (or --untrained)")
        if not Path(args.checkpoint).exists():
            raise DataError(f"checkpoint not found: {args.checkpoint}")
        pairs = load_pairs(args.corpus) if args.corpus else None
        trainer = Trainer.from_checkpoint(args.checkpoint, pairs)
        pairs = trainer.pairs
        cfg = trainer.cfg
    n_tasks = len(pairs[0].labels)
    keep = _parse_tasks(args.tasks, n_tasks)
    tasks = [t for t in make_tasks([p.user_id for p in pairs], n_tasks, seed=cfg.seed) if t.task_id in keep]
    results, mean = evaluate_all(trainer.encoder, trainer.vocab, pairs, tasks, cfg.strategy, trainer.state.schedule)
    for r in results:
        _say(args, f"{r.name}\t{'skipped: ' + r.skipped if r.auc is None else format(r.auc, '.4f')}")
    _say(args, f"Avg\t{mean:.4f}")
    if args.out:
        write_results(args.out, cfg.strategy, results)
    return EXIT_OK


def _report_lines(rows: list[dict], n_tasks: int) -> list[str]:
    head = ["strategy", "status"] + [f"task{k}" for k in range(n_tasks)] + ["Avg", "final_loss", "config_hash"]
    lines = ["\t".join(head)]
    for r in rows:
        cells = [r["strategy"], r["status"]]
        if r["status"] == "ok":
            aucs = {res["task_id"]: res["auc"] for res in r["results"]}
            cells += ["skipped" if aucs.get(k) is None else repr(aucs[k]) for k in range(n_tasks)]
            cells += [repr(r["mean_auc"]), repr(r["final_loss"])]
        else:
            cells += ["-"] * (n_tasks + 2)
        cells.append(r["config_hash"])
        lines.append("\t".join(cells))
    return lines


def cmd_compare(args) -> int:
    cfg, file_cfg = _train_config(args, extra_keys=("strategies",))
    raw = args.strategies or file_cfg.get("strategies") or ",".join(COMPARE_DEFAULT)
    strategies = [s.strip() for s in (raw.split(",") if isinstance(raw, str) else raw) if s.strip()]
    for s in strategies:
        _check_strategy(s)
    if len(set(strategies)) != len(strategies):
        raise ArgError("--strategies lists a tag twice")
    pairs = load_pairs(cfg.corpus)
    out = Path(args.out) if args.out else Path("runs") / "compare"
    _prepare_out(out, args.force, ["report.tsv", "compare_config.json"])
    snapshot = {k: v for k, v in cfg.to_dict().items() if k != "strategy"}
    snapshot["strategies"] = strategies
    _write_json(out / "compare_config.json", snapshot)
    shared_hash = cfg.hash(exclude=("strategy",))
    n_tasks = len(pairs[0].labels)
    rows = []
    failed = False
    for s in strategies:
        run_cfg = TrainConfig(**{**cfg.to_dict(), "strategy": s})
        _say(args, f"== {s}")
        row = {"strategy": s, "config_hash": run_cfg.hash(exclude=("strategy",))}
        try:
            record, trainer = train(run_cfg, out / s, pairs, on_step=_progress(args))
        except (NumericFailure, ArithmeticError, ValueError) as e:
            logger.error("strategy %s failed: %s", s, e)
            row["status"] = "failed"
            failed = True
        else:
            losses = trainer.state.losses
            row.update(status="ok", results=record.probe_results, mean_auc=record.mean_auc, final_loss=smoothed(losses))
            write_loss_log(out / f"loss_{s}.tsv", trainer.state.log)
        assert row["config_hash"] == shared_hash
        rows.append(row)
    lines = _report_lines(rows, n_tasks)
    (out / "report.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for line in lines:
        _say(args, line)
    return EXIT_NUMERIC if failed else EXIT_OK


def _embedder_for(args):
    if not args.checkpoint:
        return hashed_bow_embedder(seed=args.seed if args.seed is not None else 0)
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    tr = Trainer.from_checkpoint(args.checkpoint)
    return encoder_embedder(tr.encoder, tr.vocab, tr.cfg.strategy, tr.state.schedule)


def cmd_score(args) -> int:
    pairs = read_corpus(args.pairs)
    if not args.out:
        raise ArgError("score needs --out for the scored pair file")
    out = Path(args.out)
    if out.exists() and not args.force:
        raise DataError(f"{out} exists; pass --force to overwrite")
    emb = _embedder_for(args)
    scores = [difficulty_score(p, emb) for p in pairs]
    write_corpus(out, pairs)
    if scores:
        _say(args, f"scored {len(scores)} pairs; mean difficulty {float(np.mean(scores)):.4f}")
    return EXIT_OK


def cmd_filter(args) -> int:
    pairs = read_corpus(args.pairs)
    if not args.out:
        raise ArgError("filter needs --out for the kept pairs")
    out = Path(args.out)
    if out.exists() and not args.force:
        raise DataError(f"{out} exists; pass --force to overwrite")
    try:
        kept = filter_hard(pairs, args.t_filter)
    except ValueError as e:
        raise DataError(str(e)) from None
    write_corpus(out, kept)
    _say(args, f"kept {len(kept)} of {len(pairs)} pairs with difficulty >= {args.t_filter}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ARGS, f"{self.prog}: error: {message}\n")


_FLAG_TYPES = {"int": int, "float": float, "str": str}


def _add_train_flags(p: argparse.ArgumentParser, skip: Sequence[str] = ("seed",)) -> None:
    for f in fields(TrainConfig):
        if f.name in skip:
            continue
        kind = _FLAG_TYPES.get(str(f.type).split(" |")[0], str)
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None)


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags without defaults so that a flag
    # given before the subcommand name is not reset by the subparser
    def d(v):
        return argparse.SUPPRESS if suppress else v

    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=d(None))
    p.add_argument("--config", default=d(None), help="JSON file of settings (flags override it)")
    p.add_argument("--out", default=d(None))
    p.add_argument("--force", action="store_true", default=d(False), help="overwrite existing outputs")
    p.add_argument("--quiet", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    ap = _Parser(prog="maskbench", description=__doc__.split("\n")[0], parents=[_global_flags(suppress=False)])
    ap.add_argument("--version", action="version", version=f"maskbench {__version__}")
    sp = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sp.add_parser("gen", parents=[common], help="generate the synthetic corpus and manifest")
    g.add_argument("--users", type=int, default=None)
    g.add_argument("--archetypes", type=int, default=None)
    g.add_argument("--noise", type=float, default=None)
    g.add_argument("--sample-k", dest="sample_k", type=int, default=None)
    g.add_argument("--qa", type=int, default=None, help="number of QA pairs to synthesise (0 = none)")
    g.add_argument("--t-filter", dest="t_filter", type=float, default=None)
    g.set_defaults(func=cmd_gen)

    t = sp.add_parser("train", parents=[common], help="train one strategy and probe it")
    _add_train_flags(t)
    t.add_argument("--no-eval", action="store_true", help="skip the probe after training")
    t.set_defaults(func=cmd_train)

    p = sp.add_parser("probe", parents=[common], help="probe a checkpoint without retraining")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--untrained", action="store_true", help="probe a fresh initialisation instead")
    p.add_argument("--tasks", default=None, help="comma-separated task indices")
    _add_train_flags(p)
    p.set_defaults(func=cmd_probe)

    c = sp.add_parser("compare", parents=[common], help="train several strategies under one config")
    c.add_argument("--strategies", default=None, help=f"comma-separated tags (default {','.join(COMPARE_DEFAULT)})")
    _add_train_flags(c, skip=("seed", "strategy"))
    c.set_defaults(func=cmd_compare)

    s = sp.add_parser("score", parents=[common], help="attach hard-to-align scores to a pair file")
    s.add_argument("pairs")
    s.add_argument("--checkpoint", default=None, help="embed with a trained encoder instead of hashed bag-of-tokens")
    s.set_defaults(func=cmd_score)

    f = sp.add_parser("filter", parents=[common], help="keep scored pairs at or above T_filter")
    f.add_argument("pairs")
    f.add_argument("--t-filter", dest="t_filter", type=float, default=0.6)
    f.set_defaults(func=cmd_filter)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ArgError as e:
        print(f"maskbench: error: {e}", file=sys.stderr)
        return EXIT_ARGS
    except (DataError, CorpusFormatError, CheckpointError, RenderError, FileNotFoundError, IsADirectoryError) as e:
        print(f"maskbench: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, ArithmeticError) as e:
        print(f"maskbench: numeric failure: {e}", file=sys.stderr)
        diag = getattr(e, "diagnostics", None)
        if diag:
            print(json.dumps(diag, sort_keys=True, default=str), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
