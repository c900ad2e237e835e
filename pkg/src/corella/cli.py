"""``corella`` command line: prepare-data, train, evaluate, route-analyze, ablate."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import metrics
from .checkpoint import CheckpointError, collect, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, write_resolved
from .data import (
    DataFormatError, LoadReport, PreparedData, chronological_split, generate_synthetic,
    load_amazon_books, load_movielens, load_prepared, prepare, save_prepared,
)
from .data.io import ProcessedFormatError
from .router import confidence_groups, entropy, mixup_inference, write_group_report
from .training import (
    DivergenceError, Encoded, RunLog, build_models, resolve_router, run_ablation,
    train_pipeline, write_ablation_report,
)

log = logging.getLogger("corella")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4
MODEL_CKPT = "model.ckpt"
STAGE1_CKPT = "crm_stage1.ckpt"


class MissingData(Exception):
    pass


def load_data(cfg: RunConfig) -> PreparedData:
    d = cfg.data
    if d.prepared:
        if not Path(d.prepared, "train.jsonl").exists():
            raise MissingData(f"no prepared data under {d.prepared}")
        return load_prepared(d.prepared)
    if cfg.dataset == "synthetic":
        split = generate_synthetic(cfg.synthetic)
    else:
        if not d.path or not Path(d.path).exists():
            raise MissingData(f"{cfg.dataset} data path {d.path!r} not found")
        report = LoadReport()
        if cfg.dataset == "movielens":
            rows = load_movielens(d.path, report)
        else:
            if d.meta and not Path(d.meta).exists():
                raise MissingData(f"metadata file {d.meta!r} not found")
            rows = load_amazon_books(d.path, d.meta, report)
        log.info("loaded %d interactions (%s)", len(rows), report)
        split = chronological_split(rows)
    return prepare(split, cfg.data.history_length, cfg.data.max_sequence_length)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    return out


def _row(name: str, labels, probs) -> dict:
    if len(labels) == 0:
        return {"scorer": name, "auc": None, "logloss": None, "acc": None, "n": 0, "positives": 0}
    return {"scorer": name, **asdict(metrics.evaluate(labels, probs))}


def _load_models(cfg: RunConfig, data: PreparedData, checkpoint):
    path = Path(checkpoint) if checkpoint else Path(cfg.out) / MODEL_CKPT
    if not path.exists():
        raise MissingData(f"checkpoint {path} not found; run train first")
    state, _ = load_checkpoint(path)
    crm, llm, heads = build_models(data, cfg.model, cfg.seed)
    crm.load_state({k: v for k, v in state.items() if k.startswith(crm.prefix)})
    llm.load_state({k: v for k, v in state.items() if k.startswith(llm.prefix)})
    return crm, llm


def cmd_prepare(cfg: RunConfig, args) -> dict:
    out = _out(cfg)
    data = load_data(cfg)
    save_prepared(data, out / "prepared")
    return {"prepared": str(out / "prepared"),
            "sizes": [len(data.train), len(data.valid), len(data.test)]}


def cmd_train(cfg: RunConfig, args) -> dict:
    out = _out(cfg)
    data = load_data(cfg)
    enc = Encoded.from_prepared(data)
    runlog = RunLog(out / "runlog.jsonl")
    try:
        res = train_pipeline(data, enc, cfg.model, cfg.plan(), runlog)
    finally:
        runlog.close()
    meta = {"dataset": cfg.dataset, "vocab_sha256": data.vocab.digest(),
            "tokenizer_sha256": data.tokenizer.digest()}
    m = save_checkpoint(out / MODEL_CKPT, collect(res.crm, res.llm, res.heads), cfg.seed, meta)
    s1 = save_checkpoint(out / STAGE1_CKPT, collect(res.crm_stage1), cfg.seed, meta)
    with open(out / "stage2.json", "w") as fh:
        json.dump(asdict(res.stage2), fh, indent=2)
    with open(out / "subsets.json", "w") as fh:
        json.dump({"stage2": res.plan.subset2_ids, "stage3": res.plan.subset3_ids}, fh)
    return {"checkpoint": str(out / MODEL_CKPT), "content_sha256": m["content_sha256"],
            "stage1_sha256": s1["content_sha256"], "best_val_auc": res.stage2.best_val_auc}


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    out = _out(cfg)
    data = load_data(cfg)
    enc = Encoded.from_prepared(data)
    crm, llm = _load_models(cfg, data, args.checkpoint)
    router = resolve_router(cfg.router, crm, enc.valid)
    mix = mixup_inference(crm, llm, enc.test, router)
    y = enc.test.labels
    rows = [_row("crm-only", y, mix.y_crm),
            _row("llm-only-on-routed", y[mix.routed], mix.y_llm[mix.routed]),
            _row("corella", y, mix.y_final)]
    with open(out / "eval.json", "w") as fh:
        json.dump({"router": asdict(router), "llm_calls": mix.llm_calls, "rows": rows}, fh,
                  indent=2, sort_keys=True)
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["scorer", "auc", "logloss", "acc", "n", "positives"],
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("undefined" if v is None else v) for k, v in r.items()})
    return {"rows": rows, "llm_calls": mix.llm_calls}


def cmd_route_analyze(cfg: RunConfig, args) -> dict:
    out = _out(cfg)
    data = load_data(cfg)
    enc = Encoded.from_prepared(data)
    crm, llm = _load_models(cfg, data, args.checkpoint)
    y_crm = crm.predict(enc.test.ids)
    y_llm = llm.predict(enc.test.tokens, enc.test.lengths)
    rows = confidence_groups(np.atleast_1d(entropy(y_crm)), enc.test.labels,
                             {"crm": y_crm, "llm": y_llm}, k=args.groups,
                             sample_ids=enc.test.sample_ids)
    write_group_report(rows, out / "groups.csv", out / "groups.json")
    return {"groups_csv": str(out / "groups.csv"), "rows": rows}


def cmd_ablate(cfg: RunConfig, args) -> dict:
    out = _out(cfg)
    data = load_data(cfg)
    enc = Encoded.from_prepared(data)
    runlog = RunLog(out / "runlog.jsonl")
    try:
        res = run_ablation(data, enc, cfg.model, cfg.plan(), cfg.router, runlog=runlog)
    finally:
        runlog.close()
    write_ablation_report(res, out / "ablation.csv", out / "ablation.json", dataset=cfg.dataset)
    return {"report": str(out / "ablation.csv"), "rows": [asdict(r) for r in res.rows]}


COMMANDS = {
    "prepare-data": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "route-analyze": cmd_route_analyze,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corella", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key by dotted path (repeatable)")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--seed", type=int, help="run seed (overrides config 'seed')")
        p.add_argument("--quiet", action="store_true", help="only print the result object")
        if name in ("evaluate", "route-analyze"):
            p.add_argument("--checkpoint", help=f"model checkpoint (default OUT/{MODEL_CKPT})")
        if name == "route-analyze":
            p.add_argument("--groups", type=int, default=3)
    return parser


def _fail(code: int, kind: str, err: Exception) -> int:
    print(json.dumps({"error": kind, "message": str(err), "exit_code": code}), file=sys.stderr)
    return code


def _thread_limit():
    from threadpoolctl import threadpool_limits
    raw = os.environ.get("CORELLA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CORELLA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("CORELLA_THREADS must be >= 1")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        overrides = list(args.set)
        if args.out:
            overrides.append(f"out={json.dumps(args.out)}")
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        with _thread_limit():
            result = COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, "config", e)
    except (MissingData, FileNotFoundError, DataFormatError, ProcessedFormatError,
            CheckpointError) as e:
        return _fail(EXIT_DATA, "data", e)
    except DivergenceError as e:
        return _fail(EXIT_DIVERGED, "divergence", e)
    except Exception as e:  # noqa: BLE001 - reported as a machine-readable object
        log.exception("command failed")
        return _fail(EXIT_ERROR, type(e).__name__, e)
    print(json.dumps({"command": args.command, "status": "ok", **result}, default=str,
                     sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
