"""Batch command-line entry points for reproducible pipeline runs.

Subcommands: gen-data, mine-refs, train, eval, ablate, report. Every command
writes exactly one manifest (inputs hashed, outputs listed) into its output
directory. Exit codes: 0 success, 2 usage or configuration error, 3 runtime
failure; error lines on stderr are prefixed with ERROR:.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import annotate, data, evaluation, mining, training
from .encoder import desk_config, paper_config

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config is not valid JSON: {e}")
    if not isinstance(obj, dict):
        raise UsageError("config must be a JSON object")
    return obj


def _build_from_config(cls, obj: dict, what: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise UsageError(f"unknown {what} config keys: {', '.join(unknown)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad {what} config: {e}")


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _manifest(out_dir: Path, command: str, args: argparse.Namespace,
              inputs: dict[str, Path], outputs: list[Path],
              started: str, status: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_path": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "input_hashes": {name: _sha256_file(p) for name, p in inputs.items()},
        "output_paths": [str(p) for p in outputs],
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "exit_status": status,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1))


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    started = _now()
    cfg_obj = _read_config(args.config)
    cfg_obj.setdefault("seed", args.seed)
    cfg = _build_from_config(data.DatasetConfig, cfg_obj, "dataset")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = data.build_dataset(cfg)
    ds_path = out / "dataset.jsonl"
    data.write_jsonl(dataset, ds_path)
    lexicon = annotate.discover_concepts([ex.question for ex in dataset.examples])
    lex_path = out / "lexicon.json"
    lex_path.write_text(json.dumps(lexicon.to_json(), sort_keys=True))
    split = evaluation.build_novel_splits(dataset, seed=cfg.seed)
    split_path = out / "split.json"
    split.write_json(split_path)
    _manifest(out, "gen-data", args, {}, [ds_path, lex_path, split_path],
              started, EXIT_OK)
    print(f"wrote {len(dataset)} examples to {ds_path}")
    return EXIT_OK


def cmd_mine_refs(args) -> int:
    started = _now()
    ds_path = _require(args.dataset, "dataset")
    dataset = data.read_jsonl(ds_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = _read_config(args.config)
    allowed = {"n_pos", "n_neg", "n_skill_pos", "n_skill_neg"}
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise UsageError(f"unknown mining config keys: {', '.join(unknown)}")
    cache = mining.mine_reference_cache(dataset, seed=args.seed,
                                        mode=args.mode, **cfg)
    cache_path = out / "refs.jsonl"
    cache.write_jsonl(cache_path)
    if args.verify:
        _verify_cache(dataset, cache, args.seed, args.mode, args.verify, cfg)
    _manifest(out, "mine-refs", args, {"dataset": ds_path}, [cache_path],
              started, EXIT_OK)
    print(f"wrote {len(cache)} reference entries to {cache_path}")
    return EXIT_OK


def _verify_cache(dataset, cache, seed: int, mode: str, n: int,
                  cfg: dict) -> None:
    """Rebuild candidates for n random cached targets and compare."""
    if mode != "ccc":
        raise UsageError("--verify only applies to ccc mining")
    ctx = mining.MiningContext(dataset, seed=seed)
    rng = np.random.default_rng(data.derive_seed(seed, "verify"))
    ids = sorted(cache.entries)
    picks = rng.choice(ids, size=min(n, len(ids)), replace=False)
    g_kw = {k: v for k, v in cfg.items() if k in ("n_pos", "n_neg")}
    s_kw = {"n_pos": cfg.get("n_skill_pos", mining.N_SKILL_POS),
            "n_neg": cfg.get("n_skill_neg", mining.N_SKILL_NEG)}
    for tid in picks:
        entry = cache.entries[int(tid)]
        g = mining.build_grounding_candidates(ctx, int(tid), **g_kw)
        s = mining.build_skill_candidates(ctx, int(tid), **s_kw)
        ok = (g is not None and g.positives == entry.positives
              and g.negatives_text == entry.negatives_text
              and g.negatives_visual == entry.negatives_visual
              and s.positives == entry.skill_positives
              and s.negatives == entry.skill_negatives)
        if not ok:
            raise RuntimeError(f"cache verification failed for target {tid}")
    print(f"verified {len(picks)} targets against fresh mining")


def _train_config(args) -> training.TrainConfig:
    cfg_obj = _read_config(args.config)
    if args.preset == "paper":
        base = training.paper_train_config()
    else:
        base = training.desk_train_config()
    merged = base.to_json()
    enc = merged.pop("encoder")
    enc.update(cfg_obj.pop("encoder", {}))
    merged.update(cfg_obj)
    merged["encoder"] = enc
    if args.p_sep is not None:
        merged["p_sep"] = args.p_sep
    if args.seed is not None:
        merged["seed"] = args.seed
    return _build_from_config(training.TrainConfig, merged, "training")


def _load_split(args, dataset) -> evaluation.NovelSplit:
    if args.split:
        return evaluation.NovelSplit.read_json(_require(args.split, "split"))
    return evaluation.build_novel_splits(dataset, seed=args.seed or 0)


def cmd_train(args) -> int:
    started = _now()
    ds_path = _require(args.dataset, "dataset")
    dataset = data.read_jsonl(ds_path)
    split = _load_split(args, dataset)
    cfg = _train_config(args)
    inputs = {"dataset": ds_path}
    cache = None
    if cfg.p_sep > 0:
        refs_path = _require(args.refs, "reference cache") if args.refs else None
        if refs_path is None:
            raise UsageError("training with p_sep > 0 requires --refs")
        cache = mining.ReferenceCache.read_jsonl(refs_path)
        inputs["refs"] = refs_path
    if args.split:
        inputs["split"] = Path(args.split)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stripped = evaluation.apply_split(dataset, split)
    pool = split.labeled_ids + split.unlabeled_ids
    state = training.load_checkpoint(_require(args.resume, "checkpoint")) \
        if args.resume else None
    if state is not None:
        state.config = cfg
    state, history = training.train(cfg, stripped, split.labeled_ids, pool,
                                    cache, state=state,
                                    log_path=out / "log.jsonl")
    ckpt = out / "checkpoint.bin"
    training.save_checkpoint(state, ckpt)
    (out / "history.json").write_text(json.dumps(history, indent=1))
    label = "base" if cfg.p_sep == 0 else "full"
    (out / "run.json").write_text(json.dumps(
        {"model": label, "config": cfg.to_json()}, sort_keys=True, indent=1))
    _manifest(out, "train", args, inputs,
              [ckpt, Path(str(ckpt) + ".json"), out / "history.json"],
              started, EXIT_OK)
    print(f"trained {state.epoch} epochs ({state.step} steps); "
          f"checkpoint at {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = _now()
    ckpt_path = _require(args.checkpoint, "checkpoint")
    ds_path = _require(args.dataset, "dataset")
    dataset = data.read_jsonl(ds_path)
    split = _load_split(args, dataset)
    state = training.load_checkpoint(ckpt_path)
    gold = evaluation.gold_answers(dataset, split.test_ids)
    run = evaluation.evaluate_run(state, dataset, split, gold,
                                  config_name="eval", seed=state.config.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.json"
    report = {
        "overall_accuracy": run.overall_accuracy,
        "slice_accuracy": run.slice_accuracy,
        "recall_at_5": run.recall_at_5,
        "slice_sizes": {s.name: len(split.test_ids_for_slice(j))
                        for j, s in enumerate(split.slices)},
        "metric": "exact match",
    }
    report_path.write_text(json.dumps(report, sort_keys=True, indent=1))
    inputs = {"checkpoint": ckpt_path, "dataset": ds_path}
    if args.split:
        inputs["split"] = Path(args.split)
    _manifest(out, "eval", args, inputs, [report_path], started, EXIT_OK)
    print(f"overall accuracy {run.overall_accuracy:.2f}, "
          f"recall@5 {run.recall_at_5:.2f}")
    return EXIT_OK


def _ablate_cell(payload):
    """Worker for one (config name, seed) ablation cell."""
    (ds_path, split_json, name, seed, template_json) = payload
    dataset = data.read_jsonl(ds_path)
    split = evaluation.NovelSplit.from_json(split_json)
    template = training.TrainConfig.from_json(template_json)
    result = evaluation.run_ablation(dataset, split, [seed],
                                     template=template, config_names=[name],
                                     log_progress=False)
    return result.runs[0]


def cmd_ablate(args) -> int:
    started = _now()
    ds_path = _require(args.dataset, "dataset")
    dataset = data.read_jsonl(ds_path)
    split = _load_split(args, dataset)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    if not seeds:
        raise UsageError("need at least one seed")
    template = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.jobs > 1:
        import multiprocessing
        payloads = [(str(ds_path), split.to_json(), name, seed,
                     template.to_json())
                    for name in evaluation.ABLATION_CONFIGS for seed in seeds]
        with multiprocessing.Pool(args.jobs) as pool:
            runs = pool.map(_ablate_cell, payloads)
        result = evaluation.AblationResult(runs=list(runs), input_hashes={
            "dataset": evaluation.dataset_hash(dataset),
            "split": evaluation.split_hash(split)})
    else:
        result = evaluation.run_ablation(dataset, split, seeds,
                                         template=template)
    json_path = out / "ablation.json"
    result.write_json(json_path)
    table_path = out / "table.txt"
    table = evaluation.format_ablation_table(result)
    table_path.write_text(table + "\n")
    inputs = {"dataset": ds_path}
    if args.split:
        inputs["split"] = Path(args.split)
    _manifest(out, "ablate", args, inputs, [json_path, table_path],
              started, EXIT_OK)
    print(table)
    return EXIT_OK


def cmd_report(args) -> int:
    started = _now()
    root = _require(args.dir, "report directory")
    found = sorted(root.rglob("ablation.json")) + sorted(root.rglob("report.json"))
    if not found:
        raise UsageError(f"no ablation.json or report.json under {root}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sections = []
    for path in found:
        sections.append(f"== {path} ==")
        if path.name == "ablation.json":
            result = evaluation.AblationResult.read_json(path)
            sections.append(evaluation.format_ablation_table(result))
        else:
            obj = json.loads(path.read_text())
            sections.append(json.dumps(obj, sort_keys=True, indent=1))
        sections.append("")
    combined = "\n".join(sections)
    combined_path = out / "combined.txt"
    combined_path.write_text(combined)
    _manifest(out, "report", args,
              {str(p.relative_to(root)): p for p in found},
              [combined_path], started, EXIT_OK)
    print(combined)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument wiring
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scvqa",
                     description="synthetic VQA skill-concept pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("mine-refs", help="mine contrastive reference sets")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=["ccc", "random"], default="ccc")
    p.add_argument("--verify", type=int, default=0, metavar="N",
                   help="re-verify N random targets after mining")
    p.set_defaults(func=cmd_mine_refs)

    p = sub.add_parser("train", help="train one model")
    common(p, seed_default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--refs", default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--preset", choices=["paper", "desk"], default="desk")
    p.add_argument("--p-sep", type=float, default=None, dest="p_sep")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the loss/reference ablation table")
    common(p, seed_default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--preset", choices=["paper", "desk"], default="desk")
    p.add_argument("--p-sep", type=float, default=None, dest="p_sep")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="aggregate reports into one table")
    common(p)
    p.add_argument("--dir", required=True, help="directory to scan")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:   # runtime failure: report and exit 3
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
