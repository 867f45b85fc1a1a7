"""The ``medcascade`` command: ingest -> preprocess -> variants -> train -> report.

Every subcommand is idempotent: it hashes its inputs, records the hash in a
state sidecar next to its outputs, and short-circuits when nothing changed.
All writes are atomic (temp + rename).  Exit codes: 0 success, 1 user error,
2 internal error; failures print one machine-parseable ``Category: message``
line on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import re
import sys
from dataclasses import replace

from . import __version__
from .config import PipelineConfig, load_config
from .corpus import (CorpusManifest, load_corpus, manifest_path_for, scrub_records,
                     stratified_split, write_corpus)
from .encoder import resolve_encoder
from .errors import MedcascadeError, MissingUpstreamArtifact, UserError
from .evaluator import ReportCell, TaskScores, evaluate, prediction_dump, render_report
from .gateway import build_gateway
from .lora import save_adapter_set
from .preprocess import BundleStore, PromptLibrary, run_bundle
from .trainer import MultiTaskModel, run_manifest, train
from .variants import CONDITIONS, build_variant, load_variant, variant_paths, write_variant

SPLITS = ("train", "val", "test")


# -- shared helpers ------------------------------------------------------------

def _hash_inputs(*parts) -> str:
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, (bytes, bytearray)):
            h.update(part)
        elif isinstance(part, str) and os.path.isfile(part):
            with open(part, "rb") as fh:
                h.update(fh.read())
        else:
            h.update(json.dumps(part, sort_keys=True, default=str).encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def _up_to_date(state_path: str, input_hash: str, outputs: list[str]) -> bool:
    if not os.path.exists(state_path) or not all(os.path.exists(p) for p in outputs):
        return False
    with open(state_path, encoding="utf-8") as fh:
        return json.load(fh).get("input_hash") == input_hash


def _write_state(state_path: str, input_hash: str) -> None:
    _atomic_write(state_path, json.dumps({"input_hash": input_hash}) + "\n")


def _atomic_write(path: str, payload: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _require(path: str, produced_by: str) -> str:
    if not os.path.exists(path):
        raise MissingUpstreamArtifact(f"{path} not found; run `medcascade {produced_by}` first")
    return path


def _split_path(cfg: PipelineConfig, part: str) -> str:
    return os.path.join(cfg.splits_dir(), f"{part}.jsonl")


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", name)


def _load_split_records(cfg: PipelineConfig, part: str):
    path = _require(_split_path(cfg, part), "ingest")
    return load_corpus(path)


# -- subcommands ---------------------------------------------------------------

def cmd_ingest(cfg: PipelineConfig, args) -> int:
    if not os.path.exists(cfg.corpus):
        raise MissingUpstreamArtifact(f"corpus {cfg.corpus} not found")
    split_cfg = {"ratios": list(cfg.split.ratios), "seed": cfg.split.seed,
                 "stratify_task": cfg.split.stratify_task}
    input_hash = _hash_inputs(cfg.corpus, manifest_path_for(cfg.corpus), split_cfg)
    state = os.path.join(cfg.splits_dir(), ".state.json")
    outputs = [_split_path(cfg, part) for part in SPLITS]
    if _up_to_date(state, input_hash, outputs):
        print("ingest: up to date")
        return 0

    records, manifest = load_corpus(cfg.corpus, cfg.corpus_format)
    records = scrub_records(records)
    parts = stratified_split(records, cfg.split.ratios, cfg.split.seed,
                             stratify_task=cfg.split.stratify_task)
    os.makedirs(cfg.splits_dir(), exist_ok=True)
    for part_name, part_records in zip(SPLITS, parts):
        part_manifest = CorpusManifest(
            vocab=manifest.vocab, record_count=len(part_records),
            split={**split_cfg, "part": part_name})
        write_corpus(_split_path(cfg, part_name), part_records, part_manifest)
    _write_state(state, input_hash)
    sizes = "/".join(str(len(p)) for p in parts)
    print(f"ingest: {len(records)} records scrubbed and split {sizes} "
          f"into {cfg.splits_dir()}")
    return 0


def cmd_preprocess(cfg: PipelineConfig, args) -> int:
    split_paths = [_require(_split_path(cfg, part), "ingest") for part in SPLITS]
    backend = args.backend or cfg.gateway.backend
    prompts = PromptLibrary()
    gw_cfg = replace(cfg.gateway, backend=backend, cache_dir=cfg.cache_dir())
    input_hash = _hash_inputs(*split_paths, backend,
                              prompts.hashes("sentinel"), prompts.hashes("instruct"))
    state = os.path.join(cfg.bundles_dir(), ".state.json")
    if _up_to_date(state, input_hash, [cfg.bundles_dir()]):
        print("preprocess: up to date (0 gateway calls)")
        return 0

    records = []
    for part in SPLITS:
        part_records, _ = _load_split_records(cfg, part)
        records.extend(part_records)
    gw = build_gateway(gw_cfg)
    store = BundleStore(cfg.bundles_dir())
    bundles = run_bundle(records, gw, resume=args.resume, store=store,
                         backend_id=gw_cfg.backend, prompts=prompts)
    _write_state(state, input_hash)
    print(f"preprocess: {len(bundles)} bundles in {cfg.bundles_dir()} "
          f"({gw.backend_calls} gateway calls, {gw.cache_hits} cache hits)")
    return 0


def cmd_variants(cfg: PipelineConfig, args) -> int:
    conditions = tuple(args.condition) if args.condition else CONDITIONS
    for condition in conditions:
        if condition not in CONDITIONS:
            raise UserError(f"unknown condition {condition!r}, expected one of {CONDITIONS}")
    split_paths = [_require(_split_path(cfg, part), "ingest") for part in SPLITS]
    store = BundleStore(cfg.bundles_dir())
    if any(c != "normal" for c in conditions):
        _require(os.path.join(cfg.bundles_dir(), ".state.json"), "preprocess")
    input_hash = _hash_inputs(*split_paths, store.store_hash(), sorted(conditions))
    state = os.path.join(cfg.variants_dir(), ".state.json")
    outputs = [variant_paths(cfg.variants_dir(), c, part)[0]
               for c in conditions for part in SPLITS]
    if _up_to_date(state, input_hash, outputs):
        print("variants: up to date")
        return 0

    total = 0
    for part in SPLITS:
        part_records, _ = _load_split_records(cfg, part)
        for condition in conditions:
            variant = build_variant(part_records, store, condition)
            write_variant(variant, cfg.variants_dir(), part)
            total += len(variant)
    _write_state(state, input_hash)
    print(f"variants: wrote {len(conditions)} condition(s) x {len(SPLITS)} splits "
          f"({total} examples) into {cfg.variants_dir()}")
    return 0


def cmd_train(cfg: PipelineConfig, args) -> int:
    model_id = args.model or cfg.model.backend_id
    condition = args.condition
    fine_tuned = not args.no_finetune
    arm = "finetuned" if fine_tuned else "frozen"
    needed = SPLITS if fine_tuned else ("test",)
    variant_files = []
    for part in needed:
        data_path, _ = variant_paths(cfg.variants_dir(), condition, part)
        variant_files.append(_require(data_path, "variants"))
    manifest_path = _require(manifest_path_for(_split_path(cfg, "train")), "ingest")
    with open(manifest_path, encoding="utf-8") as fh:
        vocab = CorpusManifest.from_json(json.load(fh)).vocab

    cell = f"{_slug(model_id)}__{condition}__{arm}"
    cell_dir = os.path.join(cfg.runs_dir(), cell)
    relevant_cfg = {"adapter": cfg.to_json()["adapter"], "train": cfg.to_json()["train"],
                    "model": cfg.to_json()["model"], "arm": arm}
    input_hash = _hash_inputs(*variant_files, relevant_cfg)
    state = os.path.join(cell_dir, ".state.json")
    if _up_to_date(state, input_hash, [os.path.join(cell_dir, "scores.json")]):
        print(f"train[{cell}]: up to date")
        return 0

    encoder = resolve_encoder(model_id, weights_dir=cfg.model.weights_dir,
                              seed=cfg.model.seed, pooling=cfg.model.pooling,
                              **cfg.model.toy)
    train_cfg = cfg.train
    os.makedirs(cell_dir, exist_ok=True)
    result = None
    if fine_tuned:
        adapters = encoder.build_adapters(cfg.adapter.rank, cfg.adapter.alpha,
                                          cfg.adapter.dropout, cfg.adapter.seed,
                                          patterns=cfg.adapter.targets)
        encoder.attach_adapters(adapters)
        model = MultiTaskModel.build(encoder, vocab, tasks=train_cfg.tasks,
                                     head_seed=cfg.model.head_seed)
        train_variant = load_variant(cfg.variants_dir(), condition, "train")
        val_variant = load_variant(cfg.variants_dir(), condition, "val")
        result = train(model, train_variant, val_variant, train_cfg)
        model.restore(result.best_params)
        _atomic_write(os.path.join(cell_dir, "trainlog.csv"), result.log.to_csv())
    else:
        model = MultiTaskModel.build(encoder, vocab, tasks=train_cfg.tasks,
                                     head_seed=cfg.model.head_seed)

    test_variant = load_variant(cfg.variants_dir(), condition, "test")
    scores = evaluate(model, test_variant, tasks=train_cfg.tasks)

    save_adapter_set(os.path.join(cell_dir, "checkpoint.npz"), model.encoder.adapters,
                     heads=model.heads,
                     extra_meta={"model_id": model_id, "condition": condition, "arm": arm})
    _atomic_write(os.path.join(cell_dir, "predictions.jsonl"),
                  prediction_dump(model, test_variant, tasks=train_cfg.tasks))
    scores_payload = {
        "model_id": model_id, "condition": condition, "fine_tuned": fine_tuned,
        "best_epoch": result.best_epoch if result else None,
        "tasks": {t: s.to_json() for t, s in scores.items()},
    }
    _atomic_write(os.path.join(cell_dir, "scores.json"),
                  json.dumps(scores_payload, ensure_ascii=False, sort_keys=True, indent=2) + "\n")
    _atomic_write(os.path.join(cell_dir, "manifest.json"), run_manifest(train_cfg, {
        "pipeline_config": cfg.to_json(), "model_id": model_id, "condition": condition,
        "arm": arm, "input_hash": input_hash,
        "steps_taken": result.steps_taken if result else 0,
        "best_epoch": result.best_epoch if result else None,
        "trainable_parameters": model.trainable_count(),
    }))
    _write_state(state, input_hash)
    summary = ", ".join(f"{t} {s.accuracy:.3f}" for t, s in sorted(scores.items()))
    print(f"train[{cell}]: test accuracy {summary}")
    return 0


def cmd_report(cfg: PipelineConfig, args) -> int:
    runs_dir = cfg.runs_dir()
    _require(runs_dir, "train")
    cells = []
    for entry in sorted(os.listdir(runs_dir)):
        scores_path = os.path.join(runs_dir, entry, "scores.json")
        if not os.path.isfile(scores_path):
            continue
        with open(scores_path, encoding="utf-8") as fh:
            data = json.load(fh)
        cells.append(ReportCell(
            model_id=data["model_id"], condition=data["condition"],
            fine_tuned=data["fine_tuned"],
            tasks={t: TaskScores(**{k: v for k, v in s.items()})
                   for t, s in data["tasks"].items()}))
    if not cells:
        raise MissingUpstreamArtifact(f"no scores.json under {runs_dir}; run `medcascade train`")
    json_path, md_path = render_report(cells, cfg.reports_dir())
    print(f"report: {len(cells)} cell(s) -> {json_path}, {md_path}")
    return 0


# -- entry point -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage mistakes are user errors: exit 1, single parseable line."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"UsageError: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="medcascade",
        description="LLM-preprocessed Arabic complaint classification pipeline")
    parser.add_argument("--version", action="version", version=f"medcascade {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="pipeline config JSON file")
        p.add_argument("--workdir", help="override workdir")
        p.add_argument("--corpus", help="override corpus path")

    p = sub.add_parser("ingest", help="load, scrub, and split the corpus")
    common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("preprocess", help="run the three LLM layers over all records")
    common(p)
    p.add_argument("--backend", choices=("mock", "openai", "llama"),
                   help="gateway backend override")
    p.add_argument("--resume", action="store_true",
                   help="skip records whose bundle already exists")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("variants", help="build evaluation-condition datasets")
    common(p)
    p.add_argument("--condition", action="append", choices=CONDITIONS,
                   help="build only this condition (repeatable; default all)")
    p.set_defaults(func=cmd_variants)

    p = sub.add_parser("train", help="train and evaluate one (model, condition) cell")
    common(p)
    p.add_argument("--model", help="encoder backend id (default from config)")
    p.add_argument("--condition", required=True, choices=CONDITIONS)
    p.add_argument("--no-finetune", action="store_true",
                   help="evaluate the frozen encoder with random heads instead of training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="aggregate run outputs into the report grid")
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    if getattr(args, "workdir", None):
        overrides["workdir"] = args.workdir
    if getattr(args, "corpus", None):
        overrides["corpus"] = args.corpus
    try:
        cfg = load_config(args.config, overrides)
        return args.func(cfg, args)
    except UserError as e:
        print(f"{e.category}: {e}", file=sys.stderr)
        return 1
    except MedcascadeError as e:
        print(f"{e.category}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover - internal errors
        print(f"InternalError: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
