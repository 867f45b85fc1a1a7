"""Evaluation-condition datasets: normal, refined, summarized, ner.

Augmented conditions append one preprocessing output to the scrubbed source
text behind a reserved ``[AUX]`` separator, so the normal condition stays a
strict ablation and any single-input encoder can consume the result.  Labels
are copied unchanged; an empty auxiliary falls back to the normal text and
is counted, not dropped.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .corpus import ComplaintRecord, LabelSet, corpus_hash, scrub_pii
from .errors import MissingBundle
from .preprocess import BundleStore

CONDITIONS = ("normal", "refined", "summarized", "ner")
AUX_SEP = " [AUX] "
ENTITY_JOIN = "، "


@dataclass(frozen=True)
class VariantExample:
    record_id: str
    input_text: str
    labels: LabelSet

    def to_json(self) -> dict:
        return {"record_id": self.record_id, "input_text": self.input_text,
                "labels": self.labels.to_json()}


@dataclass
class DatasetVariant:
    condition: str
    examples: list[VariantExample]
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.examples)


def build_variant(records: list[ComplaintRecord], bundles: BundleStore | None,
                  condition: str) -> DatasetVariant:
    """Deterministic variant for one condition, ordered by record id."""
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}, expected one of {CONDITIONS}")
    if condition != "normal" and bundles is None:
        raise MissingBundle("<no bundle store>")

    examples: list[VariantExample] = []
    empty_aux = 0
    for record in sorted(records, key=lambda r: r.id):
        normal_text = scrub_pii(record.text)
        if condition == "normal":
            input_text = normal_text
        else:
            bundle = bundles.load(record.id)
            if bundle is None:
                raise MissingBundle(record.id)
            if condition == "refined":
                aux = bundle.refined
            elif condition == "summarized":
                aux = bundle.summarized
            else:
                aux = ENTITY_JOIN.join(e.surface for e in bundle.entities)
            aux = aux.strip()
            if aux:
                input_text = f"{normal_text}{AUX_SEP}{aux}"
            else:
                input_text = normal_text
                empty_aux += 1
        examples.append(VariantExample(record.id, input_text, record.labels))

    provenance = {
        "condition": condition,
        "corpus_hash": corpus_hash(sorted(records, key=lambda r: r.id)),
        "bundle_store_hash": bundles.store_hash() if condition != "normal" else None,
        "empty_aux_count": empty_aux,
        "count": len(examples),
    }
    return DatasetVariant(condition=condition, examples=examples, provenance=provenance)


def variant_paths(directory: str, condition: str, split: str) -> tuple[str, str]:
    base = os.path.join(str(directory), condition)
    return os.path.join(base, f"{split}.jsonl"), os.path.join(base, f"{split}.provenance.json")


def write_variant(variant: DatasetVariant, directory: str, split: str) -> str:
    """JSONL of examples plus a provenance sidecar; atomic."""
    data_path, sidecar_path = variant_paths(directory, variant.condition, split)
    os.makedirs(os.path.dirname(data_path), exist_ok=True)
    payload = "".join(json.dumps(e.to_json(), ensure_ascii=False, sort_keys=True) + "\n"
                      for e in variant.examples)
    for path, content in ((data_path, payload),
                          (sidecar_path, json.dumps(variant.provenance, ensure_ascii=False,
                                                    sort_keys=True, indent=2) + "\n")):
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(content)
        os.replace(tmp, path)
    return data_path


def load_variant(directory: str, condition: str, split: str) -> DatasetVariant:
    data_path, sidecar_path = variant_paths(directory, condition, split)
    examples: list[VariantExample] = []
    with open(data_path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            labels = raw["labels"]
            examples.append(VariantExample(
                record_id=raw["record_id"], input_text=raw["input_text"],
                labels=LabelSet(condition_type=labels["type"], severity=labels["severity"],
                                diagnosis=labels.get("diagnosis"))))
    provenance = {}
    if os.path.exists(sidecar_path):
        with open(sidecar_path, encoding="utf-8") as fh:
            provenance = json.load(fh)
    return DatasetVariant(condition=condition, examples=examples, provenance=provenance)
