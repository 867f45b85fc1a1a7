"""The three LLM preprocessing layers: refinement, summarization, entity
extraction, plus the per-record bundle store and failure ledger.

Each layer is a prompt template over the gateway.  Two template styles ship
with the package: ``sentinel`` (the bare ``REFINE:``/``SUMMARIZE:``/``NER:``
prompts the mock backend understands) and ``instruct`` (full instructions for
live chat models).  The style is chosen by the backend, and the hashes of the
templates actually used are pinned into every bundle for provenance.

Entity output is parsed line-oriented: ``category: surface, surface`` lines,
or a bare comma-separated list (the mock's style), which is read as symptoms.
An unparseable answer earns one reprompt with a format reminder, then the
record degrades to an empty entity list.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass, field

from .corpus import ComplaintRecord, scrub_pii
from .errors import (EmptySourceText, MedcascadeError, ParseFailure, RefusalDetected,
                     ResponseEmpty)
from .gateway import CompletionRequest, Gateway

logger = logging.getLogger(__name__)

STAGES = ("refine", "summarize", "ner")
ENTITY_CATEGORIES = ("symptom", "condition", "drug")

_PROMPTS_ROOT = os.path.join(os.path.dirname(__file__), "prompts")
_SENTENCE_SPLIT = re.compile(r"(?<=[.!?؟])\s+")
_ITEM_SPLIT = re.compile(r"[,،;؛]")

NONE_MARKERS = {"none", "n/a", "-", "لا يوجد", "لا شيء", "لا توجد"}

_CATEGORY_ALIASES = {
    "symptom": "symptom", "symptoms": "symptom", "عرض": "symptom", "اعراض": "symptom",
    "أعراض": "symptom", "الأعراض": "symptom",
    "condition": "condition", "conditions": "condition", "حالة": "condition",
    "حالات": "condition", "مرض": "condition", "امراض": "condition", "أمراض": "condition",
    "drug": "drug", "drugs": "drug", "medication": "drug", "medications": "drug",
    "دواء": "drug", "ادوية": "drug", "أدوية": "drug", "علاج": "drug",
}

DEFAULT_REFUSAL_PHRASES = (
    "i cannot", "i can't", "i am unable", "i'm unable", "as an ai",
    "لا أستطيع", "لا استطيع", "لا يمكنني",
)

FORMAT_REMINDER = ("Reminder: answer only with lines of the form "
                   "'symptom: ...', 'condition: ...', 'drug: ...' or the word 'none'.")


@dataclass(frozen=True)
class Entity:
    surface: str
    category: str
    normalized: bool = False

    def to_json(self) -> dict:
        return {"surface": self.surface, "category": self.category,
                "normalized": self.normalized}


@dataclass
class PreprocessBundle:
    record_id: str
    refined: str
    summarized: str
    entities: list[Entity]
    prompt_hashes: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"record_id": self.record_id, "refined": self.refined,
                "summarized": self.summarized,
                "entities": [e.to_json() for e in self.entities],
                "prompt_hashes": self.prompt_hashes}

    @classmethod
    def from_json(cls, data: dict) -> "PreprocessBundle":
        return cls(record_id=data["record_id"], refined=data["refined"],
                   summarized=data["summarized"],
                   entities=[Entity(e["surface"], e["category"], e.get("normalized", False))
                             for e in data["entities"]],
                   prompt_hashes=data.get("prompt_hashes", {}))


class PromptLibrary:
    """Versioned prompt templates, one file per (style, stage)."""

    def __init__(self, root: str = _PROMPTS_ROOT):
        self.root = root
        self._templates: dict[tuple[str, str], str] = {}
        for style in ("sentinel", "instruct"):
            for stage in STAGES:
                path = os.path.join(root, style, f"{stage}.txt")
                with open(path, encoding="utf-8") as fh:
                    self._templates[(style, stage)] = fh.read()

    def render(self, style: str, stage: str, text: str) -> str:
        return self._templates[(style, stage)].format(text=text)

    def hash(self, style: str, stage: str) -> str:
        return hashlib.sha256(self._templates[(style, stage)].encode("utf-8")).hexdigest()

    def hashes(self, style: str) -> dict[str, str]:
        return {stage: self.hash(style, stage) for stage in STAGES}


def _source_text(record: ComplaintRecord) -> str:
    text = record.text.strip()
    if not text:
        raise EmptySourceText(f"record {record.id!r} is empty after scrubbing")
    if scrub_pii(text) != text:
        raise ValueError(f"record {record.id!r} must be PII-scrubbed before any LLM call")
    return text


def _is_refusal(output: str, phrases=DEFAULT_REFUSAL_PHRASES) -> bool:
    lowered = output.lower()
    return any(p in lowered for p in phrases)


def _ask(gw: Gateway, backend_id: str, prompt: str, max_output_tokens: int = 512) -> str:
    req = CompletionRequest(prompt=prompt, max_output_tokens=max_output_tokens,
                            temperature=0.0, backend_id=backend_id)
    return gw.complete(req)


def _style_for(gw: Gateway, backend_id: str) -> str:
    return gw.prompt_style(backend_id)


def refine(record: ComplaintRecord, gw: Gateway, backend_id: str = "mock",
           prompts: PromptLibrary | None = None,
           refusal_phrases=DEFAULT_REFUSAL_PHRASES) -> str:
    """Cleaned restatement of the complaint, medical content preserved."""
    text = _source_text(record)
    prompts = prompts or PromptLibrary()
    out = _ask(gw, backend_id, prompts.render(_style_for(gw, backend_id), "refine", text))
    if _is_refusal(out, refusal_phrases):
        raise RefusalDetected(f"record {record.id!r}: refine output looks like a refusal")
    return out.strip()


def summarize(record: ComplaintRecord, gw: Gateway, backend_id: str = "mock",
              prompts: PromptLibrary | None = None,
              refusal_phrases=DEFAULT_REFUSAL_PHRASES) -> str:
    """Compressed complaint; never longer than the source (clamped post-hoc)."""
    text = _source_text(record)
    prompts = prompts or PromptLibrary()
    out = _ask(gw, backend_id, prompts.render(_style_for(gw, backend_id), "summarize", text))
    if _is_refusal(out, refusal_phrases):
        raise RefusalDetected(f"record {record.id!r}: summary output looks like a refusal")
    out = out.strip()
    if len(out) > len(text):
        out = _truncate_to_len(out, len(text))
        logger.warning("summary for %s longer than source; truncated", record.id)
    return out


def _truncate_to_len(text: str, limit: int) -> str:
    """Cut at a sentence boundary if one fits, otherwise hard-cut."""
    kept: list[str] = []
    total = 0
    for sentence in _SENTENCE_SPLIT.split(text):
        extra = len(sentence) + (1 if kept else 0)
        if total + extra > limit:
            break
        kept.append(sentence)
        total += extra
    if kept:
        return " ".join(kept)
    return text[:limit].rstrip() or text[:limit]


def parse_entities(output: str, source_text: str) -> list[Entity]:
    """Line-oriented entity parser; see module docstring for the grammar."""
    out = output.strip()
    if not out or out.lower() in NONE_MARKERS:
        return []
    lines = [ln.strip() for ln in out.splitlines() if ln.strip()]
    entities: list[Entity] = []
    invalid = 0

    def add(surface: str, category: str) -> None:
        surface = surface.strip()
        if surface and surface.lower() not in NONE_MARKERS:
            entities.append(Entity(surface=surface, category=category,
                                   normalized=surface not in source_text))

    if any(":" in ln for ln in lines):
        for ln in lines:
            if ":" not in ln:
                invalid += 1
                continue
            head, rest = ln.split(":", 1)
            category = _CATEGORY_ALIASES.get(head.strip().lower())
            if category is None:
                logger.debug("dropping line with unknown category: %r", ln[:60])
                invalid += 1
                continue
            for item in _ITEM_SPLIT.split(rest):
                add(item, category)
    else:
        for ln in lines:
            for item in _ITEM_SPLIT.split(ln):
                add(item, "symptom")

    if not entities and invalid:
        raise ParseFailure(f"no entities parsed from {len(lines)} line(s)")

    seen: set[tuple[str, str]] = set()
    deduped: list[Entity] = []
    for e in entities:
        key = (e.surface, e.category)
        if key not in seen:
            seen.add(key)
            deduped.append(e)
    return deduped


def extract_entities(record: ComplaintRecord, gw: Gateway, backend_id: str = "mock",
                     prompts: PromptLibrary | None = None) -> list[Entity]:
    """Deduplicated, order-of-first-mention entity list for one record.

    On an unparseable or refusal answer, reprompts once with a format
    reminder; a second failure raises ParseFailure.  An empty completion
    means no entities.
    """
    text = _source_text(record)
    prompts = prompts or PromptLibrary()
    prompt = prompts.render(_style_for(gw, backend_id), "ner", text)
    for attempt in range(2):
        try:
            out = _ask(gw, backend_id, prompt)
        except ResponseEmpty:
            return []
        if not _is_refusal(out):
            try:
                return parse_entities(out, text)
            except ParseFailure:
                if attempt == 1:
                    raise
        elif attempt == 1:
            raise ParseFailure(f"record {record.id!r}: refusal after reprompt")
        prompt = f"{prompt}\n{FORMAT_REMINDER}"
    raise ParseFailure(f"record {record.id!r}: unreachable")  # pragma: no cover


# -- bundle store and orchestration -------------------------------------------

_SAFE_NAME = re.compile(r"[^A-Za-z0-9._-]")


def _filename_for(record_id: str) -> str:
    safe = _SAFE_NAME.sub("_", record_id)
    if safe == record_id:
        return f"{record_id}.json"
    digest = hashlib.sha1(record_id.encode("utf-8")).hexdigest()[:8]
    return f"{safe}-{digest}.json"


class BundleStore:
    """One JSON file per record id under a bundles directory."""

    def __init__(self, directory: str):
        self.directory = str(directory)
        os.makedirs(self.directory, exist_ok=True)

    def path_for(self, record_id: str) -> str:
        return os.path.join(self.directory, _filename_for(record_id))

    def exists(self, record_id: str) -> bool:
        return os.path.exists(self.path_for(record_id))

    def save(self, bundle: PreprocessBundle) -> None:
        path = self.path_for(bundle.record_id)
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(bundle.to_json(), fh, ensure_ascii=False, sort_keys=True, indent=2)
        os.replace(tmp, path)

    def load(self, record_id: str) -> PreprocessBundle | None:
        path = self.path_for(record_id)
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as fh:
            return PreprocessBundle.from_json(json.load(fh))

    def store_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(os.listdir(self.directory)):
            if name.endswith(".json"):
                h.update(name.encode("utf-8"))
                with open(os.path.join(self.directory, name), "rb") as fh:
                    h.update(fh.read())
        return h.hexdigest()


@dataclass
class LedgerEntry:
    record_id: str
    stage: str
    error: str
    fatal: bool

    def to_json(self) -> dict:
        return {"record_id": self.record_id, "stage": self.stage,
                "error": self.error, "fatal": self.fatal}


def run_bundle(records: list[ComplaintRecord], gw: Gateway, resume: bool = False,
               store: BundleStore | None = None, backend_id: str = "mock",
               prompts: PromptLibrary | None = None,
               ledger_path: str | None = None) -> list[PreprocessBundle]:
    """Produce one bundle per record through all three layers.

    Never loses a record: stage failures are recorded in the failure ledger
    and the bundle degrades (fallback refined/summarized = scrubbed source,
    entities = empty) instead of aborting the run.  With ``resume``, records
    whose bundle already exists on disk are skipped outright.
    """
    store = store or BundleStore("bundles")
    prompts = prompts or PromptLibrary()
    ledger_path = ledger_path or os.path.join(store.directory, "failures.jsonl")
    style = _style_for(gw, backend_id)
    hashes = prompts.hashes(style)

    bundles: list[PreprocessBundle] = []
    ledger: list[LedgerEntry] = []
    for record in records:
        if resume and store.exists(record.id):
            bundles.append(store.load(record.id))
            continue
        scrubbed = scrub_pii(record.text)
        source = ComplaintRecord(id=record.id, text=scrubbed, labels=record.labels,
                                 age=record.age, gender=record.gender)
        if not scrubbed.strip():
            ledger.append(LedgerEntry(record.id, "refine", "EmptySourceText", fatal=True))
            bundle = PreprocessBundle(record.id, "", "", [], dict(hashes))
            store.save(bundle)
            bundles.append(bundle)
            continue

        try:
            refined = refine(source, gw, backend_id, prompts)
        except MedcascadeError as e:
            ledger.append(LedgerEntry(record.id, "refine", e.category, fatal=True))
            refined = scrubbed.strip()
        try:
            summarized = summarize(source, gw, backend_id, prompts)
        except MedcascadeError as e:
            ledger.append(LedgerEntry(record.id, "summarize", e.category, fatal=True))
            summarized = scrubbed.strip()
        try:
            entities = extract_entities(source, gw, backend_id, prompts)
        except MedcascadeError as e:
            ledger.append(LedgerEntry(record.id, "ner", e.category, fatal=False))
            entities = []

        bundle = PreprocessBundle(record.id, refined, summarized, entities, dict(hashes))
        store.save(bundle)
        bundles.append(bundle)

    if ledger:
        try:
            with open(ledger_path, "a", encoding="utf-8") as fh:
                for entry in ledger:
                    fh.write(json.dumps(entry.to_json(), ensure_ascii=False, sort_keys=True) + "\n")
        except OSError as e:
            raise MedcascadeError(f"cannot write failure ledger {ledger_path}: {e}") from e
    return bundles
