"""Corpus handling: load the bundled synthetic corpus, scrub PII, split.

Run from the repository root:  python demos/01_corpus_and_pii.py
"""

from medcascade.corpus import (label_counts, load_corpus, scrub_pii, scrub_records,
                               stratified_split)

# ── 1. load + validate ───────────────────────────────────────────────────────
records, manifest = load_corpus("data/synthetic/corpus.jsonl")
print(f"loaded {len(records)} records; label vocabularies: {manifest.vocab}")
print("first record:", records[0].text)

# ── 2. PII scrubbing is pattern-based, deterministic, idempotent ─────────────
dirty = "تواصل معايا علي 01012345678 او patient@example.com bitte"
print("\nbefore:", dirty)
print("after: ", scrub_pii(dirty))
assert scrub_pii(scrub_pii(dirty)) == scrub_pii(dirty)  # idempotent

records = scrub_records(records)
flagged = [r for r in records if "<PHONE>" in r.text or "<EMAIL>" in r.text or "<URL>" in r.text]
print(f"\n{len(flagged)} of {len(records)} records carried PII; one example:")
print(" ", flagged[0].text)

# ── 3. stratified split (deterministic in the seed) ──────────────────────────
train, val, test = stratified_split(records, (0.8, 0.1, 0.1), seed=7)
print(f"\nsplit sizes: train={len(train)} val={len(val)} test={len(test)}")
for name, part in (("train", train), ("val", val), ("test", test)):
    print(f"  {name} type distribution: {label_counts(part, 'type')}")
