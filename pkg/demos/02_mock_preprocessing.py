"""The three LLM preprocessing layers over the deterministic mock backend.

The mock understands REFINE:/SUMMARIZE:/NER: prompts and applies a fixed
transformation, so everything here is reproducible offline.  Swapping in a
live backend is a config change (gateway.backend = "openai" or "llama" plus
MEDCASCADE_LLM_URL / MEDCASCADE_LLM_KEY).

Run from the repository root:  python demos/02_mock_preprocessing.py
"""

import tempfile

from medcascade.corpus import load_corpus, scrub_records
from medcascade.gateway import Gateway, MockBackend, ResponseCache
from medcascade.preprocess import BundleStore, extract_entities, refine, run_bundle, summarize

records, _ = load_corpus("data/synthetic/corpus.jsonl")
records = scrub_records(records)[:5]

workdir = tempfile.mkdtemp(prefix="medcascade_demo_")
gw = Gateway(cache=ResponseCache(f"{workdir}/cache"))
gw.register_backend(MockBackend())

# ── 1. the three layers on one record ────────────────────────────────────────
record = records[0]
print("source:    ", record.text)
print("refined:   ", refine(record, gw).replace("\n", " / "))
print("summarized:", summarize(record, gw))
print("entities:  ", [(e.surface, e.category) for e in extract_entities(record, gw)])

# ── 2. batch orchestration with a bundle store ───────────────────────────────
store = BundleStore(f"{workdir}/bundles")
bundles = run_bundle(records, gw, store=store)
print(f"\n{len(bundles)} bundles written to {store.directory}")
print(f"gateway calls so far: {gw.backend_calls}, cache hits: {gw.cache_hits}")

# ── 3. a second run is free: the cache short-circuits the backend ────────────
run_bundle(records, gw, store=BundleStore(f"{workdir}/bundles2"))
print(f"after rerun: gateway calls {gw.backend_calls} (unchanged), "
      f"cache hits {gw.cache_hits}")
