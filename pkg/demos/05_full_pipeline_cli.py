"""The whole experiment grid through the CLI, exactly as you would run it
from a shell:

    medcascade ingest     --config cfg.json
    medcascade preprocess --config cfg.json --backend mock
    medcascade variants   --config cfg.json
    medcascade train      --config cfg.json --model toy --condition <c> [--no-finetune]
    medcascade report     --config cfg.json

Every command is idempotent (content-hash short-circuit), so rerunning the
script is cheap.  Run from the repository root:
python demos/05_full_pipeline_cli.py
"""

import json
import os
import tempfile

from medcascade.cli import main

workdir = tempfile.mkdtemp(prefix="medcascade_grid_")
cfg_path = os.path.join(workdir, "cfg.json")
with open(cfg_path, "w", encoding="utf-8") as fh:
    json.dump({
        "corpus": os.path.abspath("data/synthetic/corpus.jsonl"),
        "workdir": workdir,
        "train": {"epochs": 15, "learning_rate": 2e-3},
    }, fh)

steps = [["ingest"], ["preprocess", "--backend", "mock"], ["variants"]]
for condition in ("normal", "refined", "summarized", "ner"):
    steps.append(["train", "--model", "toy", "--condition", condition])
    steps.append(["train", "--model", "toy", "--condition", condition, "--no-finetune"])
steps.append(["report"])

for argv in steps:
    code = main(argv + ["--config", cfg_path])
    assert code == 0, f"step {argv} exited {code}"

print("\n" + open(os.path.join(workdir, "reports", "report.md"), encoding="utf-8").read())
print(f"artifacts under {workdir}")
