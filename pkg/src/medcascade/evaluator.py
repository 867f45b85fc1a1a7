"""Accuracy / balanced accuracy per task and the model x condition report grid.

The human-readable report shows one whole-percent accuracy per task plus an
AVG column (arithmetic mean of the Type and Severity accuracies, rounded
half-up); balanced accuracy and the confusion matrices travel in the JSON
detail, since a grid of single numbers cannot carry both metrics.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP

import numpy as np

from .errors import EmptyInput, LengthMismatch, VocabMismatch
from .trainer import MultiTaskModel, predict
from .variants import DatasetVariant

METRIC_NOTE = ("Headline cells are plain accuracy; balanced accuracy per cell "
               "is in report.json under tasks.<task>.balanced_accuracy.")


@dataclass
class TaskScores:
    task: str
    accuracy: float
    balanced_accuracy: float
    n: int
    confusion: list[list[int]]

    def to_json(self) -> dict:
        return {"task": self.task, "accuracy": self.accuracy,
                "balanced_accuracy": self.balanced_accuracy, "n": self.n,
                "confusion": self.confusion}


def _check_lengths(preds, golds) -> None:
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(golds)} golds")
    if len(golds) == 0:
        raise EmptyInput("no examples to score")


def accuracy(preds, golds) -> float:
    """Fraction of exact matches."""
    _check_lengths(preds, golds)
    matches = sum(1 for p, g in zip(preds, golds) if p == g)
    return matches / len(golds)


def balanced_accuracy(preds, golds, vocab) -> float:
    """Mean per-class recall over the classes present in golds.

    ``preds``/``golds`` are class indices into ``vocab`` (or the labels
    themselves).  Classes are visited in vocabulary order so the
    floating-point reduction order is pinned; classes absent from golds are
    excluded from the mean.
    """
    _check_lengths(preds, golds)
    if all(isinstance(g, (int, np.integer)) for g in golds):
        classes = list(range(len(vocab)))
    else:
        classes = list(vocab)
    class_set = set(classes)
    for g in set(golds):
        if g not in class_set:
            raise VocabMismatch(f"gold label {g!r} not in vocabulary")
    gold_set = set(golds)
    recalls = []
    for cls in classes:
        if cls not in gold_set:
            continue
        correct = sum(1 for p, g in zip(preds, golds) if g == cls and p == cls)
        total = sum(1 for g in golds if g == cls)
        recalls.append(correct / total)
    return sum(recalls) / len(recalls)


def confusion_matrix(preds, golds, n_classes: int) -> list[list[int]]:
    """Counts with gold on rows, prediction on columns."""
    matrix = [[0] * n_classes for _ in range(n_classes)]
    for p, g in zip(preds, golds):
        matrix[int(g)][int(p)] += 1
    return matrix


def evaluate(model: MultiTaskModel, dataset: DatasetVariant,
             tasks=None) -> dict[str, TaskScores]:
    """Score one model on one variant; deterministic in its inputs."""
    tasks = tuple(tasks) if tasks else model.tasks
    if not dataset.examples:
        raise EmptyInput("dataset has no examples")
    texts = [ex.input_text for ex in dataset.examples]
    preds = predict(model, texts)
    scores: dict[str, TaskScores] = {}
    for task in tasks:
        if task not in model.task_vocabs:
            raise VocabMismatch(f"model has no vocabulary for task {task!r}")
        vocab = model.task_vocabs[task]
        golds = [model.label_index(task, ex.labels.get(task), ex.record_id)
                 for ex in dataset.examples]
        task_preds = [int(i) for i in preds[task]["indices"]]
        scores[task] = TaskScores(
            task=task,
            accuracy=accuracy(task_preds, golds),
            balanced_accuracy=balanced_accuracy(task_preds, golds, vocab),
            n=len(golds),
            confusion=confusion_matrix(task_preds, golds, len(vocab)),
        )
    return scores


def prediction_dump(model: MultiTaskModel, dataset: DatasetVariant, tasks=None) -> str:
    """JSONL audit dump: one line per (record, task) with pred and gold labels."""
    tasks = tuple(tasks) if tasks else model.tasks
    texts = [ex.input_text for ex in dataset.examples]
    preds = predict(model, texts)
    lines = []
    for i, ex in enumerate(dataset.examples):
        for task in tasks:
            vocab = model.task_vocabs[task]
            lines.append(json.dumps(
                {"record_id": ex.record_id, "task": task,
                 "pred": vocab[int(preds[task]["indices"][i])],
                 "gold": ex.labels.get(task)},
                ensure_ascii=False, sort_keys=True))
    return "\n".join(lines) + "\n"


# -- report grid ---------------------------------------------------------------

def percent_half_up(value: float) -> int:
    """Whole-percent rounding with exact half-up behavior (e.g. 0.715 -> 72)."""
    return int(Decimal(repr(value)).scaleb(2).quantize(Decimal("1"), rounding=ROUND_HALF_UP))


def avg_percent(type_acc: float, severity_acc: float) -> int:
    """AVG column: mean of the two accuracies, as a half-up whole percent."""
    mean = (Decimal(repr(type_acc)) + Decimal(repr(severity_acc))) / 2
    return int(mean.scaleb(2).quantize(Decimal("1"), rounding=ROUND_HALF_UP))


@dataclass
class ReportCell:
    model_id: str
    condition: str
    fine_tuned: bool
    tasks: dict[str, TaskScores] = field(default_factory=dict)

    def percent(self, task: str) -> int:
        return percent_half_up(self.tasks[task].accuracy)

    def avg(self) -> int:
        return avg_percent(self.tasks["type"].accuracy, self.tasks["severity"].accuracy)

    def to_json(self) -> dict:
        return {"model_id": self.model_id, "condition": self.condition,
                "fine_tuned": self.fine_tuned,
                "tasks": {t: s.to_json() for t, s in self.tasks.items()},
                "percent": {t: self.percent(t) for t in self.tasks},
                "avg_percent": self.avg()}


def render_report(cells: list[ReportCell], out_dir: str) -> tuple[str, str]:
    """Write report.json (full grid) and report.md (per-condition tables).

    Each augmented condition's table pairs the normal-text rows against the
    augmented rows, fine-tuned and non-fine-tuned arms side by side.
    """
    if not cells:
        raise EmptyInput("no report cells")
    os.makedirs(out_dir, exist_ok=True)

    grid = {"note": METRIC_NOTE,
            "cells": [c.to_json() for c in sorted(
                cells, key=lambda c: (c.condition, c.model_id, not c.fine_tuned))]}
    json_path = os.path.join(out_dir, "report.json")
    _atomic(json_path, json.dumps(grid, ensure_ascii=False, sort_keys=True, indent=2) + "\n")

    by_key = {(c.model_id, c.condition, c.fine_tuned): c for c in cells}
    model_ids = sorted({c.model_id for c in cells})
    conditions = [c for c in ("refined", "summarized", "ner")
                  if any(cell.condition == c for cell in cells)]
    if not conditions and any(c.condition == "normal" for c in cells):
        conditions = ["normal"]

    md = ["# Evaluation report", "", f"_{METRIC_NOTE}_", ""]
    for condition in conditions:
        md.append(f"## {condition.capitalize()} condition")
        md.append("")
        md.append("| Rows | Model | FT Type | FT Severity | FT AVG "
                  "| W/O FT Type | W/O FT Severity | W/O FT AVG |")
        md.append("|---|---|---|---|---|---|---|---|")
        row_groups = [("Normal Text", "normal")] if condition != "normal" else []
        row_groups.append((f"With {condition.capitalize()}" if condition != "normal"
                           else "Normal Text", condition))
        for group_name, cond in row_groups:
            for model_id in model_ids:
                ft = by_key.get((model_id, cond, True))
                wo = by_key.get((model_id, cond, False))
                if ft is None and wo is None:
                    continue
                md.append("| " + " | ".join(
                    [group_name, model_id] + _row_cells(ft) + _row_cells(wo)) + " |")
        md.append("")
    md_path = os.path.join(out_dir, "report.md")
    _atomic(md_path, "\n".join(md) + "\n")
    return json_path, md_path


def _row_cells(cell: ReportCell | None) -> list[str]:
    if cell is None or "type" not in cell.tasks or "severity" not in cell.tasks:
        return ["-", "-", "-"]
    return [f"{cell.percent('type')}%", f"{cell.percent('severity')}%", f"{cell.avg()}%"]


def _atomic(path: str, payload: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(payload)
    os.replace(tmp, path)
