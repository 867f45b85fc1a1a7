"""Multi-task fine-tuning on top of a frozen encoder.

Only adapter factors and the per-task affine heads train; the optimizer is
AdamW with linear warmup over 10% of steps then linear decay.  Class
imbalance is handled in the loss: each example's cross-entropy is weighted
by its target class weight and the batch is normalized by the sum of applied
weights, which reduces to plain mean cross-entropy when all weights are one.

Defaults (batch size 4, 25 epochs, LoRA rank 16 / alpha 8 / dropout 5%)
are the regime this package targets end to end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyClass, IndexOutOfVocab, NonFiniteLoss, VocabMismatch
from .lora import count_trainable
from .variants import DatasetVariant

DEFAULT_TASKS = ("type", "severity")


# -- loss ---------------------------------------------------------------------

def class_weights(label_counts: dict[str, int]) -> dict[str, float]:
    """Inverse-frequency weights: w(c) = N / (K * count(c)).

    Mean weight is exactly 1 when classes are balanced.
    """
    if not label_counts:
        raise EmptyClass("no classes given")
    for cls, count in label_counts.items():
        if count < 1:
            raise EmptyClass(f"class {cls!r} has count {count}")
    total = sum(label_counts.values())
    k = len(label_counts)
    return {cls: total / (k * count) for cls, count in label_counts.items()}


def _softmax_ce(logits: np.ndarray, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-example cross-entropy and softmax probabilities, numerically stable."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    expo = np.exp(shifted)
    z = expo.sum(axis=1, keepdims=True)
    probs = expo / z
    ce = np.log(z[:, 0]) - shifted[np.arange(len(targets)), targets]
    return ce, probs


def _check_targets(task: str, targets: np.ndarray, k: int) -> None:
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        bad = int(targets.min()) if targets.min() < 0 else int(targets.max())
        raise IndexOutOfVocab(f"task {task!r}: target index {bad} outside [0, {k})")


def weighted_loss(logits: dict[str, np.ndarray], targets: dict[str, np.ndarray],
                  weights: dict[str, np.ndarray] | None = None) -> float:
    """Sum over tasks of class-weighted, weight-normalized cross-entropy."""
    return weighted_loss_and_grad(logits, targets, weights)[0]


def weighted_loss_and_grad(logits: dict[str, np.ndarray], targets: dict[str, np.ndarray],
                           weights: dict[str, np.ndarray] | None = None,
                           ) -> tuple[float, dict[str, np.ndarray]]:
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    for task, task_logits in logits.items():
        task_logits = np.asarray(task_logits, dtype=float)
        task_targets = np.asarray(targets[task], dtype=np.int64)
        n, k = task_logits.shape
        _check_targets(task, task_targets, k)
        ce, probs = _softmax_ce(task_logits, task_targets)
        if weights is not None and weights.get(task) is not None:
            w = np.asarray(weights[task], dtype=float)[task_targets]
        else:
            w = np.ones(n)
        w_sum = w.sum()
        total += float((w * ce).sum() / w_sum)
        dlogits = probs
        dlogits[np.arange(n), task_targets] -= 1.0
        grads[task] = dlogits * (w / w_sum)[:, None]
    return total, grads


# -- model --------------------------------------------------------------------

@dataclass
class MultiTaskModel:
    """Frozen encoder (optionally with adapters) plus one affine head per task."""

    encoder: object
    heads: dict[str, dict[str, np.ndarray]]
    task_vocabs: dict[str, list[str]]
    tasks: tuple[str, ...] = DEFAULT_TASKS

    @classmethod
    def build(cls, encoder, task_vocabs: dict[str, list[str]],
              tasks=DEFAULT_TASKS, head_seed: int = 0) -> "MultiTaskModel":
        rng = np.random.default_rng(head_seed)
        heads = {}
        for task in tasks:
            if task not in task_vocabs:
                raise VocabMismatch(f"no vocabulary for task {task!r}")
            k = len(task_vocabs[task])
            heads[task] = {"W": rng.normal(0.0, 0.02, size=(k, encoder.d_model)),
                           "b": np.zeros(k)}
        return cls(encoder=encoder, heads=heads, task_vocabs=dict(task_vocabs),
                   tasks=tuple(tasks))

    def label_index(self, task: str, label: str, record_id: str = "?") -> int:
        try:
            return self.task_vocabs[task].index(label)
        except ValueError:
            raise VocabMismatch(
                f"record {record_id!r}: label {label!r} not in model's {task} vocabulary") from None

    def encode_texts(self, texts: list[str]) -> tuple[np.ndarray, np.ndarray]:
        """Fixed-length (ids, mask) batch; the auxiliary tail after [AUX] is
        truncated before the normal text when the sequence is too long."""
        tok = self.encoder.tokenizer
        max_len = self.encoder.max_len
        budget = max_len - 1  # room for [CLS]
        ids = np.full((len(texts), max_len), tok.pad_id, dtype=np.int64)
        mask = np.zeros((len(texts), max_len))
        for row, text in enumerate(texts):
            content = tok.encode(text)
            if len(content) > budget:
                if tok.aux_id in content:
                    pos = content.index(tok.aux_id)
                    normal, aux = content[:pos], content[pos:]
                    content = normal[:budget] if len(normal) >= budget \
                        else normal + aux[: budget - len(normal)]
                else:
                    content = content[:budget]
            seq = [tok.cls_id] + content
            ids[row, : len(seq)] = seq
            mask[row, : len(seq)] = 1.0
        return ids, mask

    def logits_from_pooled(self, pooled: np.ndarray) -> dict[str, np.ndarray]:
        return {task: pooled @ self.heads[task]["W"].T + self.heads[task]["b"]
                for task in self.tasks}

    def forward(self, ids: np.ndarray, mask: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None):
        if training:
            pooled, cache = self.encoder.forward(ids, mask, training=True, rng=rng,
                                                 return_cache=True)
        else:
            pooled, cache = self.encoder.forward(ids, mask), None
        return self.logits_from_pooled(pooled), pooled, cache

    def trainable_params(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for task in self.tasks:
            params[f"head.{task}.W"] = self.heads[task]["W"]
            params[f"head.{task}.b"] = self.heads[task]["b"]
        for name, adapter in self.encoder.adapters:
            params[f"adapter.{name}.A"] = adapter.A
            params[f"adapter.{name}.B"] = adapter.B
        return params

    def trainable_count(self) -> int:
        head_dims = [(self.encoder.d_model, len(self.task_vocabs[t])) for t in self.tasks]
        return count_trainable(self.encoder.adapters, head_dims)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.trainable_params().items()}

    def restore(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, arr in self.trainable_params().items():
            arr[:] = snapshot[name]


def predict(model: MultiTaskModel, texts: list[str], batch_size: int = 8,
            ) -> dict[str, dict[str, np.ndarray]]:
    """Eval-mode argmax per task; ties break to the lowest class index.

    Sequences are padded to the encoder's max length, so predictions do not
    depend on how texts are batched.
    """
    out = {task: {"indices": [], "scores": []} for task in model.tasks}
    for start in range(0, len(texts), batch_size):
        chunk = texts[start: start + batch_size]
        ids, mask = model.encode_texts(chunk)
        logits, _, _ = model.forward(ids, mask, training=False)
        for task in model.tasks:
            out[task]["indices"].extend(int(i) for i in np.argmax(logits[task], axis=1))
            out[task]["scores"].append(logits[task])
    for task in model.tasks:
        out[task]["scores"] = (np.concatenate(out[task]["scores"])
                               if out[task]["scores"] else np.zeros((0, 0)))
        out[task]["indices"] = np.asarray(out[task]["indices"], dtype=np.int64)
    return out


# -- optimizer ------------------------------------------------------------------

class AdamW:
    """Decoupled-weight-decay adaptive moments over a flat parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        self.t += 1
        lr = self.lr * lr_scale
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            p -= lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)


def lr_schedule(step: int, total_steps: int, warmup_frac: float = 0.1) -> float:
    """Scale factor for 0-indexed ``step``: linear warmup, then linear decay."""
    warmup = max(1, round(warmup_frac * total_steps))
    if step < warmup:
        return (step + 1) / warmup
    return max(0.0, (total_steps - step) / max(1, total_steps - warmup))


# -- training -------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 4
    epochs: int = 25
    learning_rate: float = 2e-4
    seed: int = 0
    loss_mode: str = "class_weighted"     # class_weighted | plain
    tasks: tuple[str, ...] = DEFAULT_TASKS
    weight_decay: float = 0.01
    warmup_frac: float = 0.1

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size, epochs must be >= 1 and learning_rate > 0")
        if self.loss_mode not in ("plain", "class_weighted"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")

    def to_json(self) -> dict:
        return {"batch_size": self.batch_size, "epochs": self.epochs,
                "learning_rate": self.learning_rate, "seed": self.seed,
                "loss_mode": self.loss_mode, "tasks": list(self.tasks),
                "weight_decay": self.weight_decay, "warmup_frac": self.warmup_frac}


@dataclass
class TrainLog:
    tasks: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)

    def append(self, epoch: int, train_loss: float, val_acc: dict[str, float]) -> None:
        self.rows.append({"epoch": epoch, "train_loss": train_loss, "val_acc": val_acc})

    def to_csv(self) -> str:
        header = "epoch,train_loss," + ",".join(f"val_acc_{t}" for t in self.tasks)
        lines = [header]
        for row in self.rows:
            cells = [str(row["epoch"]), repr(row["train_loss"])]
            cells += [repr(row["val_acc"][t]) for t in self.tasks]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    final_params: dict[str, np.ndarray]
    best_epoch: int
    log: TrainLog
    steps_taken: int
    class_weight_maps: dict[str, dict[str, float]] | None


def _variant_targets(model: MultiTaskModel, variant: DatasetVariant,
                     tasks: tuple[str, ...]) -> dict[str, np.ndarray]:
    targets: dict[str, np.ndarray] = {}
    for task in tasks:
        idxs = []
        for ex in variant.examples:
            label = ex.labels.get(task)
            if label is None:
                raise VocabMismatch(f"record {ex.record_id!r} has no {task} label")
            idxs.append(model.label_index(task, label, ex.record_id))
        targets[task] = np.asarray(idxs, dtype=np.int64)
    return targets


def train(model: MultiTaskModel, train_set: DatasetVariant, val_set: DatasetVariant,
          cfg: TrainConfig) -> TrainResult:
    """Run cfg.epochs of seeded mini-batch AdamW over the training variant.

    Logs per-epoch train loss and per-task validation accuracy; returns the
    parameters with the best validation average accuracy plus the final ones.
    Deterministic in (model init, data, cfg.seed).
    """
    cfg.validate()
    for task in cfg.tasks:
        if task not in model.heads:
            raise VocabMismatch(f"model has no head for task {task!r}")
        if model.heads[task]["W"].shape[0] != len(model.task_vocabs[task]):
            raise VocabMismatch(f"head for {task!r} has {model.heads[task]['W'].shape[0]} "
                                f"classes, vocabulary has {len(model.task_vocabs[task])}")

    train_targets = _variant_targets(model, train_set, cfg.tasks)
    val_targets = _variant_targets(model, val_set, cfg.tasks)

    weight_maps: dict[str, dict[str, float]] | None = None
    weights: dict[str, np.ndarray] | None = None
    if cfg.loss_mode == "class_weighted":
        weight_maps, weights = {}, {}
        for task in cfg.tasks:
            vocab = model.task_vocabs[task]
            counts: dict[str, int] = {}
            for ex in train_set.examples:
                label = ex.labels.get(task)
                counts[label] = counts.get(label, 0) + 1
            wmap = class_weights(counts)
            weight_maps[task] = wmap
            weights[task] = np.asarray([wmap.get(cls, 1.0) for cls in vocab])

    train_texts = [ex.input_text for ex in train_set.examples]
    val_texts = [ex.input_text for ex in val_set.examples]
    train_ids, train_mask = model.encode_texts(train_texts)

    n = len(train_texts)
    steps_per_epoch = int(np.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch

    params = model.trainable_params()
    optimizer = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng(cfg.seed)
    dropout_rng = np.random.default_rng(cfg.seed + 1)

    log = TrainLog(tasks=cfg.tasks)
    best_avg, best_epoch, best_params = -1.0, -1, model.snapshot()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        epoch_losses = []
        for batch_i in range(steps_per_epoch):
            sel = perm[batch_i * cfg.batch_size: (batch_i + 1) * cfg.batch_size]
            ids, mask = train_ids[sel], train_mask[sel]
            logits, pooled, cache = model.forward(ids, mask, training=True, rng=dropout_rng)
            targets = {t: train_targets[t][sel] for t in cfg.tasks}
            loss, dlogits = weighted_loss_and_grad(logits, targets, weights)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"epoch{epoch}/batch{batch_i}", loss)
            grads: dict[str, np.ndarray] = {}
            d_pooled = np.zeros_like(pooled)
            for task in cfg.tasks:
                grads[f"head.{task}.W"] = dlogits[task].T @ pooled
                grads[f"head.{task}.b"] = dlogits[task].sum(axis=0)
                d_pooled += dlogits[task] @ model.heads[task]["W"]
            if len(model.encoder.adapters):
                for name, g in model.encoder.backward_adapters(cache, d_pooled).items():
                    grads[f"adapter.{name}.A"] = g["A"]
                    grads[f"adapter.{name}.B"] = g["B"]
            optimizer.step(grads, lr_scale=lr_schedule(step, total_steps, cfg.warmup_frac))
            step += 1
            epoch_losses.append(loss)

        val_acc = _accuracy_on(model, val_texts, val_targets, cfg.tasks)
        log.append(epoch, float(np.mean(epoch_losses)), val_acc)
        avg = float(np.mean([val_acc[t] for t in cfg.tasks]))
        if avg > best_avg:
            best_avg, best_epoch, best_params = avg, epoch, model.snapshot()

    return TrainResult(best_params=best_params, final_params=model.snapshot(),
                       best_epoch=best_epoch, log=log, steps_taken=step,
                       class_weight_maps=weight_maps)


def _accuracy_on(model: MultiTaskModel, texts: list[str],
                 targets: dict[str, np.ndarray], tasks) -> dict[str, float]:
    preds = predict(model, texts)
    return {task: float(np.mean(preds[task]["indices"] == targets[task]))
            for task in tasks}


def run_manifest(cfg: TrainConfig, extra: dict) -> str:
    """Canonical JSON manifest embedding the resolved config and data hashes."""
    return json.dumps({"train_config": cfg.to_json(), **extra},
                      ensure_ascii=False, sort_keys=True, indent=2) + "\n"
