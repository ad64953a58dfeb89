"""Training loop, evaluation, the ablation / cell-count suite, attention dumps."""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CheckpointError, ContractError, DataError, NumericError
from .network import BRANCH_OKB, ModelConfig, RexupModel, indexed_samples
from .params import adam_step, checkpoint_bytes, clip_grad_norm, load_checkpoint, parse_checkpoint, save_checkpoint
from .synth import NOUNS, QUESTION_TYPES, RELATIONS, COLORS, MATERIALS, SIZES, DatasetSplit
from .vocab import Vocabulary, build_vocab

log = logging.getLogger(__name__)

REFERENCE_LR = 3e-4
REFERENCE_BATCH_SIZE = 128
REFERENCE_EPOCHS = 25

# command-line defaults (flag names); float32 for speed, see TrainConfig for the library defaults
TRAIN_DEFAULTS = {
    "d": 64,
    "cells": 4,
    "sgkb": True,
    "sd": True,
    "lr": REFERENCE_LR,
    "batch": 32,
    "epochs": 200,
    "seed": 0,
    "patience": 10,
    "dtype": "float32",
}
# desk-scale suite: 21 runs must fit in about an hour on one core, so the suite
# trains a narrower model with larger steps than the single-run defaults
SUITE_DEFAULTS = {
    **TRAIN_DEFAULTS,
    "d": 32,
    "lr": 2e-3,
    "batch": REFERENCE_BATCH_SIZE,
    "epochs": 40,
    "patience": 8,
    "seeds": [0, 1, 2],
}
# corpus shape the suite defaults were tuned on (see ``rexup gen``)
SUITE_CORPUS = {"scenes": 2000, "per_type_count": 1, "graph_count": 3}


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = REFERENCE_LR
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    checkpoint: str | None = None
    patience: int = 10
    clip_norm: float = 8.0
    eval_batch_size: int = 256
    eval_train: bool = False
    stop_at_train_accuracy: float | None = None
    max_steps: int | None = None
    check_attention: bool = False  # assert every attention distribution during training

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1 or self.eval_batch_size < 1:
            raise ContractError("learning rate, batch size and epochs must be positive")


@dataclass
class Metrics:
    accuracy: float
    count: int
    loss: float
    per_type: dict[str, float]
    per_type_count: dict[str, int]
    graph_accuracy: float | None = None
    graph_count: int = 0
    loss_curve: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    def weighted_type_mean(self) -> float:
        total = sum(self.per_type_count.values())
        return sum(self.per_type[t] * n for t, n in self.per_type_count.items()) / total if total else 0.0

    def rows(self) -> list[tuple[str, int, float]]:
        out = [(t, self.per_type_count[t], self.per_type[t]) for t in sorted(self.per_type)]
        if self.graph_count:
            out.append(("requires_graph", self.graph_count, self.graph_accuracy))
        out.append(("overall", self.count, self.accuracy))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["group", "count", "accuracy"])
        for name, n, acc in self.rows():
            w.writerow([name, n, f"{acc:.6f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'group':<16}{'count':>8}{'accuracy':>10}", "-" * 34]
        for name, n, acc in self.rows():
            lines.append(f"{name:<16}{n:>8}{acc * 100:>9.2f}%")
        lines.append(f"{'mean loss':<16}{'':>8}{self.loss:>10.4f}")
        return "\n".join(lines)


def metrics_from_predictions(
    predicted: Sequence[int],
    labels: Sequence[int],
    types: Sequence[str],
    requires_graph: Sequence[bool] | None = None,
    losses: Sequence[float] | None = None,
) -> Metrics:
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    correct = predicted == labels
    per_type, per_count = {}, {}
    types = np.asarray(types)
    for t in sorted(set(types.tolist())):
        sel = types == t
        per_type[t] = float(correct[sel].mean())
        per_count[t] = int(sel.sum())
    g_acc, g_n = None, 0
    if requires_graph is not None:
        rg = np.asarray(requires_graph, dtype=bool)
        g_n = int(rg.sum())
        g_acc = float(correct[rg].mean()) if g_n else None
    n = len(labels)
    return Metrics(
        accuracy=float(correct.mean()) if n else 0.0,
        count=n,
        loss=float(np.mean(losses)) if losses is not None and len(losses) else float("nan"),
        per_type=per_type,
        per_type_count=per_count,
        graph_accuracy=g_acc,
        graph_count=g_n,
    )


def corpus_vocab(split: DatasetSplit) -> Vocabulary:
    """Question tokens of ``split`` plus the closed object/attribute/relation ontology."""
    corpus: list[Sequence[str]] = [q.tokens for _, q in split.samples()]
    corpus.append(list(NOUNS + COLORS + SIZES + MATERIALS + RELATIONS))
    return build_vocab(corpus)


def _batches(items: list, size: int) -> Iterable[list]:
    for i in range(0, len(items), size):
        yield items[i : i + size]


def evaluate_model(model: RexupModel, split: DatasetSplit | list, batch_size: int = 256) -> Metrics:
    items = indexed_samples(split) if isinstance(split, DatasetSplit) else list(split)
    if not items:
        raise DataError("cannot evaluate an empty split")
    preds, labels, types, graph, losses = [], [], [], [], []
    for chunk in _batches(items, batch_size):
        batch = model.collate(chunk)
        out = model.forward(batch)
        p = out.distribution.probabilities
        preds.extend(out.distribution.predicted.tolist())
        labels.extend(batch.labels.tolist())
        types.extend(batch.types)
        graph.extend(batch.requires_graph.tolist())
        losses.extend((-np.log(np.maximum(p[np.arange(len(batch)), batch.labels], 1e-12))).tolist())
    return metrics_from_predictions(preds, labels, types, graph, losses)


def load_model(checkpoint) -> RexupModel:
    if isinstance(checkpoint, RexupModel):
        return checkpoint
    if isinstance(checkpoint, (bytes, bytearray)):
        store, meta = parse_checkpoint(bytes(checkpoint))
    else:
        store, meta = load_checkpoint(checkpoint)
    try:
        return RexupModel.from_checkpoint(store, meta)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match its recorded config: {exc}") from None


def evaluate(checkpoint, split: DatasetSplit, batch_size: int = 256) -> Metrics:
    """Metrics of a checkpoint (path, bytes, or model) on ``split``; parameters untouched."""
    return evaluate_model(load_model(checkpoint), split, batch_size)


@dataclass
class TrainResult:
    model: RexupModel
    checkpoint: bytes
    metrics: Metrics  # validation metrics of the selected (best) epoch, or training metrics
    history: list[dict]
    step_losses: list[float]
    best_epoch: int


def train(
    config: TrainConfig,
    train_split: DatasetSplit,
    val_split: DatasetSplit | None = None,
    vocab: Vocabulary | None = None,
    meta: dict | None = None,
) -> TrainResult:
    """Mini-batch Adam on cross-entropy; keeps the parameters of the best validation epoch."""
    items = indexed_samples(train_split)
    if not items:
        raise DataError("training split is empty")
    vocab = vocab or corpus_vocab(train_split)
    mcfg = replace(config.model, vocab_size=0)
    model = RexupModel(mcfg, vocab)
    model.check_attention = config.check_attention
    store = model.store
    order_rng = np.random.default_rng(config.seed)
    step_losses: list[float] = []
    history: list[dict] = []
    epoch_seconds: list[float] = []
    best_acc, best_epoch, best_snap, stale = -1.0, 0, store.snapshot(), 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        perm = order_rng.permutation(len(items))
        for bi, start in enumerate(range(0, len(items), config.batch_size)):
            chunk = [items[j] for j in perm[start : start + config.batch_size]]
            batch = model.collate(chunk)
            try:
                loss, out = model.loss(batch)
                model.backward(loss, out.tape)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {bi}, step {step + 1}: {exc}") from exc
            clip_grad_norm(store, config.clip_norm)
            adam_step(store, config.lr)
            step += 1
            step_losses.append(float(loss.data))
            if config.max_steps is not None and step >= config.max_steps:
                break
        epoch_seconds.append(time.perf_counter() - t0)
        record: dict = {"epoch": epoch, "train_loss": float(np.mean(step_losses[-(bi + 1) :])), "seconds": epoch_seconds[-1]}
        train_acc = None
        if config.eval_train or config.stop_at_train_accuracy is not None:
            train_acc = evaluate_model(model, items, config.eval_batch_size).accuracy
            record["train_accuracy"] = train_acc
        if val_split is not None and len(val_split):
            vm = evaluate_model(model, val_split, config.eval_batch_size)
            record["val_accuracy"] = vm.accuracy
            record["val_graph_accuracy"] = vm.graph_accuracy
            score = vm.accuracy
        else:
            score = train_acc if train_acc is not None else -record["train_loss"]
        history.append(record)
        log.info("epoch %d %s", epoch, {k: v for k, v in record.items() if k != "epoch"})
        if score > best_acc:
            best_acc, best_epoch, best_snap, stale = score, epoch, store.snapshot(), 0
        else:
            stale += 1
        if config.stop_at_train_accuracy is not None and train_acc is not None and train_acc >= config.stop_at_train_accuracy:
            break
        if config.max_steps is not None and step >= config.max_steps:
            break
        if val_split is not None and config.patience and stale >= config.patience:
            break
    store.restore(best_snap)
    final = evaluate_model(model, val_split if val_split is not None and len(val_split) else items, config.eval_batch_size)
    final.loss_curve = step_losses
    final.epoch_seconds = epoch_seconds
    full_meta = {**model.meta(), "train": {"lr": config.lr, "batch_size": config.batch_size, "seed": config.seed, "best_epoch": best_epoch}}
    full_meta.update(meta or {})
    blob = checkpoint_bytes(store, full_meta)
    if config.checkpoint:
        save_checkpoint(config.checkpoint, store, full_meta)
    return TrainResult(model, blob, final, history, step_losses, best_epoch)


# --------------------------------------------------------------------------
# suite
# --------------------------------------------------------------------------

ABLATION_GRID = ((False, False), (True, False), (False, True), (True, True))  # (sd, sgkb)


@dataclass
class SuiteRow:
    label: str
    sd: bool
    sgkb: bool
    cells: int
    params: int
    accuracy: list[float]
    graph_accuracy: list[float]
    loss_first: list[float]
    loss_last: list[float]

    @property
    def median_accuracy(self) -> float:
        return statistics.median(self.accuracy)

    @property
    def median_graph_accuracy(self) -> float:
        return statistics.median(self.graph_accuracy)


@dataclass
class SuiteReport:
    ablation: list[SuiteRow]
    sweep: list[SuiteRow]
    seeds: tuple[int, ...]
    param_names: dict[str, list[str]]

    def to_markdown(self) -> str:
        mark = lambda b: "O" if b else "X"  # noqa: E731
        out = [
            "# REXUP desk-scale suite",
            "",
            f"Synthetic data, medians over seeds {list(self.seeds)}. These are desk-scale numbers on a synthetic",
            "corpus and are not comparable to absolute GQA accuracies.",
            "",
            "## Ablation",
            "",
            "| # | OKB | SD | SGKB | Val (%) | Graph-only val (%) | Params |",
            "|---|-----|----|------|---------|--------------------|--------|",
        ]
        for i, r in enumerate(self.ablation, 1):
            out.append(
                f"| {i} | O | {mark(r.sd)} | {mark(r.sgkb)} | {r.median_accuracy * 100:.2f} | "
                f"{r.median_graph_accuracy * 100:.2f} | {r.params} |"
            )
        out += ["", "## Number of cells", "", "| # of cells | Val (%) | Graph-only val (%) |", "|---|---|---|"]
        for r in self.sweep:
            out.append(f"| {r.cells} | {r.median_accuracy * 100:.2f} | {r.median_graph_accuracy * 100:.2f} |")
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["table", "label", "sd", "sgkb", "cells", "params", "seed", "val_accuracy", "graph_accuracy"])
        for table, rows in (("ablation", self.ablation), ("cells", self.sweep)):
            for r in rows:
                for s, a, g in zip(self.seeds, r.accuracy, r.graph_accuracy):
                    w.writerow([table, r.label, int(r.sd), int(r.sgkb), r.cells, r.params, s, f"{a:.6f}", f"{g:.6f}"])
        return buf.getvalue()


def _tail_median(xs: list[float], frac: float, head: bool) -> float:
    k = max(1, int(len(xs) * frac))
    return float(np.median(xs[:k] if head else xs[-k:]))


def run_suite(
    splits: dict[str, DatasetSplit],
    base: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    cells: Sequence[int] = (1, 2, 3, 4),
) -> SuiteReport:
    """Train the four SD/SGKB ablation configurations and the cell-count sweep."""
    train_split, val_split = splits["train"], splits["val"]
    vocab = corpus_vocab(train_split)
    cache: dict[tuple, SuiteRow] = {}
    names: dict[str, list[str]] = {}

    def run(label: str, sd: bool, sgkb: bool, p: int) -> SuiteRow:
        key = (sd, sgkb, p)
        if key in cache:
            return replace(cache[key], label=label)
        accs, gaccs, first, last, params = [], [], [], [], 0
        for s in seeds:
            mcfg = replace(base.model, use_sd_fusion=sd, use_sgkb_branch=sgkb, cells=p, seed=s)
            res = train(replace(base, model=mcfg, seed=s, checkpoint=None), train_split, val_split, vocab)
            accs.append(res.metrics.accuracy)
            gaccs.append(res.metrics.graph_accuracy if res.metrics.graph_accuracy is not None else float("nan"))
            first.append(_tail_median(res.step_losses, 0.1, head=True))
            last.append(_tail_median(res.step_losses, 0.1, head=False))
            params = res.model.num_params()
            names[label] = res.model.store.names()
            log.info("suite %s seed %d: val %.4f graph %.4f", label, s, accs[-1], gaccs[-1])
        row = SuiteRow(label, sd, sgkb, p, params, accs, gaccs, first, last)
        cache[key] = row
        return row

    ablation = [
        run(f"ablation-{i}", sd, sg, base.model.cells) for i, (sd, sg) in enumerate(ABLATION_GRID, 1)
    ]
    sweep = [run(f"cells-{p}", True, True, p) for p in cells]
    return SuiteReport(ablation, sweep, tuple(seeds), names)


# --------------------------------------------------------------------------
# attention dumps
# --------------------------------------------------------------------------


def dump_attention(checkpoint, split: DatasetSplit, sample: str, out_path=None) -> dict:
    """Per-step, per-branch attention for one sample; written as JSON when ``out_path`` is given."""
    model = load_model(checkpoint)
    items = {sid: (sid, g, q) for sid, g, q in indexed_samples(split)}
    if sample not in items:
        raise DataError(f"unknown sample id {sample!r}")
    sid, graph, q = items[sample]
    batch = model.collate([items[sample]])
    out = model.forward(batch)
    n_words, n_objects = len(q.tokens), len(graph.objects)
    pred = int(out.distribution.predicted[0])
    doc = {
        "sample_id": sid,
        "tokens": list(q.tokens),
        "objects": [{"id": o.id, "name": o.name, "box": list(o.box)} for o in graph.objects],
        "question_type": q.type,
        "predicted": model.answers[pred],
        "gold": q.answer,
        "records": [rec.sample(0, n_words, n_objects) for rec in out.trace],
    }
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(doc, indent=2))
    return doc


def attention_probe(model: RexupModel, split: DatasetSplit, n: int = 50, branch: str = BRANCH_OKB) -> float:
    """Share of colour queries whose final-step KB attention peaks on the queried object.

    Uses the first ``n`` "what color is the X" questions of ``split``.
    """
    probes = []
    for sid, graph, q in indexed_samples(split):
        if q.tokens[:2] == ["what", "color"] and not q.requires_graph:
            target = [o.name for o in graph.objects].index(q.tokens[-1])
            probes.append(((sid, graph, q), target))
            if len(probes) == n:
                break
    if not probes:
        raise DataError("split has no colour questions to probe")
    out = model.forward(model.collate([item for item, _ in probes]))
    last = max(rec.step for rec in out.trace if rec.branch == branch)
    (rec,) = [rec for rec in out.trace if rec.branch == branch and rec.step == last]
    hits = np.argmax(rec.kb_attention, axis=1) == np.array([t for _, t in probes])
    return float(hits.mean())


__all__ = [
    "TrainConfig",
    "Metrics",
    "TrainResult",
    "SuiteReport",
    "train",
    "evaluate",
    "evaluate_model",
    "run_suite",
    "dump_attention",
    "attention_probe",
    "metrics_from_predictions",
    "QUESTION_TYPES",
]
