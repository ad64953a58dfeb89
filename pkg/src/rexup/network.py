"""Dual-branch network: shared question encoder, object-region and scene-graph
branches of P cells each, and a two-layer answer classifier on
``[m_okb, m_sg, W q]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .cell import AttentionRecord, CellState, init_cell_params, initial_state, run_cell
from .encoders import (
    KnowledgeBase,
    encode_object_regions,
    encode_question,
    encode_scene_graph,
    graph_weights,
    init_graph_params,
    init_question_params,
    init_region_params,
    pad_tokens,
    stack_regions,
)
from .errors import ConfigError, DataError, DegenerateAttentionError
from .params import ParamStore, ParamView
from .synth import ANSWERS, DatasetSplit, QASample, SceneGraph, derive_region_features
from .tensor import DTYPES, Tape, Tensor
from .vocab import PAD_ID, EmbeddingTable, Vocabulary, load_or_init_embeddings

BRANCH_OKB = "okb"
BRANCH_SG = "sgkb"


@dataclass
class ModelConfig:
    d: int = 64
    cells: int = 4
    fusion_rank: int | None = None  # None -> 4 * d
    n_answers: int = len(ANSWERS)
    vocab_size: int = 0
    embed_width: int = 32
    feature_width: int = 64
    use_sgkb_branch: bool = True
    use_sd_fusion: bool = True
    max_words: int = 32
    max_objects: int = 100
    gate_bias: float = 1.0
    freeze_embeddings: bool = False
    noise_scale: float = 0.05
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.cells < 1:
            raise ConfigError("cells (P) must be >= 1")
        if self.d < 2:
            raise ConfigError("d must be >= 2")
        if self.fusion_rank is not None and self.fusion_rank < 1:
            raise ConfigError("fusion rank must be >= 1")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def rank(self) -> int:
        return 4 * self.d if self.fusion_rank is None else self.fusion_rank

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class AnswerDistribution:
    probabilities: np.ndarray  # (B, A)

    @property
    def predicted(self) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest index
        return np.argmax(self.probabilities, axis=-1)


@dataclass
class Batch:
    tokens: np.ndarray  # (B, U)
    lengths: np.ndarray
    features: np.ndarray  # (B, O, f)
    boxes: np.ndarray  # (B, O, 6)
    object_mask: np.ndarray  # (B, O)
    graph_name: np.ndarray  # (B, O, V)
    graph_attr: np.ndarray
    graph_rel: np.ndarray
    labels: np.ndarray  # (B,)
    types: list[str] = field(default_factory=list)
    requires_graph: np.ndarray | None = None
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class ForwardResult:
    logits: Tensor
    distribution: AnswerDistribution
    trace: list[AttentionRecord]
    tape: Tape


def sample_id(scene_id: str, index: int) -> str:
    return f"{scene_id}/{index}"


def indexed_samples(split: DatasetSplit) -> list[tuple[str, SceneGraph, QASample]]:
    out = []
    for rec in split.scenes:
        for j, q in enumerate(rec.questions):
            out.append((sample_id(rec.scene_id, j), rec.graph, q))
    return out


class FeatureCache:
    """Region features are regenerated deterministically per scene; cache them."""

    def __init__(self, feature_width: int, noise_scale: float):
        self.feature_width = feature_width
        self.noise_scale = noise_scale
        self._cache: dict[str, list] = {}

    def __call__(self, graph: SceneGraph):
        regions = self._cache.get(graph.scene_id)
        if regions is None:
            regions = derive_region_features(graph, self.feature_width, self.noise_scale)
            self._cache[graph.scene_id] = regions
        return regions


def collate(
    items: Sequence[tuple[str, SceneGraph, QASample]],
    vocab: Vocabulary,
    answers: Sequence[str],
    features: FeatureCache,
    config: ModelConfig,
) -> Batch:
    answer_index = {a: i for i, a in enumerate(answers)}
    tokens, lengths = pad_tokens([vocab.encode(q.tokens) for _, _, q in items], config.max_words)
    feats, boxes, mask = stack_regions([features(g) for _, g, _ in items], config.max_objects)
    B, O = mask.shape
    V = len(vocab)
    gn, ga, gr = (np.zeros((B, O, V)) for _ in range(3))
    if config.use_sgkb_branch:
        for i, (_, g, _) in enumerate(items):
            n, a, r = graph_weights(g, vocab, O)
            gn[i], ga[i], gr[i] = n, a, r
    labels = []
    for sid, _, q in items:
        if q.answer not in answer_index:
            raise DataError(f"sample {sid}: answer {q.answer!r} is not in the answer vocabulary")
        labels.append(answer_index[q.answer])
    return Batch(
        tokens,
        lengths,
        feats,
        boxes,
        mask,
        gn,
        ga,
        gr,
        np.array(labels, dtype=np.int64),
        [q.type for _, _, q in items],
        np.array([q.requires_graph for _, _, q in items], dtype=bool),
        [sid for sid, _, _ in items],
    )


def check_attention(trace: Sequence[AttentionRecord], word_mask: np.ndarray, object_mask: np.ndarray, tol: float = 1e-6) -> int:
    """Assert every distribution is non-negative, sums to 1, and is exactly 0 on masked slots.

    Returns the number of distributions checked.
    """
    n = 0
    for rec in trace:
        for dist, mask, what in ((rec.question_attention, word_mask, "question"), (rec.kb_attention, object_mask, "kb")):
            if np.any(dist < 0) or np.any(np.abs(dist.sum(axis=-1) - 1.0) > tol):
                raise DegenerateAttentionError(f"{what} attention at step {rec.step} ({rec.branch}) is not a distribution")
            if np.any(dist[~mask] != 0.0):
                raise DegenerateAttentionError(f"{what} attention at step {rec.step} ({rec.branch}) leaks onto masked slots")
            n += dist.shape[0]
    return n


class RexupModel:
    def __init__(
        self,
        config: ModelConfig,
        vocab: Vocabulary,
        answers: Sequence[str] = ANSWERS,
        store: ParamStore | None = None,
        embeddings: EmbeddingTable | None = None,
    ):
        if config.vocab_size and config.vocab_size != len(vocab):
            raise ConfigError(f"config vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        config.vocab_size = len(vocab)
        if config.n_answers != len(answers):
            raise ConfigError(f"config n_answers {config.n_answers} != {len(answers)} answers")
        self.config = config
        self.vocab = vocab
        self.answers = list(answers)
        self.features = FeatureCache(config.feature_width, config.noise_scale)
        self.check_attention = False
        self.attention_checks = 0
        if store is None:
            store = self._init_params(embeddings)
        else:
            self._validate_store(store)
        self.store = store

    # parameters -----------------------------------------------------------

    def _init_params(self, embeddings: EmbeddingTable | None) -> ParamStore:
        c = self.config
        rng = np.random.default_rng(c.seed)
        store = ParamStore(c.dtype)
        if embeddings is None:
            embeddings = load_or_init_embeddings(self.vocab, c.embed_width, seed=c.seed, trainable=not c.freeze_embeddings)
        if embeddings.matrix.shape != (len(self.vocab), c.embed_width):
            raise ConfigError(f"embedding table shape {embeddings.matrix.shape} does not fit the config")
        store.add("embed", embeddings.matrix)
        init_question_params(store, c.embed_width, c.d, rng)
        init_region_params(store, "okb.enc.", c.feature_width, c.d, rng)
        init_cell_params(store, "okb.cell.", c.d, c.cells, rng, c.rank if c.use_sd_fusion else None, c.gate_bias)
        if c.use_sgkb_branch:
            init_graph_params(store, "sgkb.enc.", c.embed_width, c.d, rng)
            init_cell_params(store, "sgkb.cell.", c.d, c.cells, rng, None, c.gate_bias)
        n_branches = 2 if c.use_sgkb_branch else 1
        store.xavier("cls.q.W", 2 * c.d, c.d, rng)
        store.zeros("cls.q.b", c.d)
        store.xavier("cls.hidden.W", (n_branches + 1) * c.d, c.d, rng)
        store.zeros("cls.hidden.b", c.d)
        store.xavier("cls.out.W", c.d, len(self.answers), rng)
        store.zeros("cls.out.b", len(self.answers))
        return store

    def _validate_store(self, store: ParamStore) -> None:
        reference = RexupModel(ModelConfig.from_dict(self.config.to_dict()), self.vocab, self.answers)
        expected = {k: reference.store.value(k).shape for k in reference.store.names()}
        got = {k: store.value(k).shape for k in store.names()}
        if expected != got:
            missing = sorted(set(expected) ^ set(got))
            raise ConfigError(f"parameter store does not match the model config (differs on {missing[:5]} ...)")

    def num_params(self) -> int:
        return self.store.num_params()

    # forward --------------------------------------------------------------

    def collate(self, items) -> Batch:
        return collate(items, self.vocab, self.answers, self.features, self.config)

    def forward(self, batch: Batch, check_finite: bool = True) -> ForwardResult:
        c = self.config
        tape = Tape(DTYPES[c.dtype], check_finite)
        pv = ParamView(tape, self.store)
        qenc = encode_question(batch.tokens, batch.lengths, pv, c.d)
        branches: list[tuple[str, KnowledgeBase, ParamView, bool]] = []
        okb = encode_object_regions(batch.features, batch.boxes, batch.object_mask, pv.child("okb.enc."))
        branches.append((BRANCH_OKB, okb, pv.child("okb.cell."), c.use_sd_fusion))
        if c.use_sgkb_branch:
            sg = encode_scene_graph(batch.graph_name, batch.graph_attr, batch.graph_rel, batch.object_mask, pv, pv.child("sgkb.enc."))
            branches.append((BRANCH_SG, sg, pv.child("sgkb.cell."), False))
        memories, trace = [], []
        B = len(batch)
        for name, kb, cpv, use_sd in branches:
            state: CellState = initial_state(cpv, B)
            for i in range(1, c.cells + 1):
                state, rec = run_cell(state, qenc.sentence, qenc.words, qenc.mask, kb, i, cpv, use_sd, name)
                trace.append(rec)
            memories.append(state.memory)
        qproj = T.linear(qenc.sentence, pv("cls.q.W"), pv("cls.q.b"))
        hidden = T.tanh(T.linear(T.concat_last(*memories, qproj), pv("cls.hidden.W"), pv("cls.hidden.b")))
        logits = T.linear(hidden, pv("cls.out.W"), pv("cls.out.b"))
        probs = T.softmax_rows(logits.data)
        if self.check_attention:
            self.attention_checks += check_attention(trace, qenc.mask, batch.object_mask)
        return ForwardResult(logits, AnswerDistribution(probs.data), trace, tape)

    def loss(self, batch: Batch) -> tuple[Tensor, ForwardResult]:
        out = self.forward(batch)
        return T.cross_entropy(out.logits, batch.labels), out

    def backward(self, loss: Tensor, tape: Tape) -> None:
        tape.backward(loss, self.store)
        if "embed" in self.store:
            g = self.store.grad("embed")
            if self.config.freeze_embeddings:
                g.fill(0.0)
            else:
                g[PAD_ID] = 0.0

    def predict(self, items) -> tuple[np.ndarray, np.ndarray]:
        out = self.forward(self.collate(items))
        return out.distribution.predicted, out.distribution.probabilities

    # checkpoint metadata ----------------------------------------------------

    def meta(self) -> dict:
        return {"config": self.config.to_dict(), "vocab": list(self.vocab.tokens), "answers": list(self.answers)}

    @classmethod
    def from_checkpoint(cls, store: ParamStore, meta: dict) -> "RexupModel":
        try:
            config = ModelConfig.from_dict(meta["config"])
            vocab = Vocabulary(list(meta["vocab"]))
            answers = list(meta["answers"])
        except KeyError as exc:
            raise ConfigError(f"checkpoint metadata lacks {exc}") from None
        return cls(config, vocab, answers, store=store)


def loss_and_metrics(probabilities, label: int, eps: float = 1e-12) -> tuple[float, bool]:
    """Negative log-probability of ``label`` (clamped) and whether argmax hits it."""
    p = np.asarray(probabilities, dtype=float)
    if not 0 <= label < p.shape[-1]:
        raise DataError(f"label {label} out of range for {p.shape[-1]} answers")
    return float(-np.log(max(p[label], eps))), bool(int(np.argmax(p)) == label)
