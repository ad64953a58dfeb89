"""Question, object-region and scene-graph encoders.

All encoders are batched: question tokens arrive as a padded ``(B, U)`` index
array with per-row lengths, knowledge bases as ``(B, O, ...)`` arrays with a
``(B, O)`` validity mask. Rows of absent objects are forced to exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, GraphValidationError, ValidationError
from .params import ParamStore, ParamView
from .tensor import Tensor
from .vocab import Vocabulary

BOX_WIDTH = 6
MAX_REGIONS = 100


@dataclass
class RawRegion:
    feature: np.ndarray
    box: tuple[float, ...]  # x1, y1, x2, y2, width, height


@dataclass
class QuestionEncoding:
    words: Tensor  # (B, U, d)
    sentence: Tensor  # (B, 2d): [final backward state, final forward state]
    mask: np.ndarray  # (B, U) bool
    lengths: np.ndarray  # (B,)


@dataclass
class KnowledgeBase:
    rows: Tensor  # (B, O, d)
    mask: np.ndarray  # (B, O) bool
    variant: str  # "object-region" | "scene-graph"


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


def init_question_params(store: ParamStore, embed_width: int, d: int, rng: np.random.Generator) -> None:
    for direction in ("fw", "bw"):
        store.xavier(f"question.{direction}.W", embed_width + d, 4 * d, rng)
        bias = np.zeros(4 * d)
        bias[d : 2 * d] = 1.0  # forget gate
        store.add(f"question.{direction}.b", bias)
    store.xavier("question.proj.W", 2 * d, d, rng)
    store.zeros("question.proj.b", d)


def init_region_params(store: ParamStore, prefix: str, feature_width: int, d: int, rng) -> None:
    store.xavier(f"{prefix}W", feature_width + BOX_WIDTH, d, rng)
    store.zeros(f"{prefix}b", d)


def init_graph_params(store: ParamStore, prefix: str, embed_width: int, d: int, rng) -> None:
    store.xavier(f"{prefix}W", 3 * embed_width, d, rng)
    store.zeros(f"{prefix}b", d)


# --------------------------------------------------------------------------
# question
# --------------------------------------------------------------------------


def pad_tokens(seqs: Sequence[Sequence[int]], max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    if any(len(s) == 0 for s in seqs):
        raise ContractError("question has no tokens")
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if max_len is not None and lengths.max() > max_len:
        raise ContractError(f"question longer than the configured maximum of {max_len} tokens")
    out = np.zeros((len(seqs), int(lengths.max())), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def _lstm_sweep(x: Tensor, mask: np.ndarray, W: Tensor, b: Tensor, d: int, reverse: bool) -> list[Tensor]:
    B, U = mask.shape
    dtype = x.data.dtype
    h = Tensor(np.zeros((B, d), dtype=dtype))
    c = Tensor(np.zeros((B, d), dtype=dtype))
    states: list[Tensor | None] = [None] * U
    steps = range(U - 1, -1, -1) if reverse else range(U)
    for t in steps:
        xt = T.select(x, 1, t)
        hc = T.lstm_pointwise(T.linear(T.concat_last(xt, h), W, b), c)
        h_new, c_new = T.slice_last(hc, 0, d), T.slice_last(hc, d, 2 * d)
        m = mask[:, t]
        if m.all():
            h, c = h_new, c_new
        else:
            keep = m[:, None].astype(dtype)
            h = T.add(T.mul(h_new, keep), T.mul(h, 1.0 - keep))
            c = T.add(T.mul(c_new, keep), T.mul(c, 1.0 - keep))
        states[t] = h
    return states


def encode_question(tokens, lengths, pv: ParamView, d: int) -> QuestionEncoding:
    """Embed, run a bidirectional LSTM, project per-word states to width ``d``.

    ``tokens`` is (B, U) (or a single 1-D sequence); positions at or beyond a
    row's length are padding.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
        lengths = [len(tokens[0])] if lengths is None else lengths
    lengths = np.asarray(lengths, dtype=np.int64)
    if tokens.shape[1] == 0 or lengths.min() < 1:
        raise ContractError("question has no tokens")
    U = tokens.shape[1]
    mask = np.arange(U)[None, :] < lengths[:, None]
    x = T.take_rows(pv("embed"), tokens)
    fw = _lstm_sweep(x, mask, pv("question.fw.W"), pv("question.fw.b"), d, reverse=False)
    bw = _lstm_sweep(x, mask, pv("question.bw.W"), pv("question.bw.b"), d, reverse=True)
    both = T.stack([T.concat_last(f, r) for f, r in zip(fw, bw)], axis=1)  # (B, U, 2d)
    words = T.linear(both, pv("question.proj.W"), pv("question.proj.b"))
    if not mask.all():
        words = T.mul(words, mask[:, :, None].astype(x.data.dtype))
    sentence = T.concat_last(bw[0], fw[-1])
    return QuestionEncoding(words, sentence, mask, lengths)


# --------------------------------------------------------------------------
# object regions
# --------------------------------------------------------------------------


def validate_regions(regions: Sequence[RawRegion], cap: int = MAX_REGIONS) -> None:
    if not regions:
        raise ContractError("knowledge base needs at least one region")
    if len(regions) > cap:
        raise ContractError(f"{len(regions)} regions exceed the cap of {cap}")
    for i, r in enumerate(regions):
        box = np.asarray(r.box, dtype=float)
        if box.shape != (BOX_WIDTH,):
            raise ValidationError(f"region {i}: box must have {BOX_WIDTH} numbers")
        if np.any(box < 0.0) or np.any(box > 1.0) or box[0] > box[2] or box[1] > box[3]:
            raise ValidationError(f"region {i}: box {tuple(box)} is outside the unit square or inverted")


def stack_regions(batch: Sequence[Sequence[RawRegion]], cap: int = MAX_REGIONS):
    """Pad lists of regions into ``(features, boxes, mask)`` arrays."""
    for regions in batch:
        validate_regions(regions, cap)
    O = max(len(r) for r in batch)
    f = len(batch[0][0].feature)
    feats = np.zeros((len(batch), O, f))
    boxes = np.zeros((len(batch), O, BOX_WIDTH))
    mask = np.zeros((len(batch), O), dtype=bool)
    for i, regions in enumerate(batch):
        for j, r in enumerate(regions):
            feats[i, j] = r.feature
            boxes[i, j] = r.box
            mask[i, j] = True
    return feats, boxes, mask


def encode_object_regions(features, boxes, mask, pv: ParamView) -> KnowledgeBase:
    """Each row is ``W [feature, box] + b``; absent rows are zeroed."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or not mask.any(axis=1).all():
        raise ContractError("every sample needs at least one valid region")
    dtype = pv.tape.dtype
    inp = np.concatenate([np.asarray(features, dtype=dtype), np.asarray(boxes, dtype=dtype)], axis=-1)
    rows = T.linear(Tensor(inp), pv("W"), pv("b"))
    if not mask.all():
        rows = T.mul(rows, mask[:, :, None].astype(dtype))
    return KnowledgeBase(rows, mask, "object-region")


# --------------------------------------------------------------------------
# scene graph
# --------------------------------------------------------------------------


def graph_weights(graph, vocab: Vocabulary, n_rows: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vocabulary-weight matrices for the name, attribute and relation slots of each object.

    Multiplying each (O, V) matrix by the embedding table yields, per object: the
    name embedding, the mean attribute embedding, and the mean over outgoing
    edges of mean(relation embedding, target-name embedding). Empty sets give
    zero rows.
    """
    graph.validate()
    objs = graph.objects
    n_rows = len(objs) if n_rows is None else n_rows
    V = len(vocab)
    pos = {o.id: i for i, o in enumerate(objs)}
    name = np.zeros((n_rows, V))
    attr = np.zeros((n_rows, V))
    rel = np.zeros((n_rows, V))
    for i, o in enumerate(objs):
        name[i, vocab.lookup(o.name)] = 1.0
        for a in o.attributes:
            attr[i, vocab.lookup(a)] += 1.0 / len(o.attributes)
    outgoing: dict[int, list[tuple[str, int]]] = {}
    for s, r, t in graph.edges:
        outgoing.setdefault(s, []).append((r, t))
    for s, links in outgoing.items():
        i = pos[s]
        for r, t in links:
            rel[i, vocab.lookup(r)] += 0.5 / len(links)
            rel[i, vocab.lookup(objs[pos[t]].name)] += 0.5 / len(links)
    return name, attr, rel


def scene_graph_features(embed: Tensor, name, attr, rel) -> Tensor:
    """Concatenated ``[name, attribute, relation]`` features, width 3e, before projection."""
    dtype = embed.data.dtype
    parts = [T.matmul(Tensor(np.asarray(w, dtype=dtype)), embed) for w in (name, attr, rel)]
    return T.concat_last(*parts)


def encode_scene_graph(name, attr, rel, mask, pv: ParamView, graph_pv: ParamView) -> KnowledgeBase:
    """Project scene-graph features (batched weight matrices ``(B, O, V)``) to width ``d``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise GraphValidationError("scene graph has no objects")
    feats = scene_graph_features(pv("embed"), name, attr, rel)
    rows = T.linear(feats, graph_pv("W"), graph_pv("b"))
    if not mask.all():
        rows = T.mul(rows, mask[:, :, None].astype(feats.data.dtype))
    return KnowledgeBase(rows, mask, "scene-graph")
