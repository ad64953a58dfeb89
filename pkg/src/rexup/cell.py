"""The reason / extract / update cell and super-diagonal fusion.

Gate weights are shared across the P steps of a branch; only the per-step
question projection ``qpos.{i}`` differs. Parameter names (under a branch
prefix such as ``okb.cell.``)::

    qpos.{i}.W (2d, d)   qpos.{i}.b (d)        per-step question projection
    reason.W (2d, d)     reason.b              [r_prev, q_i] -> rq
    reason.attn.W (d, 1) reason.attn.b (1)     word logits
    extract.mem.W/.b     extract.kb.W/.b       memory and KB projections
    extract.cat.W (2d, d)/.b                   [SI, kb] -> SI'
    extract.interact.W/.b                      interaction -> ea
    extract.logit.W (d, 1)/.b                  ea -> scalar object logit
    fusion.left (d, R) fusion.right (d, R) fusion.out (R, d)   (object branch with SD only)
    update.W (2d, d)/.b  update.gate.W (d, 1)/.b
    r0 (d) m0 (d)                              learned initial state
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import KnowledgeBase
from .errors import ConfigError
from .params import ParamStore, ParamView
from .tensor import Tensor


@dataclass
class CellState:
    reasoning: Tensor  # (B, d)
    memory: Tensor  # (B, d)


@dataclass
class AttentionRecord:
    """Attention of one step in one branch, for a whole batch."""

    step: int
    branch: str
    question_attention: np.ndarray  # (B, U)
    kb_attention: np.ndarray  # (B, O)

    def sample(self, i: int, n_words: int | None = None, n_objects: int | None = None) -> dict:
        qa = self.question_attention[i][:n_words]
        ka = self.kb_attention[i][:n_objects]
        return {
            "step": self.step,
            "branch": self.branch,
            "question_attention": [float(x) for x in qa],
            "kb_attention": [float(x) for x in ka],
        }


def init_cell_params(
    store: ParamStore,
    prefix: str,
    d: int,
    n_cells: int,
    rng: np.random.Generator,
    fusion_rank: int | None = None,
    gate_bias: float = 1.0,
) -> None:
    """Create one branch's cell parameters. ``fusion_rank`` adds SD-fusion factors."""
    for i in range(1, n_cells + 1):
        store.xavier(f"{prefix}qpos.{i}.W", 2 * d, d, rng)
        store.zeros(f"{prefix}qpos.{i}.b", d)
    store.xavier(f"{prefix}reason.W", 2 * d, d, rng)
    store.zeros(f"{prefix}reason.b", d)
    store.xavier(f"{prefix}reason.attn.W", d, 1, rng)
    store.zeros(f"{prefix}reason.attn.b", 1)
    for name, fan_in in (("extract.mem", d), ("extract.kb", d), ("extract.cat", 2 * d), ("extract.interact", d)):
        store.xavier(f"{prefix}{name}.W", fan_in, d, rng)
        store.zeros(f"{prefix}{name}.b", d)
    store.xavier(f"{prefix}extract.logit.W", d, 1, rng)
    store.zeros(f"{prefix}extract.logit.b", 1)
    if fusion_rank is not None:
        if fusion_rank < 1:
            raise ConfigError("fusion rank must be >= 1")
        # the first min(d, R) ranks start as the elementwise product, the rest as small noise
        k = min(d, fusion_rank)
        for name, shape in (("left", (d, fusion_rank)), ("right", (d, fusion_rank)), ("out", (fusion_rank, d))):
            value = 0.1 * rng.normal(0.0, np.sqrt(2.0 / sum(shape)), size=shape)
            value[np.arange(k), np.arange(k)] += 1.0
            store.add(f"{prefix}fusion.{name}", value)
    store.xavier(f"{prefix}update.W", 2 * d, d, rng)
    store.zeros(f"{prefix}update.b", d)
    store.xavier(f"{prefix}update.gate.W", d, 1, rng)
    store.constant(f"{prefix}update.gate.b", 1, gate_bias)
    store.zeros(f"{prefix}r0", d)
    store.zeros(f"{prefix}m0", d)


def initial_state(pv: ParamView, batch: int) -> CellState:
    r0, m0 = pv("r0"), pv("m0")
    d = r0.shape[0]
    return CellState(T.broadcast_to(r0, (batch, d)), T.broadcast_to(m0, (batch, d)))


def _row(x: Tensor) -> Tensor:
    """(B, d) -> (B, 1, d) so it broadcasts against per-word / per-object rows."""
    return T.reshape(x, (x.shape[0], 1, x.shape[1]))


def reason_gate(q: Tensor, words: Tensor, word_mask, prev: CellState, cell_index: int, pv: ParamView):
    """Attend over question words; returns ``(r_i, rv)``."""
    if f"qpos.{cell_index}.W" not in pv:
        raise ConfigError(f"no question projection for cell {cell_index}")
    q_i = T.linear(q, pv(f"qpos.{cell_index}.W"), pv(f"qpos.{cell_index}.b"))
    rq = T.linear(T.concat_last(prev.reasoning, q_i), pv("reason.W"), pv("reason.b"))
    inter = T.mul(_row(rq), words)
    ra = T.linear(inter, pv("reason.attn.W"), pv("reason.attn.b"))
    rv = T.softmax_rows(T.reshape(ra, ra.shape[:-1]), word_mask)
    return T.weighted_sum(rv, words), rv


def superdiagonal_fuse(x: Tensor, y: Tensor, left: Tensor, right: Tensor, out: Tensor) -> Tensor:
    """Rank-R CP contraction: ``((x @ left) * (y @ right)) @ out``.

    Equivalent to ``z_k = sum_ab T[a,b,k] x_a y_b`` with
    ``T[a,b,k] = sum_r left[a,r] right[b,r] out[r,k]``.
    """
    if left.shape[-1] < 1 or right.shape[-1] != left.shape[-1] or out.shape[0] != left.shape[-1]:
        raise ConfigError(f"fusion factors disagree on rank: {left.shape}, {right.shape}, {out.shape}")
    return T.matmul(T.mul(T.matmul(x, left), T.matmul(y, right)), out)


def extract_gate(r: Tensor, m_prev: Tensor, kb: KnowledgeBase, pv: ParamView, use_sd: bool = False):
    """Attend over knowledge-base rows; returns ``(e_i, ev)``.

    The object-region KB interacts with ``r_i`` through SD fusion when
    ``use_sd`` is set, otherwise by elementwise product (the scene-graph rule).
    """
    if use_sd and kb.variant != "object-region":
        raise ConfigError("super-diagonal fusion applies only to the object-region branch")
    if use_sd and "fusion.left" not in pv:
        raise ConfigError("use_sd is set but the branch has no fusion parameters")
    rows = kb.rows
    si = T.mul(_row(T.linear(m_prev, pv("extract.mem.W"), pv("extract.mem.b"))), T.linear(rows, pv("extract.kb.W"), pv("extract.kb.b")))
    si2 = T.linear(T.concat_last(si, rows), pv("extract.cat.W"), pv("extract.cat.b"))
    if use_sd:
        fused = superdiagonal_fuse(_row(r), si2, pv("fusion.left"), pv("fusion.right"), pv("fusion.out"))
    else:
        fused = T.mul(_row(r), si2)
    ea = T.linear(fused, pv("extract.interact.W"), pv("extract.interact.b"))
    logits = T.linear(ea, pv("extract.logit.W"), pv("extract.logit.b"))
    ev = T.softmax_rows(T.reshape(logits, logits.shape[:-1]), kb.mask)
    return T.weighted_sum(ev, rows), ev


def update_gate(e: Tensor, r: Tensor, m_prev: Tensor, pv: ParamView) -> Tensor:
    """``m = s * m_prev + (1 - s) * (W [e, m_prev] + b)`` with ``s = sigmoid(w . r + b)``."""
    candidate = T.linear(T.concat_last(e, m_prev), pv("update.W"), pv("update.b"))
    s = T.sigmoid(T.linear(r, pv("update.gate.W"), pv("update.gate.b")))
    return T.add(T.mul(s, m_prev), T.mul(T.sub(1.0, s), candidate))


def run_cell(
    state: CellState,
    q: Tensor,
    words: Tensor,
    word_mask,
    kb: KnowledgeBase,
    cell_index: int,
    pv: ParamView,
    use_sd: bool = False,
    branch: str = "",
) -> tuple[CellState, AttentionRecord]:
    r, rv = reason_gate(q, words, word_mask, state, cell_index, pv)
    e, ev = extract_gate(r, state.memory, kb, pv, use_sd)
    m = update_gate(e, r, state.memory, pv)
    return CellState(r, m), AttentionRecord(cell_index, branch or kb.variant, rv.data, ev.data)
