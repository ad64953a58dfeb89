"""Independent reference computations used by the tests.

Everything here works on plain Python floats / explicit loops over single
samples and never touches the tape.
"""

from __future__ import annotations

import math

import numpy as np


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def matvec(W, x):
    """``x @ W`` for W stored (in, out), via loops."""
    n_in, n_out = len(W), len(W[0])
    return [sum(x[i] * W[i][j] for i in range(n_in)) for j in range(n_out)]


def affine(W, b, x):
    y = matvec(W, x)
    return [y[j] + b[j] for j in range(len(y))]


def softmax(xs):
    m = max(xs)
    es = [math.exp(x - m) for x in xs]
    s = sum(es)
    return [e / s for e in es]


def triple_loop_matmul(a, b):
    m, k, n = len(a), len(b), len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(n)] for i in range(m)]


# --------------------------------------------------------------------------
# LSTM
# --------------------------------------------------------------------------


def lstm_run(xs, W, b, d):
    """Single-direction LSTM over a list of input vectors; gate order i, f, g, o."""
    h, c = [0.0] * d, [0.0] * d
    hs = []
    for x in xs:
        z = affine(W, b, list(x) + h)
        i = [sig(z[k]) for k in range(d)]
        f = [sig(z[d + k]) for k in range(d)]
        g = [math.tanh(z[2 * d + k]) for k in range(d)]
        o = [sig(z[3 * d + k]) for k in range(d)]
        c = [f[k] * c[k] + i[k] * g[k] for k in range(d)]
        h = [o[k] * math.tanh(c[k]) for k in range(d)]
        hs.append(h)
    return hs


def bilstm_question(emb_rows, p, d):
    fw = lstm_run(emb_rows, p["question.fw.W"], p["question.fw.b"], d)
    bw = lstm_run(emb_rows[::-1], p["question.bw.W"], p["question.bw.b"], d)[::-1]
    words = [affine(p["question.proj.W"], p["question.proj.b"], fw[u] + bw[u]) for u in range(len(emb_rows))]
    sentence = bw[0] + fw[-1]
    return words, sentence


# --------------------------------------------------------------------------
# cell equations
# --------------------------------------------------------------------------


def reason(q, words, r_prev, i, p):
    q_i = affine(p[f"qpos.{i}.W"], p[f"qpos.{i}.b"], q)
    rq = affine(p["reason.W"], p["reason.b"], r_prev + q_i)
    ra = []
    for w in words:
        prod = [rq[k] * w[k] for k in range(len(w))]
        ra.append(affine(p["reason.attn.W"], p["reason.attn.b"], prod)[0])
    rv = softmax(ra)
    d = len(words[0])
    r = [sum(rv[u] * words[u][k] for u in range(len(words))) for k in range(d)]
    return r, rv


def sd_brute(x, y, left, right, out):
    """z_k = sum_{a,b} T[a,b,k] x_a y_b with the third-order tensor spelled out."""
    dx, R = len(left), len(left[0])
    dy, dz = len(right), len(out[0])
    Tt = [[[sum(left[a][r] * right[bb][r] * out[r][k] for r in range(R)) for k in range(dz)] for bb in range(dy)] for a in range(dx)]
    return [sum(Tt[a][bb][k] * x[a] * y[bb] for a in range(dx) for bb in range(dy)) for k in range(dz)]


def extract(r, m_prev, kb, p, use_sd):
    d = len(r)
    mm = affine(p["extract.mem.W"], p["extract.mem.b"], m_prev)
    logits = []
    for row in kb:
        ks = affine(p["extract.kb.W"], p["extract.kb.b"], row)
        si = [mm[k] * ks[k] for k in range(d)]
        si2 = affine(p["extract.cat.W"], p["extract.cat.b"], si + list(row))
        if use_sd:
            fused = sd_brute(r, si2, p["fusion.left"], p["fusion.right"], p["fusion.out"])
        else:
            fused = [r[k] * si2[k] for k in range(d)]
        ea = affine(p["extract.interact.W"], p["extract.interact.b"], fused)
        logits.append(affine(p["extract.logit.W"], p["extract.logit.b"], ea)[0])
    ev = softmax(logits)
    e = [sum(ev[o] * kb[o][k] for o in range(len(kb))) for k in range(d)]
    return e, ev


def update(e, r, m_prev, p):
    cand = affine(p["update.W"], p["update.b"], list(e) + list(m_prev))
    s = sig(affine(p["update.gate.W"], p["update.gate.b"], r)[0])
    return [s * m_prev[k] + (1.0 - s) * cand[k] for k in range(len(cand))]


# --------------------------------------------------------------------------
# data oracles
# --------------------------------------------------------------------------


def centers(objects):
    return {o["id"]: ((o["box"][0] + o["box"][2]) / 2, (o["box"][1] + o["box"][3]) / 2) for o in objects}


def expected_spatial_edges(objects):
    """Nearest-neighbour spatial edge per object, recomputed from raw boxes."""
    c = centers(objects)
    out = set()
    for a in objects:
        others = [o for o in objects if o["id"] != a["id"]]
        if not others:
            continue
        ax, ay = c[a["id"]]
        dists = [(math.dist((ax, ay), c[o["id"]]), o["id"]) for o in others]
        best = min(dists)[1]
        bx, by = c[best]
        if abs(bx - ax) >= abs(by - ay):
            rel = "left-of" if ax < bx else "right-of"
        else:
            rel = "above" if ay < by else "below"
        out.add((a["id"], rel, best))
    return out


SIZE_ORDER = {"small": 0, "medium": 1, "large": 2}


def answer_oracle(scene: dict, tokens: list[str]) -> str:
    """Parse a question by its surface form and evaluate it against a raw scene dict."""
    objs = {o["name"]: o for o in scene["objects"]}
    byid = {o["id"]: o for o in scene["objects"]}
    c = centers(scene["objects"])
    t = tokens
    yn = lambda b: "yes" if b else "no"  # noqa: E731

    def exists(color, name):
        return name in objs and objs[name]["attributes"][0] == color

    if t[:2] == ["what", "color"] and t[2:4] == ["is", "the"] and len(t) == 5:
        return objs[t[4]]["attributes"][0]
    if t[:3] == ["what", "size", "is"]:
        return objs[t[4]]["attributes"][1]
    if t[:3] == ["what", "material", "is"]:
        return objs[t[4]]["attributes"][2]
    if t[:2] == ["what", "is"] and t[3] == "the":
        rel, tgt = t[2], objs[t[4]]["id"]
        (src,) = [s for s, r, g in scene["edges"] if r == rel and g == tgt]
        return byid[src]["name"]
    if t[:3] == ["is", "there", "a"]:
        c1, n1, conj, _, c2, n2 = t[3:9]
        a, b = exists(c1, n1), exists(c2, n2)
        return yn(a and b if conj == "and" else a or b)
    if t[0] == "is" and t[1] == "the" and len(t) == 4:
        o = objs[t[2]]
        return yn(t[3] in (o["attributes"][0], o["attributes"][2]))
    if len(t) == 7 and t[4] == "than":
        a, b = objs[t[2]], objs[t[6]]
        sa, sb = SIZE_ORDER[a["attributes"][1]], SIZE_ORDER[b["attributes"][1]]
        return yn(sa > sb if t[3] == "larger" else sa < sb)
    if t[3:7] == ["left", "of", "or", "right"]:
        a, b = c[objs[t[2]]["id"]], c[objs[t[9]]["id"]]
        return "left" if a[0] < b[0] else "right"
    if t[3:6] == ["above", "or", "below"]:
        a, b = c[objs[t[2]]["id"]], c[objs[t[7]]["id"]]
        return "above" if a[1] < b[1] else "below"
    raise AssertionError(f"unrecognised question form: {' '.join(t)}")


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b, floor: float = 1e-6) -> np.ndarray:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
