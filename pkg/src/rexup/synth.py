"""Synthetic scenes, scene graphs, region features and templated questions.

Each scene has a handful of uniquely named objects. Spatial edges come from box
geometry. Semantic edges (``holding``/``wearing``/``near``) are injected at
random. Region features encode an object's name and attributes only. Questions
about semantic edges therefore can only be answered from the graph, and they
carry ``requires_graph=True``.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .encoders import RawRegion
from .errors import DataError, GraphValidationError, ParseError

SCHEMA_VERSION = 1

NOUNS = ("dog", "cat", "man", "woman", "ball", "box", "car", "tree", "chair", "table", "bag", "hat")
COLORS = ("red", "blue", "green", "yellow", "black", "white")
SIZES = ("small", "medium", "large")
MATERIALS = ("wood", "metal", "plastic")
SPATIAL = ("left-of", "right-of", "above", "below")
SEMANTIC = ("holding", "wearing", "near")
RELATIONS = SPATIAL + SEMANTIC
QUESTION_TYPES = ("choose", "logical", "compare", "verify", "query")

ANSWERS = tuple(sorted({"yes", "no", "left", "right", "above", "below", *NOUNS, *COLORS, *SIZES, *MATERIALS}))

_SIZE_EXTENT = {"small": 0.10, "medium": 0.18, "large": 0.26}
_MIN_CENTER_GAP = 0.12
_NEAR_RADIUS = 0.3
_SIDE_MARGIN = 0.05  # minimum |dx| / |dy| for left/right or above/below questions


@dataclass
class SceneObject:
    id: int
    name: str
    attributes: list[str]
    box: list[float]  # x1, y1, x2, y2, width, height; normalized, y grows downward

    @property
    def color(self) -> str:
        return self.attributes[0]

    @property
    def size(self) -> str:
        return self.attributes[1]

    @property
    def material(self) -> str:
        return self.attributes[2]

    @property
    def center(self) -> tuple[float, float]:
        return (self.box[0] + self.box[2]) / 2.0, (self.box[1] + self.box[3]) / 2.0


@dataclass
class SceneGraph:
    scene_id: str
    objects: list[SceneObject]
    edges: list[tuple[int, str, int]] = field(default_factory=list)

    def validate(self) -> None:
        if not self.objects:
            raise GraphValidationError(f"scene {self.scene_id}: graph has no objects")
        ids = {o.id for o in self.objects}
        if len(ids) != len(self.objects):
            raise GraphValidationError(f"scene {self.scene_id}: duplicate object ids")
        for src, rel, tgt in self.edges:
            if src not in ids or tgt not in ids:
                raise GraphValidationError(f"scene {self.scene_id}: edge ({src}, {rel}, {tgt}) has a dangling endpoint")
            if rel not in RELATIONS:
                raise GraphValidationError(f"scene {self.scene_id}: unknown relation {rel!r}")

    def by_id(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise GraphValidationError(f"scene {self.scene_id}: no object with id {oid}")

    def by_name(self, name: str) -> SceneObject | None:
        for o in self.objects:
            if o.name == name:
                return o
        return None


@dataclass
class QASample:
    scene_id: str
    tokens: list[str]
    type: str
    answer: str
    requires_graph: bool = False

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass
class SceneRecord:
    graph: SceneGraph
    questions: list[QASample]

    @property
    def scene_id(self) -> str:
        return self.graph.scene_id


@dataclass
class DatasetSplit:
    name: str
    scenes: list[SceneRecord]

    def samples(self) -> Iterator[tuple[SceneGraph, QASample]]:
        for rec in self.scenes:
            for q in rec.questions:
                yield rec.graph, q

    def __len__(self) -> int:
        return sum(len(r.questions) for r in self.scenes)


# --------------------------------------------------------------------------
# scenes
# --------------------------------------------------------------------------


def _box(cx: float, cy: float, w: float, h: float) -> list[float]:
    x1, y1 = max(0.0, cx - w / 2), max(0.0, cy - h / 2)
    x2, y2 = min(1.0, cx + w / 2), min(1.0, cy + h / 2)
    return [round(v, 6) for v in (x1, y1, x2, y2, x2 - x1, y2 - y1)]


def spatial_relation(a: SceneObject, b: SceneObject) -> str:
    """Relation of ``a`` to ``b`` along the dominant axis of their center offset."""
    (ax, ay), (bx, by) = a.center, b.center
    if abs(bx - ax) >= abs(by - ay):
        return "left-of" if ax < bx else "right-of"
    return "above" if ay < by else "below"


def spatial_edges(objects: list[SceneObject]) -> list[tuple[int, str, int]]:
    """One edge per object, pointing at its nearest neighbour (ties: lowest id)."""
    edges = []
    for a in objects:
        best, best_d = None, np.inf
        for b in objects:
            if b.id == a.id:
                continue
            d = float(np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]))
            if d < best_d:
                best, best_d = b, d
        if best is not None:
            edges.append((a.id, spatial_relation(a, best), best.id))
    return edges


def generate_scene(seed: int, n_objects: int, scene_id: str | None = None, max_objects: int = 12) -> SceneGraph:
    if not 1 <= n_objects <= min(max_objects, len(NOUNS)):
        raise DataError(f"n_objects must be in [1, {min(max_objects, len(NOUNS))}], got {n_objects}")
    rng = np.random.default_rng(seed)
    names = rng.choice(len(NOUNS), size=n_objects, replace=False)
    centers: list[tuple[float, float]] = []
    gap = _MIN_CENTER_GAP
    while len(centers) < n_objects:
        for _ in range(500):
            c = tuple(rng.uniform(0.15, 0.85, size=2))
            if all(np.hypot(c[0] - p[0], c[1] - p[1]) >= gap for p in centers):
                centers.append(c)
                break
        else:
            gap *= 0.8
    objects = []
    for i, (ni, (cx, cy)) in enumerate(zip(names, centers)):
        size = SIZES[rng.integers(len(SIZES))]
        attrs = [COLORS[rng.integers(len(COLORS))], size, MATERIALS[rng.integers(len(MATERIALS))]]
        ext = _SIZE_EXTENT[size]
        w, h = ext * rng.uniform(0.9, 1.1), ext * rng.uniform(0.9, 1.1)
        objects.append(SceneObject(i, NOUNS[ni], attrs, _box(float(cx), float(cy), w, h)))

    edges = spatial_edges(objects)
    if n_objects >= 2:
        n_sem = rng.choice(3, p=[0.1, 0.45, 0.45])
        kinds = rng.choice(len(SEMANTIC), size=n_sem, replace=False, p=[0.4, 0.4, 0.2])
        used: set[tuple[int, int]] = set()
        for k in sorted(kinds):
            rel = SEMANTIC[k]
            pairs = [
                (a.id, b.id)
                for a in objects
                for b in objects
                if a.id != b.id and (a.id, b.id) not in used and (b.id, a.id) not in used
            ]
            if rel == "near":
                pairs = [
                    (s, t)
                    for s, t in pairs
                    if np.hypot(*np.subtract(objects[s].center, objects[t].center)) < _NEAR_RADIUS
                ]
            if not pairs:
                continue
            s, t = pairs[rng.integers(len(pairs))]
            used.add((s, t))
            edges.append((s, rel, t))
    return SceneGraph(scene_id if scene_id is not None else f"scene-{seed}", objects, edges)


# --------------------------------------------------------------------------
# region features
# --------------------------------------------------------------------------


def _token_vector(token: str, width: int) -> np.ndarray:
    rng = np.random.default_rng(zlib.crc32(f"{token}/{width}".encode()))
    return rng.normal(0.0, 1.0 / np.sqrt(width), size=width)


def feature_seed(scene_id: str) -> int:
    return zlib.crc32(scene_id.encode())


def derive_region_features(
    graph: SceneGraph, feature_width: int = 64, noise_scale: float = 0.05, seed: int | None = None
) -> list[RawRegion]:
    """Per-object hashed (name, attributes) vector plus Gaussian noise; edges are never read."""
    if feature_width < 8:
        raise DataError("feature_width must be >= 8")
    rng = np.random.default_rng(feature_seed(graph.scene_id) if seed is None else seed)
    out = []
    for o in graph.objects:
        vec = _token_vector(o.name, feature_width)
        for a in o.attributes:
            vec = vec + _token_vector(a, feature_width)
        noise = rng.normal(0.0, 1.0 / np.sqrt(feature_width), size=feature_width)
        out.append(RawRegion(vec + noise_scale * noise, tuple(o.box)))
    return out


# --------------------------------------------------------------------------
# questions
# --------------------------------------------------------------------------

_SIZE_RANK = {s: i for i, s in enumerate(SIZES)}


def _q(scene_id, text, qtype, answer, graph=False) -> QASample:
    return QASample(scene_id, text.split(), qtype, answer, graph)


def _query_questions(g: SceneGraph, rng, count: int) -> list[QASample]:
    out = []
    for _ in range(count):
        o = g.objects[rng.integers(len(g.objects))]
        kind = rng.integers(3)
        if kind == 0:
            out.append(_q(g.scene_id, f"what color is the {o.name}", "query", o.color))
        elif kind == 1:
            out.append(_q(g.scene_id, f"what size is the {o.name}", "query", o.size))
        else:
            out.append(_q(g.scene_id, f"what material is the {o.name}", "query", o.material))
    return out


def _relation_questions(g: SceneGraph, rng, count: int) -> list[QASample]:
    sem = [e for e in g.edges if e[1] in ("holding", "wearing")]
    out = []
    if not sem:
        return out
    for _ in range(count):
        s, rel, t = sem[rng.integers(len(sem))]
        src, tgt = g.by_id(s), g.by_id(t)
        out.append(_q(g.scene_id, f"what is {rel} the {tgt.name}", "query", src.name, True))
    return out


def _verify(g: SceneGraph, rng, want: bool) -> QASample | None:
    o = g.objects[rng.integers(len(g.objects))]
    if rng.integers(2) == 0:
        value = o.color if want else COLORS[rng.choice([i for i, c in enumerate(COLORS) if c != o.color])]
    else:
        value = o.material if want else MATERIALS[rng.choice([i for i, m in enumerate(MATERIALS) if m != o.material])]
    return _q(g.scene_id, f"is the {o.name} {value}", "verify", "yes" if want else "no")


def _has(g: SceneGraph, color: str, name: str) -> bool:
    o = g.by_name(name)
    return o is not None and o.color == color


def _logical(g: SceneGraph, rng, want: bool) -> QASample | None:
    conj = "and" if rng.integers(2) == 0 else "or"
    for _ in range(50):
        picks = []
        for _k in range(2):
            if rng.integers(2) == 0:
                o = g.objects[rng.integers(len(g.objects))]
                picks.append((o.color if rng.integers(2) == 0 else COLORS[rng.integers(len(COLORS))], o.name))
            else:
                picks.append((COLORS[rng.integers(len(COLORS))], NOUNS[rng.integers(len(NOUNS))]))
        (c1, n1), (c2, n2) = picks
        if n1 == n2:
            continue
        a, b = _has(g, c1, n1), _has(g, c2, n2)
        value = (a and b) if conj == "and" else (a or b)
        if value == want:
            ans = "yes" if want else "no"
            return _q(g.scene_id, f"is there a {c1} {n1} {conj} a {c2} {n2}", "logical", ans)
    return None


def _compare(g: SceneGraph, rng, want: bool) -> QASample | None:
    pairs = [(a, b) for a in g.objects for b in g.objects if a.id != b.id and a.size != b.size]
    if not pairs:
        return None
    a, b = pairs[rng.integers(len(pairs))]
    word = "larger" if rng.integers(2) == 0 else "smaller"
    truth = _SIZE_RANK[a.size] > _SIZE_RANK[b.size]
    if word == "smaller":
        truth = not truth
    if truth != want:
        a, b = b, a
    return _q(g.scene_id, f"is the {a.name} {word} than the {b.name}", "compare", "yes" if want else "no")


def _choose(g: SceneGraph, rng) -> QASample | None:
    opts = []
    for a in g.objects:
        for b in g.objects:
            if a.id == b.id:
                continue
            dx, dy = b.center[0] - a.center[0], b.center[1] - a.center[1]
            if abs(dx) >= _SIDE_MARGIN:
                opts.append((a, b, "h", "left" if dx > 0 else "right"))
            if abs(dy) >= _SIDE_MARGIN:
                opts.append((a, b, "v", "above" if dy > 0 else "below"))
    if not opts:
        return None
    a, b, axis, ans = opts[rng.integers(len(opts))]
    if axis == "h":
        return _q(g.scene_id, f"is the {a.name} left of or right of the {b.name}", "choose", ans)
    return _q(g.scene_id, f"is the {a.name} above or below the {b.name}", "choose", ans)


def generate_questions(
    graph: SceneGraph,
    per_type_count: int,
    seed: int,
    graph_count: int | None = None,
    query_count: int | None = None,
) -> tuple[list[QASample], int]:
    """Questions of all five families; returns ``(samples, skipped)``.

    ``graph_count`` (default ``per_type_count``) extra relation questions are
    asked when the scene has ``holding``/``wearing`` edges; ``query_count``
    (default ``per_type_count``) sets the number of attribute queries. Yes/no families
    alternate the target answer from a random starting phase.
    """
    rng = np.random.default_rng(seed)
    graph_count = per_type_count if graph_count is None else graph_count
    query_count = per_type_count if query_count is None else query_count
    out: list[QASample] = []
    seen: set[str] = set()
    skipped = 0

    def keep(q: QASample | None) -> None:
        nonlocal skipped
        if q is None or q.text in seen:
            skipped += 1
            return
        seen.add(q.text)
        out.append(q)

    for q in _query_questions(graph, rng, query_count):
        keep(q)
    rel = _relation_questions(graph, rng, graph_count)
    skipped += graph_count - len(rel)
    for q in rel:
        keep(q)
    for maker in (_verify, _logical, _compare):
        phase = int(rng.integers(2))  # random start so odd counts stay balanced across scenes
        for j in range(per_type_count):
            keep(maker(graph, rng, (j + phase) % 2 == 0))
    for _ in range(per_type_count):
        keep(_choose(graph, rng))
    return out, skipped


# --------------------------------------------------------------------------
# splits and serialization
# --------------------------------------------------------------------------


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(
    seed: int,
    n_scenes: int,
    per_type_count: int = 2,
    graph_count: int | None = None,
    query_count: int | None = None,
    min_objects: int = 4,
    max_objects: int = 7,
    ratios: tuple[float, ...] = (0.7, 0.1, 0.1, 0.1),
    split_names: tuple[str, ...] = ("train", "val", "testdev", "test"),
) -> dict[str, DatasetSplit]:
    """Generate ``n_scenes`` scenes and split them by scene id."""
    records = []
    for i in range(n_scenes):
        s = scene_seed(seed, i)
        rng = np.random.default_rng(s)
        n = int(rng.integers(min_objects, max_objects + 1))
        g = generate_scene(s, n, scene_id=f"{seed}-{i:05d}")
        qs, _ = generate_questions(g, per_type_count, s + 1, graph_count, query_count)
        records.append(SceneRecord(g, qs))
    order = np.random.default_rng(seed).permutation(n_scenes)
    bounds = np.floor(np.cumsum((0.0,) + tuple(ratios)) * n_scenes + 1e-9).astype(int)
    bounds[-1] = n_scenes
    return {
        name: DatasetSplit(name, [records[j] for j in sorted(order[bounds[k] : bounds[k + 1]])])
        for k, name in enumerate(split_names)
    }


def scene_to_dict(rec: SceneRecord) -> dict:
    g = rec.graph
    return {
        "scene_id": g.scene_id,
        "objects": [{"id": o.id, "name": o.name, "attributes": list(o.attributes), "box": list(o.box)} for o in g.objects],
        "edges": [[s, r, t] for s, r, t in g.edges],
        "questions": [
            {"tokens": list(q.tokens), "type": q.type, "answer": q.answer, "requires_graph": q.requires_graph}
            for q in rec.questions
        ],
        "schema_version": SCHEMA_VERSION,
    }


def scene_from_dict(d: dict) -> SceneRecord:
    if d.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"schema version {d.get('schema_version')!r} != {SCHEMA_VERSION}")
    sid = d["scene_id"]
    objects = [SceneObject(int(o["id"]), o["name"], list(o["attributes"]), [float(x) for x in o["box"]]) for o in d["objects"]]
    edges = [(int(s), str(r), int(t)) for s, r, t in d["edges"]]
    graph = SceneGraph(sid, objects, edges)
    graph.validate()
    qs = [QASample(sid, list(q["tokens"]), q["type"], q["answer"], bool(q["requires_graph"])) for q in d["questions"]]
    return SceneRecord(graph, qs)


def write_jsonl(path, split: DatasetSplit) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        header = {"schema_version": SCHEMA_VERSION, "split": split.name, "scenes": len(split.scenes)}
        fh.write(json.dumps(header) + "\n")
        for rec in split.scenes:
            fh.write(json.dumps(scene_to_dict(rec)) + "\n")
    return path


def read_jsonl(path) -> DatasetSplit:
    path = Path(path)
    scenes = []
    name = path.stem
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            if lineno == 1:
                if obj.get("schema_version") != SCHEMA_VERSION:
                    raise DataError(f"{path}: schema version {obj.get('schema_version')!r} != {SCHEMA_VERSION}")
                name = obj.get("split", name)
                continue
            try:
                scenes.append(scene_from_dict(obj))
            except DataError as exc:
                raise ParseError(str(exc), lineno) from None
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed scene record: {exc!r}", lineno) from None
    return DatasetSplit(name, scenes)


def write_dataset(out_dir, splits: dict[str, DatasetSplit]) -> Path:
    out_dir = Path(out_dir)
    for name, split in splits.items():
        write_jsonl(out_dir / f"{name}.jsonl", split)
    return out_dir


def read_dataset(data_dir) -> dict[str, DatasetSplit]:
    data_dir = Path(data_dir)
    files = sorted(data_dir.glob("*.jsonl"))
    if not files:
        raise DataError(f"no .jsonl splits found in {data_dir}")
    return {f.stem: read_jsonl(f) for f in files}

