import numpy as np
import pytest

from rexup import encoders as E
from rexup.errors import ContractError, GraphValidationError, ValidationError
from rexup.params import ParamStore, ParamView
from rexup.synth import SceneGraph, SceneObject
from rexup.tensor import Tape
from rexup.vocab import Vocabulary

from oracles import bilstm_question


def _question_setup(d=4, e=3, V=6, seed=0):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.add("embed", rng.normal(size=(V, e)))
    E.init_question_params(store, e, d, rng)
    for n in store.names():  # randomize biases too
        store.set_value(n, store.value(n) + rng.normal(scale=0.3, size=store.value(n).shape))
    return store


def _p(store):
    return {n: store.value(n).tolist() for n in store.names()}


def test_question_matches_lstm_oracle():
    d = 4
    store = _question_setup(d)
    tokens = [3, 5]
    enc = E.encode_question(tokens, None, ParamView(Tape(), store), d)
    emb = [store.value("embed")[t].tolist() for t in tokens]
    words, sentence = bilstm_question(emb, _p(store), d)
    np.testing.assert_allclose(enc.words.data[0], words, atol=1e-12)
    np.testing.assert_allclose(enc.sentence.data[0], sentence, atol=1e-12)
    assert enc.sentence.shape == (1, 2 * d)


def test_length_one_question():
    d = 4
    store = _question_setup(d)
    enc = E.encode_question([2], None, ParamView(Tape(), store), d)
    assert enc.words.shape == (1, 1, d)
    words, sentence = bilstm_question([store.value("embed")[2].tolist()], _p(store), d)
    np.testing.assert_allclose(enc.sentence.data[0], sentence, atol=1e-12)


def test_padding_does_not_change_real_positions():
    d = 4
    store = _question_setup(d)
    pv = ParamView(Tape(), store)
    toks, lens = E.pad_tokens([[2, 3, 4], [5, 2]])
    enc = E.encode_question(toks, lens, pv, d)
    alone = E.encode_question([5, 2], None, ParamView(Tape(), store), d)
    np.testing.assert_allclose(enc.words.data[1, :2], alone.words.data[0], atol=1e-12)
    np.testing.assert_allclose(enc.sentence.data[1], alone.sentence.data[0], atol=1e-12)
    assert np.all(enc.words.data[1, 2] == 0.0)


def test_question_determinism_and_reversal():
    d = 4
    store = _question_setup(d)
    a = E.encode_question([2, 3, 4], None, ParamView(Tape(), store), d)
    b = E.encode_question([2, 3, 4], None, ParamView(Tape(), store), d)
    r = E.encode_question([4, 3, 2], None, ParamView(Tape(), store), d)
    assert a.words.data.tobytes() == b.words.data.tobytes()
    assert not np.allclose(a.words.data, r.words.data)
    assert r.sentence.shape[-1] == 2 * d


def test_empty_question_rejected():
    store = _question_setup()
    with pytest.raises(ContractError):
        E.encode_question(np.zeros((1, 0), dtype=int), [0], ParamView(Tape(), store), 4)
    with pytest.raises(ContractError):
        E.pad_tokens([[1], []])


def _region_store(f=5, d=4, seed=0):
    store = ParamStore()
    E.init_region_params(store, "okb.", f, d, np.random.default_rng(seed))
    store.set_value("okb.b", np.arange(d, dtype=float))
    return store


def test_region_rows_affine_and_masked():
    f, d = 5, 4
    store = _region_store(f, d)
    rng = np.random.default_rng(1)
    feats, boxes = rng.normal(size=(1, 3, f)), rng.random((1, 3, 6))
    feats[0, 0], boxes[0, 0] = 0.0, 0.0
    mask = np.array([[True, True, False]])
    kb = E.encode_object_regions(feats, boxes, mask, ParamView(Tape(), store, "okb."))
    assert kb.variant == "object-region"
    np.testing.assert_array_equal(kb.rows.data[0, 0], store.value("okb.b"))
    expect = np.concatenate([feats[0, 1], boxes[0, 1]]) @ store.value("okb.W") + store.value("okb.b")
    np.testing.assert_allclose(kb.rows.data[0, 1], expect, atol=1e-12)
    assert np.all(kb.rows.data[0, 2] == 0.0)


def test_region_validation():
    assert E.MAX_REGIONS == 100
    good = E.RawRegion(np.zeros(3), (0.1, 0.1, 0.2, 0.3, 0.1, 0.2))
    E.validate_regions([good])
    with pytest.raises(ContractError):
        E.validate_regions([])
    with pytest.raises(ContractError):
        E.validate_regions([good] * 101)
    with pytest.raises(ValidationError):
        E.validate_regions([E.RawRegion(np.zeros(3), (0.5, 0.1, 0.2, 0.3, 0.1, 0.2))])
    with pytest.raises(ValidationError):
        E.validate_regions([E.RawRegion(np.zeros(3), (0.1, 0.1, 1.2, 0.3, 0.1, 0.2))])
    feats, boxes, mask = E.stack_regions([[good], [good, good]])
    assert feats.shape == (2, 2, 3) and mask.tolist() == [[True, False], [True, True]]
    with pytest.raises(ContractError):
        E.encode_object_regions(feats, boxes, np.zeros((2, 2), bool), ParamView(Tape(), _region_store(3)))


def _toy_graph(attr_order=("brown",), extra_edges=()):
    objs = [
        SceneObject(0, "dog", list(attr_order), [0.1, 0.1, 0.2, 0.2, 0.1, 0.1]),
        SceneObject(1, "ball", [], [0.5, 0.1, 0.6, 0.2, 0.1, 0.1]),
    ]
    return SceneGraph("toy", objs, [(0, "left-of", 1), *extra_edges])


def _toy_vocab_embed():
    vocab = Vocabulary(["<pad>", "<unk>", "dog", "brown", "left-of", "ball", "big"])
    embed = np.zeros((len(vocab), 2))
    embed[vocab.index["dog"]] = [1, 0]
    embed[vocab.index["brown"]] = [0, 1]
    embed[vocab.index["left-of"]] = [1, 1]
    embed[vocab.index["ball"]] = [2, 0]
    embed[vocab.index["big"]] = [3, -1]
    return vocab, embed


def test_scene_graph_worked_example():
    vocab, embed = _toy_vocab_embed()
    name, attr, rel = E.graph_weights(_toy_graph(), vocab)
    feats = E.scene_graph_features(Tape().leaf(embed), name, attr, rel).data
    np.testing.assert_allclose(feats[0], [1, 0, 0, 1, 1.5, 0.5])
    # ball: no attributes, no outgoing relations -> zero slots
    np.testing.assert_allclose(feats[1], [2, 0, 0, 0, 0, 0])


def test_scene_graph_order_invariance():
    vocab, embed = _toy_vocab_embed()
    g1 = _toy_graph(("brown", "big"), [(0, "left-of", 0 + 1)])
    g2 = _toy_graph(("big", "brown"), [(0, "left-of", 1)])
    g2.edges = list(reversed(g2.edges))
    f1 = E.scene_graph_features(Tape().leaf(embed), *E.graph_weights(g1, vocab)).data
    f2 = E.scene_graph_features(Tape().leaf(embed), *E.graph_weights(g2, vocab)).data
    np.testing.assert_allclose(f1, f2, atol=1e-15)


def test_scene_graph_projection_and_errors():
    vocab, embed = _toy_vocab_embed()
    store = ParamStore()
    store.add("embed", embed)
    E.init_graph_params(store, "sg.", 2, 4, np.random.default_rng(0))
    name, attr, rel = (w[None] for w in E.graph_weights(_toy_graph(), vocab, n_rows=3))
    mask = np.array([[True, True, False]])
    tape = Tape()
    kb = E.encode_scene_graph(name, attr, rel, mask, ParamView(tape, store), ParamView(tape, store, "sg."))
    assert kb.variant == "scene-graph" and kb.rows.shape == (1, 3, 4)
    assert np.all(kb.rows.data[0, 2] == 0.0)
    with pytest.raises(GraphValidationError):
        E.encode_scene_graph(name, attr, rel, np.zeros((1, 3), bool), ParamView(tape, store), ParamView(tape, store, "sg."))
    bad = _toy_graph(extra_edges=[(0, "near", 7)])
    with pytest.raises(GraphValidationError):
        E.graph_weights(bad, vocab)


def test_full_scale_widths():
    store = ParamStore()
    E.init_graph_params(store, "sg.", 300, 512, np.random.default_rng(0))
    assert store.value("sg.W").shape == (900, 512)
    E.init_region_params(store, "okb.", 2048, 512, np.random.default_rng(0))
    assert store.value("okb.W").shape == (2048 + 6, 512)
