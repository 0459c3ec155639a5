import numpy as np
import pytest

import coattn


def test_spearman_ties_and_degenerate():
    rho = coattn.spearman([1, 2, 2, 4], [4, 3, 2, 1])
    assert rho == pytest.approx(-4.5 / np.sqrt(22.5), abs=1e-15)
    assert coattn.spearman([2, 2, 2], [1, 2, 3]) is None
    assert coattn.fractional_ranks([3.0, 1.0, 3.0]) == [2.5, 1.0, 2.5]


def test_mean_sem_and_random_baseline():
    s = coattn.mean_sem([0.2, 0.4])
    assert s["mean"] == pytest.approx(0.3)
    assert s["sem"] == pytest.approx(0.1)
    r = coattn.random_baseline(2000, 5)
    assert abs(r["mean"]) < 0.02
    assert r == coattn.random_baseline(2000, 5)


def test_map_chain():
    m = coattn.rasterize([(0, 0, 4, 4), (2, 2, 6, 6)], [0.6, 0.4], 28, 28)
    assert m.shape == (28, 28)
    assert m[3, 3] == 1.0 and m[0, 0] == 0.6 and m[5, 5] == 0.4 and m[10, 10] == 0.0
    n, degenerate = coattn.normalize_map(m * 4.0)
    assert not degenerate and n.max() == 1.0
    g = coattn.downscale_14x14(m)
    assert g.shape == (14, 14)
    assert g[0, 0] == pytest.approx(m[:2, :2].mean())
    assert coattn.grid_spearman(g, g) == 1.0
    _, zero = coattn.normalize_map(np.zeros((20, 20)))
    assert zero


def test_perturbations():
    words = coattn.shuffle_question("what is the girl holding", 7)
    assert sorted(words) == sorted("what is the girl holding".split())
    assert words == coattn.shuffle_question("what is the girl holding", 7)
    assert coattn.make_unrelated_pairs(2, 9) == [1, 0]
    tags = coattn.pos_tag("what is the girl holding")
    assert [t for _, t in tags] == ["WP", "VBZ", "DT", "NN", "VBG"]
    kept, included = coattn.drop_pos("what is the girl holding", "noun")
    assert kept == ["what", "is", "the", "holding"] and included


def test_pipeline(tmp_path):
    corpus = tmp_path / "corpus"
    man = coattn.synth(corpus, pairs=20, seed=3, image_size=112, max_regions=8)
    assert man["pairs"] == 20 and len(man["train"]) == 16
    model = tmp_path / "model.bin"
    coattn.train(corpus, model, seed=1, epochs=1, embed_dim=8, lang_blocks=2, co_layers=2)
    assert model.exists()
    n = coattn.probe(model, corpus, tmp_path / "probe", conditions=["normal", "shuffled"], regions=[4, 8], seed=2)
    assert n == 4 * 2 * 2
    rep = coattn.evaluate(tmp_path / "probe", corpus, tmp_path / "eval", seed=2, baseline_samples=200)
    assert (tmp_path / "eval" / "report.csv").exists()
    assert {c["layer"] for c in rep["cells"]} == {1, 2}
    assert 0.0 <= rep["accuracy"][("normal", 8)] <= 1.0
    label, conf = coattn.answer(model, corpus, man["val"][0])
    assert 0.0 < conf <= 1.0 and isinstance(label, str)


def test_errors(tmp_path):
    with pytest.raises(coattn.UsageError):
        coattn.drop_pos("what is it", "adverbs")
    with pytest.raises(coattn.DataError):
        coattn.evaluate(tmp_path / "nowhere", tmp_path, tmp_path / "out")
