import json
import math
import warnings

import numpy as np
import pytest
from scipy import stats

from vlmatch import metrics as M
from vlmatch import synthdata as S
from vlmatch.errors import ValidationError


@pytest.fixture(scope="module")
def default_corpus():
    return S.generate_corpus(S.GenConfig())


def test_deterministic(tmp_path):
    cfg = S.GenConfig(n_items=40, seed=5)
    a = S.save_corpus(S.generate_corpus(cfg), tmp_path / "a")
    b = S.save_corpus(S.generate_corpus(cfg), tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()


def test_seed_changes_output():
    a = S.generate_corpus(S.GenConfig(n_items=20, seed=1))
    b = S.generate_corpus(S.GenConfig(n_items=20, seed=2))
    assert not np.array_equal(a.latents(), b.latents())


@pytest.mark.parametrize("kw", [{"theta1": 0.8, "theta2": 0.4}, {"noise_sigma": -0.1}, {"n_items": 0},
                                {"text_len": 4}, {"vocab_size": 40}])
def test_invalid_config(kw):
    with pytest.raises(ValidationError):
        S.GenConfig(**kw)


def test_noise_free_images_depend_on_latent_and_appeal():
    cfg = S.GenConfig(n_items=4, noise_sigma=0.0)
    maps = S.image_maps(cfg)
    z = np.eye(cfg.latent_dim)[0]
    a = S.image_for_latent(z, 0.3, cfg, maps, np.random.default_rng(0))
    b = S.image_for_latent(z, 0.3, cfg, maps, np.random.default_rng(99))
    assert np.array_equal(a, b)


def test_latent_cosines_match_sphere(default_corpus):
    z = default_corpus.latents()
    d = z.shape[1]
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0)
    cos = (z @ z.T)[np.triu_indices(len(z), 1)]
    # for uniform unit vectors in R^d, (1 + cos) / 2 ~ Beta((d-1)/2, (d-1)/2)
    ks = stats.kstest((cos + 1) / 2, stats.beta((d - 1) / 2, (d - 1) / 2).cdf).statistic
    assert ks < 0.05


def test_text_is_latent_code():
    cfg = S.GenConfig(n_items=30, text_noise=0.0)
    corpus = S.generate_corpus(cfg)
    code = S._token_code(cfg)
    for it in corpus.items:
        q = S.quantize(it.latent, cfg.quant_levels)
        assert it.tokens[: cfg.latent_dim].tolist() == code[np.arange(cfg.latent_dim), q].tolist()
        assert np.all(it.tokens[cfg.latent_dim:] == 0)


class TestDegrees:
    def test_self_and_orthogonal(self):
        z = np.eye(4)
        assert S.relevance_degree(z[0], z[0], 0.4, 0.8) == 2
        assert S.relevance_degree(z[0], z[1], 0.4, 0.8) == 0

    def test_closed_lower_bound(self):
        # 3-4-5 triangle: cosines 0.6 and 0.8 come out exact
        zq = np.array([1.0, 0.0])
        assert S.relevance_degree(zq, np.array([3.0, 4.0]), 0.6, 0.8) == 1
        assert S.relevance_degree(zq, np.array([4.0, 3.0]), 0.6, 0.8) == 2
        assert S.relevance_degree(zq, np.array([3.0, 4.0]), 0.6000000000000001, 0.8) == 0

    def test_matrix_agrees(self, default_corpus):
        c = default_corpus.config
        z = default_corpus.latents()[:40]
        deg = S.degree_matrix(z, c.theta1, c.theta2)
        for q in range(0, 40, 7):
            for i in range(40):
                assert deg[q, i] == S.relevance_degree(z[q], z[i], c.theta1, c.theta2)

    def test_labels_recomputable(self, default_corpus):
        for p in default_corpus.relevance[:300]:
            assert p.degree == default_corpus.degree(p.query_id, p.image_id)

    def test_bucket_balance(self, default_corpus):
        counts = np.bincount([p.degree for p in default_corpus.relevance], minlength=3)
        assert np.all(counts / counts.sum() >= 0.2)

    def test_bucket_warning(self):
        items = S.generate_items(S.GenConfig(n_items=6, seed=0))
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            S.generate_relevance_pairs(items, S.GenConfig(n_items=6, seed=0, theta1=0.98, theta2=0.99))
        assert any("below 20%" in str(x.message) for x in w)

    def test_separable_on_latents(self, default_corpus):
        z = {it.id: it.latent for it in default_corpus.items}
        pairs = default_corpus.relevance
        scores = [float(z[p.query_id] @ z[p.image_id]) for p in pairs]
        assert M.auc(scores, [p.label for p in pairs]) > 0.95

    def test_too_few_items(self):
        items = S.generate_items(S.GenConfig(n_items=1))
        with pytest.raises(ValidationError):
            S.generate_relevance_pairs(items, S.GenConfig(n_items=1))
        with pytest.raises(ValidationError):
            S.generate_clicks(items, S.GenConfig(n_items=1))


class TestClicks:
    def test_min_two_and_positive_rate(self, default_corpus):
        assert default_corpus.clicks
        for p in default_corpus.clicks:
            q, i = default_corpus.item(p.query_id), default_corpus.item(p.image_id)
            assert p.clicks >= 2
            assert q.latent @ i.latent > 0 and i.attractiveness > 0

    def test_zero_rate_cases(self):
        z = np.eye(3)
        assert S.click_rate(z[0], z[0], 0.0, 12.0) == 0.0
        assert S.click_rate(z[0], -z[0], 0.9, 12.0) == 0.0
        assert S.click_rate(z[0], z[1], 0.9, 12.0) == 0.0

    def test_zero_attractiveness_never_clicked(self):
        cfg = S.GenConfig(n_items=80, seed=3)
        items = S.generate_items(cfg)
        items[5].attractiveness = 0.0
        assert all(p.image_id != 5 for p in S.generate_clicks(items, cfg))

    @pytest.mark.parametrize("lam", [0.5, 2.0, 6.0])
    def test_truncated_poisson_mean(self, lam):
        # series oracle, then a 1e5-draw Monte Carlo check
        ks = np.arange(2, 200)
        pmf = np.exp(-lam + ks * math.log(lam) - np.array([math.lgamma(k + 1) for k in ks]))
        series = float((ks * pmf).sum() / pmf.sum())
        assert S.truncated_poisson_mean(lam) == pytest.approx(series, rel=1e-12)
        p_keep = 1 - math.exp(-lam) * (1 + lam)
        draws = np.random.default_rng(0).poisson(lam, size=int(1.2e5 / p_keep))
        kept = draws[draws >= 2][:100_000]
        assert kept.size == 100_000
        assert abs(kept.mean() / series - 1) < 0.02

    def test_clicks_follow_attractiveness(self, default_corpus):
        a = np.array([default_corpus.item(p.image_id).attractiveness for p in default_corpus.clicks])
        assert a.mean() > 0.6  # uniform attractiveness has mean 0.5


def test_split(default_corpus):
    train, held = S.split_queries(default_corpus.ids, 0.2, 0)
    assert len(held) == round(0.2 * 512) and not set(train) & set(held)
    assert sorted(np.r_[train, held].tolist()) == default_corpus.ids.tolist()
    again = S.split_queries(default_corpus.ids[::-1], 0.2, 0)
    assert np.array_equal(again[1], held)


def test_io_roundtrip(tmp_path):
    corpus = S.generate_corpus(S.GenConfig(n_items=30, seed=4))
    paths = S.save_corpus(corpus, tmp_path)
    back = S.load_corpus(tmp_path)
    assert back.config == corpus.config
    for a, b in zip(corpus.items, back.items):
        assert a.id == b.id and np.array_equal(a.latent, b.latent) and np.array_equal(a.patches, b.patches)
        assert np.array_equal(a.tokens, b.tokens) and a.attractiveness == b.attractiveness
    assert back.relevance == corpus.relevance and back.clicks == corpus.clicks
    ids = [json.loads(line)["id"] for line in paths["items"].read_text().splitlines()]
    assert ids == sorted(ids)
