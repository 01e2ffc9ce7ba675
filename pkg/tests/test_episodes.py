import json

import numpy as np
import pytest

from hnp.episodes import (
    CLASSIFICATION,
    REGRESSION,
    Episode,
    EpisodeError,
    EpisodeSpec,
    FeatureBank,
    FeatureBankError,
    GpConfig,
    SyntheticDomainsConfig,
    load_feature_bank,
    make_synthetic_domains,
    rbf_kernel,
    rbf_matrix,
    sample_feature_episode,
    sample_gp_episode,
    sample_gp_values,
    sample_synthetic_classification_episode,
    validate_episode,
    write_feature_bank,
)


# -- kernel -----------------------------------------------------------------

def test_rbf_kernel_values():
    cfg = GpConfig()
    assert rbf_kernel(0.0, 0.0, cfg) == pytest.approx(1.0)
    # exp(-0.16 / 0.32) = exp(-0.5)
    assert rbf_kernel(0.0, 0.4, cfg) == pytest.approx(np.exp(-0.5))
    assert rbf_kernel(1.0, 5.0, cfg) == pytest.approx(np.exp(-50.0))


def test_rbf_matrix_symmetric_psd():
    cfg = GpConfig()
    xs = np.random.default_rng(0).uniform(-4, 4, 60)
    K = rbf_matrix(xs, xs, cfg)
    np.testing.assert_allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() > -1e-8


def test_gp_marginal_variance():
    cfg = GpConfig()
    rng = np.random.default_rng(1)
    xs = np.array([-3.0, -1.0, 0.5, 3.5])
    draws = np.stack([sample_gp_values(xs, cfg, rng) for _ in range(10_000)])
    # sd of a variance estimate from 1e4 normal draws is about 0.014
    np.testing.assert_allclose(draws.var(axis=0), cfg.signal_sigma**2, atol=0.05)
    np.testing.assert_allclose(draws.mean(axis=0), 0.0, atol=0.05)


def test_gp_duplicate_inputs_survive_jitter_retry():
    cfg = GpConfig(jitter=1e-12)
    ys = sample_gp_values(np.zeros(30), cfg, np.random.default_rng(0))
    assert np.ptp(ys) < 1e-3


def test_gp_config_rejects_overlap():
    with pytest.raises(ValueError, match="overlap"):
        GpConfig(intervals=((-1.0, 1.0), (0.0, 2.0)))
    with pytest.raises(ValueError):
        GpConfig(length_scale=0.0)


# -- GP episodes ------------------------------------------------------------

def test_gp_episode_layout():
    cfg = GpConfig()
    ep = sample_gp_episode(cfg, np.random.default_rng(3))
    assert ep.mode == REGRESSION and ep.n_tasks == 4
    for t, (lo, hi) in zip(ep.tasks, cfg.intervals):
        assert t.n_context == 5 and t.n_target == 15
        assert np.all((t.target_x >= lo) & (t.target_x < hi))
        np.testing.assert_array_equal(t.target_x[:5], t.context_x)
        np.testing.assert_array_equal(t.target_y[:5], t.context_y)
        assert t.target_in_context.tolist() == [True] * 5 + [False] * 10


def test_gp_episode_without_context_targets():
    ep = sample_gp_episode(GpConfig(include_context_in_target=False), np.random.default_rng(3))
    for t in ep.tasks:
        assert t.n_target == 10 and not t.target_in_context.any()


def test_gp_episodes_deterministic():
    a = sample_gp_episode(GpConfig(), np.random.default_rng(9)).to_json()
    b = sample_gp_episode(GpConfig(), np.random.default_rng(9)).to_json()
    assert a == b


def test_gp_episodes_validate():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        validate_episode(sample_gp_episode(GpConfig(), rng))


def test_episode_json_roundtrip():
    ep = sample_gp_episode(GpConfig(), np.random.default_rng(0))
    back = Episode.from_json(ep.to_json())
    assert back.to_json() == ep.to_json()
    json.loads(ep.to_json())


# -- synthetic classification -----------------------------------------------

@pytest.fixture(scope="module")
def domains():
    return make_synthetic_domains(SyntheticDomainsConfig(), seed=0)


def test_synthetic_splits_disjoint(domains):
    assert not set(domains.train_categories) & set(domains.test_categories)
    assert len(domains.train_categories) == 40 and len(domains.test_categories) == 25


def test_synthetic_episodes_validate(domains):
    spec = EpisodeSpec()
    rng = np.random.default_rng(0)
    for split in ("train", "test"):
        pool = set(domains.categories(split).tolist())
        for _ in range(500):
            ep = sample_synthetic_classification_episode(spec, domains, rng, split)
            validate_episode(ep, n_way=5, shots=1)
            assert set(ep.label_map) <= pool
            assert all(t.n_target == 15 for t in ep.tasks)


def test_synthetic_same_categories_across_tasks(domains):
    ep = sample_synthetic_classification_episode(EpisodeSpec(), domains, np.random.default_rng(2))
    for t in ep.tasks:
        np.testing.assert_array_equal(np.sort(t.context_y), np.arange(5))
        np.testing.assert_array_equal(np.bincount(t.target_y), [3] * 5)


def test_synthetic_too_many_ways(domains):
    with pytest.raises(EpisodeError, match="30-way"):
        sample_synthetic_classification_episode(EpisodeSpec(n_way=30, n_target=30), domains,
                                                np.random.default_rng(0), "test")


def test_spec_validation():
    with pytest.raises(ValueError):
        EpisodeSpec(n_target=7)
    with pytest.raises(ValueError):
        EpisodeSpec(shots=0)


# -- validator negatives ----------------------------------------------------

def _cls_episode(domains):
    return sample_synthetic_classification_episode(EpisodeSpec(), domains, np.random.default_rng(5))


def test_validate_catches_bad_label(domains):
    ep = _cls_episode(domains)
    ep.tasks[1].target_y[0] = 7
    with pytest.raises(EpisodeError, match="outside"):
        validate_episode(ep)


def test_validate_catches_shot_count(domains):
    ep = _cls_episode(domains)
    ep.tasks[0].context_y[0] = ep.tasks[0].context_y[1]
    with pytest.raises(EpisodeError, match="context counts"):
        validate_episode(ep, shots=1)


def test_validate_catches_task_indices(domains):
    ep = _cls_episode(domains)
    ep.tasks[2].task_index = 9
    with pytest.raises(EpisodeError, match="task indices"):
        validate_episode(ep)


def test_validate_catches_label_map(domains):
    ep = _cls_episode(domains)
    ep.label_map[1] = ep.label_map[0]
    with pytest.raises(EpisodeError, match="bijection"):
        validate_episode(ep)


# -- feature banks ----------------------------------------------------------

def _bank(n_per=4, dim=3):
    rng = np.random.default_rng(0)
    feats, cats, doms = [], [], []
    for d in range(2):
        for c in range(6):
            for _ in range(n_per):
                feats.append(rng.standard_normal(dim))
                cats.append(c)
                doms.append(d)
    return FeatureBank(dim, 2, np.array(feats), np.array(cats), np.array(doms), (0, 1, 2, 3), (4, 5))


def test_feature_bank_roundtrip(tmp_path):
    bank = _bank()
    path = tmp_path / "bank.txt"
    write_feature_bank(path, bank)
    back = load_feature_bank(path)
    np.testing.assert_array_equal(back.features, bank.features)
    assert back.train_categories == bank.train_categories and back.n_entries == 48


def test_feature_episode_sampling():
    spec = EpisodeSpec(n_tasks=2, n_way=2, shots=1, n_target=4)
    ep = sample_feature_episode(_bank(), spec, "test", np.random.default_rng(0))
    validate_episode(ep, n_way=2, shots=1)
    assert sorted(ep.label_map) == [4, 5]


def test_feature_episode_short_cell():
    spec = EpisodeSpec(n_tasks=2, n_way=2, shots=2, n_target=6)
    with pytest.raises(EpisodeError, match="needs 5"):
        sample_feature_episode(_bank(), spec, "train", np.random.default_rng(0))


def test_feature_bank_overlap_rejected():
    with pytest.raises(FeatureBankError, match="both splits"):
        FeatureBank(1, 1, np.zeros((1, 1)), np.array([0]), np.array([0]), (0,), (0,))


@pytest.mark.parametrize("text, line", [
    ("", 1),
    ("dim=2 domains=1\n", 2),
    ("dim=2 domains=1\ntrain_categories=0\ntest_categories=0\n0,0,1,2\n", 3),
    ("dim=2 domains=1\ntrain_categories=0\ntest_categories=1\n0,0,1\n", 4),
    ("dim=2 domains=1\ntrain_categories=0\ntest_categories=1\n0,0,1,2\n3,0,1,2\n", 5),
    ("dim=2 domains=1\ntrain_categories=0\ntest_categories=1\n0,8,1,2\n", 4),
    ("dim=2 domains=1\ntrain_categories=0\ntest_categories=1\n0,0,1,x\n", 4),
    ("dim=two domains=1\ntrain_categories=0\ntest_categories=1\n", 1),
    ("dim=2 domains=1\ntrain_categories=0\ntest_categories=1\n", 4),
])
def test_feature_bank_errors_name_line(tmp_path, text, line):
    path = tmp_path / "bad.txt"
    path.write_text(text)
    with pytest.raises(FeatureBankError, match=rf"^line {line}:"):
        load_feature_bank(path)


def test_modes_constants():
    assert {REGRESSION, CLASSIFICATION} == {"regression", "classification"}
