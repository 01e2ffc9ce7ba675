import numpy as np
import pytest

from hnp.episodes import (
    CLASSIFICATION,
    REGRESSION,
    EpisodeSpec,
    GpConfig,
    SyntheticDomainsConfig,
    make_synthetic_domains,
    sample_gp_episode,
    sample_synthetic_classification_episode,
)
from hnp.eval import (
    GRADCHECK_COMPONENTS,
    MetricRow,
    accuracy_with_ci,
    as_float64,
    avg_nll,
    exchangeability_check,
    finite_diff_gradcheck,
    marginalization_check,
)
from hnp.models import ModelConfig, PredictiveOutput, TaskPrediction, build_model

SMALL = dict(d=16, d_z=8, d_w=16, heads=2, n_z=2, n_w=3)


def gaussian_output(means, scales):
    return PredictiveOutput(REGRESSION, [
        TaskPrediction(REGRESSION, mean=np.atleast_2d(m), scale=np.atleast_2d(s)) for m, s in zip(means, scales)
    ])


# -- NLL ----------------------------------------------------------------------

def test_nll_standard_normal():
    out = gaussian_output([np.zeros(3)], [np.ones(3)])
    row = avg_nll([out], [[np.zeros(3)]])
    assert row.mean == pytest.approx(0.9189385, abs=1e-6) and row.n == 3


def test_nll_sharp_prediction_is_negative():
    out = gaussian_output([np.zeros(1)], [np.full(1, 0.1)])
    # log(0.1) + 0.5 log(2 pi) ~ 0.9189 - 2.3026
    assert avg_nll([out], [[np.zeros(1)]]).mean == pytest.approx(-1.3836466, abs=1e-6)


def test_nll_shift():
    # one sigma off costs exactly 0.5 nats
    base = avg_nll([gaussian_output([np.zeros(2)], [np.ones(2)])], [[np.zeros(2)]]).mean
    off = avg_nll([gaussian_output([np.ones(2)], [np.ones(2)])], [[np.zeros(2)]]).mean
    assert off - base == pytest.approx(0.5)


def test_nll_masks_and_ci():
    outs = [gaussian_output([np.zeros(2), np.zeros(1)], [np.ones(2), np.ones(1)]) for _ in range(2)]
    truths = [[np.array([0.0, 5.0]), np.array([0.0])], [[0.0, 0.0], [1.0]]]
    masks = [[np.array([True, False]), np.array([True])], [np.array([True, True]), np.array([False])]]
    row = avg_nll(outs, truths, masks)
    assert row.n == 4 and row.mean == pytest.approx(0.9189385)
    assert row.ci95 == pytest.approx(0.0)
    full = avg_nll(outs, truths)
    assert full.n == 6 and full.ci95 > 0


def test_nll_input_errors():
    out = gaussian_output([np.zeros(1)], [np.ones(1)])
    with pytest.raises(ValueError):
        avg_nll([out], [])
    with pytest.raises(TypeError):
        avg_nll([object()], [[np.zeros(1)]])
    with pytest.raises(ValueError, match="no target"):
        avg_nll([out], [[np.zeros(1)]], [[np.array([False])]])


# -- accuracy -----------------------------------------------------------------

def test_accuracy_per_episode_ci():
    preds = np.array([0, 1, 1, 1, 0, 0])
    truth = np.array([0, 1, 0, 1, 0, 1])
    eps = np.array([0, 0, 1, 1, 2, 2])
    rows = accuracy_with_ci(preds, truth, eps)
    avg = rows["average"]
    assert avg.mean == pytest.approx(2 / 3) and avg.n == 3
    per = np.array([1.0, 0.5, 0.5])
    assert avg.ci95 == pytest.approx(1.96 * per.std(ddof=1) / np.sqrt(3))


def test_accuracy_domains():
    rows = accuracy_with_ci([0, 0, 1, 1], [0, 1, 1, 1], [0, 0, 0, 0], domains=[0, 0, 1, 1])
    assert list(rows) == ["domain_0", "domain_1", "average"]
    assert rows["domain_0"].mean == 0.5 and rows["domain_1"].mean == 1.0 and rows["average"].mean == 0.75


def test_accuracy_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        accuracy_with_ci([0, 1], [0], [0, 0])
    with pytest.raises(ValueError):
        accuracy_with_ci([], [], [])


def test_metric_row_validation():
    with pytest.raises(ValueError):
        MetricRow("x", 0.0, -1.0, 3)


# -- consistency checks -------------------------------------------------------

@pytest.fixture(scope="module")
def reg_model():
    return build_model(ModelConfig(**SMALL), seed=0)


@pytest.fixture(scope="module")
def cls_setup():
    doms = make_synthetic_domains(SyntheticDomainsConfig(feature_dim=6), seed=0)
    ep = sample_synthetic_classification_episode(EpisodeSpec(), doms, np.random.default_rng(1))
    net = build_model(ModelConfig(mode=CLASSIFICATION, x_dim=6, **SMALL), seed=0)
    return net, ep


def gp_ep(seed=0):
    return sample_gp_episode(GpConfig(), np.random.default_rng(seed))


@pytest.mark.parametrize("model", ["hnp", "cnp", "np"])
def test_exchangeability_passes(model):
    net = build_model(ModelConfig(model=model, **SMALL), seed=0)
    rep = exchangeability_check(net, gp_ep(), seed=3, trials=5, episode_id=7)
    assert set(rep) == {"check", "episode_id", "trials", "max_rel_err", "pass"}
    assert rep["pass"] and rep["episode_id"] == 7 and rep["max_rel_err"] <= 1e-6


def test_exchangeability_classification(cls_setup):
    net, ep = cls_setup
    assert exchangeability_check(net, ep, trials=5)["pass"]


def test_exchangeability_negative_control(reg_model):
    rep = exchangeability_check(reg_model, gp_ep(), trials=5, break_alignment=True)
    assert not rep["pass"] and rep["max_rel_err"] > 1e-3


@pytest.mark.parametrize("ep_seed", [0, 1])
def test_marginalization_passes(reg_model, ep_seed):
    rep = marginalization_check(reg_model, gp_ep(ep_seed), seed=2, trials=5)
    assert rep["pass"] and rep["max_rel_err"] <= 1e-9


def test_marginalization_keep_one(cls_setup):
    net, ep = cls_setup
    assert marginalization_check(net, ep, trials=3, keep_one=True)["pass"]


class TargetCoupled:
    """Test double whose predictions depend on the other target inputs."""

    def __init__(self, inner):
        self.inner = inner
        self.cfg = inner.cfg

    def predict(self, batch, rng, n_z=None, n_w=None):
        out = self.inner.predict(batch, rng, n_z, n_w)
        for m, tp in enumerate(out.tasks):
            n = batch.n_target[m]
            tp.mean = tp.mean + batch.tx[m, :n, 0].mean()
        return out


def test_marginalization_negative_control(reg_model):
    coupled = TargetCoupled(as_float64(reg_model))
    rep = marginalization_check(coupled, gp_ep(), trials=5)
    assert not rep["pass"]


class OrderDependent(TargetCoupled):
    def predict(self, batch, rng, n_z=None, n_w=None):
        out = self.inner.predict(batch, rng, n_z, n_w)
        for m, tp in enumerate(out.tasks):
            tp.mean = tp.mean + 0.1 * np.arange(batch.n_target[m])
        return out


def test_exchangeability_catches_order_dependence(reg_model):
    rep = exchangeability_check(OrderDependent(as_float64(reg_model)), gp_ep(), trials=5)
    assert not rep["pass"]


def test_float64_twin_matches(reg_model):
    twin = as_float64(reg_model)
    assert twin.cfg.dtype == "float64" and as_float64(twin) is twin
    for (_, a), (_, b) in zip(reg_model.named_parameters(), twin.named_parameters()):
        np.testing.assert_array_equal(a.data.astype(np.float64), b.data)


# -- gradient verification ----------------------------------------------------

@pytest.mark.parametrize("component", [c for c in GRADCHECK_COMPONENTS if c != "elbo"])
@pytest.mark.parametrize("mode", ["classification", "regression"])
def test_gradcheck_components(component, mode):
    rep = finite_diff_gradcheck(component, mode=mode)
    assert rep["pass"], rep["per_parameter"]
    assert rep["max_rel_err"] < 1e-4


def test_gradcheck_unknown_component():
    with pytest.raises(ValueError):
        finite_diff_gradcheck("bogus")


class _IdentityRng:
    """Stands in for a Generator: identity permutations, full subsets."""

    def permutation(self, n):
        return np.arange(n)

    def integers(self, lo, hi):
        return hi - 1

    def choice(self, n, size, replace):
        return np.arange(size)


def test_identity_permutation_is_exact(reg_model):
    rep = exchangeability_check(reg_model, gp_ep(), trials=3, perm_rng=_IdentityRng())
    assert rep["max_rel_err"] == 0.0


def test_deleting_nothing_is_exact(reg_model):
    rep = marginalization_check(reg_model, gp_ep(), trials=3, subset_rng=_IdentityRng())
    assert rep["max_rel_err"] == 0.0


def test_accuracy_examples():
    assert accuracy_with_ci([1, 2], [1, 2], [0, 1])["average"].mean == 1.0
    assert accuracy_with_ci([1, 2], [1, 2], [0, 1])["average"].ci95 == 0.0
    row = accuracy_with_ci([1, 1, 0, 0], [1, 1, 1, 1], [0, 1, 2, 3])["average"]
    assert row.mean == 0.5 and row.ci95 == pytest.approx(1.96 * 0.5774 / 2, abs=1e-3)
    swapped = accuracy_with_ci([0, 1, 0, 1], [1, 1, 1, 1], [3, 0, 2, 1])["average"]
    assert (swapped.mean, swapped.ci95) == (row.mean, row.ci95)
