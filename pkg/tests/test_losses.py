import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scf.estimator import random_same_class_partner
from scf.losses import FeatureBatch, LossConfig, contrastive, cross_entropy, self_cl, steg_cl, sup_cl
from scf.numkit import finite_diff_grad, make_rng, rel_err
from scf.oracles import oracle_self_cl, oracle_steg_cl, oracle_sup_cl
from scf.rss import PairSelection, select_positives

# six 2-D features, two classes of three; reference values from 50-digit arithmetic
FIXED_Z = np.array([[1, 2], [2, -1], [0.5, 0.5], [-1, 3], [2, 2], [-0.5, 1]], dtype=float)
FIXED_Y = np.array([0, 0, 0, 1, 1, 1])
FIXED_PAIRS = PairSelection([(0, 2), (1, 2), (3, 5), (4, 5)])
FIXED_MAP = [1, 0, 0, 4, 3, 3]
FROZEN_STEG = 3.0348673907116735251
FROZEN_SUP = 10.191348321503406642
FROZEN_SELF = 10.561832194570842497


def random_batch(rng, B, d, n_cover=None):
    Z = rng.uniform(-2, 2, size=(B, d))
    if n_cover is None:
        y = np.tile([0, 1], B // 2 + 1)[:B]
    else:
        y = np.array([0] * n_cover + [1] * (B - n_cover))
    return FeatureBatch(Z, rng.permutation(y))


class TestClosedForms:
    def test_self_two_samples(self):
        b = FeatureBatch(make_rng(0).standard_normal((2, 3)), [0, 1])
        assert self_cl(b, [1, 0], LossConfig()).value == pytest.approx(0.0, abs=1e-15)

    def test_self_identical(self):
        b = FeatureBatch(np.tile([0.6, 0.8], (4, 1)), [0, 0, 1, 1])
        out = self_cl(b, [1, 0, 3, 2], LossConfig())
        assert out.value == pytest.approx(4 * math.log(3), rel=1e-12)
        assert out.term_count == 4

    def test_sup_identical(self):
        b = FeatureBatch(np.tile([0.6, 0.8], (4, 1)), [0, 0, 1, 1])
        out = sup_cl(b, LossConfig())
        assert out.value == pytest.approx(4.394449154672439, rel=1e-12)
        assert out.term_count == 4

    def test_steg_identical(self):
        b = FeatureBatch(np.tile([0.6, 0.8], (4, 1)), [0, 0, 1, 1])
        out = steg_cl(b, PairSelection([(0, 1), (2, 3)]), LossConfig())
        assert out.value == pytest.approx(2 * math.log(2), rel=1e-12)
        assert out.term_count == 2

    def test_frozen_reference_values(self):
        b = FeatureBatch(FIXED_Z, FIXED_Y)
        cfg = LossConfig(tau=0.5)
        assert steg_cl(b, FIXED_PAIRS, cfg).value == pytest.approx(FROZEN_STEG, rel=1e-13)
        assert sup_cl(b, cfg).value == pytest.approx(FROZEN_SUP, rel=1e-13)
        assert self_cl(b, FIXED_MAP, cfg).value == pytest.approx(FROZEN_SELF, rel=1e-13)

    def test_sup_class_of_four_oracle_terms(self):
        b = FeatureBatch(make_rng(1).standard_normal((4, 3)), [0, 0, 0, 0])
        assert oracle_sup_cl(b, LossConfig())[1] == 12
        assert sup_cl(b, LossConfig()).term_count == 12


class TestOracleEquivalence:
    @pytest.mark.parametrize("normalize", [True, False])
    @pytest.mark.parametrize("tau", [0.05, 0.1, 0.5, 1.0])
    def test_random_batches(self, normalize, tau):
        rng = make_rng(100, int(tau * 100), int(normalize))
        for _ in range(10):
            B = int(rng.integers(4, 17))
            d = int(rng.integers(2, 9))
            b = random_batch(rng, B, d, n_cover=int(rng.integers(2, B - 1)))
            if not normalize:
                b = FeatureBatch(b.Z * 0.5, b.labels)  # keep naive exp in range
            cfg = LossConfig(tau=tau, normalize_features=normalize)
            pos = random_same_class_partner(b.labels, rng)
            pairs = select_positives(b.labels, rng)
            assert rel_err(self_cl(b, pos, cfg).value, oracle_self_cl(b, pos, cfg)[0]) <= 1e-12
            assert rel_err(sup_cl(b, cfg).value, oracle_sup_cl(b, cfg)[0]) <= 1e-12
            assert rel_err(steg_cl(b, pairs, cfg).value, oracle_steg_cl(b, pairs, cfg)[0]) <= 1e-12

    def test_include_positive(self):
        rng = make_rng(7)
        cfg = LossConfig(tau=0.2, include_positive_in_denominator=True)
        for _ in range(10):
            b = random_batch(rng, 12, 4)
            pairs = select_positives(b.labels, rng)
            out = steg_cl(b, pairs, cfg)
            assert rel_err(out.value, oracle_steg_cl(b, pairs, cfg)[0]) <= 1e-12
            assert out.value >= 0


class TestGradients:
    @pytest.mark.parametrize("normalize", [True, False])
    @pytest.mark.parametrize("variant", ["selfcl", "supcl", "stegcl", "stegcl+pos"])
    def test_finite_differences(self, variant, normalize):
        rng = make_rng(31, len(variant), int(normalize))
        b = random_batch(rng, 12, 5)
        cfg = LossConfig(tau=0.5, normalize_features=normalize,
                         include_positive_in_denominator=variant.endswith("+pos"))
        pos = random_same_class_partner(b.labels, rng)
        pairs = select_positives(b.labels, rng)

        def f(Z):
            bb = FeatureBatch(Z, b.labels)
            if variant == "selfcl":
                return self_cl(bb, pos, cfg)
            if variant == "supcl":
                return sup_cl(bb, cfg)
            return steg_cl(bb, pairs, cfg)

        fd = finite_diff_grad(lambda Z: f(Z).value, b.Z)
        assert rel_err(f(b.Z).grad, fd) <= 1e-6

    def test_cross_entropy_fd(self):
        rng = make_rng(2)
        X = rng.standard_normal((9, 2)) * 3
        y = rng.integers(0, 2, 9)
        fd = finite_diff_grad(lambda L: cross_entropy(L, y).value, X)
        assert rel_err(cross_entropy(X, y).grad, fd) <= 1e-6


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy([[0.0, 0.0]], [1]).value == pytest.approx(math.log(2))

    def test_saturated(self):
        assert cross_entropy([[30.0, -30.0]], [0]).value <= 1e-12

    def test_huge_logits_finite(self):
        out = cross_entropy([[1e4, -1e4]], [1])
        assert out.value == pytest.approx(2e4)
        assert np.all(np.isfinite(out.grad))


class TestProperties:
    def test_permutation_equivariance(self):
        rng = make_rng(8)
        b = random_batch(rng, 10, 3)
        pairs = select_positives(b.labels, rng)
        perm = rng.permutation(10)
        inv = np.argsort(perm)
        pb = FeatureBatch(b.Z[perm], b.labels[perm])
        ppairs = PairSelection([(int(inv[a]), int(inv[p])) for a, p in pairs.pairs])
        cfg = LossConfig()
        for f, g in [(lambda x: sup_cl(x, cfg), lambda x: sup_cl(x, cfg)),
                     (lambda x: steg_cl(x, pairs, cfg), lambda x: steg_cl(x, ppairs, cfg))]:
            o, po = f(b), g(pb)
            assert po.value == pytest.approx(o.value, rel=1e-12)
            np.testing.assert_allclose(po.grad, o.grad[perm], rtol=1e-9, atol=1e-12)

    @given(st.floats(1e-3, 1e3))
    @settings(max_examples=25, deadline=None)
    def test_scale_invariance(self, c):
        rng = make_rng(12)
        b = random_batch(rng, 8, 3)
        pairs = select_positives(b.labels, rng)
        cfg = LossConfig()
        scaled = FeatureBatch(b.Z * c, b.labels)
        assert rel_err(sup_cl(scaled, cfg).value, sup_cl(b, cfg).value) <= 1e-10
        assert rel_err(steg_cl(scaled, pairs, cfg).value, steg_cl(b, pairs, cfg).value) <= 1e-10

    @given(st.lists(st.integers(0, 1), min_size=4, max_size=40), st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_term_count_laws(self, labels, seed):
        labels = np.array(labels)
        counts = np.bincount(labels, minlength=2)
        if counts.min() < 2:
            return
        b = FeatureBatch(make_rng(seed).standard_normal((labels.size, 3)), labels)
        assert sup_cl(b, LossConfig()).term_count == int(np.sum(counts * (counts - 1)))
        pairs = select_positives(labels, make_rng(seed))
        assert steg_cl(b, pairs, LossConfig()).term_count == int(np.sum(counts - 1))

    def test_self_and_sup_nonnegative(self):
        rng = make_rng(4)
        for _ in range(20):
            b = random_batch(rng, 10, 4)
            assert self_cl(b, random_same_class_partner(b.labels, rng), LossConfig()).value >= 0
            assert sup_cl(b, LossConfig()).value >= 0

    def test_extreme_temperature_stays_finite(self):
        rng = make_rng(5)
        b = random_batch(rng, 16, 4)
        cfg = LossConfig(tau=1e-3, normalize_features=False)
        b = FeatureBatch(b.Z * 10, b.labels)
        pairs = select_positives(b.labels, rng)
        for out in (sup_cl(b, cfg), steg_cl(b, pairs, cfg)):
            assert np.isfinite(out.value) and np.all(np.isfinite(out.grad))


class TestErrors:
    def test_self_too_small(self):
        with pytest.raises(ValueError, match="no contrast possible"):
            self_cl(FeatureBatch([[1.0, 0.0]], [0]), [0], LossConfig())

    def test_self_reference(self):
        with pytest.raises(ValueError):
            self_cl(FeatureBatch(np.eye(3), [0, 0, 1]), [0, 0, 1], LossConfig())

    def test_sup_singleton_class(self):
        with pytest.raises(ValueError, match="anchor without positive"):
            sup_cl(FeatureBatch(np.eye(3), [0, 0, 1]), LossConfig())

    def test_steg_one_class(self):
        with pytest.raises(ValueError, match="empty negative set"):
            steg_cl(FeatureBatch(np.eye(3), [0, 0, 0]), PairSelection([(0, 1), (1, 2)]), LossConfig())

    def test_steg_cross_class_pair(self):
        with pytest.raises(ValueError):
            steg_cl(FeatureBatch(np.eye(4), [0, 0, 1, 1]), PairSelection([(0, 2)]), LossConfig())

    def test_steg_no_pairs_warns(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = steg_cl(FeatureBatch(np.eye(2), [0, 1]), PairSelection([]), LossConfig())
        assert out.value == 0.0 and out.term_count == 0
        assert any(issubclass(w.category, RuntimeWarning) for w in caught)

    @pytest.mark.parametrize("kwargs", [{"tau": 0.0}, {"lam": -1.0}, {"variant": "triplet"}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            LossConfig(**kwargs)

    def test_labels_must_be_binary(self):
        with pytest.raises(ValueError):
            FeatureBatch(np.eye(3), [0, 1, 2])

    def test_dispatch(self):
        b = FeatureBatch(np.eye(4), [0, 0, 1, 1])
        assert contrastive(b, LossConfig(variant="none")).value == 0.0
        with pytest.raises(ValueError):
            contrastive(b, LossConfig(variant="stegcl"))
        with pytest.raises(ValueError):
            contrastive(b, LossConfig(variant="selfcl"))
