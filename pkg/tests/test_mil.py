import numpy as np
import oracles
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from crydet import diffcore as dc
from crydet.diffcore import Tensor
from crydet.errors import ContractError
from crydet.mil import (
    BagScores,
    FeatureBag,
    LossConfig,
    interpolate_segments,
    magnitude_loss,
    mil_ranking_loss,
    rtfm_loss,
    score_mil_loss,
    smoothness,
    sparsity,
    topk_by_magnitude,
    topk_score_bce,
)
from crydet.model import build_head

T = lambda *v: Tensor(np.array(v, dtype=np.float64))  # noqa: E731


class TestInterpolate:
    def test_identity(self, rng):
        x = rng.standard_normal((5, 3))
        np.testing.assert_allclose(interpolate_segments(x, 5), x)

    def test_hand_values(self):
        out = interpolate_segments(np.array([[0.0], [1.0], [2.0]]), 5)
        np.testing.assert_allclose(out[:, 0], [0, 0.5, 1, 1.5, 2])

    @pytest.mark.parametrize("s", [1, 2, 7, 16])
    def test_constant_rows(self, s):
        out = interpolate_segments(np.full((4, 3), 2.5), s)
        assert out.shape == (s, 3)
        np.testing.assert_allclose(out, 2.5)

    def test_single_segment_is_mean(self, rng):
        x = rng.standard_normal((6, 2))
        np.testing.assert_allclose(interpolate_segments(x, 1)[0], x.mean(axis=0))

    def test_single_frame_replicated(self):
        out = interpolate_segments(np.array([[1.0, -2.0]]), 4)
        np.testing.assert_allclose(out, [[1.0, -2.0]] * 4)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(1, 4)), elements=st.floats(-1e3, 1e3)),
           st.integers(2, 20))
    def test_within_adjacent_hull(self, x, s):
        out = interpolate_segments(x, s)
        f = x.shape[0]
        for j in range(s):
            p = j * (f - 1) / (s - 1)
            lo, hi = int(np.floor(p)), min(int(np.floor(p)) + 1, f - 1)
            a, b = np.minimum(x[lo], x[hi]), np.maximum(x[lo], x[hi])
            assert np.all(out[j] >= a - 1e-9) and np.all(out[j] <= b + 1e-9)


class TestTopk:
    def test_tie_rule(self):
        assert sorted(topk_by_magnitude(np.array([1, 5, 3, 5]), 2).tolist()) == [1, 3]

    def test_all(self):
        assert sorted(topk_by_magnitude(np.array([0.3, 0.1, 0.2]), 3).tolist()) == [0, 1, 2]

    def test_k_too_large(self):
        with pytest.raises(ContractError):
            topk_by_magnitude(np.zeros(3), 4)

    def test_vs_sort_oracle(self, rng):
        for _ in range(50):
            v = rng.integers(0, 6, size=rng.integers(1, 12)).astype(float)  # many ties
            k = int(rng.integers(1, v.size + 1))
            assert topk_by_magnitude(v, k).tolist() == oracles.topk_sorted(v.tolist(), k)

    def test_batched_rows(self, rng):
        m = rng.standard_normal((4, 6))
        out = topk_by_magnitude(m, 2)
        for row, idx in zip(m, out):
            assert idx.tolist() == oracles.topk_sorted(row.tolist(), 2)

    def test_permutation_consistency(self, rng):
        v = rng.standard_normal(8)
        perm = rng.permutation(8)
        assert set(perm[topk_by_magnitude(v[perm], 3)]) == set(topk_by_magnitude(v, 3))


class TestRankingLoss:
    @pytest.mark.parametrize("a,n,expected", [((0.2, 1.0), (0.0, 0.0), 0.0), ((0.5, 0.3), (0.5, 0.1), 1.0),
                                               ((0.9, 0.1), (0.3, 0.2), 0.4)])
    def test_examples(self, a, n, expected):
        assert mil_ranking_loss(T(*a), T(*n)).item() == pytest.approx(expected)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 5, elements=st.floats(0.001, 0.999)), arrays(np.float64, 5, elements=st.floats(0.001, 0.999)))
    def test_range(self, a, n):
        value = mil_ranking_loss(Tensor(a), Tensor(n)).item()
        assert 0.0 < value < 2.0


class TestRegularizers:
    def test_constant(self):
        assert smoothness(T(0.4, 0.4, 0.4)).item() == 0.0

    def test_hand_values(self):
        assert smoothness(T(0, 1, 0)).item() == 2.0
        assert sparsity(T(0, 1, 0)).item() == 1.0

    def test_zeros(self):
        assert smoothness(T(0, 0, 0)).item() == 0.0 and sparsity(T(0, 0, 0)).item() == 0.0

    def test_single_segment(self):
        assert smoothness(T(0.7)).item() == 0.0


class TestScoreMil:
    def test_reduces_to_ranking(self):
        cfg = LossConfig(lambda1=0, lambda2=0)
        a, n = T(0.3, 0.8), T(0.4, 0.2)
        assert score_mil_loss(a, n, cfg).item() == mil_ranking_loss(a, n).item()

    def test_hand_value(self):
        cfg = LossConfig(lambda1=1, lambda2=1)
        assert score_mil_loss(T(0, 1, 0), T(0, 0), cfg).item() == pytest.approx(3.0)


class TestMagnitudeLoss:
    def test_inactive(self):
        assert magnitude_loss(T(20, 20), T(1, 1), LossConfig(margin=100)).item() == 0.0

    def test_hand_value(self):
        assert magnitude_loss(T(2, 2), T(1, 1), LossConfig(margin=100, k=2)).item() == pytest.approx(97.0)

    def test_equal_bags(self):
        assert magnitude_loss(T(3, 1, 2), T(3, 1, 2), LossConfig(margin=100)).item() == pytest.approx(100.0)

    def test_k_violation(self):
        with pytest.raises(ContractError):
            magnitude_loss(T(1.0), T(1.0, 2.0), LossConfig(k=2))

    def test_monotone(self, rng):
        cfg = LossConfig(margin=50, k=2)
        for _ in range(30):
            ma, mn = rng.uniform(0, 8, 5), rng.uniform(0, 8, 5)
            base = magnitude_loss(Tensor(ma), Tensor(mn), cfg).item()
            i = rng.integers(5)
            up_a, up_n = ma.copy(), mn.copy()
            up_a[i] += rng.uniform(0, 3)
            up_n[i] += rng.uniform(0, 3)
            assert magnitude_loss(Tensor(up_a), Tensor(mn), cfg).item() <= base + 1e-12
            assert magnitude_loss(Tensor(ma), Tensor(up_n), cfg).item() >= base - 1e-12


class TestBce:
    def test_saturated_positive(self):
        assert topk_score_bce(T(1 - 1e-7, 1 - 1e-7, 0.1), T(5, 4, 1), 1, 2).item() == pytest.approx(0.0, abs=1e-6)

    @pytest.mark.parametrize("y", [0, 1])
    def test_half(self, y):
        assert topk_score_bce(T(0.5, 0.5, 0.9), T(3, 2, 1), y, 2).item() == pytest.approx(np.log(2))

    def test_uses_magnitude_ranking(self):
        # top-2 by magnitude are segments 0 and 2 -> mean score 0.25
        value = topk_score_bce(T(0.2, 0.99, 0.3), T(9, 1, 8), 1, 2).item()
        assert value == pytest.approx(-np.log(0.25))

    def test_clamped(self):
        assert np.isfinite(topk_score_bce(T(0.0, 0.0), T(1, 1), 1, 2).item())


class TestRtfm:
    def test_pure_bce(self):
        cfg = LossConfig(alpha=0, lambda1=0, lambda2=0, k=2)
        a = BagScores(T(0.7, 0.2, 0.9), T(3, 1, 2))
        n = BagScores(T(0.1, 0.4, 0.3), T(1, 2, 3))
        expected = -np.log((0.7 + 0.9) / 2) - np.log(1 - (0.3 + 0.4) / 2)
        assert rtfm_loss(a, n, cfg).item() == pytest.approx(expected)

    def test_separated_saturated_bags(self):
        cfg = LossConfig(k=2)
        hi, lo = 1 - 1e-9, 1e-9
        a = BagScores(T(hi, hi, lo, lo), T(50, 50, 1, 1))
        n = BagScores(T(lo, lo, lo, lo), T(1, 1, 1, 1))
        value = rtfm_loss(a, n, cfg).item()
        bound = cfg.lambda1 * 1.0 + cfg.lambda2 * 2.0 + 2 * 1.1e-7
        assert value <= bound
        assert magnitude_loss(a.magnitudes, n.magnitudes, cfg).item() == 0.0


class TestAgainstOracle:
    def test_random_bags(self, rng):
        cfg = LossConfig(margin=10.0, alpha=0.3, lambda1=0.2, lambda2=0.1, k=2)
        for _ in range(100):
            s = int(rng.integers(2, 9))
            sa, sn = rng.uniform(0.01, 0.99, s), rng.uniform(0.01, 0.99, s)
            ma, mn = rng.uniform(0, 4, s), rng.uniform(0, 4, s)
            args = (Tensor(sa), Tensor(sn))
            assert mil_ranking_loss(*args).item() == pytest.approx(oracles.top_hinge(sa.tolist(), sn.tolist()), rel=1e-6)
            assert score_mil_loss(*args, cfg).item() == pytest.approx(
                oracles.score_mil(sa.tolist(), sn.tolist(), cfg.lambda1, cfg.lambda2), rel=1e-6)
            assert magnitude_loss(Tensor(ma), Tensor(mn), cfg).item() == pytest.approx(
                oracles.magnitude_hinge(ma.tolist(), mn.tolist(), 2, cfg.margin), rel=1e-6, abs=1e-12)
            assert topk_score_bce(Tensor(sa), Tensor(ma), 1, 2).item() == pytest.approx(
                oracles.topk_bce(sa.tolist(), ma.tolist(), 1, 2), rel=1e-6)
            got = rtfm_loss(BagScores(Tensor(sa), Tensor(ma)), BagScores(Tensor(sn), Tensor(mn)), cfg).item()
            want = oracles.rtfm(sa.tolist(), ma.tolist(), sn.tolist(), mn.tolist(), 2, cfg.margin, cfg.alpha,
                               cfg.lambda1, cfg.lambda2)
            assert got == pytest.approx(want, rel=1e-6)

    def test_batched_is_pair_mean(self, rng):
        cfg = LossConfig(margin=5.0, alpha=0.5, k=2)
        sa, sn = rng.uniform(0.05, 0.95, (3, 5)), rng.uniform(0.05, 0.95, (3, 5))
        ma, mn = rng.uniform(0, 3, (3, 5)), rng.uniform(0, 3, (3, 5))
        batched = rtfm_loss(BagScores(Tensor(sa), Tensor(ma)), BagScores(Tensor(sn), Tensor(mn)), cfg).item()
        per = [oracles.rtfm(sa[i].tolist(), ma[i].tolist(), sn[i].tolist(), mn[i].tolist(), 2, 5.0, 0.5,
                           cfg.lambda1, cfg.lambda2) for i in range(3)]
        assert batched == pytest.approx(np.mean(per), rel=1e-9)


def head_loss_fd_error(variant, seed, dtype=np.float64, n_entries=12):
    """Analytic gradient of a bag loss through head parameters vs float64 central differences."""
    rng = np.random.default_rng(seed)
    cfg = LossConfig(margin=2.0, alpha=0.5, lambda1=0.3, lambda2=0.2, k=2, variant=variant)
    head = build_head(6, seed=seed, dropout=0.0)
    for p in head.params.values():
        p.data = p.data.astype(np.float64) * 3.0
    xa_data, xn_data = rng.standard_normal((8, 6)), rng.standard_normal((8, 6))

    def loss(cast):
        oa, on = head.forward(Tensor(xa_data.astype(cast))), head.forward(Tensor(xn_data.astype(cast)))
        a = BagScores(dc.reshape(oa.score, (2, 4)), dc.reshape(oa.magnitude, (2, 4)))
        n = BagScores(dc.reshape(on.score, (2, 4)), dc.reshape(on.magnitude, (2, 4)))
        if variant == "score_mil":
            return score_mil_loss(a.scores, n.scores, cfg)
        return rtfm_loss(a, n, cfg)

    master = {name: p.data.copy() for name, p in head.params.items()}
    for name, p in head.params.items():
        p.data = master[name].astype(dtype)
    dc.zero_grad(head.params.values())
    grads = dc.backward(loss(dtype), head.params)
    for name, p in head.params.items():
        p.data = master[name]

    worst = 0.0
    for name, p in head.params.items():
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_entries, flat.size), replace=False)
        analytic, numeric = [], []
        for i in picks:
            orig = flat[i]
            h = 1e-4 * max(abs(orig), 1e-2)
            flat[i] = orig + h
            up = loss(np.float64).item()
            flat[i] = orig - h
            down = loss(np.float64).item()
            flat[i] = orig
            numeric.append((up - down) / (2 * h))
            analytic.append(grads[name].reshape(-1)[i])
        worst = max(worst, dc.relative_error(np.array(analytic, dtype=np.float64), np.array(numeric)))
    return worst


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-6), (np.float32, 1e-4)], ids=["f64", "f32"])
@pytest.mark.parametrize("variant", ["score_mil", "rtfm"])
def test_total_loss_gradients_through_head(variant, dtype, tol):
    errors = [head_loss_fd_error(variant, seed, dtype) for seed in range(10)]
    assert max(errors) < tol, errors


def test_feature_bag_validation():
    with pytest.raises(ContractError):
        FeatureBag(np.zeros((0, 3)), 1)
    with pytest.raises(ContractError):
        FeatureBag(np.zeros((2, 3)), 2)
    with pytest.raises(ContractError):
        FeatureBag(np.array([[np.nan]]), 0)
