import numpy as np
import pytest
from scipy import special as spspecial
from scipy import stats as sps

from cfquant.errors import AllTies
from cfquant.stats import (
    anova_f,
    anova_p,
    betainc,
    f_sf,
    t_sf_two_sided,
    welch_t,
    welch_t_p,
    wilcoxon_signed_rank,
)


class TestBetainc:
    def test_against_scipy(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = rng.uniform(0.5, 30)
            b = rng.uniform(0.5, 30)
            x = rng.uniform(0, 1)
            assert betainc(a, b, x) == pytest.approx(spspecial.betainc(a, b, x), abs=1e-12)

    def test_edges(self):
        assert betainc(2.0, 3.0, 0.0) == 0.0
        assert betainc(2.0, 3.0, 1.0) == 1.0

    def test_tabulated_values(self):
        # I_0.5(1, 1) = 0.5; I_x(1, b) = 1 - (1-x)^b
        assert betainc(1.0, 1.0, 0.5) == pytest.approx(0.5, abs=1e-14)
        assert betainc(1.0, 4.0, 0.3) == pytest.approx(1 - 0.7 ** 4, abs=1e-12)


class TestWelch:
    def test_direct_formula_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.normal(0, 1, 8)
        b = rng.normal(0.5, 2, 6)
        t, df = welch_t(a, b)
        se = np.sqrt(a.var(ddof=1) / 8 + b.var(ddof=1) / 6)
        t_direct = (a.mean() - b.mean()) / se
        assert t.item() == pytest.approx(t_direct, abs=1e-10)
        ref = sps.ttest_ind(a, b, equal_var=False)
        assert t.item() == pytest.approx(ref.statistic, abs=1e-10)
        assert welch_t_p(a, b).item() == pytest.approx(ref.pvalue, abs=1e-6)

    def test_identical_groups_give_p_one(self):
        a = np.array([1.0, 2.0, 3.0])
        assert welch_t_p(a, a.copy()).item() == 1.0

    def test_zero_variance_convention(self):
        a = np.zeros(4)
        b = np.ones(4)
        # both variances zero -> p = 1 by convention even though means differ
        assert welch_t_p(a, b).item() == 1.0

    def test_separated_with_jitter(self):
        rng = np.random.default_rng(2)
        a = 0.0 + rng.normal(0, 1e-4, 4)
        b = 1.0 + rng.normal(0, 1e-4, 4)
        assert welch_t_p(a, b).item() < 1e-6

    def test_voxelwise_axis(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(5, 2, 2, 2))
        b = rng.normal(size=(7, 2, 2, 2))
        p = welch_t_p(a, b, axis=0)
        assert p.shape == (2, 2, 2)
        ref = sps.ttest_ind(a, b, equal_var=False, axis=0).pvalue
        assert np.allclose(p, ref, atol=1e-6)


class TestAnova:
    def test_direct_oracle(self):
        rng = np.random.default_rng(4)
        groups = [rng.normal(m, 1, n) for m, n in ((0, 5), (0.5, 7), (1.2, 6))]
        f, df1, df2 = anova_f(groups)
        ref = sps.f_oneway(*groups)
        assert f.item() == pytest.approx(ref.statistic, abs=1e-10)
        assert anova_p(groups).item() == pytest.approx(ref.pvalue, abs=1e-6)

    def test_identical_groups(self):
        a = np.array([1.0, 2.0, 3.0])
        assert anova_p([a, a.copy(), a.copy()]).item() == 1.0

    def test_separated_groups(self):
        rng = np.random.default_rng(5)
        groups = [c + rng.normal(0, 1e-5, 4) for c in (0.0, 1.0, 2.0)]
        assert anova_p(groups).item() < 1e-6

    def test_two_groups_rejected(self):
        with pytest.raises(ValueError):
            anova_f([np.ones(3), np.ones(3)])


class TestWilcoxon:
    def test_all_ties(self):
        with pytest.raises(AllTies):
            wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])

    def test_constant_shift_exact(self):
        a = np.arange(6, dtype=float) + 1.0
        b = np.arange(6, dtype=float)
        # all positive differences: one-sided exact p = 1 / 2^6
        p = wilcoxon_signed_rank(a, b, alternative="greater")
        assert p == pytest.approx(1.0 / 64.0, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=10)
        b = rng.normal(size=10)
        p_ab = wilcoxon_signed_rank(a, b, alternative="greater")
        p_ba = wilcoxon_signed_rank(b, a, alternative="less")
        assert p_ab == pytest.approx(p_ba, abs=1e-12)

    def test_exact_enumeration_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(5):
            diffs = rng.normal(size=8)
            a = diffs
            b = np.zeros(8)
            # brute-force enumeration over all sign assignments
            mags = np.abs(diffs)
            ranks = sps.rankdata(mags)
            w_obs = ranks[diffs > 0].sum()
            count_ge = 0
            n = len(diffs)
            for bits in range(2 ** n):
                w = sum(ranks[i] for i in range(n) if bits >> i & 1)
                if w >= w_obs - 1e-12:
                    count_ge += 1
            expected = count_ge / 2 ** n
            p = wilcoxon_signed_rank(a, b, alternative="greater")
            assert p == pytest.approx(expected, abs=1e-10)

    def test_against_scipy_two_sided(self):
        rng = np.random.default_rng(8)
        a = rng.normal(0.3, 1, 12)
        b = rng.normal(0.0, 1, 12)
        p = wilcoxon_signed_rank(a, b)
        ref = sps.wilcoxon(a, b, alternative="two-sided", mode="exact")
        assert p == pytest.approx(ref.pvalue, abs=1e-10)

    def test_normal_approximation_regime(self):
        rng = np.random.default_rng(9)
        a = rng.normal(0.4, 1, 40)
        b = rng.normal(0.0, 1, 40)
        p = wilcoxon_signed_rank(a, b)
        ref = sps.wilcoxon(a, b, alternative="two-sided", correction=True, mode="approx")
        assert p == pytest.approx(ref.pvalue, rel=0.05)
