import numpy as np
import pytest

from tsvkit import backend as be
from oracles import dense_plda_llr, eer, min_dcf, plda_synthetic


def random_plda(rng, d=4, q=2):
    V = rng.standard_normal((d, q))
    A = rng.standard_normal((d, d))
    return be.PldaModel(rng.standard_normal(d), V, A @ A.T + 0.3 * np.eye(d))


class TestLda:
    def test_fisher_direction(self, rng):
        a = rng.standard_normal((200, 2))
        b = rng.standard_normal((200, 2)) + [10.0, 0.0]
        lda = be.fit_lda(np.vstack([a, b]), [0] * 200 + [1] * 200, 1)
        w = lda.projection[0]
        assert abs(w[0]) / np.linalg.norm(w) > 0.99
        pa, pb = lda.transform(a.mean(axis=0)), lda.transform(b.mean(axis=0))
        assert np.sign(pb - pa)[0] == np.sign(w[0])

    def test_rejects(self, rng):
        x = rng.standard_normal((6, 3))
        with pytest.raises(ValueError):
            be.fit_lda(x, [0, 0, 0, 1, 1, 1], 2)
        with pytest.raises(ValueError):
            be.fit_lda(x, [0] * 6, 1)
        with pytest.raises(ValueError):
            be.fit_lda(x, [0, 0, 0, 0, 0, 1], 1)

    def test_rank_deficient_within_scatter(self, rng):
        x = np.zeros((6, 3))
        x[3:, 0] = 1.0
        x[:, 1] = [0.1, -0.1, 0.0, 0.2, -0.2, 0.0]
        lda = be.fit_lda(x, [0, 0, 0, 1, 1, 1], 1)
        assert np.all(np.isfinite(lda.projection))
        assert lda.transform(x[3])[0] != lda.transform(x[0])[0]


class TestLengthNorm:
    def test_examples(self, rng):
        np.testing.assert_allclose(be.length_normalize(np.array([3.0, 4.0])), [0.6, 0.8], atol=1e-15)
        e = be.length_normalize(rng.standard_normal(7))
        assert abs(np.linalg.norm(e) - 1) <= 1e-12
        np.testing.assert_allclose(be.length_normalize(e), e, atol=1e-15)
        with pytest.raises(ValueError):
            be.length_normalize(np.zeros(3))


class TestPlda:
    def test_matches_dense_oracle(self, rng):
        for _ in range(50):
            m = random_plda(rng)
            a, b = rng.standard_normal(4), rng.standard_normal(4)
            want = dense_plda_llr(m.mean, m.between, m.Sigma, a, b)
            assert abs(be.score_plda(m, a, b) - want) <= 1e-8

    def test_symmetry_and_batch(self, rng):
        m = random_plda(rng)
        a, b = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        np.testing.assert_allclose(be.score_plda(m, a, b), be.score_plda(m, b, a), atol=1e-10)
        np.testing.assert_allclose(be.score_matrix(m, a, b).diagonal(), be.score_plda(m, a, b), atol=1e-10)

    def test_strong_speaker_direction_is_positive(self):
        v = np.array([[10.0], [0.0]])
        m = be.PldaModel(np.zeros(2), v, 0.01 * np.eye(2))
        e = np.array([10.0, 0.0])
        assert be.score_plda(m, e, e) > 0
        assert dense_plda_llr(m.mean, m.between, m.Sigma, e, e) > 0

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            be.score_plda(random_plda(rng), np.zeros(3), np.zeros(3))

    def test_em_monotone_and_recovers_subspace(self, rng):
        x, labels, V, _ = plda_synthetic(rng)
        m = be.fit_plda(x, labels, q=2, iters=50)
        assert np.min(np.diff(m.log_likelihoods)) >= -1e-8
        B = V @ V.T
        assert np.linalg.norm(m.V @ m.V.T - B) / np.linalg.norm(B) <= 0.10

    def test_q_zero_scores_zero(self, rng):
        x = rng.standard_normal((40, 3))
        m = be.fit_plda(x, np.repeat(np.arange(8), 5), q=0)
        assert abs(be.score_plda(m, x[0], x[7])) < 1e-12

    def test_rejects(self, rng):
        x = rng.standard_normal((10, 3))
        with pytest.raises(ValueError):
            be.fit_plda(x, [0] * 10, q=1)
        with pytest.raises(ValueError):
            be.fit_plda(x, [0, 1] * 5, q=4)


class TestSnorm:
    def test_examples(self):
        assert be.adaptive_snorm(3.0, [0.0, 2.0], [0.0, 2.0], top_k=2) == 2.0
        assert be.adaptive_snorm(1.0, [0.0, 2.0], [0.5, 1.5], top_k=2) == 0.0

    def test_monotone(self, rng):
        e, t = rng.standard_normal(30), rng.standard_normal(30)
        s = np.sort(rng.standard_normal(20))
        out = [be.adaptive_snorm(v, e, t, top_k=10) for v in s]
        assert np.all(np.diff(out) > 0)

    def test_degenerate_cohort_is_finite(self):
        assert np.isfinite(be.adaptive_snorm(1.0, [0.5, 0.5], [0.5], top_k=200))
        with pytest.raises(ValueError):
            be.adaptive_snorm(1.0, [], [1.0])


class TestMetrics:
    def test_eer_examples(self):
        assert be.compute_eer([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 0.0
        assert be.compute_eer([0.0, 1.0], [1, 0]) == 1.0
        assert be.compute_eer([3, 1, 2, 0], [1, 1, 0, 0]) == 0.5

    def test_single_class(self):
        with pytest.raises(ValueError):
            be.compute_eer([1.0, 2.0], [1, 1])
        with pytest.raises(ValueError):
            be.compute_min_dcf([1.0, 2.0], [0, 0], **be.DCF08)

    def test_presets(self):
        assert be.DCF08 == dict(p_target=0.01, c_miss=10.0, c_fa=1.0)
        assert be.DCF10 == dict(p_target=0.001, c_miss=1.0, c_fa=1.0)

    def test_dcf_examples(self):
        assert be.compute_min_dcf([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0], **be.DCF08) == 0.0
        got = be.compute_min_dcf([3, 1, 2, 0], [1, 1, 0, 0], **be.DCF08)
        assert got == min_dcf([3, 1, 2, 0], [1, 1, 0, 0], 0.01, 10.0, 1.0)

    def test_against_sweep_oracle(self, rng):
        for _ in range(200):
            n = int(rng.integers(2, 15))
            labels = rng.integers(0, 2, n)
            labels[:2] = [0, 1]
            scores = rng.integers(0, 6, n).astype(float) if rng.random() < 0.5 else rng.standard_normal(n)
            assert be.compute_eer(scores, labels) == eer(scores, labels)
            for preset in (be.DCF08, be.DCF10):
                got = be.compute_min_dcf(scores, labels, **preset)
                assert got == min_dcf(scores, labels, **preset)
                assert got <= 1.0 + 1e-12

    def test_det_points(self):
        pts = be.det_points([3, 1, 2, 2, 0], [1, 1, 0, 0, 0])
        assert len(pts) == 4 + 2
        assert pts[0] == (-np.inf, 0.0, 1.0) and pts[-1] == (np.inf, 1.0, 0.0)


class TestFiles:
    def test_trials_round_trip(self, tmp_path):
        trials = [be.Trial("a", "b", True), be.Trial("a", "c", False)]
        be.write_trials(trials, tmp_path / "t")
        assert (tmp_path / "t").read_text() == "a b target\na c nontarget\n"
        assert be.read_trials(tmp_path / "t") == trials

    def test_scores_bit_exact(self, tmp_path, rng):
        recs = [be.ScoreRecord(f"e{i}", f"t{i}", float(rng.standard_normal() * 10.0 ** rng.integers(-8, 8)),
                               float(rng.standard_normal())) for i in range(50)]
        be.write_scores(recs, tmp_path / "s")
        back = be.read_scores(tmp_path / "s")
        assert all(np.float64(a.raw).tobytes() == np.float64(b.raw).tobytes() and a.norm == b.norm
                   for a, b in zip(recs, back))
        be.write_scores(back, tmp_path / "s2")
        assert (tmp_path / "s").read_bytes() == (tmp_path / "s2").read_bytes()

    def test_bad_lines(self, tmp_path):
        (tmp_path / "t").write_text("a b maybe\n")
        with pytest.raises(ValueError):
            be.read_trials(tmp_path / "t")
        (tmp_path / "s").write_text("a b 1.0\n")
        with pytest.raises(ValueError):
            be.read_scores(tmp_path / "s")
