import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from nhnn import evaluation as ev
from nhnn.dataio import Corpus, Utterance
from nhnn.training import train_base_dcnn
from oracles import t_two_sided_p


def _corpus_from_speakers(speakers):
    utts = tuple(Utterance(f"u{i}", s, (3,), np.zeros(2), np.zeros((3, 2)), {"gender": "F"})
                 for i, s in enumerate(speakers))
    return Corpus("c", utts, scale_mid=3)


def _preds(y_true, y_pred, groups):
    n = len(y_true)
    return ev.Predictions([f"u{i}" for i in range(n)], ["s"] * n,
                          [{"group": g} for g in groups],
                          np.asarray(y_true), np.asarray(y_pred))


class TestUar:
    def test_diagonal(self):
        assert ev.uar(ev.ConfusionMatrix(np.diag([5, 2, 9]))) == 1.0

    def test_hand_recalls(self):
        y_true = [0] * 4 + [1] * 3 + [2] * 2
        y_pred = [0, 0, 1, 2] + [1, 1, 1] + [0, 1]
        cm = ev.confusion_matrix(y_true, y_pred)
        np.testing.assert_allclose(ev.per_class_recall(cm), [0.5, 1.0, 0.0])
        assert ev.uar(cm) == 0.5
        assert cm.total == 9

    def test_absent_class_dropped(self):
        assert ev.uar_from_labels([0, 0, 2, 2], [0, 1, 2, 2]) == 0.75

    def test_all_rows_zero(self):
        with pytest.raises(ValueError):
            ev.uar(ev.ConfusionMatrix(np.zeros((3, 3), dtype=int)))

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            ev.ConfusionMatrix(np.array([[1, -1], [0, 1]]))

    def test_label_range(self):
        with pytest.raises(ValueError):
            ev.confusion_matrix([0, 3], [0, 0])

    def test_sum_of_matrices(self):
        a = ev.confusion_matrix([0, 1], [0, 0])
        b = ev.confusion_matrix([2, 2], [2, 1])
        np.testing.assert_array_equal((a + b).counts, ev.confusion_matrix([0, 1, 2, 2],
                                                                          [0, 0, 2, 1]).counts)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40),
           st.lists(st.integers(1, 4), min_size=3, max_size=3))
    def test_classwise_duplication_invariant(self, pairs, reps):
        y_true, y_pred = map(np.array, zip(*pairs))
        ref = ev.uar_from_labels(y_true, y_pred)
        dup_t = np.concatenate([np.repeat(y_true[y_true == c], reps[c]) for c in range(3)])
        dup_p = np.concatenate([np.repeat(y_pred[y_true == c], reps[c]) for c in range(3)])
        assert math.isclose(ev.uar_from_labels(dup_t, dup_p), ref, rel_tol=1e-12)

    def test_uniform_random_near_chance(self, rng):
        y = np.repeat([0, 1, 2], 3000)
        assert abs(ev.uar_from_labels(y, rng.integers(0, 3, size=y.size)) - 1 / 3) < 0.02


class TestLoso:
    def test_three_speakers(self):
        c = _corpus_from_speakers(["b", "a", "c", "a", "b"])
        plan = ev.loso_split(c)
        assert [f.speaker for f in plan] == ["a", "b", "c"]
        assert sorted(i for f in plan for i in f.test_ids) == sorted(u.id for u in c)

    def test_single_utterance_speaker(self):
        plan = ev.loso_split(_corpus_from_speakers(["a", "a", "z"]))
        assert plan.folds[1].test_ids == ("u2",)
        assert plan.folds[1].train_ids == ("u0", "u1")

    def test_single_speaker_rejected(self):
        with pytest.raises(ValueError):
            ev.loso_split(_corpus_from_speakers(["a", "a"]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.sampled_from("abcdef"), min_size=2, max_size=30))
    def test_partition_property(self, speakers):
        if len(set(speakers)) < 2:
            return
        c = _corpus_from_speakers(speakers)
        spk = {u.id: u.speaker_id for u in c}
        plan = ev.loso_split(c)
        tested = [i for f in plan for i in f.test_ids]
        assert sorted(tested) == sorted(spk)
        for f in plan:
            assert set(f.train_ids) | set(f.test_ids) == set(spk)
            assert {spk[i] for i in f.test_ids} == {f.speaker}
            assert f.speaker not in {spk[i] for i in f.train_ids}


class TestTTest:
    def test_hand_example(self):
        r = ev.paired_t_test([1, 2, 3], [0, 0, 0])
        assert abs(r.t_statistic - 3.4641) < 1e-3
        assert r.degrees_of_freedom == 2 and r.n_pairs == 3
        assert abs(r.p_value_two_sided - 0.0742) < 1e-3
        assert not r.degenerate

    def test_equal_samples(self):
        r = ev.paired_t_test([0.4, 0.5, 0.6], [0.4, 0.5, 0.6])
        assert r.t_statistic == 0.0 and r.p_value_two_sided == 1.0 and r.degenerate

    def test_constant_shift_is_degenerate(self):
        r = ev.paired_t_test([1.0, 2.0, 3.0], [0.5, 1.5, 2.5])
        assert r.degenerate and r.t_statistic == math.inf and r.p_value_two_sided == 0.0

    def test_symmetry(self, rng):
        a, b = rng.normal(size=8), rng.normal(size=8)
        r1, r2 = ev.paired_t_test(a, b), ev.paired_t_test(b, a)
        assert r1.t_statistic == -r2.t_statistic
        assert r1.p_value_two_sided == r2.p_value_two_sided

    def test_matches_scipy(self, rng):
        for n in (2, 5, 12):
            a, b = rng.normal(size=n), rng.normal(size=n)
            ref = stats.ttest_rel(a, b)
            r = ev.paired_t_test(a, b)
            assert math.isclose(r.t_statistic, ref.statistic, rel_tol=1e-12)
            assert abs(r.p_value_two_sided - ref.pvalue) < 1e-12

    @pytest.mark.parametrize("df", [2, 5, 10, 30])
    def test_matches_numerical_integration(self, df):
        for t in (0.3, 1.0, 2.2, 4.5):
            assert abs(ev.student_t_sf2(t, df) - t_two_sided_p(t, df)) < 1e-6

    def test_cdf_properties(self):
        assert ev.student_t_cdf(0.0, 4) == 0.5
        assert math.isclose(ev.student_t_cdf(1.3, 7) + ev.student_t_cdf(-1.3, 7), 1.0,
                            rel_tol=1e-14)

    @pytest.mark.parametrize("a, b", [([1.0], [0.0]), ([1.0, 2.0], [1.0])])
    def test_bad_lengths(self, a, b):
        with pytest.raises(ValueError):
            ev.paired_t_test(a, b)

    def test_p_in_unit_interval(self, rng):
        for _ in range(30):
            r = ev.paired_t_test(rng.normal(size=4), rng.normal(size=4) * 5)
            assert 0.0 <= r.p_value_two_sided <= 1.0


class TestGroupBreakdown:
    def test_single_group_equals_overall(self):
        p = _preds([0, 1, 2, 2], [0, 2, 2, 1], ["x"] * 4)
        bd = ev.group_breakdown(p, "group")
        assert list(bd) == ["x"]
        assert bd["x"]["uar"] == ev.uar_from_labels(p.y_true, p.y_pred)

    def test_perfect_and_chance(self, rng):
        y = np.repeat([0, 1, 2], 2000)
        pred = np.concatenate([y, rng.integers(0, 3, size=y.size)])
        p = _preds(np.concatenate([y, y]), pred, ["a"] * y.size + ["b"] * y.size)
        bd = ev.group_breakdown(p, "group")
        assert bd["a"]["uar"] == 1.0
        assert abs(bd["b"]["uar"] - 1 / 3) < 0.02

    def test_matches_filter_oracle(self, rng):
        n = 200
        groups = rng.choice(["a", "b", "c"], size=n).tolist()
        p = _preds(rng.integers(0, 3, size=n), rng.integers(0, 3, size=n), groups)
        bd = ev.group_breakdown(p, "group")
        for g in "abc":
            rows = [i for i in range(n) if groups[i] == g]
            recalls = []
            for c in range(3):
                idx = [i for i in rows if p.y_true[i] == c]
                if idx:
                    recalls.append(sum(p.y_pred[i] == c for i in idx) / len(idx))
            assert math.isclose(bd[g]["uar"], sum(recalls) / len(recalls), rel_tol=1e-12)
            assert bd[g]["n"] == len(rows)

    def test_recombination_is_not_overall(self):
        # group-size weighted UARs need not recover the overall UAR
        p = _preds([0, 0, 0, 1, 1], [0, 0, 0, 0, 1], ["a", "a", "a", "b", "b"])
        bd = ev.group_breakdown(p, "group")
        weighted = (3 * bd["a"]["uar"] + 2 * bd["b"]["uar"]) / 5
        assert weighted != ev.uar_from_labels(p.y_true, p.y_pred)

    def test_reference_delta(self):
        p = _preds([0, 1, 0, 1], [0, 1, 1, 1], ["a", "a", "b", "b"])
        ref = _preds([0, 1, 0, 1], [1, 1, 1, 1], ["a", "a", "b", "b"])
        bd = ev.group_breakdown(p, "group", reference=ref)
        assert bd["a"]["delta_uar"] == 0.5 and bd["b"]["delta_uar"] == 0.0

    def test_unknown_attribute(self):
        with pytest.raises(KeyError):
            ev.group_breakdown(_preds([0], [0], ["a"]), "language")


class TestClusterRatios:
    def _corpus(self, genders, speakers):
        utts = tuple(Utterance(f"u{i}", s, (3,), np.zeros(2), np.zeros((3, 2)), {"gender": g})
                     for i, (g, s) in enumerate(zip(genders, speakers)))
        return Corpus("c", utts, scale_mid=3)

    def test_gender_ratio(self):
        c = self._corpus(["F"] * 65 + ["M"] * 100, ["s"] * 165)
        rep = ev.cluster_attribute_ratios(c, np.zeros(165, dtype=int))
        assert rep["clusters"]["0"]["gender_ratio"]["value"] == 0.65
        assert rep["ratio_definitions"] == {"gender": "F/M"}

    def test_balanced_and_dispersion(self):
        c = self._corpus(["F", "M"] * 45, ["a"] * 9 + ["b"] * 81)
        rep = ev.cluster_attribute_ratios(c, np.zeros(90, dtype=int))
        assert rep["overall"]["gender_ratio"]["value"] == 1.0
        assert rep["overall"]["subject_dispersion"]["value"] == 9.0

    def test_zero_denominator(self):
        c = self._corpus(["F", "F", "M"], ["a", "a", "b"])
        rep = ev.cluster_attribute_ratios(c, np.array([0, 0, 1]))
        r = rep["clusters"]["0"]["gender_ratio"]
        assert r == {"value": "inf", "numerator": 2, "denominator": 0}
        json.dumps(rep, allow_nan=False)

    def test_assignment_length(self):
        with pytest.raises(ValueError):
            ev.cluster_attribute_ratios(self._corpus(["F"], ["a"]), np.zeros(2))


class TestExperiments:
    def test_within_corpus_shapes_and_determinism(self, tiny_corpus, tiny_arch, fast_config):
        cfg = ev.ExperimentConfig(models=("dcnn", "nhnn_fc"), seeds=(0, 1),
                                  training=fast_config, arch=tiny_arch, n_init=2)
        a = ev.run_within_corpus(tiny_corpus, cfg)
        b = ev.run_within_corpus(tiny_corpus, cfg)
        assert a.mean_uar == b.mean_uar
        assert len(a.subject_uar["dcnn"][0]) == len(set(tiny_corpus.speakers))
        assert set(a.t_tests()) == {"nhnn_fc"}
        rep = ev.dumps_report(ev.within_report(a))
        assert rep == ev.dumps_report(ev.within_report(b))
        assert json.loads(rep)["schema_version"] == ev.REPORT_SCHEMA_VERSION

    def test_cross_corpus_self_is_holdout(self, tiny_corpus, tiny_arch, fast_config):
        cfg = ev.ExperimentConfig(models=("dcnn",), seeds=(3,), training=fast_config,
                                  arch=tiny_arch)
        res = ev.run_cross_corpus(tiny_corpus, tiny_corpus, cfg)
        model, _ = train_base_dcnn(tiny_corpus, replace(fast_config, seed=3), tiny_arch)
        want = ev.uar_from_labels(tiny_corpus.labels, model.predict(tiny_corpus.utterances))
        assert res.seed_uar["dcnn"][3] == want

    def test_cross_corpus_dimension_mismatch(self, tiny_corpus):
        other = _corpus_from_speakers(["a", "b"])
        with pytest.raises(ValueError):
            ev.run_cross_corpus(tiny_corpus, other, ev.ExperimentConfig(models=("dcnn",)))

    @pytest.mark.parametrize("kwargs", [{"models": ("cnn_lstm",)}, {"models": ()},
                                        {"seeds": ()}, {"models": ("dcnn", "dcnn")}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            ev.ExperimentConfig(**kwargs)

    def test_report_text(self, tiny_corpus, tiny_arch, fast_config):
        cfg = ev.ExperimentConfig(models=("dcnn", "mtl"), seeds=(0,), training=fast_config,
                                  arch=tiny_arch, group_attrs=("gender",))
        rep = ev.within_report(ev.run_within_corpus(tiny_corpus, cfg))
        text = ev.format_report(rep)
        assert "dcnn" in text and "mtl" in text and "gender" in text


@pytest.mark.slow
def test_cross_corpus_same_generator_and_shifted_groups():
    from nhnn.dataio import SyntheticSpec, generate_synthetic
    from nhnn.dcnn import Architecture
    from nhnn.training import TrainingConfig

    def corpus(seed):
        return generate_synthetic(SyntheticSpec(
            n_speakers_per_group=8, utterances_per_speaker=40, d_s=4, n_mel=5, T_range=(6, 10),
            label_map_mode="group_flipped", signal_strength=1.5, seed=seed))

    cfg = ev.ExperimentConfig(
        models=("dcnn", "nhnn_fc"), seeds=(0, 1, 2), n_init=3,
        training=TrainingConfig(batch_size=16, learning_rate=1e-2, max_epochs=15, patience=3),
        arch=Architecture(n_mel=5, channels=8, kernel_size=3, dilations=(1, 2), hidden=8))
    a, b = corpus(0), corpus(1)
    within = ev.run_within_corpus(a, cfg, jobs=4).mean_uar
    cross = ev.run_cross_corpus(a, b, cfg).mean_uar
    for m in cfg.models:
        assert abs(cross[m] - within[m]) <= 0.05, m
    # test groups sit far from every training cluster
    moved = replace(b, utterances=tuple(replace(u, summary_features=u.summary_features + 20.0)
                                        for u in b.utterances))
    assert ev.run_cross_corpus(a, moved, cfg).mean_uar["nhnn_fc"] >= 1 / 3 - 0.02
