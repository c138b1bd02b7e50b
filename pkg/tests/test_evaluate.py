import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_weighted_metrics
from voiannotate.baseline import HeadPoseSample, Registration
from voiannotate.evaluate import (
    ComparisonEntry,
    ConfusionMatrix,
    FixationAnnotation,
    MetricsReport,
    compare_reports,
    confusion,
    format_metrics_report,
    parse_metrics_report,
    popular_vote,
    qa_target_check,
    weighted_metrics,
)
from voiannotate.geometry import CameraIntrinsics, VoiError, project, vec3
from voiannotate.ingest import FixationEvent
from voiannotate.render import look_at_pose


class TestPopularVote:
    def test_plain_majority(self):
        ann = popular_vote(1, [(0, None), (0, None), (1, None)], 4)
        assert ann.class_index == 0
        assert ann.votes == {0: 2, 1: 1}
        assert ann.total_votes == 3 and ann.winner_votes == 2

    def test_tie_breaks_on_summed_confidence(self):
        ann = popular_vote(1, [(0, 0.9), (1, 0.7)], 4)
        assert ann.class_index == 0
        ann = popular_vote(1, [(0, 0.6), (1, 0.7)], 4)
        assert ann.class_index == 1

    def test_tie_prefers_non_default(self):
        # class 3 is a default (environment) in a 4-class catalog
        ann = popular_vote(1, [(3, None), (1, None)], 4)
        assert ann.class_index == 1

    def test_tie_finally_lower_index(self):
        ann = popular_vote(1, [(2, None), (1, None)], 5)
        assert ann.class_index == 1

    def test_empty_votes(self):
        with pytest.raises(VoiError):
            popular_vote(1, [], 4)

    def test_mean_confidence_is_winner_mean(self):
        ann = popular_vote(1, [(0, 0.8), (0, 0.6), (1, 0.99)], 4)
        assert ann.confidence == pytest.approx(0.7)

    @settings(max_examples=150, deadline=None)
    @given(
        votes=st.lists(st.tuples(st.integers(0, 4), st.floats(0.01, 1.0)), min_size=1, max_size=12),
        seed=st.integers(0, 1000),
    )
    def test_permutation_invariance(self, votes, seed):
        rng = np.random.default_rng(seed)
        shuffled = [votes[i] for i in rng.permutation(len(votes))]
        a = popular_vote(7, votes, 5)
        b = popular_vote(7, shuffled, 5)
        assert a.class_index == b.class_index
        assert a.votes == b.votes


class TestConfusion:
    def anns(self, classes):
        return [FixationAnnotation(i, c, {c: 1}) for i, c in enumerate(classes)]

    def test_identical_streams_diagonal(self):
        cm = confusion(self.anns([0, 1, 2, 1]), self.anns([0, 1, 2, 1]), ("a", "b", "c"))
        assert cm.counts.sum() == 4
        assert (cm.counts == np.diag(np.diag(cm.counts))).all()

    def test_single_error_off_diagonal(self):
        cm = confusion(self.anns([0, 1, 1]), self.anns([0, 1, 2]), ("a", "b", "c"))
        assert cm.counts[1, 2] == 1 and cm.total == 3

    def test_disjoint_ids_error(self):
        a = [FixationAnnotation(1, 0, {0: 1})]
        b = [FixationAnnotation(2, 0, {0: 1})]
        with pytest.raises(VoiError, match="fixation id sets differ"):
            confusion(a, b, ("a", "b"))


class TestWeightedMetrics:
    def test_perfect_diagonal(self):
        cm = ConfusionMatrix(np.diag([5, 3, 9]), ("a", "b", "c"))
        rep = weighted_metrics(cm)
        assert rep.weighted_precision == 1.0
        assert rep.weighted_recall == 1.0
        assert rep.weighted_f1 == 1.0

    def test_hand_arithmetic_two_class(self):
        cm = ConfusionMatrix(np.array([[8, 2], [1, 9]]), ("a", "b"))
        rep = weighted_metrics(cm)
        assert rep.accuracy == pytest.approx(0.85)
        assert rep.weighted_precision == pytest.approx(0.5 * (8 / 9) + 0.5 * (9 / 11), abs=1e-12)

    def test_absent_class_counts_zero_with_zero_weight(self):
        cm = ConfusionMatrix(np.array([[4, 0, 0], [0, 3, 0], [0, 0, 0]]), ("a", "b", "c"))
        rep = weighted_metrics(cm)
        assert rep.per_class[2].support == 0 and rep.per_class[2].f1 == 0.0
        assert rep.weighted_f1 == 1.0

    def test_empty_matrix_error(self):
        cm = ConfusionMatrix(np.zeros((2, 2), dtype=int), ("a", "b"))
        with pytest.raises(VoiError):
            weighted_metrics(cm)

    def test_1000_random_matrices_match_brute_force(self):
        rng = np.random.default_rng(123)
        for _ in range(1000):
            n = int(rng.integers(2, 8))
            counts = rng.integers(0, 40, size=(n, n))
            if counts.sum() == 0:
                counts[0, 0] = 1
            cm = ConfusionMatrix(counts, tuple(f"c{i}" for i in range(n)))
            rep = weighted_metrics(cm)
            wp, wr, wf = brute_force_weighted_metrics(counts)
            assert abs(rep.weighted_precision - wp) < 1e-12
            assert abs(rep.weighted_recall - wr) < 1e-12
            assert abs(rep.weighted_f1 - wf) < 1e-12
            # exact identity, not approximate
            assert rep.weighted_recall == np.trace(cm.counts) / cm.total

    def test_report_round_trip(self):
        cm = ConfusionMatrix(np.array([[8, 2], [1, 9]]), ("a", "b"))
        rep = weighted_metrics(cm)
        text = format_metrics_report(rep)
        again = parse_metrics_report(text)
        assert again.weighted_precision == pytest.approx(rep.weighted_precision, abs=1e-6)
        assert [c.name for c in again.per_class] == ["a", "b"]


class TestQATargetCheck:
    K = CameraIntrinsics()
    TARGET = vec3(0.0, 1.0, 1.2)

    def participant(self, offset_deg, n=4, distance=1.0):
        """Revisit fixations whose gaze pixel sits offset_deg away from the
        target direction."""
        pose = look_at_pose(vec3(0.0, 1.0 - distance, 1.2), self.TARGET)
        px, py = project(self.TARGET, pose, self.K)
        shift = self.K.focal_px * math.tan(math.radians(offset_deg))
        events = [
            FixationEvent(i, 1000 * i, 1000 * i + 100, px + shift, py, revisit=True)
            for i in range(n)
        ]
        poses = [HeadPoseSample(t, pose) for t in range(0, n * 1000 + 1000, 50)]
        return events, poses

    def test_exact_center_passes_with_zero_offset(self):
        report = qa_target_check({"p0": self.participant(0.0)}, self.TARGET, 0.010, self.K)
        entry = report.entries[0]
        assert entry.mean_offset_deg == pytest.approx(0.0, abs=1e-9)
        assert entry.passed and report.excluded == []
        assert report.target_visual_angle_deg == pytest.approx(0.573, abs=1e-3)

    def test_constant_offset_threshold_logic(self):
        participants = {"p0": self.participant(1.0)}
        ok = qa_target_check(participants, self.TARGET, 0.010, self.K, threshold_deg=1.5)
        assert ok.entries[0].mean_offset_deg == pytest.approx(1.0, abs=1e-6)
        assert ok.entries[0].passed
        strict = qa_target_check(participants, self.TARGET, 0.010, self.K, threshold_deg=0.5)
        assert not strict.entries[0].passed and strict.excluded == ["p0"]

    def test_exclusion_list_shape(self):
        participants = {}
        for i in range(8):
            off = 1.6 if i < 2 else 0.8
            participants[f"p{i}"] = self.participant(off)
        report = qa_target_check(participants, self.TARGET, 0.010, self.K, threshold_deg=1.5)
        assert len(report.excluded) == 2
        assert len(report.entries) == 8

    def test_angles_invariant_under_rigid_transform(self):
        from voiannotate.geometry import quat_from_axis_angle, quat_mul, quat_rotate, Pose

        events, poses = self.participant(0.7)
        base = qa_target_check({"p": (events, poses)}, self.TARGET, 0.01, self.K)
        q = quat_from_axis_angle(vec3(0, 0, 1), 1.1)
        shift = vec3(0.4, -0.2, 0.3)
        moved_poses = [
            HeadPoseSample(
                s.t_ms,
                Pose(quat_rotate(q, s.pose.position) + shift, quat_mul(q, s.pose.orientation)),
            )
            for s in poses
        ]
        moved_target = quat_rotate(q, self.TARGET) + shift
        moved = qa_target_check({"p": (events, moved_poses)}, moved_target, 0.01, self.K)
        assert moved.entries[0].mean_offset_deg == pytest.approx(base.entries[0].mean_offset_deg, abs=1e-9)

    def test_no_revisits_error(self):
        events = [FixationEvent(0, 0, 100, 10, 10, revisit=False)]
        poses = [HeadPoseSample(0, look_at_pose(vec3(0, 0, 1), vec3(0, 1, 1)))]
        with pytest.raises(VoiError, match="no flagged revisit"):
            qa_target_check({"p": (events, poses)}, self.TARGET, 0.01, self.K)


class TestCompareReports:
    def rep(self, p, r, f):
        return MetricsReport(p, r, f, [])

    def test_flags_unique_maxima(self):
        table = compare_reports(
            [
                ComparisonEntry("geo", "real", self.rep(0.60, 0.58, 0.56)),
                ComparisonEntry("cnn", "real", self.rep(0.59, 0.59, 0.58)),
            ]
        )
        flags = table.flags()
        assert ("geo", "real", "precision") in flags
        assert ("cnn", "real", "recall") in flags
        assert ("cnn", "real", "f1") in flags

    def test_identical_reports_no_flags(self):
        table = compare_reports(
            [
                ComparisonEntry("a", "s", self.rep(0.5, 0.5, 0.5)),
                ComparisonEntry("b", "s", self.rep(0.5, 0.5, 0.5)),
            ]
        )
        assert table.flags() == set()

    def test_single_report_error(self):
        with pytest.raises(VoiError):
            compare_reports([ComparisonEntry("a", "s", self.rep(1, 1, 1))])

    def test_csv_and_text_render(self):
        table = compare_reports(
            [
                ComparisonEntry("geo", "real", self.rep(0.60, 0.58, 0.56)),
                ComparisonEntry("cnn", "real", self.rep(0.59, 0.59, 0.58)),
                ComparisonEntry("geo", "vr", self.rep(0.66, 0.59, 0.56)),
                ComparisonEntry("cnn", "vr", self.rep(0.63, 0.61, 0.61)),
            ]
        )
        rows = table.csv_rows()
        assert rows[0] == "method,setting,precision,recall,f1"
        assert rows[1].startswith("geo,real,0.600000")
        text = table.text()
        assert "== real ==" in text and "== vr ==" in text and "*" in text
