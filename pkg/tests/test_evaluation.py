"""Tests for the held-out split, link-prediction accuracy and convergence tracking."""

import asyncio
import math

import numpy as np
import pytest

from src.embedding.core import EmbeddingTable
from src.graph.generators import bipartite_graph, complete_graph, path_graph
from src.models.data_models import AccuracyReport, Metric
from src.evaluation.convergence import ConvergenceLog, convergence_log, read_convergence_csv
from src.evaluation.link_prediction import (
    EvalSplit,
    PairSet,
    link_accuracy,
    predict_edges,
    read_split,
    split_edges,
    tables_by_type,
    write_split,
)
from src.utils.exceptions import (
    CheckpointError,
    InvalidParametersError,
    MissingEmbeddingError,
    SaturatedNoiseSpaceError,
)


def untyped_pairs(pairs):
    src = np.array([a for a, _ in pairs], dtype=np.int64)
    dst = np.array([b for _, b in pairs], dtype=np.int64)
    zeros = np.zeros(len(pairs), dtype=np.int64)
    return PairSet(zeros, src, zeros.copy(), dst)


def manual_split(positives, negatives):
    return EvalSplit(untyped_pairs(positives), untyped_pairs(negatives), ["V"])


async def steps_of(values):
    for step in values:
        yield step


def fixed_evaluator(totals=None, fail_at=()):
    """Evaluator whose positive and negative accuracy both equal totals[step] (or step % 100)."""
    async def evaluate(step):
        if step in fail_at:
            raise MissingEmbeddingError("table not ready")
        value = float(totals[step]) if totals else float(step % 100)
        return AccuracyReport.from_accuracies(value, value, 0.5, step)
    return evaluate


@pytest.fixture
def path_split():
    return split_edges(path_graph(101), ratio=0.9, seed=0)


class TestSplitEdges:
    """Test held-out edge selection and non-edge sampling."""

    def test_sizes(self, path_split):
        """Test a 100-edge path holds out 10 edges with 10 negatives."""
        assert len(path_split.positives) == 10
        assert len(path_split.negatives) == 10
        src, _ = path_split.train_graph.edges()
        assert src.shape[0] == 90

    def test_held_out_edges_leave_training_graph(self, path_split):
        """Test held-out positives are edges of the full graph but not of the training graph."""
        graph = path_graph(101)
        u, v = path_split.positives.to_globals(graph)
        assert graph.has_edges(u, v).all()
        assert not path_split.train_graph.has_edges(u, v).any()

    def test_negatives_are_non_edges(self, path_split):
        """Test negatives are distinct non-edges and never self-pairs."""
        graph = path_graph(101)
        u, v = path_split.negatives.to_globals(graph)
        assert not graph.has_edges(u, v).any()
        assert np.all(u != v)
        keys = {(min(a, b), max(a, b)) for a, b in zip(u.tolist(), v.tolist())}
        assert len(keys) == 10

    def test_deterministic(self):
        """Test the same seed gives the same split."""
        a = split_edges(path_graph(101), seed=4)
        b = split_edges(path_graph(101), seed=4)
        np.testing.assert_array_equal(a.positives.src_id, b.positives.src_id)
        np.testing.assert_array_equal(a.negatives.dst_id, b.negatives.dst_id)

    def test_negatives_ratio(self):
        """Test several negatives per held-out positive."""
        split = split_edges(path_graph(101), seed=1, negatives_ratio=3)
        assert len(split.negatives) == 30

    def test_saturated(self):
        """Test a complete graph has no non-edges to sample."""
        with pytest.raises(SaturatedNoiseSpaceError):
            split_edges(complete_graph(5), ratio=0.5, max_attempts=20)

    def test_bad_ratio(self):
        """Test ratios outside (0, 1) are rejected."""
        with pytest.raises(InvalidParametersError):
            split_edges(path_graph(5), ratio=1.0)

    def test_typed_negatives_follow_positive_types(self):
        """Test negatives of a bipartite graph join a left vertex to a right vertex."""
        graph = bipartite_graph(10, 12, 0.3, seed=2)
        split = split_edges(graph, ratio=0.8, seed=3)
        assert split.type_labels == ["A", "B"]
        np.testing.assert_array_equal(np.sort(split.negatives.src_type), np.sort(split.positives.src_type))
        assert np.all(split.negatives.src_type != split.negatives.dst_type)


class TestLinkAccuracy:
    """Test accuracy computation."""

    def test_perfect_embeddings(self):
        """Test embeddings that separate edges from non-edges score 100 everywhere."""
        table = np.array([[10.0, 0.0], [10.0, 0.0], [-10.0, 0.0], [-10.0, 0.0]])
        split = manual_split([(0, 1), (2, 3)], [(0, 2), (1, 3)])
        report = link_accuracy({0: table}, split)
        assert (report.positive_accuracy, report.negative_accuracy, report.total_accuracy) == (100.0, 100.0, 100.0)

    def test_zero_embeddings_tie_counts_as_edge(self):
        """Test sigma(0) = 0.5 meets the 0.5 threshold, so every pair is predicted an edge."""
        table = EmbeddingTable(np.zeros((4, 3)))
        split = manual_split([(0, 1), (2, 3)], [(0, 2), (1, 3)])
        report = link_accuracy({0: table}, split)
        assert (report.positive_accuracy, report.negative_accuracy, report.total_accuracy) == (100.0, 0.0, 50.0)

    def test_manual_counts(self):
        """Test 7 of 10 positives and 4 of 10 negatives right give 70 / 40 / 55."""
        table = np.ones((40, 1))
        for i in range(7, 10):
            table[2 * i + 1] = -1.0
        for j in range(4):
            table[21 + 2 * j] = -1.0
        split = manual_split([(2 * i, 2 * i + 1) for i in range(10)],
                             [(20 + 2 * j, 21 + 2 * j) for j in range(10)])
        report = link_accuracy({0: table}, split, step=12)
        assert report.positive_accuracy == pytest.approx(70.0)
        assert report.negative_accuracy == pytest.approx(40.0)
        assert report.total_accuracy == pytest.approx(55.0)
        assert report.step == 12

    def test_total_is_mean(self):
        """Test total accuracy is the mean of the two class accuracies on random cases."""
        rng = np.random.default_rng(0)
        for _ in range(100):
            table = rng.normal(size=(30, 4))
            pos = [tuple(rng.choice(30, 2, replace=False)) for _ in range(int(rng.integers(1, 8)))]
            neg = [tuple(rng.choice(30, 2, replace=False)) for _ in range(int(rng.integers(1, 8)))]
            report = link_accuracy({0: table}, manual_split(pos, neg), Metric.COSINE)
            assert report.total_accuracy == pytest.approx((report.positive_accuracy + report.negative_accuracy) / 2)

    def test_threshold(self):
        """Test raising the threshold turns weak edges into non-edges."""
        table = np.full((2, 1), 0.5)
        pairs = untyped_pairs([(0, 1)])
        assert predict_edges({0: table}, pairs, threshold=0.5).tolist() == [True]
        assert predict_edges({0: table}, pairs, threshold=0.6).tolist() == [False]

    def test_missing_embedding(self):
        """Test pairs outside the table or of an unknown type raise MissingEmbeddingError."""
        split = manual_split([(0, 5)], [(0, 1)])
        with pytest.raises(MissingEmbeddingError):
            link_accuracy({0: np.zeros((3, 2))}, split)
        with pytest.raises(MissingEmbeddingError):
            link_accuracy({1: np.zeros((9, 2))}, split)

    def test_empty_split(self):
        """Test a split without positives or negatives cannot be scored."""
        with pytest.raises(InvalidParametersError):
            link_accuracy({0: np.zeros((3, 2))}, manual_split([], [(0, 1)]))

    def test_tables_by_type(self):
        """Test label-keyed tables are re-keyed by the split's type order."""
        split = EvalSplit(untyped_pairs([]), untyped_pairs([]), ["A", "B"])
        a, b = EmbeddingTable(np.zeros((1, 2)), "A"), EmbeddingTable(np.ones((1, 2)), "B")
        assert tables_by_type(split, {"B": b, "A": a}) == {0: a, 1: b}
        assert tables_by_type(split, {"B": b}) == {1: b}


class TestConvergence:
    """Test accuracy-versus-step tracking."""

    def test_cadence_beyond_run(self):
        """Test a cadence larger than the run leaves a single final row."""
        log = asyncio.run(convergence_log(steps_of(range(1, 6)), fixed_evaluator(), cadence=100))
        assert [r.step for r in log.rows] == [5]

    def test_regular_cadence(self):
        """Test rows land on every cadence boundary."""
        log = asyncio.run(convergence_log(steps_of(range(1, 21)), fixed_evaluator(), cadence=5))
        assert [r.step for r in log.rows] == [5, 10, 15, 20]

    def test_jumping_steps(self):
        """Test steps that jump past boundaries evaluate once each, plus a final row."""
        log = asyncio.run(convergence_log(steps_of([3, 7, 12, 13]), fixed_evaluator(), cadence=5))
        assert [r.step for r in log.rows] == [7, 12, 13]
        steps = [r.step for r in log.rows]
        assert steps == sorted(set(steps))

    def test_failed_evaluation_leaves_gap(self):
        """Test a failed evaluation records a gap row and tracking continues."""
        log = asyncio.run(convergence_log(steps_of(range(1, 16)), fixed_evaluator(fail_at={10}), cadence=5))
        assert [r.step for r in log.rows] == [5, 10, 15]
        assert log.rows[1].gap
        assert math.isnan(log.rows[1].total_accuracy)
        assert not log.rows[2].gap

    def test_record_ignores_old_steps(self):
        """Test a step at or below the last row is not recorded again."""
        log = ConvergenceLog(fixed_evaluator(), cadence=1)
        asyncio.run(log.record(4))
        assert asyncio.run(log.record(4)) is None
        assert len(log.rows) == 1

    def test_finish_uses_final_report(self):
        """Test a precomputed final report closes the series without a new evaluation."""
        log = ConvergenceLog(fixed_evaluator(fail_at={9}), cadence=100)
        asyncio.run(log.finish(9, AccuracyReport.from_accuracies(80.0, 60.0, 0.5, 9)))
        assert log.rows[-1].step == 9
        assert log.rows[-1].total_accuracy == 70.0

    def test_steps_to_threshold(self):
        """Test the first step reaching the target is reported, skipping gaps."""
        totals = {5: 40, 10: 95, 15: 80, 20: 75}
        log = asyncio.run(convergence_log(steps_of(range(1, 21)), fixed_evaluator(totals, fail_at={10}), cadence=5))
        assert log.steps_to_threshold(70.0) == 15
        assert log.steps_to_threshold(90.0) is None

    def test_bad_cadence(self):
        """Test the cadence must be positive."""
        with pytest.raises(InvalidParametersError):
            ConvergenceLog(fixed_evaluator(), cadence=0)

    def test_csv_round_trip(self, tmp_path):
        """Test the CSV keeps the config echo, the rows and gap rows."""
        log = asyncio.run(convergence_log(steps_of(range(1, 16)), fixed_evaluator(fail_at={10}), cadence=5))
        path = tmp_path / "convergence.csv"
        log.write_csv(path, {"dim": 16, "workers": 2})
        lines = path.read_text().splitlines()
        assert lines[0] == "# config: dim=16 workers=2"
        assert lines[1] == "step,pos_acc,neg_acc,total_acc,wall_ms"
        rows = read_convergence_csv(path)
        assert [r.step for r in rows] == [5, 10, 15]
        assert rows[0].total_accuracy == pytest.approx(5.0)
        assert rows[1].gap


class TestSplitFiles:
    """Test the split's text form."""

    def test_untyped_round_trip(self, tmp_path, path_split):
        """Test an untyped split reads back with the same pairs."""
        write_split(path_split, tmp_path / "split.txt")
        back = read_split(tmp_path / "split.txt")
        np.testing.assert_array_equal(back.positives.src_id, path_split.positives.src_id)
        np.testing.assert_array_equal(back.negatives.dst_id, path_split.negatives.dst_id)
        assert back.ratio == 0.9

    def test_typed_round_trip(self, tmp_path):
        """Test typed tokens keep their vertex types."""
        split = split_edges(bipartite_graph(10, 12, 0.3, seed=2), ratio=0.8, seed=3)
        write_split(split, tmp_path / "split.txt")
        back = read_split(tmp_path / "split.txt")
        assert back.type_labels == ["A", "B"]
        np.testing.assert_array_equal(back.positives.dst_type, split.positives.dst_type)
        np.testing.assert_array_equal(back.negatives.src_id, split.negatives.src_id)

    def test_bad_lines(self, tmp_path):
        """Test malformed lines and unknown labels raise CheckpointError."""
        path = tmp_path / "split.txt"
        path.write_text("0 1 MAYBE\n")
        with pytest.raises(CheckpointError):
            read_split(path)
        path.write_text("# split seed=0 ratio=0.9 types=A,B\nA:0 C:1 POS\n")
        with pytest.raises(CheckpointError):
            read_split(path)
