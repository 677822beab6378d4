"""Tests for record aggregation, recall curves and the benchmark runner."""

import numpy as np
import pytest

from conftest import plane_cloud
from errors import EmptyInputError
from models import (
    AttentionMode,
    EstimatorConfig,
    EstimatorVariant,
    MaskSource,
    OmpConfig,
    PairRecord,
    PipelineConfig,
    PointCloud,
    ScenePair,
)
from stages import benchmark, core


def record(pair, rre=None, rte=None, ir=None, estimator="LGR", error=""):
    success = rre is not None and rte is not None and rre < 2.0 and rte < 0.5
    return PairRecord(pair=pair, estimator=estimator, rre=rre, rte=rte, ir=ir, success=success, error=error)


@pytest.fixture
def four_records():
    return [
        record("p0", 1.0, 0.1, ir=0.5),
        record("p1", 3.0, 0.2, ir=0.3),
        record("p2", 0.5, 0.3, ir=0.4),
        record("p3", 1.5, 0.4, ir=0.2),
    ]


# ── Aggregation ─────────────────────────────────────────────────────────

class TestAggregation:

    def test_three_of_four(self, four_records):
        (row,) = benchmark.aggregate_records(four_records, label="demo")
        assert row.label == "demo"
        assert row.pairs == 4 and row.successes == 3
        assert row.recall == pytest.approx(0.75)
        assert row.mean_rre == pytest.approx(1.0)
        assert row.mean_rte == pytest.approx(0.8 / 3)
        assert row.mean_ir == pytest.approx(0.35)

    def test_thresholds_are_strict(self):
        (row,) = benchmark.aggregate_records([record("p0", 2.0, 0.1), record("p1", 1.0, 0.5)])
        assert row.successes == 0
        assert row.mean_rre is None

    def test_errored_record_counts_as_failure(self):
        records = [record("p0", 1.0, 0.1, ir=0.6), record("p1", error="stage 'encode' failed")]
        (row,) = benchmark.aggregate_records(records)
        assert row.recall == pytest.approx(0.5)
        assert row.errors == 1
        assert row.mean_ir == pytest.approx(0.6)

    def test_rows_per_estimator_in_first_seen_order(self):
        records = [
            record("p0", 1.0, 0.1, ir=0.5, estimator="RANSAC-50K"),
            record("p0", 1.0, 0.1, ir=0.5, estimator="LGR"),
            record("p1", 5.0, 0.1, ir=0.1, estimator="RANSAC-50K"),
            record("p1", 1.0, 0.1, ir=0.1, estimator="LGR"),
        ]
        rows = benchmark.aggregate_records(records)
        assert [row.estimator for row in rows] == ["RANSAC-50K", "LGR"]
        assert [row.recall for row in rows] == [0.5, 1.0]
        assert rows[0].mean_ir == rows[1].mean_ir

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            benchmark.aggregate_records([])

    def test_is_success(self):
        assert benchmark.is_success(record("p", 1.0, 0.1), 2.0, 0.5)
        assert not benchmark.is_success(record("p"), 2.0, 0.5)
        assert not benchmark.is_success(record("p", 1.0, 0.1, error="boom"), 2.0, 0.5)


# ── Curves and tables ───────────────────────────────────────────────────

class TestReporting:

    def test_recall_curve(self, four_records):
        points = benchmark.recall_curve(four_records, [(0.75, 0.5), (2.0, 0.5), (5.0, 1.0)])
        assert [p.recall for p in points] == [0.25, 0.75, 1.0]
        text = benchmark.format_curve(points)
        assert text.splitlines()[0] == "estimator\trre_threshold\trte_threshold\trecall"
        assert text.splitlines()[2] == "LGR\t2\t0.5\t0.750000"

    def test_table_header_and_cells(self, four_records):
        rows = benchmark.aggregate_records(four_records, label="(d) OMP w/ VGAM(full)")
        lines = benchmark.format_table(rows).splitlines()
        assert lines[0] == "# success: RRE < 2 deg and RTE < 0.5 m"
        assert lines[2].split()[:2] == ["Method", "Estimator"]
        assert "75.0" in lines[3]
        assert "35.0" in lines[3]

    def test_notes_follow_the_fixed_header(self, four_records):
        rows = benchmark.aggregate_records(four_records)
        lines = benchmark.format_table(rows, notes=["overlap masks off; all superpoints"]).splitlines()
        assert lines[2] == "# overlap masks off; all superpoints"
        assert lines[3].split()[:2] == ["Method", "Estimator"]

    @pytest.mark.parametrize("cfg, expected", [
        (PipelineConfig(use_omp=False), "overlap masks off; salient superpoints only"),
        (PipelineConfig(omp=OmpConfig(mask_source=MaskSource.GROUND_TRUTH, gt_radius=1.5)),
         "overlap masks from ground truth (radius 1.5 m); salient superpoints only"),
        (PipelineConfig(salient_only=False),
         "overlap masks predicted from the image (threshold 0.5); all superpoints"),
    ])
    def test_matching_note(self, cfg, expected):
        assert benchmark.matching_note(cfg) == expected

    def test_missing_means_render_as_dash(self):
        rows = benchmark.aggregate_records([record("p0", 9.0, 9.0)])
        assert " - " in benchmark.format_table(rows).splitlines()[3]


# ── Runner ──────────────────────────────────────────────────────────────

def identity_pair(rng, name: str) -> ScenePair:
    cloud = plane_cloud(rng, n=3000)
    return ScenePair(source=cloud, target=cloud, gt=core.identity(), overlap=1.0, name=name)


class TestRunner:

    def test_no_pairs(self):
        with pytest.raises(EmptyInputError):
            benchmark.run_benchmark([])

    def test_failed_pair_is_recorded(self):
        tiny = PointCloud(points=np.zeros((5, 3)))
        pair = ScenePair(source=tiny, target=tiny, gt=core.identity(), overlap=1.0, name="tiny")
        report = benchmark.run_benchmark([pair], PipelineConfig(use_omp=False))
        (only,) = report.records
        assert only.pair == "tiny"
        assert "encode" in only.error
        assert report.results == [None]
        assert report.rows[0].errors == 1 and report.rows[0].recall == 0.0

    @pytest.mark.slow
    def test_estimator_sweep_shares_correspondences(self, rng):
        pairs = [identity_pair(rng, "p0"), identity_pair(rng, "p1")]
        cfg = PipelineConfig(use_omp=False, attention_mode=AttentionMode.GEO_SELF)
        sweep = [
            EstimatorConfig(variant=EstimatorVariant.WEIGHTED_SVD),
            EstimatorConfig(variant=EstimatorVariant.LGR),
        ]
        report = benchmark.run_benchmark(pairs, cfg, sweep, workers=2)
        assert [r.pair for r in report.records] == ["p0", "p0", "p1", "p1"]
        assert [r.estimator for r in report.records] == ["Weighted SVD", "LGR", "Weighted SVD", "LGR"]
        assert report.records[0].dense_correspondences == report.records[1].dense_correspondences
        assert report.records[0].ir == report.records[1].ir
        assert report.rows[1].recall == 1.0
        assert report.label == "(a) Geo self-attention w/o OMP"
