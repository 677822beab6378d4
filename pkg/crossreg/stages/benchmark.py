"""
Benchmark Harness

Runs the pipeline over a set of scene pairs, optionally sweeping several
estimators on the same correspondences, and aggregates the per-pair
records into registration recall, mean errors and inlier ratio.

Averaging population: mean RRE and RTE are taken over successfully
registered pairs only; RR counts errored pairs as failures; mean IR is
taken over pairs whose matching completed, and is shared by every
estimator because correspondences do not depend on the estimator.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from errors import CrossRegError, EmptyInputError
from models import (
    BenchmarkRow,
    EstimatorConfig,
    MaskSource,
    PairRecord,
    PipelineConfig,
    RegistrationResult,
    ScenePair,
    estimator_label,
)
from stages import core
from stages.pipeline import RegistrationPipeline, ablation_label, apply_ablation

logger = logging.getLogger(__name__)

TABLE_NOTE = (
    "mean RRE/RTE over successfully registered pairs; "
    "RR counts errored pairs as failures; IR is estimator-independent"
)


class BenchmarkReport(BaseModel):
    """
    Outcome of a benchmark run.

    Attributes:
        label: Configuration label (ablation row name)
        records: One record per (pair, estimator), pair-major order
        results: Full results aligned with `records` (None where it errored)
        rows: One aggregate row per estimator
    """
    label: str
    records: List[PairRecord]
    results: List[Optional[RegistrationResult]]
    rows: List[BenchmarkRow]


class RecallPoint(BaseModel):
    """Registration recall of one estimator at one threshold pair."""
    estimator: str
    rre_threshold: float
    rte_threshold: float
    recall: float


def _record(pair: ScenePair, label: str, result: RegistrationResult) -> PairRecord:
    metrics = result.metrics
    return PairRecord(
        pair=pair.name,
        estimator=label,
        rre=metrics.rre if metrics else None,
        rte=metrics.rte if metrics else None,
        success=metrics.success if metrics else False,
        ir=metrics.ir if metrics else None,
        superpoint_correspondences=result.superpoint_correspondences,
        dense_correspondences=result.dense_correspondences,
        mask_source_fraction=result.masks.source_fraction,
        mask_target_fraction=result.masks.target_fraction,
        fallback=",".join(result.flags),
    )


def process_pair(
    pipeline: RegistrationPipeline,
    pair: ScenePair,
    estimator_configs: Sequence[EstimatorConfig],
) -> List[Tuple[PairRecord, Optional[RegistrationResult]]]:
    """
    Match one pair once, then run every estimator on the shared correspondences.

    Errors are recorded on the affected records instead of being raised.
    """
    labels = [estimator_label(est) for est in estimator_configs]
    try:
        outcome = pipeline.match_pair(pair.source, pair.target, pair.image, pair.gt)
    except CrossRegError as e:
        logger.error(f"Pair {pair.name}: {e}")
        return [(PairRecord(pair=pair.name, estimator=label, error=str(e)), None) for label in labels]

    ir = core.inlier_ratio(outcome.c_dense, outcome.source_dense, outcome.target_dense, pair.gt,
                           pipeline.cfg.ir_threshold).value
    entries = []
    for est, label in zip(estimator_configs, labels):
        try:
            pose, elapsed = pipeline.estimate_pose(outcome, est)
            result = pipeline.result(outcome, pose, elapsed, pair.gt)
            entries.append((_record(pair, label, result), result))
        except CrossRegError as e:
            logger.error(f"Pair {pair.name} ({label}): {e}")
            entries.append((PairRecord(
                pair=pair.name,
                estimator=label,
                ir=ir,
                superpoint_correspondences=len(outcome.c_super),
                dense_correspondences=len(outcome.c_dense),
                mask_source_fraction=outcome.masks.source_fraction,
                mask_target_fraction=outcome.masks.target_fraction,
                fallback=",".join(outcome.flags),
                error=str(e),
            ), None))
    return entries


def is_success(record: PairRecord, rre_thresh: float, rte_thresh: float) -> bool:
    """Strict thresholds; errored or unevaluated records never succeed."""
    if record.error or record.rre is None or record.rte is None:
        return False
    return record.rre < rre_thresh and record.rte < rte_thresh


def aggregate_records(
    records: Sequence[PairRecord],
    label: str = "",
    rre_thresh: float = core.DEFAULT_RRE_THRESHOLD,
    rte_thresh: float = core.DEFAULT_RTE_THRESHOLD,
) -> List[BenchmarkRow]:
    """
    One BenchmarkRow per estimator, in order of first appearance.

    Raises:
        EmptyInputError: If there are no records
    """
    if not records:
        raise EmptyInputError("no results")
    by_estimator: Dict[str, List[PairRecord]] = {}
    for record in records:
        by_estimator.setdefault(record.estimator, []).append(record)

    rows = []
    for estimator, group in by_estimator.items():
        successes = [r for r in group if is_success(r, rre_thresh, rte_thresh)]
        irs = [r.ir for r in group if r.ir is not None]
        rows.append(BenchmarkRow(
            label=label,
            estimator=estimator,
            pairs=len(group),
            successes=len(successes),
            mean_rre=float(np.mean([r.rre for r in successes])) if successes else None,
            mean_rte=float(np.mean([r.rte for r in successes])) if successes else None,
            recall=len(successes) / len(group),
            mean_ir=float(np.mean(irs)) if irs else 0.0,
            errors=sum(1 for r in group if r.error),
        ))
    return rows


def run_benchmark(
    pairs: Sequence[ScenePair],
    cfg: Optional[PipelineConfig] = None,
    estimator_configs: Optional[Sequence[EstimatorConfig]] = None,
    workers: Optional[int] = None,
    label: Optional[str] = None,
) -> BenchmarkReport:
    """
    Register every pair and aggregate the results.

    Args:
        pairs: Scene pairs with ground truth
        cfg: Pipeline configuration (thresholds included)
        estimator_configs: Estimators to sweep; defaults to `cfg.estimator`
        workers: Concurrent pairs; defaults to `cfg.workers`
        label: Row label; defaults to the ablation label of `cfg`

    Returns:
        BenchmarkReport: Records in input order plus one row per estimator

    Raises:
        EmptyInputError: If `pairs` is empty
    """
    if not pairs:
        raise EmptyInputError("no pairs to register")
    cfg = cfg or PipelineConfig()
    estimator_configs = list(estimator_configs or [cfg.estimator])
    workers = workers or cfg.workers
    label = label or ablation_label(cfg)
    pipeline = RegistrationPipeline(cfg)

    logger.info(f"Benchmark '{label}': {len(pairs)} pairs, {len(estimator_configs)} estimators, {workers} workers")
    with ThreadPoolExecutor(max_workers=workers) as executor:
        per_pair = list(executor.map(lambda pair: process_pair(pipeline, pair, estimator_configs), pairs))

    entries = [entry for pair_entries in per_pair for entry in pair_entries]
    records = [record for record, _ in entries]
    rows = aggregate_records(records, label, cfg.rre_threshold, cfg.rte_threshold)
    for row in rows:
        logger.info(f"{row.estimator}: RR {row.recall:.3f}, mean IR {row.mean_ir:.3f}, {row.errors} errors")
    return BenchmarkReport(label=label, records=records, results=[result for _, result in entries], rows=rows)


def run_ablation(
    pairs: Sequence[ScenePair],
    cfg: Optional[PipelineConfig] = None,
    keys: Sequence[str] = ("a", "b", "c", "d"),
    workers: Optional[int] = None,
) -> List[BenchmarkReport]:
    """Benchmark each ablation row on the same pairs with `cfg.estimator`."""
    cfg = cfg or PipelineConfig()
    return [run_benchmark(pairs, apply_ablation(cfg, key), workers=workers) for key in keys]


def recall_curve(
    records: Sequence[PairRecord],
    thresholds: Sequence[Tuple[float, float]],
) -> List[RecallPoint]:
    """
    Registration recall per estimator at each (RRE, RTE) threshold pair.

    Raises:
        EmptyInputError: If there are no records
    """
    points = []
    for rre_thresh, rte_thresh in thresholds:
        for row in aggregate_records(records, rre_thresh=rre_thresh, rte_thresh=rte_thresh):
            points.append(RecallPoint(
                estimator=row.estimator, rre_threshold=rre_thresh, rte_threshold=rte_thresh, recall=row.recall,
            ))
    return points


def _cell(value: Optional[float], scale: float = 1.0, digits: int = 3) -> str:
    return "-" if value is None else f"{value * scale:.{digits}f}"


def matching_note(cfg: PipelineConfig) -> str:
    """How superpoints were selected for matching, for report headers."""
    if not cfg.use_omp:
        masks = "overlap masks off"
    elif cfg.omp.mask_source == MaskSource.GROUND_TRUTH:
        masks = f"overlap masks from ground truth (radius {cfg.omp.gt_radius:g} m)"
    else:
        masks = f"overlap masks predicted from the image (threshold {cfg.omp.threshold:g})"
    selection = "salient superpoints only" if cfg.salient_only else "all superpoints"
    return f"{masks}; {selection}"


def format_table(
    rows: Sequence[BenchmarkRow],
    rre_thresh: float = core.DEFAULT_RRE_THRESHOLD,
    rte_thresh: float = core.DEFAULT_RTE_THRESHOLD,
    notes: Sequence[str] = (),
) -> str:
    """Aligned plain-text table; the header lines document thresholds, averaging and any `notes`."""
    header = ["Method", "Estimator", "Pairs", "RRE(deg)", "RTE(m)", "RR(%)", "IR(%)", "Errors"]
    body = [
        [row.label, row.estimator, str(row.pairs), _cell(row.mean_rre), _cell(row.mean_rte),
         _cell(row.recall, 100.0, 1), _cell(row.mean_ir, 100.0, 1), str(row.errors)]
        for row in rows
    ]
    widths = [max(len(line[k]) for line in [header] + body) for k in range(len(header))]
    lines = [
        f"# success: RRE < {rre_thresh:g} deg and RTE < {rte_thresh:g} m",
        f"# {TABLE_NOTE}",
    ] + [f"# {note}" for note in notes]
    for line in [header] + body:
        lines.append("  ".join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip())
    return "\n".join(lines) + "\n"


def format_curve(points: Sequence[RecallPoint]) -> str:
    """Tab-separated recall curve, one row per (estimator, threshold pair)."""
    lines = ["estimator\trre_threshold\trte_threshold\trecall"]
    lines += [f"{p.estimator}\t{p.rre_threshold:g}\t{p.rte_threshold:g}\t{p.recall:.6f}" for p in points]
    return "\n".join(lines) + "\n"
