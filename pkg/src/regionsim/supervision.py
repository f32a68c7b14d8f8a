"""Soft-label construction and the hard/soft/total training losses.

A frozen previous-generation model scores each query against its difficult
positives (optionally decomposed into regions); a sharp softmax over those
scores becomes the immutable training target for the next generation. The
student is always scored at temperature 1. The hard loss is the pairwise
softmax ranking loss in its numerically stable softplus form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .errors import IntegrityError, ParameterError, ShapeError
from .regions import ALL_REGION_IDS, region_view
from .vlad import VladParams, aggregate_array

DEFAULT_LAMBDA = 0.5
DEFAULT_TAUS = (0.07, 0.06, 0.05)
HALVES_ONLY_IDS = (0, 1, 2, 3, 4)
WEIGHT_SUM_TOL = 1e-6


def validate_schedule(taus: Sequence[float], strict: bool = True) -> tuple[float, ...]:
    """Check a temperature schedule: positive, decreasing (strictly unless
    ``strict=False``, which admits the constant-temperature ablation)."""
    taus = tuple(float(t) for t in taus)
    if not taus:
        raise ParameterError("temperature schedule is empty")
    if any(t <= 0 for t in taus):
        raise ParameterError(f"temperatures must be positive: {taus}")
    pairs = list(zip(taus, taus[1:]))
    if strict and any(b >= a for a, b in pairs):
        raise ParameterError(f"temperatures must strictly decrease: {taus}")
    if not strict and any(b > a for a, b in pairs):
        raise ParameterError(f"temperatures must not increase: {taus}")
    return taus


@dataclass(frozen=True)
class SoftLabelRecord:
    """Immutable soft supervision for one query, produced by generation
    ``generation`` at temperature ``tau``."""

    query_id: int
    generation: int
    tau: float
    entries: tuple[tuple[int, int], ...]  # (gallery id, region id) in order
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.entries) != len(self.weights):
            raise IntegrityError("entry/weight lengths differ")
        if abs(sum(self.weights) - 1.0) > WEIGHT_SUM_TOL:
            raise IntegrityError(f"weights sum to {sum(self.weights)!r}, not 1")


def expected_entries(
    positive_ids: Sequence[int], region_ids: Sequence[int]
) -> tuple[tuple[int, int], ...]:
    """Normative entry order: each positive in rank order, full image first,
    then its sub-regions."""
    return tuple((int(p), int(r)) for p in positive_ids for r in region_ids)


def image_soft_labels(
    query_desc: np.ndarray,
    positive_ids: Sequence[int],
    positive_descs: np.ndarray,
    tau: float,
    generation: int,
    query_id: int = -1,
) -> SoftLabelRecord:
    """Image-level targets: a temperature softmax over the k positive sims."""
    if len(positive_ids) == 0:
        raise ParameterError("need at least one positive")
    sims = np.asarray(positive_descs) @ np.asarray(query_desc)
    weights = ag.softmax_temp(sims, tau).data
    return SoftLabelRecord(
        query_id=query_id,
        generation=generation,
        tau=tau,
        entries=expected_entries(positive_ids, (0,)),
        weights=tuple(float(w) for w in weights),
    )


def region_soft_labels(
    query_desc: np.ndarray,
    positive_ids: Sequence[int],
    positive_fms: Sequence[np.ndarray],
    params: VladParams,
    tau: float,
    generation: int,
    query_id: int = -1,
    region_ids: Sequence[int] = ALL_REGION_IDS,
) -> SoftLabelRecord:
    """Region-level targets: one softmax over every (positive, region) sim.

    The query is never decomposed; it enters only as a descriptor.
    """
    if len(positive_ids) == 0:
        raise ParameterError("need at least one positive")
    if len(positive_ids) != len(positive_fms):
        raise ShapeError("one feature map per positive id is required")
    sims = []
    for fm in positive_fms:
        for rid in region_ids:
            desc = aggregate_array(params, region_view(fm, rid))
            sims.append(float(desc @ query_desc))
    weights = ag.softmax_temp(np.array(sims), tau).data
    return SoftLabelRecord(
        query_id=query_id,
        generation=generation,
        tau=tau,
        entries=expected_entries(positive_ids, region_ids),
        weights=tuple(float(w) for w in weights),
    )


def validate_record(record: SoftLabelRecord, region_ids: Sequence[int]):
    """Entry order must match the normative per-positive layout exactly."""
    pids = []
    for gid, _ in record.entries:
        if gid not in pids:
            pids.append(gid)
    if record.entries != expected_entries(pids, region_ids):
        raise IntegrityError(f"label entries for query {record.query_id} are out of order")


def hard_loss(
    query_desc: ag.Tensor,
    positive_desc: ag.Tensor,
    negative_descs: Sequence[ag.Tensor],
) -> ag.Tensor:
    """Sum over negatives of softplus(<q,n> - <q,p*>).

    Algebraically equal to the pairwise softmax form
    -log[exp<q,p*> / (exp<q,p*> + exp<q,n>)] summed over negatives, but never
    overflows for large scores.
    """
    if len(negative_descs) == 0:
        raise ParameterError("hard loss needs at least one negative")
    qp = ag.dot(query_desc, positive_desc)
    total = None
    for neg in negative_descs:
        term = ag.softplus(ag.sub(ag.dot(query_desc, neg), qp))
        total = term if total is None else ag.add(total, term)
    return total


def soft_loss(student_sims: ag.Tensor, record: SoftLabelRecord) -> ag.Tensor:
    """Cross-entropy between the student's temperature-1 distribution over
    the record's entries and the stored target weights."""
    if student_sims.ndim != 1 or student_sims.shape[0] != len(record.weights):
        raise IntegrityError(
            f"student produced {student_sims.shape} sims for "
            f"{len(record.weights)} stored weights"
        )
    student = ag.softmax_temp(student_sims, 1.0)
    return ag.soft_cross_entropy(student, np.array(record.weights))


def total_loss(hard: ag.Tensor, soft: ag.Tensor, lam: float = DEFAULT_LAMBDA) -> ag.Tensor:
    """Combined objective: hard + lam * soft."""
    if lam < 0:
        raise ParameterError(f"loss weight must be non-negative, got {lam}")
    return ag.add(hard, ag.scale(soft, lam))


# Serialization: one record per line, weights at 9 significant digits.

def format_record(record: SoftLabelRecord) -> str:
    parts = [str(record.query_id), str(record.generation), f"{record.tau:.9g}"]
    for (gid, rid), w in zip(record.entries, record.weights):
        parts.extend([str(gid), str(rid), f"{w:.9g}"])
    return " ".join(parts)


def parse_record(line: str) -> SoftLabelRecord:
    tok = line.split()
    if len(tok) < 6 or (len(tok) - 3) % 3 != 0:
        raise IntegrityError(f"malformed label line: {line[:60]!r}")
    try:
        query_id, generation = int(tok[0]), int(tok[1])
        tau = float(tok[2])
        entries, weights = [], []
        for i in range(3, len(tok), 3):
            entries.append((int(tok[i]), int(tok[i + 1])))
            weights.append(float(tok[i + 2]))
    except ValueError as exc:
        raise IntegrityError(f"malformed label line: {line[:60]!r}") from exc
    return SoftLabelRecord(
        query_id=query_id,
        generation=generation,
        tau=tau,
        entries=tuple(entries),
        weights=tuple(weights),
    )


def write_label_file(path, records: Sequence[SoftLabelRecord]):
    with open(path, "w", encoding="ascii") as fh:
        for rec in records:
            fh.write(format_record(rec) + "\n")


def read_label_file(path) -> list[SoftLabelRecord]:
    with open(path, "r", encoding="ascii") as fh:
        return [parse_record(line) for line in fh if line.strip()]


def student_region_sims(
    query_desc: ag.Tensor,
    record: SoftLabelRecord,
    descriptor_fn: Callable[[int, int], ag.Tensor],
) -> ag.Tensor:
    """Stack the student's similarity for every record entry, in order.

    ``descriptor_fn(gallery_id, region_id)`` returns the student-side
    descriptor tensor; gradients flow through both it and the query.
    """
    sims = [ag.dot(query_desc, descriptor_fn(gid, rid)) for gid, rid in record.entries]
    stacked = ag.stack_rows([ag.reshape(s, (1,)) for s in sims])
    return ag.reshape(stacked, (len(sims),))
