"""Exhaustive mixed-precision baseline.

Enumerates every discrete bitwidth assignment on a small network,
fine-tunes each under an identical budget and seed, and reports the
smallest assignment whose validation loss stays within tolerance. This
is the ground truth the differentiable search is judged against.
"""

from __future__ import annotations

import copy
import csv
import itertools
from dataclasses import dataclass

from .data import Dataset
from .models import Network
from .quantizers import QuantCandidate
from .search import Assignment, discretize_network, evaluate, fine_tune

DEFAULT_CAP = 256


class OracleConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class OracleRow:
    assignment: Assignment
    valid_loss: float
    accuracy: float
    feasible: bool


@dataclass
class OracleResult:
    rows: list
    optimal: Assignment | None
    theta: float
    candidates: tuple
    layer_params: tuple
    fine_tune_epochs: int
    seed: int

    def row_for(self, assignment: Assignment) -> OracleRow:
        for row in self.rows:
            if row.assignment.indices == assignment.indices:
                return row
        raise KeyError(f"assignment {assignment.indices} not in the table")


def _assignment_rank(row: OracleRow):
    a = row.assignment
    return (a.payload_bits, sum(a.bits_per_layer), a.indices)


def exhaustive_search(
    model: Network,
    candidates: list[QuantCandidate],
    theta: float,
    train_set: Dataset,
    valid_set: Dataset,
    fine_tune_epochs: int = 2,
    lr: float = 0.01,
    momentum: float = 0.9,
    batch_size: int = 64,
    seed: int = 0,
    cap: int = DEFAULT_CAP,
) -> OracleResult:
    """Evaluate all |candidates|^k assignments with one shared protocol.

    Every assignment starts from the same pretrained weights and
    fine-tunes with the same seed, so rows are comparable and reruns
    reproduce the table exactly.
    """
    specs = model.layer_specs()
    n_assignments = len(candidates) ** len(specs)
    if n_assignments > cap:
        raise ValueError(
            f"{n_assignments} assignments exceed the cap of {cap}; "
            f"use a smaller network or fewer candidates"
        )

    rows = []
    for indices in itertools.product(range(len(candidates)), repeat=len(specs)):
        assignment = Assignment.build(indices, candidates, specs)
        trial = discretize_network(copy.deepcopy(model), assignment)
        fine_tune(trial, train_set, epochs=fine_tune_epochs, lr=lr,
                  momentum=momentum, batch_size=batch_size, seed=seed)
        loss, acc = evaluate(trial, valid_set)
        rows.append(OracleRow(assignment, loss, acc, loss <= theta))

    feasible = [r for r in rows if r.feasible]
    optimal = min(feasible, key=_assignment_rank).assignment if feasible else None
    return OracleResult(
        rows=rows,
        optimal=optimal,
        theta=theta,
        candidates=tuple(candidates),
        layer_params=tuple(s.params for s in specs),
        fine_tune_epochs=fine_tune_epochs,
        seed=seed,
    )


@dataclass(frozen=True)
class CompareReport:
    found_feasible: bool
    found_payload_bits: int
    optimal_payload_bits: int | None
    size_ratio: float | None  # found / optimal, None if nothing feasible

    @property
    def within(self) -> bool:
        return self.found_feasible and self.size_ratio is not None


def compare(oracle: OracleResult, found: Assignment) -> CompareReport:
    """Judge a searched assignment against the exhaustive table."""
    if found.candidates != oracle.candidates:
        raise OracleConfigMismatch(
            f"candidate sets differ: {found.candidates} vs {oracle.candidates}"
        )
    if found.layer_params != oracle.layer_params:
        raise OracleConfigMismatch(
            f"layer sizes differ: {found.layer_params} vs {oracle.layer_params}"
        )
    row = oracle.row_for(found)
    if oracle.optimal is None:
        return CompareReport(row.feasible, found.payload_bits, None, None)
    return CompareReport(
        found_feasible=row.feasible,
        found_payload_bits=found.payload_bits,
        optimal_payload_bits=oracle.optimal.payload_bits,
        size_ratio=found.payload_bits / oracle.optimal.payload_bits,
    )


def write_table(result: OracleResult, path) -> None:
    """Emit the full enumeration as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["assignment", "payload_bits", "compression", "valid_loss",
             "accuracy", "feasible"]
        )
        for row in result.rows:
            writer.writerow([
                "|".join(row.assignment.labels()),
                row.assignment.payload_bits,
                f"{row.assignment.compression_rate:.6f}",
                f"{row.valid_loss:.6f}",
                f"{row.accuracy:.6f}",
                int(row.feasible),
            ])
