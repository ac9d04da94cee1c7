"""Tool-call accuracy and continual-learning metrics (average accuracy / forgetting)."""
from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

NAME_ONLY, STRICT = "name_only", "strict"


class IncompleteMatrixError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


class MetricDomainError(ValueError):
    pass


def _call_key(call, strict: bool):
    if strict:
        return (call.api_name, tuple(sorted(call.api_params.items())))
    return call.api_name


def call_correct(predicted, reference, mode: str = NAME_ONLY) -> int:
    """1 iff the predicted calls equal the reference as a multiset (order-insensitive)."""
    if mode not in (NAME_ONLY, STRICT):
        raise ValueError(f"unknown scoring mode {mode!r}")
    strict = mode == STRICT
    return int(Counter(_call_key(c, strict) for c in predicted) == Counter(_call_key(c, strict) for c in reference))


def tool_call_accuracy(predictions, references, mode: str = NAME_ONLY) -> float:
    """Mean per-instance correctness over a split. ``predictions[i]`` is a list of ToolCall."""
    if len(predictions) != len(references):
        raise ValueError("prediction/reference count mismatch")
    if not references:
        return float("nan")
    return sum(call_correct(p, r, mode) for p, r in zip(predictions, references)) / len(references)


def partial_credit(predictions, references) -> float:
    """Auxiliary: fraction of reference api names recovered, averaged per instance."""
    scores = []
    for p, r in zip(predictions, references):
        if not r:
            scores.append(float(not p))
            continue
        hit = Counter(c.api_name for c in p) & Counter(c.api_name for c in r)
        scores.append(sum(hit.values()) / len(r))
    return float(np.mean(scores)) if scores else float("nan")


class AccuracyMatrix:
    """Lower-triangular a(k, j), 1-based, j <= k <= T."""

    def __init__(self, T: int):
        if T < 1:
            raise ValueError("need at least one step")
        self.T = T
        self._a = np.full((T, T), np.nan)

    def __setitem__(self, kj, value):
        k, j = kj
        self._check(k, j)
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self._a[k - 1, j - 1] = value

    def __getitem__(self, kj) -> float:
        k, j = kj
        self._check(k, j)
        v = self._a[k - 1, j - 1]
        if math.isnan(v):
            raise IncompleteMatrixError(f"a({k},{j}) not set")
        return float(v)

    def _check(self, k, j):
        if not (1 <= j <= k <= self.T):
            raise IndexError(f"(k={k}, j={j}) outside lower triangle of size {self.T}")

    def has(self, k, j) -> bool:
        return 1 <= j <= k <= self.T and not math.isnan(self._a[k - 1, j - 1])

    def row_complete(self, k) -> bool:
        return all(self.has(k, j) for j in range(1, k + 1))

    def complete(self) -> bool:
        return all(self.row_complete(k) for k in range(1, self.T + 1))

    def __eq__(self, other):
        return isinstance(other, AccuracyMatrix) and self.T == other.T and np.array_equal(self._a, other._a, equal_nan=True)

    def to_array(self) -> np.ndarray:
        return self._a.copy()

    @classmethod
    def from_rows(cls, rows) -> "AccuracyMatrix":
        A = cls(len(rows))
        for k, row in enumerate(rows, 1):
            for j, v in enumerate(row[:k], 1):
                A[k, j] = v
        return A

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "j", "accuracy"])
        for k in range(1, self.T + 1):
            for j in range(1, k + 1):
                if self.has(k, j):
                    w.writerow([k, j, repr(self[k, j])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        rows = list(csv.DictReader(io.StringIO(text)))
        entries = [(int(r["k"]), int(r["j"]), float(r["accuracy"])) for r in rows if r.get("k", "").strip().isdigit()]
        if not entries:
            raise IncompleteMatrixError("no matrix entries in CSV")
        A = cls(max(k for k, _, _ in entries))
        for k, j, v in entries:
            A[k, j] = v
        return A


def average_accuracy(A: AccuracyMatrix, k: int) -> float:
    if not A.row_complete(k):
        raise IncompleteMatrixError(f"row {k} is incomplete")
    return float(np.mean(A._a[k - 1, :k]))


def forgetting(A: AccuracyMatrix, k: int, j: int) -> float:
    # the max runs over steps where tool j exists, i.e. l in [j, k-1]
    if j >= k:
        raise MetricDomainError(f"forgetting needs j < k (got j={j}, k={k})")
    col = A._a[j - 1 : k - 1, j - 1]
    if np.isnan(col).any() or not A.has(k, j):
        raise IncompleteMatrixError(f"column {j} incomplete through step {k}")
    return float(col.max() - A._a[k - 1, j - 1])


def average_forgetting(A: AccuracyMatrix, k: int) -> float:
    if k < 2:
        raise UndefinedMetricError("average forgetting is undefined before the second step")
    return float(np.mean([forgetting(A, k, j) for j in range(1, k)]))


@dataclass
class MetricsReport:
    T: int
    aa: list[float]
    af: list[float | None]
    curves: dict[int, list[float]]
    matrix: AccuracyMatrix

    @property
    def aa_final(self) -> float:
        return self.aa[-1]

    @property
    def af_final(self) -> float | None:
        return self.af[-1]

    def to_csv(self) -> str:
        af = "undefined" if self.af_final is None else repr(self.af_final)
        return self.matrix.to_csv() + "\nAA_final,AF_final\n" + f"{self.aa_final!r},{af}\n"

    def to_table(self) -> str:
        lines = ["step  " + "  ".join(f"tool{j:<2d}" for j in range(1, self.T + 1)) + "     AA      AF"]
        for k in range(1, self.T + 1):
            cells = [f"{self.matrix[k, j]:6.3f}" for j in range(1, k + 1)] + ["     -"] * (self.T - k)
            af = "     -" if self.af[k - 1] is None else f"{self.af[k - 1]:6.3f}"
            lines.append(f"{k:4d}  " + "  ".join(cells) + f"  {self.aa[k - 1]:6.3f}  {af}")
        return "\n".join(lines)


def metrics_report(A: AccuracyMatrix) -> MetricsReport:
    if not A.complete():
        raise IncompleteMatrixError("accuracy matrix is incomplete")
    aa = [average_accuracy(A, k) for k in range(1, A.T + 1)]
    af = [None] + [average_forgetting(A, k) for k in range(2, A.T + 1)]
    curves = {j: [A[k, j] for k in range(j, A.T + 1)] for j in range(1, A.T + 1)}
    return MetricsReport(A.T, aa, af, curves, A)


def parse_report_csv(text: str) -> tuple[AccuracyMatrix, float, float | None]:
    matrix_part, _, summary = text.partition("\nAA_final,AF_final\n")
    A = AccuracyMatrix.from_csv(matrix_part)
    if not summary.strip():
        return A, average_accuracy(A, A.T), None
    aa, af = summary.strip().split(",")
    return A, float(aa), None if af == "undefined" else float(af)
