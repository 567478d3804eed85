"""ROC-AUC, Hanley-McNeil intervals, significance verdicts and cross-dataset matrices."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from .errors import CiderError, ContractError, MetricError, ParameterError

Z_95 = 1.959964


def z_value(level: float) -> float:
    if not 0 < level < 1:
        raise ParameterError(f"confidence level must lie in (0, 1), got {level}")
    if level == 0.95:
        return Z_95
    return float(norm.ppf(0.5 + level / 2))


def _labels_array(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.dtype == object:
        if any(v is None for v in y):
            raise ContractError("blind (unlabeled) instances cannot enter a metric")
        y = y.astype(int)
    return y.astype(int)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC from midranks; tied (pos, neg) pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = _labels_array(labels)
    if s.shape != y.shape:
        raise MetricError(f"scores and labels differ in shape: {s.shape} vs {y.shape}")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise MetricError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def hm_se(auc: float, n_pos: int, n_neg: int) -> float:
    """Hanley & McNeil (1982) standard error of an AUC."""
    if n_pos < 1 or n_neg < 1:
        raise ParameterError(f"class counts must be >= 1, got {n_pos}, {n_neg}")
    if not 0.0 <= auc <= 1.0:
        raise ParameterError(f"auc must lie in [0, 1], got {auc}")
    a = float(auc)
    q1 = a / (2.0 - a)
    q2 = 2.0 * a * a / (1.0 + a)
    var = (a * (1 - a) + (n_pos - 1) * (q1 - a * a) + (n_neg - 1) * (q2 - a * a)) / (n_pos * n_neg)
    return math.sqrt(max(var, 0.0))


def hm_ci(auc: float, n_pos: int, n_neg: int, level: float = 0.95) -> float:
    """Half-width of the symmetric Hanley-McNeil interval."""
    return z_value(level) * hm_se(auc, n_pos, n_neg)


def equal_split_counts(n_total: int) -> tuple[int, int]:
    """Class counts assumed when a blind test set's composition is unknown."""
    return n_total // 2, n_total - n_total // 2


@dataclass
class EvalResult:
    name: str
    scores: list[float]
    labels: list[int]
    auc: float
    n_pos: int
    n_neg: int
    ci_half_width: float
    ci_level: float = 0.95
    ids: list[str] = field(default_factory=list)
    assumed_counts: bool = False

    @classmethod
    def from_scores(cls, name, scores, labels, ids=(), level: float = 0.95) -> "EvalResult":
        y = _labels_array(labels)
        auc = roc_auc(scores, y)
        n_pos, n_neg = int(y.sum()), int(y.size - y.sum())
        return cls(name, [float(v) for v in scores], y.tolist(), auc, n_pos, n_neg,
                   hm_ci(auc, n_pos, n_neg, level), level, list(ids))

    @classmethod
    def from_summary(cls, name, auc, n_pos, n_neg, level: float = 0.95, assumed_counts=False) -> "EvalResult":
        """A result known only by its AUC and class counts (e.g. a published table cell)."""
        return cls(name, [], [], float(auc), int(n_pos), int(n_neg),
                   hm_ci(auc, n_pos, n_neg, level), level, [], assumed_counts)

    @property
    def se(self) -> float:
        return hm_se(self.auc, self.n_pos, self.n_neg)

    @property
    def interval(self) -> tuple[float, float]:
        """Display interval, clipped to [0, 1]."""
        return max(0.0, self.auc - self.ci_half_width), min(1.0, self.auc + self.ci_half_width)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "auc": self.auc, "ci_half_width": self.ci_half_width,
            "ci_level": self.ci_level, "n_pos": self.n_pos, "n_neg": self.n_neg,
            "assumed_counts": self.assumed_counts, "ids": self.ids,
            "scores": self.scores, "labels": self.labels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        return cls(d["name"], d["scores"], d["labels"], d["auc"], d["n_pos"], d["n_neg"],
                   d["ci_half_width"], d.get("ci_level", 0.95), d.get("ids", []),
                   d.get("assumed_counts", False))


@dataclass(frozen=True)
class SignificanceVerdict:
    model_a: str
    model_b: str
    z: float
    significant_at_95: bool

    def to_dict(self):
        return {"model_a": self.model_a, "model_b": self.model_b, "z": self.z,
                "significant_at_95": self.significant_at_95}


def compare_models(a: EvalResult, b: EvalResult) -> SignificanceVerdict:
    """One-sided z-test of ``a`` over ``b`` on independent Hanley-McNeil SEs."""
    denom = math.sqrt(a.se**2 + b.se**2)
    diff = a.auc - b.auc
    if denom == 0.0:
        z = 0.0 if diff == 0 else math.copysign(math.inf, diff)
    else:
        z = diff / denom
    return SignificanceVerdict(a.name, b.name, z, z > Z_95)


# -- cross-dataset matrix ----------------------------------------------------------

@dataclass
class CrossMatrix:
    rows: list[str]
    cols: list[str]
    values: list[list[float | None]]
    errors: dict = field(default_factory=dict)

    def cell(self, row: str, col: str) -> float | None:
        return self.values[self.rows.index(row)][self.cols.index(col)]

    def to_dict(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "values": self.values,
                "errors": {f"{r}|{c}": msg for (r, c), msg in self.errors.items()}}


def cross_matrix(predictors: Mapping[str, Callable], datasets: Mapping[str, tuple]) -> CrossMatrix:
    """AUC of every predictor on every dataset.

    ``predictors`` maps a train-set name to a callable turning a list of
    instances into scores; it may carry a ``modality_set`` attribute.
    ``datasets`` maps a test-set name to ``(instances, modality_set)``.
    Failing cells become ``None`` with the message kept in ``errors``.
    """
    rows, cols = list(predictors), list(datasets)
    values: list[list[float | None]] = []
    errors = {}
    for r in rows:
        pred = predictors[r]
        row = []
        for c in cols:
            instances, mods = datasets[c]
            want = getattr(pred, "modality_set", None)
            try:
                if want is not None and tuple(want) != tuple(mods):
                    raise ContractError(f"model expects modalities {tuple(want)}, dataset has {tuple(mods)}")
                labels = [inst.label for inst in instances]
                row.append(roc_auc(pred(instances), labels))
            except CiderError as exc:
                errors[(r, c)] = str(exc)
                row.append(None)
        values.append(row)
    return CrossMatrix(rows, cols, values, errors)


# -- text rendering ----------------------------------------------------------------

def _fmt(x: float) -> str:
    s = f"{x:.3f}"
    return s[1:] if s.startswith("0") else s


def render_results_table(results: Sequence[EvalResult], bold: Sequence[str] = ()) -> str:
    """One line per model: ``name  .799 ± .057`` with ``**`` around significant winners."""
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        cell = f"{_fmt(r.auc)} ± {_fmt(r.ci_half_width)}"
        if r.name in bold:
            cell = f"**{_fmt(r.auc)}** ± {_fmt(r.ci_half_width)}"
        note = f"  (n+={r.n_pos}, n-={r.n_neg}{', assumed' if r.assumed_counts else ''})"
        lines.append(f"{r.name:<{width}}  {cell}{note}")
    return "\n".join(lines)


def render_matrix(m: CrossMatrix) -> str:
    corner = "Train \\ Test"
    width = max([len(corner)] + [len(r) for r in m.rows])
    colw = max([7] + [len(c) for c in m.cols])
    lines = [f"{corner:<{width}}  " + "  ".join(f"{c:>{colw}}" for c in m.cols)]
    for r, vals in zip(m.rows, m.values):
        cells = ["n/a" if v is None else _fmt(v) for v in vals]
        lines.append(f"{r:<{width}}  " + "  ".join(f"{c:>{colw}}" for c in cells))
    return "\n".join(lines)
