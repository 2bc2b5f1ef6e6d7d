"""Evaluation protocol: subset accuracy, macro P/R/F1, term-interval metrics,
and the difficulty-quartile breakdown.

Charge and article prediction are multi-label; a record counts toward subset
accuracy only when the predicted set equals the gold set exactly. Macro
metrics are unweighted means over a declared label universe (by default the
labels occurring in the gold records), with the 0/0 -> 0 convention, and
macro F1 is the mean of per-label F1 scores, not the harmonic mean of
macro P and macro R.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

Key = tuple[str, str]  # (case_id, defendant)


class EvaluationError(Exception):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    """One system output after label mapping; all labels canonical."""

    case_id: str
    defendant: str
    charges: frozenset[str]
    articles: frozenset[int]
    term_interval: int | None = None

    @property
    def key(self) -> Key:
        return (self.case_id, self.defendant)

    def as_obj(self) -> dict:
        return {
            "case_id": self.case_id,
            "defendant": self.defendant,
            "charges": sorted(self.charges),
            "articles": sorted(self.articles),
            "term_interval": self.term_interval,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "PredictionRecord":
        return cls(
            case_id=obj["case_id"],
            defendant=obj["defendant"],
            charges=frozenset(obj.get("charges", [])),
            articles=frozenset(obj.get("articles", [])),
            term_interval=obj.get("term_interval"),
        )


def write_predictions(records: Iterable[PredictionRecord], path: Path | str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record.as_obj(), ensure_ascii=False, sort_keys=True))
            handle.write("\n")


def read_predictions(path: Path | str) -> list[PredictionRecord]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                records.append(PredictionRecord.from_obj(json.loads(line)))
    return records


def _check_aligned(preds: Mapping[Key, object], golds: Mapping[Key, object]) -> None:
    if set(preds) != set(golds):
        missing = sorted(set(golds) - set(preds))[:3]
        extra = sorted(set(preds) - set(golds))[:3]
        raise EvaluationError(
            f"prediction/gold keys mismatch (missing={missing}, extra={extra})"
        )
    if not golds:
        raise EvaluationError("metrics are undefined over an empty record set")


def subset_accuracy(
    preds: Mapping[Key, frozenset], golds: Mapping[Key, frozenset]
) -> float:
    """Fraction of records whose predicted set equals the gold set exactly."""
    _check_aligned(preds, golds)
    hits = sum(1 for key in golds if preds[key] == golds[key])
    return hits / len(golds)


def gold_label_universe(golds: Mapping[Key, frozenset]) -> tuple:
    labels = set()
    for gold in golds.values():
        labels.update(gold)
    return tuple(sorted(labels))


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def macro_prf(
    preds: Mapping[Key, frozenset],
    golds: Mapping[Key, frozenset],
    label_universe: Sequence,
) -> tuple[float, float, float]:
    """Unweighted mean of per-label precision, recall, and F1."""
    _check_aligned(preds, golds)
    if not label_universe:
        raise EvaluationError("label universe must be non-empty")
    p_sum = r_sum = f_sum = 0.0
    for label in label_universe:
        tp = fp = fn = 0
        for key, gold in golds.items():
            in_gold = label in gold
            in_pred = label in preds[key]
            if in_gold and in_pred:
                tp += 1
            elif in_pred:
                fp += 1
            elif in_gold:
                fn += 1
        precision, recall, f1 = _prf(tp, fp, fn)
        p_sum += precision
        r_sum += recall
        f_sum += f1
    n = len(label_universe)
    return p_sum / n, r_sum / n, f_sum / n


@dataclass(frozen=True)
class TermMetrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    refusals: int
    record_count: int
    universe_size: int

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "refusals": self.refusals,
            "record_count": self.record_count,
            "universe_size": self.universe_size,
        }


def term_metrics(
    preds: Mapping[Key, int | None],
    golds: Mapping[Key, int],
    universe: Sequence[int] | None = None,
) -> TermMetrics:
    """Single-class metrics over term intervals.

    A record with an absent predicted interval (a refusal) counts as wrong for
    accuracy and as a false negative for its gold class; refusals are also
    reported on their own.
    """
    _check_aligned(preds, golds)
    if universe is None:
        universe = tuple(sorted(set(golds.values())))
    if not universe:
        raise EvaluationError("term universe must be non-empty")
    refusals = sum(1 for value in preds.values() if value is None)
    hits = sum(1 for key, gold in golds.items() if preds[key] == gold)
    accuracy = hits / len(golds)
    p_sum = r_sum = f_sum = 0.0
    for cls in universe:
        tp = fp = fn = 0
        for key, gold in golds.items():
            pred = preds[key]
            if gold == cls and pred == cls:
                tp += 1
            elif gold == cls:
                fn += 1
            elif pred == cls:
                fp += 1
        precision, recall, f1 = _prf(tp, fp, fn)
        p_sum += precision
        r_sum += recall
        f_sum += f1
    n = len(universe)
    return TermMetrics(
        accuracy=accuracy,
        macro_precision=p_sum / n,
        macro_recall=r_sum / n,
        macro_f1=f_sum / n,
        refusals=refusals,
        record_count=len(golds),
        universe_size=n,
    )


@dataclass(frozen=True)
class QuartileBand:
    label: str
    charges: tuple[str, ...]
    macro_f1: float


@dataclass(frozen=True)
class QuartileReport:
    """System macro F1 restricted to each quarter of the reference ranking."""

    bands: tuple[QuartileBand, ...]
    ranking: tuple[str, ...]

    def as_dict(self) -> dict:
        return {
            "bands": [
                {"label": b.label, "charges": list(b.charges), "macro_f1": b.macro_f1}
                for b in self.bands
            ],
            "ranking": list(self.ranking),
        }


_BAND_LABELS = ("0-25%", "25-50%", "50-75%", "75-100%")


def difficulty_quartiles(
    reference_scores: Mapping[str, float],
    preds: Mapping[Key, frozenset],
    golds: Mapping[Key, frozenset],
    universe: Sequence[str] | None = None,
) -> QuartileReport:
    """Rank charges by an external reference score (descending, ties broken
    by charge name) and report the system's macro F1 over each quarter."""
    _check_aligned(preds, golds)
    if universe is None:
        universe = gold_label_universe(golds)
    missing = [c for c in universe if c not in reference_scores]
    if missing:
        raise EvaluationError(f"missing reference score for charges: {missing[:5]}")
    ranking = tuple(sorted(universe, key=lambda c: (-reference_scores[c], c)))
    n = len(ranking)
    base, extra = divmod(n, 4)
    bands = []
    start = 0
    for i in range(4):
        size = base + (1 if i < extra else 0)
        chunk = ranking[start : start + size]
        start += size
        if chunk:
            _, _, f1 = macro_prf(preds, golds, chunk)
        else:
            f1 = 0.0
        bands.append(QuartileBand(label=_BAND_LABELS[i], charges=chunk, macro_f1=f1))
    return QuartileReport(bands=tuple(bands), ranking=ranking)


@dataclass(frozen=True)
class SubTaskMetrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    record_count: int
    universe_size: int

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "record_count": self.record_count,
            "universe_size": self.universe_size,
        }


@dataclass(frozen=True)
class MetricsReport:
    charges: SubTaskMetrics
    articles: SubTaskMetrics
    term: TermMetrics | None
    missing_predictions: int = 0
    quartiles: QuartileReport | None = None

    def as_dict(self) -> dict:
        out = {
            "charges": self.charges.as_dict(),
            "articles": self.articles.as_dict(),
            "term": self.term.as_dict() if self.term else None,
            "missing_predictions": self.missing_predictions,
        }
        if self.quartiles is not None:
            out["quartiles"] = self.quartiles.as_dict()
        return out

    def format_table(self) -> str:
        rows = [("sub-task", "acc", "ma-p", "ma-r", "ma-f", "n")]
        for name, m in (("charge", self.charges), ("article", self.articles)):
            rows.append(
                (
                    name,
                    f"{m.accuracy:.4f}",
                    f"{m.macro_precision:.4f}",
                    f"{m.macro_recall:.4f}",
                    f"{m.macro_f1:.4f}",
                    str(m.record_count),
                )
            )
        if self.term is not None:
            rows.append(
                (
                    "term",
                    f"{self.term.accuracy:.4f}",
                    f"{self.term.macro_precision:.4f}",
                    f"{self.term.macro_recall:.4f}",
                    f"{self.term.macro_f1:.4f}",
                    str(self.term.record_count),
                )
            )
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows]
        if self.term is not None:
            lines.append(f"term refusals/absent: {self.term.refusals}")
        if self.missing_predictions:
            lines.append(f"missing prediction records (scored as empty): {self.missing_predictions}")
        if self.quartiles is not None:
            lines.append("difficulty quartiles (macro F1 by reference ranking):")
            for band in self.quartiles.bands:
                lines.append(f"  {band.label}: {band.macro_f1:.4f} over {len(band.charges)} charges")
        return "\n".join(lines)


@dataclass(frozen=True)
class GoldRecord:
    case_id: str
    defendant: str
    charges: frozenset[str]
    articles: frozenset[int]
    term_interval: int

    @property
    def key(self) -> Key:
        return (self.case_id, self.defendant)


def gold_records_from_cases(cases, scheme) -> list[GoldRecord]:
    from .corpus import bucket_term

    records = []
    for case in cases:
        for d in case.defendants:
            records.append(
                GoldRecord(
                    case_id=case.case_id,
                    defendant=d.name,
                    charges=d.charges,
                    articles=d.articles,
                    term_interval=bucket_term(d.term, scheme),
                )
            )
    return records


def evaluate_predictions(
    predictions: Sequence[PredictionRecord],
    golds: Sequence[GoldRecord],
    *,
    full_charge_universe: Sequence[str] | None = None,
    full_article_universe: Sequence[int] | None = None,
    full_term_universe: Sequence[int] | None = None,
    reference_scores: Mapping[str, float] | None = None,
    score_term: bool = True,
) -> MetricsReport:
    """Assemble the full report, filling records that never produced a
    prediction with empty label sets so one bad record cannot block scoring."""
    gold_keys = {g.key for g in golds}
    pred_by_key = {p.key: p for p in predictions if p.key in gold_keys}
    missing = len(gold_keys) - len(pred_by_key)

    charge_preds = {}
    article_preds = {}
    term_preds = {}
    charge_golds = {}
    article_golds = {}
    term_golds = {}
    for gold in golds:
        pred = pred_by_key.get(gold.key)
        charge_preds[gold.key] = pred.charges if pred else frozenset()
        article_preds[gold.key] = pred.articles if pred else frozenset()
        term_preds[gold.key] = pred.term_interval if pred else None
        charge_golds[gold.key] = gold.charges
        article_golds[gold.key] = gold.articles
        term_golds[gold.key] = gold.term_interval

    charge_universe = tuple(full_charge_universe or gold_label_universe(charge_golds))
    article_universe = tuple(full_article_universe or gold_label_universe(article_golds))
    c_p, c_r, c_f = macro_prf(charge_preds, charge_golds, charge_universe)
    a_p, a_r, a_f = macro_prf(article_preds, article_golds, article_universe)
    charges = SubTaskMetrics(
        accuracy=subset_accuracy(charge_preds, charge_golds),
        macro_precision=c_p,
        macro_recall=c_r,
        macro_f1=c_f,
        record_count=len(charge_golds),
        universe_size=len(charge_universe),
    )
    articles = SubTaskMetrics(
        accuracy=subset_accuracy(article_preds, article_golds),
        macro_precision=a_p,
        macro_recall=a_r,
        macro_f1=a_f,
        record_count=len(article_golds),
        universe_size=len(article_universe),
    )
    term = (
        term_metrics(term_preds, term_golds, universe=full_term_universe)
        if score_term
        else None
    )
    quartiles = None
    if reference_scores is not None:
        quartiles = difficulty_quartiles(
            reference_scores, charge_preds, charge_golds, universe=charge_universe
        )
    return MetricsReport(
        charges=charges,
        articles=articles,
        term=term,
        missing_predictions=missing,
        quartiles=quartiles,
    )
