"""Judgment corpora: loading, validation, normalization, and term bucketing.

A corpus file is line-delimited JSON, one case per line. Gold charge and
article labels must come from a closed label pool; anything outside the pool
is a hard error rather than a silent extension of the label world.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping


class CorpusError(Exception):
    """Base error for corpus loading and validation."""


class RecordError(CorpusError):
    """A malformed record; carries the 1-based line number."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class UnknownLabelError(CorpusError):
    """A gold label that is absent from the label pool."""

    def __init__(self, kind: str, label, line_number: int | None = None):
        at = f"line {line_number}: " if line_number is not None else ""
        super().__init__(f"{at}unknown {kind} {label!r} (not in label pool)")
        self.kind = kind
        self.label = label


class DuplicateCaseError(CorpusError):
    pass


class SchemeError(CorpusError):
    """Invalid term-interval scheme definition."""


SPECIAL_TERM_KINDS = ("none", "life", "death")


@dataclass(frozen=True)
class TermValue:
    """Imprisonment outcome: a month count or one of the special markers.

    Exactly one variant is populated: ``kind="months"`` carries a non-negative
    month count; the special kinds ("none" = no custody, "life", "death")
    carry no count.
    """

    kind: str
    months: int | None = None

    def __post_init__(self):
        if self.kind == "months":
            if self.months is None or self.months < 0:
                raise ValueError("months term requires a non-negative month count")
        elif self.kind in SPECIAL_TERM_KINDS:
            if self.months is not None:
                raise ValueError(f"{self.kind!r} term must not carry a month count")
        else:
            raise ValueError(f"unknown term kind: {self.kind!r}")

    @classmethod
    def of_months(cls, months: int) -> "TermValue":
        return cls("months", months)

    @classmethod
    def special(cls, kind: str) -> "TermValue":
        return cls(kind)


@dataclass(frozen=True)
class DefendantJudgment:
    """Gold judgment for one defendant: charges, law articles, and term."""

    name: str
    charges: frozenset[str]
    articles: frozenset[int]
    term: TermValue

    def __post_init__(self):
        if not self.name.strip():
            raise ValueError("defendant name must be non-empty")
        if not self.charges:
            raise ValueError(f"defendant {self.name!r} has no gold charges")
        if not self.articles:
            raise ValueError(f"defendant {self.name!r} has no gold articles")


@dataclass(frozen=True)
class Case:
    """One judgment: the criminal fact plus per-defendant gold labels."""

    case_id: str
    fact: str
    defendants: tuple[DefendantJudgment, ...]

    def __post_init__(self):
        if not self.case_id:
            raise ValueError("case_id must be non-empty")
        if not self.fact.strip():
            raise ValueError("fact text must be non-empty")
        if not self.defendants:
            raise ValueError("case must have at least one defendant")
        names = [d.name for d in self.defendants]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate defendant names in case {self.case_id!r}")

    def defendant(self, name: str) -> DefendantJudgment:
        for d in self.defendants:
            if d.name == name:
                return d
        raise KeyError(f"no defendant {name!r} in case {self.case_id!r}")


@dataclass(frozen=True)
class LabelPool:
    """The closed worlds of charge names and law articles.

    ``articles`` maps article number to statute text. Empty statute text is
    rejected unless ``allow_empty_article_text`` is set, for corpora that ship
    numbers without the underlying text.
    """

    charges: tuple[str, ...]
    articles: Mapping[int, str]
    allow_empty_article_text: bool = False

    def __post_init__(self):
        if len(set(self.charges)) != len(self.charges):
            raise ValueError("duplicate charge names in label pool")
        for number, text in self.articles.items():
            if not isinstance(number, int) or number <= 0:
                raise ValueError(f"article number must be a positive integer: {number!r}")
            if not text and not self.allow_empty_article_text:
                raise ValueError(
                    f"article {number} has empty text; pass allow_empty_article_text "
                    "if the source corpus lacks statute text"
                )

    @property
    def charge_set(self) -> frozenset[str]:
        return frozenset(self.charges)

    @classmethod
    def load(cls, path: Path | str) -> "LabelPool":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        charges = tuple(obj["charges"])
        articles = {int(a["number"]): a.get("text", "") for a in obj["articles"]}
        allow_empty = any(not t for t in articles.values())
        return cls(charges=charges, articles=articles, allow_empty_article_text=allow_empty)

    def dump(self, path: Path | str) -> None:
        obj = {
            "charges": list(self.charges),
            "articles": [
                {"number": n, "text": self.articles[n]} for n in sorted(self.articles)
            ],
        }
        Path(path).write_text(
            json.dumps(obj, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )


@dataclass(frozen=True)
class MonthRange:
    """One interval entry: ``lo_exclusive < months <= hi_inclusive``.

    ``hi_inclusive=None`` means unbounded above. An entry with
    ``lo_exclusive=None`` has no month range at all and can only be reached
    through a special marker (e.g. the life/death class).
    """

    index: int
    lo_exclusive: int | None = None
    hi_inclusive: int | None = None

    @property
    def has_range(self) -> bool:
        return self.lo_exclusive is not None

    def contains(self, months: int) -> bool:
        if not self.has_range:
            return False
        if months <= self.lo_exclusive:
            return False
        return self.hi_inclusive is None or months <= self.hi_inclusive


@dataclass(frozen=True)
class IntervalScheme:
    """The 11-class partition of imprisonment outcomes.

    Month ranges of the entries must be disjoint and jointly cover every
    non-negative month count; the three special markers map onto entry
    indices. Together the classes cover the whole outcome space.
    """

    intervals: tuple[MonthRange, ...]
    special: Mapping[str, int]

    def __post_init__(self):
        n = len(self.intervals)
        if n != 11:
            raise SchemeError(f"scheme must have exactly 11 intervals, got {n}")
        indices = [iv.index for iv in self.intervals]
        if indices != list(range(11)):
            raise SchemeError("interval indices must be exactly 0..10 in order")
        ranged = sorted(
            (iv for iv in self.intervals if iv.has_range), key=lambda iv: iv.lo_exclusive
        )
        if not ranged or ranged[0].lo_exclusive > -1:
            raise SchemeError("month ranges must cover 0 months")
        prev = ranged[0]
        if prev.hi_inclusive is not None and prev.hi_inclusive <= prev.lo_exclusive:
            raise SchemeError(f"empty range at index {prev.index}")
        for iv in ranged[1:]:
            if prev.hi_inclusive is None:
                raise SchemeError("unbounded range must be the last one")
            if iv.lo_exclusive < prev.hi_inclusive:
                raise SchemeError(
                    f"ranges at indices {prev.index} and {iv.index} overlap"
                )
            if iv.lo_exclusive > prev.hi_inclusive:
                raise SchemeError(
                    f"gap between ranges at indices {prev.index} and {iv.index}"
                )
            if iv.hi_inclusive is not None and iv.hi_inclusive <= iv.lo_exclusive:
                raise SchemeError(f"empty range at index {iv.index}")
            prev = iv
        if prev.hi_inclusive is not None:
            raise SchemeError("month ranges must cover all month counts (no upper gap)")
        for kind in SPECIAL_TERM_KINDS:
            if kind not in self.special:
                raise SchemeError(f"special marker {kind!r} has no interval mapping")
            idx = self.special[kind]
            if not 0 <= idx <= 10:
                raise SchemeError(f"special marker {kind!r} maps outside 0..10")

    @classmethod
    def default(cls) -> "IntervalScheme":
        """Conventional CAIL-style bucketing; the interval count is fixed at
        11 but the boundaries are configuration, not doctrine."""
        return cls(
            intervals=(
                MonthRange(0, -1, 0),
                MonthRange(1, 0, 6),
                MonthRange(2, 6, 9),
                MonthRange(3, 9, 12),
                MonthRange(4, 12, 24),
                MonthRange(5, 24, 36),
                MonthRange(6, 36, 60),
                MonthRange(7, 60, 84),
                MonthRange(8, 84, 120),
                MonthRange(9, 120, None),
                MonthRange(10),
            ),
            special={"none": 0, "life": 10, "death": 10},
        )

    @classmethod
    def load(cls, path: Path | str) -> "IntervalScheme":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        intervals = tuple(
            MonthRange(
                index=e["index"],
                lo_exclusive=e.get("min_months_exclusive"),
                hi_inclusive=e.get("max_months_inclusive"),
            )
            for e in obj["intervals"]
        )
        return cls(intervals=intervals, special=dict(obj["special"]))

    def dump(self, path: Path | str) -> None:
        obj = {
            "intervals": [
                {
                    "index": iv.index,
                    "min_months_exclusive": iv.lo_exclusive,
                    "max_months_inclusive": iv.hi_inclusive,
                }
                for iv in self.intervals
            ],
            "special": dict(self.special),
        }
        Path(path).write_text(
            json.dumps(obj, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )


def bucket_term(term: TermValue, scheme: IntervalScheme) -> int:
    """Map a term value onto its interval index. Total over all variants."""
    if term.kind != "months":
        return scheme.special[term.kind]
    for iv in scheme.intervals:
        if iv.contains(term.months):
            return iv.index
    # Unreachable for a validated scheme: ranges cover [0, inf).
    raise SchemeError(f"no interval contains {term.months} months")


def term_interval_label(index: int, scheme: IntervalScheme) -> str:
    """Human-readable range statement for an interval, chosen so that
    ``parse_term_statement`` maps it back to the same index."""
    if index == scheme.special["none"]:
        return "no custodial sentence"
    if index == scheme.special["life"] and index == scheme.special["death"]:
        return "life imprisonment or death penalty"
    if index == scheme.special["life"]:
        return "life imprisonment"
    if index == scheme.special["death"]:
        return "death penalty"
    iv = scheme.intervals[index]
    if not iv.has_range:
        raise SchemeError(f"interval {index} has no month range and no marker")
    if iv.hi_inclusive is None:
        return f"more than {iv.lo_exclusive} months"
    return f"{iv.lo_exclusive + 1} to {iv.hi_inclusive} months"


_RANGE_RE = re.compile(
    r"(\d+)\s*(years?|months?|年|个月)?\s*(?:-|–|—|~|to)\s*(\d+)\s*(years?|months?|年|个月)",
    re.IGNORECASE,
)
_YEARS_AND_MONTHS_RE = re.compile(
    r"(\d+)\s*(?:years?|年)\s*(?:and\s+)?(\d+)\s*(?:months?|个月)", re.IGNORECASE
)
_MORE_THAN_RE = re.compile(
    r"(?:more than|over|above|exceeding)\s+(\d+)\s*(years?|months?|年|个月)",
    re.IGNORECASE,
)
_SINGLE_RE = re.compile(r"(\d+)\s*(years?|months?|年|个月)", re.IGNORECASE)

_NO_CUSTODY_MARKERS = ("no custod", "non-custod", "exempt", "no criminal punishment", "免予")
_DEATH_MARKERS = ("death", "死刑")
_LIFE_MARKERS = ("life", "无期")


def _to_months(value: int, unit: str | None) -> int:
    if unit is not None and (unit.lower().startswith("year") or unit == "年"):
        return value * 12
    return value


def parse_term_statement(text: str, scheme: IntervalScheme) -> int | None:
    """Parse a free-text sentencing statement into an interval index.

    Range expressions bucket by their upper bound; "more than X" by X plus one
    month. Returns None when no recognizable statement is found.
    """
    lowered = text.lower()
    if any(m in lowered for m in _DEATH_MARKERS):
        return scheme.special["death"]
    if any(m in lowered for m in _LIFE_MARKERS):
        return scheme.special["life"]
    if any(m in lowered for m in _NO_CUSTODY_MARKERS):
        return scheme.special["none"]
    m = _MORE_THAN_RE.search(text)
    if m:
        months = _to_months(int(m.group(1)), m.group(2)) + 1
        return bucket_term(TermValue.of_months(months), scheme)
    m = _RANGE_RE.search(text)
    if m:
        months = _to_months(int(m.group(3)), m.group(4))
        return bucket_term(TermValue.of_months(months), scheme)
    m = _YEARS_AND_MONTHS_RE.search(text)
    if m:
        months = int(m.group(1)) * 12 + int(m.group(2))
        return bucket_term(TermValue.of_months(months), scheme)
    m = _SINGLE_RE.search(text)
    if m:
        months = _to_months(int(m.group(1)), m.group(2))
        return bucket_term(TermValue.of_months(months), scheme)
    return None


def _term_from_obj(obj, line_number: int) -> TermValue:
    if not isinstance(obj, dict):
        raise RecordError(line_number, f"term must be an object, got {obj!r}")
    if "months" in obj:
        months = obj["months"]
        if not isinstance(months, int) or months < 0:
            raise RecordError(line_number, f"term months must be a non-negative int: {months!r}")
        return TermValue.of_months(months)
    if "special" in obj:
        kind = obj["special"]
        if kind not in SPECIAL_TERM_KINDS:
            raise RecordError(line_number, f"unknown special term {kind!r}")
        return TermValue.special(kind)
    raise RecordError(line_number, f"term needs 'months' or 'special': {obj!r}")


def _case_from_obj(obj: dict, pool: LabelPool, line_number: int) -> Case:
    try:
        case_id = obj["case_id"]
        fact = obj["fact"]
        raw_defendants = obj["defendants"]
    except (KeyError, TypeError) as exc:
        raise RecordError(line_number, f"missing field: {exc}") from exc
    defendants = []
    for raw in raw_defendants:
        charges = raw.get("charges", [])
        articles = raw.get("articles", [])
        for charge in charges:
            if charge not in pool.charge_set:
                raise UnknownLabelError("charge", charge, line_number)
        for article in articles:
            if article not in pool.articles:
                raise UnknownLabelError("article", article, line_number)
        try:
            defendants.append(
                DefendantJudgment(
                    name=raw.get("name", ""),
                    charges=frozenset(charges),
                    articles=frozenset(articles),
                    term=_term_from_obj(raw.get("term"), line_number),
                )
            )
        except ValueError as exc:
            raise RecordError(line_number, str(exc)) from exc
    try:
        return Case(case_id=case_id, fact=fact, defendants=tuple(defendants))
    except ValueError as exc:
        raise RecordError(line_number, str(exc)) from exc


def load_dataset(path: Path | str, pool: LabelPool) -> list[Case]:
    """Load and validate a line-delimited case file, preserving file order."""
    cases: list[Case] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(line_number, f"invalid JSON: {exc.msg}") from exc
            case = _case_from_obj(obj, pool, line_number)
            if case.case_id in seen_ids:
                raise DuplicateCaseError(
                    f"line {line_number}: duplicate case_id {case.case_id!r}"
                )
            seen_ids.add(case.case_id)
            cases.append(case)
    return cases


def case_to_obj(case: Case) -> dict:
    """Normalized JSON shape for one case (labels sorted for stable output)."""
    return {
        "case_id": case.case_id,
        "fact": case.fact,
        "defendants": [
            {
                "name": d.name,
                "charges": sorted(d.charges),
                "articles": sorted(d.articles),
                "term": (
                    {"months": d.term.months}
                    if d.term.kind == "months"
                    else {"special": d.term.kind}
                ),
            }
            for d in case.defendants
        ],
    }


def dump_dataset(cases: Iterable[Case], path: Path | str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for case in cases:
            handle.write(json.dumps(case_to_obj(case), ensure_ascii=False, sort_keys=True))
            handle.write("\n")


@dataclass(frozen=True)
class StatsReport:
    case_count: int
    defendant_count: int
    distinct_charges: int
    distinct_articles: int
    avg_defendants_per_case: float
    avg_fact_chars: float
    pool_charges: int
    pool_articles: int

    def as_dict(self) -> dict:
        return {
            "case_count": self.case_count,
            "defendant_count": self.defendant_count,
            "distinct_charges": self.distinct_charges,
            "distinct_articles": self.distinct_articles,
            "avg_defendants_per_case": self.avg_defendants_per_case,
            "avg_fact_chars": self.avg_fact_chars,
            "pool_charges": self.pool_charges,
            "pool_articles": self.pool_articles,
        }


def dataset_stats(cases: list[Case], pool: LabelPool) -> StatsReport:
    charges_used: set[str] = set()
    articles_used: set[int] = set()
    defendant_count = 0
    fact_chars = 0
    for case in cases:
        fact_chars += len(case.fact)
        for d in case.defendants:
            defendant_count += 1
            charges_used.update(d.charges)
            articles_used.update(d.articles)
    n = len(cases)
    return StatsReport(
        case_count=n,
        defendant_count=defendant_count,
        distinct_charges=len(charges_used),
        distinct_articles=len(articles_used),
        avg_defendants_per_case=defendant_count / n if n else 0.0,
        avg_fact_chars=fact_chars / n if n else 0.0,
        pool_charges=len(pool.charges),
        pool_articles=len(pool.articles),
    )
