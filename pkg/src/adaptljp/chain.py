"""The Ask -> Discriminate -> Predict reasoning chain and its baselines.

Each step renders an external text template, calls the generator greedily,
and parses the labeled sections out of the response. Parsing applies the
strict section grammar first, then a lenient regex fallback, and only then
fails with a typed error carrying the raw text, so a batch run never crashes
on one odd response.
"""

from __future__ import annotations

import importlib.resources
import hashlib
import re
import time
from dataclasses import dataclass, replace
from pathlib import Path
from string import Template
from typing import Mapping, Sequence

from .corpus import Case, IntervalScheme, parse_term_statement
from .gateway import ChatRequest, Decoding, LlmGateway, Message

MODE_KINDS = ("adapt", "adapt_wo_ask", "adapt_wo_disc", "adapt_refine", "direct", "cot")

_MODE_STEPS = {
    "adapt": ("ask", "discriminate", "predict"),
    "adapt_wo_ask": ("discriminate", "predict"),
    "adapt_wo_disc": ("ask", "predict"),
    "adapt_refine": ("predict",),
    "direct": ("predict",),
    "cot": ("predict",),
}

VERDICTS = ("consistent", "inconsistent", "partial")


class ChainError(Exception):
    """Base error for chain execution."""


class ChainParseError(ChainError):
    """A response that could not be parsed even leniently; carries raw text."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class StepRefusal(ChainError):
    """The generator refused to answer a step; carries the step's log record."""

    def __init__(self, step: str, record: "StepRecord | None" = None):
        super().__init__(f"generator refused at step {step!r}")
        self.step = step
        self.record = record


class BackendErrorResponse(ChainError):
    """The backend returned an error-state response for a step."""

    def __init__(self, step: str, record: "StepRecord | None" = None):
        super().__init__(f"backend error response at step {step!r}")
        self.step = step
        self.record = record


class ChainStepError(ChainError):
    """A step failure annotated with the step and record it belongs to."""

    def __init__(self, step: str, case_id: str, defendant: str, cause: Exception):
        super().__init__(f"step {step!r} failed for ({case_id!r}, {defendant!r}): {cause}")
        self.step = step
        self.case_id = case_id
        self.defendant = defendant
        self.cause = cause


class TemplateSet:
    """Prompt templates as external versioned text files.

    Templates use ``string.Template`` placeholders (``${fact}`` etc.) so case
    text containing braces cannot break rendering. Template names are paths
    relative to the root, e.g. ``chain/adapt/ask``.
    """

    def __init__(self, root):
        self._root = root
        self._cache: dict[str, str] = {}

    @classmethod
    def packaged(cls) -> "TemplateSet":
        return cls(importlib.resources.files("adaptljp").joinpath("templates"))

    @classmethod
    def from_dir(cls, path: Path | str) -> "TemplateSet":
        return cls(Path(path))

    def load(self, name: str) -> str:
        if name not in self._cache:
            node = self._root
            parts = name.split("/")
            for part in parts[:-1]:
                node = node.joinpath(part)
            node = node.joinpath(parts[-1] + ".txt")
            self._cache[name] = node.read_text(encoding="utf-8")
        return self._cache[name]

    def render(self, name: str, **fields: str) -> str:
        return Template(self.load(name)).substitute(fields)

    def versions(self) -> dict[str, str]:
        """sha256 of every template file, keyed by template name."""
        out: dict[str, str] = {}

        def walk(node, prefix: str):
            for child in node.iterdir():
                name = child.name
                if child.is_dir():
                    walk(child, f"{prefix}{name}/")
                elif name.endswith(".txt"):
                    digest = hashlib.sha256(child.read_bytes()).hexdigest()
                    out[f"{prefix}{name[:-4]}"] = digest

        walk(self._root, "")
        return dict(sorted(out.items()))


@dataclass(frozen=True)
class AskSummary:
    """Four-aspect decomposition of the case facts for one defendant."""

    subject: str
    behaviors_and_consequences: str
    object: str
    subjective_aspect: str
    degraded: bool = False

    _LABELS = (
        ("subject", "Subject"),
        ("behaviors_and_consequences", "Criminal behaviors and consequences"),
        ("object", "Object"),
        ("subjective_aspect", "Subjective aspect"),
    )

    def __post_init__(self):
        if not self.degraded:
            for attr, label in self._LABELS:
                if not getattr(self, attr).strip():
                    raise ValueError(f"empty {label!r} section without degraded flag")

    def render(self) -> str:
        return "\n".join(f"{label}: {getattr(self, attr)}" for attr, label in self._LABELS)

    @classmethod
    def parse(cls, text: str) -> "AskSummary":
        labels = [label for _, label in cls._LABELS]
        stop = "|".join(re.escape(l) for l in labels)
        values: dict[str, str] = {}
        found = 0
        for attr, label in cls._LABELS:
            pattern = rf"(?is){re.escape(label)}\s*[:：]\s*(.*?)(?=(?:{stop})\s*[:：]|\Z)"
            m = re.search(pattern, text)
            if m and m.group(1).strip():
                values[attr] = " ".join(m.group(1).split())
                found += 1
            else:
                values[attr] = ""
        if found == 0:
            raise ChainParseError("no labeled aspect sections found", raw=text)
        return cls(degraded=found < len(cls._LABELS), **values)


@dataclass(frozen=True)
class CandidateAssessment:
    charge: str
    consistency_rationale: str
    verdict: str

    def __post_init__(self):
        if not self.charge.strip():
            raise ValueError("candidate charge must be non-empty")
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")


def _normalize_verdict(text: str) -> str:
    lowered = text.lower()
    if "inconsistent" in lowered or "not consistent" in lowered:
        return "inconsistent"
    if "partial" in lowered:
        return "partial"
    if "consistent" in lowered:
        return "consistent"
    return "partial"


@dataclass(frozen=True)
class DiscriminationRecord:
    """Candidate charges with per-candidate consistency assessments."""

    candidates: tuple[CandidateAssessment, ...]
    pairwise_differences: str = ""

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("discrimination record needs at least one candidate")
        names = [c.charge for c in self.candidates]
        if len(set(names)) != len(names):
            raise ValueError("candidate charges must be pairwise distinct")

    def charge_names(self) -> tuple[str, ...]:
        return tuple(c.charge for c in self.candidates)

    def render(self) -> str:
        lines = []
        for i, cand in enumerate(self.candidates, start=1):
            lines.append(f"Candidate {i}: {cand.charge}")
            lines.append(f"Analysis: {cand.consistency_rationale}")
            lines.append(f"Verdict: {cand.verdict}")
        lines.append(f"Key differences: {self.pairwise_differences}")
        return "\n".join(lines)

    @classmethod
    def parse(cls, text: str, k: int) -> "DiscriminationRecord":
        diffs = ""
        m = re.search(r"(?is)key\s+differences\s*[:：]\s*(.*)\Z", text)
        body = text
        if m:
            diffs = " ".join(m.group(1).split())
            body = text[: m.start()]
        blocks = re.split(r"(?im)^\s*candidate\s+\d+\s*[:：]", body)
        candidates: list[CandidateAssessment] = []
        seen: set[str] = set()
        for block in blocks[1:]:
            lines = block.strip().splitlines()
            if not lines:
                continue
            charge = lines[0].strip().strip(".;,")
            rest = "\n".join(lines[1:])
            am = re.search(r"(?is)(?:analysis|assessment)\s*[:：]\s*(.*?)(?=verdict\s*[:：]|\Z)", rest)
            rationale = " ".join(am.group(1).split()) if am else ""
            vm = re.search(r"(?im)^\s*verdict\s*[:：]\s*(.+)$", rest)
            verdict = _normalize_verdict(vm.group(1)) if vm else "partial"
            if not charge or charge in seen:
                continue
            seen.add(charge)
            candidates.append(CandidateAssessment(charge, rationale, verdict))
            if len(candidates) >= k:
                break
        if not candidates:
            # Lenient fallback: a bare list of names, ";"-separated or one
            # "- name" / "1. name" per line.
            lm = re.search(r"(?is)candidates?\s*[:：]\s*(.+)", body)
            listing = lm.group(1) if lm else body
            for raw in re.split(r"[;；\n]", listing):
                name = re.sub(r"^\s*(?:[-*]|\d+[.)])\s*", "", raw).strip().strip(".;,")
                if name and len(name) <= 60 and name not in seen:
                    seen.add(name)
                    candidates.append(CandidateAssessment(name, "", "partial"))
                    if len(candidates) >= k:
                        break
        if not candidates:
            raise ChainParseError("no parseable candidate charges", raw=text)
        return cls(candidates=tuple(candidates), pairwise_differences=diffs)


@dataclass(frozen=True)
class Prediction:
    """Final judgment as generated, before label mapping."""

    charges: frozenset[str]
    articles: frozenset[int]
    term_interval: int | None
    raw_trace: str

    def __post_init__(self):
        if not self.charges:
            raise ValueError("prediction must carry at least one charge")


_SECTION_HEADS = {
    "charges": r"charges?|罪名",
    "articles": r"law\s+articles?|articles?|法条",
    "term": r"term|sentencing\s+range|刑期",
}
_ALL_HEADS = "|".join(_SECTION_HEADS.values())


def _extract_section(text: str, key: str) -> str | None:
    pattern = (
        rf"(?is)\b(?:{_SECTION_HEADS[key]})\s*[:：]\s*"
        rf"(.*?)(?=\b(?:{_ALL_HEADS})\s*[:：]|\Z)"
    )
    m = re.search(pattern, text)
    return m.group(1).strip() if m else None


def _split_charges(segment: str) -> list[str]:
    out = []
    for raw in re.split(r"[;；,，、\n]", segment):
        name = raw.strip().strip(".;,。")
        if name:
            out.append(name)
    return out


def parse_prediction(text: str, scheme: IntervalScheme, want_term: bool) -> Prediction:
    charges_seg = _extract_section(text, "charges")
    if charges_seg is None:
        m = re.search(r"(?i)(?:charged with|guilty of)\s+(.+?)(?:[.\n]|$)", text)
        charges_seg = m.group(1) if m else None
    charges = _split_charges(charges_seg) if charges_seg else []
    if not charges:
        raise ChainParseError("no charges found in final answer", raw=text)
    articles_seg = _extract_section(text, "articles")
    articles = frozenset(int(n) for n in re.findall(r"\d+", articles_seg)) if articles_seg else frozenset()
    term_interval = None
    if want_term:
        term_seg = _extract_section(text, "term")
        if term_seg:
            term_interval = parse_term_statement(term_seg, scheme)
    return Prediction(
        charges=frozenset(charges),
        articles=articles,
        term_interval=term_interval,
        raw_trace=text,
    )


@dataclass(frozen=True)
class ChainMode:
    """Which steps run and where candidates come from.

    ``adapt_refine`` carries an external per-record candidate list keyed by
    ``(case_id, defendant)``; no other mode takes one.
    """

    kind: str
    candidate_source: Mapping[tuple[str, str], Sequence[str]] | None = None

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ValueError(f"unknown chain mode {self.kind!r}")
        if self.kind == "adapt_refine" and self.candidate_source is None:
            raise ValueError("adapt_refine needs a candidate source")
        if self.kind != "adapt_refine" and self.candidate_source is not None:
            raise ValueError(f"mode {self.kind!r} must not carry a candidate source")

    @property
    def steps(self) -> tuple[str, ...]:
        return _MODE_STEPS[self.kind]

    def step_count(self, sentencing_turn: bool = False) -> int:
        return len(self.steps) + (1 if sentencing_turn else 0)


@dataclass(frozen=True)
class ChainConfig:
    k: int = 5
    predict_term: bool = True
    sentencing_turn: bool = False
    discriminate_articles: bool = False
    max_output_tokens: int = 1024
    max_fact_chars: int | None = None


@dataclass(frozen=True)
class StepRecord:
    step: str
    prompt: str
    response: str | None
    finish_reason: str
    elapsed_ms: float


@dataclass(frozen=True)
class ChainResult:
    case_id: str
    defendant: str
    mode: str
    ask: AskSummary | None
    discrimination: DiscriminationRecord | None
    prediction: Prediction
    log: tuple[StepRecord, ...]
    sentencing_refused: bool = False


def truncate_fact(fact: str, budget: int) -> str:
    """Head+tail truncation for context-limited backends."""
    if len(fact) <= budget:
        return fact
    head = budget // 2
    tail = budget - head
    return fact[:head] + "\n...\n" + fact[-tail:]


class ChainRunner:
    """Executes reasoning chains against a gateway with fixed templates.

    With a scripted backend and greedy decoding every public method is a pure
    function of its inputs; distinct (case, defendant) pairs can run on
    separate threads.
    """

    def __init__(
        self,
        gateway: LlmGateway,
        model_id: str,
        scheme: IntervalScheme | None = None,
        templates: TemplateSet | None = None,
        config: ChainConfig | None = None,
    ):
        self.gateway = gateway
        self.model_id = model_id
        self.scheme = scheme or IntervalScheme.default()
        self.templates = templates or TemplateSet.packaged()
        self.config = config or ChainConfig()

    def _fact(self, fact: str) -> str:
        if self.config.max_fact_chars is not None:
            return truncate_fact(fact, self.config.max_fact_chars)
        return fact

    def _generate(self, step: str, prompt: str) -> tuple[str, StepRecord]:
        request = ChatRequest(
            model_id=self.model_id,
            messages=(Message("user", prompt),),
            decoding=Decoding(greedy=True, max_output_tokens=self.config.max_output_tokens),
        )
        start = time.perf_counter()
        response = self.gateway.complete(request)
        elapsed = (time.perf_counter() - start) * 1000.0
        record = StepRecord(
            step=step,
            prompt=prompt,
            response=response.content,
            finish_reason=response.finish_reason,
            elapsed_ms=elapsed,
        )
        if response.finish_reason == "refusal":
            raise StepRefusal(step, record)
        if response.content is None:
            raise BackendErrorResponse(step, record)
        return response.content, record

    @property
    def _article_request(self) -> str:
        if self.config.discriminate_articles:
            return (
                "\nAlso mention the law articles most relevant to each candidate "
                "in its analysis."
            )
        return ""

    @property
    def _term_request(self) -> str:
        if self.config.predict_term and not self.config.sentencing_turn:
            return '\nTerm: <sentencing range for this defendant, for example "13 to 24 months">'
        return ""

    def run_ask(self, fact: str, defendant: str) -> tuple[AskSummary, StepRecord]:
        prompt = self.templates.render(
            "chain/adapt/ask", fact=self._fact(fact), defendant=defendant
        )
        text, record = self._generate("ask", prompt)
        return AskSummary.parse(text), record

    def run_discriminate(
        self, fact: str, defendant: str, ask: AskSummary | None, k: int | None = None
    ) -> tuple[DiscriminationRecord, StepRecord]:
        k = k if k is not None else self.config.k
        if k < 1:
            raise ValueError("k must be >= 1")
        if ask is not None:
            prompt = self.templates.render(
                "chain/adapt/discriminate",
                fact=self._fact(fact),
                defendant=defendant,
                ask=ask.render(),
                k=str(k),
                article_request=self._article_request,
            )
        else:
            prompt = self.templates.render(
                "chain/adapt_wo_ask/discriminate",
                fact=self._fact(fact),
                defendant=defendant,
                k=str(k),
                article_request=self._article_request,
            )
        text, record = self._generate("discriminate", prompt)
        return DiscriminationRecord.parse(text, k=k), record

    def run_predict(
        self,
        fact: str,
        defendant: str,
        ask: AskSummary | None,
        disc: DiscriminationRecord | None,
        mode: ChainMode,
        refine_candidates: Sequence[str] | None = None,
    ) -> tuple[Prediction, StepRecord]:
        kind = mode.kind
        fields = {
            "fact": self._fact(fact),
            "defendant": defendant,
            "term_request": self._term_request,
        }
        if kind == "adapt":
            if ask is None or disc is None:
                raise ValueError("adapt predict needs both ask and discrimination")
            fields.update(ask=ask.render(), discrimination=disc.render())
            template = "chain/adapt/predict"
        elif kind == "adapt_wo_ask":
            if disc is None:
                raise ValueError("adapt_wo_ask predict needs a discrimination record")
            fields.update(discrimination=disc.render())
            template = "chain/adapt_wo_ask/predict"
        elif kind == "adapt_wo_disc":
            if ask is None:
                raise ValueError("adapt_wo_disc predict needs an ask summary")
            fields.update(ask=ask.render())
            template = "chain/adapt_wo_disc/predict"
        elif kind == "adapt_refine":
            if not refine_candidates:
                raise ValueError("adapt_refine predict needs external candidates")
            fields.update(candidates="\n".join(f"- {c}" for c in refine_candidates))
            template = "chain/adapt_refine/predict"
        elif kind in ("direct", "cot"):
            if ask is not None or disc is not None:
                raise ValueError(f"{kind} predict takes no prior reasoning context")
            template = f"chain/{kind}/predict"
        else:  # pragma: no cover - exhaustive over MODE_KINDS
            raise ValueError(kind)
        prompt = self.templates.render(template, **fields)
        text, record = self._generate("predict", prompt)
        want_term = self.config.predict_term and not self.config.sentencing_turn
        return parse_prediction(text, self.scheme, want_term=want_term), record

    def _run_sentencing_turn(
        self, fact: str, defendant: str, prediction: Prediction
    ) -> tuple[int | None, StepRecord, bool]:
        prompt = self.templates.render(
            "chain/sentencing",
            fact=self._fact(fact),
            defendant=defendant,
            charges="; ".join(sorted(prediction.charges)),
        )
        try:
            text, record = self._generate("sentencing", prompt)
        except StepRefusal as refusal:
            return None, refusal.record, True
        return parse_term_statement(text, self.scheme), record, False

    def run_chain(self, case: Case, defendant: str, mode: ChainMode) -> ChainResult:
        case.defendant(defendant)  # raises KeyError if absent
        fact = case.fact
        log: list[StepRecord] = []
        ask: AskSummary | None = None
        disc: DiscriminationRecord | None = None

        def run_step(step: str, fn):
            try:
                value, record = fn()
            except (StepRefusal, BackendErrorResponse) as exc:
                if exc.record is not None:
                    log.append(exc.record)
                raise ChainStepError(step, case.case_id, defendant, exc) from exc
            except (ChainParseError, ValueError) as exc:
                raise ChainStepError(step, case.case_id, defendant, exc) from exc
            log.append(record)
            return value

        if "ask" in mode.steps:
            ask = run_step("ask", lambda: self.run_ask(fact, defendant))
        if "discriminate" in mode.steps:
            disc_ask = ask if mode.kind == "adapt" else None
            disc = run_step(
                "discriminate",
                lambda: self.run_discriminate(fact, defendant, disc_ask),
            )
        refine = None
        if mode.kind == "adapt_refine":
            key = (case.case_id, defendant)
            if key not in mode.candidate_source:
                raise ChainStepError(
                    "predict", case.case_id, defendant,
                    ChainError(f"no refine candidates for {key!r}"),
                )
            refine = mode.candidate_source[key]
        predict_ask = ask if mode.kind in ("adapt", "adapt_wo_disc") else None
        predict_disc = disc if mode.kind in ("adapt", "adapt_wo_ask") else None
        prediction = run_step(
            "predict",
            lambda: self.run_predict(fact, defendant, predict_ask, predict_disc, mode, refine),
        )
        sentencing_refused = False
        if self.config.sentencing_turn:
            interval, record, sentencing_refused = self._run_sentencing_turn(
                fact, defendant, prediction
            )
            log.append(record)
            if interval is not None:
                prediction = replace(prediction, term_interval=interval)
        return ChainResult(
            case_id=case.case_id,
            defendant=defendant,
            mode=mode.kind,
            ask=ask,
            discrimination=disc,
            prediction=prediction,
            log=tuple(log),
            sentencing_refused=sentencing_refused,
        )
