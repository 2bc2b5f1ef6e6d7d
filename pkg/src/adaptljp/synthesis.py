"""Five-task training-mixture synthesis from a teacher backend.

The teacher sees the gold labels as grounding context so its reasoning
trajectories come out reliable; the emitted student-facing instructions never
do. Each sample gets one re-prompt on a validation failure, then is skipped
with a logged reason so large synthesis runs stay bounded and auditable.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .chain import (
    AskSummary,
    ChainParseError,
    DiscriminationRecord,
    StepRefusal,
    TemplateSet,
)
from .corpus import (
    Case,
    DefendantJudgment,
    IntervalScheme,
    LabelPool,
    bucket_term,
    parse_term_statement,
    term_interval_label,
)
from .gateway import (
    AuthenticationError,
    BackendError,
    ChatRequest,
    Decoding,
    LlmGateway,
    Message,
)

TASK_KINDS = ("ask", "discriminate", "sentencing", "article", "predict_all")

RETRY_NOTE = (
    "Your previous answer did not satisfy the required format or content. "
    "Answer again, following the instructions exactly."
)


class SynthesisError(Exception):
    """Base error for trajectory synthesis; message is the skip reason."""


class TargetParseError(SynthesisError):
    pass


class ConsistencyError(SynthesisError):
    pass


class RecitationError(SynthesisError):
    pass


class LeakageError(SynthesisError):
    pass


class MissingPrerequisiteError(SynthesisError):
    pass


class TeacherRefusalError(SynthesisError):
    pass


class TeacherBackendError(SynthesisError):
    """Teacher backend failed past the gateway's retries; sample skipped."""


@dataclass(frozen=True)
class TrajectorySample:
    """One instruction-tuning example: what the student sees and must emit."""

    task: str
    case_id: str
    defendant: str
    instruction: str
    target: str
    provenance: Mapping[str, object]

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task!r}")
        if not self.instruction.strip() or not self.target.strip():
            raise ValueError("instruction and target must be non-empty")

    def as_obj(self) -> dict:
        return {
            "task": self.task,
            "case_id": self.case_id,
            "defendant": self.defendant,
            "instruction": self.instruction,
            "target": self.target,
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "TrajectorySample":
        return cls(
            task=obj["task"],
            case_id=obj["case_id"],
            defendant=obj["defendant"],
            instruction=obj["instruction"],
            target=obj["target"],
            provenance=obj.get("provenance", {}),
        )


@dataclass(frozen=True)
class TrainingMixture:
    samples: tuple[TrajectorySample, ...]
    seed: int | None = None

    def task_counts(self) -> dict[str, int]:
        counts = {task: 0 for task in TASK_KINDS}
        for sample in self.samples:
            counts[sample.task] += 1
        return counts


@dataclass(frozen=True)
class SkipRecord:
    task: str
    case_id: str
    defendant: str
    reason: str

    def as_obj(self) -> dict:
        return {
            "task": self.task,
            "case_id": self.case_id,
            "defendant": self.defendant,
            "reason": self.reason,
        }


def _gold_charge_text(gold: DefendantJudgment) -> str:
    return "; ".join(sorted(gold.charges))


def _gold_article_text(gold: DefendantJudgment) -> str:
    return ", ".join(str(a) for a in sorted(gold.articles))


def find_leaks(text: str, gold: DefendantJudgment) -> list[str]:
    """Gold labels appearing in a student-facing instruction. Charge names
    match as case-insensitive substrings; article numbers as standalone
    numeric tokens."""
    hits = []
    lowered = text.casefold()
    for charge in sorted(gold.charges):
        if charge.casefold() in lowered:
            hits.append(f"charge:{charge}")
    for number in sorted(gold.articles):
        if re.search(rf"(?<!\d){number}(?!\d)", text):
            hits.append(f"article:{number}")
    return hits


class TrajectorySynthesizer:
    """Builds the five task-specific sample kinds for (case, defendant) pairs."""

    def __init__(
        self,
        gateway: LlmGateway,
        teacher_model_id: str,
        pool: LabelPool,
        scheme: IntervalScheme | None = None,
        templates: TemplateSet | None = None,
        *,
        k: int = 5,
        strict_sentencing_input: bool = False,
        max_output_tokens: int = 1024,
    ):
        self.gateway = gateway
        self.teacher_model_id = teacher_model_id
        self.pool = pool
        self.scheme = scheme or IntervalScheme.default()
        self.templates = templates or TemplateSet.packaged()
        self.k = k
        self.strict_sentencing_input = strict_sentencing_input
        self.max_output_tokens = max_output_tokens
        self.skips: list[SkipRecord] = []
        self.retries = 0

    # -- teacher plumbing --

    def _teacher_call(self, prompt: str, validate):
        """One teacher generation with a single re-prompt on failure.

        ``validate`` maps raw text to the sample target or raises a
        SynthesisError subclass. The re-prompt extends the conversation with
        the failed answer and a correction note so the retried request is a
        distinct (cacheable) request.
        """
        messages = [Message("user", prompt)]
        last_error: SynthesisError | None = None
        for attempt in range(2):
            if attempt == 1:
                self.retries += 1
            try:
                response = self.gateway.complete(
                    ChatRequest(
                        model_id=self.teacher_model_id,
                        messages=tuple(messages),
                        decoding=Decoding(greedy=True, max_output_tokens=self.max_output_tokens),
                    )
                )
            except AuthenticationError:
                raise  # credentials problem: every sample would fail the same way
            except BackendError as exc:
                raise TeacherBackendError(f"teacher backend failure: {exc}") from exc
            if response.finish_reason == "refusal" or response.content is None:
                last_error = TeacherRefusalError("teacher refused")
                messages.append(Message("assistant", "(refused)"))
                messages.append(Message("user", RETRY_NOTE))
                continue
            try:
                return validate(response.content)
            except SynthesisError as exc:
                last_error = exc
                messages.append(Message("assistant", response.content))
                messages.append(Message("user", RETRY_NOTE))
        raise last_error

    def _provenance(self, context_labels: Sequence[str]) -> dict:
        return {
            "teacher_model": self.teacher_model_id,
            "context_labels": list(context_labels),
        }

    def _check_instruction(self, instruction: str, gold: DefendantJudgment) -> None:
        hits = find_leaks(instruction, gold)
        if hits:
            raise LeakageError(f"gold labels leaked into instruction: {hits}")

    # -- the five tasks --

    def synth_ask(self, case: Case, defendant: str) -> TrajectorySample:
        gold = case.defendant(defendant)
        teacher_prompt = self.templates.render(
            "teacher/ask",
            fact=case.fact,
            defendant=defendant,
            gold_charges=_gold_charge_text(gold),
            gold_articles=_gold_article_text(gold),
        )

        def validate(text: str) -> str:
            try:
                summary = AskSummary.parse(text)
            except ChainParseError as exc:
                raise TargetParseError(f"ask target unparseable: {exc}") from exc
            if summary.degraded:
                raise TargetParseError("ask target missing aspect sections")
            target = summary.render()
            leaks = find_leaks(target, gold)
            if leaks:
                # A charge name inside the summary would leak into the
                # discriminate instruction downstream.
                raise LeakageError(f"ask target names gold labels: {leaks}")
            return target

        target = self._teacher_call(teacher_prompt, validate)
        instruction = self.templates.render(
            "chain/adapt/ask", fact=case.fact, defendant=defendant
        )
        self._check_instruction(instruction, gold)
        return TrajectorySample(
            task="ask",
            case_id=case.case_id,
            defendant=defendant,
            instruction=instruction,
            target=target,
            provenance=self._provenance(["charges", "articles"]),
        )

    def synth_discriminate(
        self, case: Case, defendant: str, ask_target: str
    ) -> TrajectorySample:
        if not ask_target.strip():
            raise MissingPrerequisiteError("discriminate needs the ask target")
        gold = case.defendant(defendant)
        teacher_prompt = self.templates.render(
            "teacher/discriminate",
            fact=case.fact,
            defendant=defendant,
            ask=ask_target,
            gold_charges=_gold_charge_text(gold),
            k=str(self.k),
        )

        def validate(text: str) -> str:
            try:
                record = DiscriminationRecord.parse(text, k=self.k)
            except ChainParseError as exc:
                raise TargetParseError(f"discriminate target unparseable: {exc}") from exc
            names = set(record.charge_names())
            missing = sorted(gold.charges - names)
            if missing:
                raise ConsistencyError(f"gold charges absent from candidates: {missing}")
            return record.render()

        target = self._teacher_call(teacher_prompt, validate)
        instruction = self.templates.render(
            "chain/adapt/discriminate",
            fact=case.fact,
            defendant=defendant,
            ask=ask_target,
            k=str(self.k),
            article_request="",
        )
        self._check_instruction(instruction, gold)
        return TrajectorySample(
            task="discriminate",
            case_id=case.case_id,
            defendant=defendant,
            instruction=instruction,
            target=target,
            provenance=self._provenance(["charges"]),
        )

    def gold_range_label(self, gold: DefendantJudgment) -> str:
        return term_interval_label(bucket_term(gold.term, self.scheme), self.scheme)

    def synth_sentencing(self, case: Case, defendant: str) -> TrajectorySample:
        gold = case.defendant(defendant)
        gold_index = bucket_term(gold.term, self.scheme)
        gold_range = term_interval_label(gold_index, self.scheme)
        teacher_prompt = self.templates.render(
            "teacher/sentencing",
            fact=case.fact,
            defendant=defendant,
            charges=_gold_charge_text(gold),
            gold_articles=_gold_article_text(gold),
            gold_range=gold_range,
        )

        def validate(text: str) -> str:
            m = None
            for m in re.finditer(r"(?im)^\s*sentencing\s+range\s*[:：]\s*(.+)$", text):
                pass
            if m is None:
                raise TargetParseError("sentencing target has no range statement")
            tail = text[m.end():].strip()
            if tail:
                raise TargetParseError("sentencing target does not end with the range statement")
            parsed = parse_term_statement(m.group(1), self.scheme)
            if parsed != gold_index:
                raise ConsistencyError(
                    f"range statement maps to interval {parsed}, gold is {gold_index}"
                )
            return text.strip()

        target = self._teacher_call(teacher_prompt, validate)
        # The stated task input is the charge set alone, but sentencing
        # factors live in the fact; include it unless strict mode is on.
        fact_section = (
            "" if self.strict_sentencing_input else f"Case facts:\n{case.fact}\n\n"
        )
        instruction = self.templates.render(
            "instruct/sentencing",
            fact_section=fact_section,
            defendant=defendant,
            charges=_gold_charge_text(gold),
        )
        return TrajectorySample(
            task="sentencing",
            case_id=case.case_id,
            defendant=defendant,
            instruction=instruction,
            target=target,
            provenance=self._provenance(["charges", "articles", "sentencing_range"]),
        )

    def synth_article(self, case: Case, defendant: str, article_number: int) -> TrajectorySample:
        gold = case.defendant(defendant)
        if article_number not in gold.articles:
            raise MissingPrerequisiteError(
                f"article {article_number} is not a gold article for {defendant!r}"
            )
        article_text = self.pool.articles.get(article_number, "")
        if not article_text:
            raise SynthesisError(f"no statute text for article {article_number}")
        teacher_prompt = self.templates.render(
            "teacher/article",
            fact=case.fact,
            defendant=defendant,
            article_number=str(article_number),
            article_text=article_text,
        )

        def squash(s: str) -> str:
            return " ".join(s.split())

        def validate(text: str) -> str:
            if squash(article_text) not in squash(text):
                raise RecitationError(
                    f"article {article_number} text not recited verbatim"
                )
            return text.strip()

        target = self._teacher_call(teacher_prompt, validate)
        instruction = self.templates.render(
            "instruct/article",
            fact=case.fact,
            defendant=defendant,
            article_number=str(article_number),
        )
        return TrajectorySample(
            task="article",
            case_id=case.case_id,
            defendant=defendant,
            instruction=instruction,
            target=target,
            provenance=self._provenance(["articles"]),
        )

    def assemble_predict_all(
        self, case: Case, defendant: str, ask_target: str, disc_target: str
    ) -> TrajectorySample:
        if not ask_target.strip() or not disc_target.strip():
            raise MissingPrerequisiteError("predict_all needs ask and discriminate targets")
        gold = case.defendant(defendant)
        final = (
            "Final judgment:\n"
            f"Charges: {_gold_charge_text(gold)}\n"
            f"Articles: {_gold_article_text(gold)}\n"
            f"Sentencing range: {self.gold_range_label(gold)}"
        )
        target = f"{ask_target}\n\n{disc_target}\n\n{final}"
        instruction = self.templates.render(
            "instruct/predict_all", fact=case.fact, defendant=defendant
        )
        return TrajectorySample(
            task="predict_all",
            case_id=case.case_id,
            defendant=defendant,
            instruction=instruction,
            target=target,
            provenance=self._provenance(["charges", "articles", "sentencing_range"]),
        )

    # -- per-case driver --

    def synthesize_case(self, case: Case) -> list[TrajectorySample]:
        """All feasible samples for every defendant; failures become skip
        records instead of aborting the run."""
        samples: list[TrajectorySample] = []
        for d in case.defendants:
            ask_target = disc_target = None
            try:
                sample = self.synth_ask(case, d.name)
                samples.append(sample)
                ask_target = sample.target
            except SynthesisError as exc:
                self.skips.append(SkipRecord("ask", case.case_id, d.name, str(exc)))
            if ask_target is not None:
                try:
                    sample = self.synth_discriminate(case, d.name, ask_target)
                    samples.append(sample)
                    disc_target = sample.target
                except SynthesisError as exc:
                    self.skips.append(
                        SkipRecord("discriminate", case.case_id, d.name, str(exc))
                    )
            else:
                self.skips.append(
                    SkipRecord("discriminate", case.case_id, d.name, "no ask target")
                )
            try:
                samples.append(self.synth_sentencing(case, d.name))
            except SynthesisError as exc:
                self.skips.append(SkipRecord("sentencing", case.case_id, d.name, str(exc)))
            for article_number in sorted(d.articles):
                try:
                    samples.append(self.synth_article(case, d.name, article_number))
                except SynthesisError as exc:
                    self.skips.append(
                        SkipRecord("article", case.case_id, d.name, str(exc))
                    )
            if ask_target is not None and disc_target is not None:
                samples.append(
                    self.assemble_predict_all(case, d.name, ask_target, disc_target)
                )
            else:
                self.skips.append(
                    SkipRecord(
                        "predict_all", case.case_id, d.name, "missing prerequisite targets"
                    )
                )
        return samples


def _selection_rank(sample: TrajectorySample) -> str:
    ident = "\x00".join(
        (sample.task, sample.case_id, sample.defendant, sample.instruction, sample.target)
    )
    return hashlib.sha256(ident.encode("utf-8")).hexdigest()


def build_mixture(samples: Sequence[TrajectorySample], seed: int) -> TrainingMixture:
    """Equal-mix the tasks and shuffle deterministically.

    Per-task counts are equalized by downsampling to the minimum task count.
    Selection ranks samples by a content hash, so which samples survive does
    not depend on the seed (reruns with a new seed keep the same per-task
    multiset); the seed drives only the emission order.
    """
    by_task: dict[str, list[TrajectorySample]] = {task: [] for task in TASK_KINDS}
    for sample in samples:
        by_task[sample.task].append(sample)
    for task in TASK_KINDS:
        if not by_task[task]:
            raise SynthesisError(f"cannot build mixture: no samples for task {task!r}")
    minimum = min(len(group) for group in by_task.values())
    selected: list[TrajectorySample] = []
    for task in TASK_KINDS:
        ranked = sorted(by_task[task], key=_selection_rank)
        selected.extend(ranked[:minimum])
    selected.sort(key=_selection_rank)
    random.Random(seed).shuffle(selected)
    return TrainingMixture(samples=tuple(selected), seed=seed)


def emit_jsonl(mixture: TrainingMixture, path: Path | str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for sample in mixture.samples:
            handle.write(json.dumps(sample.as_obj(), ensure_ascii=False, sort_keys=True))
            handle.write("\n")


def load_mixture(path: Path | str, seed: int | None = None) -> TrainingMixture:
    samples = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                samples.append(TrajectorySample.from_obj(json.loads(line)))
    return TrainingMixture(samples=tuple(samples), seed=seed)


def scan_mixture_leakage(
    samples: Iterable[TrajectorySample], golds: Mapping[tuple[str, str], DefendantJudgment]
) -> list[dict]:
    """Grep-style scan: gold labels must never appear in ask/discriminate
    instructions. Returns one record per hit."""
    hits = []
    for sample in samples:
        if sample.task not in ("ask", "discriminate"):
            continue
        gold = golds.get((sample.case_id, sample.defendant))
        if gold is None:
            continue
        for hit in find_leaks(sample.instruction, gold):
            hits.append(
                {
                    "task": sample.task,
                    "case_id": sample.case_id,
                    "defendant": sample.defendant,
                    "leak": hit,
                }
            )
    return hits
