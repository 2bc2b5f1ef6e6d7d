"""Configuration-driven command line for reproducible pipeline runs.

Every command reads one JSON config (flags override individual fields),
writes its primary outputs plus a manifest sufficient to reproduce the run
(config hash, seed, template hashes, model ids), and degrades per record:
a single bad case logs an error instead of killing a corpus-sized run.

Exit codes: 0 success, 1 config/input error, 2 per-record error rate above
the configured threshold.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import json
import random
import sys
from dataclasses import dataclass
from pathlib import Path

import click

from . import chain as chain_mod
from . import corpus as corpus_mod
from . import metrics as metrics_mod
from . import synthesis as synthesis_mod
from .gateway import (
    AuthenticationError,
    HashEmbeddingBackend,
    HttpChatBackend,
    HttpEmbeddingBackend,
    LlmGateway,
    ScriptedChatBackend,
    ScriptedEmbeddingBackend,
)
from .labelmap import ChargeMapper, LabelMappingError, map_article


class ConfigError(Exception):
    pass


@dataclass
class BackendConfig:
    backend: str = "scripted"  # scripted | http | hash (embedder only)
    model_id: str = "scripted"
    fixtures: str | None = None
    endpoint: str | None = None
    api_key_env: str = "ADAPTLJP_API_KEY"
    dimension: int = 16
    timeout: float = 60.0


@dataclass
class RunConfig:
    dataset: str | None = None
    label_pool: str | None = None
    interval_scheme: str | None = None
    mode: str = "adapt"
    k: int = 5
    predict_term: bool = True
    sentencing_turn: bool = False
    refine_candidates: str | None = None
    templates_dir: str | None = None
    concurrency: int = 1
    seed: int = 0
    output_dir: str = "run_out"
    cache_dir: str | None = None
    error_rate_threshold: float = 0.25
    sample_cases: int | None = None
    strict_sentencing_input: bool = False
    max_output_tokens: int = 1024
    max_fact_chars: int | None = None
    generator: BackendConfig = dataclasses.field(default_factory=BackendConfig)
    teacher: BackendConfig = dataclasses.field(default_factory=BackendConfig)
    embedder: BackendConfig = dataclasses.field(default_factory=BackendConfig)


def load_config(path: str | None, overrides: dict) -> RunConfig:
    obj: dict = {}
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for key, value in overrides.items():
        if value is not None:
            obj[key] = value
    backend_fields = {"generator", "teacher", "embedder"}
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    kwargs = {}
    for key, value in obj.items():
        if key in backend_fields:
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be an object")
            bad = set(value) - {f.name for f in dataclasses.fields(BackendConfig)}
            if bad:
                raise ConfigError(f"unknown {key} fields: {sorted(bad)}")
            kwargs[key] = BackendConfig(**value)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def config_hash(config: RunConfig) -> str:
    obj = dataclasses.asdict(config)
    canonical = json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _require(config: RunConfig, *names: str) -> None:
    for name in names:
        if getattr(config, name) is None:
            raise ConfigError(f"config field {name!r} is required for this command")
        path = Path(getattr(config, name))
        if not path.exists():
            raise ConfigError(f"{name} path does not exist: {path}")


def _chat_backend(bc: BackendConfig):
    if bc.backend == "scripted":
        if not bc.fixtures:
            raise ConfigError("scripted chat backend needs a fixtures path")
        return ScriptedChatBackend.from_path(bc.fixtures)
    if bc.backend == "http":
        if not bc.endpoint:
            raise ConfigError("http chat backend needs an endpoint")
        return HttpChatBackend(bc.endpoint, api_key_env=bc.api_key_env, timeout=bc.timeout)
    raise ConfigError(f"unknown chat backend kind {bc.backend!r}")


def _embedding_backend(bc: BackendConfig):
    if bc.backend == "scripted":
        if not bc.fixtures:
            raise ConfigError("scripted embedding backend needs a fixtures path")
        return ScriptedEmbeddingBackend.from_path(bc.fixtures)
    if bc.backend == "hash":
        return HashEmbeddingBackend(dimension=bc.dimension)
    if bc.backend == "http":
        if not bc.endpoint:
            raise ConfigError("http embedding backend needs an endpoint")
        return HttpEmbeddingBackend(
            bc.endpoint, bc.model_id, api_key_env=bc.api_key_env, timeout=bc.timeout
        )
    raise ConfigError(f"unknown embedding backend kind {bc.backend!r}")


def build_gateway(config: RunConfig, role: str) -> LlmGateway:
    chat_cfg = getattr(config, role)
    gateway = LlmGateway(
        chat_backend=_chat_backend(chat_cfg),
        embedding_backend=_embedding_backend(config.embedder),
        embed_model_id=config.embedder.model_id,
        cache_dir=config.cache_dir,
    )
    return gateway.with_concurrency(config.concurrency)


def _load_world(config: RunConfig):
    _require(config, "label_pool")
    pool = corpus_mod.LabelPool.load(config.label_pool)
    if config.interval_scheme is not None:
        scheme = corpus_mod.IntervalScheme.load(config.interval_scheme)
    else:
        scheme = corpus_mod.IntervalScheme.default()
    return pool, scheme


def _load_cases(config: RunConfig, pool) -> list:
    _require(config, "dataset")
    return corpus_mod.load_dataset(config.dataset, pool)


def _templates(config: RunConfig) -> chain_mod.TemplateSet:
    if config.templates_dir is not None:
        return chain_mod.TemplateSet.from_dir(config.templates_dir)
    return chain_mod.TemplateSet.packaged()


def _write_json(path: Path, obj) -> None:
    path.write_text(
        json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def _write_jsonl(path: Path, objs) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for obj in objs:
            handle.write(json.dumps(obj, ensure_ascii=False, sort_keys=True))
            handle.write("\n")


def _manifest(config: RunConfig, command: str, templates: chain_mod.TemplateSet,
              gateway: LlmGateway | None, extra: dict) -> dict:
    manifest = {
        "command": command,
        "config_sha256": config_hash(config),
        "seed": config.seed,
        "mode": config.mode,
        "k": config.k,
        "model_ids": {
            "generator": config.generator.model_id,
            "teacher": config.teacher.model_id,
            "embedder": config.embedder.model_id,
        },
        "template_sha256": templates.versions(),
    }
    if gateway is not None:
        manifest["gateway"] = gateway.stats.as_dict()
    manifest.update(extra)
    return manifest


def _load_refine_candidates(path: str) -> dict:
    source = {}
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            obj = json.loads(line)
            source[(obj["case_id"], obj["defendant"])] = list(obj["candidates"])
    return source


def _chain_mode(config: RunConfig) -> chain_mod.ChainMode:
    if config.mode == "adapt_refine":
        if config.refine_candidates is None:
            raise ConfigError("mode adapt_refine needs refine_candidates")
        return chain_mod.ChainMode(
            "adapt_refine", candidate_source=_load_refine_candidates(config.refine_candidates)
        )
    return chain_mod.ChainMode(config.mode)


CONFIG_OPTION = click.option("--config", "config_path", type=click.Path(), default=None,
                             help="JSON config file; flags override its fields.")


def _common_overrides(**kwargs) -> dict:
    return {k: v for k, v in kwargs.items() if v is not None}


@click.group()
def main():
    """Reasoning-chain pipeline for legal judgment prediction."""


def _fail_config(exc: Exception):
    click.echo(f"config error: {exc}", err=True)
    sys.exit(1)


@main.command()
@CONFIG_OPTION
@click.option("--dataset", type=click.Path(), default=None)
@click.option("--label-pool", "label_pool", type=click.Path(), default=None)
@click.option("--output-dir", "output_dir", type=click.Path(), default=None)
def ingest(config_path, dataset, label_pool, output_dir):
    """Validate a dataset and write its normalized form plus statistics."""
    try:
        config = load_config(config_path, _common_overrides(
            dataset=dataset, label_pool=label_pool, output_dir=output_dir))
        pool, scheme = _load_world(config)
        cases = _load_cases(config, pool)
    except (ConfigError, corpus_mod.CorpusError) as exc:
        _fail_config(exc)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus_mod.dump_dataset(cases, out / "cases.jsonl")
    stats = corpus_mod.dataset_stats(cases, pool)
    _write_json(out / "stats.json", stats.as_dict())
    templates = _templates(config)
    _write_json(out / "manifest.json", _manifest(
        config, "ingest", templates, None, {"counts": {"cases": len(cases)}}))
    click.echo(f"ingested {len(cases)} cases -> {out / 'cases.jsonl'}")


@main.command()
@CONFIG_OPTION
@click.option("--dataset", type=click.Path(), default=None)
@click.option("--label-pool", "label_pool", type=click.Path(), default=None)
def stats(config_path, dataset, label_pool):
    """Print dataset statistics as JSON."""
    try:
        config = load_config(config_path, _common_overrides(
            dataset=dataset, label_pool=label_pool))
        pool, _ = _load_world(config)
        cases = _load_cases(config, pool)
    except (ConfigError, corpus_mod.CorpusError) as exc:
        _fail_config(exc)
    report = corpus_mod.dataset_stats(cases, pool)
    click.echo(json.dumps(report.as_dict(), ensure_ascii=False, sort_keys=True, indent=2))


@main.command()
@CONFIG_OPTION
@click.option("--mode", type=click.Choice(chain_mod.MODE_KINDS), default=None)
@click.option("--k", type=int, default=None)
@click.option("--output-dir", "output_dir", type=click.Path(), default=None)
@click.option("--concurrency", type=int, default=None)
@click.option("--cache-dir", "cache_dir", type=click.Path(), default=None)
def infer(config_path, mode, k, output_dir, concurrency, cache_dir):
    """Run the reasoning chain over every (case, defendant) pair and write
    mapped prediction records."""
    try:
        config = load_config(config_path, _common_overrides(
            mode=mode, k=k, output_dir=output_dir,
            concurrency=concurrency, cache_dir=cache_dir))
        pool, scheme = _load_world(config)
        cases = _load_cases(config, pool)
        chain_mode = _chain_mode(config)
        gateway = build_gateway(config, "generator")
        templates = _templates(config)
    except (ConfigError, corpus_mod.CorpusError, OSError) as exc:
        _fail_config(exc)

    runner = chain_mod.ChainRunner(
        gateway,
        config.generator.model_id,
        scheme=scheme,
        templates=templates,
        config=chain_mod.ChainConfig(
            k=config.k,
            predict_term=config.predict_term,
            sentencing_turn=config.sentencing_turn,
            max_output_tokens=config.max_output_tokens,
            max_fact_chars=config.max_fact_chars,
        ),
    )
    mapper = ChargeMapper(pool, gateway)
    jobs = [(case, d.name) for case in cases for d in case.defendants]

    def run_one(job):
        case, defendant = job
        result = runner.run_chain(case, defendant, chain_mode)
        charges = frozenset(
            mapper.map_charge(c).mapped for c in result.prediction.charges
        )
        articles = set()
        dropped = []
        for number in sorted(result.prediction.articles):
            try:
                articles.add(map_article(str(number), pool))
            except LabelMappingError:
                dropped.append(number)
        record = metrics_mod.PredictionRecord(
            case_id=case.case_id,
            defendant=defendant,
            charges=charges,
            articles=frozenset(articles),
            term_interval=result.prediction.term_interval,
        )
        return record, result, dropped

    results: list = [None] * len(jobs)
    errors = []
    with concurrent.futures.ThreadPoolExecutor(max_workers=config.concurrency) as pool_exec:
        futures = {pool_exec.submit(run_one, job): i for i, job in enumerate(jobs)}
        for future in concurrent.futures.as_completed(futures):
            i = futures[future]
            case, defendant = jobs[i]
            try:
                results[i] = future.result()
            except Exception as exc:  # per-record degradation: log and continue
                step = getattr(exc, "step", None)
                errors.append(
                    {
                        "case_id": case.case_id,
                        "defendant": defendant,
                        "step": step,
                        "error": str(exc),
                    }
                )

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = [r[0] for r in results if r is not None]
    metrics_mod.write_predictions(records, out / "predictions.jsonl")
    chain_logs = []
    refusal_count = 0
    for r in results:
        if r is None:
            continue
        record, result, dropped = r
        refusal_count += 1 if result.sentencing_refused else 0
        chain_logs.append(
            {
                "case_id": result.case_id,
                "defendant": result.defendant,
                "mode": result.mode,
                "steps": [dataclasses.asdict(s) for s in result.log],
                "prediction": record.as_obj(),
                "dropped_articles": dropped,
                "sentencing_refused": result.sentencing_refused,
            }
        )
    _write_jsonl(out / "chain_log.jsonl", chain_logs)
    _write_jsonl(out / "errors.jsonl", errors)
    _write_jsonl(out / "mapping_audit.jsonl", [o.as_dict() for o in mapper.audit_log])
    error_rate = len(errors) / len(jobs) if jobs else 0.0
    _write_json(out / "manifest.json", _manifest(
        config, "infer", templates, gateway,
        {"counts": {
            "records": len(jobs),
            "predicted": len(records),
            "errors": len(errors),
            "sentencing_refusals": refusal_count,
        }},
    ))
    click.echo(
        f"infer: {len(records)}/{len(jobs)} records predicted, "
        f"{len(errors)} errors -> {out / 'predictions.jsonl'}"
    )
    if jobs and error_rate > config.error_rate_threshold:
        click.echo(
            f"error rate {error_rate:.3f} exceeds threshold "
            f"{config.error_rate_threshold}", err=True,
        )
        sys.exit(2)


@main.command()
@CONFIG_OPTION
@click.option("--output-dir", "output_dir", type=click.Path(), default=None)
@click.option("--sample-cases", "sample_cases", type=int, default=None)
@click.option("--seed", type=int, default=None)
def synthesize(config_path, output_dir, sample_cases, seed):
    """Generate the five-task instruction-tuning mixture from the teacher."""
    try:
        config = load_config(config_path, _common_overrides(
            output_dir=output_dir, sample_cases=sample_cases, seed=seed))
        pool, scheme = _load_world(config)
        cases = _load_cases(config, pool)
        gateway = build_gateway(config, "teacher")
        templates = _templates(config)
    except (ConfigError, corpus_mod.CorpusError, OSError) as exc:
        _fail_config(exc)

    if config.sample_cases is not None and config.sample_cases < len(cases):
        rng = random.Random(config.seed)
        picked = rng.sample(range(len(cases)), config.sample_cases)
        cases = [cases[i] for i in sorted(picked)]

    synthesizer = synthesis_mod.TrajectorySynthesizer(
        gateway,
        config.teacher.model_id,
        pool,
        scheme=scheme,
        templates=templates,
        k=config.k,
        strict_sentencing_input=config.strict_sentencing_input,
        max_output_tokens=config.max_output_tokens,
    )
    samples: list = []
    try:
        for case in cases:
            samples.extend(synthesizer.synthesize_case(case))
    except AuthenticationError as exc:
        _fail_config(exc)
    raw_counts = {t: 0 for t in synthesis_mod.TASK_KINDS}
    for s in samples:
        raw_counts[s.task] += 1
    try:
        mixture = synthesis_mod.build_mixture(samples, seed=config.seed)
    except synthesis_mod.SynthesisError as exc:
        _fail_config(exc)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    synthesis_mod.emit_jsonl(mixture, out / "mixture.jsonl")
    golds = {
        (case.case_id, d.name): d for case in cases for d in case.defendants
    }
    leaks = synthesis_mod.scan_mixture_leakage(mixture.samples, golds)
    _write_json(out / "synthesis_manifest.json", _manifest(
        config, "synthesize", templates, gateway,
        {
            "counts": {
                "cases": len(cases),
                "raw": raw_counts,
                "mixed": mixture.task_counts(),
                "total": len(mixture.samples),
            },
            "teacher_retries": synthesizer.retries,
            "skips": [s.as_obj() for s in synthesizer.skips],
            "leakage_hits": leaks,
        },
    ))
    click.echo(
        f"synthesize: {len(mixture.samples)} samples "
        f"({mixture.task_counts()}) -> {out / 'mixture.jsonl'}"
    )
    if leaks:
        click.echo(f"leakage scan found {len(leaks)} hits", err=True)
        sys.exit(2)


@main.command()
@CONFIG_OPTION
@click.option("--predictions", type=click.Path(), required=True)
@click.option("--reference-scores", "reference_scores", type=click.Path(), default=None)
@click.option("--full-universe", "full_universe", is_flag=True, default=False,
              help="Macro-average over the whole label pool instead of gold-occurring labels.")
@click.option("--output-dir", "output_dir", type=click.Path(), default=None)
def evaluate(config_path, predictions, reference_scores, full_universe, output_dir):
    """Score a predictions file against the gold dataset."""
    try:
        config = load_config(config_path, _common_overrides(output_dir=output_dir))
        pool, scheme = _load_world(config)
        cases = _load_cases(config, pool)
        preds = metrics_mod.read_predictions(predictions)
    except (ConfigError, corpus_mod.CorpusError, OSError, KeyError, json.JSONDecodeError) as exc:
        _fail_config(exc)
    golds = metrics_mod.gold_records_from_cases(cases, scheme)
    scores = None
    if reference_scores is not None:
        try:
            scores = json.loads(Path(reference_scores).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            _fail_config(exc)
    try:
        report = metrics_mod.evaluate_predictions(
            preds,
            golds,
            full_charge_universe=pool.charges if full_universe else None,
            full_article_universe=sorted(pool.articles) if full_universe else None,
            full_term_universe=range(11) if full_universe else None,
            reference_scores=scores,
        )
    except metrics_mod.EvaluationError as exc:
        _fail_config(exc)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report.as_dict())
    table = report.format_table()
    (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    click.echo(table)


@main.command()
@CONFIG_OPTION
@click.option("--predictions", type=click.Path(), required=True)
@click.option("--reference-scores", "reference_scores", type=click.Path(), required=True)
@click.option("--output-dir", "output_dir", type=click.Path(), default=None)
def quartiles(config_path, predictions, reference_scores, output_dir):
    """Difficulty-quartile breakdown of charge prediction."""
    try:
        config = load_config(config_path, _common_overrides(output_dir=output_dir))
        pool, scheme = _load_world(config)
        cases = _load_cases(config, pool)
        preds = metrics_mod.read_predictions(predictions)
        scores = json.loads(Path(reference_scores).read_text(encoding="utf-8"))
    except (ConfigError, corpus_mod.CorpusError, OSError, json.JSONDecodeError) as exc:
        _fail_config(exc)
    golds = metrics_mod.gold_records_from_cases(cases, scheme)
    gold_keys = {g.key for g in golds}
    charge_preds = {g.key: frozenset() for g in golds}
    for p in preds:
        if p.key in gold_keys:
            charge_preds[p.key] = p.charges
    charge_golds = {g.key: g.charges for g in golds}
    try:
        report = metrics_mod.difficulty_quartiles(scores, charge_preds, charge_golds)
    except metrics_mod.EvaluationError as exc:
        _fail_config(exc)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "quartiles.json", report.as_dict())
    for band in report.bands:
        click.echo(f"{band.label}: macro F1 {band.macro_f1:.4f} over {len(band.charges)} charges")


if __name__ == "__main__":
    main()
