"""Staged pipeline: judge -> seed -> synth -> goal -> flow -> dialogue -> complicate -> augment.

Every stage reads the previous stage's JSONL artifact from ``output_dir`` and
writes its own, plus ``summaries/<stage>.json``. Records carry provenance ids
(combo -> seed -> state -> flow/dialogue) so a resumed stage skips inputs
that already have output.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Literal, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import augment as aug
from .complicate import VARIANTS, assemble_labeled_dialogue, complicate_dialogue, LabeledDialogue
from .dialogue import (
    Dialogue, Flow, GenerationError, RetentionReport, UserGoal, generate_dialogue, generate_user_goal,
    plan_flow, validate_dialogue, validate_flow,
)
from .llm import (
    DEFAULT_DECODING, Backend, HttpBackend, LLMClient, LLMError, ReplayBackend, Stage, atomic_write,
)
from .planner import (
    DomainCombo, FilterResult, Judgment, RuleSet, SeedState, enumerate_combos, filter_seed_state,
    generate_seed_states, judge_combo,
)
from .schema import Database, Schema, load_database, load_schema
from .synth import DependencyCycle, DialogueState, Unsatisfiable, expand_seed
from .textnorm import Lexicon

log = logging.getLogger(__name__)

STAGES = ("judge", "seed", "synth", "goal", "flow", "dialogue", "complicate", "augment")

ARTIFACTS = {
    "judge": "judgments.jsonl",
    "seed": "seeds.jsonl",
    "synth": "states.jsonl",
    "goal": "goals.jsonl",
    "flow": "flows.jsonl",
    "dialogue": "dialogues.jsonl",
    "complicate": "labeled.jsonl",
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class PrerequisiteError(PipelineError):
    pass


class HttpSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4-turbo"
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 120.0
    max_tokens: Optional[int] = None


class Decoding(BaseModel):
    model_config = ConfigDict(extra="forbid")
    temperature: float = Field(ge=0.0, le=2.0)
    top_p: float = Field(gt=0.0, le=1.0)


def _default_decoding() -> dict[str, Decoding]:
    return {s.value: Decoding(temperature=t, top_p=p) for s, (t, p) in DEFAULT_DECODING.items()}


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int
    output_dir: Path
    schema_path: Optional[Path] = None
    db_dir: Optional[Path] = None
    lexicon_path: Optional[Path] = None
    backend: Literal["http", "replay"] = "replay"
    cassette_path: Optional[Path] = None
    cache_dir: Optional[Path] = None
    http: HttpSettings = Field(default_factory=HttpSettings)
    domains: Optional[list[str]] = None
    max_seeds_per_combo: Optional[int] = Field(default=None, ge=1)
    states_per_seed: int = Field(default=5, ge=1)
    db_retries: int = Field(default=10, ge=1)
    dontcare_prob: float = Field(default=0.05, ge=0.0, le=1.0)
    permute: bool = True
    permutation_cap: int = Field(default=aug.DEFAULT_PERMUTATION_CAP, ge=1)
    variant: Literal["easy", "difficult", "both"] = "both"
    none_marker: str = aug.NONE_MARKER
    split: str = "train"
    workers: int = Field(default=4, ge=1)
    max_retries: int = Field(default=4, ge=0)
    backoff_base: float = Field(default=1.0, ge=0.0)
    decoding: dict[str, Decoding] = Field(default_factory=_default_decoding)

    @field_validator("decoding")
    @classmethod
    def _fill_decoding(cls, value: dict[str, Decoding]) -> dict[str, Decoding]:
        unknown = set(value) - {s.value for s in Stage}
        if unknown:
            raise ValueError(f"unknown decoding stages {sorted(unknown)}")
        return {**_default_decoding(), **value}

    @model_validator(mode="after")
    def _check_backend(self) -> "PipelineConfig":
        if self.backend == "replay" and self.cassette_path is None:
            raise ValueError("the replay backend needs cassette_path")
        return self

    def decoding_table(self) -> dict[Stage, tuple[float, float]]:
        return {Stage(k): (v.temperature, v.top_p) for k, v in self.decoding.items()}

    def digest(self) -> str:
        """Hash of the settings that shape the data (paths of outputs and caches excluded)."""
        data = self.model_dump(mode="json", exclude={"output_dir", "cache_dir", "workers", "cassette_path"})
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path: str | Path, **overrides: Any) -> PipelineConfig:
    """Read a JSON config; relative paths resolve against the config file's directory."""
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    data.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("output_dir", "schema_path", "db_dir", "lexicon_path", "cassette_path", "cache_dir"):
        if data.get(key) and not Path(data[key]).is_absolute():
            data[key] = str((path.parent / data[key]).resolve())
    return PipelineConfig.model_validate(data)


# -- io helpers --------------------------------------------------------------


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    if not path.exists():
        return []
    with path.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path: Path, records: Iterable[dict[str, Any]]) -> None:
    atomic_write(path, "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in records))


def write_json(path: Path, data: Any) -> None:
    atomic_write(path, json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


class Context:
    """Loaded resources shared by stages of one run."""

    def __init__(self, config: PipelineConfig, backend: Backend | None = None, resume: bool = False):
        self.config = config
        self.resume = resume
        self.out = Path(config.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.schema: Schema = load_schema(config.schema_path)
        self.db: Database = load_database(self.schema, config.db_dir)
        self.lexicon = (Lexicon.from_dict(json.loads(Path(config.lexicon_path).read_text()))
                        if config.lexicon_path else Lexicon.default())
        self.decoding = config.decoding_table()
        self._backend = backend
        self._llm: LLMClient | None = None

    @property
    def llm(self) -> LLMClient:
        if self._llm is None:
            backend = self._backend or make_backend(self.config)
            cache = self.config.cache_dir or self.out / "cache"
            self._llm = LLMClient(backend, cache_dir=cache, max_retries=self.config.max_retries,
                                  backoff_base=self.config.backoff_base)
        return self._llm

    def path(self, stage: str) -> Path:
        return self.out / ARTIFACTS[stage]

    def require(self, stage: str, needed: str) -> list[dict[str, Any]]:
        p = self.path(needed)
        if not p.exists():
            raise PrerequisiteError(stage, f"missing {p.name}; run the {needed!r} stage first")
        return read_jsonl(p)

    def map(self, fn: Callable, items: Sequence) -> list:
        if self.config.workers <= 1 or len(items) <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            return list(pool.map(fn, items))


def make_backend(config: PipelineConfig) -> Backend:
    if config.backend == "replay":
        return ReplayBackend(config.cassette_path)  # type: ignore[arg-type]
    h = config.http
    return HttpBackend(h.base_url, h.model, h.api_key_env, h.timeout, h.max_tokens)


def _grouped(ctx: Context, stage: str, items: Sequence, key: Callable[[Any], str], group_field: str,
             work: Callable[[Any], list[dict[str, Any]]]) -> tuple[list[dict[str, Any]], int]:
    """Run ``work`` per input item, reusing earlier output when resuming.

    Output is written in input order regardless of worker scheduling. Returns
    the records and the number of inputs actually processed.
    """
    existing: dict[str, list[dict[str, Any]]] = {}
    if ctx.resume:
        for rec in read_jsonl(ctx.path(stage)):
            existing.setdefault(rec[group_field], []).append(rec)
    todo = [x for x in items if key(x) not in existing]
    try:
        fresh = dict(zip([key(x) for x in todo], ctx.map(work, todo)))
    except LLMError as exc:
        raise PipelineError(stage, str(exc)) from exc
    records = [r for x in items for r in (existing.get(key(x)) or fresh.get(key(x)) or [])]
    write_jsonl(ctx.path(stage), records)
    return records, len(todo)


def _summary(ctx: Context, stage: str, data: dict[str, Any]) -> dict[str, Any]:
    write_json(ctx.out / "summaries" / f"{stage}.json", data)
    return data


# -- stages ------------------------------------------------------------------


def stage_judge(ctx: Context) -> dict[str, Any]:
    domains = ctx.config.domains or ctx.schema.domain_names
    combos = enumerate_combos(domains)

    def work(combo: DomainCombo) -> list[dict[str, Any]]:
        return [judge_combo(ctx.llm, combo, ctx.schema, ctx.decoding).to_dict()]

    records, processed = _grouped(ctx, "judge", combos, lambda c: c.id, "combo_id", work)
    return _summary(ctx, "judge", {
        "combos": len(records),
        "reasonable": sum(r["is_reasonable"] and r["parsed"] for r in records),
        "unparseable": sum(not r["parsed"] for r in records),
        "processed": processed,
    })


def stage_seed(ctx: Context) -> dict[str, Any]:
    judgments = [Judgment.from_dict(r) for r in ctx.require("seed", "judge")]
    usable = [j for j in judgments if j.parsed and j.is_reasonable]
    rules = RuleSet()

    def work(j: Judgment) -> list[dict[str, Any]]:
        seeds = generate_seed_states(ctx.llm, j, ctx.schema, ctx.config.max_seeds_per_combo, ctx.decoding)
        return [filter_seed_state(s, ctx.schema, rules).to_dict() for s in seeds]

    records, processed = _grouped(ctx, "seed", usable, lambda j: j.combo.id, "combo_id", work)
    removed = Counter(rule for r in records for link in r["removed"] for rule in link["rules"])
    return _summary(ctx, "seed", {
        "combos": len(usable),
        "seeds": len(records),
        "rejected": sum(r["rejected"] for r in records),
        "flagged": sum(r["flagged"] for r in records),
        "removed_links": sum(len(r["removed"]) for r in records),
        "removed_by_rule": dict(sorted(removed.items())),
        "processed": processed,
    })


def stage_synth(ctx: Context) -> dict[str, Any]:
    seeds = [r for r in ctx.require("synth", "seed") if not r["rejected"]]
    cfg = ctx.config
    failures: dict[str, str] = {}

    def work(rec: dict[str, Any]) -> list[dict[str, Any]]:
        seed = SeedState.from_dict(rec)
        rng_seed = f"{cfg.seed}:{seed.seed_id}"
        try:
            states = expand_seed(seed, ctx.schema, ctx.db, cfg.states_per_seed, random.Random(rng_seed),
                                 retries=cfg.db_retries, dontcare_prob=cfg.dontcare_prob)
        except DependencyCycle as exc:
            failures[seed.seed_id] = f"cycle: {exc}"
            return []
        if not states:
            failures[seed.seed_id] = "unsatisfiable"
        return [{**s.to_dict(), "rng_seed": rng_seed} for s in states]

    records, processed = _grouped(ctx, "synth", seeds, lambda r: r["seed_id"], "seed_id", work)
    return _summary(ctx, "synth", {
        "seeds": len(seeds),
        "states": len(records),
        "failed_seeds": dict(sorted(failures.items())),
        "processed": processed,
    })


def stage_goal(ctx: Context) -> dict[str, Any]:
    states = [DialogueState.from_dict(r) for r in ctx.require("goal", "synth")]

    def work(st: DialogueState) -> list[dict[str, Any]]:
        try:
            goal = generate_user_goal(ctx.llm, st, ctx.decoding)
        except GenerationError as exc:
            return [{"state_id": st.state_id, "status": "rejected", "reason": str(exc), "text": ""}]
        return [{**goal.to_dict(), "status": "ok", "reason": ""}]

    records, processed = _grouped(ctx, "goal", states, lambda s: s.state_id, "state_id", work)
    return _summary(ctx, "goal", {
        "states": len(states),
        "goals": sum(r["status"] == "ok" for r in records),
        "rejected": sum(r["status"] != "ok" for r in records),
        "processed": processed,
    })


def _states_by_id(ctx: Context, stage: str) -> dict[str, DialogueState]:
    return {r["state_id"]: DialogueState.from_dict(r) for r in ctx.require(stage, "synth")}


def stage_flow(ctx: Context) -> dict[str, Any]:
    goals = [r for r in ctx.require("flow", "goal") if r["status"] == "ok"]
    states = _states_by_id(ctx, "flow")

    def work(rec: dict[str, Any]) -> list[dict[str, Any]]:
        st = states[rec["state_id"]]
        try:
            flow = plan_flow(ctx.llm, st, UserGoal(st.state_id, rec["text"]), st.entities, ctx.schema, ctx.decoding)
        except GenerationError as exc:
            return [{"flow_id": st.state_id, "state_id": st.state_id, "status": "unparseable",
                     "turns": [], "violations": [str(exc)]}]
        violations = validate_flow(flow, st)
        return [{**flow.to_dict(), "status": "ok" if not violations else "invalid",
                 "violations": [str(v) for v in violations]}]

    records, processed = _grouped(ctx, "flow", goals, lambda r: r["state_id"], "state_id", work)
    codes = Counter(v.split(" ")[0].split(":")[0] for r in records for v in r["violations"])
    return _summary(ctx, "flow", {
        "goals": len(goals),
        "valid": sum(r["status"] == "ok" for r in records),
        "invalid": sum(r["status"] == "invalid" for r in records),
        "unparseable": sum(r["status"] == "unparseable" for r in records),
        "violations": dict(sorted(codes.items())),
        "processed": processed,
    })


def stage_dialogue(ctx: Context) -> dict[str, Any]:
    flows = [r for r in ctx.require("dialogue", "flow") if r["status"] == "ok"]
    states = _states_by_id(ctx, "dialogue")

    def work(rec: dict[str, Any]) -> list[dict[str, Any]]:
        flow = Flow.from_dict(rec)
        st = states[flow.state_id]
        base = {"dialogue_id": flow.flow_id, "flow_id": flow.flow_id, "state_id": flow.state_id}
        try:
            d = generate_dialogue(ctx.llm, flow, st.entities, ctx.decoding)
        except GenerationError as exc:
            return [{**base, "status": "unparseable", "turns": [], "reasons": [str(exc)]}]
        check = validate_dialogue(d, flow, ctx.lexicon)
        return [{**d.to_dict(), "state_id": flow.state_id,
                 "status": "retained" if check.retained else "deleted",
                 "reasons": [str(v) for v in check.reasons]}]

    records, processed = _grouped(ctx, "dialogue", flows, lambda r: r["flow_id"], "flow_id", work)
    report = RetentionReport()
    for r in records:
        if r["status"] == "unparseable":
            report.add_unparseable()
        else:
            report.generated += 1
            if r["status"] == "retained":
                report.retained += 1
            else:
                for code in sorted({v.split(" ")[0].split(":")[0] for v in r["reasons"]}):
                    report.reasons[code] += 1
    write_json(ctx.out / "retention-report.json", report.to_dict())
    return _summary(ctx, "dialogue", {"flows": len(flows), **report.to_dict(), "processed": processed})


def stage_complicate(ctx: Context) -> dict[str, Any]:
    dialogues = [r for r in ctx.require("complicate", "dialogue") if r["status"] == "retained"]
    flows = {r["flow_id"]: Flow.from_dict(r) for r in ctx.require("complicate", "flow") if r["status"] == "ok"}
    states = _states_by_id(ctx, "complicate")
    variant = ctx.config.variant
    totals: Counter = Counter()

    def work(rec: dict[str, Any]) -> list[dict[str, Any]]:
        st = states[rec["state_id"]]
        easy = assemble_labeled_dialogue(Dialogue.from_dict(rec), flows[rec["flow_id"]], st.coref)
        if variant == "easy":
            return [easy.to_dict()]
        hard, stats = complicate_dialogue(ctx.llm, easy, ctx.lexicon, ctx.decoding)
        out = []
        if variant == "both":
            out.append({**easy.to_dict(), "complication": stats.to_dict()})
            if stats.rewritten:
                out.append({**hard.to_dict(), "complication": stats.to_dict()})
        else:
            out.append({**hard.to_dict(), "complication": stats.to_dict()})
        return out

    records, processed = _grouped(ctx, "complicate", dialogues, lambda r: r["state_id"], "state_id", work)
    seen_states: set[str] = set()
    for r in records:
        if "complication" in r and r["state_id"] not in seen_states:
            seen_states.add(r["state_id"])
            totals.update(r["complication"])
    return _summary(ctx, "complicate", {
        "retained_dialogues": len(dialogues),
        "variant": variant,
        "easy": sum(r["variant"] == "easy" for r in records),
        "difficult": sum(r["variant"] == "difficult" for r in records),
        "complication": dict(sorted(totals.items())),
        "processed": processed,
    })


def stage_augment(ctx: Context) -> dict[str, Any]:
    labeled = [LabeledDialogue.from_dict(r) for r in ctx.require("augment", "complicate")]
    cfg = ctx.config
    samples = aug.build_samples(labeled, ctx.schema, cfg.permute, cfg.permutation_cap, cfg.none_marker)
    if not samples:
        raise PipelineError("augment", "no labeled dialogues to export")
    retention = ctx.out / "retention-report.json"
    extra = {
        "dialogues": len(labeled),
        "variants": dict(sorted(Counter(ld.variant for ld in labeled).items())),
        "permute": cfg.permute,
        "permutation_cap": cfg.permutation_cap,
        "retention": json.loads(retention.read_text()) if retention.exists() else None,
    }
    result = aug.export_training(samples, ctx.out, cfg.split, cfg.digest(), extra)
    return _summary(ctx, "augment", {"dialogues": len(labeled), **result.counts})


STAGE_FUNCS: dict[str, Callable[[Context], dict[str, Any]]] = {
    "judge": stage_judge,
    "seed": stage_seed,
    "synth": stage_synth,
    "goal": stage_goal,
    "flow": stage_flow,
    "dialogue": stage_dialogue,
    "complicate": stage_complicate,
    "augment": stage_augment,
}


def run_stage(name: str, config: PipelineConfig, *, backend: Backend | None = None, resume: bool = False,
              context: Context | None = None) -> dict[str, Any]:
    if name not in STAGE_FUNCS:
        raise PipelineError(name, f"unknown stage; choose from {', '.join(STAGES)}")
    ctx = context or Context(config, backend, resume)
    log.info("stage %s", name)
    summary = STAGE_FUNCS[name](ctx)
    if ctx._llm is not None:
        s = ctx._llm.stats
        log.info("stage %s: %d backend calls, %d cache hits", name, s.backend_calls, s.cache_hits)
    return summary


def run_all(config: PipelineConfig, *, backend: Backend | None = None, resume: bool = False) -> Path:
    """Execute every stage in order; returns the output directory."""
    ctx = Context(config, backend, resume)
    summaries = {}
    for name in STAGES:
        summaries[name] = run_stage(name, config, context=ctx)
    write_json(ctx.out / "run-summary.json", summaries)
    return ctx.out
