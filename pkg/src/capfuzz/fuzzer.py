"""Feedback-guided test-case generation campaigns."""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import io
import csv
import json
import logging
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import yaml

from .agent import CAPABILITY_ORDER, Capability, EpisodeSettings, EpisodeTrace, reference_agent, run_episode
from .attribution import MAX_INTERVENTIONS, AttributionResult, attribute, repair
from .faults import FaultConfig, wrap_with_faults
from .instruction import (
    TaskInstruction,
    generate_instruction,
    instruction_to_dict,
    mutate,
    mutation_probability,
    with_case_id,
)
from .oracles import CapabilityError, OracleConfig, detect_errors
from .world import Scene, SceneParams, ViewConfig, generate_scene, scene_to_dict

log = logging.getLogger(__name__)

RECORD_FORMAT = "capfuzz-failure"
REPORT_FORMAT = "capfuzz-report"
FORMAT_VERSION = 1


class Variant(enum.Enum):
    FULL = "Full"
    NO_FOF = "NoFOF"
    NO_COF = "NoCOF"
    NO_FEEDBACK = "NoFeedback"
    RANDOM = "RandomBaseline"


class ConfigError(ValueError):
    """Invalid campaign configuration; ``key`` names the offending entry."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key:
            where += f" at {key}"
        if line is not None:
            where += f" (line {line})"
        super().__init__(message + where)
        self.key = key
        self.line = line


class CampaignError(RuntimeError):
    pass


def derive_seed(master: int, *parts: Any) -> int:
    text = "/".join(str(p) for p in (master, *parts)).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little") >> 1


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class CampaignConfig:
    budget: int = 300
    initial_corpus: int = 16
    variant: Variant = Variant.FULL
    master_seed: int = 0
    scene: SceneParams = SceneParams()
    faults: FaultConfig = FaultConfig()
    oracle: OracleConfig = OracleConfig()
    delta: float = 3.0
    t_max: int | None = None
    step_factor: float = 4.0
    step_floor: int = 40
    constraint_prob: float = 0.3
    corpus_cap: int = 512
    attribution_budget: int = MAX_INTERVENTIONS
    exhaustive_attribution: bool = False
    repair: bool = True

    def __post_init__(self):
        if self.budget < 0:
            raise ConfigError("budget must be non-negative", "budget")
        if self.initial_corpus < 1:
            raise ConfigError("initial corpus must be non-empty", "initial_corpus")
        if self.corpus_cap < self.initial_corpus:
            raise ConfigError("corpus_cap must hold the initial corpus", "corpus_cap")
        if self.attribution_budget < 1:
            raise ConfigError("attribution_budget must be positive", "attribution_budget")

    @property
    def settings(self) -> EpisodeSettings:
        return EpisodeSettings(self.delta, self.t_max, self.step_factor, self.step_floor, ViewConfig())

    def replace(self, **kw) -> "CampaignConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "initial_corpus": self.initial_corpus,
            "variant": self.variant.value,
            "master_seed": self.master_seed,
            "scene": dataclasses.asdict(self.scene),
            "faults": self.faults.to_dict(),
            "oracle": dataclasses.asdict(self.oracle),
            "delta": self.delta,
            "t_max": self.t_max,
            "step_factor": self.step_factor,
            "step_floor": self.step_floor,
            "constraint_prob": self.constraint_prob,
            "corpus_cap": self.corpus_cap,
            "attribution_budget": self.attribution_budget,
            "exhaustive_attribution": self.exhaustive_attribution,
            "repair": self.repair,
        }

    @classmethod
    def from_dict(cls, doc: Mapping, lines: Mapping[str, int] | None = None) -> "CampaignConfig":
        lines = lines or {}
        known = {f.name for f in dataclasses.fields(cls)}
        kw: dict = {}
        for key, val in doc.items():
            if key not in known:
                raise ConfigError("unknown configuration key", key, lines.get(key))
            try:
                if key == "variant":
                    kw[key] = Variant(val)
                elif key == "scene":
                    _check_keys(val, {f.name for f in dataclasses.fields(SceneParams)}, "scene", lines)
                    kw[key] = SceneParams(**val)
                elif key == "oracle":
                    _check_keys(val, {f.name for f in dataclasses.fields(OracleConfig)}, "oracle", lines)
                    kw[key] = OracleConfig(**{k: float(v) for k, v in val.items()})
                elif key == "faults":
                    kw[key] = FaultConfig.from_dict(val or {})
                elif key in ("budget", "initial_corpus", "master_seed", "step_floor", "corpus_cap",
                             "attribution_budget"):
                    kw[key] = _as_int(val)
                elif key == "t_max":
                    kw[key] = None if val is None else _as_int(val)
                elif key in ("delta", "step_factor", "constraint_prob"):
                    kw[key] = float(val)
                elif key in ("exhaustive_attribution", "repair"):
                    kw[key] = _as_bool(val)
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(str(exc), key, lines.get(key)) from None
        return cls(**kw)


def _check_keys(val, allowed: set[str], prefix: str, lines) -> None:
    if not isinstance(val, Mapping):
        raise ConfigError("expected a mapping", prefix, lines.get(prefix))
    for k in val:
        if k not in allowed:
            path = f"{prefix}.{k}"
            raise ConfigError("unknown configuration key", path, lines.get(path))


def _as_int(v) -> int:
    if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
        raise ValueError(f"expected an integer, got {v!r}")
    return int(v)


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("true", "yes", "1", "false", "no", "0"):
        return v.lower() in ("true", "yes", "1")
    raise ValueError(f"expected a boolean, got {v!r}")


def _key_lines(text: str) -> dict[str, int]:
    """Map dotted key paths of a YAML mapping document to 1-based line numbers."""
    out: dict[str, int] = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[path] = k.start_mark.line + 1
                walk(v, path)

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return out


def apply_overrides(doc: dict, overrides: Iterable[str]) -> dict:
    """Apply ``a.b=value`` overrides (values parsed as YAML scalars) to a config mapping."""
    doc = json.loads(json.dumps(doc))  # deep copy of plain data
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        path, raw = item.split("=", 1)
        keys = [k for k in path.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"override {item!r} has an empty key")
        node = doc
        for k in keys[:-1]:
            nxt = node.get(k)
            if nxt is None:
                nxt = node[k] = {}
            if not isinstance(nxt, dict):
                raise ConfigError("cannot descend into a scalar", path)
            node = nxt
        node[keys[-1]] = yaml.safe_load(raw)
    return doc


def load_config(path: str | None, overrides: Sequence[str] = ()) -> CampaignConfig:
    text = ""
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML in {path}", None, mark.line + 1 if mark else None) from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    doc = apply_overrides(doc, overrides)
    return CampaignConfig.from_dict(doc, _key_lines(text))


# ------------------------------------------------------------ corpus state

@dataclass
class SeedEntry:
    instruction: TaskInstruction
    scene_seed: int
    feedback: float = 0.0
    generation: int = 0
    inserted: int = 0

    @property
    def case_id(self) -> str:
        return self.instruction.case_id


@dataclass
class FailureLedger:
    counts: dict[Capability, int] = field(default_factory=lambda: {c: 0 for c in CAPABILITY_ORDER})
    unattributed: int = 0
    failures: list[str] = field(default_factory=list)

    def record(self, case_id: str, capability: Capability | None) -> None:
        self.failures.append(case_id)
        if capability is None:
            self.unattributed += 1
        else:
            self.counts[capability] += 1

    def lam(self, capability: Capability) -> float:
        mean = sum(self.counts.values()) / len(self.counts)
        return (mean + 1.0) / (self.counts[capability] + 1.0)

    @property
    def total(self) -> int:
        return len(self.failures)

    def to_dict(self) -> dict:
        return {"counts": {c.value: n for c, n in self.counts.items()},
                "unattributed": self.unattributed, "total": self.total}


def select_seed(corpus: Sequence[SeedEntry], rng: random.Random) -> SeedEntry:
    if not corpus:
        raise ValueError("cannot select from an empty corpus")
    weights = [max(e.feedback, 0.0) for e in corpus]
    total = sum(weights)
    if total <= 0:
        return corpus[rng.randrange(len(corpus))]
    u = rng.random() * total
    acc = 0.0
    for entry, w in zip(corpus, weights):
        acc += w
        if u < acc:
            return entry
    return next(e for e, w in zip(reversed(corpus), reversed(weights)) if w > 0)


def compute_feedback(success: bool, attribution: AttributionResult | None, epsilon: float | None,
                     ledger: FailureLedger, variant: Variant = Variant.FULL) -> float:
    """Feedback score of one executed case.

    ``epsilon`` is the error magnitude at the failure source. The ledger is
    read as it stood before this case was recorded.
    """
    if variant is Variant.NO_FEEDBACK:
        return 1.0
    if success:
        return 0.0
    f_fail = 1.0
    f_cap = 0.0
    lam = 0.0
    if attribution is not None and attribution.failure_source is not None and epsilon is not None:
        f_cap = min(max(epsilon, 0.0), 1.0)
        lam = ledger.lam(attribution.failure_source[0])
    if variant is Variant.NO_FOF:
        return lam * f_cap
    if variant in (Variant.NO_COF, Variant.RANDOM):
        return f_fail
    return f_fail + lam * f_cap


# -------------------------------------------------------------- evaluation

@dataclass
class CaseResult:
    trace: EpisodeTrace
    errors: list[CapabilityError]
    attribution: AttributionResult | None
    repaired: bool | None

    @property
    def failed(self) -> bool:
        return not self.trace.outcome.success

    def source_epsilon(self) -> float | None:
        src = self.attribution.failure_source if self.attribution else None
        if src is None:
            return None
        for e in self.errors:
            if (e.capability, e.timestep) == src:
                return e.epsilon
        return None


def evaluate_case(scene: Scene, instr: TaskInstruction, cfg: CampaignConfig, fault_seed: int,
                  do_repair: bool | None = None) -> CaseResult:
    agent = wrap_with_faults(reference_agent(), cfg.faults)
    trace = run_episode(scene, instr, agent, cfg.settings, (), fault_seed)
    if trace.outcome.success:
        return CaseResult(trace, [], None, None)
    errors = detect_errors(trace, cfg.oracle)
    trace.errors = errors
    attr = attribute(trace, errors, scene, instr, agent, cfg.settings,
                     cfg.attribution_budget, cfg.exhaustive_attribution)
    repaired = None
    if (cfg.repair if do_repair is None else do_repair) and attr.failure_source is not None:
        repaired = repair(trace, attr, errors, scene, instr, agent, cfg.settings).success
    return CaseResult(trace, errors, attr, repaired)


def failure_record(result: CaseResult, scene: Scene, cfg: CampaignConfig, iteration: int,
                   parent: str | None) -> dict:
    """Self-contained failure-corpus line: enough to replay the case exactly."""
    tr = result.trace
    attr = result.attribution or AttributionResult()
    return {
        "format": RECORD_FORMAT,
        "version": FORMAT_VERSION,
        "case_id": tr.instruction.case_id,
        "iteration": iteration,
        "parent": parent,
        "variant": cfg.variant.value,
        "instruction": instruction_to_dict(tr.instruction),
        "scene": scene_to_dict(scene),
        "faults": cfg.faults.to_dict(),
        "fault_seed": tr.fault_seed,
        "settings": {"delta": tr.delta, "t_max": tr.t_max, "step_factor": cfg.step_factor,
                     "step_floor": cfg.step_floor},
        "oracle": dataclasses.asdict(cfg.oracle),
        "outcome": {"kind": tr.outcome.kind.value, "final_distance": _finite(tr.outcome.final_distance),
                    "steps_used": tr.outcome.steps_used},
        "flagged_errors": [e.to_dict() for e in result.errors],
        **attr.to_dict(),
        "repair_outcome": None if result.repaired is None else ("Success" if result.repaired else "Failure"),
        "injected_faults": [list(x) for x in tr.fault_log],
    }


def _finite(x: float):
    return None if x == float("inf") else x


# ---------------------------------------------------------------- campaign

@dataclass
class CampaignResult:
    config: CampaignConfig
    ledger: FailureLedger
    corpus: list[SeedEntry]
    records: list[dict]
    history: list[dict]

    @property
    def failures(self) -> int:
        return self.ledger.total

    def cumulative(self) -> list[int]:
        out, acc = [], 0
        for h in self.history:
            acc += h["failed"]
            out.append(acc)
        return out


def _initial_corpus(cfg: CampaignConfig, scenes: dict[int, Scene]) -> list[SeedEntry]:
    corpus = []
    for i in range(cfg.initial_corpus):
        scene_seed = derive_seed(cfg.master_seed, "scene", i) % (2 ** 31)
        try:
            scene = generate_scene(scene_seed, cfg.scene)
            instr = generate_instruction(scene, derive_seed(cfg.master_seed, "instr", i), cfg.constraint_prob)
        except Exception as exc:
            raise CampaignError(f"initial corpus construction failed at seed {i}: {exc}") from exc
        scenes[scene_seed] = scene
        corpus.append(SeedEntry(with_case_id(instr, f"init-{i:03d}"), scene_seed))
    return corpus


def _evict(corpus: list[SeedEntry], cap: int) -> None:
    while len(corpus) > cap:
        # Lowest score first, oldest among ties.
        victim = min(range(len(corpus)), key=lambda i: (corpus[i].feedback, corpus[i].inserted))
        del corpus[victim]


def run_campaign(cfg: CampaignConfig, progress: Callable[[int, dict], None] | None = None) -> CampaignResult:
    scenes: dict[int, Scene] = {}
    corpus = _initial_corpus(cfg, scenes)
    ledger = FailureLedger()
    variant = cfg.variant
    guided = variant not in (Variant.RANDOM, Variant.NO_FEEDBACK)

    # Score the initial seeds so guided selection starts informed; their
    # failures are not counted as discoveries.
    if guided:
        for k, entry in enumerate(corpus):
            res = evaluate_case(scenes[entry.scene_seed], entry.instruction, cfg,
                                derive_seed(cfg.master_seed, "init-fault", k), do_repair=False)
            entry.feedback = compute_feedback(not res.failed, res.attribution, res.source_epsilon(),
                                              ledger, variant)

    select_rng = random.Random(derive_seed(cfg.master_seed, "select"))
    records: list[dict] = []
    history: list[dict] = []
    for it in range(cfg.budget):
        if variant is Variant.RANDOM:
            parent = corpus[select_rng.randrange(len(corpus))]
            use_mild = select_rng.random() < 0.5
        else:
            parent = select_seed(corpus, select_rng)
            p_m = mutation_probability(parent.feedback, [e.feedback for e in corpus])
            use_mild = select_rng.random() < p_m
        scene = scenes[parent.scene_seed]
        child = mutate(parent.instruction, scene, use_mild, derive_seed(cfg.master_seed, "mutate", it))
        child = with_case_id(child, f"c{it:05d}")
        res = evaluate_case(scene, child, cfg, derive_seed(cfg.master_seed, "fault", it))
        score = compute_feedback(not res.failed, res.attribution, res.source_epsilon(), ledger, variant)
        cap = res.attribution.capability if res.attribution else None
        if res.failed:
            ledger.record(child.case_id, cap)
            records.append(failure_record(res, scene, cfg, it, parent.case_id))
        corpus.append(SeedEntry(child, parent.scene_seed, score, parent.generation + 1, it + 1))
        _evict(corpus, cfg.corpus_cap)
        row = {
            "iteration": it,
            "case_id": child.case_id,
            "parent": parent.case_id,
            "mutation": "mild" if use_mild else "aggressive",
            "outcome": res.trace.outcome.kind.value,
            "failed": int(res.failed),
            "source": cap.value if cap else None,
            "feedback": score,
        }
        history.append(row)
        if progress is not None:
            progress(it, row)
    return CampaignResult(cfg, ledger, corpus, records, history)


# ----------------------------------------------------------------- reports

def repair_table(records: Iterable[dict]) -> list[dict]:
    rows = []
    for cap in CAPABILITY_ORDER:
        mine = [r for r in records if r.get("failure_source") and r["failure_source"][0] == cap.value]
        n_rep = sum(1 for r in mine if r.get("repair_outcome") == "Success")
        rows.append({"capability": cap.value, "fail": len(mine), "repaired": n_rep,
                     "rate": (n_rep / len(mine)) if mine else None})
    return rows


def campaign_report(result: CampaignResult) -> dict:
    cum = result.cumulative()
    return {
        "format": REPORT_FORMAT,
        "version": FORMAT_VERSION,
        "variant": result.config.variant.value,
        "master_seed": result.config.master_seed,
        "config": result.config.to_dict(),
        "budget": result.config.budget,
        "total_failures": result.ledger.total,
        "ledger": result.ledger.to_dict(),
        "cumulative_failures": cum,
        "repair": repair_table(result.records),
        "history": result.history,
        "corpus": [
            {"case_id": e.case_id, "scene_seed": e.scene_seed, "feedback": e.feedback,
             "generation": e.generation,
             "parent": e.instruction.lineage.parent if e.instruction.lineage else None,
             "mutation": e.instruction.lineage.kind.value if e.instruction.lineage else None}
            for e in result.corpus
        ],
    }


def history_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    cols = ["iteration", "case_id", "parent", "mutation", "outcome", "failed", "cumulative", "source", "feedback"]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    acc = 0
    for h in history:
        acc += h["failed"]
        w.writerow({**h, "cumulative": acc, "source": h["source"] or ""})
    return buf.getvalue()


def table_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    return buf.getvalue()


def dumps_records(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
