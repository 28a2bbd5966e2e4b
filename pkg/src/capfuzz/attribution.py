"""Counterfactual failure attribution and oracle-based repair."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .agent import CAPABILITY_RANK, Agent, Capability, EpisodeSettings, EpisodeTrace, run_episode
from .instruction import TaskInstruction
from .oracles import CapabilityError
from .world import Outcome, Scene

log = logging.getLogger(__name__)

MAX_INTERVENTIONS = 32


@dataclass
class AttributionResult:
    failure_source: tuple[Capability, int] | None = None
    failure_inducing_set: list[tuple[Capability, int]] = field(default_factory=list)
    interventions_tried: int = 0
    unattributed: bool = True
    budget_truncated: bool = False

    @property
    def capability(self) -> Capability | None:
        return self.failure_source[0] if self.failure_source else None

    def to_dict(self) -> dict:
        src = self.failure_source
        return {
            "failure_source": None if src is None else [src[0].value, src[1]],
            "failure_inducing_set": [[c.value, t] for c, t in self.failure_inducing_set],
            "interventions_tried": self.interventions_tried,
            "unattributed": self.unattributed,
            "budget_truncated": self.budget_truncated,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttributionResult":
        src = d["failure_source"]
        return cls(
            None if src is None else (Capability(src[0]), src[1]),
            [(Capability(c), t) for c, t in d["failure_inducing_set"]],
            d["interventions_tried"],
            d["unattributed"],
            d.get("budget_truncated", False),
        )


def _settings(trace: EpisodeTrace, settings: EpisodeSettings | None) -> EpisodeSettings:
    base = settings or EpisodeSettings()
    # Pin the step budget the original episode ran under.
    return EpisodeSettings(trace.delta, trace.t_max, base.step_factor, base.step_floor, base.view)


def intervene(scene: Scene, instr: TaskInstruction, agent: Agent, err: tuple[Capability, int],
              fault_seed: int = 0, settings: EpisodeSettings | None = None,
              original: EpisodeTrace | None = None) -> Outcome:
    """Outcome of the episode with the single output ``err`` replaced by the oracle's.

    Passing the ``original`` trace pins its step budget and lets the rollout
    reuse the unchanged prefix.
    """
    s = _settings(original, settings) if original is not None else (settings or EpisodeSettings())
    trace = run_episode(scene, instr, agent, s, [err], fault_seed, record_expert=False, resume=original)
    return trace.outcome


def attribute(trace: EpisodeTrace, errors: list[CapabilityError], scene: Scene, instr: TaskInstruction,
              agent: Agent, settings: EpisodeSettings | None = None,
              budget: int = MAX_INTERVENTIONS, exhaustive: bool = True) -> AttributionResult:
    """Find the earliest flagged error whose sole correction turns the failure into Success.

    With ``exhaustive=False`` the search stops at the first failure-inducing
    error; since errors are tried in (t, capability) order that error is the
    failure source either way, only the collected set is smaller.
    """
    result = AttributionResult()
    if trace.outcome.success or not errors:
        if not trace.outcome.success:
            log.info("failure %s has no flagged errors; unattributed", instr.case_id)
        return result
    ordered = sorted(errors, key=CapabilityError.sort_key)
    if len(ordered) > budget:
        result.budget_truncated = True
        ordered = ordered[:budget]
    for err in ordered:
        key = (err.capability, err.timestep)
        result.interventions_tried += 1
        if intervene(scene, instr, agent, key, trace.fault_seed, settings, trace).success:
            result.failure_inducing_set.append(key)
            if not exhaustive:
                break
    if result.failure_inducing_set:
        result.failure_source = min(result.failure_inducing_set, key=lambda k: (k[1], CAPABILITY_RANK[k[0]]))
        result.unattributed = False
    else:
        log.info("failure %s: no single intervention succeeded; unattributed", instr.case_id)
    return result


def repair(trace: EpisodeTrace, result: AttributionResult, errors: list[CapabilityError], scene: Scene,
           instr: TaskInstruction, agent: Agent, settings: EpisodeSettings | None = None) -> Outcome:
    """Re-run with every flagged error of the source capability corrected."""
    if result.failure_source is None:
        raise ValueError("repair needs an attributed failure")
    cap = result.failure_source[0]
    keys = sorted({(e.capability, e.timestep) for e in errors if e.capability is cap}, key=lambda k: k[1])
    keys_set = set(keys) | {result.failure_source}
    s = _settings(trace, settings)
    fixed = run_episode(scene, instr, agent, s, keys_set, trace.fault_seed, record_expert=False, resume=trace)
    return fixed.outcome
