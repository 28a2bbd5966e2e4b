"""Modular agent pipeline, the competent reference agent and the episode runner.

Each timestep runs perception -> memory -> planning -> decision. Capability
functions are pure: all cross-step state travels through their outputs (the
memory snapshot and the previous plan), so replacing one output with the
oracle's expected output is enough to re-derive everything downstream.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

from .instruction import (
    ResolvedTask,
    TaskInstruction,
    instruction_from_dict,
    instruction_to_dict,
    resolve,
    waypoint_progress,
)
from .world import (
    Action,
    AgentState,
    Cell,
    Detection,
    Heading,
    Observation,
    Outcome,
    OutcomeKind,
    Rect,
    Scene,
    View,
    ViewConfig,
    action_toward,
    chain_route,
    classify_outcome,
    default_step_limit,
    detection_anchor,
    observe,
    step,
)

log = logging.getLogger(__name__)

TRACE_FORMAT = "capfuzz-trace"
TRACE_VERSION = 1


class Capability(enum.Enum):
    PERCEPTION = "Perception"
    MEMORY = "Memory"
    PLANNING = "Planning"
    DECISION = "Decision"


CAPABILITY_ORDER = (Capability.PERCEPTION, Capability.MEMORY, Capability.PLANNING, Capability.DECISION)
CAPABILITY_RANK = {c: i for i, c in enumerate(CAPABILITY_ORDER)}


class InvalidInterventionError(ValueError):
    pass


@dataclass(frozen=True)
class PerceptionOut:
    detections: tuple[Detection, ...] = ()

    def labels(self) -> set[str]:
        return {d.label for d in self.detections}


@dataclass(frozen=True)
class MemoryEntry:
    """What was perceived at ``step``, in the egocentric view frame."""

    step: int
    detections: tuple[Detection, ...] = ()

    def labels(self) -> set[str]:
        return {d.label for d in self.detections}


@dataclass(frozen=True)
class MemorySnapshot:
    """Observation log keyed by timestep plus the odometry (pose) log.

    Observations and poses are joined by their step key, so a corrupted key
    re-projects a past observation from the wrong pose.
    """

    entries: tuple[MemoryEntry, ...] = ()
    poses: tuple[AgentState, ...] = ()

    def by_step(self) -> dict[int, MemoryEntry]:
        return {e.step: e for e in self.entries}

    def ordered(self) -> list[MemoryEntry]:
        return sorted(self.entries, key=lambda e: e.step)

    def pose_at(self) -> dict[int, AgentState]:
        return {p.step_index + 1: p for p in self.poses}

    def positions(self) -> list[Cell]:
        return [p.position for p in sorted(self.poses, key=lambda p: p.step_index)]


@dataclass(frozen=True)
class PlannedRoute:
    waypoints: tuple[Cell, ...]


@dataclass
class EpisodeContext:
    """Everything an agent may consult besides capability outputs.

    ``scene`` doubles as the agent's prior floor plan (walls and labelled room
    regions). Object locations are only learned through perception.
    """

    scene: Scene
    instruction: TaskInstruction
    task: ResolvedTask
    view: ViewConfig
    fault_seed: int = 0
    scratch: dict = field(default_factory=dict)
    fault_log: list = field(default_factory=list)


class Agent(Protocol):
    def perceive(self, ctx: EpisodeContext, state: AgentState, obs: Observation) -> PerceptionOut: ...

    def remember(
        self, ctx: EpisodeContext, memory: MemorySnapshot,
        prev_state: AgentState | None, prev_perception: PerceptionOut | None,
    ) -> MemorySnapshot: ...

    def plan(
        self, ctx: EpisodeContext, state: AgentState, perception: PerceptionOut,
        memory: MemorySnapshot, prev_plan: PlannedRoute | None,
    ) -> PlannedRoute: ...

    def decide(self, ctx: EpisodeContext, state: AgentState, plan: PlannedRoute) -> Action: ...


# ---------------------------------------------------------- shared helpers

def memory_entry(state: AgentState, perception: PerceptionOut | Observation) -> MemoryEntry:
    return MemoryEntry(state.step_index + 1, tuple(perception.detections))


def planned_action(state: AgentState, plan: PlannedRoute) -> Action:
    """The action that follows ``plan`` from ``state``: Stop at its end."""
    if len(plan.waypoints) <= 1:
        return Action.STOP
    return action_toward(state, plan.waypoints[1])


def goal_sighting(ctx: EpisodeContext, state: AgentState, perception: PerceptionOut,
                  memory: MemorySnapshot) -> Cell | None:
    """Earliest remembered (or current) sighting of the target inside the target room."""
    region = ctx.scene.room(ctx.instruction.target_room).region
    label = ctx.instruction.target_object
    poses = memory.pose_at()
    for entry in memory.ordered():
        pose = poses.get(entry.step)
        if pose is None:
            continue
        for det in entry.detections:
            if det.label == label:
                anchor = detection_anchor(pose, det)
                if region.contains(anchor):
                    return anchor
    for det in perception.detections:
        if det.label == label:
            anchor = detection_anchor(state, det)
            if region.contains(anchor):
                return anchor
    return None


def plan_target(ctx: EpisodeContext, state: AgentState, perception: PerceptionOut,
                memory: MemorySnapshot) -> tuple[tuple[frozenset, ...], frozenset | None]:
    """Remaining waypoint regions and the final target region (``None`` = give up here)."""
    positions = memory.positions() + [state.position]
    done = waypoint_progress(ctx.task, positions)
    remaining = ctx.task.waypoints[done:]
    anchor = goal_sighting(ctx, state, perception, memory)
    if anchor is not None:
        return remaining, frozenset([anchor])
    room = ctx.instruction.target_room
    if not remaining and state.position in ctx.scene.room_cells(room):
        # Inside the target room with nothing seen: conclude it is absent.
        return remaining, None
    return remaining, frozenset([ctx.scene.room_center(room)])


def plan_consistent(ctx: EpisodeContext, route: Sequence[Cell], remaining, target) -> bool:
    if not route or route[-1] not in target:
        return False
    if any(c in ctx.task.avoid for c in route[1:]):
        return False
    return waypoint_progress(ResolvedTask(target, tuple(remaining), ctx.task.avoid), route) == len(remaining)


class ReferenceAgent:
    """Competent algorithmic agent.

    Perception passes ground truth through, memory is an append-only log,
    planning is BFS over the prior floor plan toward the believed goal (or the
    target-room centre while the goal is unseen) and keeps following its
    previous route while that route stays consistent with what it believes.
    Decision takes the first move along the plan.
    """

    def perceive(self, ctx, state, obs):
        return PerceptionOut(obs.detections)

    def remember(self, ctx, memory, prev_state, prev_perception):
        if prev_state is None:
            return MemorySnapshot()
        return MemorySnapshot(memory.entries + (memory_entry(prev_state, prev_perception),),
                              memory.poses + (prev_state,))

    def plan(self, ctx, state, perception, memory, prev_plan):
        remaining, target = plan_target(ctx, state, perception, memory)
        if target is None:
            return PlannedRoute((state.position,))
        if prev_plan is not None:
            wp = prev_plan.waypoints
            for i in (0, 1):
                if i < len(wp) and wp[i] == state.position:
                    suffix = wp[i:]
                    if plan_consistent(ctx, suffix, remaining, target):
                        return PlannedRoute(tuple(suffix))
                    break
        route = chain_route(ctx.scene, state.position, remaining, target, ctx.task.avoid)
        return PlannedRoute(tuple(route))

    def decide(self, ctx, state, plan):
        return planned_action(state, plan)


def reference_agent() -> ReferenceAgent:
    return ReferenceAgent()


# ---------------------------------------------------------------- oracles'
# expected outputs, computed from privileged ground truth

def gt_memory(steps: Sequence["TraceStep"]) -> MemorySnapshot:
    return MemorySnapshot(tuple(memory_entry(s.state, s.observation_gt) for s in steps),
                          tuple(s.state for s in steps))


def expert_suffix(ctx: EpisodeContext, state: AgentState, obs: Observation,
                  history: Sequence["TraceStep"]) -> tuple[Cell, ...]:
    """Expected plan at the current step: the reference planner fed ground truth.

    Until the target has actually been seen it heads for the target-room
    centre, exactly as a planner with correct inputs must; if it would give up
    it is pointed at the true goal instead.
    """
    remaining, target = plan_target(ctx, state, PerceptionOut(obs.detections), gt_memory(history))
    if target is None:
        target = ctx.task.goal
    return tuple(chain_route(ctx.scene, state.position, remaining, target, ctx.task.avoid))


# ------------------------------------------------------------------ runner

@dataclass(frozen=True)
class EpisodeSettings:
    delta: float = 3.0
    t_max: int | None = None
    step_factor: float = 4.0
    step_floor: int = 40
    view: ViewConfig = ViewConfig()

    def step_limit(self, expert_length: int) -> int:
        if self.t_max is not None:
            return self.t_max
        return default_step_limit(expert_length, self.step_factor, self.step_floor)


@dataclass(frozen=True)
class TraceStep:
    t: int
    state: AgentState
    observation_gt: Observation
    perception: PerceptionOut
    memory: MemorySnapshot
    plan: PlannedRoute
    decision: Action
    planned_action: Action
    expert_suffix: tuple[Cell, ...] | None = None


@dataclass
class EpisodeTrace:
    instruction: TaskInstruction
    scene_seed: int
    fault_seed: int
    delta: float
    t_max: int
    steps: list[TraceStep]
    outcome: Outcome
    fault_log: list[tuple] = field(default_factory=list)
    interventions: list[tuple[Capability, int]] = field(default_factory=list)
    skipped_interventions: list[tuple[Capability, int]] = field(default_factory=list)
    errors: list = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return not self.outcome.success

    def __eq__(self, other):
        if not isinstance(other, EpisodeTrace):
            return NotImplemented
        return trace_to_dict(self) == trace_to_dict(other)


def run_episode(
    scene: Scene,
    instr: TaskInstruction,
    agent: Agent,
    settings: EpisodeSettings = EpisodeSettings(),
    interventions: Mapping[tuple[Capability, int], object] | Iterable[tuple[Capability, int]] = (),
    fault_seed: int = 0,
    record_expert: bool = True,
    resume: EpisodeTrace | None = None,
) -> EpisodeTrace:
    """Execute ``instr`` in ``scene`` and record the full capability trace.

    ``interventions`` maps ``(capability, t)`` to a replacement output; a value
    of ``None`` (or passing a plain iterable of keys) substitutes the oracle's
    expected output at that step.

    ``resume`` may be the unintervened trace of the same (scene, instruction,
    agent, settings, fault_seed). Steps before the earliest intervention are
    then copied from it instead of being re-simulated; the agent is stateless
    apart from what the trace records, so the result is identical.
    """
    if not isinstance(interventions, Mapping):
        interventions = {key: None for key in interventions}
    for cap, t in interventions:
        if t < 1:
            raise InvalidInterventionError(f"intervention timestep must be >= 1, got {t}")
    task = resolve(instr, scene)
    ctx = EpisodeContext(scene, instr, task, settings.view, fault_seed)
    expert_len = len(chain_route(scene, scene.start, task.waypoints, task.goal, task.avoid))
    t_max = settings.step_limit(expert_len)

    state = AgentState(scene.start, scene.start_heading, 0)
    memory = MemorySnapshot()
    prev_state: AgentState | None = None
    prev_perception: PerceptionOut | None = None
    prev_plan: PlannedRoute | None = None
    steps: list[TraceStep] = []
    applied: list[tuple[Capability, int]] = []
    stopped = False
    t = 0
    first = min((k[1] for k in interventions), default=0)
    if resume is not None and 2 <= first <= len(resume.steps):
        steps = list(resume.steps[: first - 1])
        last = steps[-1]
        state = resume.steps[first - 1].state
        memory, prev_state, prev_perception, prev_plan = last.memory, last.state, last.perception, last.plan
        ctx.fault_log = [x for x in resume.fault_log if x[0] < first]
        t = first - 1
    while True:
        t += 1
        obs = observe(scene, state, settings.view)

        perception = agent.perceive(ctx, state, obs)
        key = (Capability.PERCEPTION, t)
        if key in interventions:
            repl = interventions[key]
            perception = repl if repl is not None else PerceptionOut(obs.detections)
            applied.append(key)

        memory = agent.remember(ctx, memory, prev_state, prev_perception)
        key = (Capability.MEMORY, t)
        if key in interventions:
            repl = interventions[key]
            memory = repl if repl is not None else gt_memory(steps)
            applied.append(key)

        suffix = expert_suffix(ctx, state, obs, steps) if record_expert else None
        plan = agent.plan(ctx, state, perception, memory, prev_plan)
        key = (Capability.PLANNING, t)
        if key in interventions:
            repl = interventions[key]
            if repl is None:
                repl = PlannedRoute(suffix if suffix is not None else expert_suffix(ctx, state, obs, steps))
            plan = repl
            applied.append(key)

        expected = planned_action(state, plan)
        decision = agent.decide(ctx, state, plan)
        key = (Capability.DECISION, t)
        if key in interventions:
            repl = interventions[key]
            decision = repl if repl is not None else expected
            applied.append(key)

        steps.append(TraceStep(t, state, obs, perception, memory, plan, decision, expected, suffix))
        prev_state, prev_perception, prev_plan = state, perception, plan
        state = step(scene, state, decision)
        if decision is Action.STOP:
            stopped = True
        if stopped or state.step_index > t_max:
            break

    outcome = classify_outcome(scene, state, task.goal, settings.delta, t_max, stopped)
    skipped = [k for k in interventions if k not in applied]
    for k in skipped:
        log.info("intervention %s at t=%d lies beyond the trace (length %d); ignored",
                    k[0].value, k[1], len(steps))
    return EpisodeTrace(
        instruction=instr,
        scene_seed=scene.scene_seed,
        fault_seed=fault_seed,
        delta=settings.delta,
        t_max=t_max,
        steps=steps,
        outcome=outcome,
        fault_log=list(ctx.fault_log),
        interventions=applied,
        skipped_interventions=skipped,
    )


# ----------------------------------------------------------- serialization

def _rect(r: Rect) -> list:
    return [r.x0, r.y0, r.x1, r.y1]


def _det_to(d: Detection) -> dict:
    return {"view": d.view.value, "label": d.label, "box": _rect(d.box), "distance": d.distance}


def _det_from(d: dict) -> Detection:
    return Detection(View(d["view"]), d["label"], Rect(*d["box"]), d["distance"])


def _state_to(s: AgentState) -> dict:
    return {"position": list(s.position), "heading": s.heading.name, "step_index": s.step_index}


def _state_from(d: dict) -> AgentState:
    return AgentState(tuple(d["position"]), Heading[d["heading"]], d["step_index"])


def _mem_to(m: MemorySnapshot) -> dict:
    return {
        "entries": [{"step": e.step, "detections": [_det_to(d) for d in e.detections]} for e in m.entries],
        "poses": [_state_to(p) for p in m.poses],
    }


def _mem_from(m: dict) -> MemorySnapshot:
    return MemorySnapshot(
        tuple(MemoryEntry(e["step"], tuple(_det_from(d) for d in e["detections"])) for e in m["entries"]),
        tuple(_state_from(p) for p in m["poses"]),
    )


def outcome_to_dict(o: Outcome) -> dict:
    dist = o.final_distance
    return {"kind": o.kind.value, "final_distance": None if dist == float("inf") else dist,
            "steps_used": o.steps_used}


def outcome_from_dict(d: dict) -> Outcome:
    dist = d["final_distance"]
    return Outcome(OutcomeKind(d["kind"]), float("inf") if dist is None else dist, d["steps_used"])


def trace_to_dict(trace: EpisodeTrace) -> dict:
    return {
        "format": TRACE_FORMAT,
        "version": TRACE_VERSION,
        "instruction": instruction_to_dict(trace.instruction),
        "scene_seed": trace.scene_seed,
        "fault_seed": trace.fault_seed,
        "delta": trace.delta,
        "t_max": trace.t_max,
        "outcome": outcome_to_dict(trace.outcome),
        "fault_log": [list(x) for x in trace.fault_log],
        "interventions": [[c.value, t] for c, t in trace.interventions],
        "skipped_interventions": [[c.value, t] for c, t in trace.skipped_interventions],
        "errors": [e.to_dict() for e in trace.errors],
        "steps": [
            {
                "t": s.t,
                "state": _state_to(s.state),
                "observation_gt": [_det_to(d) for d in s.observation_gt.detections],
                "perception": [_det_to(d) for d in s.perception.detections],
                "memory": _mem_to(s.memory),
                "plan": [list(c) for c in s.plan.waypoints],
                "decision": s.decision.value,
                "planned_action": s.planned_action.value,
                "expert_suffix": None if s.expert_suffix is None else [list(c) for c in s.expert_suffix],
            }
            for s in trace.steps
        ],
    }


def trace_from_dict(doc: dict) -> EpisodeTrace:
    from .oracles import CapabilityError  # local import: oracles depends on this module

    if doc.get("format") != TRACE_FORMAT or doc.get("version") != TRACE_VERSION:
        raise ValueError("not a supported trace document")
    steps = []
    for s in doc["steps"]:
        steps.append(TraceStep(
            t=s["t"],
            state=_state_from(s["state"]),
            observation_gt=Observation(tuple(_det_from(d) for d in s["observation_gt"])),
            perception=PerceptionOut(tuple(_det_from(d) for d in s["perception"])),
            memory=_mem_from(s["memory"]),
            plan=PlannedRoute(tuple(tuple(c) for c in s["plan"])),
            decision=Action(s["decision"]),
            planned_action=Action(s["planned_action"]),
            expert_suffix=None if s["expert_suffix"] is None else tuple(tuple(c) for c in s["expert_suffix"]),
        ))
    return EpisodeTrace(
        instruction=instruction_from_dict(doc["instruction"]),
        scene_seed=doc["scene_seed"],
        fault_seed=doc["fault_seed"],
        delta=doc["delta"],
        t_max=doc["t_max"],
        steps=steps,
        outcome=outcome_from_dict(doc["outcome"]),
        fault_log=[tuple(x) for x in doc["fault_log"]],
        interventions=[(Capability(c), t) for c, t in doc["interventions"]],
        skipped_interventions=[(Capability(c), t) for c, t in doc["skipped_interventions"]],
        errors=[CapabilityError.from_dict(e) for e in doc["errors"]],
    )


def dumps_trace(trace: EpisodeTrace) -> str:
    return json.dumps(trace_to_dict(trace), sort_keys=True)


def loads_trace(text: str) -> EpisodeTrace:
    return trace_from_dict(json.loads(text))
