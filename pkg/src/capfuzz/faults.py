"""Controllable capability defects layered over any agent.

Activation schedules are a pure function of (config seed, episode seed, fault
code): whether a fault starts at step t never depends on what the agent did.
Counterfactual rollouts that change step t therefore keep every other
activation in place, and the wrapper carries no hidden cross-step state.
"""
from __future__ import annotations

import bisect
import enum
import hashlib
import random
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .agent import (
    Agent,
    Capability,
    EpisodeContext,
    MemorySnapshot,
    PerceptionOut,
    PlannedRoute,
    plan_target,
    planned_action,
)
from .instruction import Avoid
from .oracles import CONFUSABLE
from .world import Action, UnreachableGoalError, chain_route, route


class FaultType(enum.Enum):
    PE1 = "PE-1"
    PE2 = "PE-2"
    ME1 = "ME-1"
    ME2 = "ME-2"
    PL1 = "PL-1"
    PL2 = "PL-2"
    PL3 = "PL-3"
    DE1 = "DE-1"

    @property
    def capability(self) -> Capability:
        return _CAPS[self.value[:2]]

    @property
    def title(self) -> str:
        return _TITLES[self]

    @property
    def default_magnitude(self) -> float:
        return _MAGNITUDES[self]


_CAPS = {"PE": Capability.PERCEPTION, "ME": Capability.MEMORY, "PL": Capability.PLANNING, "DE": Capability.DECISION}
_TITLES = {
    FaultType.PE1: "MissedDetection",
    FaultType.PE2: "ObjectConfusion",
    FaultType.ME1: "Forgetting",
    FaultType.ME2: "TemporalOrderError",
    FaultType.PL1: "Detour",
    FaultType.PL2: "Looping",
    FaultType.PL3: "ConstraintViolation",
    FaultType.DE1: "InconsistentWithPlan",
}
# PE-1/PE-2/DE-1: burst length in steps. ME-1: retention window k.
# ME-2: swaps per activation. PL-1: minimum relative stretch. PL-2: loop count.
_MAGNITUDES = {
    FaultType.PE1: 20.0,
    FaultType.PE2: 1.0,
    FaultType.ME1: 1.0,
    FaultType.ME2: 1.0,
    FaultType.PL1: 1.0,
    FaultType.PL2: 2.0,
    FaultType.PL3: 0.0,
    FaultType.DE1: 10.0,
}
_BURSTY = {FaultType.PE1, FaultType.PE2, FaultType.DE1}
FAULT_CODES = {f.value: f for f in FaultType}


@dataclass(frozen=True)
class FaultSpec:
    probability: float = 0.0
    magnitude: float | None = None
    max_activations: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"fault probability must lie in [0, 1], got {self.probability}")
        if self.max_activations is not None and self.max_activations < 0:
            raise ValueError("max_activations must be non-negative")


@dataclass(frozen=True)
class FaultConfig:
    faults: Mapping[FaultType, FaultSpec] = field(default_factory=dict)
    fault_seed: int = 0

    def spec(self, ft: FaultType) -> FaultSpec:
        return self.faults.get(ft, FaultSpec())

    def magnitude(self, ft: FaultType) -> float:
        m = self.spec(ft).magnitude
        return ft.default_magnitude if m is None else m

    def active(self) -> list[FaultType]:
        return [ft for ft in FaultType if self.spec(ft).probability > 0]

    @classmethod
    def single(cls, ft: FaultType | str, probability: float, magnitude: float | None = None,
               max_activations: int | None = None, fault_seed: int = 0) -> "FaultConfig":
        ft = FAULT_CODES[ft] if isinstance(ft, str) else ft
        return cls({ft: FaultSpec(probability, magnitude, max_activations)}, fault_seed)

    def to_dict(self) -> dict:
        out: dict = {"fault_seed": self.fault_seed}
        for ft in FaultType:
            if ft in self.faults:
                s = self.faults[ft]
                out[ft.value] = {"probability": s.probability, "magnitude": s.magnitude,
                                 "max_activations": s.max_activations}
        return out

    @classmethod
    def from_dict(cls, doc: Mapping) -> "FaultConfig":
        faults = {}
        for key, val in doc.items():
            if key == "fault_seed":
                continue
            if key not in FAULT_CODES:
                raise ValueError(f"unknown fault type {key!r}")
            if isinstance(val, (int, float)):
                val = {"probability": val}
            faults[FAULT_CODES[key]] = FaultSpec(
                float(val.get("probability", 0.0)), val.get("magnitude"), val.get("max_activations"))
        return cls(faults, int(doc.get("fault_seed", 0)))


class FaultyAgent:
    """Agent wrapper that perturbs capability outputs per a :class:`FaultConfig`."""

    def __init__(self, base: Agent, config: FaultConfig):
        self.base = base
        self.config = config
        self._live = {ft: config.spec(ft) for ft in config.active()}
        self._burst = {ft: max(1, int(config.magnitude(ft))) if ft in _BURSTY else 1 for ft in self._live}
        self._schedules: dict = {}

    # -- plumbing

    def _digest(self, ctx: EpisodeContext, ft: FaultType, t: int) -> bytes:
        key = f"{self.config.fault_seed}/{ctx.fault_seed}/{t}/{ft.value}".encode()
        return hashlib.blake2b(key, digest_size=16).digest()

    def starts(self, ctx: EpisodeContext, ft: FaultType, t: int) -> list[int]:
        """Activation start steps up to ``t`` (pure in the seeds)."""
        spec = self._live.get(ft)
        if spec is None:
            return []
        # Schedules depend only on the seeds, so rollouts of one episode share them.
        key = (ctx.fault_seed, ft)
        upto, found = self._schedules.get(key, (0, []))
        if t > upto:
            if len(self._schedules) > 4096:
                self._schedules.clear()
            cap = spec.max_activations
            for k in range(upto + 1, t + 1):
                if cap is not None and len(found) >= cap:
                    break
                if int.from_bytes(self._digest(ctx, ft, k)[:8], "little") / 2.0 ** 64 < spec.probability:
                    found.append(k)
            self._schedules[key] = (t, found)
        return found[: bisect.bisect_right(found, t)]

    def _arm(self, ctx: EpisodeContext, ft: FaultType, t: int) -> random.Random | None:
        if ft not in self._live:
            return None
        started = self.starts(ctx, ft, t)
        if not started or t - started[-1] >= self._burst[ft]:
            return None
        return random.Random(int.from_bytes(self._digest(ctx, ft, t)[8:], "little"))

    def _fired(self, ctx: EpisodeContext, ft: FaultType, t: int, detail: str) -> None:
        ctx.fault_log.append((t, ft.value, ft.capability.value, detail))

    # -- perception

    def perceive(self, ctx, state, obs):
        out = self.base.perceive(ctx, state, obs)
        t = state.step_index + 1
        dets = list(out.detections)
        target = ctx.instruction.target_object
        rng = self._arm(ctx, FaultType.PE1, t)
        if rng is not None and dets:
            focus = [i for i, d in enumerate(dets) if d.label == target]
            i = focus[0] if focus else rng.randrange(len(dets))
            self._fired(ctx, FaultType.PE1, t, f"dropped {dets[i].label}")
            del dets[i]
        rng = self._arm(ctx, FaultType.PE2, t)
        if rng is not None:
            cands = [i for i, d in enumerate(dets) if d.label in CONFUSABLE]
            if cands:
                focus = [i for i in cands if CONFUSABLE[dets[i].label] == target]
                i = rng.choice(focus or cands)
                d = dets[i]
                new = CONFUSABLE[d.label]
                dets[i] = type(d)(d.view, new, d.box, d.distance)
                self._fired(ctx, FaultType.PE2, t, f"{d.label}->{new}")
        if len(dets) == len(out.detections) and all(a is b for a, b in zip(dets, out.detections)):
            return out
        return PerceptionOut(tuple(dets))

    # -- memory

    def remember(self, ctx, memory, prev_state, prev_perception):
        out = self.base.remember(ctx, memory, prev_state, prev_perception)
        t = 1 if prev_state is None else prev_state.step_index + 2
        rng = self._arm(ctx, FaultType.ME1, t)
        if rng is not None:
            k = int(self.config.magnitude(FaultType.ME1))
            cutoff = t - k
            if any(e.step < cutoff for e in out.entries):
                kept = tuple(e for e in out.entries if e.step >= cutoff)
                poses = tuple(p for p in out.poses if p.step_index + 1 >= cutoff)
                self._fired(ctx, FaultType.ME1, t, f"erased steps < {cutoff}")
                out = MemorySnapshot(kept, poses)
        rng = self._arm(ctx, FaultType.ME2, t)
        if rng is not None:
            entries = list(out.entries)
            target = ctx.instruction.target_object
            for _ in range(max(1, int(self.config.magnitude(FaultType.ME2)))):
                labels = [frozenset(e.labels()) for e in entries]
                if len(set(labels)) < 2:
                    break
                # Aim at the earliest target sighting, the one the planner trusts.
                # Otherwise any entry works: some other entry differs from it.
                focus = [k for k, ls in enumerate(labels) if target in ls]
                i = min(focus, key=lambda k: entries[k].step) if focus else rng.randrange(len(entries))
                j = rng.choice([k for k in range(len(entries)) if labels[k] != labels[i]])
                a, b = entries[i], entries[j]
                entries[i] = type(a)(b.step, a.detections)
                entries[j] = type(b)(a.step, b.detections)
                self._fired(ctx, FaultType.ME2, t, f"swapped steps {a.step}<->{b.step}")
            out = MemorySnapshot(tuple(entries), out.poses)
        return out

    # -- planning

    def plan(self, ctx, state, perception, memory, prev_plan):
        out = self.base.plan(ctx, state, perception, memory, prev_plan)
        t = state.step_index + 1
        for ft, fn in ((FaultType.PL1, self._detour), (FaultType.PL2, self._loop),
                       (FaultType.PL3, self._violate)):
            rng = self._arm(ctx, ft, t)
            if rng is None or len(out.waypoints) < 2:
                continue
            try:
                new = fn(ctx, state, perception, memory, out, rng)
            except UnreachableGoalError:
                new = None
            if new is not None and new != out.waypoints:
                self._fired(ctx, ft, t, f"plan length {len(out.waypoints)}->{len(new)}")
                out = PlannedRoute(new)
        return out

    def _detour(self, ctx, state, perception, memory, plan, rng):
        remaining, target = plan_target(ctx, state, perception, memory)
        if target is None:
            return None
        scene, avoid = ctx.scene, ctx.task.avoid - {state.position}
        first = remaining[0] if remaining else target
        to_first = scene.distance_field(first, avoid)
        from_here = scene.distance_field([state.position], avoid)
        direct = int(to_first[state.position[1], state.position[0]])
        total = np.where((to_first >= 0) & (from_here >= 0), to_first + from_here, -1)
        need = max((1.0 + self.config.magnitude(FaultType.PL1)) * direct, direct + 1)
        ok = total >= need
        if not ok.any():
            return None
        best = total[ok].min()
        ys, xs = np.nonzero(total == best)
        k = rng.randrange(len(xs))
        via = (int(xs[k]), int(ys[k]))
        head = route(scene, state.position, [via], avoid)
        tail = chain_route(scene, via, remaining, target, ctx.task.avoid)
        return tuple(head + tail[1:])

    def _loop(self, ctx, state, perception, memory, plan, rng):
        here = ctx.scene.room_at(state.position)
        here_label = here.label if here else None
        last = None
        for pos in reversed(memory.positions()):
            room = ctx.scene.room_at(pos)
            if room is not None and room.label != here_label:
                last = room.label
                break
        if last is None:
            return None
        centre = ctx.scene.room_center(last)
        if centre in ctx.task.avoid:
            return None
        out_leg = route(ctx.scene, state.position, [centre], ctx.task.avoid)
        back_leg = route(ctx.scene, centre, [state.position], ctx.task.avoid)
        cycle = out_leg + back_leg[1:]
        path = [state.position]
        for _ in range(max(1, int(self.config.magnitude(FaultType.PL2)))):
            path.extend(cycle[1:])
        return tuple(path) + plan.waypoints[1:]

    def _violate(self, ctx, state, perception, memory, plan, rng):
        remaining, target = plan_target(ctx, state, perception, memory)
        if target is None:
            return None
        options = []
        if any(isinstance(c, Avoid) for c in ctx.instruction.constraints):
            options.append("avoid")
        if remaining:
            options.append("waypoint")
        if not options:
            return None
        if rng.choice(options) == "avoid":
            return tuple(chain_route(ctx.scene, state.position, remaining, target))
        return tuple(chain_route(ctx.scene, state.position, remaining[1:], target, ctx.task.avoid))

    # -- decision

    def decide(self, ctx, state, plan):
        out = self.base.decide(ctx, state, plan)
        t = state.step_index + 1
        rng = self._arm(ctx, FaultType.DE1, t)
        if rng is None:
            return out
        expected = planned_action(state, plan)
        near_goal = ctx.scene.geodesic(state.position, ctx.task.goal) <= 1
        choices = [a for a in Action if a is not expected and (a is not Action.STOP or near_goal)]
        new = rng.choice(choices)
        self._fired(ctx, FaultType.DE1, t, f"{expected.value}->{new.value}")
        return new


def wrap_with_faults(agent: Agent, config: FaultConfig) -> FaultyAgent:
    return FaultyAgent(agent, config)
