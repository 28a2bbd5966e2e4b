"""Capability oracles: per-step error magnitudes and threshold flagging."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from . import kernels
from .agent import (
    CAPABILITY_RANK,
    Capability,
    EpisodeTrace,
    MemorySnapshot,
    PerceptionOut,
    PlannedRoute,
    gt_memory,
)
from .world import OBJECT_LABELS, Action, Cell, Observation, Rect

CONFUSABLE_GROUPS: tuple[frozenset[str], ...] = (
    frozenset({"chair", "stool"}),
    frozenset({"table", "desk"}),
    frozenset({"sofa", "armchair"}),
    frozenset({"cabinet", "wardrobe"}),
    frozenset({"bed", "crib"}),
    frozenset({"washer", "dryer"}),
)
CONFUSABLE: dict[str, str] = {a: b for g in CONFUSABLE_GROUPS for a in g for b in g if a != b}
_VOCAB = frozenset(OBJECT_LABELS)


class UnknownLabelError(KeyError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    # The reference pipeline is exact, so its ε is 0; the thresholds sit just
    # below the smallest single-object error (0.25/n perception, ~1/t memory).
    theta_p: float = 0.02
    theta_m: float = 0.005
    theta_pl: float = 0.4
    theta_d: float = 0.5
    d_th: float = 3.0

    def __post_init__(self):
        # Thresholds may exceed 1 to disable a capability's oracle entirely.
        for name in ("theta_p", "theta_m", "theta_pl", "theta_d"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.d_th > 0:
            raise ValueError("d_th must be positive")

    def threshold(self, cap: Capability) -> float:
        return {
            Capability.PERCEPTION: self.theta_p,
            Capability.MEMORY: self.theta_m,
            Capability.PLANNING: self.theta_pl,
            Capability.DECISION: self.theta_d,
        }[cap]


@dataclass(frozen=True, order=False)
class CapabilityError:
    capability: Capability
    timestep: int
    epsilon: float
    threshold: float = 0.0

    def sort_key(self) -> tuple[int, int]:
        return self.timestep, CAPABILITY_RANK[self.capability]

    def to_dict(self) -> dict:
        return {"capability": self.capability.value, "t": self.timestep,
                "epsilon": self.epsilon, "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: dict) -> "CapabilityError":
        return cls(Capability(d["capability"]), d["t"], d["epsilon"], d["threshold"])


# ----------------------------------------------------------------- kernels

def iou(a: Rect, b: Rect) -> float:
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    if area_a == 0 or area_b == 0:
        return 1.0 if area_a == area_b == 0 and tuple(a) == tuple(b) else 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def label_dissimilarity(a: str, b: str) -> float:
    for label in (a, b):
        if label not in _VOCAB:
            raise UnknownLabelError(label)
    if a == b:
        return 0.0
    return 0.5 if CONFUSABLE.get(a) == b else 1.0


def ndtw(r: Sequence[Cell], q: Sequence[Cell], d_th: float) -> float:
    if not r or not q:
        raise ValueError("ndtw needs non-empty sequences")
    return math.exp(-kernels.dtw(r, q) / (len(q) * d_th))


# ----------------------------------------------------------------- oracles

def perception_error(p: PerceptionOut, gt: Observation) -> float:
    dets, truth = list(p.detections), list(gt.detections)
    if not dets and not truth:
        return 0.0
    pairs = []
    for i, d in enumerate(dets):
        for j, g in enumerate(truth):
            if d.view is g.view:
                v = iou(d.box, g.box)
                if v > 0:
                    pairs.append((-v, i, j))
    pairs.sort()
    used_d: set[int] = set()
    used_g: set[int] = set()
    raws = []
    for neg, i, j in pairs:
        if i in used_d or j in used_g:
            continue
        used_d.add(i)
        used_g.add(j)
        raws.append(label_dissimilarity(dets[i].label, truth[j].label) + neg)
    raws.extend([1.0] * (len(dets) - len(used_d) + len(truth) - len(used_g)))
    return (sum(raws) / len(raws) + 1.0) / 2.0


def memory_error(m: MemorySnapshot, gt_history: Sequence[set[str]]) -> float:
    """``gt_history[k-1]`` is the ground-truth label set seen at step ``k``."""
    if not gt_history:
        return 0.0
    recalled = m.by_step()
    total = 0.0
    for k, truth in enumerate(gt_history, start=1):
        entry = recalled.get(k)
        if entry is None:
            continue
        got = entry.labels()
        union = got | truth
        total += 1.0 if not union else len(got & truth) / len(union)
    return 1.0 - total / len(gt_history)


def planning_error(plan: PlannedRoute, expert: Sequence[Cell], d_th: float) -> float:
    return 1.0 - ndtw(plan.waypoints, expert, d_th)


def decision_error(d: Action, d_pl: Action) -> float:
    return 0.0 if d is d_pl else 1.0


def step_errors(trace: EpisodeTrace, cfg: OracleConfig) -> list[dict[Capability, float]]:
    """Raw ε of every capability at every step (memory is 0 at t = 1)."""
    out = []
    history: list[set[str]] = []
    for s in trace.steps:
        if s.expert_suffix is None:
            raise ValueError("trace lacks expert suffixes; rerun with record_expert=True")
        out.append({
            Capability.PERCEPTION: perception_error(s.perception, s.observation_gt),
            Capability.MEMORY: memory_error(s.memory, history) if history else 0.0,
            Capability.PLANNING: planning_error(s.plan, s.expert_suffix, cfg.d_th),
            Capability.DECISION: decision_error(s.decision, s.planned_action),
        })
        history.append(s.observation_gt.labels())
    return out


def detect_errors(trace: EpisodeTrace, cfg: OracleConfig = OracleConfig()) -> list[CapabilityError]:
    errors = []
    for s, eps in zip(trace.steps, step_errors(trace, cfg)):
        for cap in CAPABILITY_RANK:
            theta = cfg.threshold(cap)
            if eps[cap] >= theta:
                errors.append(CapabilityError(cap, s.t, eps[cap], theta))
    errors.sort(key=CapabilityError.sort_key)
    return errors


def expected_memory(trace: EpisodeTrace, t: int) -> MemorySnapshot:
    return gt_memory(trace.steps[: t - 1])
