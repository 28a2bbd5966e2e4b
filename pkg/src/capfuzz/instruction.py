"""Task instructions: the structured test case, its text form, and mutation operators."""
from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field, replace
from typing import Union

from .world import Cell, Scene, UnreachableGoalError, chain_route


class InstructionError(ValueError):
    pass


class NoValidGoalError(InstructionError):
    pass


class NoAlternativeObjectError(InstructionError):
    pass


class NoAlternativeRoomError(InstructionError):
    pass


class ParseError(InstructionError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class MutationKind(enum.Enum):
    MILD = "Mild"
    AGGRESSIVE = "Aggressive"


@dataclass(frozen=True)
class Via:
    room: str


@dataclass(frozen=True)
class Avoid:
    room: str


@dataclass(frozen=True)
class PassBefore:
    landmark: str
    target: str


Constraint = Union[Via, Avoid, PassBefore]


@dataclass(frozen=True)
class Lineage:
    parent: str
    kind: MutationKind


@dataclass(frozen=True)
class TaskInstruction:
    target_room: str
    target_object: str
    constraints: tuple[Constraint, ...] = ()
    case_id: str = field(default="", compare=False)
    lineage: Lineage | None = field(default=None, compare=False)

    @property
    def text(self) -> str:
        return render_text(self)


@dataclass(frozen=True)
class ResolvedTask:
    """An instruction grounded in a scene: goal cell, ordered waypoint regions, banned cells."""

    goal: frozenset[Cell]
    waypoints: tuple[frozenset[Cell], ...]
    avoid: frozenset[Cell]


# ------------------------------------------------------------------ text

def _clause(c: Constraint) -> str:
    if isinstance(c, Via):
        return f"passing through the {c.room}"
    if isinstance(c, Avoid):
        return f"avoiding the {c.room}"
    return f"passing the {c.landmark} before the {c.target}"


def render_text(instr: TaskInstruction) -> str:
    clauses = "".join(", " + _clause(c) for c in instr.constraints)
    return f"Go to the {instr.target_room}{clauses} and stop at the {instr.target_object}."


class _Cursor:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def literal(self, lit: str) -> bool:
        if self.text.startswith(lit, self.pos):
            self.pos += len(lit)
            return True
        return False

    def expect(self, lit: str) -> None:
        if not self.literal(lit):
            raise ParseError(f"expected {lit!r}", self.pos)

    def label(self, choices, kind: str) -> str:
        # Longest match so "living room" wins over any shorter prefix.
        for choice in sorted(choices, key=len, reverse=True):
            if self.text.startswith(choice, self.pos):
                self.pos += len(choice)
                return choice
        raise ParseError(f"expected {kind} label", self.pos)


def parse_text(text: str, scene: Scene, case_id: str = "") -> TaskInstruction:
    """Parse the template grammar produced by :func:`render_text`."""
    rooms = [r.label for r in scene.rooms]
    objects = sorted({o.label for o in scene.objects})
    cur = _Cursor(text)
    cur.expect("Go to the")
    if cur.pos == len(text):
        raise ParseError("missing room label", cur.pos)
    cur.expect(" ")
    room = cur.label(rooms, "room")
    constraints: list[Constraint] = []
    while cur.literal(", "):
        if cur.literal("passing through the "):
            constraints.append(Via(cur.label(rooms, "room")))
        elif cur.literal("avoiding the "):
            constraints.append(Avoid(cur.label(rooms, "room")))
        elif cur.literal("passing the "):
            landmark = cur.label(objects, "object")
            cur.expect(" before the ")
            constraints.append(PassBefore(landmark, cur.label(objects, "object")))
        else:
            raise ParseError("expected a constraint clause", cur.pos)
    cur.expect(" and stop at the ")
    obj = cur.label(objects, "object")
    cur.expect(".")
    if cur.pos != len(text):
        raise ParseError("trailing text", cur.pos)
    instr = TaskInstruction(room, obj, tuple(constraints), case_id=case_id)
    validate(instr, scene)
    return instr


# ------------------------------------------------------------- grounding

def _landmark(scene: Scene, label: str):
    found = [o for o in scene.objects if o.label == label]
    if len(found) != 1:
        raise InstructionError(f"landmark {label!r} is not unique in the scene")
    return found[0]


def resolve(instr: TaskInstruction, scene: Scene) -> ResolvedTask:
    try:
        target = scene.find_object(instr.target_room, instr.target_object)
    except KeyError as exc:
        raise InstructionError(str(exc)) from None
    avoid: set[Cell] = set()
    for c in instr.constraints:
        if isinstance(c, Avoid):
            if c.room == instr.target_room:
                raise InstructionError("cannot avoid the target room")
            avoid |= scene.room_cells(c.room)
    waypoints = []
    for c in instr.constraints:
        if isinstance(c, Via):
            if c.room == instr.target_room:
                raise InstructionError("via room must differ from the target room")
            region = scene.room_cells(c.room) - avoid
        elif isinstance(c, PassBefore):
            if c.target != instr.target_object or c.landmark == c.target:
                raise InstructionError("pass-before must precede the target object")
            ax, ay = _landmark(scene, c.landmark).anchor
            region = frozenset(
                cell for cell in ((ax, ay), (ax, ay - 1), (ax + 1, ay), (ax, ay + 1), (ax - 1, ay))
                if scene.is_free(cell) and cell not in avoid
            )
        else:
            continue
        if not region:
            raise InstructionError(f"constraint {c} has no admissible cells")
        waypoints.append(frozenset(region))
    return ResolvedTask(frozenset([target.anchor]), tuple(waypoints), frozenset(avoid))


def validate(instr: TaskInstruction, scene: Scene) -> ResolvedTask:
    """Resolve and check the goal is reachable from the scene start."""
    task = resolve(instr, scene)
    try:
        chain_route(scene, scene.start, task.waypoints, task.goal, task.avoid, strict=True)
    except UnreachableGoalError as exc:
        raise InstructionError(f"instruction not satisfiable: {exc}") from None
    return task


def waypoint_progress(task: ResolvedTask, positions) -> int:
    """Number of leading waypoints satisfied, in order, by a position history."""
    k = 0
    n = len(task.waypoints)
    for pos in positions:
        while k < n and pos in task.waypoints[k]:
            k += 1
    return k


def is_valid(instr: TaskInstruction, scene: Scene) -> bool:
    try:
        validate(instr, scene)
    except InstructionError:
        return False
    return True


# ------------------------------------------------------------ generation

def _populated_rooms(scene: Scene) -> list[str]:
    return [r.label for r in scene.rooms if scene.objects_in(r.label)]


def _constraint_options(scene: Scene, room: str, obj: str) -> list[Constraint]:
    others = [r.label for r in scene.rooms if r.label != room]
    options: list[Constraint] = [Via(r) for r in others] + [Avoid(r) for r in others]
    counts: dict[str, int] = {}
    for o in scene.objects:
        counts[o.label] = counts.get(o.label, 0) + 1
    options += [PassBefore(lbl, obj) for lbl in sorted(counts) if counts[lbl] == 1 and lbl != obj]
    return options


def _pick_constraint(rng: random.Random, scene: Scene, room: str, obj: str) -> tuple[Constraint, ...]:
    kinds = [Via, Avoid, PassBefore]
    options = _constraint_options(scene, room, obj)
    rng.shuffle(kinds)
    for kind in kinds:
        pool = [c for c in options if isinstance(c, kind)]
        rng.shuffle(pool)
        for c in pool:
            if is_valid(TaskInstruction(room, obj, (c,)), scene):
                return (c,)
    return ()


def generate_instruction(scene: Scene, rng_seed: int, constraint_prob: float = 0.3) -> TaskInstruction:
    rng = random.Random(rng_seed)
    pairs = sorted({(r, o.label) for r in _populated_rooms(scene) for o in scene.objects_in(r)})
    pairs = [p for p in pairs if is_valid(TaskInstruction(*p), scene)]
    if not pairs:
        raise NoValidGoalError("scene has no reachable (room, object) pair")
    room, obj = pairs[rng.randrange(len(pairs))]
    constraints: tuple[Constraint, ...] = ()
    if rng.random() < constraint_prob:
        constraints = _pick_constraint(rng, scene, room, obj)
    return TaskInstruction(room, obj, constraints, case_id=f"gen-{rng_seed}")


# -------------------------------------------------------------- mutation

def _carry_constraints(scene: Scene, constraints, room: str, obj: str) -> tuple[Constraint, ...]:
    kept: list[Constraint] = []
    for c in constraints:
        if isinstance(c, PassBefore):
            c = PassBefore(c.landmark, obj)
        candidate = TaskInstruction(room, obj, (*kept, c))
        if is_valid(candidate, scene):
            kept.append(c)
    return tuple(kept)


def mild_mutation(instr: TaskInstruction, scene: Scene, rng_seed: int) -> TaskInstruction:
    """Swap the target object for another one in the same room."""
    rng = random.Random(rng_seed)
    alternatives = sorted({o.label for o in scene.objects_in(instr.target_room)} - {instr.target_object})
    if not alternatives:
        raise NoAlternativeObjectError(f"{instr.target_room!r} holds a single object")
    obj = alternatives[rng.randrange(len(alternatives))]
    constraints = _carry_constraints(scene, instr.constraints, instr.target_room, obj)
    return TaskInstruction(
        instr.target_room, obj, constraints,
        case_id=instr.case_id, lineage=Lineage(instr.case_id, MutationKind.MILD),
    )


def aggressive_mutation(instr: TaskInstruction, scene: Scene, rng_seed: int) -> TaskInstruction:
    """Move the destination to a different room and sample an object there."""
    rng = random.Random(rng_seed)
    rooms = [r for r in _populated_rooms(scene) if r != instr.target_room]
    if not rooms:
        raise NoAlternativeRoomError("scene has a single populated room")
    room = rooms[rng.randrange(len(rooms))]
    objects = sorted({o.label for o in scene.objects_in(room)})
    obj = objects[rng.randrange(len(objects))]
    constraints = _carry_constraints(scene, instr.constraints, room, obj)
    return TaskInstruction(
        room, obj, constraints,
        case_id=instr.case_id, lineage=Lineage(instr.case_id, MutationKind.AGGRESSIVE),
    )


def mutation_probability(score: float, all_scores) -> float:
    lo = min(all_scores)
    hi = max(all_scores)
    if hi == lo:
        return 0.5
    return min(1.0, max(0.0, (score - lo) / (hi - lo)))


def mutate(instr: TaskInstruction, scene: Scene, use_mild: bool, rng_seed: int) -> TaskInstruction:
    """Apply the chosen operator, falling back to the other when it is inapplicable."""
    first, second = (mild_mutation, aggressive_mutation) if use_mild else (aggressive_mutation, mild_mutation)
    try:
        return first(instr, scene, rng_seed)
    except (NoAlternativeObjectError, NoAlternativeRoomError):
        return second(instr, scene, rng_seed)


# ------------------------------------------------------------- records

def constraint_to_dict(c: Constraint) -> dict:
    if isinstance(c, Via):
        return {"kind": "Via", "room": c.room}
    if isinstance(c, Avoid):
        return {"kind": "Avoid", "room": c.room}
    return {"kind": "PassBefore", "landmark": c.landmark, "target": c.target}


def constraint_from_dict(d: dict) -> Constraint:
    kind = d["kind"]
    if kind == "Via":
        return Via(d["room"])
    if kind == "Avoid":
        return Avoid(d["room"])
    if kind == "PassBefore":
        return PassBefore(d["landmark"], d["target"])
    raise ValueError(f"unknown constraint kind {kind!r}")


def instruction_to_dict(instr: TaskInstruction) -> dict:
    return {
        "case_id": instr.case_id,
        "target_room": instr.target_room,
        "target_object": instr.target_object,
        "constraints": [constraint_to_dict(c) for c in instr.constraints],
        "text": render_text(instr),
        "lineage": None if instr.lineage is None else {
            "parent": instr.lineage.parent, "kind": instr.lineage.kind.value,
        },
    }


def instruction_from_dict(d: dict) -> TaskInstruction:
    lin = d.get("lineage")
    return TaskInstruction(
        d["target_room"],
        d["target_object"],
        tuple(constraint_from_dict(c) for c in d.get("constraints", ())),
        case_id=d.get("case_id", ""),
        lineage=None if lin is None else Lineage(lin["parent"], MutationKind(lin["kind"])),
    )


def with_case_id(instr: TaskInstruction, case_id: str) -> TaskInstruction:
    return replace(instr, case_id=case_id)
