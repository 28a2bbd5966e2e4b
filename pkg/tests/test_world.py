import math
import random

import pytest

from capfuzz.world import (
    Action,
    AgentState,
    Heading,
    OutcomeKind,
    Rect,
    Room,
    Scene,
    SceneGenerationError,
    SceneObject,
    SceneParams,
    UnreachableGoalError,
    View,
    chain_route,
    classify_outcome,
    dumps_scene,
    expert_route,
    generate_scene,
    loads_scene,
    observe,
    route,
    step,
)
from _reference import geodesic, line_cells


def open_scene(w=20, h=20, walls=(), objects=(), start=(0, 0)):
    objs = tuple(SceneObject(label, a, Rect(a[0], a[1], a[0] + 1, a[1] + 1)) for label, a in objects)
    return Scene(w, h, frozenset(walls), (Room("office", Rect(0, 0, w, h)),), objs, start)


# ---------------------------------------------------------------- generation

def test_generation_is_deterministic():
    assert dumps_scene(generate_scene(7)) == dumps_scene(generate_scene(7))


def test_different_seeds_differ():
    assert dumps_scene(generate_scene(7)) != dumps_scene(generate_scene(8))


def test_minimal_params():
    p = SceneParams(min_rooms=1, max_rooms=1, min_objects=1, max_objects=1)
    sc = generate_scene(3, p)
    assert len(sc.rooms) == 1 and len(sc.objects) == 1


@pytest.mark.parametrize("seed", range(40))
def test_scene_invariants(seed):
    sc = generate_scene(seed)
    for i, r in enumerate(sc.rooms):
        g = r.region
        assert 0 <= g.x0 and 0 <= g.y0 and g.x1 <= sc.width and g.y1 <= sc.height
        for other in sc.rooms[i + 1:]:
            assert not set(g.cells()) & set(other.region.cells())
    for o in sc.objects:
        assert sum(r.region.contains(o.anchor) for r in sc.rooms) == 1
        assert o.anchor not in sc.walls
    assert sc.start not in sc.walls
    # Every free cell is reachable from the start.
    free = sc.free_cells
    for o in sc.objects:
        assert geodesic(free, sc.start, o.anchor) < math.inf


def test_infeasible_packing_raises():
    p = SceneParams(width=8, height=8, min_rooms=6, max_rooms=6, room_min=5, room_max=6, max_retries=5)
    with pytest.raises(SceneGenerationError):
        generate_scene(0, p)


def test_scene_roundtrip():
    sc = generate_scene(11)
    back = loads_scene(dumps_scene(sc))
    assert back == sc and dumps_scene(back) == dumps_scene(sc)


# ------------------------------------------------------------------ dynamics

def test_move_forward_east():
    sc = open_scene()
    s = step(sc, AgentState((2, 2), Heading.EAST), Action.MOVE_FORWARD)
    assert s.position == (3, 2) and s.step_index == 1


def test_turns():
    sc = open_scene()
    assert step(sc, AgentState((2, 2), Heading.NORTH), Action.TURN_LEFT).heading is Heading.WEST
    assert step(sc, AgentState((2, 2), Heading.NORTH), Action.TURN_RIGHT).heading is Heading.EAST
    assert step(sc, AgentState((2, 2), Heading.WEST), Action.TURN_RIGHT).heading is Heading.NORTH


def test_blocked_move_is_noop():
    sc = open_scene(walls=[(3, 2)])
    s = step(sc, AgentState((2, 2), Heading.EAST, 4), Action.MOVE_FORWARD)
    assert s.position == (2, 2) and s.step_index == 5
    # Grid edge blocks too. North is y - 1.
    s = step(sc, AgentState((0, 0), Heading.NORTH), Action.MOVE_FORWARD)
    assert s.position == (0, 0)


# ---------------------------------------------------------------- perception

def test_object_ahead_seen_in_forward_view():
    sc = open_scene(objects=[("desk", (10, 5))], start=(10, 10))
    obs = observe(sc, AgentState((10, 10), Heading.NORTH))
    assert [(d.view, d.label) for d in obs.detections] == [(View.FORWARD, "desk")]


def test_object_behind_wall_is_hidden():
    walls = [(x, 7) for x in range(5, 15)]
    sc = open_scene(walls=walls, objects=[("desk", (10, 5))])
    assert observe(sc, AgentState((10, 10), Heading.NORTH)).detections == ()


def test_rear_is_invisible():
    sc = open_scene(objects=[("desk", (10, 14))])
    assert observe(sc, AgentState((10, 10), Heading.NORTH)).detections == ()


def test_sight_range_boundary_inclusive():
    sc = open_scene(objects=[("desk", (10, 2)), ("lamp", (10, 1))])
    labels = observe(sc, AgentState((10, 10), Heading.NORTH)).labels()
    assert labels == {"desk"}  # distance 8 seen, 9 not


def oracle_view(dx, dy, heading):
    """Angle-based view assignment: forward within 45 degrees, sides to 135, rear beyond."""
    hx, hy = heading.vector
    rx, ry = heading.right().vector
    ang = round(math.degrees(math.atan2(dx * rx + dy * ry, dx * hx + dy * hy)), 9)
    if -45 <= ang <= 45:
        return View.FORWARD
    if 45 < ang <= 135:
        return View.RIGHT
    if -135 <= ang < -45:
        return View.LEFT
    return None


@pytest.mark.parametrize("seed", range(6))
def test_observe_matches_brute_force_oracle(seed):
    rng = random.Random(seed)
    walls = {(rng.randrange(20), rng.randrange(20)) for _ in range(60)}
    start = (10, 10)
    walls.discard(start)
    free = [(x, y) for x in range(20) for y in range(20) if (x, y) not in walls]
    anchors = rng.sample(free, 25)
    sc = open_scene(walls=walls, objects=[("desk", a) for a in anchors], start=start)
    for heading in Heading:
        got = {(d.view, round(d.distance, 9)) for d in observe(sc, AgentState(start, heading)).detections}
        want = set()
        for a in anchors:
            dx, dy = a[0] - start[0], a[1] - start[1]
            if math.hypot(dx, dy) > 8:
                continue
            v = oracle_view(dx, dy, heading)
            if v is None or any(c in walls for c in line_cells(*start, *a)):
                continue
            want.add((v, round(math.hypot(dx, dy), 9)))
        assert got == want


# ------------------------------------------------------------------- routes

def test_route_identity():
    sc = open_scene()
    assert expert_route(sc, (3, 3), [(3, 3)]) == [(3, 3)]


def test_route_open_grid_length():
    sc = open_scene(5, 5)
    path = expert_route(sc, (0, 0), [(4, 4)])
    assert len(path) == 9 == geodesic(sc.free_cells, (0, 0), (4, 4)) + 1


def test_route_tie_break_north_first():
    sc = open_scene(5, 5)
    # Going from (0, 4) to (4, 0): N is preferred at every tie, so it climbs first.
    path = route(sc, (0, 4), [(4, 0)])
    assert path[:5] == [(0, 4), (0, 3), (0, 2), (0, 1), (0, 0)]


def test_route_unreachable():
    walls = [(1, 0), (0, 1), (1, 1)]
    sc = open_scene(5, 5, walls=walls, start=(4, 4))
    with pytest.raises(UnreachableGoalError):
        route(sc, (4, 4), [(0, 0)])


@pytest.mark.parametrize("seed", range(15))
def test_routes_are_shortest_on_generated_scenes(seed):
    sc = generate_scene(seed)
    rng = random.Random(seed)
    free = sorted(sc.free_cells)
    for _ in range(5):
        a, b = rng.sample(free, 2)
        path = route(sc, a, [b])
        assert len(path) - 1 == geodesic(sc.free_cells, a, b)


def test_route_avoids_region_when_possible():
    sc = open_scene(7, 3)
    avoid = {(3, 1)}
    path = route(sc, (0, 1), [(6, 1)], avoid)
    assert not set(path) & avoid and len(path) == 9


def test_route_leaves_avoided_region_first():
    sc = open_scene(7, 3)
    avoid = {(2, 0), (2, 1), (2, 2), (3, 0), (3, 1), (3, 2)}
    # Starting inside the band, the nearest exit is one step east.
    path = route(sc, (3, 1), [(6, 1)], avoid)
    assert path == [(3, 1), (4, 1), (5, 1), (6, 1)]


def test_route_crosses_avoided_region_when_stranded():
    sc = open_scene(7, 3)
    band = {(3, y) for y in range(3)}
    path = route(sc, (0, 1), [(6, 1)], band)
    assert path[0] == (0, 1) and path[-1] == (6, 1) and len(path) == 7


def test_chain_route_visits_waypoints_in_order():
    sc = open_scene(10, 10)
    path = chain_route(sc, (0, 0), [[(9, 0)], [(9, 9)]], [(0, 9)])
    assert path.index((9, 0)) < path.index((9, 9)) < len(path)
    assert len(path) - 1 == 27


# ------------------------------------------------------------------ outcome

def test_outcome_fail_step_first():
    sc = open_scene()
    o = classify_outcome(sc, AgentState((0, 0), Heading.NORTH, 41), [(0, 0)], 3, 40, True)
    assert o.kind is OutcomeKind.FAIL_STEP


def test_outcome_success_at_goal():
    sc = open_scene()
    o = classify_outcome(sc, AgentState((5, 5), Heading.NORTH, 10), [(5, 5)], 3, 40, True)
    assert o.kind is OutcomeKind.SUCCESS and o.final_distance == 0


def test_outcome_fail_position_geodesic():
    # A wall makes the geodesic distance 5 although the Euclidean one is 1.
    walls = [(1, y) for y in range(0, 2)]
    sc = open_scene(5, 5, walls=walls)
    d = geodesic(sc.free_cells, (0, 0), (2, 0))
    assert d == 6
    o = classify_outcome(sc, AgentState((0, 0), Heading.NORTH, 3), [(2, 0)], d - 1, 40, True)
    assert o.kind is OutcomeKind.FAIL_POSITION and o.final_distance == d
    o = classify_outcome(sc, AgentState((0, 0), Heading.NORTH, 3), [(2, 0)], d, 40, True)
    assert o.kind is OutcomeKind.SUCCESS


def test_outcome_requires_termination():
    sc = open_scene()
    with pytest.raises(ValueError):
        classify_outcome(sc, AgentState((0, 0), Heading.NORTH, 3), [(0, 0)], 3, 40, False)
