"""Pure-Python implementations of the grid and trajectory kernels.

Used when the compiled extension is unavailable or when
``CAPFUZZ_PURE_PYTHON=1`` is set. Semantics must match ``_ckernels.pyx``
exactly; the test-suite runs both side by side.
"""
from collections import deque
import math

import numpy as np

# N, E, S, W -- fixed neighbour order for BFS and path descent.
_NEIGHBOURS = ((0, -1), (1, 0), (0, 1), (-1, 0))


def bfs_field(passable, sources):
    """Multi-source BFS distance field over a ``(H, W)`` uint8 mask.

    Returns an int32 array with the 4-connected step distance to the nearest
    source, ``-1`` where unreachable. Sources on impassable cells are ignored.
    """
    passable = np.asarray(passable, dtype=np.uint8)
    h, w = passable.shape
    dist = [[-1] * w for _ in range(h)]
    grid = passable.tolist()
    queue = deque()
    for x, y in sources:
        x = int(x)
        y = int(y)
        if 0 <= x < w and 0 <= y < h and grid[y][x] and dist[y][x] < 0:
            dist[y][x] = 0
            queue.append((x, y))
    while queue:
        x, y = queue.popleft()
        d = dist[y][x] + 1
        for dx, dy in _NEIGHBOURS:
            nx = x + dx
            ny = y + dy
            if 0 <= nx < w and 0 <= ny < h and grid[ny][nx] and dist[ny][nx] < 0:
                dist[ny][nx] = d
                queue.append((nx, ny))
    return np.array(dist, dtype=np.int32)


def descend(dist, start):
    """Follow strictly decreasing distances from ``start`` down to a source.

    Ties are broken by neighbour order N, E, S, W. Returns a list of
    ``(x, y)`` tuples, or an empty list when ``start`` is unreachable.
    """
    h, w = dist.shape
    x, y = int(start[0]), int(start[1])
    if not (0 <= x < w and 0 <= y < h) or dist[y, x] < 0:
        return []
    path = [(x, y)]
    d = int(dist[y, x])
    while d > 0:
        for dx, dy in _NEIGHBOURS:
            nx = x + dx
            ny = y + dy
            if 0 <= nx < w and 0 <= ny < h and dist[ny, nx] == d - 1:
                x, y = nx, ny
                break
        else:  # pragma: no cover - impossible for a valid BFS field
            raise RuntimeError("broken distance field")
        d -= 1
        path.append((x, y))
    return path


def dtw(a, b):
    """Classic DTW cost between two 2-D point sequences (Euclidean ground metric)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    n = a.shape[0]
    m = b.shape[0]
    if n == 0 or m == 0:
        raise ValueError("dtw needs non-empty sequences")
    al = a.tolist()
    bl = b.tolist()
    inf = math.inf
    prev = [inf] * (m + 1)
    prev[0] = 0.0
    for i in range(n):
        ax, ay = al[i]
        cur = [inf] * (m + 1)
        for j in range(m):
            bx, by = bl[j]
            cost = math.hypot(ax - bx, ay - by)
            best = prev[j]
            if prev[j + 1] < best:
                best = prev[j + 1]
            if cur[j] < best:
                best = cur[j]
            cur[j + 1] = cost + best
        prev = cur
    return prev[m]


def line_clear(passable, x0, y0, x1, y1):
    """True if no blocked cell lies strictly between the two endpoint cells.

    The discrete line visits ``floor(x0 + k*dx/n + 1/2)`` for ``k = 0..n``
    with ``n = max(|dx|, |dy|)``; computed here in exact integer arithmetic.
    """
    dx = x1 - x0
    dy = y1 - y0
    n = max(abs(dx), abs(dy))
    for k in range(1, n):
        cx = x0 + (2 * k * dx + n) // (2 * n)
        cy = y0 + (2 * k * dy + n) // (2 * n)
        if not passable[cy, cx]:
            return False
    return True


def lines_clear(passable, x0, y0, targets):
    """Vectorised ``line_clear`` from one origin to each ``(x, y)`` target."""
    return np.array(
        [line_clear(passable, x0, y0, int(tx), int(ty)) for tx, ty in targets],
        dtype=np.uint8,
    )
