# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled grid and trajectory kernels. Mirrors ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()

cdef int _DX[4]
cdef int _DY[4]
_DX[:] = [0, 1, 0, -1]
_DY[:] = [-1, 0, 1, 0]


cdef inline long _floordiv(long a, long b) nogil:
    # b > 0 here
    cdef long q = a / b
    if (a % b != 0) and (a < 0):
        q -= 1
    return q


def bfs_field(passable, sources):
    cdef const cnp.uint8_t[:, ::1] grid = np.ascontiguousarray(passable, dtype=np.uint8)
    cdef Py_ssize_t h = grid.shape[0]
    cdef Py_ssize_t w = grid.shape[1]
    out = np.full((h, w), -1, dtype=np.int32)
    cdef cnp.int32_t[:, ::1] dist = out
    cdef cnp.int32_t[::1] qx = np.empty(h * w, dtype=np.int32)
    cdef cnp.int32_t[::1] qy = np.empty(h * w, dtype=np.int32)
    cdef Py_ssize_t head = 0, tail = 0
    cdef int x, y, nx, ny, k, d
    for sx, sy in sources:
        x = int(sx)
        y = int(sy)
        if 0 <= x < w and 0 <= y < h and grid[y, x] and dist[y, x] < 0:
            dist[y, x] = 0
            qx[tail] = x
            qy[tail] = y
            tail += 1
    with nogil:
        while head < tail:
            x = qx[head]
            y = qy[head]
            head += 1
            d = dist[y, x] + 1
            for k in range(4):
                nx = x + _DX[k]
                ny = y + _DY[k]
                if 0 <= nx < w and 0 <= ny < h and grid[ny, nx] and dist[ny, nx] < 0:
                    dist[ny, nx] = d
                    qx[tail] = nx
                    qy[tail] = ny
                    tail += 1
    return out


def descend(dist_in, start):
    cdef const cnp.int32_t[:, ::1] dist = np.ascontiguousarray(dist_in, dtype=np.int32)
    cdef Py_ssize_t h = dist.shape[0]
    cdef Py_ssize_t w = dist.shape[1]
    cdef int x = int(start[0]), y = int(start[1])
    cdef int nx, ny, k, d
    if not (0 <= x < w and 0 <= y < h) or dist[y, x] < 0:
        return []
    path = [(x, y)]
    d = dist[y, x]
    while d > 0:
        for k in range(4):
            nx = x + _DX[k]
            ny = y + _DY[k]
            if 0 <= nx < w and 0 <= ny < h and dist[ny, nx] == d - 1:
                x = nx
                y = ny
                break
        else:
            raise RuntimeError("broken distance field")
        d -= 1
        path.append((x, y))
    return path


def dtw(a_in, b_in):
    cdef const cnp.float64_t[:, ::1] a = np.ascontiguousarray(np.asarray(a_in, dtype=np.float64).reshape(-1, 2))
    cdef const cnp.float64_t[:, ::1] b = np.ascontiguousarray(np.asarray(b_in, dtype=np.float64).reshape(-1, 2))
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    if n == 0 or m == 0:
        raise ValueError("dtw needs non-empty sequences")
    cdef cnp.float64_t[::1] prev = np.full(m + 1, INFINITY)
    cdef cnp.float64_t[::1] cur = np.full(m + 1, INFINITY)
    cdef cnp.float64_t[::1] tmp
    cdef Py_ssize_t i, j
    cdef double cost, best, ddx, ddy
    prev[0] = 0.0
    with nogil:
        for i in range(n):
            cur[0] = INFINITY
            for j in range(m):
                ddx = a[i, 0] - b[j, 0]
                ddy = a[i, 1] - b[j, 1]
                cost = sqrt(ddx * ddx + ddy * ddy)
                best = prev[j]
                if prev[j + 1] < best:
                    best = prev[j + 1]
                if cur[j] < best:
                    best = cur[j]
                cur[j + 1] = cost + best
            tmp = prev
            prev = cur
            cur = tmp
    return float(prev[m])


cdef bint _line_clear(const cnp.uint8_t[:, ::1] grid, long x0, long y0, long x1, long y1) nogil:
    cdef long dx = x1 - x0
    cdef long dy = y1 - y0
    cdef long n = dx if dx >= 0 else -dx
    cdef long ady = dy if dy >= 0 else -dy
    cdef long k, cx, cy
    if ady > n:
        n = ady
    for k in range(1, n):
        cx = x0 + _floordiv(2 * k * dx + n, 2 * n)
        cy = y0 + _floordiv(2 * k * dy + n, 2 * n)
        if not grid[cy, cx]:
            return False
    return True


def line_clear(passable, long x0, long y0, long x1, long y1):
    cdef const cnp.uint8_t[:, ::1] grid = np.ascontiguousarray(passable, dtype=np.uint8)
    return bool(_line_clear(grid, x0, y0, x1, y1))


def lines_clear(passable, long x0, long y0, targets):
    cdef const cnp.uint8_t[:, ::1] grid = np.ascontiguousarray(passable, dtype=np.uint8)
    cdef Py_ssize_t i, n = len(targets)
    out = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] res = out
    for i in range(n):
        tx, ty = targets[i]
        res[i] = _line_clear(grid, x0, y0, int(tx), int(ty))
    return out
