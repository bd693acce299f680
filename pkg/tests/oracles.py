"""Independent reference implementations used to freeze expected values.

Each one is written for clarity, not speed, and shares no code with the
package under test.
"""

import math


def perp_dist(p, a, b):
    # |cross(b - a, p - a)| / |b - a|, or point distance when a == b
    ax, ay = a
    bx, by = b
    px, py = p
    vx, vy = bx - ax, by - ay
    length = math.sqrt(vx * vx + vy * vy)
    if length == 0.0:
        return math.sqrt((px - ax) ** 2 + (py - ay) ** 2)
    return abs(vx * (ay - py) - (ax - px) * vy) / length


def rdp_literal(traj, eps):
    """Line-by-line transcription of the recursive RDP pseudocode."""
    dmax = 0.0
    index = 0
    end = len(traj) - 1
    for i in range(1, end):
        d = perp_dist(traj[i], traj[0], traj[end])
        if d > dmax:
            index = i
            dmax = d
    if dmax > eps:
        results1 = rdp_literal(traj[0:index + 1], eps)
        results2 = rdp_literal(traj[index:end + 1], eps)
        return results1[:-1] + results2
    return [traj[0], traj[end]]


def _cost(p, q):
    dx = p[0] - q[0]
    dy = p[1] - q[1]
    return math.sqrt(dx * dx + dy * dy)


def warping_paths(m, n):
    """Every monotone, continuous alignment from (0, 0) to (m-1, n-1)."""
    def walk(i, j):
        if (i, j) == (m - 1, n - 1):
            yield [(i, j)]
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < m and j + dj < n:
                for rest in walk(i + di, j + dj):
                    yield [(i, j)] + rest
    return list(walk(0, 0))


def dtw_brute(a, b):
    best = math.inf
    for path in warping_paths(len(a), len(b)):
        total = 0.0
        for i, j in path:
            total = total + _cost(a[i], b[j])
        best = min(best, total)
    return best


def frechet_brute(a, b):
    return min(max(_cost(a[i], b[j]) for i, j in path) for path in warping_paths(len(a), len(b)))


def haversine_oracle(lat1, lon1, lat2, lon2, radius=6371.0088):
    # central angle via the atan2 (Vincenty sphere) form
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dl = math.radians(lon2 - lon1)
    num = math.hypot(math.cos(p2) * math.sin(dl),
                     math.cos(p1) * math.sin(p2) - math.sin(p1) * math.cos(p2) * math.cos(dl))
    den = math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(dl)
    return radius * math.atan2(num, den)


def js_oracle(p, q):
    """Jensen-Shannon divergence, base 2, straight from the definition."""
    sp, sq = sum(p), sum(q)
    p = [x / sp for x in p]
    q = [x / sq for x in q]
    m = [(x + y) / 2 for x, y in zip(p, q)]
    kl = lambda u, v: sum(x * math.log2(x / y) for x, y in zip(u, v) if x > 0)
    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def percentile_inclusive(values, q):
    """Linear interpolation between closest ranks (the 'inclusive' definition)."""
    xs = sorted(values)
    pos = (len(xs) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (xs[hi] - xs[lo]) * (pos - lo)


def central_difference(f, x, h=1e-6):
    return (f(x + h) - f(x - h)) / (2 * h)


def delannoy(m, n):
    """Number of monotone alignments between sequences of length m+1 and n+1."""
    return sum(math.comb(m, k) * math.comb(n, k) * 2 ** k for k in range(min(m, n) + 1))

