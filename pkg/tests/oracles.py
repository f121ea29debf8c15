"""Independent brute-force references shared by the unit and acceptance tests."""


def brute_matching(ps, gs, ok) -> int:
    """Largest one-to-one matching by exhaustive search."""
    best = 0

    def rec(i, used, n):
        nonlocal best
        if i == len(ps):
            best = max(best, n)
            return
        rec(i + 1, used, n)
        for j in range(len(gs)):
            if j not in used and ok(ps[i], gs[j]):
                rec(i + 1, used | {j}, n + 1)

    rec(0, frozenset(), 0)
    return best


def f1(tp, n_pred, n_gt):
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if tp == 0:
        return 0.0
    return 2 * tp / (n_pred + n_gt)


def hand_iou(a, b):
    fa, fb = set(range(a[0], a[1] + 1)), set(range(b[0], b[1] + 1))
    return len(fa & fb) / len(fa | fb)


def edit_distance(a: str, b: str) -> int:
    """Plain Wagner-Fischer table."""
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]
