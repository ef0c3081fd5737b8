"""Pure-Python dynamic-programming kernels.

Reference implementation of the routines in ``_kernels.pyx``. Both modules
must return identical results; ``spanrewrite.kernels`` picks one at import.
"""

MATCH = 0
SUBSTITUTE = 1
DELETE = 2
INSERT = 3


def _table(a, b):
    n, m = len(a), len(b)
    prev = list(range(m + 1))
    rows = [prev]
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        ai = a[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if ai == b[j - 1] else 1)
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            cur[j] = best
        rows.append(cur)
        prev = cur
    return rows


def levenshtein(a, b):
    n, m = len(a), len(b)
    if n < m:
        a, b, n, m = b, a, m, n
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        ai = a[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1] + (0 if ai == b[j - 1] else 1)
            if prev[j] + 1 < best:
                best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            cur[j] = best
        prev = cur
    return prev[m]


def edit_ops(a, b):
    """Minimal edit script turning ``a`` into ``b``.

    Returns ``(op, i, j)`` triples in left-to-right order, where ``i`` indexes
    ``a`` and ``j`` indexes ``b``. The backtrace runs from the end and prefers
    match, then substitute, delete, insert, which places indels leftmost.
    """
    d = _table(a, b)
    i, j = len(a), len(b)
    ops = []
    while i > 0 or j > 0:
        here = d[i][j]
        if i > 0 and j > 0 and a[i - 1] == b[j - 1] and here == d[i - 1][j - 1]:
            ops.append((MATCH, i - 1, j - 1))
            i -= 1
            j -= 1
        elif i > 0 and j > 0 and here == d[i - 1][j - 1] + 1:
            ops.append((SUBSTITUTE, i - 1, j - 1))
            i -= 1
            j -= 1
        elif i > 0 and here == d[i - 1][j] + 1:
            ops.append((DELETE, i - 1, j))
            i -= 1
        else:
            ops.append((INSERT, i, j - 1))
            j -= 1
    ops.reverse()
    return ops


def lcs_length(a, b):
    n, m = len(a), len(b)
    if n < m:
        a, b, n, m = b, a, m, n
    prev = [0] * (m + 1)
    for i in range(1, n + 1):
        cur = [0] * (m + 1)
        ai = a[i - 1]
        for j in range(1, m + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = prev[j] if prev[j] >= cur[j - 1] else cur[j - 1]
        prev = cur
    return prev[m]
