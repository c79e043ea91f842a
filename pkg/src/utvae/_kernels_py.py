"""Pure-Python ball-tree query kernels.

Same signatures and results as the compiled ``_kernels`` extension; used
when the extension is not built or ``UTVAE_PURE_PYTHON=1``.
"""

import numpy as np


def radius_count(data, idx, start, end, center, radius, left, right,
                 node_treated, labels, queries, eps, slack):
    """(treated, total) neighbour counts within ``eps`` for every query row."""
    nq = queries.shape[0]
    treated = np.zeros(nq, dtype=np.int64)
    total = np.zeros(nq, dtype=np.int64)
    eps2 = eps * eps
    for qi in range(nq):
        q = queries[qi]
        nt = 0
        nn = 0
        stack = [0]
        while stack:
            node = stack.pop()
            diff = center[node] - q
            dist = np.sqrt(diff @ diff)
            if dist - radius[node] > eps + slack:
                continue
            if dist + radius[node] < eps - slack:
                nn += end[node] - start[node]
                nt += node_treated[node]
                continue
            if left[node] < 0:
                members = idx[start[node]:end[node]]
                d = data[members] - q
                hit = np.einsum("ij,ij->i", d, d) <= eps2
                nn += int(hit.sum())
                nt += int(labels[members[hit]].sum())
                continue
            stack.append(right[node])
            stack.append(left[node])
        treated[qi] = nt
        total[qi] = nn
    return treated, total


def query_radius(data, idx, start, end, center, radius, left, right, q, eps, slack):
    """Sorted indices of the points within ``eps`` of ``q``."""
    eps2 = eps * eps
    found = []
    stack = [0]
    while stack:
        node = stack.pop()
        diff = center[node] - q
        dist = np.sqrt(diff @ diff)
        if dist - radius[node] > eps + slack:
            continue
        if left[node] < 0:
            members = idx[start[node]:end[node]]
            d = data[members] - q
            found.extend(members[np.einsum("ij,ij->i", d, d) <= eps2].tolist())
            continue
        stack.append(right[node])
        stack.append(left[node])
    return np.array(sorted(found), dtype=np.int64)
