"""Reference computations that share no code with the package.

Everything here works on plain Python numbers (``fractions.Fraction`` where
exactness matters) so it can check the vectorized numpy paths.
"""

from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np


def _exact(x):
    return x if isinstance(x, (Fraction, int)) else Fraction(float(x))


def exact_risks(q, L):
    """Bayes risk of every action, in exact rational arithmetic.

    Entries may be floats (taken at their binary value) or Fractions.
    """
    C = len(q)
    qf = [_exact(x) for x in q]
    Lf = [[_exact(L[a][b]) for b in range(C)] for a in range(C)]
    return [sum(qf[a] * Lf[a][b] for a in range(C)) for b in range(C)]


def exhaustive_mbr(q, L):
    """Smallest action index among those with minimal exact risk."""
    risks = exact_risks(q, L)
    best = min(risks)
    return risks.index(best)


def weighted_median(values, weights):
    """Smallest value whose cumulative weight reaches half the total."""
    total = Fraction(0)
    ws = [_exact(w) for w in weights]
    half = sum(ws) / 2
    for v, w in sorted(zip(values, ws)):
        total += w
        if total >= half:
            return v
    raise AssertionError("unreachable")


def l1_matrix(values):
    return [[abs(a - b) for b in values] for a in values]


def kuhn_cells(m: int, d: int):
    """Vertex lists (scaled cumulative coordinates) of all Kuhn simplices of
    the grid ``[0, m]^d`` lying in ``0 <= y_0 <= ... <= y_{d-1} <= m``."""
    cells = []
    for base in itertools.product(range(m), repeat=d):
        for perm in itertools.permutations(range(d)):
            verts = [list(base)]
            for k in perm:
                v = list(verts[-1])
                v[k] += 1
                verts.append(v)
            if all(all(v[i] <= v[i + 1] for i in range(d - 1)) for v in verts):
                cells.append(np.array(verts, dtype=float))
    return cells


def locate(y, cells, tol=1e-12):
    """Indices of the cells whose closure contains ``y``."""
    hits = []
    for idx, V in enumerate(cells):
        # barycentric coordinates: y = V0 + sum_k lam_k (V_k - V0)
        A = (V[1:] - V[0]).T
        lam = np.linalg.solve(A, np.asarray(y) - V[0])
        bary = np.concatenate([[1 - lam.sum()], lam])
        if np.all(bary >= -tol):
            hits.append(idx)
    return hits


def simplex_volume(V):
    A = (V[1:] - V[0]).T
    return abs(np.linalg.det(A))
