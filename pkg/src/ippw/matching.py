"""Full matching on a scalar propensity score.

Units are partitioned into matched sets, each containing exactly one treated
or exactly one control unit ("stars": the singleton side is the center), with
set size capped and an optional caliper on the within-set score range. The
objective is the total treated-control score distance, minimized
lexicographically after the number of dropped units and before the number of
sets:

    minimize (dropped units, total cost, number of sets).

Dropping is how infeasible units exit under a caliper; with no caliper and a
feasible instance the optimum never drops anyone.

The solver is a dynamic program over the two arms sorted by score: every set
is a consecutive run of treated units crossed with a consecutive run of
controls, and runs are consumed in order on both arms simultaneously. For an
absolute-difference cost this run structure contains an optimal solution (an
uncrossing argument; ``brute_force_full_match`` verifies it exhaustively on
small instances). Note the runs are per arm: a set need not be an interval
of the combined sorted order, which is impossible in general (no valid
contiguous partition exists when the combined order looks like T,T,C,C).

Ties are broken deterministically by a fixed transition order, which prefers
small one-treated sets built from the lowest scores first.
"""
import itertools
from dataclasses import dataclass

import numpy as np

from .design import balance_table, from_arrays
from .errors import InfeasibleMatchError

_INT_INF = np.iinfo(np.int32).max


@dataclass(frozen=True)
class MatchSpec:
    caliper: float = None      # max within-set score range; None disables
    max_set_size: int = 8

    def __post_init__(self):
        if self.caliper is not None and not self.caliper > 0:
            raise ValueError(f"caliper must be positive, got {self.caliper}")
        if self.max_set_size < 2:
            raise ValueError("max_set_size must be at least 2")


@dataclass(frozen=True)
class FullMatchResult:
    """A full matching: per-unit set assignment (-1 means dropped)."""

    assignments: np.ndarray
    sets: tuple          # per set, array of original unit indices
    cost: float
    dropped: np.ndarray  # original indices of dropped units, ascending

    @property
    def n_sets(self):
        return len(self.sets)

    @property
    def n_dropped(self):
        return len(self.dropped)

    def set_labels(self, prefix="m"):
        """Per-retained-unit string labels, e.g. 'm0001'."""
        width = max(4, len(str(self.n_sets)))
        return {int(u): f"{prefix}{k + 1:0{width}d}"
                for k, units in enumerate(self.sets) for u in units}


def _sorted_arm(e, z, value):
    idx = np.nonzero(z == value)[0]
    order = np.lexsort((idx, e[idx]))
    idx = idx[order]
    return e[idx], idx


def full_match_dp(e_hat, z, spec=None):
    """Optimal full matching of all units by dynamic programming.

    Raises InfeasibleMatchError when no treated-control set can be formed at
    all (one arm empty, or the caliper excludes every combination).
    """
    spec = spec or MatchSpec()
    e = np.asarray(e_hat, dtype=float)
    z = np.asarray(z)
    if np.any(~np.isfinite(e)):
        raise InfeasibleMatchError("propensity scores must be finite")
    te, t_idx = _sorted_arm(e, z, 1)
    ce, c_idx = _sorted_arm(e, z, 0)
    mt, mc = len(te), len(ce)
    if mt == 0:
        raise InfeasibleMatchError("no treated units to match")
    if mc == 0:
        raise InfeasibleMatchError("no control units to match")

    size = spec.max_set_size
    cal = spec.caliper
    # prefix star costs: r1[i, j] = sum_{t<j} |te[i] - ce[t]|, c1 mirrored
    r1 = np.concatenate([np.zeros((mt, 1)),
                         np.cumsum(np.abs(ce[None, :] - te[:, None]), axis=1)],
                        axis=1)
    c1 = np.concatenate([np.zeros((mc, 1)),
                         np.cumsum(np.abs(te[None, :] - ce[:, None]), axis=1)],
                        axis=1)

    drops = np.full((mt + 1, mc + 1), _INT_INF, dtype=np.int32)
    cost = np.full((mt + 1, mc + 1), np.inf)
    nsets = np.full((mt + 1, mc + 1), _INT_INF, dtype=np.int32)
    parent = np.full((mt + 1, mc + 1), -1, dtype=np.int16)
    drops[0, 0], cost[0, 0], nsets[0, 0] = 0, 0.0, 0
    parent[0, 0] = 0

    def apply(r, js, cand_d, cand_c, cand_s, code):
        better = (cand_d < drops[r, js]) | (
            (cand_d == drops[r, js]) & (
                (cand_c < cost[r, js]) | (
                    (cand_c == cost[r, js]) & (cand_s < nsets[r, js]))))
        if np.any(better):
            js = js[better]
            drops[r, js] = cand_d[better]
            cost[r, js] = cand_c[better]
            nsets[r, js] = cand_s[better]
            parent[r, js] = code

    all_j = np.arange(mc + 1)
    for r in range(mt + 1):
        if r > 0:
            # one treated te[r-1] with b controls ce[j-b .. j-1]
            for b in range(1, min(size - 1, mc) + 1):
                js = all_j[b:]
                ok = drops[r - 1, js - b] < _INT_INF
                if cal is not None:
                    lo = np.minimum(te[r - 1], ce[js - b])
                    hi = np.maximum(te[r - 1], ce[js - 1])
                    ok = ok & (hi - lo <= cal)
                if not np.any(ok):
                    continue
                js = js[ok]
                cand_c = cost[r - 1, js - b] + (r1[r - 1, js] - r1[r - 1, js - b])
                apply(r, js, drops[r - 1, js - b], cand_c,
                      nsets[r - 1, js - b] + 1, 10 + b)
            # one control ce[j-1] with a treated te[r-a .. r-1], a >= 2
            for a in range(2, min(size - 1, r) + 1):
                js = all_j[1:]
                ok = drops[r - a, js - 1] < _INT_INF
                if cal is not None:
                    lo = np.minimum(te[r - a], ce[js - 1])
                    hi = np.maximum(te[r - 1], ce[js - 1])
                    ok = ok & (hi - lo <= cal)
                if not np.any(ok):
                    continue
                js = js[ok]
                cand_c = cost[r - a, js - 1] + (c1[js - 1, r] - c1[js - 1, r - a])
                apply(r, js, drops[r - a, js - 1], cand_c,
                      nsets[r - a, js - 1] + 1, 100 + a)
            # drop treated te[r-1]
            ok = drops[r - 1, :] < _INT_INF
            js = all_j[ok]
            apply(r, js, drops[r - 1, js] + 1, cost[r - 1, js],
                  nsets[r - 1, js], 1)
        # drop control ce[j-1]: sequential carry along the row
        for j in range(1, mc + 1):
            if drops[r, j - 1] >= _INT_INF:
                continue
            d, c, s = drops[r, j - 1] + 1, cost[r, j - 1], nsets[r, j - 1]
            if (d, c, s) < (drops[r, j], cost[r, j], nsets[r, j]):
                drops[r, j], cost[r, j], nsets[r, j] = d, c, s
                parent[r, j] = 2

    if nsets[mt, mc] == 0 or nsets[mt, mc] >= _INT_INF:
        detail = f" under caliper {cal}" if cal is not None else ""
        raise InfeasibleMatchError(
            f"no feasible treated-control set{detail} "
            f"({mt} treated, {mc} controls)")

    # walk the parents back to recover sets and drops
    assignments = np.full(len(e), -1, dtype=np.int64)
    sets_rev = []
    r, j = mt, mc
    while (r, j) != (0, 0):
        code = int(parent[r, j])
        if code == 1:
            r -= 1
        elif code == 2:
            j -= 1
        elif code >= 100:
            a = code - 100
            sets_rev.append(np.sort(np.concatenate(
                [t_idx[r - a:r], c_idx[j - 1:j]])))
            r, j = r - a, j - 1
        else:
            b = code - 10
            sets_rev.append(np.sort(np.concatenate(
                [t_idx[r - 1:r], c_idx[j - b:j]])))
            r, j = r - 1, j - b
    sets = tuple(reversed(sets_rev))
    for k, units in enumerate(sets):
        assignments[units] = k
    dropped = np.nonzero(assignments < 0)[0]
    return FullMatchResult(assignments=assignments, sets=sets,
                           cost=float(cost[mt, mc]), dropped=dropped)


def brute_force_full_match(e_hat, z, spec=None):
    """Exhaustive minimum over all star partitions; oracle for the DP.

    Same lexicographic objective (drops, cost, sets); guarded to N <= 10.
    """
    spec = spec or MatchSpec()
    e = np.asarray(e_hat, dtype=float)
    z = np.asarray(z)
    n = len(e)
    if n > 10:
        raise InfeasibleMatchError(f"brute-force guard: N={n} exceeds 10")

    def subset_state(units):
        m = int(sum(z[u] for u in units))
        k = len(units) - m
        if m < 1 or k < 1 or min(m, k) != 1 or len(units) > spec.max_set_size:
            return None
        es = [e[u] for u in units]
        if spec.caliper is not None and max(es) - min(es) > spec.caliper:
            return None
        center_arm = 1 if m == 1 else 0
        center = next(e[u] for u in units if z[u] == center_arm)
        return sum(abs(e[u] - center) for u in units if z[u] != center_arm)

    memo = {}

    def solve(mask):
        if mask == 0:
            return (0, 0.0, 0, ())
        if mask in memo:
            return memo[mask]
        low = (mask & -mask).bit_length() - 1
        rest = [u for u in range(low + 1, n) if mask >> u & 1]
        dd, cc, ss, plan = solve(mask & ~(1 << low))
        best = (dd + 1, cc, ss, plan)  # drop the lowest unit
        for r in range(1, min(spec.max_set_size, len(rest) + 1)):
            for comb in itertools.combinations(rest, r):
                units = (low,) + comb
                c = subset_state(units)
                if c is None:
                    continue
                sub = mask
                for u in units:
                    sub &= ~(1 << u)
                dd, cc, ss, plan = solve(sub)
                cand = (dd, cc + c, ss + 1, plan + (units,))
                if cand[:3] < best[:3]:
                    best = cand
        memo[mask] = best
        return best

    dd, cc, ss, plan = solve((1 << n) - 1)
    if ss == 0:
        raise InfeasibleMatchError("no feasible treated-control set")
    assignments = np.full(n, -1, dtype=np.int64)
    sets = tuple(np.array(sorted(u)) for u in plan)
    for k, units in enumerate(sets):
        assignments[units] = k
    return FullMatchResult(assignments=assignments, sets=sets, cost=float(cc),
                           dropped=np.nonzero(assignments < 0)[0])


def build_matched_dataset(result, z, y, x, d=None, e_hat=None):
    """Turn a matching result into a MatchedDataset over the retained units.

    Returns (dataset, retained_index) where retained_index maps dataset rows
    back to rows of the input arrays.
    """
    retained = np.nonzero(result.assignments >= 0)[0]
    labels_by_unit = result.set_labels()
    labels = [labels_by_unit[int(u)] for u in retained]

    def take(col):
        return None if col is None else np.asarray(col)[retained]

    ds = from_arrays(np.asarray(z)[retained], np.asarray(y)[retained],
                     np.asarray(x)[retained], labels,
                     d=take(d), e_hat=take(e_hat))
    return ds, retained


def apply_balance_gate(ds, threshold=0.2, pre_matching=None):
    """True iff every |post-matching SMD| is below the threshold.

    Degenerate rows (zero pooled SD) count as failures.
    """
    rows = balance_table(ds, pre_matching=pre_matching)
    return all((not r.degenerate) and abs(r.smd_post) < threshold
               for r in rows)
