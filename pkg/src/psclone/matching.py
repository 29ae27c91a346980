"""Clone matching on linear propensity: greedy nearest-neighbour and optimal assignment."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from .dataset import Dataset
from .errors import EscrowViolation, SupportError
from .propensity import ScoreTable

GREEDY = "greedy"
OPTIMAL = "optimal"
DIRECTIONS = ("treated-focal", "control-focal", "both")


@dataclass(frozen=True)
class MatchSpec:
    """Matching options.

    ``caliper`` is a maximum |lp difference|; ``"auto"`` means 0.2 times the
    pooled within-arm sd of lp among retained units, ``None`` disables it.
    """

    method: str = GREEDY
    k: int = 10
    caliper: float | str | None = "auto"
    replacement: bool = False
    direction: str = "both"
    within_bins: bool = False
    caliper_sd: float = 0.2

    def __post_init__(self):
        if self.method not in (GREEDY, OPTIMAL):
            raise ValueError(f"method must be greedy or optimal, not {self.method!r}")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError("k must be an integer >= 1")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.caliper not in (None, "auto"):
            c = float(self.caliper)
            if not (math.isfinite(c) and c > 0):
                raise ValueError("caliper must be finite and positive")


def pooled_lp_sd(lp: np.ndarray, z: np.ndarray) -> float:
    vt = lp[z == 1].var(ddof=1) if (z == 1).sum() > 1 else 0.0
    vc = lp[z == 0].var(ddof=1) if (z == 0).sum() > 1 else 0.0
    return math.sqrt((vt + vc) / 2)


class _Available:
    """Sorted pool with O(alpha) deletion: nearest live index to the left or right."""

    def __init__(self, n: int):
        self.right = list(range(n + 1))   # right[i]: smallest live index >= i (n = none)
        self.left = list(range(-1, n))    # left[i+1]: largest live index <= i (-1 = none)

    def next(self, i: int) -> int:
        r = self.right
        root = i
        while r[root] != root:
            root = r[root]
        while r[i] != root:
            r[i], i = root, r[i]
        return root

    def prev(self, i: int) -> int:
        le = self.left
        j = i + 1
        root = j
        while le[root] != root - 1:
            root = le[root] + 1
        while le[j] != root - 1:
            le[j], j = root - 1, le[j] + 1
        return root - 1

    def remove(self, i: int) -> None:
        self.right[i] = i + 1
        self.left[i + 1] = i - 1


def _greedy(f_lp, f_key, p_lp, p_key, k, caliper, replacement):
    """Greedy matching on sorted arrays.

    Focal units are visited in descending lp (ties: ascending key). Each takes
    its k nearest available pool units by (distance, key).
    Returns a list over focal positions of lists of (pool position, distance).
    """
    order_p = np.lexsort((p_key, p_lp))
    s_lp = p_lp[order_p].tolist()
    s_key = p_key[order_p].tolist()
    n = len(s_lp)
    group_start = [0] * n
    for i in range(1, n):
        group_start[i] = group_start[i - 1] if s_lp[i] == s_lp[i - 1] else i
    avail = _Available(n)
    cal = math.inf if caliper is None else caliper
    out = [None] * len(f_lp)
    focal_order = np.lexsort((f_key, -f_lp))
    insert_at = np.searchsorted(p_lp[order_p], f_lp, side="left").tolist()
    for fi in focal_order.tolist():
        x = float(f_lp[fi])
        pos = insert_at[fi]
        # left stream yields (lp desc, key asc); right stream yields (lp asc, key asc)
        cur_group_hi = avail.prev(pos - 1) if pos > 0 else -1
        lj = None
        if cur_group_hi >= 0:
            lj = avail.next(group_start[cur_group_hi])
        rj = avail.next(pos) if pos < n else n
        picks = []
        while len(picks) < k:
            dl = x - s_lp[lj] if lj is not None else math.inf
            dr = s_lp[rj] - x if rj < n else math.inf
            if dl == math.inf and dr == math.inf:
                break
            take_left = dl < dr or (dl == dr and s_key[lj] < s_key[rj])
            if take_left:
                if dl > cal:
                    break
                picks.append((lj, dl))
                g0 = group_start[lj]
                nxt = avail.next(lj + 1)
                if nxt <= cur_group_hi:
                    lj = nxt
                else:
                    cur_group_hi = avail.prev(g0 - 1) if g0 > 0 else -1
                    lj = avail.next(group_start[cur_group_hi]) if cur_group_hi >= 0 else None
            else:
                if dr > cal:
                    break
                picks.append((rj, dr))
                rj = avail.next(rj + 1)
        if not replacement:
            for j, _ in picks:
                avail.remove(j)
        out[fi] = [(int(order_p[j]), d) for j, d in picks]
    return out


def _optimal(f_lp, p_lp, k, caliper, replacement):
    """Minimum total distance assignment with each focal unit replicated k times.

    Caliper violations are forbidden edges. Replica row r (0-based) of each
    focal unit also has a private "unmatched" column costing (k - r) tiers,
    a tier exceeding any achievable total distance. The solver therefore
    minimises the unmatched penalty first, which favours spreading clones
    over focal units, and total distance second. When everyone can get k
    clones this is the plain minimum-cost assignment.
    """
    nf, npool = len(f_lp), len(p_lp)
    dist = np.abs(f_lp[:, None] - p_lp[None, :])
    allowed = np.ones_like(dist, dtype=bool) if caliper is None else dist <= caliper
    if replacement:
        out = []
        for i in range(nf):
            cand = np.flatnonzero(allowed[i])
            cand = cand[np.lexsort((cand, dist[i, cand]))][:k]
            out.append([(int(j), float(dist[i, j])) for j in cand])
        return out
    rows = nf * k
    finite = dist[allowed]
    dmax = float(finite.max()) if finite.size else 0.0
    tier = (min(rows, npool) + 1) * (dmax + 1.0)
    big = np.inf
    cost = np.full((rows, npool + rows), big)
    for r in range(k):
        block = np.where(allowed, dist, big)
        cost[r::k, :npool] = block
    unmatched_price = np.array([(k - (row % k)) * tier for row in range(rows)])
    cost[np.arange(rows), npool + np.arange(rows)] = unmatched_price
    ri, ci = linear_sum_assignment(cost)
    out = [[] for _ in range(nf)]
    for r, c in zip(ri, ci):
        if c < npool:
            out[r // k].append((int(c), float(dist[r // k, c])))
    for lst in out:
        lst.sort(key=lambda t: (t[1], t[0]))
    return out


def match_arrays(f_lp, p_lp, k=1, caliper=None, replacement=False, method=GREEDY, f_key=None, p_key=None):
    """Match focal linear propensities to a pool; returns per-focal lists of (pool index, distance).

    ``f_key``/``p_key`` are tie-break ranks (defaults: positions).
    """
    f_lp = np.asarray(f_lp, dtype=float)
    p_lp = np.asarray(p_lp, dtype=float)
    if method == GREEDY:
        fk = np.arange(len(f_lp)) if f_key is None else np.asarray(f_key)
        pk = np.arange(len(p_lp)) if p_key is None else np.asarray(p_key)
        return _greedy(f_lp, fk, p_lp, pk, k, caliper, replacement)
    if method == OPTIMAL:
        return _optimal(f_lp, p_lp, k, caliper, replacement)
    raise ValueError(f"unknown method {method!r}")


@dataclass
class MatchSet:
    """Clone groups.

    ``pairs`` has one row per (focal, clone) pair with columns
    group_index, focal_id, focal_z, clone_id, distance. ``unmatched`` lists
    focal ids without any clone and why.
    """

    pairs: pd.DataFrame
    unmatched: pd.DataFrame
    spec: MatchSpec
    caliper_value: float | None
    design_digest: str = ""
    dataset_digest: str = ""

    @property
    def total_distance(self) -> float:
        return float(self.pairs["distance"].sum())

    def group_sizes(self) -> pd.Series:
        return self.pairs.groupby("focal_id", sort=False).size()

    def to_csv(self, path) -> None:
        self.pairs[["focal_id", "clone_id", "distance", "group_index"]].to_csv(path, index=False)

    def unmatched_to_csv(self, path) -> None:
        self.unmatched.to_csv(path, index=False)

    def summary(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "caliper_value": self.caliper_value,
            "total_distance": self.total_distance,
            "n_groups": int(self.pairs["group_index"].nunique()) if len(self.pairs) else 0,
            "n_pairs": int(len(self.pairs)),
            "n_unmatched": int(len(self.unmatched)),
            "design_digest": self.design_digest,
            "dataset_digest": self.dataset_digest,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def _key_ranks(ids: np.ndarray) -> np.ndarray:
    order = np.argsort(ids.astype(str), kind="stable")
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[order] = np.arange(len(ids))
    return ranks


def match(scores: ScoreTable, design, spec: MatchSpec = MatchSpec()) -> MatchSet:
    """Build clone groups for the retained units of a frozen design.

    Greedy processes focal units in descending lp (ties by unit id) and each
    takes its k nearest available opposite-arm units within the caliper.
    Optimal minimises total distance under the same k, caliper and
    replacement rules. A focal unit keeps a partial group (1 <= k' < k)
    rather than being dropped; focal units with no clone are listed in
    ``unmatched`` with reason ``caliper`` or ``exhausted``.
    """
    if not getattr(design, "frozen", False):
        raise EscrowViolation("matching requires a frozen design")
    sub = scores.subset(design.trim.retained)
    ids = sub.unit_ids
    lp, z = sub.lp, sub.z
    if spec.caliper == "auto":
        caliper = spec.caliper_sd * pooled_lp_sd(lp, z)
        caliper = caliper if caliper > 0 else None
    else:
        caliper = None if spec.caliper is None else float(spec.caliper)
    keys = _key_ranks(ids)
    if spec.within_bins:
        plan = design.plan
        bin_of = dict(zip(plan.unit_ids.tolist(), plan.bins.tolist()))
        strata = np.array([bin_of.get(u, -1) for u in ids.tolist()])
    else:
        strata = np.zeros(len(ids), dtype=np.int64)

    directions = ["treated-focal", "control-focal"] if spec.direction == "both" else [spec.direction]
    rows = []
    unmatched = []
    group_index = 0
    for direction in directions:
        focal_arm = 1 if direction == "treated-focal" else 0
        if not (z == focal_arm).any():
            raise SupportError(f"no {'treated' if focal_arm else 'control'} focal units remain after trimming")
        results = {}
        nearest = np.full(len(ids), math.inf)
        for s in np.unique(strata):
            fmask = (z == focal_arm) & (strata == s)
            pmask = (z != focal_arm) & (strata == s)
            fidx, pidx = np.flatnonzero(fmask), np.flatnonzero(pmask)
            if not len(fidx):
                continue
            nearest[fidx] = _nearest_distances(lp[fidx], lp[pidx])
            got = match_arrays(lp[fidx], lp[pidx], spec.k, caliper, spec.replacement, spec.method,
                               keys[fidx], keys[pidx])
            for i, picks in zip(fidx.tolist(), got):
                results[i] = [(int(pidx[j]), d) for j, d in picks]
        focal_positions = np.flatnonzero(z == focal_arm)
        focal_positions = focal_positions[np.lexsort((keys[focal_positions], -lp[focal_positions]))]
        for i in focal_positions.tolist():
            picks = results.get(i, [])
            if not picks:
                reason = "caliper" if caliper is not None and math.isfinite(nearest[i]) and nearest[i] > caliper else "exhausted"
                unmatched.append((ids[i], focal_arm, reason))
                continue
            for j, d in picks:
                rows.append((group_index, ids[i], focal_arm, ids[j], d))
            group_index += 1
    pairs = pd.DataFrame(rows, columns=["group_index", "focal_id", "focal_z", "clone_id", "distance"])
    um = pd.DataFrame(unmatched, columns=["focal_id", "focal_z", "reason"])
    return MatchSet(pairs, um, spec, caliper, design.digest(), design.dataset_digest)


def _nearest_distances(f_lp: np.ndarray, p_lp: np.ndarray) -> np.ndarray:
    if not len(p_lp):
        return np.full(len(f_lp), math.inf)
    srt = np.sort(p_lp)
    pos = np.searchsorted(srt, f_lp)
    left = np.abs(f_lp - srt[np.clip(pos - 1, 0, len(srt) - 1)])
    right = np.abs(srt[np.clip(pos, 0, len(srt) - 1)] - f_lp)
    return np.minimum(left, right)


@dataclass
class CloneImputation:
    table: pd.DataFrame
    excluded: list = field(default_factory=list)


def impute_clones(ms: MatchSet, ds: Dataset) -> CloneImputation:
    """Impute each matched focal unit's missing potential outcome as the mean clone outcome."""
    if ds.escrow:
        raise EscrowViolation("outcomes are still in escrow")
    if ds.released_under != ms.design_digest:
        raise EscrowViolation("escrow was released under a different design than the matching")
    y = ds.outcome
    clone_y = y[ds.positions(ms.pairs["clone_id"])]
    g = pd.DataFrame({"focal_id": ms.pairs["focal_id"].to_numpy(), "focal_z": ms.pairs["focal_z"].to_numpy(), "y": clone_y})
    agg = g.groupby("focal_id", sort=False).agg(focal_z=("focal_z", "first"), k_prime=("y", "size"), imputed=("y", "mean"))
    table = agg.reset_index()
    return CloneImputation(table, ms.unmatched["focal_id"].tolist())
