"""Enumerated truncated configuration space on a box, the move algebra, and
measure vectors against it.

Enumeration is graded lexicographic: states are grouped by total particle
count, then ordered by the occupancy vector, so fixed-total-count slices are
contiguous and the enumeration is byte-stable across runs.
"""

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class LatticeBox:
    d: int
    n: int
    sites: tuple   # ordered site tuples of [-n,n]^d

    @property
    def size(self):
        return len(self.sites)

    def boundary(self, R):
        """Sites within distance R of the outside, Lambda_n \\ Lambda_{n-R}."""
        inner = self.n - R
        return tuple(s for s in self.sites if max(abs(c) for c in s) > inner)


def make_box(d, n):
    rng = range(-n, n + 1)
    return LatticeBox(d, n, tuple(itertools.product(rng, repeat=d)))


def _count_states(sites, M, N):
    """Number of occupancy vectors with per-site cap M and total cap N."""
    limit = N if N is not None else M * sites
    counts = np.zeros(limit + 1, dtype=object)
    counts[0] = 1
    for _ in range(sites):
        new = np.zeros(limit + 1, dtype=object)
        for t in range(limit + 1):
            if counts[t]:
                for c in range(min(M, limit - t) + 1):
                    new[t + c] += counts[t]
        counts = new
    return int(counts.sum())


@dataclass(frozen=True)
class Move:
    kind: str        # "exchange", "create", "annihilate"
    i: int           # source site index
    j: Optional[int] = None  # target site index for exchanges


class StateTable:
    """Complete enumeration of occupancy vectors under the caps."""

    def __init__(self, box, M, N=None, budget=2_000_000):
        projected = _count_states(box.size, M, N)
        if projected > budget:
            raise ValueError("state count %d exceeds budget %d" % (projected, budget))
        self.box = box
        self.sites = box.sites
        self.M = M
        self.N = N
        states = []
        limit = N if N is not None else M * box.size
        for total in range(limit + 1):
            states.extend(_compositions(box.size, total, M))
        self.states = states
        self.index = {eta: k for k, eta in enumerate(states)}
        self.totals = np.array([sum(eta) for eta in states])
        assert len(states) == projected

    def __len__(self):
        return len(self.states)

    def index_of(self, eta):
        return self.index.get(eta)

    def admissible(self, eta, move):
        """None when the move applies, else the violated condition."""
        if move.kind == "exchange":
            if eta[move.i] < 1:
                return "empty source site"
            if eta[move.j] >= self.M:
                return "target site at cap"
            return None
        if move.kind == "create":
            if eta[move.i] >= self.M:
                return "site at cap"
            if self.N is not None and sum(eta) >= self.N:
                return "total at cap"
            return None
        if move.kind == "annihilate":
            if eta[move.i] < 1:
                return "empty site"
            return None
        raise ValueError(move.kind)

    def apply_move(self, eta, move):
        """(new index, None) when admissible, (None, reason) otherwise."""
        reason = self.admissible(eta, move)
        if reason is not None:
            return None, reason
        if move.kind == "exchange":
            out = exchange(eta, move.i, move.j)
        elif move.kind == "create":
            out = add_site(eta, move.i)
        else:
            out = del_site(eta, move.i)
        return self.index[out], None


def _compositions(k, total, M):
    """Occupancy vectors of length k summing to `total`, entries <= M,
    lexicographic order."""
    out = []

    def rec(prefix, left, slots):
        if slots == 0:
            if left == 0:
                out.append(tuple(prefix))
            return
        if left > M * slots:
            return
        for c in range(min(M, left) + 1):
            rec(prefix + [c], left - c, slots - 1)

    rec([], total, k)
    return out


def exchange(eta, i, j):
    lst = list(eta)
    lst[i] -= 1
    lst[j] += 1
    return tuple(lst)


def add_site(eta, i):
    lst = list(eta)
    lst[i] += 1
    return tuple(lst)


def del_site(eta, i):
    lst = list(eta)
    lst[i] -= 1
    return tuple(lst)


def measure_vector(table, marginals):
    """Truncated product measure as weights over the table.

    `marginals` is one Marginal shared by every site or a per-site list.
    """
    if not isinstance(marginals, (list, tuple)):
        marginals = [marginals] * len(table.sites)
    theta = [np.asarray(m.probs) for m in marginals]
    w = np.ones(len(table))
    for k, eta in enumerate(table.states):
        acc = 1.0
        for idx, n in enumerate(eta):
            acc *= theta[idx][n]
        w[k] = acc
    return w / w.sum()


def tail_mass(marginals, n_sites, M_prime):
    """nu(K_{M'}^c) for the untruncated product: chance some site exceeds M'."""
    if not isinstance(marginals, (list, tuple)):
        marginals = [marginals] * n_sites
    inside = 1.0
    for m in marginals:
        probs = np.asarray(m.probs)
        if M_prime >= len(probs) - 1:
            inside *= 1.0 - m.tail
        else:
            inside *= (1.0 - m.tail) * probs[:M_prime + 1].sum()
    return 1.0 - inside


def pattern_indicator(table, pattern):
    """Boolean vector marking states inside the target set."""
    support_idx = [table.sites.index(s) for s in pattern.support]
    comp = set(pattern.complement)
    out = np.zeros(len(table), dtype=bool)
    for k, eta in enumerate(table.states):
        out[k] = tuple(eta[i] for i in support_idx) not in comp
    return out
