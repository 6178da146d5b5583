"""Exact sparse rate matrices for the conservative, open-boundary, dual and
killed dynamics, plus the algebraic identity checks (invariance, adjointness,
integration by parts).

Rates come from tabulated g and the truncated-kernel diagonals only; no
transcendental evaluation happens inside assembly loops. Moves that would
break a cap are omitted (censoring), which keeps the truncated product
measure exactly invariant as long as the per-site cap cannot bind (total cap
at most per-site cap); assembly warns otherwise.
"""

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .model import truncate_kernel
from .statespace import add_site, del_site, exchange


@dataclass
class SparseGenerator:
    kind: str                  # conservative | open | dual-open | killed
    matrix: sp.csr_matrix      # full dimension, or the A^c block for killed
    table: object
    gamma: float
    keep: Optional[np.ndarray] = None   # A^c state indices (killed kind)
    loss: Optional[np.ndarray] = None   # rate into the target set per A^c state

    @property
    def dim(self):
        return self.matrix.shape[0]

    def matvec(self, x):
        return self.matrix @ x


def occupancies(table):
    return np.array(table.states, dtype=np.int16)


def _neighbor_map(kernel, active_sites):
    """site index -> list of (target site index, probability) within the set."""
    pos = {s: k for k, s in enumerate(active_sites)}
    out = []
    for s in active_sites:
        row = []
        for v, p in kernel.offsets:
            t = tuple(a + b for a, b in zip(s, v))
            if t in pos:
                row.append((pos[t], p))
        out.append(row)
    return out


def assemble_open(table, kernel, rates, gamma, sub_sites=None, kind="open",
                  conservative_only=False):
    """Open-boundary generator on the table: exchanges inside the (sub-)box,
    plus boundary birth at rate gamma * p_n^*(i,i) and boundary death at rate
    g(eta(i)) * p_n(i,i).

    `sub_sites` restricts the dynamics to a smaller box while states keep the
    full table layout; the kernel truncation (diagonal masses) is then the one
    of the sub-box. With conservative_only=True only exchanges are kept.
    """
    if table.N is not None and table.N > table.M:
        warnings.warn("total cap exceeds per-site cap: censoring at the "
                      "per-site cap breaks exact invariance", stacklevel=2)
    active = list(sub_sites) if sub_sites is not None else list(table.sites)
    act_idx = [table.sites.index(s) for s in active]
    tk = truncate_kernel(kernel, active)
    nbrs = _neighbor_map(kernel, active)
    g = np.asarray(rates.values)
    occ = occupancies(table)
    n = len(table)

    rows, cols, vals = [], [], []
    index = table.index
    states = table.states
    M, N = table.M, table.N
    totals = table.totals

    for s in range(n):
        eta = states[s]
        tot = totals[s]
        for a, i in enumerate(act_idx):
            ni = eta[i]
            if ni >= 1:
                gi = g[ni]
                for b, p in nbrs[a]:
                    j = act_idx[b]
                    if eta[j] < M:
                        rows.append(s)
                        cols.append(index[exchange(eta, i, j)])
                        vals.append(gi * p)
                if not conservative_only and tk.diagonal[a] > 0:
                    rows.append(s)
                    cols.append(index[del_site(eta, i)])
                    vals.append(gi * tk.diagonal[a])
            if not conservative_only and tk.diagonal_star[a] > 0:
                if eta[i] < M and (N is None or tot < N):
                    rows.append(s)
                    cols.append(index[add_site(eta, i)])
                    vals.append(gamma * tk.diagonal_star[a])

    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    mat = mat - sp.diags(np.asarray(mat.sum(axis=1)).ravel())
    return SparseGenerator(kind="conservative" if conservative_only else kind,
                           matrix=mat.tocsr(), table=table, gamma=gamma)


def assemble_dual(table, kernel, rates, gamma, sub_sites=None):
    """Same construction with the reversed kernel; the diagonal masses swap
    roles automatically because reversing the kernel swaps p_n and p_n^*."""
    return assemble_open(table, kernel.reverse(), rates, gamma,
                         sub_sites=sub_sites, kind="dual-open")


def kill(gen, in_target):
    """Restrict to the complement of the target set; transitions into the
    target are retained as pure loss, so substochasticity is structural.

    `in_target` is the boolean pattern indicator over the table.
    """
    if gen.kind not in ("open", "dual-open", "conservative"):
        raise ValueError("can only kill open or conservative kinds")
    keep = np.flatnonzero(~np.asarray(in_target))
    block = gen.matrix[keep][:, keep].tocsr()
    loss = -np.asarray(block.sum(axis=1)).ravel()
    # negative loss would mean mass creation; only float rounding of the
    # diagonal can produce it, at machine scale
    assert loss.min() > -1e-12
    return SparseGenerator(kind="killed", matrix=block, table=gen.table,
                           gamma=gen.gamma, keep=keep, loss=loss)


def killed_irreducible(gen):
    """Reachability certificate for the A^c block (single strong component)."""
    if gen.kind != "killed":
        raise ValueError("irreducibility check applies to killed kind")
    ncomp, _ = connected_components(gen.matrix, directed=True,
                                    connection="strong")
    return ncomp == 1


def row_sum_residual(gen):
    if gen.kind == "killed":
        # rows may sum to <= 0; report how far any row sums above 0
        return float(np.asarray(gen.matrix.sum(axis=1)).ravel().max())
    return float(np.abs(np.asarray(gen.matrix.sum(axis=1)).ravel()).max())


def invariance_residual(gen, nu):
    """l1 norm of nu^T L; exact zero up to rounding for the censored open
    system when the per-site cap cannot bind."""
    if gen.kind not in ("open", "dual-open"):
        raise ValueError("invariance applies to open kinds only")
    return float(np.abs(gen.matrix.T @ np.asarray(nu)).sum())


def adjointness_residual(gen, dual, nu):
    """Entrywise residual of D(nu) L = (L*)^T D(nu), the exact L2(nu)
    adjointness between the open and dual-open generators."""
    D = sp.diags(np.asarray(nu))
    R = (D @ gen.matrix - dual.matrix.T @ D).tocoo()
    return float(np.abs(R.data).max()) if R.nnz else 0.0


def ibp_check(table, nu, rates, gamma, i_idx, j_idx, phi, f):
    """Integration by parts for the exchange from site i to site j:

        int g_i (phi o T^i_j - phi) f dnu
            = gamma int (phi o A_j^+ - phi o A_i^+) (f o A_i^+) dnu

    phi and f must be cap-safe: they vanish on every state from which a
    shifted state would leave the table, so the truncation is invisible.
    Returns the absolute difference of the two sides.
    """
    g = np.asarray(rates.values)
    phi = np.asarray(phi, dtype=float)
    f = np.asarray(f, dtype=float)
    nu = np.asarray(nu)
    lhs = 0.0
    rhs = 0.0
    index = table.index
    for s, eta in enumerate(table.states):
        if f[s] != 0.0 and eta[i_idx] >= 1:
            t = index.get(exchange(eta, i_idx, j_idx))
            if t is None:
                raise ValueError("test functions not cap-safe: exchange leaves "
                                 "the table at a charged state")
            lhs += nu[s] * g[eta[i_idx]] * (phi[t] - phi[s]) * f[s]
        up_i = index.get(add_site(eta, i_idx))
        if up_i is not None and f[up_i] != 0.0:
            up_j = index.get(add_site(eta, j_idx))
            if up_j is None:
                raise ValueError("test functions not cap-safe: creation leaves "
                                 "the table at a charged state")
            rhs += nu[s] * (phi[up_j] - phi[up_i]) * f[up_i]
    return abs(lhs - gamma * rhs)


def export_coordinate(gen, path):
    """Coordinate text export: header with dimension and kind, then one
    'row col rate' line per stored entry."""
    coo = gen.matrix.tocoo()
    with open(path, "w") as fh:
        fh.write("%% dim %d kind %s\n" % (gen.dim, gen.kind))
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write("%d %d %.17g\n" % (r, c, v))


class MatrixFreeOpen:
    """Operator form of the open generator: move structure precomputed as
    index arrays, rates recomputed on every application. Used above the
    explicit-storage threshold (default 1e6 states)."""

    def __init__(self, table, kernel, rates, gamma):
        active = list(table.sites)
        tk = truncate_kernel(kernel, active)
        nbrs = _neighbor_map(kernel, active)
        occ = occupancies(table)
        g = np.asarray(rates.values)
        n = len(table)
        index = table.index
        self.dim = n
        self.moves = []  # (rate vector, target index array) per move family
        tot = table.totals
        for a, site in enumerate(active):
            ni = occ[:, a]
            for b, p in nbrs[a]:
                adm = (ni >= 1) & (occ[:, b] < table.M)
                tgt = np.full(n, -1, dtype=np.int64)
                for s in np.flatnonzero(adm):
                    tgt[s] = index[exchange(table.states[s], a, b)]
                self.moves.append((np.where(adm, g[ni] * p, 0.0), tgt))
            if tk.diagonal[a] > 0:
                adm = ni >= 1
                tgt = np.full(n, -1, dtype=np.int64)
                for s in np.flatnonzero(adm):
                    tgt[s] = index[del_site(table.states[s], a)]
                self.moves.append((np.where(adm, g[ni] * tk.diagonal[a], 0.0), tgt))
            if tk.diagonal_star[a] > 0:
                adm = ni < table.M
                if table.N is not None:
                    adm = adm & (tot < table.N)
                tgt = np.full(n, -1, dtype=np.int64)
                for s in np.flatnonzero(adm):
                    tgt[s] = index[add_site(table.states[s], a)]
                self.moves.append((np.where(adm, gamma * tk.diagonal_star[a], 0.0), tgt))

    def matvec(self, x):
        out = np.zeros(self.dim)
        for rate, tgt in self.moves:
            adm = tgt >= 0
            out[adm] += rate[adm] * (x[tgt[adm]] - x[adm])
        return out
