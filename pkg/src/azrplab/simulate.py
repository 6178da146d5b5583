"""Event-driven continuous-time Monte Carlo of the open-boundary dynamics:
hitting-time sampling, monotone-coupling verification, checkpoint-discretized
killing, and domain-monotonicity experiments.

Censoring at caps excludes a move from the rate sum (never rejection), so the
simulated jump chain is exactly the one encoded by the sparse generator.
Randomness is counter-based: every trajectory owns a Philox stream keyed by
(seed, trajectory id), so trajectory sets are independent of execution order.
"""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats as sstats

from .model import truncate_kernel
from .generator import _neighbor_map


@dataclass
class SimConfig:
    kernel: object
    rates: object
    gamma: float
    sites: tuple               # ordered site tuples of the domain
    M: int
    N: Optional[int] = None
    pattern: object = None
    seed: int = 0
    n_traj: int = 10_000
    horizon: float = 800.0
    streams: str = "philox-keyed-(seed,traj)"


def _traj_rng(seed, tid):
    # negative ids are reserved for auxiliary streams (initial law, bootstrap)
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence([seed, tid + 2 ** 33])))


class _Moves:
    """Flattened move list (exchange / death / birth) with exact censored
    rates; evaluation is vectorized over a batch of occupancy rows."""

    EXCH, DEATH, BIRTH = 0, 1, 2

    def __init__(self, config):
        sites = list(config.sites)
        tk = truncate_kernel(config.kernel, sites)
        nbrs = _neighbor_map(config.kernel, sites)
        self.g = np.asarray(config.rates.values, dtype=float)
        self.M = config.M
        self.N = config.N
        self.gamma = config.gamma
        self.n_sites = len(sites)
        kind, src, tgt, coef = [], [], [], []
        for a in range(len(sites)):
            for b, p in nbrs[a]:
                kind.append(self.EXCH); src.append(a); tgt.append(b); coef.append(p)
            if tk.diagonal[a] > 0:
                kind.append(self.DEATH); src.append(a); tgt.append(-1)
                coef.append(tk.diagonal[a])
            if tk.diagonal_star[a] > 0:
                kind.append(self.BIRTH); src.append(a); tgt.append(-1)
                coef.append(config.gamma * tk.diagonal_star[a])
        self.kind = np.array(kind)
        self.src = np.array(src)
        self.tgt = np.array(tgt)
        self.coef = np.array(coef)
        self.is_exch = self.kind == self.EXCH
        self.is_birth = self.kind == self.BIRTH
        self.n_moves = len(kind)
        # move indices to refresh when a given site's occupancy changes
        self.affected = [np.flatnonzero((self.src == s) |
                                        (self.is_exch & (self.tgt == s)))
                         for s in range(self.n_sites)]
        self.birth_idx = np.flatnonzero(self.is_birth)

    def rates_batch(self, occ, tot):
        """(batch, n_moves) rate array for occupancy rows `occ`."""
        g_occ = self.g[occ]
        R = self.coef[None, :] * np.where(self.is_birth[None, :], 1.0,
                                          g_occ[:, self.src])
        ex = self.is_exch
        R[:, ex] *= occ[:, self.tgt[ex]] < self.M
        bi = self.is_birth
        adm = occ[:, self.src[bi]] < self.M
        if self.N is not None:
            adm = adm & (tot < self.N)[:, None]
        R[:, bi] *= adm
        return R

    def rates_one(self, eta, tot):
        return self.rates_batch(np.asarray(eta, dtype=np.int64)[None, :],
                                np.array([tot]))[0]

    def apply_batch(self, occ, tot, move):
        """In-place move application, one chosen move index per row."""
        rows = np.arange(len(move))
        k = self.kind[move]
        s = self.src[move]
        occ[rows[k == self.EXCH], s[k == self.EXCH]] -= 1
        occ[rows[k == self.EXCH], self.tgt[move[k == self.EXCH]]] += 1
        occ[rows[k == self.DEATH], s[k == self.DEATH]] -= 1
        tot[k == self.DEATH] -= 1
        occ[rows[k == self.BIRTH], s[k == self.BIRTH]] += 1
        tot[k == self.BIRTH] += 1


def _pattern_arrays(config):
    support_idx = np.array([config.sites.index(tuple(s))
                            for s in config.pattern.support])
    comp = np.array([list(t) for t in config.pattern.complement])
    return support_idx, comp


def _in_target_batch(occ, support_idx, comp):
    sub = occ[:, support_idx]
    return ~(sub[:, None, :] == comp[None, :, :]).all(axis=2).any(axis=1)


@dataclass
class Trajectory:
    times: np.ndarray
    moves: list                 # (kind, source site idx, target site idx)
    eta_end: tuple
    t_end: float
    tau: Optional[float]        # first entry into the target set, None if unseen
    states: Optional[list] = None


def run_ctmc(config, eta0, horizon=None, rng=None, absorb=True,
             record_states=False, max_events=None):
    """Direct event-driven simulation from eta0.

    Rate bookkeeping is local: after an event only the moves touching the
    changed sites are re-evaluated (plus the birth gate when the total crosses
    the cap). The full rate vector is summed per event, which keeps the clock
    free of accumulation drift.
    """
    mv = _Moves(config)
    eta = np.asarray(eta0, dtype=np.int64).copy()
    if eta.max() > config.M or (config.N is not None and eta.sum() > config.N):
        raise ValueError("initial state violates caps")
    tot = int(eta.sum())
    horizon = config.horizon if horizon is None else horizon
    rng = _traj_rng(config.seed, 0) if rng is None else rng
    support_idx = comp = None
    if config.pattern is not None:
        support_idx, comp = _pattern_arrays(config)

    def hit():
        if support_idx is None:
            return False
        return bool(_in_target_batch(eta[None, :], support_idx, comp)[0])

    r = mv.rates_one(eta, tot)
    t, tau = 0.0, (0.0 if hit() else None)
    times, moves, states = [], [], ([tuple(eta)] if record_states else None)
    while not (absorb and tau is not None):
        total = r.sum()
        if total <= 0.0:
            break
        if not np.isfinite(total):
            raise FloatingPointError("rate overflow: check cap configuration")
        t += rng.exponential(1.0 / total)
        if t > horizon:
            t = horizon
            break
        m = int(np.searchsorted(np.cumsum(r), rng.uniform(0.0, total)))
        m = min(m, mv.n_moves - 1)
        k, s_i, t_j = mv.kind[m], int(mv.src[m]), int(mv.tgt[m])
        old_tot = tot
        if k == mv.EXCH:
            eta[s_i] -= 1
            eta[t_j] += 1
            touched = (s_i, t_j)
        elif k == mv.DEATH:
            eta[s_i] -= 1
            tot -= 1
            touched = (s_i,)
        else:
            eta[s_i] += 1
            tot += 1
            touched = (s_i,)
        times.append(t)
        moves.append((int(k), s_i, t_j))
        if record_states:
            states.append(tuple(eta))
        g_occ = mv.g[eta]
        for s in set(touched):
            idx = mv.affected[s]
            rr = mv.coef[idx] * np.where(mv.is_birth[idx], 1.0, g_occ[mv.src[idx]])
            ex = mv.is_exch[idx]
            rr[ex] *= eta[mv.tgt[idx[ex]]] < config.M
            bi = mv.is_birth[idx]
            rr[bi] *= eta[mv.src[idx[bi]]] < config.M
            r[idx] = rr
        if config.N is not None and (tot >= config.N) != (old_tot >= config.N):
            bi = mv.birth_idx
            r[bi] = mv.coef[bi] * (eta[mv.src[bi]] < config.M) * (tot < config.N)
        elif config.N is not None and tot >= config.N:
            r[mv.birth_idx] = 0.0
        if tau is None and hit():
            tau = t
        if max_events is not None and len(times) >= max_events:
            break
    return Trajectory(times=np.array(times), moves=moves, eta_end=tuple(eta),
                      t_end=min(t, horizon), tau=tau, states=states)


def first_move_counts(config, eta, n, seed=0):
    """Distribution of the first event from a frozen state: n independent
    single-event draws, returned as counts per move index plus the exact
    per-move probabilities (the generator row)."""
    mv = _Moves(config)
    eta = np.asarray(eta, dtype=np.int64)
    r = mv.rates_one(eta, int(eta.sum()))
    total = r.sum()
    if total <= 0:
        raise ValueError("frozen state has no admissible move")
    rng = _traj_rng(seed, 0)
    u = rng.uniform(0.0, total, size=n)
    picks = np.searchsorted(np.cumsum(r), u)
    counts = np.bincount(np.minimum(picks, mv.n_moves - 1),
                         minlength=mv.n_moves)
    return counts, r / total


def one_step_chi2(config, eta, n, seed=0):
    """Chi-square statistic of n simulated first moves against the generator
    row; returns (statistic, dof, p-value)."""
    counts, probs = first_move_counts(config, eta, n, seed=seed)
    live = probs > 0
    stat, p = sstats.chisquare(counts[live], n * probs[live])
    return float(stat), int(live.sum() - 1), float(p)


# ---------------------------------------------------------------------------
# initial law: truncated product measure, exact sequential sampling

def _budget_cumulatives(probs, n_sites, N):
    """cum[k][b, c] = P(site k takes value <= c | remaining budget b) under
    the product measure conditioned on total <= N, sites filled in order."""
    M = len(probs) - 1
    W = np.zeros((n_sites + 1, N + 1))
    W[0, :] = 1.0
    for k in range(1, n_sites + 1):
        for b in range(N + 1):
            c_max = min(M, b)
            W[k, b] = np.dot(probs[:c_max + 1], W[k - 1, b - np.arange(c_max + 1)])
    cums = []
    for k in range(n_sites):
        rem = n_sites - 1 - k          # sites still to fill after this one
        tab = np.zeros((N + 1, M + 1))
        for b in range(N + 1):
            c_max = min(M, b)
            w = np.zeros(M + 1)
            w[:c_max + 1] = probs[:c_max + 1] * W[rem, b - np.arange(c_max + 1)]
            tab[b] = np.cumsum(w) / w.sum()
        cums.append(tab)
    return cums


def sample_initial(config, marginal, n, uniforms=None, seed_offset=1):
    """n draws from the truncated product measure on the config's sites
    (conditioned on the total cap when present). `uniforms` overrides the
    (n, n_sites) driving array for common-random-number experiments."""
    probs = np.asarray(marginal.probs, dtype=float)
    probs = probs / probs.sum()
    n_sites = len(config.sites)
    if uniforms is None:
        rng = _traj_rng(config.seed, -seed_offset)
        uniforms = rng.random((n, n_sites))
    occ = np.zeros((n, n_sites), dtype=np.int64)
    if config.N is None:
        cum = np.cumsum(probs)
        occ = (uniforms[:, :, None] > cum[None, None, :-1]).sum(axis=2)
        return occ
    cums = _budget_cumulatives(probs, n_sites, config.N)
    budget = np.full(n, config.N)
    for k in range(n_sites):
        rows = cums[k][budget]
        c = (uniforms[:, k, None] > rows[:, :-1]).sum(axis=1)
        occ[:, k] = c
        budget -= c
    return occ


# ---------------------------------------------------------------------------
# batched direct method

class _StreamBank:
    """Per-trajectory uniform buffers over Philox streams keyed
    (seed, trajectory id); draws are consumed in lockstep batches."""

    def __init__(self, seed, n, chunk=256):
        self.gens = [_traj_rng(seed, tid) for tid in range(n)]
        self.chunk = chunk
        self.buf = np.empty((n, chunk))
        self.pos = np.full(n, chunk, dtype=np.int64)

    def draw(self, idx):
        empty = idx[self.pos[idx] >= self.chunk]
        for i in empty:
            self.buf[i] = self.gens[i].random(self.chunk)
            self.pos[i] = 0
        out = self.buf[idx, self.pos[idx]]
        self.pos[idx] += 1
        return out


@dataclass
class HitStats:
    grid: np.ndarray
    p_hat: np.ndarray
    stderr: np.ndarray
    tau: np.ndarray             # hitting time, +inf when censored at horizon
    lam_hat: float
    ci: tuple                   # 99% interval for lam_hat
    fit_window: tuple
    n_traj: int
    seed: int
    warning: Optional[str] = None


def _wls_rate(grid, p_hat, window, n):
    sel = (grid >= window[0]) & (grid <= window[1]) & (p_hat > 0)
    t = grid[sel]
    p = p_hat[sel]
    # weight = inverse variance of log p under binomial counts
    w = n * p / (1.0 - p + 1e-300)
    W = w.sum()
    tbar = (w * t).sum() / W
    ybar = (w * np.log(p)).sum() / W
    slope = (w * (t - tbar) * (np.log(p) - ybar)).sum() / (w * (t - tbar) ** 2).sum()
    return -slope


def survival_mc(config, grid, n_traj=None, horizon=None, fit_window=None,
                n_boot=200, marginal=None):
    """Empirical survival P(tau > t) from the stationary initial law;
    trajectories starting inside the target count as tau = 0.

    The decay rate is a weighted least-squares slope of log P-hat over the
    fit window; its 99% interval is a trajectory bootstrap, which respects
    the correlation between grid points sharing trajectories.
    """
    grid = np.asarray(grid, dtype=float)
    n = config.n_traj if n_traj is None else n_traj
    horizon = config.horizon if horizon is None else horizon
    if marginal is None:
        raise ValueError("survival_mc needs the site marginal for the initial law")
    mv = _Moves(config)
    support_idx, comp = _pattern_arrays(config)
    occ = sample_initial(config, marginal, n)
    tot = occ.sum(axis=1)
    tau = np.full(n, np.inf)
    hit0 = _in_target_batch(occ, support_idx, comp)
    tau[hit0] = 0.0
    t = np.zeros(n)
    active = np.flatnonzero(~hit0)
    bank = _StreamBank(config.seed, n)
    while active.size:
        R = mv.rates_batch(occ[active], tot[active])
        total = R.sum(axis=1)
        stuck = total <= 0
        if stuck.any():
            t[active[stuck]] = horizon
        live = active[~stuck]
        R = R[~stuck]
        total = total[~stuck]
        if not live.size:
            break
        dt = -np.log1p(-bank.draw(live)) / total
        t[live] += dt
        expired = t[live] > horizon
        u = bank.draw(live) * total
        pick = (np.cumsum(R, axis=1) < u[:, None]).sum(axis=1)
        pick = np.minimum(pick, mv.n_moves - 1)
        step = live[~expired]
        sub = occ[step]
        subtot = tot[step]
        mv.apply_batch(sub, subtot, pick[~expired])
        occ[step] = sub
        tot[step] = subtot
        hit = _in_target_batch(occ[step], support_idx, comp)
        tau[step[hit]] = t[step[hit]]
        active = step[~hit]
    p_hat = (tau[None, :] > grid[:, None]).mean(axis=1)
    stderr = np.sqrt(p_hat * (1 - p_hat) / n)
    if fit_window is None:
        fit_window = (grid[len(grid) // 8], grid[-1])
    lam_hat = _wls_rate(grid, p_hat, fit_window, n)
    warning = None
    n_window = int((tau > fit_window[0]).sum())
    if n_window < 100:
        warning = "fewer than 100 surviving trajectories in the fit window"
        warnings.warn(warning, stacklevel=2)
    rng = _traj_rng(config.seed, -2)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        samp = tau[rng.integers(0, n, size=n)]
        pb = (samp[None, :] > grid[:, None]).mean(axis=1)
        boots[b] = _wls_rate(grid, pb, fit_window, n)
    lo, hi = np.percentile(boots, [0.5, 99.5])
    if warning:
        lo, hi = lam_hat - 2 * (lam_hat - lo), lam_hat + 2 * (hi - lam_hat)
    return HitStats(grid=grid, p_hat=p_hat, stderr=stderr, tau=tau,
                    lam_hat=float(lam_hat), ci=(float(lo), float(hi)),
                    fit_window=tuple(fit_window), n_traj=n, seed=config.seed,
                    warning=warning)


# ---------------------------------------------------------------------------
# shared-clock couplings

@dataclass
class CouplingReport:
    violations: int
    n_pairs: int
    n_events: int
    tau_low: np.ndarray
    tau_high: np.ndarray


def coupled_order_run(config, eta0, zeta0, n_pairs=1000, n_events=1000):
    """Basic coupling of an ordered pair under the per-site cap: shared site
    choice, shared offset, shared thinning uniform; a move applies in each
    copy where admissible. Counts componentwise order violations, which must
    be zero. The total cap is not applied here: censoring a birth by the
    total in one copy only would break the order, and the coupled dynamics
    is the per-site-cap process.
    """
    eta0 = np.asarray(eta0, dtype=np.int64)
    zeta0 = np.asarray(zeta0, dtype=np.int64)
    if (eta0 > zeta0).any():
        raise ValueError("initial pair not componentwise ordered")
    sites = list(config.sites)
    n_sites = len(sites)
    tk = truncate_kernel(config.kernel, sites)
    offsets = config.kernel.offsets
    probs = np.array([p for _, p in offsets])
    pcum = np.cumsum(probs)
    # in-box target per (site, offset); -1 encodes escape (death move)
    pos = {s: k for k, s in enumerate(sites)}
    tgt = np.full((n_sites, len(offsets)), -1, dtype=np.int64)
    birth_ok = np.zeros((n_sites, len(offsets)), dtype=bool)
    for a, s in enumerate(sites):
        for o, (v, _) in enumerate(offsets):
            t = tuple(x + y for x, y in zip(s, v))
            if t in pos:
                tgt[a, o] = pos[t]
            src = tuple(x - y for x, y in zip(s, v))
            birth_ok[a, o] = src not in pos
    g = np.asarray(config.rates.values, dtype=float)
    gM = g[config.M]
    p_jump = gM / (gM + config.gamma)

    low = np.tile(eta0, (n_pairs, 1))
    high = np.tile(zeta0, (n_pairs, 1))
    bank = _StreamBank(config.seed, n_pairs, chunk=1024)
    rows = np.arange(n_pairs)
    support_idx = comp = None
    if config.pattern is not None:
        support_idx, comp = _pattern_arrays(config)
    tau_low = np.full(n_pairs, np.inf)
    tau_high = np.full(n_pairs, np.inf)
    t = np.zeros(n_pairs)
    rate = n_sites * (gM + config.gamma)
    violations = 0
    for _ in range(n_events):
        t += -np.log1p(-bank.draw(rows)) / rate
        site = (bank.draw(rows) * n_sites).astype(np.int64)
        u_act = bank.draw(rows)
        off = (pcum[None, :-1] < bank.draw(rows)[:, None]).sum(axis=1)
        u_thin = bank.draw(rows)
        jump = u_act < p_jump
        for arr in (low, high):
            occ_s = arr[rows, site]
            accept = jump & (u_thin < g[occ_s] / gM) & (occ_s >= 1)
            target = tgt[site, off]
            exch = accept & (target >= 0)
            exch &= arr[rows, np.maximum(target, 0)] < config.M
            death = accept & (target < 0)
            birth = (~jump) & birth_ok[site, off] & (arr[rows, site] < config.M)
            arr[rows[exch], site[exch]] -= 1
            arr[rows[exch], target[exch]] += 1
            arr[rows[death], site[death]] -= 1
            arr[rows[birth], site[birth]] += 1
        violations += int((low > high).any(axis=1).sum())
        if support_idx is not None:
            for arr, tau in ((low, tau_low), (high, tau_high)):
                hit = _in_target_batch(arr, support_idx, comp) & np.isinf(tau)
                tau[hit] = t[hit]
    return CouplingReport(violations=violations, n_pairs=n_pairs,
                          n_events=n_events, tau_low=tau_low, tau_high=tau_high)


@dataclass
class KillReport:
    t: float
    ks: tuple
    p_k: np.ndarray             # P(tau^k > t) per k
    stderr: np.ndarray
    p_tau: float                # true-survival estimate on the same paths
    pathwise_violations: int


def discretized_kill(config, t, ks=(1, 2, 4, 8), n_traj=2000, marginal=None):
    """Survival checked only at the k checkpoint times i*t/k on shared
    unkilled trajectories; tau^k decreases to tau as the mesh refines, and on
    shared paths the monotonicity in k is exact for nested meshes.
    """
    ks = tuple(sorted(ks))
    K = ks[-1]
    for k in ks:
        if K % k:
            raise ValueError("checkpoint meshes must be nested for exact "
                             "pathwise comparison")
    mv = _Moves(config)
    support_idx, comp = _pattern_arrays(config)
    occ = sample_initial(config, marginal, n_traj)
    tot = occ.sum(axis=1)
    cp_times = t * np.arange(1, K + 1) / K
    in_a_cp = np.zeros((n_traj, K), dtype=bool)
    ever_hit = _in_target_batch(occ, support_idx, comp)
    ptr = np.zeros(n_traj, dtype=np.int64)
    tcur = np.zeros(n_traj)
    bank = _StreamBank(config.seed, n_traj)
    active = np.arange(n_traj)
    while active.size:
        R = mv.rates_batch(occ[active], tot[active])
        total = R.sum(axis=1)
        dt = np.where(total > 0,
                      -np.log1p(-bank.draw(active)) / np.maximum(total, 1e-300),
                      np.inf)
        t_new = tcur[active] + dt
        # checkpoints inside the holding interval see the current state
        cur_in_a = _in_target_batch(occ[active], support_idx, comp)
        while True:
            due = (ptr[active] < K) & (cp_times[np.minimum(ptr[active], K - 1)] <= t_new)
            if not due.any():
                break
            rows = active[due]
            in_a_cp[rows, ptr[rows]] = cur_in_a[due]
            ptr[rows] += 1
        u = bank.draw(active) * total
        pick = np.minimum((np.cumsum(R, axis=1) < u[:, None]).sum(axis=1),
                          mv.n_moves - 1)
        done = (t_new > t) | ~np.isfinite(t_new)
        step = ~done
        rows = active[step]
        sub, subtot = occ[rows], tot[rows]
        mv.apply_batch(sub, subtot, pick[step])
        occ[rows] = sub
        tot[rows] = subtot
        tcur[rows] = t_new[step]
        ever_hit[rows] |= _in_target_batch(occ[rows], support_idx, comp)
        active = rows
    p_k, se = [], []
    viol = 0
    prev_alive = None
    for k in ks:
        checks = in_a_cp[:, K // k - 1::K // k]
        alive = ~checks.any(axis=1)
        p_k.append(alive.mean())
        se.append(np.sqrt(alive.mean() * (1 - alive.mean()) / n_traj))
        if prev_alive is not None:
            viol += int((alive & ~prev_alive).sum())   # finer must kill more
        prev_alive = alive
    viol += int((~ever_hit & ~prev_alive).sum())        # tau^K >= tau pathwise
    return KillReport(t=float(t), ks=ks, p_k=np.array(p_k),
                      stderr=np.array(se), p_tau=float((~ever_hit).mean()),
                      pathwise_violations=viol)


@dataclass
class DomainReport:
    grid: np.ndarray
    p_small: np.ndarray
    p_large: np.ndarray
    diff_stderr: np.ndarray     # paired, from shared trajectories
    min_slack_sigma: float      # min over grid of (p_large - p_small)/stderr


def domain_monotonicity_mc(config, extra_sites, grid, n_traj=2000,
                           marginal=None):
    """Survival comparison between the config's domain U and U plus
    `extra_sites`, driven by common random numbers: one uniformized clock at
    the large-domain rate, shared site/offset/thinning draws; proposals at
    sites outside U are self-loops for the small domain, and escape versus
    exchange is decided per domain by the same offset draw.
    """
    small_sites = tuple(config.sites)
    large_sites = small_sites + tuple(tuple(s) for s in extra_sites
                                      if tuple(s) not in set(small_sites))
    grid = np.asarray(grid, dtype=float)
    g = np.asarray(config.rates.values, dtype=float)
    gM = g[config.M]
    offsets = config.kernel.offsets
    pcum = np.cumsum([p for _, p in offsets])
    n_large = len(large_sites)
    pos = {"small": {s: k for k, s in enumerate(small_sites)},
           "large": {s: k for k, s in enumerate(large_sites)}}
    # per domain: in-domain exchange target / escape, and birth admissibility
    doms = {}
    for name, sites in (("small", small_sites), ("large", large_sites)):
        tgt = np.full((n_large, len(offsets)), -1, dtype=np.int64)
        birth_ok = np.zeros((n_large, len(offsets)), dtype=bool)
        member = np.zeros(n_large, dtype=bool)
        for a, s in enumerate(large_sites):
            if s not in pos[name]:
                continue
            member[a] = True
            for o, (v, _) in enumerate(offsets):
                tj = tuple(x + y for x, y in zip(s, v))
                tgt[a, o] = pos[name].get(tj, -1)
                src = tuple(x - y for x, y in zip(s, v))
                birth_ok[a, o] = src not in pos[name]
        doms[name] = (tgt, birth_ok, member)
    support_idx = np.array([large_sites.index(tuple(s))
                            for s in config.pattern.support])
    comp = np.array([list(t) for t in config.pattern.complement])

    # shared initial uniforms: site-aligned on the large layout
    rng = _traj_rng(config.seed, -1)
    u_init = rng.random((n_traj, n_large))
    cfg_large = SimConfig(kernel=config.kernel, rates=config.rates,
                          gamma=config.gamma, sites=large_sites, M=config.M,
                          N=config.N, pattern=config.pattern, seed=config.seed)
    occ_large = sample_initial(cfg_large, marginal, n_traj, uniforms=u_init)
    small_cols = np.array([large_sites.index(s) for s in small_sites])
    cfg_small = SimConfig(kernel=config.kernel, rates=config.rates,
                          gamma=config.gamma, sites=small_sites, M=config.M,
                          N=config.N, pattern=config.pattern, seed=config.seed)
    occ_small_native = sample_initial(cfg_small, marginal, n_traj,
                                      uniforms=u_init[:, small_cols])
    occ = {"large": occ_large, "small": np.zeros((n_traj, n_large), np.int64)}
    occ["small"][:, small_cols] = occ_small_native

    rate = n_large * (gM + config.gamma)
    p_jump = gM / (gM + config.gamma)
    bank = _StreamBank(config.seed, n_traj, chunk=1024)
    rows = np.arange(n_traj)
    t = np.zeros(n_traj)
    tau = {name: np.full(n_traj, np.inf) for name in doms}
    for name in doms:
        hit = _in_target_batch(occ[name], support_idx, comp)
        tau[name][hit] = 0.0
    horizon = grid[-1]
    while True:
        alive = t <= horizon
        if not alive.any():
            break
        t += -np.log1p(-bank.draw(rows)) / rate
        site = (bank.draw(rows) * n_large).astype(np.int64)
        u_act = bank.draw(rows)
        off = (pcum[None, :-1] < bank.draw(rows)[:, None]).sum(axis=1)
        u_thin = bank.draw(rows)
        jump = u_act < p_jump
        for name, (tgt, birth_ok, member) in doms.items():
            arr = tau[name]
            live = alive & np.isinf(arr) & member[site]
            occ_s = occ[name][rows, site]
            accept = live & jump & (u_thin < g[occ_s] / gM) & (occ_s >= 1)
            target = tgt[site, off]
            exch = accept & (target >= 0)
            exch &= occ[name][rows, np.maximum(target, 0)] < config.M
            death = accept & (target < 0)
            can_birth = occ[name][rows, site] < config.M
            if config.N is not None:
                can_birth &= occ[name].sum(axis=1) < config.N
            birth = live & (~jump) & birth_ok[site, off] & can_birth
            occ[name][rows[exch], site[exch]] -= 1
            occ[name][rows[exch], target[exch]] += 1
            occ[name][rows[death], site[death]] -= 1
            occ[name][rows[birth], site[birth]] += 1
            moved = exch | death | birth
            if moved.any():
                hit = _in_target_batch(occ[name][rows[moved]], support_idx, comp)
                arr[rows[moved][hit]] = t[rows[moved][hit]]
    ind_small = tau["small"][None, :] > grid[:, None]
    ind_large = tau["large"][None, :] > grid[:, None]
    p_small = ind_small.mean(axis=1)
    p_large = ind_large.mean(axis=1)
    diff = (ind_large.astype(float) - ind_small.astype(float))
    stderr = diff.std(axis=1, ddof=1) / np.sqrt(n_traj)
    with np.errstate(invalid="ignore", divide="ignore"):
        sig = np.where(stderr > 0, (p_large - p_small) / stderr, np.inf)
    return DomainReport(grid=grid, p_small=p_small, p_large=p_large,
                        diff_stderr=stderr, min_slack_sigma=float(sig.min()))


def survival_csv(path, stats):
    with open(path, "w") as fh:
        fh.write("t,p_hat,stderr\n")
        for t, p, s in zip(stats.grid, stats.p_hat, stats.stderr):
            fh.write("%.17g,%.17g,%.17g\n" % (t, p, s))
