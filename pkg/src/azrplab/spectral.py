"""Principal eigenpair of the killed generator and everything downstream of
it: survival curves by uniformization, the prefactor limit, the Doob
transform, renewal iterates, and monotonicity certification of vectors.

All vectors over the full table are extended by 0 on the target set; weighted
inner products are against the truncated product measure.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaincc, gammaln


@dataclass
class EigenPair:
    lam: float
    u: np.ndarray              # full-table vector, 0 on the target set
    u_star: np.ndarray
    keep: np.ndarray
    residual: float            # sup norm of Qu + lam u on the surviving block
    residual_star: float
    lam_star: float
    gap: float                 # distance from -lam to the next spectral abscissa
    agreement: float           # worst sup distance across random restarts
    overlap: float             # <u, u*> against the truncated measure

    @property
    def u_kept(self):
        return self.u[self.keep]

    @property
    def u_star_kept(self):
        return self.u_star[self.keep]


@dataclass
class SurvivalCurve:
    times: np.ndarray
    values: np.ndarray
    method: str


def _power_iterate(Q, w, x0, tol, maxit):
    """Iterate x <- (I + hQ)x with h just under 1/max|diag|, normalizing
    int x dnu = 1, until the eigen-residual beats tol."""
    h = 0.99 / np.abs(Q.diagonal()).max()
    x = x0 / (w @ x0)
    lam = res = None
    for it in range(maxit):
        x = x + h * (Q @ x)
        x /= w @ x
        if it % 10 == 9:
            Qx = Q @ x
            lam = -(w @ Qx) / (w @ x)
            res = np.abs(Qx + lam * x).max()
            if res < tol:
                return x, lam, res
    raise RuntimeError("power iteration did not reach residual %g in %d steps "
                       "(best %s)" % (tol, maxit, res))


def _gap_estimate(Q, u, left, lam, seed=7, burn=400, block=4):
    """Distance from -lam to the next spectral abscissa, by power iteration
    deflated against the known pair, finished with a small Rayleigh-Ritz
    projection so complex-conjugate second pairs are resolved."""
    n = Q.shape[0]
    if n == 1:
        return np.inf
    h = 0.99 / np.abs(Q.diagonal()).max()
    lu = left @ u

    def step(x):
        y = x + h * (Q @ x)
        return y - u * ((left @ y) / lu)

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x -= u * ((left @ x) / lu)
    for _ in range(burn):
        x = step(x)
        x /= np.abs(x).max()
    basis = [x]
    for _ in range(block - 1):
        basis.append(step(basis[-1]))
    B, _ = np.linalg.qr(np.array(basis).T)
    H = B.T @ np.column_stack([step(B[:, j]) for j in range(B.shape[1])])
    mu = np.linalg.eigvals(H)
    theta = (mu - 1.0) / h          # eigenvalue estimates of the deflated Q
    abscissa = float(np.max(theta.real))
    return -abscissa - lam


def principal_pair(killed, killed_dual, nu, tol=1e-11, starts=8, seed=0,
                   maxit=500_000):
    """Leading eigenpair of both killed blocks by positive power iteration,
    with a multi-start uniqueness check and the dual-eigenvalue identity."""
    Q, Qd = killed.matrix, killed_dual.matrix
    keep = killed.keep
    if killed_dual.keep is None or not np.array_equal(keep, killed_dual.keep):
        raise ValueError("killed blocks built from different target sets")
    w = np.asarray(nu)[keep]
    n = Q.shape[0]

    u, lam, res = _power_iterate(Q, w, np.ones(n), tol, maxit)
    us, lam_s, res_s = _power_iterate(Qd, w, np.ones(n), tol, maxit)

    rng = np.random.default_rng(seed)
    agree = 0.0
    for _ in range(starts):
        x0 = rng.random(n) + 0.05
        v, _, _ = _power_iterate(Q, w, x0, tol, maxit)
        agree = max(agree, np.abs(v - u).max())
    if agree > 1e-8:
        raise RuntimeError("multi-start disagreement %g: leading eigenvector "
                           "not unique" % agree)

    assert lam > 0 and u.min() > 0 and us.min() > 0
    assert abs(lam - lam_s) <= 1e-9 * lam

    gap = _gap_estimate(Q, u, w * us, lam)
    full_u = np.zeros(len(nu))
    full_us = np.zeros(len(nu))
    full_u[keep] = u
    full_us[keep] = us
    return EigenPair(lam=lam, u=full_u, u_star=full_us, keep=keep,
                     residual=res, residual_star=res_s, lam_star=lam_s,
                     gap=gap, agreement=agree, overlap=float(w @ (u * us)))


def _poisson_step(P, v, m, tol, transpose=False):
    """e^{m(P-I)} applied to v through the Poisson-weighted series, truncated
    when the neglected weight is below tol."""
    if m == 0.0:
        return v.copy()
    op = P.T if transpose else P
    # run the weights in float against log factorials to dodge overflow
    out = np.zeros_like(v)
    term = v.copy()
    k = 0
    acc = 0.0
    while True:
        logw = -m + k * np.log(m) - gammaln(k + 1)
        wk = np.exp(logw)
        out += wk * term
        acc += wk
        if acc >= 1.0 - tol and k >= m:
            return out
        term = op @ term
        k += 1
        if k > 1000 + 10 * m:
            raise RuntimeError("uniformization series failed to close")


def survival_curve(killed, nu, grid, tol=1e-12):
    """P(tau > t) on the grid: the killed semigroup applied to the initial
    weights, advanced incrementally by uniformization."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or (grid < 0).any() or (np.diff(grid) <= 0).any():
        raise ValueError("grid must be increasing and non-negative")
    Q = killed.matrix
    rate = np.abs(Q.diagonal()).max()
    if rate == 0.0:
        rate = 1.0
    P = sp.eye(Q.shape[0], format="csr") + Q / rate
    p = np.asarray(nu)[killed.keep].copy()
    values = []
    t_prev = 0.0
    for t in grid:
        p = _poisson_step(P, p, rate * (t - t_prev), tol, transpose=True)
        values.append(p.sum())
        t_prev = t
    values = np.asarray(values)
    assert (values >= -tol).all() and (values <= 1 + tol).all()
    assert (np.diff(values) <= tol).all()
    return SurvivalCurve(times=grid, values=values, method="uniformization")


@dataclass
class PrefactorReport:
    c_values: np.ndarray
    T: float
    c_T: float
    cesaro: float
    limit: float               # 1/<u,u*>
    derived_tol: float


def prefactor_limit(curve, pair):
    """c_t = e^{lam t} P(tau>t): bounded by 1, converging to 1/<u,u*>, and
    the Cesaro average of c converging to the same limit."""
    c = np.exp(pair.lam * curve.times) * curve.values
    assert (c <= 1 + 1e-10).all()
    limit = 1.0 / pair.overlap
    T = 20.0 / pair.gap if np.isfinite(pair.gap) else 0.0
    i_T = int(np.argmin(np.abs(curve.times - T)))
    T_eff = curve.times[i_T]
    # transient dies like e^{-gap t}; give the unknown amplitude two decades
    derived_tol = max(100.0 * np.exp(-pair.gap * T_eff), 1e-12) if T_eff > 0 \
        else 1e-12
    assert abs(c[i_T] - limit) <= max(derived_tol, 5e-3 * limit)
    upto = slice(0, i_T + 1)
    cesaro = np.trapezoid(c[upto], curve.times[upto]) / T_eff if T_eff > 0 \
        else c[0]
    assert abs(cesaro - limit) <= 1e-2 * limit
    return PrefactorReport(c_values=c, T=T_eff, c_T=float(c[i_T]),
                           cesaro=float(cesaro), limit=limit,
                           derived_tol=derived_tol)


def doob_transform(pair, killed):
    """Conditioned generator on the surviving block, rows summing to zero by
    construction, with its stationary law u u* nu (normalized)."""
    u = pair.u_kept
    Q = killed.matrix.tocoo()
    off = Q.row != Q.col
    rows, cols = Q.row[off], Q.col[off]
    vals = Q.data[off] * u[cols] / u[rows]
    mat = sp.csr_matrix((vals, (rows, cols)), shape=Q.shape)
    mat = mat - sp.diags(np.asarray(mat.sum(axis=1)).ravel())
    from .generator import SparseGenerator
    gen = SparseGenerator(kind="doob", matrix=mat.tocsr(), table=killed.table,
                          gamma=killed.gamma, keep=killed.keep)
    # stationary density against the measure on the block (unnormalized)
    return gen, u * pair.u_star_kept


def doob_stationary_residual(gen, pair, nu):
    mu = np.asarray(nu)[gen.keep] * pair.u_kept * pair.u_star_kept
    mu = mu / mu.sum()
    return float(np.abs(gen.matrix.T @ mu).sum())


def conditional_profile(killed, nu, T, tol=1e-13):
    """u_T = e^{T L}1 / P(tau>T) on the surviving block."""
    Q = killed.matrix
    rate = np.abs(Q.diagonal()).max()
    if rate == 0.0:
        rate = 1.0
    P = sp.eye(Q.shape[0], format="csr") + Q / rate
    v = _poisson_step(P, np.ones(Q.shape[0]), rate * T, tol)
    p0 = np.asarray(nu)[killed.keep]
    surv = p0 @ v
    return v / surv, surv


@dataclass
class RenewalIterate:
    density: np.ndarray        # full-table density against the measure
    k: int
    tail_fraction: float
    grid: np.ndarray


def renewal_iterate(killed, nu, k, t_max, quad_points=2000, tol=1e-13,
                    tail_limit=1e-6):
    """Density of the k-th renewal iterate against the measure:
    int u_t dm_k(t) with dm_k proportional to P(tau>t) t^k dt.

    The profile u_t is advanced by uniformization until it stops moving
    (the conditioned semigroup mixes at the gap scale), after which the
    integrand is flat in everything but the scalar survival weight, which
    decays at the known exponential rate; the mass beyond t_max is evaluated
    in closed form from that rate and must stay below tail_limit.
    """
    if k < 0 or t_max <= 0:
        raise ValueError("need k >= 0 and t_max > 0")
    Q = killed.matrix
    n = Q.shape[0]
    rate = np.abs(Q.diagonal()).max()
    if rate == 0.0:
        rate = 1.0
    P = sp.eye(Q.shape[0], format="csr") + Q / rate

    half = quad_points // 2
    t_dense = min(t_max / 2.0, 1000.0 / rate)
    # dense early grid (profile transient), coarse late grid (scalar decay)
    grid = np.unique(np.concatenate([
        np.linspace(0.0, t_dense, half),
        np.linspace(t_dense, t_max, quad_points - half)]))

    p0 = np.asarray(nu)[killed.keep]
    v = np.ones(n)
    surv = np.empty(len(grid))
    frozen = None
    lam_hat = None
    t_prev = 0.0
    # trapezoid sums accumulated online; storing every profile would need
    # len(grid) * dim memory
    den = 0.0
    num = np.zeros(n)
    prev_prof = None
    prev_w = 0.0
    for idx, t in enumerate(grid):
        if frozen is None:
            v_new = _poisson_step(P, v, rate * (t - t_prev), tol)
            s = p0 @ v_new
            prof = v_new / s
            if idx > 0 and np.abs(prof - prev_prof).max() < 1e-13:
                frozen = prof
                lam_hat = -np.log(s / surv[idx - 1]) / (t - t_prev)
            v = v_new
        else:
            s = surv[idx - 1] * np.exp(-lam_hat * (t - grid[idx - 1]))
            prof = frozen
        surv[idx] = s
        w = s * (t ** k if t > 0 else (1.0 if k == 0 else 0.0))
        if idx > 0:
            dt = t - t_prev
            den += 0.5 * dt * (prev_w + w)
            num += 0.5 * dt * (prev_w * prev_prof + w * prof)
        prev_prof = prof
        prev_w = w
        t_prev = t

    if lam_hat is None:
        # never froze: differentiate the scalar tail directly
        lam_hat = -np.log(surv[-1] / surv[-2]) / (grid[-1] - grid[-2])

    # closed-form mass past t_max at the fitted decay rate
    x = lam_hat * t_max
    log_tail = (np.log(surv[-1]) + x + gammaln(k + 1)
                - (k + 1) * np.log(lam_hat))
    tail = np.exp(log_tail) * gammaincc(k + 1, x)
    tail_fraction = tail / (den + tail)
    if tail_fraction > tail_limit:
        raise RuntimeError("horizon too short: %.3g of the weight lies past "
                           "t_max" % tail_fraction)
    density_block = (num + prev_prof * tail) / (den + tail)
    density = np.zeros(len(nu))
    density[killed.keep] = density_block
    return RenewalIterate(density=density, k=k, tail_fraction=tail_fraction,
                          grid=grid)


@dataclass(frozen=True)
class Violation:
    check: str                 # "nonneg" | "decreasing" | "gradient"
    state: int
    site: int
    excess: float              # relative overshoot of the violated inequality


def certify_D(phi, table, eps, which="D_n", in_target=None, support=None,
              tol=0.0):
    """Report every failure of the monotone-class conditions for a vector
    vanishing on the target set: non-negativity, decrease along admissible
    creation edges between surviving states, and the per-site bound
    phi(eta) - phi(eta + delta_i) <= phi(eta) eps_i off the base sites
    (eps_i + eps*_i for the density variant). Report-only.
    """
    from .statespace import add_site
    phi = np.asarray(phi, dtype=float)
    if in_target is None:
        in_target = phi == 0.0
    in_target = np.asarray(in_target, dtype=bool)
    if support is None:
        # the hitting field is exactly 1 on its base sites
        support = {s for s in table.sites if eps.get(s) >= 1.0}
    else:
        support = {tuple(s) for s in support}
    out = []
    scale = np.abs(phi).max()
    if scale == 0.0:
        scale = 1.0
    for s in np.flatnonzero(~in_target):
        if phi[s] < -tol * scale:
            out.append(Violation("nonneg", int(s), -1, float(-phi[s] / scale)))
    index = table.index
    for s in np.flatnonzero(~in_target):
        eta = table.states[s]
        base = phi[s]
        denom = base if base > 0 else scale
        for i, site in enumerate(table.sites):
            t = index.get(add_site(eta, i))
            if t is None or in_target[t]:
                continue
            rise = phi[t] - base
            if rise > tol * denom:
                out.append(Violation("decreasing", int(s), i,
                                     float(rise / denom)))
            if site in support:
                continue
            if which == "D_n":
                e = eps.get(site)
            elif which == "D_n^*":
                e = eps.get_star(site)
            elif which == "M_n-density":
                e = eps.get(site) + eps.get_star(site)
            else:
                raise ValueError(which)
            drop = base - phi[t] - base * e
            if drop > tol * denom:
                out.append(Violation("gradient", int(s), i,
                                     float(drop / denom)))
    return out


def worst_excess(violations, check=None):
    sel = [v.excess for v in violations if check is None or v.check == check]
    return max(sel) if sel else 0.0


def curve_csv(path, curve, lam):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "survival", "c_t"])
        for t, p in zip(curve.times, curve.values):
            w.writerow(["%.17g" % t, "%.17g" % p, "%.17g" % (np.exp(lam * t) * p)])


def sweep_csv(path, rows):
    """rows: iterable of (n, lam, gap, overlap)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "lambda", "gap", "overlap"])
        for r in rows:
            w.writerow(["%s" % r[0]] + ["%.17g" % x for x in r[1:]])
