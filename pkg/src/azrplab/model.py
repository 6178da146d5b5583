"""Physical model layer: jump kernel, interaction rate, site marginals,
target patterns, single-walker hitting probabilities and the tilted density.

Everything here is plain data plus validation; objects are immutable after
construction and safe to share between workers.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


# ---------------------------------------------------------------------------
# kernel


@dataclass(frozen=True)
class Kernel:
    """Single-particle jump law as a map offset -> probability."""

    d: int
    offsets: tuple          # tuple of (offset tuple, probability)
    R: int                  # max-norm range
    drift: tuple            # mean displacement, must be nonzero
    reversed: bool = False  # True when derived by reversing another kernel
    full_lattice: bool = True  # symmetrized support generates all of Z^d

    def prob(self, offset):
        for v, p in self.offsets:
            if v == offset:
                return p
        return 0.0

    def as_dict(self):
        return {v: p for v, p in self.offsets}

    def reverse(self):
        """Dual kernel p*(i,j) = p(j,i), i.e. negated offsets."""
        offs = tuple((tuple(-c for c in v), p) for v, p in self.offsets)
        return Kernel(self.d, offs, self.R, tuple(-c for c in self.drift),
                      reversed=not self.reversed, full_lattice=self.full_lattice)


@dataclass
class KernelReport:
    ok: bool
    errors: list
    notes: list
    kernel: Optional[Kernel]


def _sublattice_full(offsets, d):
    """True when the integer span of the symmetrized offsets is all of Z^d.

    Uses the Smith-normal-form determinant test on the offset matrix.
    """
    vecs = [np.array(v, dtype=np.int64) for v in offsets]
    if not vecs:
        return False
    mat = np.array(vecs).T  # d x k
    if np.linalg.matrix_rank(mat) < d:
        return False
    # full rank: index of the sublattice is gcd of the d x d minors
    from itertools import combinations
    from math import gcd
    k = mat.shape[1]
    g = 0
    for cols in combinations(range(k), d):
        minor = round(np.linalg.det(mat[:, cols]))
        g = gcd(g, abs(minor))
    return g == 1


def validate_kernel(spec, d):
    """Check the jump-law hypotheses and derive range and drift.

    `spec` maps offset tuples to probabilities. Returns a KernelReport; the
    kernel is built whenever no hard error is present. A symmetrized support
    generating a proper sublattice is recorded as a note, not an error, since
    drifted walks confined to a sublattice are legitimate instances here.
    """
    errors, notes = [], []
    offsets = {}
    for v, p in spec.items():
        v = tuple(int(c) for c in v)
        if len(v) != d:
            errors.append("offset %r has dimension %d, expected %d" % (v, len(v), d))
            continue
        if p < 0:
            errors.append("negative probability %g at offset %r" % (p, v))
        if all(c == 0 for c in v) and p != 0:
            errors.append("self-offset must carry zero mass, got %g" % p)
        if p > 0:
            offsets[v] = offsets.get(v, 0.0) + float(p)

    total = sum(offsets.values())
    if abs(total - 1.0) > 1e-12:
        errors.append("probabilities sum to %.17g, expected 1" % total)
    if not offsets:
        errors.append("empty support")

    drift = tuple(float(sum(p * v[k] for v, p in offsets.items()))
                  for k in range(d)) if offsets else (0.0,) * d
    if offsets and all(abs(c) < 1e-15 for c in drift):
        errors.append("zero drift")

    R = max((max(abs(c) for c in v) for v in offsets), default=0)

    full = False
    if offsets:
        sym = set(offsets) | {tuple(-c for c in v) for v in offsets}
        full = _sublattice_full(sym, d)
        if not full:
            notes.append("symmetrized support generates a proper sublattice of Z^%d" % d)

    kernel = None
    if not errors:
        kernel = Kernel(d, tuple(sorted(offsets.items())), R, drift,
                        full_lattice=full)
    return KernelReport(ok=not errors, errors=errors, notes=notes, kernel=kernel)


def build_kernel(spec, d):
    rep = validate_kernel(spec, d)
    if not rep.ok:
        raise ValueError("invalid kernel: " + "; ".join(rep.errors))
    return rep.kernel


@dataclass(frozen=True)
class TruncatedKernel:
    """Kernel restricted to a box, escaping mass folded onto the diagonal."""

    base: Kernel
    sites: tuple            # ordered site tuples of the box
    diagonal: tuple         # p_n(i,i) per site, ordered as `sites`
    diagonal_star: tuple    # p_n^*(i,i) per site

    def diag(self, site_idx):
        return self.diagonal[site_idx]

    def diag_star(self, site_idx):
        return self.diagonal_star[site_idx]


def truncate_kernel(kernel, sites):
    """Fold the mass escaping the site set onto the diagonal (both kernels)."""
    site_set = set(sites)
    diag, diag_star = [], []
    for i in sites:
        m = sum(p for v, p in kernel.offsets
                if tuple(a + b for a, b in zip(i, v)) not in site_set)
        # reversed kernel jumps by -v
        ms = sum(p for v, p in kernel.offsets
                 if tuple(a - b for a, b in zip(i, v)) not in site_set)
        diag.append(m)
        diag_star.append(ms)
    tk = TruncatedKernel(kernel, tuple(sites), tuple(diag), tuple(diag_star))
    # row sums over the box plus diagonal must be 1 exactly
    for idx, i in enumerate(sites):
        s = diag[idx] + sum(p for v, p in kernel.offsets
                            if tuple(a + b for a, b in zip(i, v)) in site_set)
        assert abs(s - 1.0) < 1e-12, "truncated row sum %r at %r" % (s, i)
    return tk


# ---------------------------------------------------------------------------
# interaction rate


@dataclass(frozen=True)
class RateFunction:
    values: tuple   # g(0..M_max)
    Delta: float    # max increment, bounds g(n) <= Delta * n
    sup_g: float    # supremum of g over N (may exceed the tabulated part)

    def __call__(self, n):
        return self.values[n]

    def array(self, upto):
        return np.array(self.values[:upto + 1])


def build_rates(family, M_max, values=None):
    """Tabulate g on 0..M_max. Families: linear g(k)=k, constant g(k)=1 for
    k>=1, or an explicit list. g must be non-decreasing with g(0)=0, g(1)=1."""
    if family == "linear":
        vals = [float(k) for k in range(M_max + 1)]
        sup = float("inf")
    elif family == "constant":
        vals = [0.0] + [1.0] * M_max
        sup = 1.0
    elif family == "explicit":
        vals = [float(v) for v in values]
        if len(vals) < M_max + 1:
            raise ValueError("rate table shorter than cap M_max=%d" % M_max)
        sup = vals[-1]
    else:
        raise ValueError("unknown rate family %r" % family)
    if vals[0] != 0.0 or vals[1] != 1.0:
        raise ValueError("normalization requires g(0)=0 and g(1)=1")
    if any(b < a for a, b in zip(vals, vals[1:])):
        raise ValueError("g must be non-decreasing")
    Delta = max(b - a for a, b in zip(vals, vals[1:]))
    return RateFunction(tuple(vals), Delta, sup)


# ---------------------------------------------------------------------------
# marginal and fugacity


@dataclass(frozen=True)
class Marginal:
    gamma: float
    probs: tuple       # theta(0..M), renormalized over {0..M}
    Z: float           # normalizing constant of the untruncated law
    rho: float         # mean of the untruncated law
    tail: float        # untruncated mass beyond M

    def array(self):
        return np.array(self.probs)


def _theta_weights(rates, gamma, tol=1e-30, hard_cap=100000):
    """Unnormalized weights gamma^n / (g(1)...g(n)) until they are negligible."""
    w = [1.0]
    n = 0
    while n < hard_cap:
        n += 1
        if n < len(rates.values):
            gn = rates(n)
        elif rates.sup_g == float("inf"):
            # linear-family extension; other families keep their last value
            gn = float(n) if rates.values == tuple(float(k) for k in range(len(rates.values))) else rates.values[-1]
        else:
            gn = rates.values[-1]
        if gn == 0:
            raise ValueError("g(%d)=0 with gamma>0: marginal undefined" % n)
        w.append(w[-1] * gamma / gn)
        if w[-1] < tol * max(w):
            break
    return np.array(w)


def build_marginal(rates, gamma, M):
    """Site marginal theta_gamma truncated and renormalized on {0..M}."""
    if gamma < 0 or gamma >= rates.sup_g:
        raise ValueError("gamma=%g outside [0, sup g=%g)" % (gamma, rates.sup_g))
    if gamma == 0:
        return Marginal(0.0, (1.0,) + (0.0,) * M, 1.0, 0.0, 0.0)
    w = _theta_weights(rates, gamma)
    Z = w.sum()
    if Z == 0 or not np.isfinite(Z):
        raise ValueError("normalization underflow/overflow at gamma=%g" % gamma)
    full = w / Z
    rho = float(np.arange(len(full)) @ full)
    head = w[:M + 1]
    probs = head / head.sum()
    tail = float(full[M + 1:].sum()) if len(full) > M + 1 else 0.0
    return Marginal(float(gamma), tuple(probs), float(Z), rho, tail)


def rho_of_gamma(rates, gamma):
    if gamma == 0:
        return 0.0
    w = _theta_weights(rates, gamma)
    return float(np.arange(len(w)) @ w / w.sum())


def gamma_of_rho(rates, rho, tol=1e-12):
    """Invert the increasing map rho(gamma) by monotone bisection."""
    if rho < 0:
        raise ValueError("negative density")
    if rho == 0:
        return 0.0
    lo, hi = 0.0, min(rates.sup_g, 1.0)
    # grow hi until it overshoots; bounded fugacities cannot exceed sup g
    while rho_of_gamma(rates, hi) < rho:
        nxt = hi * 2 if rates.sup_g == float("inf") else (hi + rates.sup_g) / 2
        if nxt == hi or (rates.sup_g != float("inf") and rates.sup_g - hi < 1e-15):
            raise ValueError("density rho=%g not achievable for this g" % rho)
        hi = nxt
    while hi - lo > tol:
        mid = (lo + hi) / 2
        if rho_of_gamma(rates, mid) < rho:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


# ---------------------------------------------------------------------------
# patterns


@dataclass(frozen=True)
class Pattern:
    """Increasing target set with bounded support.

    `complement` lists the occupancy vectors on S that lie outside the target;
    the target is everything else on N^S.
    """

    support: tuple       # ordered site tuples
    complement: tuple    # tuple of occupancy tuples on `support`
    threshold: Optional[int] = None  # set when built from a threshold rule

    def contains(self, occupancy_on_support):
        return tuple(occupancy_on_support) not in set(self.complement)

    @property
    def cylinders(self):
        return self.complement


def threshold_pattern(support, L):
    """Pattern sum_S eta(i) > L; complement is every composition with sum <= L."""
    support = tuple(tuple(s) for s in support)
    k = len(support)
    comp = []

    def rec(prefix, remaining):
        if len(prefix) == k:
            comp.append(tuple(prefix))
            return
        for c in range(remaining + 1):
            rec(prefix + [c], remaining - c)

    rec([], L)
    return Pattern(support, tuple(sorted(comp)), threshold=L)


def explicit_pattern(support, complement):
    support = tuple(tuple(s) for s in support)
    return Pattern(support, tuple(sorted(tuple(c) for c in complement)))


@dataclass
class PatternReport:
    ok: bool
    failures: list       # (clause, message, witness)
    cylinders: tuple


def check_pattern_cf(pattern, infinite_complement=False):
    """Certify connectedness and finiteness of the pattern complement.

    Clause (i): nonempty target with bounded support. Clause (ii): target is
    an up-set not containing the empty configuration. Clause (iii): finite
    complement, connected from the empty configuration by single additions.
    Pass infinite_complement=True when canonicalization already detected an
    infinite complement (e.g. an intersection rule on several sites).
    """
    failures = []
    comp = set(pattern.complement)
    k = len(pattern.support)
    zero = (0,) * k

    if not pattern.support:
        failures.append(("i", "empty support", None))
    if not comp:
        failures.append(("i", "complement empty: target is everything, "
                         "empty configuration would belong to it", zero))
    if infinite_complement:
        failures.append(("iii", "complement is infinite", None))

    if comp and zero not in comp:
        failures.append(("ii", "empty configuration belongs to the target", zero))
    # the target is increasing iff the complement is a down-set
    for theta in sorted(comp):
        for i in range(k):
            if theta[i] > 0:
                below = theta[:i] + (theta[i] - 1,) + theta[i + 1:]
                if below not in comp:
                    failures.append(("ii", "target not increasing", below))
                    break
        else:
            continue
        break

    # connectivity from the empty configuration via single-particle additions
    if comp and zero in comp:
        seen = {zero}
        stack = [zero]
        while stack:
            cur = stack.pop()
            for i in range(k):
                up = cur[:i] + (cur[i] + 1,) + cur[i + 1:]
                if up in comp and up not in seen:
                    seen.add(up)
                    stack.append(up)
        missed = comp - seen
        if missed:
            failures.append(("iii", "complement not connected from the empty "
                             "configuration", sorted(missed)[0]))

    return PatternReport(ok=not failures, failures=failures,
                         cylinders=pattern.complement)


def pattern_from_config(cfg):
    """Canonicalize a pattern section: threshold rule, explicit complement,
    or per-site minimum counts. Returns (pattern, report)."""
    support = [tuple(s) for s in cfg["support"]]
    if "threshold" in cfg:
        pat = threshold_pattern(support, int(cfg["threshold"]))
        return pat, check_pattern_cf(pat)
    if "complement" in cfg:
        pat = explicit_pattern(support, cfg["complement"])
        return pat, check_pattern_cf(pat)
    if "min_counts" in cfg:
        mins = [int(m) for m in cfg["min_counts"]]
        if len(mins) != len(support):
            raise ValueError("min_counts length mismatch")
        if len(support) == 1:
            # complement is {0 .. m-1} on the single site
            pat = explicit_pattern(support, [(c,) for c in range(mins[0])])
            return pat, check_pattern_cf(pat)
        # intersection on several sites: complement contains a full axis, so
        # it is infinite and clause (iii) fails with any large witness
        pat = Pattern(tuple(support), tuple())
        return pat, check_pattern_cf(pat, infinite_complement=True)
    raise ValueError("pattern section needs threshold, complement or min_counts")


# ---------------------------------------------------------------------------
# hitting probabilities of the support


@dataclass(frozen=True)
class EpsilonField:
    eps: dict          # site -> P(walker from site ever hits S)
    eps_star: dict     # same for the reversed walk
    method: str
    halo: int
    residual: float
    sensitivity: float  # max change on the box when the halo grows by R

    def get(self, site):
        return self.eps.get(tuple(site), 0.0)

    def get_star(self, site):
        return self.eps_star.get(tuple(site), 0.0)


def _box_sites(d, n):
    rng = range(-n, n + 1)
    import itertools
    return [tuple(p) for p in itertools.product(rng, repeat=d)]


def _solve_hitting(kernel, S, region):
    """Harmonic solve: eps=1 on S, eps_i = sum_j p(i,j) eps_j on region\\S,
    eps=0 outside the region."""
    S = set(S)
    unknowns = [s for s in region if s not in S]
    index = {s: k for k, s in enumerate(unknowns)}
    m = len(unknowns)
    rows, cols, vals = [], [], []
    b = np.zeros(m)
    for r, i in enumerate(unknowns):
        rows.append(r)
        cols.append(r)
        vals.append(1.0)
        for v, p in kernel.offsets:
            j = tuple(a + c for a, c in zip(i, v))
            if j in S:
                b[r] += p
            elif j in index:
                rows.append(r)
                cols.append(index[j])
                vals.append(-p)
    A = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
    x = spla.spsolve(A, b) if m else np.zeros(0)
    eps = {s: 1.0 for s in S}
    for s, k in index.items():
        eps[s] = float(min(max(x[k], 0.0), 1.0))
    # harmonicity residual on solved off-support sites
    res = 0.0
    for i in unknowns:
        acc = sum(p * eps.get(tuple(a + c for a, c in zip(i, v)), 0.0)
                  for v, p in kernel.offsets)
        res = max(res, abs(eps[i] - acc))
    return eps, res


def _mc_hitting(kernel, S, region, site, walkers, rng):
    """Monte Carlo estimate of the chance a walker from `site` reaches S
    before leaving the region. Returns (estimate, standard error)."""
    S = set(S)
    region = set(region)
    offs = [np.array(v) for v, _ in kernel.offsets]
    probs = np.array([p for _, p in kernel.offsets])
    hits = 0
    for _ in range(walkers):
        pos = np.array(site)
        while True:
            t = tuple(int(c) for c in pos)
            if t in S:
                hits += 1
                break
            if t not in region:
                break
            pos = pos + offs[rng.choice(len(offs), p=probs)]
    p = hits / walkers
    return p, np.sqrt(max(p * (1 - p), 1.0 / walkers) / walkers)


def epsilon_field(kernel, S, d, n, halo, tol=1e-12, method="linear-solve"):
    """Hitting probabilities of S for the walk and its reversal, solved on the
    box [-n,n]^d extended by `halo`, with zero imposed outside (a controlled
    underestimate of the whole-lattice value)."""
    if halo < kernel.R:
        raise ValueError("halo must be at least the kernel range")
    S = [tuple(s) for s in S]
    region = _box_sites(d, n + halo)
    box = _box_sites(d, n)
    eps, r1 = _solve_hitting(kernel, S, region)
    eps_star, r2 = _solve_hitting(kernel.reverse(), S, region)
    # sensitivity: change on the box when the halo grows by R
    wide = _box_sites(d, n + halo + kernel.R)
    eps_w, _ = _solve_hitting(kernel, S, wide)
    eps_star_w, _ = _solve_hitting(kernel.reverse(), S, wide)
    sens = max(max(abs(eps[s] - eps_w[s]) for s in box),
               max(abs(eps_star[s] - eps_star_w[s]) for s in box))
    res = max(r1, r2)
    if res > tol:
        raise RuntimeError("harmonic residual %.3g above tolerance %.3g" % (res, tol))
    return EpsilonField(eps, eps_star, method, halo, res, sens)


# ---------------------------------------------------------------------------
# FKG covariance check


def fkg_check(weights, f, g, directions=("inc", "inc"), tol=1e-12):
    """Covariance of f and g under the enumerated probability weights.

    Returns (covariance, ok). Two functions monotone in the same direction
    must have covariance >= -tol; opposite directions <= tol.
    """
    w = np.asarray(weights, dtype=float)
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    cov = float(w @ (f * g) - (w @ f) * (w @ g))
    same = directions[0] == directions[1]
    ok = cov >= -tol if same else cov <= tol
    return cov, ok


def assert_monotone(states, values, direction="inc"):
    """Exhaustive scan along single-particle additions inside the table."""
    from .statespace import add_site  # local import to avoid a cycle
    for k, eta in enumerate(states.states):
        for i in range(len(states.sites)):
            j = states.index_of(add_site(eta, i))
            if j is None:
                continue
            lo, hi = values[k], values[j]
            if direction == "inc" and hi < lo - 1e-12:
                return False, (k, i)
            if direction == "dec" and hi > lo + 1e-12:
                return False, (k, i)
    return True, None


# ---------------------------------------------------------------------------
# tilted density


@dataclass(frozen=True)
class TiltedDensity:
    """Per-site factor tables of d(nu_eps)/d(nu_rho); adding a particle at a
    site off the support multiplies the density by exactly (1 - eps_i)."""

    sites: tuple
    factors: tuple     # factors[site_idx][n] for n = 0..M
    eps_by_site: tuple

    def value(self, eta):
        out = 1.0
        for idx, n in enumerate(eta):
            out *= self.factors[idx][n]
        return out

    def vector(self, table):
        return np.array([self.value(eta) for eta in table.states])


def tilted_density(kernel_eps, rates, gamma, sites, support, M):
    """Build psi_eps on the given ordered sites with per-site cap M.

    Factors use the untruncated marginal ratios, so the single-particle
    multiplication identity holds exactly at every site.
    """
    support = {tuple(s) for s in support}
    factors, eps_used = [], []
    for s in sites:
        e = 0.0 if s in support else kernel_eps.get(s)
        if s not in support and e >= 1.0:
            raise ValueError("degenerate tilt: eps=1 outside the support at %r" % (s,))
        eps_used.append(e)
        if e == 0.0:
            factors.append(tuple([1.0] * (M + 1)))
            continue
        w = _theta_weights(rates, gamma)
        w_tilt = _theta_weights(rates, (1.0 - e) * gamma)
        Z, Zt = w.sum(), w_tilt.sum()
        # multiplicative build: each added particle scales by exactly (1-e)
        fac = [Z / Zt]
        for _ in range(M):
            fac.append(fac[-1] * (1.0 - e))
        factors.append(tuple(fac))
    return TiltedDensity(tuple(sites), tuple(tuple(f) for f in factors),
                         tuple(eps_used))
