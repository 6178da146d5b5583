"""Configuration-driven pipeline: model -> state space -> generators ->
eigenpairs -> variational suite -> simulation, emitting CSV artifacts, a
reproducibility manifest, and a pass/fail report whose lines carry the
equation tags they verify.

Exit codes: 0 all enabled assertions pass, 1 invalid configuration,
2 computation failure, 3 assertion failure. The manifest is written even on
failure, with the failing stage named.
"""

import argparse
import json
import os
import sys
import time

import numpy as np
import yaml

from . import __version__, model, statespace, generator, spectral, variational, simulate

STAGES = ("model", "statespace", "generator", "spectral", "variational",
          "simulate")


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# schema

def _posint(v):
    return isinstance(v, int) and not isinstance(v, bool) and v > 0


def _nonnegint(v):
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


def _posnum(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0


SCHEMA = {
    "seed": ("integer", lambda v: isinstance(v, int) and not isinstance(v, bool)),
    "output": ("string", lambda v: isinstance(v, str)),
    "stages": ("list of stage names", lambda v: isinstance(v, list)
               and all(s in STAGES for s in v)),
    "model": {
        "d": ("positive integer", _posint),
        "kernel": {
            "offsets": ("list of {v, p}", lambda v: isinstance(v, list)),
        },
        "rates": {
            "family": ("string", lambda v: isinstance(v, str)),
            "values": ("list of numbers", lambda v: isinstance(v, list)),
        },
        "rho": ("positive number", _posnum),
        "gamma": ("positive number", _posnum),
        "pattern": {
            "support": ("list of sites", lambda v: isinstance(v, list)),
            "threshold": ("non-negative integer", _nonnegint),
            "complement": ("list of occupancy tuples", lambda v: isinstance(v, list)),
            "min_counts": ("list of integers", lambda v: isinstance(v, list)),
        },
        "epsilon": {
            "halo": ("positive integer", _posint),
            "assert_sensitivity": ("positive number", _posnum),
        },
        "fkg": {
            "pairs": ("positive integer", _posint),
            "sites": ("positive integer", _posint),
        },
    },
    "statespace": {
        "box_n": ("non-negative integer or list", lambda v: _nonnegint(v) or (
            isinstance(v, list) and len(v) > 0 and all(_nonnegint(x) for x in v))),
        "site_cap": ("positive integer", _posint),
        "total_cap": ("positive integer", _posint),
        "tail_bound": ("positive number", _posnum),
    },
    "solver": {
        "tol": ("positive number", _posnum),
        "starts": ("positive integer", _posint),
    },
    "variational": {
        "samples": ("positive integer", _posint),
        "triples": ("positive integer", _posint),
        "gradient_checks": ("positive integer", _posint),
        "regularity": ("boolean", lambda v: isinstance(v, bool)),
    },
    "simulation": {
        "trajectories": ("positive integer", _posint),
        "horizon": ("positive number", _posnum),
        "grid_step": ("positive number", _posnum),
        "coupled_pairs": ("positive integer", _posint),
        "coupled_events": ("positive integer", _posint),
        "kill_time": ("positive number", _posnum),
        "kill_meshes": ("list of integers", lambda v: isinstance(v, list)),
        "chi2_samples": ("positive integer", _posint),
        "fit_window": ("two numbers", lambda v: isinstance(v, list) and len(v) == 2),
        "seed": ("integer", lambda v: isinstance(v, int) and not isinstance(v, bool)),
    },
}


def _validate(cfg, schema, path, errors):
    if not isinstance(cfg, dict):
        errors.append("%s: must be a mapping" % (path or "config"))
        return
    for key, value in cfg.items():
        here = "%s.%s" % (path, key) if path else str(key)
        if key not in schema:
            errors.append("unknown key: %s" % here)
            continue
        rule = schema[key]
        if isinstance(rule, dict):
            _validate(value, rule, here, errors)
        else:
            desc, pred = rule
            if not pred(value):
                errors.append("%s: must be %s" % (here, desc))


def load_config(path):
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    errors = []
    _validate(cfg, SCHEMA, "", errors)
    for section in ("model", "statespace"):
        if section not in (cfg or {}):
            errors.append("missing required section: %s" % section)
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


# ---------------------------------------------------------------------------
# pipeline

class CheckFailure(Exception):
    pass


class Run:
    def __init__(self, cfg, out_dir, stages, verbose=False):
        self.cfg = cfg
        self.out = out_dir
        self.stages = stages
        self.verbose = verbose
        self.seed = int(cfg.get("seed", 0))
        self.checks = []
        self.derived = {}
        self.wall = {}
        self.failed_stage = None
        self.ctx = {}
        os.makedirs(out_dir, exist_ok=True)

    def check(self, tag, name, passed, value=None, tol=None):
        self.checks.append({"tag": tag, "name": name, "passed": bool(passed),
                            "value": None if value is None else float(value),
                            "tol": None if tol is None else float(tol)})
        if self.verbose or not passed:
            print(self._line(self.checks[-1]))

    @staticmethod
    def _line(c):
        out = "%s  [%s] %s" % ("PASS" if c["passed"] else "FAIL", c["tag"],
                               c["name"])
        if c["value"] is not None:
            out += "  value=%.6g" % c["value"]
        if c["tol"] is not None:
            out += "  tol=%.3g" % c["tol"]
        return out

    # -- model ------------------------------------------------------------

    def stage_model(self):
        m = self.cfg["model"]
        d = m["d"]
        offsets = {}
        for item in m["kernel"]["offsets"]:
            offsets[tuple(item["v"])] = float(item["p"])
        rep = model.validate_kernel(offsets, d)
        self.check("def-p", "kernel admissibility", rep.ok)
        if not rep.ok:
            raise CheckFailure("kernel: " + "; ".join(rep.errors))
        kern = rep.kernel
        for note in rep.notes:
            self.derived.setdefault("kernel_notes", []).append(note)

        site_cap = self.cfg["statespace"]["site_cap"]
        rcfg = m.get("rates", {"family": "linear"})
        rates = model.build_rates(rcfg.get("family", "linear"), site_cap,
                                  rcfg.get("values"))
        if "gamma" in m:
            gamma = float(m["gamma"])
        else:
            gamma = model.gamma_of_rho(rates, float(m["rho"]))
        marg = model.build_marginal(rates, gamma, site_cap)
        self.derived["gamma"] = gamma
        self.derived["rho"] = marg.rho
        probs = np.asarray(marg.probs)
        g = np.asarray(rates.values)
        upto = min(site_cap, len(probs) - 1)   # weights below 1e-30 are cut
        ratio = max(abs(probs[n + 1] * g[n + 1] - gamma * probs[n])
                    / max(gamma * probs[n], 1e-300)
                    for n in range(upto))
        self.check("def-m", "marginal ratio identity", ratio < 1e-14, ratio, 1e-14)

        pat, prep = model.pattern_from_config(m["pattern"])
        self.check("eq0.5", "pattern (C-F) certification", prep.ok)
        if not prep.ok:
            raise CheckFailure("pattern: %r" % (prep.failures,))

        ns = self.cfg["statespace"]["box_n"]
        self.box_ns = sorted(ns) if isinstance(ns, list) else [ns]
        ecfg = m.get("epsilon", {})
        halo = int(ecfg.get("halo", max(2 * kern.R, 2)))
        eps = model.epsilon_field(kern, pat.support, d, max(self.box_ns), halo)
        self.check("sec2.3", "hitting field harmonicity residual",
                   eps.residual <= 1e-12, eps.residual, 1e-12)
        self.derived["halo_sensitivity"] = eps.sensitivity
        if "assert_sensitivity" in ecfg:
            tol = float(ecfg["assert_sensitivity"])
            self.check("sec2.3", "hitting field halo sensitivity",
                       eps.sensitivity < tol, eps.sensitivity, tol)

        self.ctx.update(kernel=kern, rates=rates, gamma=gamma, marginal=marg,
                        pattern=pat, eps=eps, d=d)

        if m.get("fkg"):
            self._fkg_suite(m["fkg"])

    def _fkg_suite(self, fcfg):
        """Covariance suite on a product table (no total cap): the conditioned
        table measure is not a product and positive association genuinely
        fails for it, so the suite runs where the property is a theorem."""
        kern, marg = self.ctx["kernel"], self.ctx["marginal"]
        pat = self.ctx["pattern"]
        n_sites = int(fcfg.get("sites", 4))
        M = self.cfg["statespace"]["site_cap"]
        sites = list(pat.support)
        frontier = list(pat.support)
        while len(sites) < n_sites and frontier:
            nxt = []
            for s in frontier:
                for v, _ in kern.offsets:
                    for sign in (1, -1):
                        t = tuple(a + sign * b for a, b in zip(s, v))
                        if t not in sites:
                            sites.append(t)
                            nxt.append(t)
                        if len(sites) >= n_sites:
                            break
                    if len(sites) >= n_sites:
                        break
                if len(sites) >= n_sites:
                    break
            frontier = nxt
        box = statespace.LatticeBox(self.ctx["d"], 0, tuple(sites[:n_sites]))
        table = statespace.StateTable(box, M, None)
        nu = statespace.measure_vector(table, marg)
        occ = np.array(table.states)
        rng = np.random.default_rng(self.seed)
        worst = np.inf
        for _ in range(int(fcfg.get("pairs", 200))):
            th1 = rng.integers(0, M + 1, size=len(box.sites))
            th2 = rng.integers(0, M + 1, size=len(box.sites))
            f = (occ >= th1).all(axis=1).astype(float)
            g2 = (occ >= th2).all(axis=1).astype(float)
            cov, _ = model.fkg_check(nu, f, g2)
            worst = min(worst, cov)
        self.check("def-FKG", "monotone pair covariance suite (product table)",
                   worst >= -1e-12, worst, -1e-12)

    # -- statespace -------------------------------------------------------

    def stage_statespace(self):
        M = self.cfg["statespace"]["site_cap"]
        N = self.cfg["statespace"].get("total_cap")
        marg = self.ctx["marginal"]
        tables, nus = {}, {}
        for n in self.box_ns:
            box = statespace.make_box(self.ctx["d"], n)
            tables[n] = statespace.StateTable(box, M, N)
            nus[n] = statespace.measure_vector(tables[n], marg)
        primary = self.box_ns[-1]
        self.derived["state_count"] = {str(n): len(tables[n]) for n in self.box_ns}
        self.derived["tail_mass_site"] = marg.tail
        bound = float(self.cfg["statespace"].get("tail_bound", 1e-6))
        self.check("def-K", "single-site truncation tail",
                   marg.tail < bound, marg.tail, bound)
        self.ctx.update(tables=tables, nus=nus, primary=primary, M=M, N=N)

    # -- generator --------------------------------------------------------

    def stage_generator(self):
        kern, rates, gamma = (self.ctx[k] for k in ("kernel", "rates", "gamma"))
        pat = self.ctx["pattern"]
        gens, duals, killed, killed_d, indicators = {}, {}, {}, {}, {}
        for n in self.box_ns:
            t = self.ctx["tables"][n]
            gens[n] = generator.assemble_open(t, kern, rates, gamma)
            duals[n] = generator.assemble_dual(t, kern, rates, gamma)
            ind = statespace.pattern_indicator(t, pat)
            indicators[n] = ind
            killed[n] = generator.kill(gens[n], ind)
            killed_d[n] = generator.kill(duals[n], ind)
        p = self.ctx["primary"]
        nu = self.ctx["nus"][p]
        r = generator.row_sum_residual(gens[p])
        self.check("eq2.1", "generator row sums", r < 1e-12, r, 1e-12)
        r = generator.invariance_residual(gens[p], nu)
        self.check("sec3.1", "measure invariance |nu^T L|_1", r < 1e-12, r, 1e-12)
        r = generator.adjointness_residual(gens[p], duals[p], nu)
        self.check("def-adjoint", "weighted adjointness residual",
                   r < 1e-13, r, 1e-13)
        self._ibp_checks()
        self.ctx.update(gens=gens, duals=duals, killed=killed,
                        killed_dual=killed_d, indicators=indicators)

    def _ibp_checks(self, pairs=100):
        n = self.box_ns[0]           # smallest box: the identity is exact at
        table = self.ctx["tables"][n]  # any size, the scan cost is not
        nu = self.ctx["nus"][n]
        kern, rates, gamma = (self.ctx[k] for k in ("kernel", "rates", "gamma"))
        rng = np.random.default_rng(self.seed + 1)
        occ = np.array(table.states)
        tot = table.totals
        cap_ok = tot <= (self.ctx["N"] - 2 if self.ctx["N"] is not None
                         else 10**9)
        cap_ok &= (occ < self.ctx["M"] - 1).all(axis=1)
        pos = {s: k for k, s in enumerate(table.sites)}
        edges = [(a, pos[tuple(x + y for x, y in zip(s, v))])
                 for a, s in enumerate(table.sites)
                 for v, _ in kern.offsets
                 if tuple(x + y for x, y in zip(s, v)) in pos]
        if not edges:    # one-site boxes have no in-box exchange edges
            self.check("eq-byparts", "integration by parts (no in-box edges)",
                       True, 0.0)
            return
        worst = 0.0
        for _ in range(pairs):
            i, j = edges[rng.integers(len(edges))]
            phi = rng.random(len(table))
            f = rng.random(len(table)) * cap_ok
            worst = max(worst, generator.ibp_check(table, nu, rates, gamma,
                                                   i, j, phi, f))
        self.check("eq-byparts", "integration by parts, %d cap-safe pairs" % pairs,
                   worst < 1e-13, worst, 1e-13)

    # -- spectral ---------------------------------------------------------

    def stage_spectral(self):
        tol = float(self.cfg.get("solver", {}).get("tol", 1e-11))
        starts = int(self.cfg.get("solver", {}).get("starts", 8))
        pairs = {}
        for n in self.box_ns:
            pairs[n] = spectral.principal_pair(
                self.ctx["killed"][n], self.ctx["killed_dual"][n],
                self.ctx["nus"][n], tol=tol, starts=starts, seed=self.seed)
        p = self.ctx["primary"]
        pair = pairs[p]
        nu = self.ctx["nus"][p]
        self.derived["lambda"] = {str(n): pairs[n].lam for n in self.box_ns}
        self.derived["gap"] = pair.gap
        self.derived["overlap"] = pair.overlap

        self.check("eq3.6", "eigen residual sup norm",
                   pair.residual < 1e-10, pair.residual, 1e-10)
        rel = abs(pair.lam - pair.lam_star) / pair.lam
        self.check("eq3.12", "dual eigenvalue equality", rel < 1e-9, rel, 1e-9)
        self.check("lem3.4", "eigenvector positivity on surviving states",
                   pair.u_kept.min() > 0 and pair.u_star_kept.min() > 0)
        self.check("lem3.3bis", "multi-start agreement",
                   pair.agreement < 1e-8, pair.agreement, 1e-8)
        self.check("lem6", "eigenvector overlap at least one",
                   pair.overlap >= 1 - 1e-10, pair.overlap)

        grid = np.linspace(0.0, 30.0 / pair.gap, 121)
        curve = spectral.survival_curve(self.ctx["killed"][p], nu, grid)
        c = np.exp(pair.lam * grid) * curve.values
        self.check("eq0.16", "survival prefactor bounded by one",
                   (c <= 1 + 1e-10).all(), c.max())
        pref = spectral.prefactor_limit(curve, pair)
        relT = abs(pref.c_T * pair.overlap - 1.0)
        self.check("eq0.17", "prefactor limit at T=20/gap",
                   relT < 5e-3, relT, 5e-3)
        relC = abs(pref.cesaro - pref.limit) / pref.limit
        self.check("eq0.17", "Cesaro average of the prefactor",
                   relC < 1e-2, relC, 1e-2)
        spectral.curve_csv(os.path.join(self.out, "survival_exact.csv"),
                           curve, pair.lam)

        uT, _ = spectral.conditional_profile(self.ctx["killed"][p], nu,
                                             30.0 / pair.gap)
        relU = np.abs(uT - pair.u_kept).max() / pair.u_kept.max()
        self.check("eq3.8", "conditioned profile near eigenvector",
                   relU < 1e-4, relU, 1e-4)

        ren = spectral.renewal_iterate(self.ctx["killed"][p], nu, 8,
                                       48.0 / pair.lam)
        dens = ren.density[pair.keep]
        target = pair.u_kept / (nu[pair.keep] @ pair.u_kept)
        relR = np.abs(dens - target).max() / target.max()
        self.check("eq3.9", "renewal iterate k=8 near eigenvector",
                   relR < 2e-2, relR, 2e-2)

        dgen, _ = spectral.doob_transform(pair, self.ctx["killed"][p])
        r = generator.row_sum_residual(dgen)
        self.check("eq7.3", "conditioned generator row sums", r < 1e-12, r, 1e-12)
        r = spectral.doob_stationary_residual(dgen, pair, nu)
        # the stationary defect inherits the eigen-solve residual
        tol_doob = max(1e-12, 10 * pair.residual)
        self.check("eq7.4", "conditioned stationary density", r < tol_doob,
                   r, tol_doob)

        viol = spectral.certify_D(pair.u, self.ctx["tables"][p],
                                  self.ctx["eps"], which="D_n", tol=1e-6)
        self.check("def-Dn", "eigenvector monotone class membership",
                   not viol, spectral.worst_excess(viol), 1e-6)

        if len(self.box_ns) > 1:
            self._sweep_checks(pairs)
        self.ctx.update(pairs=pairs, curve=curve)

    def _sweep_checks(self, pairs):
        lams = [pairs[n].lam for n in self.box_ns]
        tol = 10 * float(self.cfg.get("solver", {}).get("tol", 1e-11))
        mono = all(b <= a + tol for a, b in zip(lams, lams[1:]))
        self.check("lem-approx", "eigenvalue non-increasing across boxes", mono,
                   max(b - a for a, b in zip(lams, lams[1:])))
        spectral.sweep_csv(os.path.join(self.out, "lambda_sweep.csv"),
                           [(n, pairs[n].lam, pairs[n].gap, pairs[n].overlap)
                            for n in self.box_ns])
        # survival ordering, exactly, on the two smallest boxes
        n0, n1 = self.box_ns[0], self.box_ns[1]
        grid = np.linspace(0.0, 10.0 / pairs[n1].gap, 41)
        c0 = spectral.survival_curve(self.ctx["killed"][n0],
                                     self.ctx["nus"][n0], grid)
        c1 = spectral.survival_curve(self.ctx["killed"][n1],
                                     self.ctx["nus"][n1], grid)
        worst = float((c0.values - c1.values).max())
        self.check("eq2.7", "survival ordered under box growth (exact)",
                   worst <= 1e-12, worst, 1e-12)
        # eigenvector restrictions converge on the common box
        sup_dists = []
        for a, b in zip(self.box_ns, self.box_ns[1:]):
            ta, tb = self.ctx["tables"][a], self.ctx["tables"][b]
            small = self.ctx["tables"][self.box_ns[0]]
            nu_s = self.ctx["nus"][self.box_ns[0]]

            def restrict(table, pair_, small=small, nu_s=nu_s):
                cols_ = [table.sites.index(s) for s in small.sites]
                idx = []
                for eta in small.states:
                    full = [0] * len(table.sites)
                    for c, v in zip(cols_, eta):
                        full[c] = v
                    idx.append(table.index[tuple(full)])
                v = pair_.u[np.array(idx)]
                z = nu_s @ v
                return v / z if z > 0 else v
            ua = restrict(ta, pairs[a])
            ub = restrict(tb, pairs[b])
            sup_dists.append(float(np.abs(ua - ub).max()))
        dec = all(b <= a + 1e-12 for a, b in zip(sup_dists, sup_dists[1:]))
        self.check("lem-approx", "eigenvector restriction Cauchy decay",
                   dec, sup_dists[-1])
        self.derived["u_restriction_sup_dists"] = sup_dists

    # -- variational ------------------------------------------------------

    def stage_variational(self):
        vcfg = self.cfg.get("variational", {})
        samples = int(vcfg.get("samples", 100))
        triples = int(vcfg.get("triples", 100))
        grads = int(vcfg.get("gradient_checks", 10))
        p = self.ctx["primary"]
        table = self.ctx["tables"][p]
        nu = self.ctx["nus"][p]
        gen = self.ctx["gens"][p]
        pair = self.ctx["pairs"][p]
        eps = self.ctx["eps"]
        pat = self.ctx["pattern"]
        rng = np.random.default_rng(self.seed + 2)

        phis, mus = [], []
        for _ in range(samples):
            tf = variational.sample_test_function(rng, table, eps, pat, cls="D_n")
            tfs = variational.sample_test_function(rng, table, eps, pat,
                                                   cls="D_n^*")
            phis.append(tf)
            mus.append(variational.sample_test_measure(
                rng, table, pair, nu, eps, pat, phi=tf, phi_star=tfs))
        rep = variational.saddle_check(gen, pair, nu, phis, mus)
        self.check("eq4.19", "Rayleigh identity at the eigenpair, %d measures"
                   % samples, rep.worst_eigen_identity < 1e-10,
                   rep.worst_eigen_identity, 1e-10)
        self.check("lem3.8", "duality identity, %d functions" % samples,
                   rep.worst_duality < 1e-10, rep.worst_duality, 1e-10)
        self.check("lem3.8", "saddle slack at the conditioned stationary law",
                   rep.worst_saddle_slack >= -1e-9, rep.worst_saddle_slack, 1e-9)

        worst = np.inf
        for _ in range(triples):
            i, j = rng.integers(len(phis)), rng.integers(len(phis))
            t = rng.uniform(0.05, 0.95)
            worst = min(worst, variational.convexity_check(
                gen, phis[i], phis[j], t, mus[rng.integers(len(mus))], eps=eps))
        self.check("lem3.7", "convexity slack over %d triples" % triples,
                   worst >= -1e-11, worst, 1e-11)

        kern, rates = self.ctx["kernel"], self.ctx["rates"]
        worst_d, worst_n = 0.0, 0.0
        for k in range(grads):
            g = variational.gradient_form(gen, kern, rates, nu,
                                          phis[k % len(phis)],
                                          mus[k % len(mus)])
            worst_d = max(worst_d, g.diff)
            worst_n = max(worst_n, abs(g.n_term))
        self.check("eq4.7", "gradient form equals direct evaluation",
                   worst_d < 1e-11, worst_d, 1e-11)
        self.check("eq4.9", "linear gradient bucket vanishes",
                   worst_n < 1e-12, worst_n, 1e-12)

        if vcfg.get("regularity", False):
            td = model.tilted_density(eps, rates, self.ctx["gamma"],
                                      table.sites, pat.support, self.ctx["M"])
            err = variational.tilt_identity_error(td, table)
            self.check("rem-recall", "tilt single-particle identity",
                       err < 1e-14, err, 1e-14)
            rows = variational.regularity_bounds(pair.u, td.vector(table),
                                                 table, nu, pat)
            by_tag = {"cyl-moment": "eq5.0", "global-moment": "eq5.1",
                      "cyl-product": "eq5.7", "global-inverse": "eq5.8",
                      "global-inverse-sum": "eq5.8"}
            for key, tag in by_tag.items():
                sel = [r for r in rows if r.check == key]
                worst = min(r.slack for r in sel)
                self.check(tag, "moment bound '%s' for the eigenvector" % key,
                           all(r.ok for r in sel), worst)

    # -- simulate ---------------------------------------------------------

    def stage_simulate(self):
        scfg = self.cfg.get("simulation", {})
        p = self.ctx["primary"]
        table = self.ctx["tables"][p]
        pat = self.ctx["pattern"]
        marg = self.ctx["marginal"]
        sim_seed = int(scfg.get("seed", self.seed + 7))
        cfg = simulate.SimConfig(
            kernel=self.ctx["kernel"], rates=self.ctx["rates"],
            gamma=self.ctx["gamma"], sites=tuple(table.sites),
            M=self.ctx["M"], N=self.ctx["N"], pattern=pat, seed=sim_seed,
            n_traj=int(scfg.get("trajectories", 10000)),
            horizon=float(scfg.get("horizon", 800.0)))

        rng = np.random.default_rng(sim_seed)
        sup_idx = [cfg.sites.index(s) for s in pat.support]
        draws = simulate.sample_initial(cfg, marg, 64)
        eta0 = None
        for cand in draws:   # want a live, nonempty start for the one-step law
            if cand.sum() > 0 and not pat.contains(cand[sup_idx]):
                eta0 = cand
                break
        if eta0 is None:
            eta0 = draws[0]
            eta0[:] = 0
            eta0[sup_idx[0]] = 1
        n_chi = int(scfg.get("chi2_samples", 100000))
        stat, dof, pval = simulate.one_step_chi2(cfg, eta0, n_chi, seed=sim_seed)
        self.check("eq2.1", "one-step move law vs generator row (chi2 p-value)",
                   pval > 0.01, pval, 0.01)

        step = float(scfg.get("grid_step", cfg.horizon / 32))
        grid = np.arange(0.0, cfg.horizon + step / 2, step)
        window = scfg.get("fit_window")
        stats = simulate.survival_mc(cfg, grid, marginal=marg,
                                     fit_window=window)
        simulate.survival_csv(os.path.join(self.out, "survival_mc.csv"), stats)
        self.derived["lambda_mc"] = stats.lam_hat
        self.derived["lambda_mc_ci"] = list(stats.ci)

        if "killed" in self.ctx:
            curve = spectral.survival_curve(self.ctx["killed"][p],
                                            self.ctx["nus"][p], grid)
            sig = np.sqrt(curve.values * (1 - curve.values) / stats.n_traj)
            dev = np.abs(stats.p_hat - curve.values) / np.maximum(sig, 1e-12)
            self.check("eq0.6", "empirical survival within three sigma of "
                       "uniformization", dev.max() < 3.0, dev.max(), 3.0)
        if "pairs" in self.ctx:
            lam = self.ctx["pairs"][p].lam
            covered = stats.ci[0] <= lam <= stats.ci[1]
            self.check("eq3.7", "decay-rate interval covers the spectral value",
                       covered, stats.lam_hat)

        zeta0 = eta0.copy()
        room = np.flatnonzero(zeta0 < cfg.M)
        zeta0[int(room[rng.integers(len(room))])] += 1
        rep = simulate.coupled_order_run(
            cfg, eta0, zeta0, n_pairs=int(scfg.get("coupled_pairs", 1000)),
            n_events=int(scfg.get("coupled_events", 1000)))
        self.check("sec2.2", "coupled order violations", rep.violations == 0,
                   rep.violations, 0)

        kr = simulate.discretized_kill(
            cfg, float(scfg.get("kill_time", cfg.horizon / 2)),
            ks=tuple(scfg.get("kill_meshes", [1, 2, 4, 8])),
            n_traj=2000, marginal=marg)
        self.check("eq-kill1", "checkpoint survival monotone on shared paths",
                   kr.pathwise_violations == 0, kr.pathwise_violations, 0)

        if len(self.box_ns) > 1:
            self._domain_mc(cfg, marg)

    def _domain_mc(self, cfg, marg):
        a, b = self.box_ns[-2], self.box_ns[-1]
        small = self.ctx["tables"][a].sites
        large = self.ctx["tables"][b].sites
        extra = [s for s in large if s not in set(small)]
        sub = simulate.SimConfig(
            kernel=cfg.kernel, rates=cfg.rates, gamma=cfg.gamma,
            sites=tuple(small), M=cfg.M, N=cfg.N, pattern=cfg.pattern,
            seed=cfg.seed)
        gap = self.ctx["pairs"][b].gap if "pairs" in self.ctx else 1.0
        grid = np.linspace(0.0, 10.0 / gap, 21)
        rep = simulate.domain_monotonicity_mc(sub, extra, grid, n_traj=4000,
                                              marginal=marg)
        self.check("eq2.7", "survival ordered under box growth (three sigma)",
                   rep.min_slack_sigma > -3.0, rep.min_slack_sigma, -3.0)

    # -- driver -----------------------------------------------------------

    def execute(self):
        status = 0
        for name in STAGES:
            if name not in self.stages:
                continue
            t0 = time.perf_counter()
            try:
                getattr(self, "stage_" + name)()
            except (CheckFailure, AssertionError) as exc:
                self.failed_stage = name
                self.wall[name] = time.perf_counter() - t0
                print("stage %s: %s" % (name, exc), file=sys.stderr)
                status = 3
                break
            except Exception as exc:          # noqa: BLE001 - reported in manifest
                self.failed_stage = name
                self.wall[name] = time.perf_counter() - t0
                print("stage %s failed: %r" % (name, exc), file=sys.stderr)
                status = 2
                break
            self.wall[name] = time.perf_counter() - t0
        if status == 0 and any(not c["passed"] for c in self.checks):
            status = 3
        self.write_manifest(status)
        return status

    def write_manifest(self, status):
        manifest = {
            "version": __version__,
            "seed": self.seed,
            "config": self.cfg,
            "derived": self.derived,
            "wall_clock": self.wall,
            "failed_stage": self.failed_stage,
            "exit_status": status,
            "checks": self.checks,
        }
        with open(os.path.join(self.out, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, default=str)
        with open(os.path.join(self.out, "report.txt"), "w") as fh:
            for c in self.checks:
                fh.write(self._line(c) + "\n")
            if self.failed_stage:
                fh.write("ABORTED in stage: %s\n" % self.failed_stage)


# ---------------------------------------------------------------------------
# report subcommand

def report_command(paths, out_dir):
    manifests = []
    for p in paths:
        with open(p) as fh:
            manifests.append(json.load(fh))
    base = json.dumps(manifests[0]["config"].get("model"), sort_keys=True)
    for m in manifests[1:]:
        if json.dumps(m["config"].get("model"), sort_keys=True) != base:
            print("refusing to merge manifests with different models",
                  file=sys.stderr)
            return 1
    rows = []
    for m in manifests:
        lams = m.get("derived", {}).get("lambda", {})
        for n, lam in lams.items():
            rows.append((int(n), float(lam)))
    rows.sort()
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "lambda_by_box.csv"), "w") as fh:
        fh.write("n,lambda\n")
        for n, lam in rows:
            fh.write("%d,%.17g\n" % (n, lam))
    status = 0
    if len(rows) > 1:
        mono = all(b[1] <= a[1] + 1e-9 * a[1] for a, b in zip(rows, rows[1:]))
        print("%s  [lem-approx] eigenvalue column non-increasing"
              % ("PASS" if mono else "FAIL"))
        if not mono:
            status = 3
    for n, lam in rows:
        print("n=%d lambda=%.12g" % (n, lam))
    return status


def main(argv=None):
    parser = argparse.ArgumentParser(prog="azrplab")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run")
    runp.add_argument("config")
    runp.add_argument("--stages", default=None,
                      help="comma-separated subset of: " + ",".join(STAGES))
    runp.add_argument("--out", default=None)
    runp.add_argument("-v", "--verbose", action="store_true")
    repp = sub.add_parser("report")
    repp.add_argument("manifests", nargs="+")
    repp.add_argument("--out", default=".")
    args = parser.parse_args(argv)

    if args.command == "report":
        return report_command(args.manifests, args.out)

    try:
        cfg = load_config(args.config)
    except (OSError, yaml.YAMLError, ConfigError) as exc:
        print("invalid configuration: %s" % exc, file=sys.stderr)
        return 1
    stages = list(STAGES)
    if args.stages:
        requested = args.stages.split(",")
        bad = [s for s in requested if s not in STAGES]
        if bad:
            print("invalid configuration: unknown stages %r" % bad,
                  file=sys.stderr)
            return 1
        stages = requested
    out_dir = args.out or cfg.get("output", "out")
    run = Run(cfg, out_dir, stages, verbose=args.verbose)
    return run.execute()


if __name__ == "__main__":
    sys.exit(main())
