import os

import numpy as np
import pytest
from numpy.testing import assert_allclose

from azrplab import generator, model, statespace

from conftest import KERNEL_1D


def test_single_site_matrix_closed_form():
    # one site fed by both offsets from outside: birth gamma, death g(k)
    kern = model.build_kernel(KERNEL_1D, 1)
    rates = model.build_rates("linear", 2)
    table = statespace.StateTable(statespace.make_box(1, 0), 2)
    gen = generator.assemble_open(table, kern, rates, 0.3)
    expect = np.array([[-0.3, 0.3, 0.0],
                       [1.0, -1.3, 0.3],
                       [0.0, 2.0, -2.0]])
    assert_allclose(gen.matrix.toarray(), expect, atol=1e-15)


def test_conservative_part_conserves(line2):
    cons = generator.assemble_open(line2["table"], line2["kernel"],
                                   line2["rates"], line2["gamma"],
                                   conservative_only=True)
    coo = cons.matrix.tocoo()
    tot = line2["table"].totals
    off = coo.row != coo.col
    assert (tot[coo.row[off]] == tot[coo.col[off]]).all()
    assert generator.row_sum_residual(cons) < 1e-13


def test_row_sums_and_rates_nonnegative(line2):
    assert generator.row_sum_residual(line2["gen"]) < 1e-12
    coo = line2["gen"].matrix.tocoo()
    off = coo.row != coo.col
    assert coo.data[off].min() >= 0


def test_invariance_exact(line2):
    assert generator.invariance_residual(line2["gen"], line2["nu"]) < 1e-13
    assert generator.invariance_residual(line2["dual"], line2["nu"]) < 1e-13


def test_invariance_warns_when_site_cap_can_bind():
    kern = model.build_kernel(KERNEL_1D, 1)
    rates = model.build_rates("linear", 2)
    table = statespace.StateTable(statespace.make_box(1, 1), 2, 4)
    with pytest.warns(UserWarning):
        generator.assemble_open(table, kern, rates, 0.3)


def test_adjointness_exact(line2):
    r = generator.adjointness_residual(line2["gen"], line2["dual"],
                                       line2["nu"])
    assert r < 1e-14


def test_dual_is_reversed_kernel(line2):
    # the dual generator equals assembly with the reversed kernel
    direct = generator.assemble_open(line2["table"],
                                     line2["kernel"].reverse(),
                                     line2["rates"], line2["gamma"])
    diff = (line2["dual"].matrix - direct.matrix)
    assert abs(diff).max() == 0.0


def test_ibp_identity_random_pairs(line2):
    table, nu = line2["table"], line2["nu"]
    rng = np.random.default_rng(3)
    occ = np.array(table.states)
    # cap-safe: vanish whenever a single creation could leave the table
    safe = (table.totals <= table.N - 2) & (occ < table.M - 1).all(axis=1)
    i = table.sites.index((0,))
    j = table.sites.index((1,))
    for _ in range(50):
        phi = rng.random(len(table))
        f = rng.random(len(table)) * safe
        assert generator.ibp_check(table, nu, line2["rates"], line2["gamma"],
                                   i, j, phi, f) < 1e-14


def test_ibp_rejects_charged_boundary():
    # with a binding per-site cap, a charged f can push a creation off the
    # table; the check must refuse rather than silently drop the term
    rates = model.build_rates("linear", 2)
    marg = model.build_marginal(rates, 0.3, 2)
    box = statespace.LatticeBox(1, 0, ((0,), (1,)))
    table = statespace.StateTable(box, 2, None)
    nu = statespace.measure_vector(table, marg)
    phi = np.ones(len(table))
    f = np.ones(len(table))
    with pytest.raises(ValueError):
        generator.ibp_check(table, nu, rates, 0.3, 0, 1, phi, f)


def test_kill_block(line2):
    killed = line2["killed"]
    ind = np.asarray(line2["indicator"], bool)
    assert killed.dim == (~ind).sum()
    assert killed.loss.min() > -1e-12          # rounding of the diagonal only
    assert killed.loss.max() > 0                  # some state borders the target
    assert generator.row_sum_residual(killed) <= 1e-15
    assert generator.killed_irreducible(killed)


def test_kill_requires_open_kind(line2):
    with pytest.raises(ValueError):
        generator.kill(line2["killed"], np.zeros(line2["killed"].dim, bool))


def test_sub_sites_restriction(line2):
    sub = [(-1,), (0,), (1,)]
    gsub = generator.assemble_open(line2["table"], line2["kernel"],
                                   line2["rates"], line2["gamma"],
                                   sub_sites=sub)
    # moves touch only the sub-box: occupancies off it never change
    coo = gsub.matrix.tocoo()
    occ = np.array(line2["table"].states)
    outside = [k for k, s in enumerate(line2["table"].sites) if s not in sub]
    off = coo.row != coo.col
    assert (occ[coo.row[off]][:, outside] == occ[coo.col[off]][:, outside]).all()
    assert generator.row_sum_residual(gsub) < 1e-12


def test_matrix_free_matches_assembled(line2):
    mf = generator.MatrixFreeOpen(line2["table"], line2["kernel"],
                                  line2["rates"], line2["gamma"])
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.standard_normal(len(line2["table"]))
        assert_allclose(mf.matvec(x), line2["gen"].matvec(x),
                        rtol=1e-12, atol=1e-12)


def test_export_coordinate_roundtrip(tmp_path, line2):
    path = os.path.join(tmp_path, "gen.txt")
    generator.export_coordinate(line2["gen"], path)
    with open(path) as fh:
        header = fh.readline()
        assert "dim %d" % len(line2["table"]) in header
        rows, cols, vals = [], [], []
        for line in fh:
            r, c, v = line.split()
            rows.append(int(r))
            cols.append(int(c))
            vals.append(float(v))
    import scipy.sparse as sp
    back = sp.csr_matrix((vals, (rows, cols)),
                         shape=line2["gen"].matrix.shape)
    assert abs(back - line2["gen"].matrix).max() < 1e-16
