import numpy as np
import pytest

from azrplab import model, statespace, generator, spectral


KERNEL_1D = {(1,): 0.7, (-1,): 0.3}
KERNEL_3D = {(1, 0, 0): 0.7, (0, -1, 0): 0.3}


@pytest.fixture(scope="session")
def line2():
    """Small 1d instance: 5 sites, M=N=3, target eta(0) >= 2; 56 states,
    cheap enough for dense oracles."""
    kern = model.build_kernel(KERNEL_1D, 1)
    rates = model.build_rates("linear", 3)
    gamma = 0.3
    marg = model.build_marginal(rates, gamma, 3)
    pat = model.threshold_pattern([(0,)], 1)
    box = statespace.make_box(1, 2)
    table = statespace.StateTable(box, 3, 3)
    nu = statespace.measure_vector(table, marg)
    eps = model.epsilon_field(kern, pat.support, 1, 2, halo=40)
    gen = generator.assemble_open(table, kern, rates, gamma)
    dual = generator.assemble_dual(table, kern, rates, gamma)
    ind = statespace.pattern_indicator(table, pat)
    killed = generator.kill(gen, ind)
    killed_dual = generator.kill(dual, ind)
    return dict(kernel=kern, rates=rates, gamma=gamma, marginal=marg,
                pattern=pat, table=table, nu=nu, eps=eps, gen=gen, dual=dual,
                indicator=ind, killed=killed, killed_dual=killed_dual)


@pytest.fixture(scope="session")
def line2_pair(line2):
    return spectral.principal_pair(line2["killed"], line2["killed_dual"],
                                   line2["nu"], tol=1e-12, starts=4)


@pytest.fixture(scope="session")
def cube_small():
    """3d instance small enough for unit tests: 27 sites, M=N=2, 406 states."""
    kern = model.build_kernel(KERNEL_3D, 3)
    rates = model.build_rates("linear", 2)
    gamma = 0.3
    marg = model.build_marginal(rates, gamma, 2)
    pat = model.threshold_pattern([(0, 0, 0)], 1)
    box = statespace.make_box(3, 1)
    table = statespace.StateTable(box, 2, 2)
    nu = statespace.measure_vector(table, marg)
    eps = model.epsilon_field(kern, pat.support, 3, 1, halo=2)
    gen = generator.assemble_open(table, kern, rates, gamma)
    dual = generator.assemble_dual(table, kern, rates, gamma)
    ind = statespace.pattern_indicator(table, pat)
    return dict(kernel=kern, rates=rates, gamma=gamma, marginal=marg,
                pattern=pat, table=table, nu=nu, eps=eps, gen=gen, dual=dual,
                indicator=ind)


@pytest.fixture(scope="session")
def desk3d():
    """The 3d reference instance: Lambda_1, g(k)=k, rho=0.3, M=6, N=4,
    target eta(0) >= 3; 31465 states."""
    kern = model.build_kernel(KERNEL_3D, 3)
    rates = model.build_rates("linear", 6)
    gamma = model.gamma_of_rho(rates, 0.3)
    marg = model.build_marginal(rates, gamma, 6)
    pat = model.threshold_pattern([(0, 0, 0)], 2)
    box = statespace.make_box(3, 1)
    table = statespace.StateTable(box, 6, 4)
    nu = statespace.measure_vector(table, marg)
    eps = model.epsilon_field(kern, pat.support, 3, 1, halo=2)
    gen = generator.assemble_open(table, kern, rates, gamma)
    dual = generator.assemble_dual(table, kern, rates, gamma)
    ind = statespace.pattern_indicator(table, pat)
    killed = generator.kill(gen, ind)
    killed_dual = generator.kill(dual, ind)
    return dict(kernel=kern, rates=rates, gamma=gamma, marginal=marg,
                pattern=pat, table=table, nu=nu, eps=eps, gen=gen, dual=dual,
                indicator=ind, killed=killed, killed_dual=killed_dual)


@pytest.fixture(scope="session")
def desk3d_pair(desk3d):
    return spectral.principal_pair(desk3d["killed"], desk3d["killed_dual"],
                                   desk3d["nu"], tol=1e-11, starts=8, seed=0)


def random_monotone(rng, occ, M):
    """Random increasing 0/1 function of the occupancy rows (up-set
    indicator from a random threshold vector)."""
    th = rng.integers(0, M + 1, size=occ.shape[1])
    return (occ >= th).all(axis=1).astype(float)
