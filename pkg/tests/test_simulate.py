import logging

import numpy as np
import pytest

from psychoforge import scales, simulate
from psychoforge.simulate import SimulationError


def demo(**kw):
    return simulate.load_params(scales.data_path("sim_params_demo.json"), **kw)


def test_error_variance_formula():
    # two items of the facet then correlate var_f / (var_f + var_e) = rho
    var_f, rho = 0.64, 0.4
    ve = simulate.error_variance(0.8, rho)
    assert var_f / (var_f + ve) == pytest.approx(rho)
    with pytest.raises(SimulationError):
        simulate.error_variance(0.8, 0.0)


def test_covariance_is_sd_outer_corr():
    p = demo()
    cov, L = simulate.build_covariance(p)
    assert np.allclose(cov, np.outer(p.sds, p.sds) * p.corr_matrix)
    assert np.allclose(L @ L.T, cov)


def test_cross_domain_correlation_rejected():
    p = demo()
    R = [list(r) for r in p.facet_corr]
    i, j = 0, p.domains.index(next(d for d in p.domains if d != p.domains[0]))
    R[i][j] = R[j][i] = 0.1
    with pytest.raises(SimulationError, match="cross-domain"):
        simulate.SimulationParams(p.facets, p.domains, p.facet_means, p.facet_sds, R, p.intra_facet_item_corr, 10, 0)


def _with_block(p, block_value):
    R = np.array(p.corr_matrix)
    dom = np.array(p.domains)
    idx = np.flatnonzero(dom == dom[0])
    for a in idx:
        for b in idx:
            if a != b:
                R[a, b] = block_value
    return simulate.SimulationParams(p.facets, p.domains, p.facet_means, p.facet_sds, R.tolist(), p.intra_facet_item_corr, 50, 1)


def test_near_singular_block_is_ridged(caplog):
    p = _with_block(demo(), 1.0)
    with caplog.at_level(logging.WARNING):
        _, L = simulate.build_covariance(p)
    assert "ridge" in caplog.text
    assert np.all(np.isfinite(L))


def test_indefinite_block_raises():
    with pytest.raises(SimulationError, match="not positive definite"):
        simulate.build_covariance(_with_block(demo(), -0.9))


def test_zero_sd_facet():
    p = demo()
    sds = list(p.facet_sds)
    sds[0] = 0.0
    q = simulate.SimulationParams(p.facets, p.domains, p.facet_means, sds, p.facet_corr, p.intra_facet_item_corr, 30, 2)
    lat = simulate.sample_facets(q)
    assert np.all(lat[:, 0] == q.facet_means[0])


def test_discretize_rounds_half_up_and_clamps(bfi2):
    cont = np.full((1, 60), 2.5)
    cont[0, 0] = 7.0
    cont[0, 1] = -3.0
    out = simulate.discretize(cont, bfi2)
    pos = [k for k, it in enumerate(bfi2.items) if not it.reversed and k > 1]
    rev = [k for k, it in enumerate(bfi2.items) if it.reversed]
    assert out[0, 0] == 5 and out[0, 1] == 1
    assert set(out[0, pos]) == {3}
    assert set(out[0, rev]) == {4}  # 6 - 2.5 = 3.5 rounds up


def test_deterministic_and_in_range(bfi2):
    a = simulate.simulate_bfi2(demo(n_agents=50, seed=3), bfi2)
    b = simulate.simulate_bfi2(demo(n_agents=50, seed=3), bfi2)
    assert [r.answers for r in a.responses] == [r.answers for r in b.responses]
    vals = np.array([r.as_list(bfi2) for r in a.responses])
    assert vals.min() >= 1 and vals.max() <= 5


def test_reversed_items_anticorrelate(bfi2):
    ds = simulate.simulate_bfi2(demo(n_agents=3000, seed=5), bfi2)
    X = np.array([r.as_list(bfi2) for r in ds.responses], dtype=float)
    # same facet, opposite keying
    f = bfi2.items[0].facet
    pos = next(k for k, it in enumerate(bfi2.items) if it.facet == f and not it.reversed)
    neg = next(k for k, it in enumerate(bfi2.items) if it.facet == f and it.reversed)
    assert np.corrcoef(X[:, pos], X[:, neg])[0, 1] < -0.2


def test_wrong_scale_rejected(mm):
    with pytest.raises(scales.ScaleError):
        simulate.simulate_bfi2(demo(n_agents=5), mm)


@pytest.mark.parametrize("seed", range(8))
def test_recovery_within_standard_errors(bfi2, seed):
    # tolerances scale with the sampling error, so every seed must pass
    n = 2000
    p = demo(n_agents=n, seed=100 + seed)
    ds = simulate.simulate_bfi2(p, bfi2)
    lat = ds.latent_facets
    se_mean = p.sds / np.sqrt(n)
    assert np.all(np.abs(lat.mean(0) - p.means) < 4.5 * se_mean)
    assert np.all(np.abs(lat.std(0, ddof=1) - p.sds) < 4.5 * p.sds / np.sqrt(2 * n))
    r = np.corrcoef(lat, rowvar=False)
    se_r = (1 - p.corr_matrix**2) / np.sqrt(n)
    off = ~np.eye(len(p.facets), dtype=bool)
    assert np.all(np.abs(r - p.corr_matrix)[off] < 5 * se_r[off])
