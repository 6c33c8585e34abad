import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfmdose import dosimetry as dm
from pfmdose.errors import ContractError, UndefinedMetricError


# -- brute-force oracles ----------------------------------------------------------

def dvh_oracle(dose, mask, edges):
    vals = [d for d, m in zip(dose.ravel(), mask.ravel()) if m > 0.5]
    return np.array([sum(1 for v in vals if v >= t) / len(vals) for t in edges])


def dx_oracle(dose, mask, x):
    """Largest level t (over all distinct doses) covering at least x% of the structure."""
    vals = [d for d, m in zip(dose.ravel(), mask.ravel()) if m > 0.5]
    best = None
    for t in sorted(set(vals)):
        if 100.0 * sum(1 for v in vals if v >= t) / len(vals) >= x - 1e-9:
            best = t
    return best


def vx_oracle(dose, mask, x):
    vals = [d for d, m in zip(dose.ravel(), mask.ravel()) if m > 0.5]
    return 100.0 * sum(1 for v in vals if v >= x) / len(vals)


def ci_oracle(dose, ptv, thr=0.95):
    piv = {i for i, d in enumerate(dose.ravel()) if d >= thr}
    tv = {i for i, m in enumerate(ptv.ravel()) if m > 0.5}
    if not piv:
        return 0.0
    return len(piv & tv) ** 2 / (len(tv) * len(piv))


def random_case(seed, size=32):
    g = np.random.default_rng(seed)
    dose = np.round(g.uniform(0, 1, (size, size)), int(g.integers(1, 4)))  # rounding forces ties
    ptv = g.uniform(size=(size, size)) < g.uniform(0.05, 0.4)
    ptv[g.integers(size), g.integers(size)] = True
    if g.uniform() < 0.5:
        dose[ptv] = np.clip(dose[ptv] + 0.5, 0, 1)
    oars = (g.uniform(size=(size, size)) < 0.2) & ~ptv
    oars[0, 0] = True
    ptv[0, 0] = False
    return dose, ptv.astype(float), oars.astype(float)


CASES = [random_case(s) for s in range(50)]


# -- DVH --------------------------------------------------------------------------

def test_dvh_uniform_step():
    curve = dm.dvh(np.full((4, 4), 0.7), np.ones((4, 4)))
    assert (curve.volume[curve.edges <= 0.7] == 1.0).all()
    assert (curve.volume[curve.edges > 0.7] == 0.0).all()


def test_dvh_counting_example():
    dose = np.array([0.2, 0.4, 0.6, 0.8, 1.0])
    curve = dm.dvh(dose, np.ones(5), bins=3)  # edges 0, 0.5, 1
    assert curve.volume[1] == pytest.approx(0.6)


@pytest.mark.parametrize("k", range(50))
def test_dvh_matches_counting_oracle(k):
    dose, ptv, oars = CASES[k]
    for mask in (ptv, oars):
        curve = dm.dvh(dose, mask)
        np.testing.assert_array_equal(curve.volume, dvh_oracle(dose, mask, curve.edges))
        assert curve.volume[0] == 1.0
        assert (np.diff(curve.volume) <= 0).all()


def test_dvh_empty_mask():
    with pytest.raises(ContractError):
        dm.dvh(np.ones((3, 3)), np.zeros((3, 3)))


# -- Dx / Vx ----------------------------------------------------------------------

def test_dx_rank_example():
    assert dm.dose_at_volume(np.array([1.0, 2, 3, 4, 5]), np.ones(5), 60) == 3.0


def test_dx_uniform():
    for x in (2, 50, 95, 98, 100):
        assert dm.dose_at_volume(np.full(7, 0.42), np.ones(7), x) == 0.42


def test_vx_examples():
    d = np.array([1.0, 2, 3, 4, 5])
    assert dm.volume_at_dose(d, np.ones(5), 3) == 60.0
    assert dm.volume_at_dose(d, np.ones(5), 0) == 100.0


@pytest.mark.parametrize("k", range(50))
def test_dx_vx_hi_ci_match_oracles(k):
    dose, ptv, oars = CASES[k]
    for x in (2, 50, 95, 98, 37.5, 100):
        assert dm.dose_at_volume(dose, ptv, x) == dx_oracle(dose, ptv, x)
    for x in (0.0, 0.4, 0.5, 0.95, 1.0):
        assert dm.volume_at_dose(dose, oars, x) == vx_oracle(dose, oars, x)
    d2, d98, d50 = dx_oracle(dose, ptv, 2), dx_oracle(dose, ptv, 98), dx_oracle(dose, ptv, 50)
    if d50 > 0:
        assert dm.homogeneity_index(dose, ptv) == (d2 - d98) / d50
    assert dm.conformality_index(dose, ptv) == ci_oracle(dose, ptv)


@pytest.mark.parametrize("k", range(0, 50, 5))
def test_monotone_sweeps(k):
    dose, ptv, oars = CASES[k]
    dx = [dm.dose_at_volume(dose, ptv, x) for x in np.linspace(0.5, 100, 200)]
    assert all(a >= b for a, b in zip(dx, dx[1:]))
    vx = [dm.volume_at_dose(dose, oars, x) for x in np.linspace(0, 1, 201)]
    assert all(a >= b for a, b in zip(vx, vx[1:]))


@pytest.mark.parametrize("k", range(0, 50, 5))
def test_dvh_consistent_with_dx(k):
    dose, ptv, _ = CASES[k]
    values = dose[ptv > 0.5]
    for x in (2, 50, 95, 98):
        assert 100.0 * np.mean(values >= dm.dose_at_volume(dose, ptv, x)) >= x - 1e-9


def test_dx_range():
    with pytest.raises(ContractError):
        dm.dose_at_volume(np.ones(3), np.ones(3), 0)
    with pytest.raises(ContractError):
        dm.dose_at_volume(np.ones(3), np.zeros(3), 50)


# -- HI / CI ----------------------------------------------------------------------

def test_hi_uniform_is_zero():
    assert dm.homogeneity_index(np.full(10, 0.9), np.ones(10)) == 0.0


def test_hi_two_level_example():
    dose = np.array([0.8] * 50 + [1.0] * 50)
    assert dm.homogeneity_index(dose, np.ones(100)) == pytest.approx(0.2, abs=1e-15)


def test_hi_undefined():
    with pytest.raises(UndefinedMetricError):
        dm.homogeneity_index(np.zeros(10), np.ones(10))


def test_ci_perfect_and_half():
    ptv = np.zeros((4, 4))
    ptv[1:3, 1:3] = 1
    assert dm.conformality_index(ptv.copy(), ptv) == 1.0
    dose = ptv.copy()
    dose[0, 0:4] = 1.0  # PIV is PTV plus 4 extra pixels: |PIV| = 2 |TV|
    assert dm.conformality_index(dose, ptv) == 0.5
    assert dm.conformality_index(np.zeros((4, 4)), ptv) == 0.0


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ci_bounds_and_iff(seed):
    g = np.random.default_rng(seed)
    ptv = g.uniform(size=(6, 6)) < 0.4
    ptv[0, 0] = True
    dose = np.where(g.uniform(size=(6, 6)) < 0.5, 1.0, 0.0)
    ci = dm.conformality_index(dose, ptv.astype(float))
    assert 0.0 <= ci <= 1.0
    assert (ci == 1.0) == bool(np.array_equal(dose >= 0.95, ptv))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_permutation_invariant(seed):
    dose, ptv, oars = random_case(seed % 1000, size=8)
    perm = np.random.default_rng(seed).permutation(dose.size)
    p = lambda a: a.ravel()[perm]  # noqa: E731
    assert dm.case_metrics(dose, ptv, oars) == dm.case_metrics(p(dose), p(ptv), p(oars))


# -- case metrics and APE ---------------------------------------------------------

def test_case_metrics_invariants():
    for dose, ptv, oars in CASES:
        m = dm.case_metrics(dose, ptv, oars)
        assert 0.0 <= m.CI <= 1.0
        assert m.D98 <= m.D95
        assert m.V50 <= m.V40


def test_ape_examples():
    assert dm.ape(1.0, 1.0) == (0.0, False)
    err, flag = dm.ape(0.95, 1.0)
    assert err == pytest.approx(0.05) and not flag
    assert dm.ape(0.3, 0.0) == (0.3, True)


def test_cohort_population_std():
    mean, std = dm.cohort_summary([{"HI": 0.02}, {"HI": 0.04}], names=("HI",))["HI"]
    assert mean == pytest.approx(0.03) and std == pytest.approx(0.01)


def test_ape_report_and_csv_cohort_row(tmp_path):
    ids = [f"c{i}" for i in range(4)]
    true = [dm.case_metrics(*CASES[i]) for i in range(4)]
    pred = [dm.case_metrics(np.clip(CASES[i][0] * 0.9, 0, 1), *CASES[i][1:]) for i in range(4)]
    rep = dm.ape_report(ids, pred, true)
    assert all(v >= 0 for row in rep.per_case for v in row.values())
    path = tmp_path / "ape.csv"
    dm.write_metrics_csv(path, ids, rep.per_case)
    header = path.read_text().splitlines()[0].split(",")
    assert header == ["case_id", "HI", "CI", "D98", "D95", "Dmean", "V40", "V50"]
    got_ids, rows, cohort = dm.read_metrics_csv(path)
    assert got_ids == ids
    for name in dm.METRIC_NAMES:
        vals = np.array([r[name] for r in rows])
        assert cohort[name] == dm.format_mean_std(vals.mean(), vals.std())


def test_self_comparison_is_zero():
    true = [dm.case_metrics(*c) for c in CASES[:5]]
    rep = dm.ape_report([str(i) for i in range(5)], true, true)
    assert all(v == 0.0 for row in rep.per_case for v in row.values())


def test_dvh_csv_columns(tmp_path):
    dose, ptv, oars = CASES[0]
    dm.write_dvh_csv(tmp_path / "d.csv", [dm.dvh(dose, ptv, "PTV"), dm.dvh(dose, oars, "OARs")])
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "structure,dose_bin,volume_fraction"
    assert len(lines) == 1 + 2 * 256
