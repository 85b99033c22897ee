import numpy as np
import pytest

from cislunar_nmpc import dynamics as dyn
from cislunar_nmpc import families as fam
from cislunar_nmpc.families import Branch, FamilyTag, Kind, Point

P = dyn.SystemParams()
LO_L1 = FamilyTag(Kind.LYAPUNOV, Point.L1)


def mirror(s):
    return s * np.array([1, -1, 1, -1, 1, -1])


def test_tag_parse_and_roundtrip():
    tag = FamilyTag.parse("nrho-l2-s")
    assert (tag.kind, tag.point, tag.branch) == (Kind.NRHO, Point.L2, Branch.SOUTH)
    assert FamilyTag.parse("HO-L1").branch is Branch.NORTH
    assert FamilyTag.from_dict(tag.to_dict()) == tag
    assert str(LO_L1) == "LO-L1"
    with pytest.raises(ValueError):
        FamilyTag(Kind.LYAPUNOV, Point.L1, Branch.NORTH)
    with pytest.raises(ValueError):
        FamilyTag.parse("XO-L1")


def test_initial_guess_linear_structure():
    lp, lam, k = fam._linear_modes(Point.L1, P)
    g = fam.initial_guess(LO_L1, 0.01, P)
    assert np.allclose(g[:3], [lp.x + 0.01, 0, 0])
    assert g[4] == pytest.approx(-k * lam * 0.01)
    assert np.allclose(fam.initial_guess(LO_L1, 0.0, P), np.r_[lp.position, 0, 0, 0])
    with pytest.raises(fam.AmplitudeError):
        fam.initial_guess(LO_L1, 0.2, P)


def test_lyapunov_correction_converges_fast():
    orbit = fam.differential_correction(fam.initial_guess(LO_L1, 0.01, P), LO_L1, P,
                                        max_iter=10)
    assert orbit.closure(P) < 1e-10
    _, states = fam.sample_orbit(orbit, 200, P)
    c = np.array([dyn.jacobi_constant(s, P) for s in states])
    assert np.ptp(c) < 1e-9


def test_correction_fixed_point():
    orbit = fam.differential_correction(fam.initial_guess(LO_L1, 0.01, P), LO_L1, P)
    again = fam.differential_correction(orbit.x0, LO_L1, P, max_iter=0)
    assert np.max(np.abs(again.x0 - orbit.x0)) < 1e-10
    assert again.period == pytest.approx(orbit.period, abs=1e-10)


def test_pac_count_one_returns_seed():
    seed = fam.lyapunov_seed(Point.L1, P)
    cat = fam.pac_continue(seed, count=1, params=P)
    assert len(cat) == 1 and np.array_equal(cat[0].x0, seed.x0)


def test_pac_members_distinct_and_recorrect():
    seed = fam.lyapunov_seed(Point.L1, P)
    cat = fam.pac_continue(seed, step=5e-3, count=12, params=P)
    d = np.diff(cat.chis)
    assert len(cat) == 12 and np.all(d > 0) and d.max() < 10 * d.min()
    for m in cat.members[::4]:
        again = fam.differential_correction(m.x0, m.tag, P)
        assert again.closure(P) < 1e-10
        assert np.max(np.abs(again.x0 - m.x0)) < 1e-8


def test_sample_orbit_contract(lo_catalog):
    orbit = lo_catalog[10]
    t, s = fam.sample_orbit(orbit, 2, P)
    assert t[0] == 0 and t[1] == pytest.approx(orbit.period / 2)
    assert np.array_equal(s[0], orbit.x0)
    _, s = fam.sample_orbit(orbit, 100, P)
    c = np.array([dyn.jacobi_constant(x, P) for x in s])
    assert np.ptp(c) < 1e-9
    assert np.all(s[:, [2, 5]] == 0)
    with pytest.raises(ValueError):
        fam.sample_orbit(orbit, 1, P)


def test_uniform_angle_sampling_closes_perilune_gaps(families):
    orbit = families.catalog("NRHO-L1-N")[100]
    _, s = fam.sample_orbit(orbit, 100, P)
    gap = np.max(np.diff(np.unwrap(fam.location_angle(s, orbit.tag, P))))
    t, s = fam.sample_orbit_uniform_nu(orbit, 100, P)
    assert np.array_equal(s[0], orbit.x0) and np.all(np.diff(t) > 0)
    step = np.diff(np.unwrap(np.r_[fam.location_angle(s, orbit.tag, P), 0.0][:-1]))
    assert np.max(np.abs(step - 2 * np.pi / 100)) < 1e-3 < gap - 2 * np.pi / 100
    # every sample is the orbit itself at its own time
    i = 37
    m = int(np.ceil(t[i] / orbit.step))
    assert np.max(np.abs(dyn.propagate(orbit.x0, t[i], m, P) - s[i])) < 1e-9


def test_lyapunov_chi_is_crossing_distance(lo_catalog):
    lp = dyn.libration_point("L1", P)
    for orbit in lo_catalog.members[::50]:
        assert orbit.chi == pytest.approx(abs(orbit.x0[0] - lp.x), abs=1e-12)
        assert fam.location_angle(orbit.x0[None], orbit.tag, P)[0] == pytest.approx(0.0)


def test_catalog_roundtrip_keeps_closure(lo_catalog, tmp_path):
    path = tmp_path / "c.json"
    lo_catalog.save(path)
    back = fam.FamilyCatalog.load(path)
    assert back.tag == lo_catalog.tag and len(back) == len(lo_catalog)
    for m in back.members[::40]:
        assert m.closure(P) < 1e-10


def test_halo_mirror_symmetry(ho_catalog):
    orbit = ho_catalog[len(ho_catalog) // 2]
    _, s = fam.sample_orbit(orbit, 40, P)
    for i in range(1, 40):
        assert np.max(np.abs(s[40 - i] - mirror(s[i]))) < 1e-8


def test_halo_chi_is_top_distance(ho_catalog):
    orbit = ho_catalog[30]
    _, s = fam.sample_orbit(orbit, 4000, P)
    lp = dyn.libration_point("L1", P)
    top = s[np.argmax(s[:, 2])]
    assert orbit.chi == pytest.approx(np.linalg.norm(top[:3] - lp.position), abs=1e-6)


def test_nrho_split_by_perilune(families):
    for point in ("L1", "L2"):
        ho = families.catalog(f"HO-{point}-N")
        nrho = families.catalog(f"NRHO-{point}-N")
        assert fam.perilune(ho[-1], P) >= fam.NRHO_PERILUNE
        assert fam.perilune(nrho[0], P) < fam.NRHO_PERILUNE


def test_monotone_chi_and_shared_tag(families):
    for tag in fam.ALL_TAGS:
        cat = families.catalog(tag)
        cat.check_invariants()
        d = np.diff(cat.chis)
        assert np.all(d > 0) or np.all(d < 0)


def test_winding_and_roundness_helpers(ho_catalog):
    _, s = fam.sample_orbit(ho_catalog[0], 200, P)
    assert fam.winds_once(s, ho_catalog.tag, P)
    assert fam.projection_roundness(s, ho_catalog.tag, P) >= fam.HALO_MIN_ROUNDNESS
    with pytest.raises(ValueError):
        lp = dyn.libration_point("L1", P)
        fam.location_angle(np.r_[lp.position, 0, 0, 0][None], ho_catalog.tag, P)
