import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from railpanel.errors import RailpanelError
from railpanel.spatial import (GeoPoint, InstitutionSite, great_circle_km, haversine_km,
                               market_access, market_access_matrix, min_distance_to_path)

# frozen from the spherical Vincenty (atan2) formula, R = 6371.0088 km
CPH_HAMBURG_KM = 288.6031045608745
EQUATOR_DEGREE_KM = 111.1950802335329


def test_identity_and_equator_degree():
    p = GeoPoint(55.0, 10.0)
    assert great_circle_km(p, p) == 0.0
    assert great_circle_km(GeoPoint(0, 0), GeoPoint(0, 1)) == pytest.approx(111.195, abs=1e-3)
    assert great_circle_km(GeoPoint(0, 0), GeoPoint(0, 1)) == pytest.approx(EQUATOR_DEGREE_KM, rel=1e-12)


def test_copenhagen_hamburg_against_independent_formula():
    d = great_circle_km(GeoPoint(55.6761, 12.5683), GeoPoint(53.5511, 9.9937))
    assert d == pytest.approx(CPH_HAMBURG_KM, rel=1e-12)


def test_bad_point():
    with pytest.raises(RailpanelError):
        GeoPoint(91, 0)


def _site_at_km(origin, km, year=1800, kind="community_house"):
    # due north along a meridian
    return InstitutionSite(GeoPoint(origin.lat + km / EQUATOR_DEGREE_KM, origin.lon), year, kind)


def test_market_access_examples():
    o = GeoPoint(55.0, 10.0)
    assert market_access(o, [_site_at_km(o, 2.0)], 1900, floor_km=1.0) == pytest.approx(0.5, rel=1e-12)
    assert market_access(o, [_site_at_km(o, 2.0), _site_at_km(o, 4.0)], 1900) == pytest.approx(0.75, rel=1e-12)
    assert market_access(o, [_site_at_km(o, 2.0, year=1890)], 1880) == 0.0
    assert market_access(o, [], 1880) == 0.0
    # a site inside the floor contributes 1/floor
    assert market_access(o, [_site_at_km(o, 0.2)], 1900, floor_km=1.0) == pytest.approx(1.0)
    with pytest.raises(RailpanelError) as exc:
        market_access(o, [], 1880, floor_km=0)
    assert exc.value.code == "NONPOSITIVE_FLOOR"


def test_market_access_matrix_matches_scalar(rng):
    pts = [GeoPoint(rng.uniform(54.6, 57.7), rng.uniform(8.1, 12.6)) for _ in range(7)]
    sites = [InstitutionSite(GeoPoint(rng.uniform(54.6, 57.7), rng.uniform(8.1, 12.6)),
                             int(rng.integers(1850, 1920))) for _ in range(15)]
    years = [1850, 1880, 1901, 1920]
    M = market_access_matrix([p.lat for p in pts], [p.lon for p in pts],
                             [s.location.lat for s in sites], [s.location.lon for s in sites],
                             [s.opening_year for s in sites], years, floor_km=1.5)
    for i, p in enumerate(pts):
        for j, y in enumerate(years):
            assert M[i, j] == pytest.approx(market_access(p, sites, y, 1.5), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_market_access_monotone(seed):
    rng = np.random.default_rng(seed)
    o = GeoPoint(56.0, 10.0)
    sites = [InstitutionSite(GeoPoint(rng.uniform(55, 57), rng.uniform(9, 11)),
                             int(rng.integers(1850, 1920))) for _ in range(8)]
    vals = [market_access(o, sites, y) for y in range(1850, 1921, 5)]
    assert np.all(np.diff(vals) >= 0)
    assert market_access(o, sites[:5], 1920) <= market_access(o, sites, 1920)
    assert market_access(o, sites, 1920, floor_km=50) <= market_access(o, sites, 1920, floor_km=1)


def test_min_distance_to_path():
    a, b = GeoPoint(55.0, 10.0), GeoPoint(55.0, 10.5)
    assert min_distance_to_path(a, [b, a]) == 0.0
    p = GeoPoint(56.0, 11.0)
    assert min_distance_to_path(p, [b]) == great_circle_km(p, b)
    mid = GeoPoint(55.0, 10.25)
    assert min_distance_to_path(mid, [a, b]) == pytest.approx(great_circle_km(mid, a), rel=1e-12)
    with pytest.raises(RailpanelError) as exc:
        min_distance_to_path(p, [])
    assert exc.value.code == "EMPTY_PATH"


@settings(max_examples=200, deadline=None)
@given(st.floats(-90, 90), st.floats(-180, 180), st.floats(-90, 90), st.floats(-180, 180))
def test_symmetric_nonnegative(lat1, lon1, lat2, lon2):
    d1 = haversine_km(lat1, lon1, lat2, lon2)
    d2 = haversine_km(lat2, lon2, lat1, lon1)
    assert d1 >= 0
    assert d1 == pytest.approx(d2, abs=1e-9)
