"""Great-circle geometry and inverse-distance market access."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from railpanel.errors import RailpanelError

EARTH_RADIUS_KM = 6371.0088

COMMUNITY_HOUSE = "community_house"
FOLK_HIGH_SCHOOL = "folk_high_school"


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise RailpanelError("BAD_COORDS", f"({self.lat}, {self.lon}) out of range")


@dataclass(frozen=True)
class InstitutionSite:
    location: GeoPoint
    opening_year: int
    kind: str = COMMUNITY_HOUSE


def haversine_km(lat1, lon1, lat2, lon2):
    """Vectorized haversine distance in km; broadcasts like numpy."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def great_circle_km(a: GeoPoint, b: GeoPoint) -> float:
    return float(haversine_km(a.lat, a.lon, b.lat, b.lon))


def market_access(i: GeoPoint, sites, year: int, floor_km: float = 1.0) -> float:
    """Sum of inverse distances to sites open in ``year``.

    Each distance is floored at ``floor_km`` so an institution inside the
    parish contributes at most ``1 / floor_km``.
    """
    if not floor_km > 0:
        raise RailpanelError("NONPOSITIVE_FLOOR", f"floor_km must be positive, got {floor_km}")
    active = [s for s in sites if s.opening_year <= year]
    if not active:
        return 0.0
    lat = np.array([s.location.lat for s in active])
    lon = np.array([s.location.lon for s in active])
    d = haversine_km(i.lat, i.lon, lat, lon)
    return float(np.sum(1.0 / np.maximum(d, floor_km)))


def market_access_matrix(lat, lon, site_lat, site_lon, site_year, years, floor_km=1.0):
    """Market access for many points and years at once.

    Returns an array of shape (n_points, n_years). Row/column order follows
    the inputs.
    """
    if not floor_km > 0:
        raise RailpanelError("NONPOSITIVE_FLOOR", f"floor_km must be positive, got {floor_km}")
    lat, lon = np.atleast_1d(lat).astype(float), np.atleast_1d(lon).astype(float)
    site_year = np.asarray(site_year)
    if site_year.size == 0:
        return np.zeros((lat.size, len(years)))
    inv = 1.0 / np.maximum(
        haversine_km(lat[:, None], lon[:, None], np.asarray(site_lat)[None, :],
                     np.asarray(site_lon)[None, :]),
        floor_km,
    )
    active = site_year[None, :] <= np.asarray(years)[:, None]  # (years, sites)
    return inv @ active.T.astype(float)


def min_distance_to_path(p: GeoPoint, path) -> float:
    """Distance from ``p`` to the nearest vertex of ``path`` (km)."""
    if len(path) == 0:
        raise RailpanelError("EMPTY_PATH", "path has no vertices")
    lat = np.array([q.lat for q in path])
    lon = np.array([q.lon for q in path])
    return float(np.min(haversine_km(p.lat, p.lon, lat, lon)))


def to_unit_sphere(lat, lon):
    """Cartesian coordinates on the unit sphere, shape (n, 3)."""
    phi, lmb = np.radians(lat), np.radians(lon)
    return np.column_stack([np.cos(phi) * np.cos(lmb), np.cos(phi) * np.sin(lmb), np.sin(phi)])


def chord_to_km(chord):
    """Great-circle km from a unit-sphere chord length."""
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.clip(np.asarray(chord) / 2, 0.0, 1.0))


def km_to_chord(km):
    return 2 * np.sin(np.minimum(km, np.pi * EARTH_RADIUS_KM) / (2 * EARTH_RADIUS_KM))
