"""Station geometry and the exponential innovation covariance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataError, StationSet, _frozen_array

__all__ = [
    "DistanceMatrix",
    "InnovationCovariance",
    "pairwise_distances",
    "exponential_covariance",
    "EARTH_RADIUS_KM",
]

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class DistanceMatrix:
    """Pairwise station distances in km with the metric they came from."""

    values: np.ndarray
    metric: str  # "planar" | "geographic"

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values, ndim=2))

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class InnovationCovariance:
    """Unit-diagonal spatial correlation matrix of the field innovations."""

    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen_array(self.matrix, ndim=2))


def pairwise_distances(stations: StationSet, metric: str | None = None) -> DistanceMatrix:
    """Symmetric zero-diagonal distance matrix in km.

    ``metric`` defaults to the station set's coordinate kind: planar
    Euclidean for (x, y) km coordinates, great-circle (haversine) for
    (lat, lon) degrees.
    """
    if metric is None:
        metric = stations.crs
    coords = stations.coords
    if metric == "planar":
        diff = coords[:, None, :] - coords[None, :, :]
        D = np.sqrt((diff * diff).sum(axis=-1))
    elif metric == "geographic":
        lat, lon = coords[:, 0], coords[:, 1]
        if np.any(np.abs(lat) > 90.0) or np.any(np.abs(lon) > 180.0):
            raise DataError("geographic coordinates out of range (lat within "
                            "[-90, 90], lon within [-180, 180])")
        D = _haversine_km(lat, lon)
    else:
        raise DataError(f"unknown distance metric {metric!r}")
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return DistanceMatrix(values=D, metric=metric)


def _haversine_km(lat_deg: np.ndarray, lon_deg: np.ndarray) -> np.ndarray:
    lat = np.radians(lat_deg)
    lon = np.radians(lon_deg)
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    h = (np.sin(dlat / 2.0) ** 2
         + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2.0) ** 2)
    # clip guards round-off at antipodal / coincident points
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def exponential_covariance(D: DistanceMatrix, theta: float) -> InnovationCovariance:
    """Correlation exp(-d / theta) between sites at distance d.

    Positive definite for distinct sites; unit diagonal by construction.
    """
    if not theta > 0:
        raise DataError(f"theta must be > 0, got {theta}")
    return InnovationCovariance(matrix=_expcov(D.values, theta))


def _expcov(dist_values: np.ndarray, theta: float) -> np.ndarray:
    # internal fast path: no wrapping, used inside optimizer loops
    return np.exp(-dist_values / theta)
