"""Dataset and parameter containers shared by every other module.

All containers are frozen dataclasses holding read-only numpy arrays, so
they are safe to share across threads and worker processes.  Missing
observations are carried as an explicit boolean mask; masked cells of
``y`` are stored as 0.0 and never enter any arithmetic path.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "DataError",
    "NumericalError",
    "StationSet",
    "Dataset",
    "ModelParams",
    "CalibrationMatrix",
    "StandardizationRecord",
    "validate_dataset",
    "standardize",
    "filter_stations_by_missing",
]

STANDARDIZED_TOL = 1e-8


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(RuntimeError):
    """A linear-algebra step failed beyond recovery (non-PD matrix etc.)."""


def _frozen_array(a, dtype=float, ndim=None) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    if ndim is not None and out.ndim != ndim:
        raise DataError(f"expected {ndim}-d array, got shape {out.shape}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class StationSet:
    """Monitoring stations: ids, 2-d coordinates, optional group labels.

    ``coords`` holds one row per station, either planar (x, y) in km or
    geographic (lat, lon) in degrees according to ``crs``.  ``groups``
    carries an aggregation label per station (e.g. the city) used by the
    detection stage; ``None`` means each station forms its own group.
    """

    ids: tuple[str, ...]
    coords: np.ndarray
    crs: str = "planar"
    groups: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))
        coords = _frozen_array(self.coords)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise DataError(f"coords must be (n, 2), got {coords.shape}")
        if coords.shape[0] != len(self.ids):
            raise DataError(
                f"{len(self.ids)} ids but {coords.shape[0]} coordinate rows"
            )
        object.__setattr__(self, "coords", coords)
        if self.crs not in ("planar", "geographic"):
            raise DataError(f"unknown crs {self.crs!r}")
        if self.groups is not None:
            groups = tuple(str(g) for g in self.groups)
            if len(groups) != len(self.ids):
                raise DataError("groups length does not match station count")
            object.__setattr__(self, "groups", groups)

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, keep: np.ndarray) -> "StationSet":
        """Return the stations selected by the index array ``keep``."""
        keep = np.asarray(keep)
        groups = None
        if self.groups is not None:
            groups = tuple(self.groups[i] for i in keep)
        return StationSet(
            ids=tuple(self.ids[i] for i in keep),
            coords=self.coords[keep],
            crs=self.crs,
            groups=groups,
        )


@dataclass(frozen=True)
class Dataset:
    """Observations on a station network over T regular time steps.

    y        : (n, T) responses; masked cells are stored as 0.0
    observed : (n, T) boolean mask, True where y was measured
    X        : tuple of T design matrices, each (n, k); k may be 0
    """

    stations: StationSet
    y: np.ndarray
    observed: np.ndarray
    X: tuple[np.ndarray, ...]
    standardized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "y", _frozen_array(self.y, ndim=2))
        object.__setattr__(self, "observed", _frozen_array(self.observed, dtype=bool, ndim=2))
        object.__setattr__(self, "X", tuple(_frozen_array(x) for x in self.X))

    @classmethod
    def from_arrays(cls, stations, y, observed=None, X=None, standardized=False) -> "Dataset":
        """Build a dataset, deriving the mask from NaNs when not given.

        Masked cells of ``y`` are zero-filled so no NaN survives into
        arithmetic paths.
        """
        y = np.array(y, dtype=float)
        if observed is None:
            observed = np.isfinite(y)
        observed = np.asarray(observed, dtype=bool)
        y = np.where(observed, y, 0.0)
        n, T = y.shape
        if X is None:
            X = tuple(np.zeros((n, 0)) for _ in range(T))
        elif isinstance(X, np.ndarray) and X.ndim == 3:
            X = tuple(X[t] for t in range(X.shape[0]))
        else:
            X = tuple(np.asarray(x, dtype=float) for x in X)
        return cls(stations=stations, y=y, observed=observed, X=X,
                   standardized=standardized)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def k(self) -> int:
        return self.X[0].shape[1] if self.X else 0

    @property
    def missing_rate(self) -> np.ndarray:
        """Per-station fraction of missing cells."""
        return 1.0 - self.observed.mean(axis=1)

    @cached_property
    def obs_indices(self) -> tuple[np.ndarray, ...]:
        """Per time step, the indices of the observed stations."""
        return tuple(np.flatnonzero(self.observed[:, t]) for t in range(self.T))

    @cached_property
    def X_stacked(self) -> np.ndarray:
        """The design matrices as one (T, n, k) array."""
        return np.stack(self.X) if self.k else np.zeros((self.T, self.n, 0))


@dataclass(frozen=True)
class ModelParams:
    """Full parameter set of the calibration state-space model.

    beta   : (k,) fixed-effect coefficients
    alpha  : (n,) per-station calibration coefficients
    sigma2 : measurement-error variance, > 0
    g      : AR(1) coefficient of the latent field
    theta  : spatial range of the innovation correlation, > 0 (km)
    mu0    : (n,) initial-state mean
    Sigma0 : (n, n) initial-state covariance, symmetric PSD

    |g| < 1 is required only when constructing the stationary initial
    prior; the filter itself accepts any finite g.
    """

    beta: np.ndarray
    alpha: np.ndarray
    sigma2: float
    g: float
    theta: float
    mu0: np.ndarray
    Sigma0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen_array(self.beta, ndim=1))
        object.__setattr__(self, "alpha", _frozen_array(self.alpha, ndim=1))
        object.__setattr__(self, "mu0", _frozen_array(self.mu0, ndim=1))
        object.__setattr__(self, "Sigma0", _frozen_array(self.Sigma0, ndim=2))
        if not np.isfinite(self.alpha).all():
            raise DataError("alpha contains non-finite entries")
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise DataError(f"sigma2 must be > 0, got {self.sigma2}")
        if not (np.isfinite(self.theta) and self.theta > 0):
            raise DataError(f"theta must be > 0, got {self.theta}")
        if not np.isfinite(self.g):
            raise DataError("g must be finite")

    @property
    def n(self) -> int:
        return self.alpha.shape[0]

    @property
    def k(self) -> int:
        return self.beta.shape[0]

    def as_vector(self) -> np.ndarray:
        """Flatten to (beta, alpha, sigma2, g, theta) for distance checks."""
        return np.concatenate(
            [self.beta, self.alpha, [self.sigma2, self.g, self.theta]]
        )


@dataclass(frozen=True)
class CalibrationMatrix:
    """Diagonal matrix mapping the latent field to station readings."""

    alpha: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", _frozen_array(self.alpha, ndim=1))

    @classmethod
    def from_params(cls, p: ModelParams) -> "CalibrationMatrix":
        return cls(alpha=p.alpha)

    @property
    def A(self) -> np.ndarray:
        return np.diag(self.alpha)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """A @ v without materializing the dense matrix."""
        return self.alpha * v


@dataclass(frozen=True)
class StandardizationRecord:
    """Per-station y statistics and per-column X statistics.

    Stores the sample mean and sd (ddof=1 over observed cells) used by
    :func:`standardize`, allowing exact inversion.
    """

    y_mean: np.ndarray
    y_sd: np.ndarray
    x_mean: np.ndarray
    x_sd: np.ndarray

    def unstandardize(self, d: Dataset) -> Dataset:
        """Invert :func:`standardize` on the observed cells."""
        y = d.y * self.y_sd[:, None] + self.y_mean[:, None]
        y = np.where(d.observed, y, 0.0)
        X = tuple(x * self.x_sd + self.x_mean for x in d.X)
        return Dataset(stations=d.stations, y=y, observed=d.observed, X=X,
                       standardized=False)


def validate_dataset(d: Dataset) -> list[str]:
    """Check every dataset invariant, returning one message per violation.

    Diagnostic only: an empty list means the dataset is well formed.
    """
    out: list[str] = []
    n, T = d.y.shape

    if len(d.stations) < 1:
        out.append("station set is empty")
    seen: dict[str, int] = {}
    for sid in d.stations.ids:
        seen[sid] = seen.get(sid, 0) + 1
    for sid, c in seen.items():
        if c > 1:
            out.append(f"duplicate station id {sid!r} ({c} occurrences)")
    bad_coord = ~np.isfinite(d.stations.coords).all(axis=1)
    for i in np.flatnonzero(bad_coord):
        out.append(f"non-finite coordinates for station {d.stations.ids[i]!r}")

    if len(d.stations) != n:
        out.append(f"y has {n} rows but station set has {len(d.stations)}")
    if d.observed.shape != d.y.shape:
        out.append(f"observed mask shape {d.observed.shape} != y shape {d.y.shape}")
    if T < 1:
        out.append("dataset has no time steps")

    if len(d.X) != T:
        out.append(f"X has {len(d.X)} matrices, expected T={T}")
    else:
        k = d.X[0].shape[1] if d.X[0].ndim == 2 else -1
        for t, x in enumerate(d.X):
            if x.ndim != 2 or x.shape[0] != n or x.shape[1] != k:
                out.append(
                    f"dimension violation at t={t}: X[{t}] has shape "
                    f"{x.shape}, expected ({n}, {k})"
                )
            elif not np.isfinite(x).all():
                bad = np.argwhere(~np.isfinite(x))[0]
                out.append(
                    f"non-finite covariate at t={t}, station "
                    f"{d.stations.ids[bad[0]]!r}, column {bad[1]}"
                )

    if not np.isfinite(d.y).all():
        for s, t in np.argwhere(~np.isfinite(d.y)):
            out.append(
                f"non-finite y at station {d.stations.ids[s]!r}, t={t}"
                + ("" if d.observed[s, t] else " (masked cells must be finite)")
            )

    if d.standardized:
        out.extend(_check_standardized(d))
    return out


def _check_standardized(d: Dataset) -> list[str]:
    out = []
    for s in range(d.n):
        ys = d.y[s][d.observed[s]]
        if ys.size < 2:
            continue
        if abs(ys.mean()) > STANDARDIZED_TOL or abs(ys.std(ddof=1) - 1.0) > STANDARDIZED_TOL:
            out.append(f"station {d.stations.ids[s]!r} y is not standardized")
    if d.k:
        Xa = d.X_stacked  # (T, n, k)
        mask = d.observed.T  # (T, n)
        for j in range(d.k):
            col = Xa[:, :, j][mask]
            if col.size < 2 or col.std(ddof=1) == 0.0:
                continue  # constant columns are exempt
            if abs(col.mean()) > STANDARDIZED_TOL or abs(col.std(ddof=1) - 1.0) > STANDARDIZED_TOL:
                out.append(f"X column {j} is not standardized")
    return out


def standardize(d: Dataset) -> tuple[Dataset, StandardizationRecord]:
    """Center and scale each station's y and each X column to unit variance.

    Statistics are the sample mean and sd (ddof=1) over the observed
    cells; masked cells are left untouched.  Raises :class:`DataError`
    for any zero-variance column or station series.
    """
    n, T = d.y.shape
    y_mean = np.zeros(n)
    y_sd = np.ones(n)
    y = d.y.copy()
    for s in range(n):
        ys = d.y[s][d.observed[s]]
        if ys.size < 2:
            raise DataError(
                f"station {d.stations.ids[s]!r} has {ys.size} observed cells; "
                "cannot standardize"
            )
        m, sd = ys.mean(), ys.std(ddof=1)
        if sd <= 0.0:
            raise DataError(f"zero-variance y series at station {d.stations.ids[s]!r}")
        y_mean[s], y_sd[s] = m, sd
        y[s] = np.where(d.observed[s], (d.y[s] - m) / sd, 0.0)

    k = d.k
    x_mean = np.zeros(k)
    x_sd = np.ones(k)
    if k:
        Xa = d.X_stacked.copy()
        mask = d.observed.T  # (T, n)
        for j in range(k):
            col = Xa[:, :, j][mask]
            sd = col.std(ddof=1) if col.size > 1 else 0.0
            if sd <= 0.0:
                raise DataError(f"zero-variance X column {j}")
            x_mean[j], x_sd[j] = col.mean(), sd
        Xa = (Xa - x_mean) / x_sd
        X = tuple(Xa[t] for t in range(T))
    else:
        X = d.X

    out = Dataset(stations=d.stations, y=y, observed=d.observed, X=X,
                  standardized=True)
    return out, StandardizationRecord(y_mean=y_mean, y_sd=y_sd,
                                      x_mean=x_mean, x_sd=x_sd)


def filter_stations_by_missing(d: Dataset, threshold: float) -> Dataset:
    """Drop stations whose missing rate exceeds ``threshold``.

    Raises :class:`DataError` if nothing survives.
    """
    if not 0.0 <= threshold <= 1.0:
        raise DataError(f"threshold must be in [0, 1], got {threshold}")
    keep = np.flatnonzero(d.missing_rate <= threshold)
    if keep.size == 0:
        raise DataError(
            f"all {d.n} stations exceed missing-rate threshold {threshold}"
        )
    if keep.size == d.n:
        return d
    return Dataset(
        stations=d.stations.subset(keep),
        y=d.y[keep],
        observed=d.observed[keep],
        X=tuple(x[keep] for x in d.X),
        standardized=d.standardized,
    )
