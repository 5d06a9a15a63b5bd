"""Turn fitted calibration coefficients into bias-detection outputs.

Works on a station-by-period panel of alpha estimates with standard
errors: group rankings per period, Ward hierarchical clustering of the
station alpha profiles, confidence-band comparison of site pairs, and
the fine/coarse particulate ratio diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .core import DataError, _frozen_array

__all__ = [
    "AlphaPanel",
    "RankTable",
    "ClusterResult",
    "SiteComparison",
    "RatioDiagnostic",
    "DetectionReport",
    "rank_groups",
    "hierarchical_cluster",
    "compare_sites",
    "ratio_diagnostic",
    "build_detection_report",
]


@dataclass(frozen=True)
class AlphaPanel:
    """Station x period matrix of alpha estimates.

    A cell is usable when ``present`` is True; the corresponding ``se``
    must then be positive.  ``groups`` defaults to one group per
    station.
    """

    station_ids: tuple[str, ...]
    periods: tuple[str, ...]
    alpha: np.ndarray
    se: np.ndarray
    present: np.ndarray
    groups: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "station_ids", tuple(self.station_ids))
        object.__setattr__(self, "periods", tuple(self.periods))
        object.__setattr__(self, "alpha", _frozen_array(self.alpha, ndim=2))
        object.__setattr__(self, "se", _frozen_array(self.se, ndim=2))
        object.__setattr__(self, "present", _frozen_array(self.present,
                                                          dtype=bool, ndim=2))
        shape = (len(self.station_ids), len(self.periods))
        for name in ("alpha", "se", "present"):
            if getattr(self, name).shape != shape:
                raise DataError(f"{name} shape {getattr(self, name).shape} "
                                f"!= (stations, periods) {shape}")
        if self.groups is not None:
            groups = tuple(str(g) for g in self.groups)
            if len(groups) != len(self.station_ids):
                raise DataError("groups length does not match station count")
            object.__setattr__(self, "groups", groups)
        bad = self.present & ~(self.se > 0)
        if bad.any():
            s, t = np.argwhere(bad)[0]
            raise DataError(f"non-positive se for station "
                            f"{self.station_ids[s]!r}, period {self.periods[t]!r}")

    @property
    def effective_groups(self) -> tuple[str, ...]:
        return self.groups if self.groups is not None else self.station_ids

    def station_index(self, sid: str) -> int:
        try:
            return self.station_ids.index(sid)
        except ValueError:
            raise DataError(f"unknown station {sid!r}") from None


@dataclass(frozen=True)
class RankTable:
    """Per-period group means and ascending ranks (1 = lowest mean)."""

    group_names: tuple[str, ...]
    periods: tuple[str, ...]
    means: np.ndarray      # (G, P), NaN where the group was skipped
    ranks: np.ndarray      # (G, P) int, 0 where skipped
    ties: tuple[tuple[str, tuple[str, ...]], ...]   # (period, tied groups)
    skipped: tuple[tuple[str, str], ...]            # (group, period)


def rank_groups(panel: AlphaPanel) -> RankTable:
    """Average alpha over each group's stations per period and rank.

    Groups with no usable station in a period are skipped for that
    period (recorded); exact ties share the mean and are broken by
    group label order, with the tie recorded.
    """
    groups = panel.effective_groups
    names = tuple(sorted(set(groups)))
    gidx = {g: [i for i, gg in enumerate(groups) if gg == g] for g in names}
    G, P = len(names), len(panel.periods)

    means = np.full((G, P), np.nan)
    ranks = np.zeros((G, P), dtype=int)
    ties: list[tuple[str, tuple[str, ...]]] = []
    skipped: list[tuple[str, str]] = []

    for t, period in enumerate(panel.periods):
        for gi, g in enumerate(names):
            rows = [i for i in gidx[g] if panel.present[i, t]]
            if rows:
                means[gi, t] = panel.alpha[rows, t].mean()
            else:
                skipped.append((g, period))
        avail = np.flatnonzero(~np.isnan(means[:, t]))
        # stable sort on (mean, label order) gives deterministic tie breaks
        order = avail[np.argsort(means[avail, t], kind="stable")]
        for r, gi in enumerate(order, start=1):
            ranks[gi, t] = r
        vals, counts = np.unique(means[avail, t], return_counts=True)
        for v in vals[counts > 1]:
            tied = tuple(names[gi] for gi in avail if means[gi, t] == v)
            ties.append((period, tied))

    return RankTable(group_names=names, periods=panel.periods,
                     means=_frozen_array(means),
                     ranks=_frozen_array(ranks, dtype=int),
                     ties=tuple(ties), skipped=tuple(skipped))


@dataclass(frozen=True)
class ClusterResult:
    """Ward clustering of station alpha profiles.

    ``labels`` are 1..k ordered by ascending cluster mean alpha, so
    cluster 1 is always the low-alpha cluster.  ``merges`` is the
    agglomerative merge list (scipy linkage layout: left, right, height,
    size), with nondecreasing heights.  Only periods observed for every
    station enter the distance computation; they are listed in
    ``used_periods``.
    """

    station_ids: tuple[str, ...]
    labels: np.ndarray
    merges: np.ndarray
    used_periods: tuple[str, ...]
    cluster_means: np.ndarray
    cluster_sds: np.ndarray

    def members(self, label: int) -> tuple[str, ...]:
        return tuple(sid for sid, lab in zip(self.station_ids, self.labels)
                     if lab == label)


def hierarchical_cluster(panel: AlphaPanel, k: int) -> ClusterResult:
    """Agglomerative Ward clustering on the per-station alpha vectors.

    Euclidean distance over the complete periods (those where every
    station has a value); raises when no complete period exists or
    k exceeds the station count.
    """
    n = len(panel.station_ids)
    if not 1 <= k <= n:
        raise DataError(f"k={k} must be in 1..{n}")
    complete = np.flatnonzero(panel.present.all(axis=0))
    if complete.size == 0:
        raise DataError("no period is observed for every station; "
                        "cannot build aligned alpha vectors")
    vectors = panel.alpha[:, complete]

    if n == 1:
        labels = np.ones(1, dtype=int)
        merges = np.zeros((0, 4))
    else:
        merges = linkage(vectors, method="ward")
        raw = fcluster(merges, t=k, criterion="maxclust")
        # relabel so cluster 1 has the lowest mean alpha
        order = np.argsort([vectors[raw == c].mean()
                            for c in range(1, raw.max() + 1)], kind="stable")
        remap = {int(c + 1): int(r + 1) for r, c in enumerate(order)}
        labels = np.array([remap[int(c)] for c in raw])

    kk = labels.max()
    cmeans = np.array([vectors[labels == c].mean() for c in range(1, kk + 1)])
    csds = np.array([
        vectors[labels == c].std(ddof=1) if vectors[labels == c].size > 1
        else np.nan
        for c in range(1, kk + 1)
    ])
    return ClusterResult(
        station_ids=panel.station_ids,
        labels=_frozen_array(labels, dtype=int),
        merges=_frozen_array(merges),
        used_periods=tuple(panel.periods[t] for t in complete),
        cluster_means=_frozen_array(cmeans),
        cluster_sds=_frozen_array(csds),
    )


@dataclass(frozen=True)
class SiteComparison:
    """Per-period confidence bands for two sites and separation flags."""

    site_a: str
    site_b: str
    z: float
    periods: tuple[str, ...]
    band_a: np.ndarray     # (P, 2) low/high
    band_b: np.ndarray
    separated: np.ndarray  # (P,) bool, True when the bands are disjoint


def compare_sites(panel: AlphaPanel, site_a: str, site_b: str,
                  z: float = 1.96) -> SiteComparison:
    """Compare alpha +- z*se bands of two sites over their common periods."""
    ia, ib = panel.station_index(site_a), panel.station_index(site_b)
    common = np.flatnonzero(panel.present[ia] & panel.present[ib])
    if common.size == 0:
        raise DataError(f"sites {site_a!r} and {site_b!r} share no period")
    lo_a = panel.alpha[ia, common] - z * panel.se[ia, common]
    hi_a = panel.alpha[ia, common] + z * panel.se[ia, common]
    lo_b = panel.alpha[ib, common] - z * panel.se[ib, common]
    hi_b = panel.alpha[ib, common] + z * panel.se[ib, common]
    separated = (hi_a < lo_b) | (hi_b < lo_a)
    bands_a = np.column_stack([lo_a, hi_a])
    bands_b = np.column_stack([lo_b, hi_b])
    return SiteComparison(
        site_a=site_a, site_b=site_b, z=z,
        periods=tuple(panel.periods[t] for t in common),
        band_a=_frozen_array(bands_a), band_b=_frozen_array(bands_b),
        separated=_frozen_array(separated, dtype=bool),
    )


@dataclass(frozen=True)
class RatioDiagnostic:
    """Hourly fine/coarse concentration ratio over a comparison window.

    The primary estimator averages the per-hour ratios; the ratio of the
    window means is reported alongside since the two differ whenever the
    series co-vary.
    """

    mean_ratio: float
    sd_ratio: float
    mean_pm25: float
    sd_pm25: float
    mean_pm10: float
    sd_pm10: float
    ratio_of_means: float
    n_used: int
    n_skipped: int


def ratio_diagnostic(pm25: np.ndarray, pm10: np.ndarray) -> RatioDiagnostic:
    """Summarize pm25/pm10 per hour; cells with either side missing
    (NaN) or pm10 <= 0 are skipped and counted."""
    pm25 = np.asarray(pm25, dtype=float)
    pm10 = np.asarray(pm10, dtype=float)
    if pm25.shape != pm10.shape or pm25.ndim != 1:
        raise DataError("pm25 and pm10 must be aligned 1-d series")
    usable = np.isfinite(pm25) & np.isfinite(pm10) & (pm10 > 0)
    n_used = int(usable.sum())
    if n_used == 0:
        raise DataError("no usable hours in the comparison window")
    a, b = pm25[usable], pm10[usable]
    r = a / b

    def _sd(v):
        return float(v.std(ddof=1)) if v.size > 1 else 0.0

    return RatioDiagnostic(
        mean_ratio=float(r.mean()), sd_ratio=_sd(r),
        mean_pm25=float(a.mean()), sd_pm25=_sd(a),
        mean_pm10=float(b.mean()), sd_pm10=_sd(b),
        ratio_of_means=float(a.mean() / b.mean()),
        n_used=n_used, n_skipped=int(usable.size - n_used),
    )


@dataclass(frozen=True)
class DetectionReport:
    """Everything the detection stage produces for one panel."""

    ranks: RankTable
    clusters: ClusterResult
    flagged: tuple[str, ...]
    comparisons: tuple[SiteComparison, ...] = ()


def build_detection_report(panel: AlphaPanel, k: int = 2,
                           rank_threshold: float = 0.75,
                           pairs: tuple[tuple[str, str], ...] = (),
                           z: float = 1.96) -> DetectionReport:
    """Assemble ranks, clusters, flags and requested pair comparisons.

    A station is flagged when it sits in the lowest-alpha cluster and
    its group holds rank 1 in at least ``rank_threshold`` of the periods
    where the group was ranked.
    """
    ranks = rank_groups(panel)
    clusters = hierarchical_cluster(panel, k)

    low_fraction: dict[str, float] = {}
    for gi, g in enumerate(ranks.group_names):
        ranked = ranks.ranks[gi] > 0
        if ranked.any():
            low_fraction[g] = float((ranks.ranks[gi][ranked] == 1).mean())
        else:
            low_fraction[g] = 0.0

    groups = panel.effective_groups
    flagged = tuple(
        sid for sid, lab, g in zip(panel.station_ids, clusters.labels, groups)
        if lab == 1 and low_fraction.get(g, 0.0) >= rank_threshold
    )
    comparisons = tuple(compare_sites(panel, a, b, z=z) for a, b in pairs)
    return DetectionReport(ranks=ranks, clusters=clusters, flagged=flagged,
                           comparisons=comparisons)
