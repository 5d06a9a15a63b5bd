"""Command-line front end: simulate, fit, detect.

All configuration is JSON; tabular outputs are CSV with 17-significant-
digit floats so that a round trip through files reproduces library
results exactly.  Exit codes: 0 success, 1 usage, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .core import (
    DataError,
    Dataset,
    NumericalError,
    StationSet,
    filter_stations_by_missing,
    standardize,
)
from .detect import AlphaPanel, build_detection_report
from .em import FitConfig, ThetaSearch, fit
from .infomatrix import information_matrix
from .simulate import ScenarioConfig, generate, grid_stations, run_recovery

__all__ = ["RunConfig", "cmd_simulate", "cmd_fit", "cmd_detect", "main"]

SEASONS = {12: "winter", 1: "winter", 2: "winter",
           3: "spring", 4: "spring", 5: "spring",
           6: "summer", 7: "summer", 8: "summer",
           9: "autumn", 10: "autumn", 11: "autumn"}


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


@dataclass(frozen=True)
class RunConfig:
    """Settings for one fit run parsed from the JSON config file."""

    stations_csv: Path
    observations_csv: Path
    covariates: tuple[tuple[str, int], ...]   # (column, lag) pairs
    period_rule: str = "season"
    missing_threshold: float = 0.2
    metric: str = "geographic"
    fitcfg: FitConfig = field(default_factory=FitConfig)
    seed: int = 0

    def __post_init__(self):
        if self.period_rule not in ("season", "month", "year", "all"):
            raise DataError(f"unknown period_rule {self.period_rule!r}")
        if not 0.0 <= self.missing_threshold <= 1.0:
            raise DataError("missing_threshold must be in [0, 1]")
        if self.metric not in ("planar", "geographic"):
            raise DataError(f"unknown metric {self.metric!r}")
        for p in (self.stations_csv, self.observations_csv):
            if not Path(p).exists():
                raise DataError(f"input file does not exist: {p}")


def _fitcfg_from_json(obj: dict) -> FitConfig:
    theta = obj.get("theta_search", {})
    return FitConfig(
        max_iter=int(obj.get("max_iter", 500)),
        param_tol=float(obj.get("param_tol", 1e-4)),
        loglik_tol=(None if obj.get("loglik_tol") is None
                    else float(obj["loglik_tol"])),
        theta_search=ThetaSearch(
            lo=float(theta.get("lo", 1e-2)),
            hi=float(theta.get("hi", 1e4)),
            simplex_scale=float(theta.get("simplex_scale", 0.25)),
            max_evals=int(theta.get("max_evals", 200)),
            tol=float(theta.get("tol", 1e-6)),
        ),
        alpha_sign_policy=obj.get("alpha_sign_policy", "enforce-positive"),
    )


def _load_json(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


# ------------------------------------------------------------- simulate

def cmd_simulate(config_path: str | Path, out_dir: str | Path,
                 seed: int | None = None, threads: int = 1) -> Path:
    """Run a replicated recovery study and write its summary tables."""
    obj = _load_json(config_path)
    sc = obj.get("scenario")
    if sc is None:
        raise DataError(f"{config_path}: missing 'scenario' section")
    try:
        cfg = ScenarioConfig(
            grid=tuple(sc["grid"]),
            T=int(sc["T"]),
            alpha=np.asarray(sc["alpha"], dtype=float),
            g=float(sc["g"]),
            theta=float(sc["theta"]),
            sigma=float(sc["sigma"]),
            spacing=float(sc.get("spacing", 1.0)),
            beta=None if "beta" not in sc else np.asarray(sc["beta"], float),
            X=None if "X" not in sc else np.asarray(sc["X"], float),
            n_reps=int(sc.get("n_reps", 1)),
            seed=int(sc["seed"] if seed is None else seed),
        )
    except KeyError as exc:
        raise DataError(f"{config_path}: scenario is missing {exc}") from None
    if cfg.n_reps < 1:
        raise DataError("no replicates requested")
    fitcfg = _fitcfg_from_json(obj.get("fit", {}))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = run_recovery(cfg, fitcfg, n_jobs=threads,
                          compute_se=bool(obj.get("compute_se", False)))

    # Mean/Sd/LB/UB rows, one column per parameter
    stat_rows = [("Mean", report.mean), ("Sd", report.sd),
                 ("LB", report.lb), ("UB", report.ub)]
    _write_csv(out / "recovery_report.csv",
               ["stat", *report.param_names],
               [[name, *vals] for name, vals in stat_rows])
    _write_csv(out / "estimates.csv",
               ["rep", *report.param_names],
               [[rep, *est] for rep, est in
                zip(report.rep_order, report.estimates)])
    if report.se is not None:
        _write_csv(out / "standard_errors.csv",
                   ["rep", *report.param_names],
                   [[rep, *se] for rep, se in
                    zip(report.rep_order, report.se)])
    if report.failures:
        _write_csv(out / "failures.csv", ["rep", "error"],
                   [[rep, msg] for rep, msg in report.failures])

    if obj.get("write_datasets", False):
        stations = grid_stations(*cfg.grid, spacing=cfg.spacing)
        _write_station_csv(out / "stations.csv", stations)
        start = datetime(2000, 1, 1)
        for rep in range(cfg.n_reps):
            d = generate(cfg, rep)
            _write_observations_csv(out / f"observations_rep{rep:04d}.csv",
                                    d, start)
    return out


def _write_station_csv(path: Path, stations: StationSet) -> None:
    groups = stations.groups or stations.ids
    _write_csv(path, ["station_id", "lat", "lon", "group"],
               [[sid, c[0], c[1], g]
                for sid, c, g in zip(stations.ids, stations.coords, groups)])


def _write_observations_csv(path: Path, d: Dataset, start: datetime) -> None:
    cov_names = [f"x{j}" for j in range(d.k)]
    rows = []
    for t in range(d.T):
        ts = (start + timedelta(hours=t)).isoformat()
        for s, sid in enumerate(d.stations.ids):
            y = _fmt(d.y[s, t]) if d.observed[s, t] else ""
            rows.append([sid, ts, y, *[_fmt(v) for v in d.X[t][s]]])
    _write_csv(path, ["station_id", "timestamp", "y", *cov_names], rows)


# ------------------------------------------------------------------ fit

def _read_stations(path: Path, metric: str) -> StationSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}:1: schema error: empty stations file") from None
        expected = ["station_id", "lat", "lon", "group"]
        if [h.strip() for h in header[:4]] != expected:
            raise DataError(
                f"{path}:1: schema error: header must be "
                f"{','.join(expected)}, got {','.join(header)}")
        ids, coords, groups = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 4:
                raise DataError(f"{path}:{lineno}: schema error: "
                                f"expected 4 columns, got {len(row)}")
            ids.append(row[0].strip())
            try:
                coords.append((float(row[1]), float(row[2])))
            except ValueError:
                raise DataError(f"{path}:{lineno}: invalid coordinate "
                                f"{row[1]!r},{row[2]!r}") from None
            groups.append(row[3].strip())
    if not ids:
        raise DataError(f"{path}: no stations")
    crs = "geographic" if metric == "geographic" else "planar"
    return StationSet(ids=tuple(ids), coords=np.array(coords), crs=crs,
                      groups=tuple(groups))


def _parse_hour(text: str, where: str) -> datetime:
    try:
        ts = datetime.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"{where}: invalid ISO timestamp {text!r}") from None
    return ts.replace(minute=0, second=0, microsecond=0)


def _read_observations(path: Path, stations: StationSet):
    """Long-form CSV -> hourly grids.

    Returns (hours, y (n, T) with NaN for missing, covariate name list,
    raw covariate array (C, n, T) with NaN for missing).
    """
    sid_index = {sid: i for i, sid in enumerate(stations.ids)}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}:1: schema error: empty observations file") from None
        if header[:3] != ["station_id", "timestamp", "y"]:
            raise DataError(
                f"{path}:1: schema error: header must start with "
                f"station_id,timestamp,y, got {','.join(header[:3])}")
        cov_names = header[3:]
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: schema error: expected "
                                f"{len(header)} columns, got {len(row)}")
            sid = row[0].strip()
            if sid not in sid_index:
                raise DataError(f"{path}:{lineno}: unknown station {sid!r}")
            ts = _parse_hour(row[1], f"{path}:{lineno}")
            vals = []
            for j, cell in enumerate(row[2:], start=3):
                cell = cell.strip()
                if cell == "":
                    vals.append(np.nan)
                else:
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise DataError(
                            f"{path}:{lineno}: invalid number {cell!r} in "
                            f"column {header[j - 1]!r}") from None
            records.append((sid_index[sid], ts, vals))
    if not records:
        raise DataError(f"{path}: no observation rows")

    t0 = min(r[1] for r in records)
    t1 = max(r[1] for r in records)
    T = int((t1 - t0).total_seconds() // 3600) + 1
    hours = [t0 + timedelta(hours=h) for h in range(T)]
    n = len(stations)
    y = np.full((n, T), np.nan)
    covs = np.full((len(cov_names), n, T), np.nan)
    for s, ts, vals in records:
        h = int((ts - t0).total_seconds() // 3600)
        y[s, h] = vals[0]
        for c in range(len(cov_names)):
            covs[c, s, h] = vals[c + 1]
    return hours, y, cov_names, covs


def _period_label(ts: datetime, rule: str) -> str:
    if rule == "all":
        return "all"
    if rule == "year":
        return f"{ts.year}"
    if rule == "month":
        return f"{ts.year}-{ts.month:02d}"
    season = SEASONS[ts.month]
    year = ts.year - 1 if ts.month in (1, 2) else ts.year
    return f"{year}-{season}"


def cmd_fit(config_path: str | Path, out_dir: str | Path,
            threads: int = 1, missing_threshold: float | None = None,
            metric: str | None = None) -> Path:
    """Ingest CSVs, fit each period, write estimates and diagnostics."""
    obj = _load_json(config_path)
    base = Path(config_path).parent
    try:
        cfg = RunConfig(
            stations_csv=base / obj["stations_csv"],
            observations_csv=base / obj["observations_csv"],
            covariates=tuple(
                (c["column"], int(c.get("lag", 0)))
                for c in obj.get("covariates", [])),
            period_rule=obj.get("period_rule", "season"),
            missing_threshold=float(
                obj.get("missing_threshold", 0.2)
                if missing_threshold is None else missing_threshold),
            metric=obj.get("metric", "geographic") if metric is None else metric,
            fitcfg=_fitcfg_from_json(obj.get("fit", {})),
            seed=int(obj.get("seed", 0)),
        )
    except KeyError as exc:
        raise DataError(f"{config_path}: missing required key {exc}") from None

    stations = _read_stations(cfg.stations_csv, cfg.metric)
    hours, y, cov_names, covs = _read_observations(cfg.observations_csv,
                                                   stations)
    # default covariate roster: every numeric column, unlagged
    roster = cfg.covariates or tuple((name, 0) for name in cov_names)
    for name, _ in roster:
        if name not in cov_names:
            raise DataError(f"covariate column {name!r} not found in "
                            f"{cfg.observations_csv}")

    # lag on the full hourly grid, before slicing and standardization
    n, T = y.shape
    k = len(roster)
    X_full = np.full((T, n, k), np.nan)
    for j, (name, lag) in enumerate(roster):
        raw = covs[cov_names.index(name)]          # (n, T)
        if lag < 0:
            raise DataError(f"covariate {name!r}: negative lag")
        if lag:
            X_full[lag:, :, j] = raw[:, :-lag].T
        else:
            X_full[:, :, j] = raw.T

    labels = [_period_label(ts, cfg.period_rule) for ts in hours]
    order: list[str] = []
    for lab in labels:
        if lab not in order:
            order.append(lab)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(lab, np.array([l == lab for l in labels])) for lab in order]
    beta_names = [name if lag == 0 else f"{name}_lag{lag}"
                  for name, lag in roster]
    if threads > 1 and len(jobs) > 1:
        from joblib import Parallel, delayed
        period_records = Parallel(n_jobs=threads)(
            delayed(_fit_one_period)(lab, stations, y[:, cols],
                                     X_full[cols], cfg, out, beta_names)
            for lab, cols in jobs)
    else:
        period_records = [
            _fit_one_period(lab, stations, y[:, cols], X_full[cols], cfg,
                            out, beta_names)
            for lab, cols in jobs]

    ok = [r for r in period_records if "error" not in r]
    if not ok:
        raise DataError("no period could be fitted; first error: "
                        + period_records[0].get("error", "unknown"))
    manifest = {
        "periods": [r["period"] for r in period_records],
        "fitted_periods": [r["period"] for r in ok],
        "period_rule": cfg.period_rule,
        "metric": cfg.metric,
        "missing_threshold": cfg.missing_threshold,
        "covariates": [{"column": c, "lag": l} for c, l in roster],
        "seed": cfg.seed,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _fit_one_period(label: str, stations: StationSet, y_raw: np.ndarray,
                    X_raw: np.ndarray, cfg: RunConfig, out: Path,
                    beta_names: list[str]) -> dict:
    diag: dict = {"period": label}
    try:
        observed = np.isfinite(y_raw)
        if X_raw.shape[2]:
            observed &= np.isfinite(X_raw).all(axis=2).T  # need full rows
        d = Dataset.from_arrays(stations, np.where(observed, y_raw, 0.0),
                                observed=observed,
                                X=np.where(np.isfinite(X_raw), X_raw, 0.0))
        missing_before = float(1.0 - d.observed.mean())
        excluded = [sid for sid, r in zip(stations.ids, d.missing_rate)
                    if r > cfg.missing_threshold]
        d = filter_stations_by_missing(d, cfg.missing_threshold)
        if d.n < 2:
            raise DataError(f"period {label}: fewer than 2 stations after "
                            f"missing-rate exclusion")
        d_std, record = standardize(d)
        res = fit(d_std, cfg.fitcfg)
        info = information_matrix(d_std, res.params)

        rmse = _destandardized_rmse(d_std, res, record)
        _write_estimates(out / f"estimates_{label}.csv", d_std, res, info,
                         beta_names)

        diag.update(
            n_stations=d.n,
            excluded_stations=excluded,
            missing_rate=missing_before,
            loglik=res.loglik_trace[-1],
            iterations=res.iterations,
            converged=res.converged,
            rmse=rmse,
            n_time_steps=d.T,
            unidentified=list(info.unidentified),
        )
    except (DataError, NumericalError) as exc:
        diag["error"] = str(exc)
    with open(out / f"diagnostics_{label}.json", "w") as fh:
        json.dump(diag, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return diag


def _destandardized_rmse(d_std: Dataset, res, record) -> float:
    """Root mean square of smoothed-model residuals on the y scale."""
    p = res.params
    Zt = res.smoother.z_smooth[1:].T
    fitted = p.alpha[:, None] * Zt
    if d_std.k:
        fitted = fitted + np.einsum("tnk,k->nt", d_std.X_stacked, p.beta)
    resid = (d_std.y - fitted) * d_std.observed * record.y_sd[:, None]
    return float(np.sqrt((resid ** 2).sum() / d_std.observed.sum()))


def _write_estimates(path: Path, d: Dataset, res, info,
                     beta_names: list[str]) -> None:
    p = res.params
    pm = info.param_map
    se = info.se

    def _se(name):
        return "" if se is None else se[pm.index(name)]

    groups = d.stations.groups or d.stations.ids
    rows = []
    for j in range(d.k):
        rows.append(["beta", beta_names[j], "", "", p.beta[j],
                     _se(f"beta[{j}]")])
    for s, sid in enumerate(d.stations.ids):
        rows.append(["alpha", sid, sid, groups[s], p.alpha[s],
                     _se(f"alpha[{sid}]")])
    rows.append(["sigma2", "", "", "", p.sigma2, _se("sigma2")])
    rows.append(["g", "", "", "", p.g, _se("g")])
    rows.append(["theta", "", "", "", p.theta, _se("theta")])
    _write_csv(path, ["kind", "name", "station_id", "group", "value", "se"],
               rows)


# --------------------------------------------------------------- detect

def cmd_detect(config_path: str | Path, out_dir: str | Path) -> Path:
    """Assemble the alpha panel from fit outputs and write the report."""
    obj = _load_json(config_path)
    fit_dir = Path(obj.get("fit_dir", "."))
    if not fit_dir.is_absolute():
        fit_dir = Path(config_path).parent / fit_dir
    if not fit_dir.exists():
        raise DataError(f"fit output directory not found: {fit_dir}")

    manifest_path = fit_dir / "manifest.json"
    if manifest_path.exists():
        periods = _load_json(manifest_path)["fitted_periods"]
    else:
        periods = sorted(p.stem[len("estimates_"):]
                         for p in fit_dir.glob("estimates_*.csv"))
    if not periods:
        raise DataError(f"no estimates_*.csv found in {fit_dir}")

    alpha: dict[str, dict[str, tuple[float, float]]] = {}
    groups: dict[str, str] = {}
    for period in periods:
        path = fit_dir / f"estimates_{period}.csv"
        if not path.exists():
            continue
        found = False
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["kind"] != "alpha":
                    continue
                found = True
                sid = row["station_id"]
                se = float(row["se"]) if row["se"] else np.nan
                alpha.setdefault(sid, {})[period] = (float(row["value"]), se)
                groups[sid] = row["group"] or sid
        if not found:
            raise DataError(f"{path}: no alpha rows found")
    if not alpha:
        raise DataError(f"no alpha estimates found under {fit_dir}")

    station_ids = tuple(sorted(alpha))
    n, P = len(station_ids), len(periods)
    a = np.zeros((n, P))
    se = np.full((n, P), 1.0)
    present = np.zeros((n, P), dtype=bool)
    for i, sid in enumerate(station_ids):
        for j, period in enumerate(periods):
            if period in alpha[sid]:
                val, s_ = alpha[sid][period]
                a[i, j] = val
                se[i, j] = s_ if np.isfinite(s_) else 1.0
                present[i, j] = True
    panel = AlphaPanel(station_ids=station_ids, periods=tuple(periods),
                       alpha=a, se=se, present=present,
                       groups=tuple(groups[sid] for sid in station_ids))

    report = build_detection_report(
        panel,
        k=int(obj.get("clusters", 2)),
        rank_threshold=float(obj.get("rank_threshold", 0.75)),
        pairs=tuple((str(x), str(y)) for x, y in obj.get("pairs", [])),
        z=float(obj.get("z", 1.96)),
    )

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rk = report.ranks
    _write_csv(out / "ranks.csv",
               ["group", *rk.periods],
               [[g, *rk.ranks[i]] for i, g in enumerate(rk.group_names)])
    _write_csv(out / "group_means.csv",
               ["group", *rk.periods],
               [[g, *rk.means[i]] for i, g in enumerate(rk.group_names)])
    cl = report.clusters
    _write_csv(out / "clusters.csv",
               ["cluster", "mean", "sd", "members"],
               [[c + 1, cl.cluster_means[c], cl.cluster_sds[c],
                 " ".join(cl.members(c + 1))]
                for c in range(cl.cluster_means.shape[0])])
    _write_csv(out / "cluster_assignments.csv",
               ["station_id", "cluster"],
               [[sid, int(lab)] for sid, lab in
                zip(cl.station_ids, cl.labels)])
    _write_csv(out / "flagged.csv", ["station_id"],
               [[sid] for sid in report.flagged])
    if report.comparisons:
        rows = []
        for comp in report.comparisons:
            for j, period in enumerate(comp.periods):
                rows.append([comp.site_a, comp.site_b, period,
                             comp.band_a[j, 0], comp.band_a[j, 1],
                             comp.band_b[j, 0], comp.band_b[j, 1],
                             int(comp.separated[j])])
        _write_csv(out / "comparisons.csv",
                   ["site_a", "site_b", "period", "a_low", "a_high",
                    "b_low", "b_high", "separated"], rows)
    return out


# ----------------------------------------------------------------- main

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="fieldcal",
                     description="Latent-field calibration of monitoring "
                                 "networks and biased-sensor detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_io(p):
        p.add_argument("--config", required=True,
                       help="JSON configuration file")
        p.add_argument("--out", required=True, help="output directory")
        return p

    p_sim = with_io(sub.add_parser("simulate",
                                   help="replicated recovery study"))
    p_sim.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    p_sim.add_argument("--threads", type=int, default=1)

    p_fit = with_io(sub.add_parser("fit",
                                   help="fit the model per period from CSVs"))
    p_fit.add_argument("--threads", type=int, default=1)
    p_fit.add_argument("--missing-threshold", type=float, default=None,
                       help="override the station exclusion threshold")
    p_fit.add_argument("--metric", choices=("planar", "geographic"),
                       default=None, help="override the distance metric")

    with_io(sub.add_parser("detect",
                           help="bias-detection report from fits"))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            cmd_simulate(args.config, args.out, seed=args.seed,
                         threads=args.threads)
        elif args.command == "fit":
            cmd_fit(args.config, args.out, threads=args.threads,
                    missing_threshold=args.missing_threshold,
                    metric=args.metric)
        elif args.command == "detect":
            cmd_detect(args.config, args.out)
    except DataError as exc:
        print(f"fieldcal: data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"fieldcal: i/o error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"fieldcal: numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
