"""Simulation and hold-out experiments, emitted as long-format result tables.

Every trial is a pure function of ``(spec, trial)``: its ground truth, data,
thinning mask and random initialisation come from streams keyed by the
experiment seed and the trial index, so cells may run in any order or in
parallel and still merge into identical tables.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter1d

from .errors import ConfigurationError
from .filter import FilterConfig, expected_events, filter_predict
from .ingest import ColumnMap, SplitSpec, bin_events, read_incidents, split_and_mask, top_k_nodes
from .loss import LossSpec, loss_complete, row_objective
from .model import EventMatrix, MissingnessSpec, NetworkModel, apply_missingness, make_rng, simulate_bar
from .optimize import FitConfig, fit_network

log = logging.getLogger(__name__)

EXPERIMENTS = ("mse_vs_T", "robustness", "truncation", "holdout", "filter_eval")
KEY_COLUMNS = ["experiment", "estimator", "T", "p", "p_hat", "q"]

# stream ids so ground truth, data, masks and inits never share a stream
_TRUTH, _DATA, _MASK, _INIT, _FILTER = range(5)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    grid: dict
    trials: int = 10
    seed: int = 0
    estimators: tuple = ()
    M: int = 20
    s: int = 20
    lambda_scale: float = 0.75
    fit: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    threads: int = 1

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {self.name!r}; choose from {EXPERIMENTS}")
        if not self.grid or any(len(v) == 0 for v in self.grid.values()):
            raise ConfigurationError("experiment grid must be non-empty")
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        d["estimators"] = tuple(d.get("estimators", ()))
        return cls(**d)


def preset(name: str, paper_scale: bool = False) -> ExperimentSpec:
    """Default experiment configurations (desk scale unless ``paper_scale``)."""
    p_hat_grid = [round(0.5 + 0.05 * i, 2) for i in range(10)]
    if name == "mse_vs_T":
        grid = {"T": [500, 1000, 2000, 4000], "p": [0.75]}
        if paper_scale:
            grid = {"T": [500, 1000, 2000, 4000, 8000], "p": [0.6, 0.75]}
        return ExperimentSpec(name, grid, trials=50 if paper_scale else 10,
                              estimators=("oracle", "proposed", "naive"),
                              M=50 if paper_scale else 20, s=50 if paper_scale else 20)
    if name == "robustness":
        return ExperimentSpec(name, {"T": [2000], "p": [0.7], "p_hat": p_hat_grid},
                              trials=50 if paper_scale else 10, estimators=("proposed",),
                              M=50 if paper_scale else 20, s=50 if paper_scale else 20)
    if name == "truncation":
        return ExperimentSpec(name, {"T": [500, 1000, 2000], "p": [0.7], "p_hat": [0.7]},
                              trials=30 if paper_scale else 10,
                              estimators=("X_full", "X_q2", "X_q4", "Z_q2", "Z_q4"), M=20, s=20)
    if name == "holdout":
        return ExperimentSpec(name, {"p": [0.75], "p_hat": p_hat_grid + [1.0]},
                              trials=10, estimators=("proposed", "oracle"), M=9, s=18,
                              extra={"train_bins": 600, "test_bins": 318})
    if name == "filter_eval":
        return ExperimentSpec(name, {"p": [0.75], "p_hat": [0.75]}, trials=10,
                              estimators=("proposed", "naive"), M=9, s=18,
                              extra={"train_bins": 600, "test_bins": 318, "n_particles": 1000})
    raise ConfigurationError(f"unknown experiment {name!r}")


class ResultTable:
    """Raw rows (one per cell, trial and metric) plus median / sample-std summaries."""

    def __init__(self, raw: pd.DataFrame, extras: dict | None = None):
        self.raw = raw.sort_values(KEY_COLUMNS + ["metric", "trial"], kind="stable").reset_index(drop=True)
        self.extras = extras or {}

    @classmethod
    def from_rows(cls, rows, extras=None) -> "ResultTable":
        return cls(pd.DataFrame(rows, columns=KEY_COLUMNS + ["trial", "metric", "value"]), extras)

    def summary(self) -> pd.DataFrame:
        keys = KEY_COLUMNS + ["metric"]
        g = self.raw.groupby(keys, dropna=False, sort=True)["value"]
        out = g.agg(median="median", std=lambda v: v.std(ddof=1) if len(v) > 1 else 0.0, n="size")
        return out.reset_index()

    def check_summary(self, summary: pd.DataFrame | None = None) -> bool:
        summary = self.summary() if summary is None else summary
        fresh = self.summary()
        return bool(np.allclose(summary["median"], fresh["median"], equal_nan=True)
                    and np.allclose(summary["std"], fresh["std"], equal_nan=True))

    def medians(self, metric: str, estimator: str | None = None, by: str = "T") -> pd.Series:
        df = self.raw[self.raw.metric == metric]
        if estimator is not None:
            df = df[df.estimator == estimator]
        return df.groupby(by)["value"].median()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.raw.to_csv(out / "raw.csv", index=False, float_format="%.12g")
        self.summary().to_csv(out / "summary.csv", index=False, float_format="%.12g")
        for name, frame in self.extras.items():
            frame.to_csv(out / f"{name}.csv", index=False, float_format="%.12g")


def gen_ground_truth(M: int, s: int, seed: int) -> NetworkModel:
    """``s`` random positions with Uniform[-1, 1] weights, nu = 0, rows scaled into the unit l1 ball."""
    if not 0 <= s <= M * M:
        raise ConfigurationError(f"need 0 <= s <= M^2, got s={s}, M={M}")
    rng = make_rng(seed, _TRUTH)
    A = np.zeros(M * M)
    A[rng.choice(M * M, size=s, replace=False)] = rng.uniform(-1.0, 1.0, size=s)
    A = A.reshape(M, M)
    norms = np.abs(A).sum(axis=1)
    over = norms > 1.0
    if over.any():
        log.debug("rescaled %d rows into the unit l1 ball", int(over.sum()))
        A[over] /= norms[over, None]
    return NetworkModel(A, np.zeros(M), ball_constrained=True)


def mse(a_hat: NetworkModel, a_star: NetworkModel) -> float:
    """||A_hat - A*||_F^2 / M^2."""
    if a_hat.M != a_star.M:
        raise ConfigurationError("models differ in size")
    return float(np.sum((a_hat.A - a_star.A) ** 2) / a_hat.M ** 2)


def _trial_seed(spec: ExperimentSpec, trial: int) -> int:
    return int(np.random.SeedSequence([spec.seed, trial]).generate_state(1)[0])


def _fit_cfg(spec: ExperimentSpec, trial: int, T: int, **over) -> FitConfig:
    params = {"lam": spec.lambda_scale / math.sqrt(T), "init": "random",
              "seed": _trial_seed(spec, trial) % 2 ** 31}
    params.update(spec.fit)
    params.update(over)
    return FitConfig(**params)


def _simulate_trial(spec: ExperimentSpec, trial: int, T: int, p: float):
    seed = _trial_seed(spec, trial)
    truth = gen_ground_truth(spec.M, spec.s, seed)
    x = simulate_bar(truth, T, seed=int(np.random.SeedSequence([seed, _DATA]).generate_state(1)[0]))
    z, _ = apply_missingness(x, MissingnessSpec(p), seed=int(np.random.SeedSequence([seed, _MASK]).generate_state(1)[0]))
    return truth, x, z


def _run_cells(fn, spec: ExperimentSpec) -> list:
    tasks = [(spec, trial) for trial in range(spec.trials)]
    if spec.threads > 1:
        with ProcessPoolExecutor(spec.threads) as pool:
            chunks = list(pool.map(fn, *zip(*tasks)))
    else:
        chunks = [fn(*t) for t in tasks]
    return [row for chunk in chunks for row in chunk]


def _fit_safe(spec_loss, data, cfg, where: str):
    try:
        return fit_network(spec_loss, data, cfg)
    except Exception as exc:  # attach cell coordinates, keep the original type visible
        raise type(exc)(f"{where}: {exc}") from exc


# ---------------------------------------------------------------- MSE vs T

def _mse_vs_T_trial(spec: ExperimentSpec, trial: int) -> list:
    rows = []
    T_max = max(spec.grid["T"])
    for p in spec.grid["p"]:
        # one path per trial; shorter horizons are prefixes of it
        truth, x_full, z_full = _simulate_trial(spec, trial, T_max, p)
        for T in spec.grid["T"]:
            x, z = x_full.columns(0, T), z_full.columns(0, T)
            cfg = _fit_cfg(spec, trial, T)
            fits = {
                "oracle": (LossSpec.complete(), x),
                "proposed": (LossSpec.unbiased(2, p), z),
                "naive": (LossSpec.complete(), z),
            }
            for name in spec.estimators or fits:
                loss_spec, data = fits[name]
                rep = _fit_safe(loss_spec, data, cfg, f"mse_vs_T T={T} p={p} trial={trial} {name}")
                rows.append(["mse_vs_T", name, T, p, p if name == "proposed" else 1.0,
                             loss_spec.q or 0, trial, "mse", mse(rep.model, truth)])
    return rows


def run_mse_vs_T(spec: ExperimentSpec) -> ResultTable:
    return ResultTable.from_rows(_run_cells(_mse_vs_T_trial, spec))


# ---------------------------------------------------------------- robustness

def _robustness_trial(spec: ExperimentSpec, trial: int) -> list:
    rows = []
    for p in spec.grid["p"]:
        for T in spec.grid["T"]:
            truth, _, z = _simulate_trial(spec, trial, T, p)
            cfg = _fit_cfg(spec, trial, T)
            for p_hat in spec.grid["p_hat"]:
                rep = _fit_safe(LossSpec.unbiased(2, p_hat), z, cfg, f"robustness p_hat={p_hat} trial={trial}")
                rows.append(["robustness", "proposed", T, p, p_hat, 2, trial, "mse", mse(rep.model, truth)])
    return rows


def run_robustness(spec: ExperimentSpec) -> ResultTable:
    return ResultTable.from_rows(_run_cells(_robustness_trial, spec))


# ---------------------------------------------------------------- truncation

TRUNCATION_ESTIMATORS = {
    "X_full": ("x", None),
    "X_q2": ("x", 2),
    "X_q4": ("x", 4),
    "Z_q2": ("z", 2),
    "Z_q4": ("z", 4),
}


def _truncation_trial(spec: ExperimentSpec, trial: int) -> list:
    rows = []
    T_max = max(spec.grid["T"])
    for p in spec.grid["p"]:
        truth, x_full, z_full = _simulate_trial(spec, trial, T_max, p)
        for p_hat in spec.grid.get("p_hat", [p]):
            for T in spec.grid["T"]:
                cfg = _fit_cfg(spec, trial, T)
                for name in spec.estimators or TRUNCATION_ESTIMATORS:
                    source, q = TRUNCATION_ESTIMATORS[name]
                    if source == "x":
                        data = x_full.columns(0, T)
                        loss_spec = LossSpec.complete() if q is None else LossSpec.truncated(q)
                        ph = 1.0
                    else:
                        data = z_full.columns(0, T)
                        loss_spec = LossSpec.unbiased(q, p_hat)
                        ph = p_hat
                    rep = _fit_safe(loss_spec, data, cfg, f"truncation T={T} trial={trial} {name}")
                    rows.append(["truncation", name, T, p, ph, q or 0, trial, "mse", mse(rep.model, truth)])
    return rows


def run_truncation(spec: ExperimentSpec) -> ResultTable:
    return ResultTable.from_rows(_run_cells(_truncation_trial, spec))


# ---------------------------------------------------------------- hold-out likelihood

def holdout_loglik(model: NetworkModel, test_x) -> float:
    """Complete-data log-likelihood of ``test_x`` over its T-1 transitions."""
    data = test_x.data if isinstance(test_x, EventMatrix) else np.asarray(test_x)
    T_eff = data.shape[1] - 1
    return -T_eff * sum(loss_complete(model.A[m], model.nu[m], data, m) for m in range(model.M))


def run_holdout(train_z, test_x, p_hat_grid, x_train=None, cfg: FitConfig | None = None,
                q: int = 2, trial: int = 0, p: float = float("nan")) -> ResultTable:
    """Fit (nu, A) on thinned training data for each p_hat; score on complete test data.

    With ``x_train`` the complete-data oracle fit is scored as well.
    """
    cfg = cfg or FitConfig()
    rows, models = [], {}
    for p_hat in p_hat_grid:
        rep = _fit_safe(LossSpec.unbiased(q, p_hat, include_intercept=True), train_z, cfg,
                        f"holdout p_hat={p_hat}")
        models[("proposed", p_hat)] = rep.model
        rows.append(["holdout", "proposed", train_z.T, p, p_hat, q, trial, "loglik",
                     holdout_loglik(rep.model, test_x)])
    if x_train is not None:
        rep = _fit_safe(LossSpec.complete(include_intercept=True), x_train, cfg, "holdout oracle")
        models[("oracle", 1.0)] = rep.model
        rows.append(["holdout", "oracle", x_train.T, p, 1.0, 0, trial, "loglik", holdout_loglik(rep.model, test_x)])
    table = ResultTable.from_rows(rows)
    table.models = models
    return table


def _semisynthetic_split(spec: ExperimentSpec, trial: int, p: float):
    train, test = spec.extra.get("train_bins", 600), spec.extra.get("test_bins", 318)
    truth, x, _ = _simulate_trial(spec, trial, train + test, 1.0)
    mask_seed = int(np.random.SeedSequence([_trial_seed(spec, trial), _MASK]).generate_state(1)[0])
    x_train, z_train, x_test = split_and_mask(x, SplitSpec(train, test, p, mask_seed))
    return truth, x_train, z_train, x_test


def _holdout_trial(spec: ExperimentSpec, trial: int) -> list:
    rows = []
    for p in spec.grid["p"]:
        _, x_train, z_train, x_test = _semisynthetic_split(spec, trial, p)
        cfg = _fit_cfg(spec, trial, x_train.T, init="zero")
        oracle = x_train if "oracle" in (spec.estimators or ("oracle",)) else None
        table = run_holdout(z_train, x_test, spec.grid["p_hat"], oracle, cfg, trial=trial, p=p)
        rows.extend(table.raw.values.tolist())
    return rows


def run_holdout_semisynthetic(spec: ExperimentSpec) -> ResultTable:
    return ResultTable.from_rows(_run_cells(_holdout_trial, spec))


# ---------------------------------------------------------------- density propagation

def smooth(traj: np.ndarray, sigma: float = 3.0) -> np.ndarray:
    """Gaussian smoothing along time, for plotting only."""
    return gaussian_filter1d(np.asarray(traj, dtype=float), sigma, axis=-1, mode="nearest")


def run_filter_eval(variants: dict, z_test: EventMatrix, n_particles: int = 1000, seed: int = 0,
                    x_test: EventMatrix | None = None, sigma: float | None = 3.0, trial: int = 0,
                    p: float = float("nan"), x0=None) -> ResultTable:
    """Density propagation for each named variant ``(model, p_hat, scale)``.

    ``p_hat`` is the observation model used inside the filter; totals are
    divided by ``scale``.  Trajectories (optionally smoothed) are kept in
    ``table.extras['trajectories']``.
    """
    rows, traj = [], []
    for k, (name, (model, p_hat, scale)) in enumerate(sorted(variants.items())):
        cfg = FilterConfig(n_particles, MissingnessSpec(p_hat), seed=int(
            np.random.SeedSequence([seed, _FILTER, k]).generate_state(1)[0]))
        out = filter_predict(model, z_test, cfg, x0=x0)
        total = expected_events(out, scale)
        rows.append(["filter_eval", name, z_test.T, p, p_hat, 2, trial, "expected_events", total])
        pred = out.predictive / scale
        shown = smooth(pred, sigma) if sigma else pred
        for i, nid in enumerate(z_test.node_ids):
            traj.extend({"estimator": name, "trial": trial, "node": nid, "week": t, "predicted": v}
                        for t, v in enumerate(shown[i]))
    if x_test is not None:
        rows.append(["filter_eval", "actual", x_test.T, p, 1.0, 0, trial, "expected_events",
                     float(x_test.data.sum())])
        rows.append(["filter_eval", "observed", z_test.T, p, 1.0, 0, trial, "expected_events",
                     float(z_test.data.sum())])
    return ResultTable.from_rows(rows, {"trajectories": pd.DataFrame(traj)})


def _filter_trial(spec: ExperimentSpec, trial: int) -> list:
    rows = []
    for p in spec.grid["p"]:
        _, x_train, z_train, x_test = _semisynthetic_split(spec, trial, p)
        mask_seed = int(np.random.SeedSequence([_trial_seed(spec, trial), _MASK, 1]).generate_state(1)[0])
        z_test, _ = apply_missingness(x_test, MissingnessSpec(p), mask_seed)
        cfg = _fit_cfg(spec, trial, x_train.T, init="zero")
        variants = {}
        for p_hat in spec.grid["p_hat"]:
            rep = _fit_safe(LossSpec.unbiased(2, p_hat, include_intercept=True), z_train, cfg, "filter_eval")
            variants[f"proposed_{p_hat:g}"] = (rep.model, p_hat, 1.0)
        naive = _fit_safe(LossSpec.unbiased(2, 1.0, include_intercept=True), z_train, cfg, "filter_eval naive")
        variants["naive"] = (naive.model, 1.0, 1.0)
        variants["naive_scaled"] = (naive.model, 1.0, p)
        x0 = x_train.data[:, -1]
        table = run_filter_eval(variants, z_test, spec.extra.get("n_particles", 1000),
                                _trial_seed(spec, trial), x_test, sigma=None, trial=trial, p=p, x0=x0)
        rows.extend(table.raw.values.tolist())
    return rows


def run_filter_eval_semisynthetic(spec: ExperimentSpec) -> ResultTable:
    return ResultTable.from_rows(_run_cells(_filter_trial, spec))


# ---------------------------------------------------------------- real data

def run_chicago(path, out_dir=None, k: int = 9, train_bins: int = 600, test_bins: int = 318,
                mask_p: float = 0.75, p_hat_grid=None, seed: int = 0, n_particles: int = 1000,
                columns: ColumnMap = ColumnMap(), type_filter: str = "HOMICIDE") -> dict:
    """Real-data pipeline: weekly bins of the top-k areas, hold-out likelihood, density propagation.

    Results are reported, not checked against reference numbers.
    """
    from datetime import timedelta

    records, report = read_incidents(path, columns, type_filter)
    nodes = top_k_nodes(records, k)
    binned = bin_events(records, timedelta(days=7), None, nodes)
    x = binned.events
    if x.T < train_bins + test_bins:
        train_bins = int(round(x.T * train_bins / (train_bins + test_bins)))
        test_bins = x.T - train_bins
        log.warning("only %d weeks available; using %d/%d split", x.T, train_bins, test_bins)
    x_train, z_train, x_test = split_and_mask(x, SplitSpec(train_bins, test_bins, mask_p, seed))
    p_hat_grid = p_hat_grid or [round(0.5 + 0.05 * i, 2) for i in range(11)]
    hold = run_holdout(z_train, x_test, p_hat_grid, x_train, FitConfig(), p=mask_p)
    z_test, _ = apply_missingness(x_test, MissingnessSpec(mask_p), seed + 1)
    proposed = hold.models.get(("proposed", mask_p)) or fit_network(
        LossSpec.unbiased(2, mask_p, include_intercept=True), z_train, FitConfig()).model
    naive = hold.models.get(("proposed", 1.0)) or fit_network(
        LossSpec.unbiased(2, 1.0, include_intercept=True), z_train, FitConfig()).model
    filt = run_filter_eval({"proposed": (proposed, mask_p, 1.0), "naive": (naive, 1.0, 1.0),
                            "naive_scaled": (naive, 1.0, mask_p)}, z_test, n_particles, seed, x_test,
                           x0=x_train.data[:, -1])
    totals = filt.raw[filt.raw.metric == "expected_events"].set_index("estimator")["value"].to_dict()
    result = {"nodes": nodes, "weeks": x.T, "out_of_span": binned.n_out_of_span,
              "ingest": {k_: v for k_, v in report.to_dict().items() if k_ != "rejects"},
              "holdout": hold.raw.to_dict(orient="records"), "expected_events": totals}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        hold.write(out / "holdout")
        filt.write(out / "filter")
        (out / "chicago.json").write_text(json.dumps(result, indent=2, sort_keys=True, default=str) + "\n")
    return result


# ---------------------------------------------------------------- diagnostics

def restricted_eigenvalue_diagnostic(x, n_dirs: int = 100, sparsity: int = 5, seed: int = 0) -> float:
    """min over random sparse unit directions v of (1/T) sum_t (v . x_t)^2."""
    data = (x.data if isinstance(x, EventMatrix) else np.asarray(x)).astype(float)
    M, T = data.shape
    rng = make_rng(seed)
    worst = np.inf
    for _ in range(n_dirs):
        v = np.zeros(M)
        idx = rng.choice(M, size=min(sparsity, M), replace=False)
        v[idx] = rng.standard_normal(idx.size)
        v /= np.linalg.norm(v)
        worst = min(worst, float(np.mean((v @ data) ** 2)))
    log.info("restricted eigenvalue diagnostic: min ||v||_T^2 = %.4f over %d directions", worst, n_dirs)
    return worst


def rsc_diagnostic(loss_spec: LossSpec, data, m: int, center, n_pairs: int = 200, alpha: float = 0.05,
                   radius: float = 0.2, seed: int = 0) -> float:
    """Smallest tau with T_L(v, w) >= alpha ||v-w||_2^2 - tau ||v-w||_1^2 on sampled pairs near ``center``.

    T_L(v, w) = L(v) - L(w) - <grad L(w), v - w>.  Returned for logging.
    """
    obj = row_objective(loss_spec, data, m)
    rng = make_rng(seed)
    center = np.asarray(center, dtype=float)
    tau = 0.0
    for _ in range(n_pairs):
        v = center + rng.uniform(-radius, radius, center.size) / center.size
        w = center + rng.uniform(-radius, radius, center.size) / center.size
        lw, gw, _ = obj.value_and_grad(w, 0.0)
        gap = obj.value(v, 0.0) - lw - gw @ (v - w)
        d = v - w
        need = (alpha * d @ d - gap) / (np.abs(d).sum() ** 2)
        tau = max(tau, need)
    log.info("RSC diagnostic row %d: tau_hat = %.4g (alpha = %g)", m, tau, alpha)
    return tau


# ---------------------------------------------------------------- dispatch

RUNNERS = {
    "mse_vs_T": run_mse_vs_T,
    "robustness": run_robustness,
    "truncation": run_truncation,
    "holdout": run_holdout_semisynthetic,
    "filter_eval": run_filter_eval_semisynthetic,
}

GNUPLOT_STUB = """# gnuplot stub: median with sample-std error bars per estimator
set datafile separator ','
set key top right
set xlabel '{x}'
set ylabel '{metric}'
# columns: {columns}
plot for [est in "{estimators}"] 'summary.csv' using {xcol}:(strcol(2) eq est ? $9 : 1/0):10 with yerrorlines title est
"""


def run_experiment(spec: ExperimentSpec, out_dir=None) -> ResultTable:
    table = RUNNERS[spec.name](spec)
    if out_dir is not None:
        out = Path(out_dir)
        table.write(out)
        (out / "config-echo.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
        summary_cols = list(table.summary().columns)
        x = "p_hat" if spec.name in ("robustness", "holdout") else "T"
        metric = table.raw["metric"].iloc[0] if len(table.raw) else ""
        (out / "plot.gp").write_text(GNUPLOT_STUB.format(
            x=x, metric=metric, columns=",".join(summary_cols),
            estimators=" ".join(sorted(table.raw["estimator"].unique())),
            xcol=summary_cols.index(x) + 1))
    return table
