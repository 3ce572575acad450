"""Desk-scale simulations and analyses that write result bundles to disk.

Every experiment returns a :class:`ResultBundle`: a summary dictionary, named
CSV tables and a manifest.  Tables are formatted with ``%.17g`` and every
random draw comes from a stream keyed by ``(seed, cell, replicate)``, so a
rerun with the same configuration reproduces the CSV files byte for byte.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .debias import build_oracle, debiased_estimate
from .errors import DomainError, ImageMismatch, LpDebiasError, SingularKkt
from .inference import (EstimatorConfig, Observation, SamplingModel, bootstrap_ensemble, ci_entrywise,
                        ks_normal, max_workers, monte_carlo, replicate_rng, sample_empirical,
                        uniform_band)
from .lp import OPTIMAL, solve_lp
from .penalty import make_penalty
from .transport import (FlowProblem, OtProblem, colocalization, embed_plan, entropic_bias_profile,
                        exact_plan,
                        flow_arcs, grid_cost, grid_points, ot_rhs_from_stat, ot_to_lp,
                        project_balanced, read_pgm, rebalance_to_lp, restrict_support,
                        sinkhorn, check_same_shape, image_to_simplex, write_plan_csv)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
EXPERIMENTS = ("sim2x2", "simgrid", "simdegenerate", "entropic_compare", "coloc", "rebalance")
VAR_GW_2X2 = 1.0 / 8.0
GRID_LIMIT = 12

COST_2X2 = np.array([[0.0, 1.0], [2.0, 0.0]])
COST_SYM_2X2 = np.array([[0.0, 1.0], [1.0, 0.0]])
HALF = np.array([0.5, 0.5])


@dataclass
class ExperimentConfig:
    experiment: str
    n: list = field(default_factory=list)
    B: int = 200
    R: int = 200
    r0: list = field(default_factory=lambda: [1.0])
    penalty: list = field(default_factory=list)
    L: int = 4
    seed: int = 0
    alpha: float = 0.05
    force: bool = False
    instance: str = ""
    lambdas: list = field(default_factory=list)
    images: list = field(default_factory=list)
    data: str = ""
    costs: str = ""

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise DomainError(f"unknown experiment {self.experiment!r}")
        self.n = [int(v) for v in self.n]
        self.r0 = [float(v) for v in self.r0]
        if any(v < 1 for v in self.n) or self.B < 1 or self.R < 1 or self.L < 1:
            raise DomainError("sample sizes and replicate counts must be at least 1")
        if any(not v > 0 for v in self.r0):
            raise DomainError("r0 must be positive")
        if not 0 < self.alpha < 1:
            raise DomainError("alpha must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ResultBundle:
    experiment: str
    summary: dict
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    config: Optional[ExperimentConfig] = None
    failures: int = 0

    def summary_document(self) -> dict:
        doc = {"schema_version": SCHEMA_VERSION, "experiment": self.experiment,
               "failures": self.failures}
        doc.update(self.summary)
        return doc

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, (header, rows) in self.tables.items():
            write_table(out / f"{name}.csv", header, rows)
        (out / "summary.json").write_text(json.dumps(_jsonable(self.summary_document()),
                                                     indent=2, sort_keys=True) + "\n")
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "experiment": self.experiment,
            "config": self.config.to_dict() if self.config else {},
            "seed": self.config.seed if self.config else None,
            "build": git_describe(),
            "tables": sorted(f"{name}.csv" for name in self.tables),
        }
        (out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2,
                                                      sort_keys=True) + "\n")
        return out


SUMMARY_REQUIRED = {"schema_version": int, "experiment": str, "failures": int}


def validate_summary(doc: dict) -> None:
    """Check the fields every summary shares; raises ``ValueError`` on mismatch."""
    for key, typ in SUMMARY_REQUIRED.items():
        if key not in doc or not isinstance(doc[key], typ):
            raise ValueError(f"summary field {key!r} missing or not {typ.__name__}")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {doc['schema_version']}")
    if doc["experiment"] not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {doc['experiment']!r}")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def loglog_slope(x, y) -> float:
    x = np.log(np.asarray(x, dtype=float))
    y = np.log(np.asarray(y, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


def _histogram_rows(tag, values, bins=30, lo=-4.0, hi=4.0):
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return [tag + [edges[i], edges[i + 1], int(counts[i])] for i in range(bins)]


def _qq_rows(tag, values):
    from scipy.stats import norm
    v = np.sort(values)
    N = v.size
    theo = norm.ppf((np.arange(1, N + 1) - 0.5) / N)
    return [tag + [theo[i], v[i]] for i in range(N)]


def _penalties(cfg, default):
    return cfg.penalty or list(default)


# ---------------------------------------------------------------- sim2x2


def run_sim_2x2(cfg: ExperimentConfig) -> ResultBundle:
    """Rescaled debiased cost on the asymmetric 2x2 transport problem.

    ``r_n = r0 / n^(1/3)``; the rescaling uses the known limit variance 1/8.
    """
    ns = cfg.n or [100, 10_000, 1_000_000]
    prob = OtProblem(HALF, HALF, COST_2X2)
    lp = ot_to_lp(prob)
    x_star = np.array([0.5, 0.0, 0.0, 0.5])
    w_star = 0.0
    cells, reps, qq, hist = [], [], [], []
    failures = 0
    for pi, pen_name in enumerate(_penalties(cfg, ("log", "exp"))):
        pen = make_penalty(pen_name)
        for ni, n in enumerate(ns):
            for ri, r0 in enumerate(cfg.r0):
                est = EstimatorConfig(lp, pen, r0 / n ** (1 / 3), ot_rhs_from_stat)
                model = SamplingModel.multinomial([prob.t, prob.s], n)
                X, failed = monte_carlo(model, est, cfg.R, cfg.seed, keys=(ni, ri))
                failures += len(failed)
                ok = ~np.isnan(X[:, 0])
                w = X[ok] @ lp.c
                dw = math.sqrt(n / VAR_GW_2X2) * (w - w_star)
                root = math.sqrt(n) * (w - w_star)
                cells.append({
                    "penalty": pen.label(), "n": n, "r0": r0, "r_n": est.r_n,
                    "replicates": int(ok.sum()), "failed": len(failed),
                    "mse_cost": float(np.mean((w - w_star) ** 2)),
                    "mse_plan": float(np.mean(np.sum((X[ok] - x_star) ** 2, axis=1))),
                    "ks": ks_normal(dw) if dw.size else math.nan,
                    "mean_root": float(root.mean()) if root.size else math.nan,
                    "var_root": float(root.var(ddof=1)) if root.size > 1 else math.nan,
                })
                tag = [pen.label(), n, r0]
                idx = np.flatnonzero(ok)
                reps.extend(tag + [int(i), w[j], dw[j]] for j, i in enumerate(idx))
                qq.extend(_qq_rows(tag, dw))
                hist.extend(_histogram_rows(tag, dw))
    tables = {
        "replicates": (["penalty", "n", "r0", "replicate", "w_hat", "delta_w"], reps),
        "qq": (["penalty", "n", "r0", "normal_quantile", "delta_w"], qq),
        "histogram": (["penalty", "n", "r0", "bin_lo", "bin_hi", "count"], hist),
    }
    return ResultBundle("sim2x2", {"var_G_w": VAR_GW_2X2, "cells": cells}, tables, cfg, failures)


# ---------------------------------------------------------------- simgrid


def _ot_cov(t, s):
    """Covariance of the limit of sqrt(n)((t_n, s_n[:-1]) - (t, s[:-1]))."""
    p1, p2 = t.size, s.size
    cov = np.zeros((p1 + p2 - 1, p1 + p2 - 1))
    cov[:p1, :p1] = np.diag(t) - np.outer(t, t)
    sr = s[:-1]
    cov[p1:, p1:] = np.diag(sr) - np.outer(sr, sr)
    return cov


def _cost_gradient(lp, pen, sol):
    """Gradient of the optimal cost in the right-hand side.

    ``M*^T c`` when the oracle exists.  Lattice costs make the optimal plan
    non-unique, which leaves ``M*`` undefined; the cost still has the simplex
    dual as its gradient, which equals ``M*^T c`` whenever both exist.
    """
    try:
        return build_oracle(lp, pen).M_star.T @ lp.c, "oracle"
    except (SingularKkt, LpDebiasError):
        return np.asarray(sol.dual, dtype=float), "dual"


def run_sim_grid(cfg: ExperimentConfig) -> ResultBundle:
    """Random marginals on an ``L x L`` grid, exponential penalty.

    Marginals are flat-Dirichlet draws, one pair per replicate.  The rescaled
    cost divides by the limit standard deviation ``sqrt(g^T Cov g)`` with
    ``g`` from :func:`_cost_gradient`.  The plan error is measured against the
    population debiased plan at a strength 1000 times smaller than ``r_n``,
    which is the point of the optimal face the penalty selects.
    """
    L = cfg.L
    if L > GRID_LIMIT and not cfg.force:
        raise DomainError(f"L={L} exceeds the desk-scale limit {GRID_LIMIT}; pass --force")
    ns = cfg.n or [200, 5000]
    pen = make_penalty((cfg.penalty or ["exp"])[0])
    C = grid_cost(L)
    p = L * L
    cells, reps = [], []
    failures = 0
    for ni, n in enumerate(ns):
        for ri, r0 in enumerate(cfg.r0):
            r_n = r0 / (L ** 4 * n ** (1 / 3))
            sq_err, dws = [], []
            via = {"oracle": 0, "dual": 0}
            for i in range(cfg.R):
                rng = replicate_rng(cfg.seed, ni, ri, i)
                t = rng.dirichlet(np.ones(p))
                s = rng.dirichlet(np.ones(p))
                lp = ot_to_lp(OtProblem(t, s, C))
                est = EstimatorConfig(lp, pen, r_n, ot_rhs_from_stat)
                obs = SamplingModel.multinomial([t, s], n).draw(rng)
                try:
                    sol = solve_lp(lp)
                    if sol.status != OPTIMAL:
                        raise LpDebiasError(f"population LP is {sol.status}")
                    target = debiased_estimate(lp, pen, r_n / 1000.0).x_hat
                    x_hat = est.estimate(obs.statistic).x_hat
                except LpDebiasError as exc:
                    log.debug("grid replicate %d failed: %s", i, exc)
                    failures += 1
                    continue
                err = float(np.sum((x_hat - target) ** 2))
                w_err = float(lp.c @ x_hat - sol.objective)
                g, how = _cost_gradient(lp, pen, sol)
                via[how] += 1
                var = float(g @ _ot_cov(t, s) @ g)
                dw = math.sqrt(n / var) * w_err if var > 0 else math.nan
                sq_err.append(err)
                if math.isfinite(dw):
                    dws.append(dw)
                reps.append([n, r0, i, err, w_err, dw, how])
            dws = np.array(dws)
            cells.append({"L": L, "n": n, "r0": r0, "r_n": r_n, "penalty": pen.label(),
                          "mse_plan": float(np.mean(sq_err)) if sq_err else math.nan,
                          "ks": ks_normal(dws) if dws.size else math.nan,
                          "rescaled": int(dws.size), "variance_from_oracle": via["oracle"],
                          "variance_from_dual": via["dual"]})
    tables = {"replicates": (["n", "r0", "replicate", "sq_err_plan", "cost_err", "delta_w",
                              "variance_source"], reps)}
    return ResultBundle("simgrid", {"cells": cells}, tables, cfg, failures)


# ---------------------------------------------------------------- degenerate


def run_sim_degenerate(cfg: ExperimentConfig) -> ResultBundle:
    """``t = s`` with a symmetric zero-diagonal cost, where the optimal cost is 0.

    ``instance="2x2"`` (default) uses ``r_n = r0 n^(-1/4)``; ``instance="grid"``
    draws one flat-Dirichlet marginal on the ``L x L`` grid and uses
    ``r_n = r0 / (L^4 n^(1/4))``.
    """
    ns = cfg.n or [10 ** 3, 10 ** 4, 10 ** 5, 10 ** 6, 10 ** 7]
    if cfg.instance in ("", "2x2"):
        t, C, scale = HALF, COST_SYM_2X2, 1.0
    elif cfg.instance == "grid":
        t = replicate_rng(cfg.seed, 999).dirichlet(np.ones(cfg.L * cfg.L))
        C, scale = grid_cost(cfg.L), float(cfg.L ** 4)
    else:
        raise DomainError(f"unknown instance {cfg.instance!r}")
    prob = OtProblem(t, t, C)
    lp = ot_to_lp(prob)
    rows, summary_pens = [], {}
    failures = 0
    for pen_name in _penalties(cfg, ("exp", "log")):
        pen = make_penalty(pen_name)
        for ri, r0 in enumerate(cfg.r0):
            mses = []
            for ni, n in enumerate(ns):
                est = EstimatorConfig(lp, pen, r0 / (scale * n ** 0.25), ot_rhs_from_stat)
                model = SamplingModel.multinomial([t, t], n)
                X, failed = monte_carlo(model, est, cfg.R, cfg.seed, keys=(ni, ri))
                failures += len(failed)
                ok = ~np.isnan(X[:, 0])
                w = X[ok] @ lp.c
                mse = float(np.mean(w ** 2))
                mses.append(mse)
                roots = math.sqrt(n) * w
                rows.append([pen.label(), r0, n, est.r_n, mse, float(np.mean(np.abs(roots))),
                             int(ok.sum())])
            summary_pens[f"{pen.label()}:r0={r0:g}"] = {
                "n": ns, "mse_cost": mses, "slope": loglog_slope(ns, mses)}
    tables = {"mse": (["penalty", "r0", "n", "r_n", "mse_cost", "mean_abs_root", "replicates"],
                      rows)}
    return ResultBundle("simdegenerate", {"instance": cfg.instance or "2x2", "fits": summary_pens},
                        tables, cfg, failures)


# ---------------------------------------------------------------- entropic


def run_entropic_compare(cfg: ExperimentConfig) -> ResultBundle:
    """Entropic bias profile on the symmetric 2x2 and a fixed-lambda contrast."""
    prob = OtProblem(HALF, HALF, COST_SYM_2X2)
    lp = ot_to_lp(prob)
    plan_star = np.diag(HALF)
    lambdas = cfg.lambdas or [0.05, 0.1, 0.2, 0.3, 0.4, 0.5]
    profile = entropic_bias_profile(prob, lambdas, plan_star)
    ns = cfg.n or [10 ** 3, 10 ** 5]
    pen = make_penalty((cfg.penalty or ["exp"])[0])
    fixed_lam = 2.0
    contrast, rows = [], []
    failures = 0
    for ni, n in enumerate(ns):
        r0 = cfg.r0[0]
        est = EstimatorConfig(lp, pen, r0 / n ** (1 / 3), ot_rhs_from_stat)
        model = SamplingModel.multinomial([prob.t, prob.s], n)
        ent_err, deb_err, plug_err, sched_err = [], [], [], []
        lam_n = 1.0 / math.log(n)
        for i in range(cfg.R):
            obs = model.draw(replicate_rng(cfg.seed, ni, i))
            t_n, s_n = obs.freqs
            if np.any(t_n <= 0) or np.any(s_n <= 0):
                failures += 1
                continue
            sub = OtProblem(t_n, s_n, prob.cost)
            try:
                x_hat = est.estimate(obs.statistic).x_hat
            except LpDebiasError:
                failures += 1
                continue
            ent = sinkhorn(sub, fixed_lam).plan
            sched = sinkhorn(sub, lam_n).plan
            plug = exact_plan(sub)
            ent_err.append(np.max(np.abs(ent - plan_star)))
            sched_err.append(np.max(np.abs(sched - plan_star)))
            plug_err.append(np.max(np.abs(plug - plan_star)))
            deb_err.append(np.max(np.abs(x_hat.reshape(2, 2) - plan_star)))
            rows.append([n, i, ent_err[-1], sched_err[-1], plug_err[-1], deb_err[-1]])
        contrast.append({
            "n": n, "lambda_fixed": fixed_lam, "lambda_schedule": lam_n,
            "entropic_error": float(np.mean(ent_err)),
            "scheduled_entropic_error": float(np.mean(sched_err)),
            "plugin_error": float(np.mean(plug_err)),
            "debiased_error": float(np.mean(deb_err)),
        })
    product = np.outer(HALF, HALF)
    tables = {
        "profile": (["lambda", "sup_error", "rate"],
                    [[r["lambda"], r["error"], r["rate"]] for r in profile]),
        "contrast": (["n", "replicate", "entropic_err", "scheduled_err", "plugin_err",
                      "debiased_err"], rows),
    }
    summary = {"profile": profile, "contrast": contrast,
               "product_coupling_distance": float(np.max(np.abs(product - plan_star)))}
    return ResultBundle("entropic_compare", summary, tables, cfg, failures)


# ---------------------------------------------------------------- colocalization


def synthetic_images(size: int = 32, seed: int = 0, blobs: int = 4):
    """Pair of sparse blob images; the second shares shifted blobs with the first.

    Intensities are 8-bit and faint pixels are cut to zero so the supports stay
    small enough for an exact transport solve.
    """
    rng = replicate_rng(seed, 7)
    yy, xx = np.mgrid[0:size, 0:size]

    def render(centers, widths, weights):
        img = np.zeros((size, size))
        for (cy, cx), w, a in zip(centers, widths, weights):
            img += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
        img = np.round(255 * img / img.max())
        img[img < 40] = 0
        return img.astype(np.int64)

    centers = rng.uniform(4, size - 4, size=(blobs, 2))
    widths = rng.uniform(1.5, 2.5, size=blobs)
    weights = rng.uniform(0.5, 1.0, size=blobs)
    shifted = centers + rng.normal(0.0, 1.0, size=centers.shape)
    extra = rng.uniform(4, size - 4, size=(1, 2))
    a = render(centers, widths, weights)
    b = render(np.vstack([shifted[:-1], extra]), widths, weights)
    return a, b


def _pixel_cost(rows_idx, cols_idx, width):
    """Euclidean distance in pixel units between flattened pixel indices."""
    ry, rx = np.divmod(rows_idx, width)
    cy, cx = np.divmod(cols_idx, width)
    return np.hypot(ry[:, None] - cy[None, :], rx[:, None] - cx[None, :])


def _coloc_estimate(t_n, s_n, width, pen, r_n, xi, method="auto"):
    """Debiased colocalization curve on the supports of ``t_n`` and ``s_n``."""
    rs, cs = restrict_support(t_n), restrict_support(s_n)
    C = _pixel_cost(rs.index, cs.index, width)
    lp = ot_to_lp(OtProblem(rs.weights, cs.weights, C))
    x_hat = debiased_estimate(lp, pen, r_n, method=method).x_hat
    return colocalization(x_hat, C, xi).values


def run_coloc(cfg: ExperimentConfig) -> ResultBundle:
    """Exact, debiased and entropic colocalization curves with a uniform band.

    Costs are Euclidean distances in pixels.  ``r_n = r0 / (p1 p2 n^(1/3))``
    with ``p1, p2`` the observed support sizes, mirroring the grid scaling.
    """
    if cfg.images:
        if len(cfg.images) != 2:
            raise DomainError("coloc needs exactly two images")
        a, b = read_pgm(cfg.images[0]), read_pgm(cfg.images[1])
    else:
        a, b = synthetic_images(32, cfg.seed)
    check_same_shape(a, b)
    width = a.shape[1]
    t, s = image_to_simplex(a), image_to_simplex(b)
    rt, st = restrict_support(t), restrict_support(s)
    C_full = _pixel_cost(rt.index, st.index, width)
    plan_star = exact_plan(OtProblem(rt.weights, st.weights, C_full), backend="highs")
    xi = np.linspace(0.0, float(C_full.max()), 60)
    col_star = colocalization(plan_star, C_full, xi).values
    pen = make_penalty((cfg.penalty or ["log"])[0])
    ns = cfg.n or [50, 150]
    too_big = [n for n in ns if n > min(rt.index.size, st.index.size)]
    if too_big and not cfg.force:
        raise DomainError(f"subsample size {too_big[0]} exceeds the image support")
    curves_rows, band_rows, cells = [], [], []
    failures = 0
    for ni, n in enumerate(ns):
        model = SamplingModel.multinomial([t, s], n, seed=int(
            np.random.SeedSequence(cfg.seed, spawn_key=(ni,)).generate_state(1)[0]))
        obs = sample_empirical(model)
        t_n, s_n = obs.freqs
        p1 = np.count_nonzero(t_n)
        p2 = np.count_nonzero(s_n)
        r_n = cfg.r0[0] / (p1 * p2 * n ** (1 / 3))
        pcol = _coloc_estimate(t_n, s_n, width, pen, r_n, xi)
        rs, cs = restrict_support(t_n), restrict_support(s_n)
        ent = sinkhorn(OtProblem(rs.weights, cs.weights, _pixel_cost(rs.index, cs.index, width)),
                       2.0)
        rcol = colocalization(ent.plan, _pixel_cost(rs.index, cs.index, width), xi).values
        boot = []
        for j in range(cfg.B):
            tb = obs.resample(replicate_rng(cfg.seed, 100 + ni, j))
            try:
                boot.append(_coloc_estimate(tb.freqs[0], tb.freqs[1], width, pen, r_n, xi))
            except LpDebiasError as exc:
                log.debug("coloc bootstrap %d failed: %s", j, exc)
                failures += 1
        band = uniform_band(np.array(boot), pcol, n, cfg.alpha)
        covered = (band.lo <= col_star + 1e-12) & (col_star <= band.hi + 1e-12)
        large = xi >= np.quantile(xi, 0.25)
        cells.append({
            "n": n, "r_n": r_n, "support": [int(p1), int(p2)], "bootstrap": len(boot),
            "sup_err_pcol": float(np.max(np.abs(pcol - col_star))),
            "sup_err_rcol": float(np.max(np.abs(rcol - col_star))),
            "sup_err_pcol_large_xi": float(np.max(np.abs(pcol - col_star)[large])),
            "sup_err_rcol_large_xi": float(np.max(np.abs(rcol - col_star)[large])),
            "band_coverage": float(np.mean(covered)),
            "band_coverage_large_xi": float(np.mean(covered[large])),
        })
        for k in range(xi.size):
            curves_rows.append([n, xi[k], col_star[k], pcol[k], rcol[k]])
            band_rows.append([n, xi[k], band.lo[k], band.hi[k], bool(covered[k])])
    tables = {
        "curves": (["n", "xi", "col_star", "pcol", "rcol"], curves_rows),
        "band": (["n", "xi", "lo", "hi", "covers_col_star"], band_rows),
    }
    summary = {"image_shape": list(a.shape), "support": [int(rt.index.size), int(st.index.size)],
               "penalty": pen.label(), "entropic_lambda": 2.0, "cells": cells}
    bundle = ResultBundle("coloc", summary, tables, cfg, failures)
    bundle.plan_star = embed_plan(plan_star, rt, st)
    return bundle


# ---------------------------------------------------------------- rebalance


def synthetic_flows(N: int = 5, days: int = 84, seed: int = 0, planted: float = 6.0,
                    noise: float = 2.0):
    """Daily net flows with one planted surplus station and one deficit station.

    Returns ``(D, coords)``; ``planted=0`` gives the null generator.
    """
    rng = replicate_rng(seed, 11)
    angle = np.linspace(0.0, 2 * math.pi, N, endpoint=False)
    coords = np.column_stack([np.cos(angle), np.sin(angle)]) * rng.uniform(0.8, 1.2, size=(N, 1))
    mean = np.zeros(N)
    mean[0], mean[-1] = planted, -planted
    D = mean + rng.normal(0.0, noise, size=(days, N))
    return project_balanced(D), coords


def _read_matrix_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if rows:
                    raise
    return np.array(rows)


def run_rebalance(cfg: ExperimentConfig) -> ResultBundle:
    """Debiased rebalancing flows with entrywise bootstrap intervals.

    Rows of the net-flow table are days; each row is projected to sum to zero
    by subtracting its mean imbalance before anything else.
    """
    if cfg.data:
        D = project_balanced(_read_matrix_csv(cfg.data))
        N = D.shape[1]
        cost = _read_matrix_csv(cfg.costs) if cfg.costs else np.ones((N, N)) - np.eye(N)
    else:
        days = cfg.n[0] if cfg.n else 84
        D, coords = synthetic_flows(5, days, cfg.seed)
        N = D.shape[1]
        cost = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    for row in D:
        FlowProblem(row, cost)  # raises UnbalancedDemand on a bad row
    n = D.shape[0]
    pen = make_penalty((cfg.penalty or ["log"])[0])
    d_bar = D.mean(axis=0)
    lp = rebalance_to_lp(FlowProblem(d_bar, cost))
    est = EstimatorConfig(lp, pen, cfg.r0[0] / n ** (1 / 3), _flow_rhs)
    # the observed data set is the table itself, not a draw from it
    obs = Observation(SamplingModel.iid_rows(D, seed=cfg.seed), data=D)
    ens = bootstrap_ensemble(obs, est, cfg.B, cfg.seed)
    ci = ci_entrywise(ens, n, cfg.alpha)
    arcs = flow_arcs(N)
    rows, shown = [], []
    for k, (i, j) in enumerate(arcs):
        show = bool(ens.center[k] >= 1.0 and (ci.lo[k] > 0 or ci.hi[k] < 0))
        rows.append([i, j, ens.center[k], ci.lo[k], ci.hi[k], show])
        if show:
            shown.append([i, j])
    summary = {"stations": N, "days": n, "penalty": pen.label(), "r_n": est.r_n,
               "alpha": cfg.alpha, "displayed_arcs": shown,
               "failed_replicates": len(ens.failed)}
    tables = {"flows": (["from", "to", "estimate", "ci_lo", "ci_hi", "displayed"], rows)}
    return ResultBundle("rebalance", summary, tables, cfg, len(ens.failed))


def _flow_rhs(stat):
    return np.asarray(stat, dtype=float)[:-1]


RUNNERS = {
    "sim2x2": run_sim_2x2,
    "simgrid": run_sim_grid,
    "simdegenerate": run_sim_degenerate,
    "entropic_compare": run_entropic_compare,
    "coloc": run_coloc,
    "rebalance": run_rebalance,
}


def run_experiment(cfg: ExperimentConfig) -> ResultBundle:
    log.info("running %s with %d worker(s)", cfg.experiment, max_workers())
    return RUNNERS[cfg.experiment](cfg)
