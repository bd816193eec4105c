"""The four experiment commands.  Each is a pure function of the resolved config.

A command returns a :class:`CommandOutput` holding the JSON-serialisable
record, flat tables, SVG documents, and wall-clock timings.  Timings are kept
out of the record so that reruns stay bitwise identical.
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field

import numpy as np
import scipy

from .. import __version__
from ..assimilation import map_solve, map_rhs, wc_cost
from ..criteria import (
    DesignEvaluator,
    build_criterion_operator,
    criterion_exact,
    reconcile_constants,
    sc_criterion_selected,
)
from ..models import ModelProblem, ad2d_problem, heat1d_problem
from ..operators import SensorDesign
from ..rng import derive_seed
from ..selection import (
    BudgetExceeded,
    all_design_values,
    exhaustive_select,
    gks_select,
    greedy_select,
    percentile_of,
    raf_select,
    random_design_sample,
    sc_reference_design,
)
from ..traceest import slq_trace, xnystrace_logdet
from .config import ConfigError, config_hash, model_config
from .svg import histogram_svg


@dataclass
class CommandOutput:
    record: dict
    tables: dict[str, list[dict]] = field(default_factory=dict)
    svgs: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


def environment_stamp() -> dict:
    return {
        "package": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def build_model(cfg: dict, alpha: float | None = None) -> ModelProblem:
    mcfg = model_config(cfg)
    if cfg["model"]["name"] == "heat1d":
        return heat1d_problem(mcfg, seed=cfg["seed"])
    return ad2d_problem(mcfg, seed=cfg["seed"], alpha=alpha)


def _record(command: str, cfg: dict, model: ModelProblem | None, outputs: dict) -> dict:
    rec = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": cfg,
        "environment": environment_stamp(),
        "outputs": outputs,
    }
    if model is not None:
        dims = model.problem.dims
        rec["problem"] = {"model": cfg["model"]["name"], "d_S": dims.d_S, "n_T": dims.n_T, "n_s": dims.n_s,
                          "N_d": dims.N_d, "N_m": dims.N_m}
    return rec


def _stats(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1)) if x.size > 1 else 0.0


def cmd_estimate_eig(cfg: dict) -> CommandOutput:
    """Exact and randomized criterion values for each configured formulation."""
    opts = cfg["estimate_eig"]
    t0 = time.perf_counter()
    model = build_model(cfg)
    problem = model.problem
    full = SensorDesign.full(problem.dims.n_s)
    rows, outputs = [], {"formulations": {}}
    timings = {}
    for variant in opts["variants"]:
        op = build_criterion_operator(problem, full, variant)
        entry = {"size": op.operator.rows, "constant": op.additive_constant, "covariance_actions": op.audit}
        exact = None
        if opts["exact"] and op.operator.rows <= opts["dense_limit"]:
            ts = time.perf_counter()
            val = criterion_exact(op, dense_limit=opts["dense_limit"])
            exact = val.value
            entry["exact"] = exact
            entry["exact_reconciled"] = reconcile_constants([val], problem, dense_limit=opts["dense_limit"])[0]
            timings[f"exact/{variant}"] = time.perf_counter() - ts
        else:
            entry["exact"] = None
        for method in opts["methods"]:
            if method == "xnystrace" and variant != "preconditioned":
                continue
            for N in opts["samples"]:
                if method == "xnystrace" and N < 2:
                    continue
                ts = time.perf_counter()
                values, iters = [], []
                for trial in range(opts["trials"]):
                    seed = derive_seed(cfg["seed"], "estimate-eig", variant, method, N, trial)
                    if method == "slq":
                        est = slq_trace(op.operator, op.function, N, seed, opts["rel_tol"], opts["max_iter"])
                    else:
                        est = xnystrace_logdet(op.operator, N, seed, opts["rel_tol"], opts["max_iter"])
                    values.append(est.value)
                    iters.append(est.mean_iterations)
                timings[f"{method}/{variant}/N={N}"] = time.perf_counter() - ts
                mean, std = _stats(values)
                row = {"variant": variant, "method": method, "N": N, "trials": opts["trials"],
                       "size": op.operator.rows, "mean": mean, "std": std,
                       "mean_lanczos_iters": float(np.mean(iters)), "exact": exact,
                       "mean_rel_error": None, "std_rel_error": None}
                if exact is not None:
                    rel = np.abs(np.asarray(values) - exact) / abs(exact)
                    row["mean_rel_error"], row["std_rel_error"] = _stats(rel)
                rows.append(row)
        outputs["formulations"][variant] = entry
    outputs["estimates"] = rows
    if "preconditioned" in opts["variants"]:
        it = {r["variant"]: r["mean_lanczos_iters"] for r in rows if r["method"] == "slq"}
        if len(it) > 1:
            outputs["fewest_lanczos_iterations"] = min(sorted(it), key=lambda v: it[v])
    timings["total"] = time.perf_counter() - t0
    return CommandOutput(_record("estimate-eig", cfg, model, outputs), {"estimates": rows}, {}, timings)


def _select(method: str, problem, k: int, opts: dict, seed: int, evaluator: DesignEvaluator):
    if method == "gks":
        return gks_select(problem, k, opts["svd_rank"], opts["svd"], seed, evaluator)
    if method == "raf":
        return raf_select(problem, k, seed, opts["oversampling"], opts["sketch_rows"], evaluator)
    if method == "greedy":
        return greedy_select(problem, k, evaluator)
    return exhaustive_select(problem, k, evaluator, opts["exhaustive_budget"])


def cmd_place_sensors(cfg: dict) -> CommandOutput:
    """Run the selectors, compare against random designs, emit histograms."""
    opts = cfg["place_sensors"]
    t0 = time.perf_counter()
    model = build_model(cfg)
    problem = model.problem
    n_s = problem.dims.n_s
    evaluator = DesignEvaluator(problem)
    rows, svgs, results, timings = [], {}, {}, {}
    for k in opts["k"]:
        if k > n_s:
            raise ConfigError(f"k={k} exceeds the {n_s} candidate sensors")
        seed = derive_seed(cfg["seed"], "place-sensors", k)
        sample = random_design_sample(n_s, k, opts["random_designs"], derive_seed(seed, "random"), evaluator)
        per_k = {"random": {"count": int(sample.values.size), "min": float(sample.values.min()),
                            "max": float(sample.values.max()), "mean": float(sample.values.mean())}}
        markers, refused = {}, None
        for method in opts["methods"]:
            ts = time.perf_counter()
            try:
                res = _select(method, problem, k, opts, derive_seed(seed, method), evaluator)
            except BudgetExceeded as exc:
                per_k[method] = {"refused": str(exc), "count": exc.count}
                refused = exc
                continue
            timings[f"{method}/k={k}"] = time.perf_counter() - ts
            entry = {
                "design": list(res.design.indices),
                "value": res.value,
                "sc_value": evaluator.sc_value(res.design),
                "percentile_random": sample.percentile(res.value),
                "bound": res.bound,
            }
            if method == "greedy":
                entry["gains"] = res.gains
            if method == "raf":
                entry["sketch_rows"] = res.info["D"]
                entry["transpose_applications"] = res.info["transpose_applications"]
            per_k[method] = entry
            markers[method] = res.value
            rows.append({"k": k, "method": method, "value": res.value, "percentile_random": entry["percentile_random"],
                         "design": " ".join(map(str, res.design.indices))})
        if not markers and refused is not None:
            raise refused  # nothing left to report for this k
        if "exhaustive" in per_k and "value" in per_k["exhaustive"]:
            try:
                allv = all_design_values(evaluator, k, opts["exhaustive_budget"])
                for method in opts["methods"]:
                    if "value" in per_k.get(method, {}):
                        per_k[method]["percentile_all"] = percentile_of(allv, per_k[method]["value"])
            except BudgetExceeded:
                pass
        results[str(k)] = per_k
        svgs[f"k{k}"] = histogram_svg(
            sample.values, markers, f"{cfg['model']['name']}: k={k}, {sample.values.size} random designs",
            bins=opts["bins"], note=f"config_hash={config_hash(cfg)}")
    timings["total"] = time.perf_counter() - t0
    return CommandOutput(_record("place-sensors", cfg, model, {"selections": results}), {"designs": rows}, svgs,
                         timings)


def cmd_assimilate(cfg: dict) -> CommandOutput:
    """MAP estimate with and without the forecast-prior preconditioner."""
    opts = cfg["assimilate"]
    t0 = time.perf_counter()
    model = build_model(cfg)
    problem = model.problem
    d = problem.dims.d_S
    truth0 = model.u0_true
    bg_err = float(np.linalg.norm(problem.background_mean - truth0) / np.linalg.norm(truth0))
    rows, outputs, timings = [], {"background_rel_error": bg_err}, {}
    rhs_gap = np.linalg.norm(map_rhs(problem, model.y, "direct") - map_rhs(problem, model.y, "recursive"))
    outputs["rhs_form_difference"] = float(rhs_gap / max(np.linalg.norm(map_rhs(problem, model.y)), 1e-300))
    for pre in ("none", "forecast_prior"):
        ts = time.perf_counter()
        res = map_solve(problem, model.y, pre, opts["tol"], opts["max_iter"])
        timings[pre] = time.perf_counter() - ts
        err = float(np.linalg.norm(res.map_estimate[:d] - truth0) / np.linalg.norm(truth0))
        row = {"preconditioner": pre, "iterations": res.pcg_iterations, "converged": res.converged,
               "final_residual": res.final_residual, "u0_rel_error": err,
               "cost": wc_cost(problem, res.map_estimate, model.y)}
        rows.append(row)
        outputs[pre] = row
    timings["total"] = time.perf_counter() - t0
    return CommandOutput(_record("assimilate", cfg, model, outputs), {"pcg": rows}, {}, timings)


def cmd_gap_study(cfg: dict) -> CommandOutput:
    """Strong-constraint criterion of weak-constraint designs as the model error shrinks."""
    if cfg["model"]["name"] != "ad2d":
        raise ConfigError("gap-study uses the ad2d model (model error scaled by alpha)")
    opts = cfg["gap_study"]
    t0 = time.perf_counter()
    k = opts["k"]
    rows, timings = [], {}
    base = build_model(cfg, alpha=opts["alphas"][0])
    if k > base.problem.dims.n_s:
        raise ConfigError(f"k={k} exceeds the number of candidate sensors")
    sc_design = sc_reference_design(base.problem, k, seed=derive_seed(cfg["seed"], "gap-study", "sc-reference"))
    sc_ref = sc_criterion_selected(base.problem, sc_design).value
    for alpha in opts["alphas"]:
        ts = time.perf_counter()
        model = build_model(cfg, alpha=alpha)
        problem = model.problem
        ev = DesignEvaluator(problem)
        seed = derive_seed(cfg["seed"], "gap-study", "raf")
        res = raf_select(problem, k, seed, opts["oversampling"], evaluator=ev, bound=False)
        wc, sc, upper = ev.value(res.design), ev.sc_value(res.design), ev.gap_upper(res.design)
        rows.append({"alpha": alpha, "design": " ".join(map(str, res.design.indices)), "wc_value": wc,
                     "sc_value": sc, "gap": wc - sc, "gap_upper": upper,
                     "sandwich_ok": bool(-1e-8 <= wc - sc <= upper + 1e-8 * max(1.0, abs(upper)))})
        timings[f"alpha={alpha}"] = time.perf_counter() - ts
    outputs = {"sc_reference": {"design": list(sc_design.indices), "value": sc_ref}, "study": rows,
               "terminal_rel_diff": abs(rows[-1]["sc_value"] - sc_ref) / abs(sc_ref)}
    timings["total"] = time.perf_counter() - t0
    return CommandOutput(_record("gap-study", cfg, base, outputs), {"gap_study": rows}, {}, timings)


COMMANDS = {
    "estimate-eig": cmd_estimate_eig,
    "place-sensors": cmd_place_sensors,
    "assimilate": cmd_assimilate,
    "gap-study": cmd_gap_study,
}
