"""Scenario validation, orchestration and output files.

Exit codes (stable):

====  =====================================================
0     converged
1     configuration or other error
2     blow-up detected
3     not converged (time or step limit, step-size underflow,
      solver failure)
4     infeasible constraint
5     a hypothesis of the selected theorem is violated (run
      refused; pass ``force`` to run anyway)
====  =====================================================
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import flow as fl
from .checkpoint import save_checkpoint
from .config import ScenarioConfig, build_problem, config_hash, serialize_config
from .diagnostics import (
    DiagnosticsSeries,
    detect_concentration,
    distance_to_final,
    fit_rate,
    series_lojasiewicz,
)
from .geometry import SPHERE, GridField, dilation
from .operators import energy, gjms_multiplier, threshold
from .stationary import SolverError, direct_minimize, hessian_coercivity, newton_refine, residual

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_BLOWUP = 2
EXIT_NOT_CONVERGED = 3
EXIT_INFEASIBLE = 4
EXIT_INVALID = 5

SUMMARY_SCHEMA = "qflow-summary/1"

SATISFIED = "satisfied"
VIOLATED = "violated"
NON_CHECKABLE = "non-checkable"


# --------------------------------------------------------------------------
# validation

@dataclass
class Hypothesis:
    name: str
    status: str
    detail: str = ""


@dataclass
class ValidationReport:
    theorem: str
    regime: str
    k_n: float
    threshold: float
    hypotheses: list = field(default_factory=list)
    ok: bool = True
    warnings: list = field(default_factory=list)

    def add(self, name, ok, detail=""):
        status = NON_CHECKABLE if ok is None else (SATISFIED if ok else VIOLATED)
        self.hypotheses.append(Hypothesis(name, status, detail))
        return ok

    def status(self, name) -> str:
        for h in self.hypotheses:
            if h.name == name:
                return h.status
        raise KeyError(name)

    def to_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        lines = [f"theorem: {self.theorem}", f"regime: {self.regime}",
                 f"k_n = {self.k_n!r}", f"threshold = {self.threshold!r}"]
        for h in self.hypotheses:
            lines.append(f"  [{h.status}] {h.name}" + (f"  ({h.detail})" if h.detail else ""))
        for w in self.warnings:
            lines.append(f"  warning: {w}")
        lines.append("overall: " + ("ok" if self.ok else "hypotheses violated"))
        return "\n".join(lines)


THEOREM_FOR_CASE = {
    "case-i": "subcritical flow convergence",
    "case-ii": "subcritical flow convergence",
    "case-iii": "subcritical flow convergence",
    "sphere-critical": "symmetric flow on the sphere",
    "gexu": "variational existence for k_n = 0",
}


def _pole_values(cfg: ScenarioConfig):
    """Exact values of a zonal f spec at x = 1 and x = -1."""
    north = cfg.f.constant + sum(a for _, a in cfg.f.poly)
    south = cfg.f.constant + sum(a * (-1) ** p for p, a in cfg.f.poly)
    return north, south


def _sign(k):
    return (k > 0) - (k < 0)


def validate_scenario(cfg: ScenarioConfig, seed: int | None = None) -> ValidationReport:
    """Evaluate each hypothesis of the theorem that the case tag selects."""
    prob = build_problem(cfg, seed)
    geom, bg = prob.geometry, prob.background
    n = geom.n
    k = bg.k_n
    thr = threshold(n)
    f = bg.f.values
    fmax, fmin = float(f.max()), float(f.min())
    if k == 0:
        regime = "k_n = 0"
    elif k < 0:
        regime = "k_n < 0"
    elif math.isclose(k, thr, rel_tol=1e-12):
        regime = "critical (k_n = (n-1)! omega_n)"
    elif k < thr:
        regime = "subcritical, k_n > 0"
    else:
        regime = "supercritical"
    rep = ValidationReport(THEOREM_FOR_CASE[cfg.case], regime, k, thr)
    expected = {"case-i": 1, "case-ii": 0, "case-iii": -1, "gexu": 0}
    tag_ok = True
    if cfg.case in expected:
        tag_ok = rep.add("case tag matches the sign of k_n", _sign(k) == expected[cfg.case],
                         f"case {cfg.case}, k_n = {k!r}")
    mu = gjms_multiplier(geom).mu.ravel()
    p0_ok = bool(mu[0] == 0.0 and np.all(mu[1:] > 0))

    try:
        u0 = fl.project_constraint(prob.u0, bg)
        y_ok, y_detail = True, "reached by a shift along f"
    except fl.InfeasibleConstraint as exc:
        u0, y_ok, y_detail = None, False, str(exc)

    if cfg.case in ("case-i", "case-ii", "case-iii"):
        ok = [tag_ok]
        ok.append(rep.add("P0 positive with kernel = constants", p0_ok))
        ok.append(rep.add("k_n < (n-1)! omega_n", k < thr, f"{k!r} vs {thr!r}"))
        ok.append(rep.add("u0 in Y", y_ok, y_detail))
        if k > 0:
            ok.append(rep.add("sup f > 0", fmax > 0, f"sup f = {fmax!r}"))
        elif k == 0:
            ok.append(rep.add("sup f > 0", fmax > 0, f"sup f = {fmax!r}"))
            ok.append(rep.add("inf f < 0", fmin < 0, f"inf f = {fmin!r}"))
            if geom.quad(f) == 0:
                rep.warnings.append("int f = 0: lambda_inf may vanish")
        else:
            ok.append(rep.add("inf f < 0", fmin < 0, f"inf f = {fmin!r}"))
            rep.add("sup f <= C0", None, f"sup f = {fmax!r}; C0 is not computable")
            if fmax <= 0:
                rep.warnings.append("f <= 0 with k_n < 0: exponential convergence expected")
        rep.ok = all(ok)
    elif cfg.case == "sphere-critical":
        ok = [rep.add("f invariant under rotations about the axis", True, "zonal by construction")]
        ok.append(rep.add("sup f > 0", fmax > 0, f"sup f = {fmax!r}"))
        ok.append(rep.add("u0 in Y and axially invariant", y_ok, y_detail))
        a_ok = rep.add("Sigma empty", False, "rotations about the axis fix both poles")
        north, south = _pole_values(cfg)
        sup_sigma = max(north, south)
        if u0 is not None:
            bound = math.factorial(n - 1) * math.exp(-energy(u0, bg) / thr)
            b_ok = rep.add("sup_Sigma f <= (n-1)! exp(-E[u0] / ((n-1)! omega_n))", sup_sigma <= bound,
                           f"sup_Sigma f = {sup_sigma!r}, bound = {bound!r}")
        else:
            b_ok = rep.add("sup_Sigma f <= (n-1)! exp(-E[u0] / ((n-1)! omega_n))", False, "u0 not in Y")
        avg = _dilated_average(cfg, geom, bg)
        c_ok = sup_sigma <= max(avg, 0.0)
        rep.add(f"sup_Sigma f <= max(avg f o phi_(y0,r0), 0) [existence only; y0 = {cfg.validation_pole}, "
                f"r0 = {cfg.validation_r0!r}]", c_ok, f"average = {avg!r}")
        if not (a_ok or b_ok):
            rep.warnings.append(
                f"the pole bound fails (sup_Sigma f = {sup_sigma!r}); the flow may concentrate")
        rep.ok = all(ok) and (a_ok or b_ok)
    else:
        ok = [tag_ok]
        ok.append(rep.add("P0 positive with kernel = constants", p0_ok))
        ok.append(rep.add("Q0 = 0 (so k_n = 0)", bool(np.all(bg.Q0.values == 0.0))))
        ok.append(rep.add("int f < 0", geom.quad(f) < 0, f"int f = {geom.quad(f)!r}"))
        ok.append(rep.add("constraint set nonempty (f changes sign)", fmax > 0 > fmin))
        rep.ok = all(ok)
    return rep


def _dilated_average(cfg, geom, bg, resolution=None):
    """``(1/omega_n) int f o phi_{y0,r0}`` using the spectral interpolant of f."""
    if cfg.validation_r0 == 1.0:
        return geom.quad(bg.f.values) / geom.volume
    phi = dilation(geom, cfg.validation_pole, cfg.validation_r0)
    from .geometry import compose

    return geom.quad(compose(bg.f, phi).values) / geom.volume


# --------------------------------------------------------------------------
# running

@dataclass
class RunRecord:
    config: ScenarioConfig
    exit_code: int
    status: str
    summary: dict
    series: DiagnosticsSeries | None = None
    state: fl.FlowState | None = None
    validation: ValidationReport | None = None
    solution: GridField | None = None


def _clean(obj):
    """JSON-safe copy: NaN/inf become None, numpy scalars become floats."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def run_scenario(cfg: ScenarioConfig, out_dir=None, force: bool = False, seed: int | None = None,
                 resume_state: fl.FlowState | None = None, write: bool = True) -> RunRecord:
    """Validate, run the configured pipeline and (optionally) write outputs."""
    out_dir = out_dir or cfg.output_dir or os.path.join(os.environ.get("QFLOW_OUT", "qflow-out"), cfg.name)
    report = validate_scenario(cfg, seed)
    prob = build_problem(cfg, seed)
    geom, bg = prob.geometry, prob.background
    summary = {
        "schema": SUMMARY_SCHEMA,
        "name": cfg.name,
        "case": cfg.case,
        "pipeline": cfg.pipeline,
        "geometry": geom.descriptor(),
        "synthetic_q0": bg.synthetic,
        "config_hash": config_hash(cfg),
        "k_n": bg.k_n,
        "threshold": threshold(geom.n),
        "validation": report.to_dict(),
    }
    if not report.ok and not force:
        summary.update(status="refused", exit_code=EXIT_INVALID)
        rec = RunRecord(cfg, EXIT_INVALID, "refused", summary, validation=report)
        if write:
            emit_outputs(rec, out_dir)
        return rec

    code, status = EXIT_OK, "converged"
    state = series = solution = None
    if cfg.pipeline in ("flow", "both"):
        code, status, state, series = _run_flow_pipeline(cfg, prob, summary, resume_state)
    if cfg.pipeline in ("gexu", "both"):
        c2, s2, solution = _run_minimizer(cfg, prob, summary, state)
        if code == EXIT_OK:
            code, status = c2, s2
    summary["status"] = status
    summary["exit_code"] = code
    rec = RunRecord(cfg, code, status, summary, series, state, report, solution)
    if write:
        emit_outputs(rec, out_dir)
    return rec


def _run_flow_pipeline(cfg, prob, summary, resume_state):
    geom, bg = prob.geometry, prob.background
    fcfg = cfg.flow
    if cfg.rate_fit and not fcfg.keep_states:
        fcfg = replace(fcfg, keep_states=True)
    concentration = None
    try:
        state, series = fl.run_flow(prob.u0, bg, fcfg, state=resume_state)
        reason = series.stop_reason
        if reason in ("f2", "stationary"):
            code, status = EXIT_OK, "converged"
        else:
            code, status = EXIT_NOT_CONVERGED, f"not converged ({reason} limit)"
    except fl.BlowUpDetected as exc:
        state, series = exc.state, exc.series
        code, status = EXIT_BLOWUP, "blow-up"
        concentration = exc.concentration
        summary["blow_up"] = str(exc)
    except fl.InfeasibleConstraint as exc:
        summary["error"] = str(exc)
        return EXIT_INFEASIBLE, "infeasible constraint", None, None
    except fl.StepSizeUnderflow as exc:
        summary["error"] = str(exc)
        return EXIT_NOT_CONVERGED, "not converged (step size underflow)", None, None

    last = series.last()
    k = bg.k_n
    cons = np.abs(series["constraint"] - k)
    vol = series["volume"]
    summary.update(
        stop_reason=series.stop_reason,
        t_final=state.t,
        steps=state.steps,
        lambda_inf=last["lam"],
        final_F2=last["F2"],
        final_residual_Lg=math.sqrt(last["F2"]),
        stationary_residual=residual(state.u, state.lam, bg),
        max_constraint_error=float(cons.max()),
        constraint_tolerance=fcfg.projection_tol * max(1.0, abs(k)),
        volume_drift=float(np.max(np.abs(vol / vol[0] - 1.0))),
        max_sup_u=float(series["sup_u"].max()),
        max_h_half=float(series["h_half"].max()),
        max_tail=float(series["tail"].max()),
    )
    if geom.kind == SPHERE:
        summary["min_beckner_gap"] = float(series["beckner_gap"].min())
        if concentration is None:
            concentration = detect_concentration(state.grid())
    if concentration is not None:
        summary["concentration"] = concentration.to_dict()

    converged = code == EXIT_OK
    lam_ref, u_ref = state.lam, state.u
    if converged and cfg.newton:
        try:
            nr = newton_refine(state.u, state.lam, bg)
            summary["newton"] = {"lambda": nr.lam, "iterations": nr.iterations, "history": nr.history,
                                 "converged": nr.converged}
            lam_ref, u_ref = nr.lam, nr.u
        except SolverError as exc:
            summary["newton"] = {"error": str(exc)}
    if converged and cfg.rate_fit:
        try:
            t, d = distance_to_final(series.states)
            summary["rate_fit"] = asdict(fit_rate(t, d))
        except ValueError as exc:
            summary["rate_fit"] = {"error": str(exc)}
    if converged:
        try:
            summary["lojasiewicz"] = asdict(series_lojasiewicz(series))
        except ValueError as exc:
            summary["lojasiewicz"] = {"error": str(exc)}
    if converged and cfg.coercivity:
        cov = {}
        for conv in ("weighted", "literal"):
            try:
                r = hessian_coercivity(u_ref, lam_ref, bg, conv)
                cov[conv] = {"min_eigenvalue": r.min_eigenvalue, "min_eigenvalue_h": r.min_eigenvalue_h,
                             "basis_size": r.basis_size}
            except SolverError as exc:
                cov[conv] = {"error": str(exc)}
        summary["coercivity"] = cov
    return code, status, state, series


def _run_minimizer(cfg, prob, summary, flow_state):
    geom, bg = prob.geometry, prob.background
    try:
        u, mult = direct_minimize(bg, seed=cfg.seed)
    except fl.InfeasibleConstraint as exc:
        summary["direct_minimizer"] = {"error": str(exc)}
        return EXIT_INFEASIBLE, "infeasible constraint", None
    except SolverError as exc:
        summary["direct_minimizer"] = {"error": str(exc)}
        return EXIT_NOT_CONVERGED, "not converged (direct minimizer)", None
    n = geom.n
    v = geom.inverse(u.coeffs) + math.log(mult.beta) / n
    vfield = GridField(geom, v)
    info = {
        "alpha": mult.alpha,
        "beta": mult.beta,
        "beta_quotient": mult.beta_quotient,
        "multiplier_residual": mult.residual,
        "iterations": mult.iterations,
        "shifted_residual": residual(vfield, 1.0, bg),
    }
    if flow_state is not None and flow_state.lam > 0:
        w = flow_state.grid().values + math.log(flow_state.lam) / n
        info["flow_distance_l2"] = float(np.sqrt(geom.quad((v - w) ** 2)))
    summary["direct_minimizer"] = info
    return EXIT_OK, "converged", vfield


# --------------------------------------------------------------------------
# outputs

def emit_outputs(record: RunRecord, out_dir, formats=("csv", "json", "dat", "checkpoint")) -> dict:
    """Write the run's files into ``out_dir``; returns ``{kind: path}``."""
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory {out_dir!r} is not writable")
    paths = {}
    summary = record.summary
    solution = record.solution
    cfg_path = os.path.join(out_dir, "config.txt")
    with open(cfg_path, "w") as fh:
        fh.write(serialize_config(record.config))
    paths["config"] = cfg_path
    series = record.series
    if series is not None and "csv" in formats:
        p = os.path.join(out_dir, "diagnostics.csv")
        with open(p, "w") as fh:
            fh.write(series.to_csv())
        paths["csv"] = p
    if series is not None and "dat" in formats:
        t = series["t"]
        F2 = series["F2"]
        logF2 = np.where(F2 > 0, np.log(np.where(F2 > 0, F2, 1.0)), np.nan)
        for key, label, y in (("E", "E", series["E"]), ("logF2", "log(F2)", logF2), ("lambda", "lambda", series["lam"])):
            p = os.path.join(out_dir, f"t_vs_{key}.dat")
            with open(p, "w") as fh:
                fh.write(f"# t {label}\n")
                for a, b in zip(t, y):
                    fh.write(f"{a!r} {float(b)!r}\n")
            paths[f"dat_{key}"] = p
    if record.state is not None and "checkpoint" in formats:
        p = os.path.join(out_dir, "checkpoint.txt")
        save_checkpoint(record.state, p, config_hash(record.config))
        paths["checkpoint"] = p
    if solution is not None and "checkpoint" in formats:
        prob = build_problem(record.config)
        st = fl._finish(0.0, solution.geometry.forward(solution.values), prob.background, 0.0, 0, 0)
        p = os.path.join(out_dir, "minimizer_solution.txt")
        save_checkpoint(st, p, config_hash(record.config))
        paths["minimizer_solution"] = p
    if "json" in formats:
        p = os.path.join(out_dir, "summary.json")
        with open(p, "w") as fh:
            json.dump(_clean(summary), fh, indent=2)
            fh.write("\n")
        paths["json"] = p
    return paths
