"""Closed-loop scenarios over the lossy network, metrics and exports."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import cartpole as cp
from .geometry import Box, HPolytope
from .mpc import MpcConfig, TrackingMpc, Variant
from .network import SplitMix64, derive_seed, make_links
from .plant import LocalPlant
from .remote import RemoteController
from .synthesis import DEFAULT_LAMBDA, Synthesis, cached_synthesize, dare_gain

log = logging.getLogger(__name__)

TUBE_TOL = 1e-7
CONSTRAINT_TOL = 1e-7
HIST_BIN_MS = 0.5
CACHE_VERSION = 1
DEFAULT_RHOS = tuple(round(0.1 * i, 1) for i in range(10))


@dataclass
class ScenarioConfig:
    """Everything that defines a sweep; mirrors the YAML config schema."""

    variant: Variant = Variant.RT
    plant: str = "linear"
    rhos: list = field(default_factory=lambda: list(DEFAULT_RHOS))
    seeds: int = 20
    horizon: int = 500
    x_r: list = field(default_factory=lambda: [0.5, 0.0, 0.0, 0.0])
    x0: list = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    master_seed: int = 0
    out_dir: str | None = None
    params: dict = field(default_factory=lambda: cp.CartpoleParams().to_dict())
    state_bounds: list = field(default_factory=lambda: list(cp.STATE_BOUNDS))
    input_bound: float = cp.INPUT_BOUND
    Q: list = field(default_factory=lambda: list(cp.Q_DIAG))
    R: list = field(default_factory=lambda: list(cp.R_DIAG))
    T: list = field(default_factory=lambda: [1e4] * 4)
    N: int = 20
    lam: float = DEFAULT_LAMBDA
    loss: dict = field(default_factory=lambda: {"kind": "bernoulli"})
    disturbance: str = "reference"
    w_inflation: float = 1.05
    forced_init: bool = True
    cache_dir: str | None = None

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.plant not in ("linear", "nonlinear"):
            raise ValueError(f"plant must be 'linear' or 'nonlinear', got {self.plant!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.seeds < 1:
            raise ValueError("seeds must be at least 1")
        self.rhos = [float(r) for r in self.rhos]
        if any(not 0.0 <= r < 1.0 for r in self.rhos):
            raise ValueError("loss probabilities must lie in [0, 1)")
        if self.disturbance not in ("reference", "estimated"):
            raise ValueError("disturbance must be 'reference' or 'estimated'")

    @property
    def cartpole(self) -> cp.CartpoleParams:
        return cp.CartpoleParams(**self.params)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> ScenarioConfig:
    import yaml

    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return ScenarioConfig.from_dict(data)


@dataclass
class Suite:
    """Synthesis result plus the prepared controller shared by all runs."""

    cfg: ScenarioConfig
    synthesis: Synthesis
    mpc: TrackingMpc
    W_sim: Box


def disturbance_box(cfg: ScenarioConfig) -> Box:
    if cfg.disturbance == "reference":
        return cp.reference_disturbance_set()
    p = cfg.cartpole
    model = cp.discrete_model(p)
    K, _ = dare_gain(model.A, model.B, np.diag(cfg.Q), np.diag(cfg.R))
    est = cp.estimate_disturbance_set(p, K)
    return Box(est.box.center, est.box.half_widths * cfg.w_inflation)


def synthesis_key(cfg: ScenarioConfig) -> dict:
    return {"version": CACHE_VERSION, "params": cfg.params, "state_bounds": cfg.state_bounds,
            "input_bound": cfg.input_bound, "Q": cfg.Q, "R": cfg.R, "lam": cfg.lam,
            "disturbance": cfg.disturbance, "w_inflation": cfg.w_inflation,
            "tube": cfg.variant is not Variant.R}


def build_suite(cfg: ScenarioConfig) -> Suite:
    p = cfg.cartpole
    model = cp.discrete_model(p)
    W = disturbance_box(cfg)
    W_poly = W.to_polytope()
    X = HPolytope.symmetric_box(cfg.state_bounds)
    U = HPolytope.symmetric_box([cfg.input_bound])
    syn = cached_synthesize(cfg.cache_dir, synthesis_key(cfg), model=model, X=X, U=U, W=W_poly,
                            Q=np.diag(cfg.Q), R=np.diag(cfg.R), lam=cfg.lam,
                            tube=cfg.variant is not Variant.R)
    mcfg = MpcConfig(model, cfg.N, syn.Q, syn.R, np.diag(cfg.T), syn.gains.P, syn.gains,
                     syn.sets, cfg.variant, W_poly)
    return Suite(cfg, syn, TrackingMpc(mcfg), W)


@dataclass
class SimTrace:
    variant: str
    plant: str
    rho: float
    rep: int
    x_r: np.ndarray
    k: np.ndarray
    x: np.ndarray
    x_n: np.ndarray
    u: np.ndarray
    u_n: np.ndarray
    x_hat: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray
    Theta: np.ndarray
    s: np.ndarray
    q: np.ndarray
    status: list
    solve_ms: np.ndarray
    truncated: bool = False
    summary: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.k)

    @property
    def name(self) -> str:
        return f"{self.variant}_{self.plant}_rho{self.rho:.2f}_rep{self.rep:02d}"


def _plant_update(cfg: ScenarioConfig, suite: Suite, x, u, w_rng: SplitMix64) -> np.ndarray:
    if cfg.plant == "linear":
        m = suite.synthesis.model
        w = suite.W_sim.sample(w_rng.uniform_array(m.nx))
        return m.A @ x + m.B @ u + w
    return cp.plant_step(x, u, cfg.cartpole)


def run_single(suite: Suite, rho_index: int, rho: float, rep: int) -> SimTrace:
    """One closed-loop run; seeds depend on (master seed, rho index, rep) only."""
    cfg, syn = suite.cfg, suite.synthesis
    model = syn.model
    loss = dict(cfg.loss)
    loss.setdefault("rho", rho)
    if loss.get("kind", "bernoulli") == "bernoulli":
        loss["rho"] = rho
    theta_link, gamma_link = make_links(loss, cfg.master_seed, rho_index, rep)
    w_rng = SplitMix64(derive_seed(cfg.master_seed, rho_index, rep, "w"))
    x = np.array(cfg.x0, dtype=float)
    x_r = np.array(cfg.x_r, dtype=float)
    plant = LocalPlant(model, syn.gains.K, syn.gains.K_bar, cfg.variant, x)
    remote = RemoteController(suite.mpc, x_r, x)
    if not cfg.forced_init:
        remote.gamma_prev = 0

    rec = {key: [] for key in ("k", "x", "x_n", "u", "u_n", "x_hat", "theta", "gamma", "Theta",
                               "s", "q", "status", "solve_ms")}
    truncated = False
    for k in range(cfg.horizon):
        x_hat, q_k = remote.x_hat.copy(), remote.q
        sol, packet = remote.solve(k)
        theta = theta_link.transmit(k)
        if cfg.forced_init and k == 0:
            theta = 1
        step = plant.step(packet if theta else None, theta, k, x)
        gamma = gamma_link.transmit(k)
        remote.receive(plant.packet(x, k) if gamma else None, gamma, k)
        for key, val in (("k", k), ("x", x.copy()), ("x_n", step.x_n), ("u", step.u),
                         ("u_n", step.u_n), ("x_hat", x_hat), ("theta", theta),
                         ("gamma", gamma), ("Theta", step.Theta), ("s", step.s), ("q", q_k),
                         ("status", sol.status.name), ("solve_ms", sol.solve_ms)):
            rec[key].append(val)
        try:
            x = _plant_update(cfg, suite, x, step.u, w_rng)
        except FloatingPointError as exc:
            log.warning("run %s/%s truncated at k=%d: %s", rho, rep, k, exc)
            truncated = True
            break
        plant.advance_nominal(step.u_n)

    arr = {key: np.array(val) for key, val in rec.items() if key != "status"}
    trace = SimTrace(cfg.variant.value, cfg.plant, rho, rep, x_r, arr["k"].astype(int),
                     arr["x"], arr["x_n"], arr["u"], arr["u_n"], arr["x_hat"],
                     arr["theta"].astype(int), arr["gamma"].astype(int),
                     arr["Theta"].astype(int), arr["s"].astype(int), arr["q"].astype(int),
                     rec["status"], arr["solve_ms"], truncated)
    trace.summary = compute_metrics(trace, syn)
    return trace


def run_scenario(cfg: ScenarioConfig, suite: Suite | None = None) -> list[SimTrace]:
    suite = suite or build_suite(cfg)
    traces = []
    for i, rho in enumerate(cfg.rhos):
        for rep in range(cfg.seeds):
            traces.append(run_single(suite, i, rho, rep))
    if cfg.out_dir is not None:
        export(traces, cfg.out_dir, cfg)
    return traces


def average_tracking_error(x, x_r) -> float:
    """Mean of ``||x(k) - x_r||_2`` over all recorded steps."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return float(np.mean(np.linalg.norm(x - np.asarray(x_r, dtype=float), axis=1)))


def compute_metrics(trace: SimTrace, syn: Synthesis | None = None) -> dict:
    if len(trace) == 0:
        raise ValueError("empty trace")
    out = {"avg_tracking_error": average_tracking_error(trace.x, trace.x_r),
           "infeasible_steps": int(sum(st != "OPTIMAL" for st in trace.status)),
           "steps": len(trace), "truncated": trace.truncated}
    if syn is not None:
        X, U, Z = syn.X, syn.U, syn.sets.Z
        viol_x = np.max(trace.x @ X.H.T - X.h, axis=1)
        viol_u = np.max(trace.u @ U.H.T - U.h, axis=1)
        out["max_constraint_violation"] = float(max(0.0, viol_x.max(), viol_u.max()))
        out["constraint_violation_steps"] = int(np.sum((viol_x > CONSTRAINT_TOL) | (viol_u > CONSTRAINT_TOL)))
        err = trace.x - trace.x_n
        tube = np.max(err @ Z.H.T - Z.h, axis=1)
        out["tube_violations"] = int(np.sum(tube > TUBE_TOL))
    mask = trace.Theta == 1
    gap = np.abs(trace.x_hat[mask] - trace.x_n[mask]).max() if mask.any() else 0.0
    out["estimator_gap"] = float(gap)
    return out


# ---------------------------------------------------------------- export

CSV_COLUMNS = (["k"] + [f"x{i}" for i in range(4)] + [f"xn{i}" for i in range(4)] + ["u", "un"]
               + [f"xhat{i}" for i in range(4)] + ["theta", "gamma", "Theta", "s", "q", "status"])


def _fmt(v) -> str:
    return format(float(v), ".17g")


def write_trace_csv(trace: SimTrace, path) -> None:
    """Deterministic per-step CSV.  Wall-clock solve times go to a separate file."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i in range(len(trace)):
            w.writerow([int(trace.k[i]), *map(_fmt, trace.x[i]), *map(_fmt, trace.x_n[i]),
                        _fmt(trace.u[i][0]), _fmt(trace.u_n[i][0]), *map(_fmt, trace.x_hat[i]),
                        int(trace.theta[i]), int(trace.gamma[i]), int(trace.Theta[i]),
                        int(trace.s[i]), int(trace.q[i]), trace.status[i]])


def read_trace_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for col in CSV_COLUMNS:
        vals = [r[col] for r in rows]
        out[col] = np.array(vals) if col == "status" else np.array(vals, dtype=float)
    return out


def metrics_from_csv(path, x_r) -> float:
    data = read_trace_csv(path)
    x = np.column_stack([data[f"x{i}"] for i in range(4)])
    return average_tracking_error(x, x_r)


def quartiles(values) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {}
    q = np.percentile(v, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)))


def solve_time_histogram(times_ms, width: float = HIST_BIN_MS) -> dict:
    t = np.asarray(times_ms, dtype=float)
    t = t[np.isfinite(t)]
    if t.size == 0:
        return {"bin_width_ms": width, "edges": [], "counts": [], "n": 0}
    top = width * (np.floor(t.max() / width) + 1)
    edges = np.arange(0.0, top + 0.5 * width, width)
    counts, _ = np.histogram(t, bins=edges)
    return {"bin_width_ms": width, "edges": edges.tolist(), "counts": counts.tolist(),
            "n": int(t.size), "median_ms": float(np.median(t)),
            "q95_ms": float(np.quantile(t, 0.95))}


def sweep_summary(traces: list[SimTrace]) -> dict:
    per_rho: dict[str, dict] = {}
    for rho in sorted({t.rho for t in traces}):
        group = [t for t in traces if t.rho == rho]
        per_rho[f"{rho:.2f}"] = {
            "runs": len(group),
            "avg_tracking_error": quartiles([t.summary["avg_tracking_error"] for t in group]),
            "infeasible_runs": sum(t.summary["infeasible_steps"] > 0 for t in group),
            "infeasible_steps": sum(t.summary["infeasible_steps"] for t in group),
        }
    runs = [{"name": t.name, "rho": t.rho, "rep": t.rep, **t.summary} for t in traces]
    return {"per_rho": per_rho, "runs": runs}


def export(traces: list[SimTrace], out_dir, cfg: ScenarioConfig | None = None) -> Path:
    """Per-run CSVs, sweep summary JSON, timing files and the solve-time histogram."""
    out = Path(out_dir)
    try:
        (out / "runs").mkdir(parents=True, exist_ok=True)
        (out / "timing").mkdir(parents=True, exist_ok=True)
        for t in traces:
            write_trace_csv(t, out / "runs" / f"{t.name}.csv")
            np.savetxt(out / "timing" / f"{t.name}.txt", t.solve_ms, fmt="%.6f")
        summary = sweep_summary(traces) if traces else {}
        if cfg is not None and traces:
            summary["config"] = cfg.to_dict()
        _write_json(out / "summary.json", summary)
        times = np.concatenate([t.solve_ms for t in traces]) if traces else np.zeros(0)
        _write_json(out / "solve_time_histogram.json", solve_time_histogram(times))
    except OSError as exc:
        raise OSError(f"export to {out} failed: {exc}") from exc
    return out


def _write_json(path: Path, payload) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
