"""End-to-end pipelines: data generation, training, OUU solves,
ground-truth evaluation, and cost-accuracy comparison.

Every command is deterministic given (config, seed): all sampling goes
through index-keyed substreams and reductions run in index order, so
thread counts change nothing but wall time. Wall-clock timings are
reported separately from the deterministic payload and never enter the
output files' byte content.
"""

import csv
import dataclasses
import json
import os
import time

import numpy as np

from . import fileio, rng
from .config import ExperimentConfig
from .fem import assemble_mass, build_mesh, factorize, weighted_inner
from .forward import (SemilinearProblem, StateSolution, build_source_basis,
                      reduced_control_jacobian, solve_state)
from .pod import PODBasis, build_tracking_form, compute_pod
from .randfield import KLEBasis, MaternSpec, build_kle, sample_field
from .riskopt import (PDEEvaluator, RiskSpec, SAAProblem, SurrogateEvaluator,
                      TrackingTarget, mc_cvar, mc_var, minimize, q_tracking)
from .surrogate import NetworkSpec, TrainConfig, TrainingDataset, train
from .util import atomic_write_bytes, canonical_json, hash_of, parallel_map


class ProvenanceError(Exception):
    """Cross-file hashes or dimensions do not line up."""


@dataclasses.dataclass
class Workspace:
    config: ExperimentConfig
    mesh: object
    mass: object                # lumped mass, the default M everywhere
    kle: KLEBasis
    problem: SemilinearProblem
    u_target: np.ndarray

    @property
    def tracking(self) -> TrackingTarget:
        return TrackingTarget(u_target=self.u_target, M=self.mass)


def build_workspace(cfg: ExperimentConfig) -> Workspace:
    cfg.validate()
    mesh = build_mesh(cfg.mesh.nx, cfg.mesh.ny)
    mass = assemble_mass(mesh, lumped=True)
    kle = build_kle(mesh, MaternSpec(cfg.matern.gamma, cfg.matern.delta,
                                     cfg.matern.mean), rank=cfg.ranks.r_m)
    sources = build_source_basis(mesh, cfg.sources.grid, cfg.sources.sigma)
    prob = SemilinearProblem(mesh=mesh, reaction=cfg.reaction, sources=sources,
                             mass_lumped=mass)
    return Workspace(config=cfg, mesh=mesh, mass=mass, kle=kle, problem=prob,
                     u_target=cfg.target_values(mesh))


def draw_control(cfg: ExperimentConfig, seed: int, index: int) -> np.ndarray:
    g = rng.substream(seed, rng.STREAM_DATA_CONTROL, index)
    return g.uniform(cfg.bounds.lo, cfg.bounds.hi, size=cfg.d_z)


def _write_json(path: str, payload: dict) -> None:
    atomic_write_bytes(path, (canonical_json(payload) + "\n").encode("utf-8"))


def _load_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _stem(path: str) -> str:
    base, ext = os.path.splitext(path)
    return base if ext else path


# ---------------------------------------------------------------------------
# data generation


def cmd_gen_data(cfg: ExperimentConfig, n: int = None, with_jacobian: bool = True,
                 seed: int = None, out: str = "train.bin", threads: int = 1,
                 workspace: Workspace = None, basis_from: str = None) -> dict:
    """Sample (m, z), solve states, build bases, project, write the dataset.

    Records are written in index order whatever the completion order.
    With `basis_from` (an existing dataset path) the records are projected
    onto that dataset's bases instead of a freshly computed POD, which is
    how test sets are kept comparable to a model trained elsewhere.
    Returns a report with file hashes and phase timings.
    """
    ws = workspace or build_workspace(cfg)
    n = cfg.saa.n_train if n is None else int(n)
    seed = cfg.seed if seed is None else int(seed)
    prob, kle, mass = ws.problem, ws.kle, ws.mass

    t_wall = time.perf_counter()
    state_time = np.zeros(n)
    newton_iters = np.zeros(n, dtype=int)

    def solve_one(i):
        m = sample_field(kle, seed, i, rng.STREAM_DATA_FIELD)
        z = draw_control(cfg, seed, i)
        t0 = time.perf_counter()
        state = solve_state(prob, m, z)
        dt = time.perf_counter() - t0
        return m, z, state.u, state.iterations, dt

    failures = []
    results = [None] * n

    def guarded(i):
        try:
            results[i] = solve_one(i)
        except Exception as exc:  # noqa: BLE001 - report and abort below
            failures.append((i, repr(exc)))

    parallel_map(guarded, n, threads)
    if failures:
        failed = sorted(i for i, _ in failures)
        raise RuntimeError(
            f"state solves failed at indices {failed}: {failures[0][1]} "
            "(rerun with a different seed)"
        )

    states = np.vstack([r[2] for r in results])
    for i, r in enumerate(results):
        newton_iters[i] = r[3]
        state_time[i] = r[4]

    if basis_from is not None:
        source = fileio.load_dataset(basis_from)
        base_dir = os.path.dirname(os.path.abspath(basis_from))
        ids = source.metadata["basis_ids"]
        pod_data = fileio.load_basis(os.path.join(base_dir, ids["pod"]["file"]))
        pod = PODBasis(rank=pod_data["header"]["rank"], modes=pod_data["modes"],
                       bias=pod_data["bias"], eigvals=pod_data["eigvals"],
                       n_snapshots=pod_data["header"]["extra"].get("n_snapshots", 0),
                       mass=mass)
        if pod.d != ws.mesh.d:
            raise ProvenanceError("borrowed basis does not match the config mesh")
        kle_data = fileio.load_basis(os.path.join(base_dir, ids["kle"]["file"]))
        kle_mean = kle_data["header"]["extra"]["mean_value"]
        proj = kle_data["modes"].T @ mass
        encode = lambda v: proj @ (v - kle_mean)
    else:
        n_pod = min(cfg.ranks.n_pod, n)
        pod_rank = min(cfg.ranks.r_u, n_pod)
        pod = compute_pod(states[:n_pod], mass, rank=pod_rank)
        encode = kle.encode

    m_r = np.vstack([encode(r[0].values) for r in results])
    z_mat = np.vstack([r[1] for r in results])
    u_r = np.vstack([pod.project(u) for u in states])
    state_norm_sq = np.array([weighted_inner(u, u, mass) for u in states])
    trunc = states - np.array([pod.lift(phi) for phi in u_r])
    trunc_norm_sq = np.array([weighted_inner(e, e, mass) for e in trunc])

    jac_time = np.zeros(n)
    j_r = None
    if with_jacobian:
        j_r = np.empty((n, pod.rank, cfg.d_z))

        def jac_one(i):
            m, _, u = results[i][0], results[i][1], results[i][2]
            t0 = time.perf_counter()
            A_bc = prob.stiffness_bc(m.values)
            factors = factorize(prob.jacobian(A_bc, u))
            shim = StateSolution(u=u, residual_norm=0.0, iterations=0,
                                 factors=factors)
            j_r[i] = reduced_control_jacobian(prob, shim, pod.modes, mass).J_r
            jac_time[i] = time.perf_counter() - t0

        parallel_map(jac_one, n, threads)

    ds = TrainingDataset(
        m_r=m_r, z=z_mat, u_r=u_r, j_r=j_r,
        state_norm_sq=state_norm_sq, trunc_norm_sq=trunc_norm_sq,
    )

    stem = _stem(out)
    pod_path, kle_path = stem + ".pod.bin", stem + ".kle.bin"
    pod_hash = fileio.save_basis(
        pod_path, "pod", pod.rank, pod.eigvals, pod.modes, bias=pod.bias,
        extra={"n_snapshots": pod.n_snapshots, "spectrum": "empirical_1_over_n"},
    )
    if basis_from is not None:
        kle_hash = fileio.save_basis(
            kle_path, "kle", kle_data["header"]["rank"], kle_data["eigvals"],
            kle_data["modes"], extra=kle_data["header"]["extra"],
        )
    else:
        kle_hash = fileio.save_basis(
            kle_path, "kle", kle.rank, kle.eigvals, kle.modes,
            extra={"mean_value": kle.mean_value, "gamma": cfg.matern.gamma,
                   "delta": cfg.matern.delta},
        )
    basis_ids = {
        "pod": {"file": os.path.basename(pod_path), "sha256": pod_hash},
        "kle": {"file": os.path.basename(kle_path), "sha256": kle_hash},
    }
    seeds = {"seed": seed, "stream_field": rng.STREAM_DATA_FIELD,
             "stream_control": rng.STREAM_DATA_CONTROL}
    ds_hash = fileio.save_dataset(out, ds, seeds=seeds,
                                  config_hash=cfg.hash(), basis_ids=basis_ids)

    return {
        "kind": "gen_report",
        "path": out,
        "n": n,
        "seed": seed,
        "with_jacobian": bool(with_jacobian),
        "dataset_sha256": ds_hash,
        "basis_ids": basis_ids,
        "pod_rank": pod.rank,
        "newton_iterations_mean": float(newton_iters.mean()),
        "timings": {
            "wall_s": time.perf_counter() - t_wall,
            "state_solve_s": float(state_time.sum()),
            "jacobian_s": float(jac_time.sum()),
        },
    }


def cmd_build_basis(cfg: ExperimentConfig, n: int = None, seed: int = None,
                    out: str = "basis", threads: int = 1,
                    workspace: Workspace = None) -> dict:
    """Solve snapshot states and persist the POD and KLE basis files."""
    ws = workspace or build_workspace(cfg)
    n = cfg.ranks.n_pod if n is None else int(n)
    seed = cfg.seed if seed is None else int(seed)

    def solve_one(i):
        m = sample_field(ws.kle, seed, i, rng.STREAM_DATA_FIELD)
        z = draw_control(cfg, seed, i)
        return solve_state(ws.problem, m, z).u

    states = np.vstack(parallel_map(solve_one, n, threads))
    pod = compute_pod(states, ws.mass, rank=min(cfg.ranks.r_u, n))
    pod_path, kle_path = out + ".pod.bin", out + ".kle.bin"
    pod_hash = fileio.save_basis(pod_path, "pod", pod.rank, pod.eigvals,
                                 pod.modes, bias=pod.bias,
                                 extra={"n_snapshots": pod.n_snapshots})
    kle_hash = fileio.save_basis(kle_path, "kle", ws.kle.rank, ws.kle.eigvals,
                                 ws.kle.modes,
                                 extra={"mean_value": ws.kle.mean_value})
    return {"kind": "basis_report", "pod": {"file": pod_path, "sha256": pod_hash},
            "kle": {"file": kle_path, "sha256": kle_hash},
            "n_snapshots": n, "seed": seed}


# ---------------------------------------------------------------------------
# training


def cmd_train(cfg: ExperimentConfig, data_path: str, jacobian_weight: float = None,
              seed: int = None, out: str = "model.bin") -> dict:
    """Train on a dataset file and persist the model plus a loss CSV."""
    ds = fileio.load_dataset(data_path)
    header = ds.metadata
    if header["config_hash"] != cfg.hash():
        raise ProvenanceError("dataset was generated from a different config")
    if header["d_Z"] != cfg.d_z:
        raise ProvenanceError("dataset control dimension does not match config")

    lam = cfg.training.jacobian_weight if jacobian_weight is None else float(jacobian_weight)
    if lam > 0 and not ds.has_jacobian:
        raise ProvenanceError("jacobian-informed training needs a dataset "
                              "generated with --jacobian")
    seed = cfg.seed if seed is None else int(seed)

    kle_file = os.path.join(os.path.dirname(os.path.abspath(data_path)),
                            header["basis_ids"]["kle"]["file"])
    kle_data = fileio.load_basis(kle_file)
    whitening = 1.0 / np.sqrt(kle_data["eigvals"][: header["r_M"]])

    spec = NetworkSpec(r_m=header["r_M"], d_z=header["d_Z"], r_u=header["r_U"],
                       hidden=tuple(cfg.network.hidden),
                       activation=cfg.network.activation)
    tc = TrainConfig(
        epochs=cfg.training.epochs, batch_size=cfg.training.batch_size,
        lr=cfg.training.lr, lr_drop_factor=cfg.training.lr_drop_factor,
        lr_drop_epoch=cfg.training.lr_drop_epoch,
        jacobian_weight=lam, seed=seed,
    )
    t0 = time.perf_counter()
    model, history = train(ds, spec, tc, input_whitening=whitening)
    train_s = time.perf_counter() - t0

    method = "MR-DINO" if lam > 0 else "MR-NO"
    ds_hash = fileio.dataset_file_hash(data_path)
    model_hash = fileio.save_model(
        out, model, train_config=dataclasses.asdict(tc), dataset_hash=ds_hash,
        method=method, n_train=ds.n, basis_ids=header["basis_ids"],
    )
    loss_csv = _stem(out) + ".loss.csv"
    lines = ["epoch,loss\n"] + [f"{e},{v!r}\n" for e, v in enumerate(history)]
    atomic_write_bytes(loss_csv, "".join(lines).encode("utf-8"))

    return {
        "kind": "train_report", "path": out, "method": method,
        "model_sha256": model_hash, "dataset_sha256": ds_hash,
        "n_train": ds.n, "jacobian_weight": lam, "seed": seed,
        "final_loss": history[-1], "loss_csv": loss_csv,
        "timings": {"train_s": train_s},
    }


# ---------------------------------------------------------------------------
# OUU solves


def _load_model_with_bases(model_path: str, ws: Workspace):
    model, header = fileio.load_model(model_path)
    base_dir = os.path.dirname(os.path.abspath(model_path))
    ids = header["basis_ids"]
    pod_data = fileio.load_basis(os.path.join(base_dir, ids["pod"]["file"]))
    pod = PODBasis(
        rank=pod_data["header"]["rank"], modes=pod_data["modes"],
        bias=pod_data["bias"], eigvals=pod_data["eigvals"],
        n_snapshots=pod_data["header"]["extra"].get("n_snapshots", 0),
        mass=ws.mass,
    )
    if pod.d != ws.mesh.d:
        raise ProvenanceError("basis dimension does not match the config mesh")
    return model, header, pod


def cmd_solve_ouu(cfg: ExperimentConfig, model_path: str = None, pde: bool = False,
                  n: int = None, seed: int = None, out: str = "solve.json",
                  threads: int = 1, workspace: Workspace = None) -> dict:
    """Minimize the SAA risk with the surrogate or the PDE evaluator."""
    if pde == (model_path is not None):
        raise ValueError("choose exactly one of --model or --pde")
    ws = workspace or build_workspace(cfg)
    seed = cfg.seed if seed is None else int(seed)
    risk = RiskSpec(kind=cfg.risk.kind, beta=cfg.risk.beta, eps=cfg.risk.eps)

    t_wall = time.perf_counter()
    construction = {"state_solves": 0}
    if pde:
        n = cfg.saa.n_ref if n is None else int(n)
        samples = [sample_field(ws.kle, seed, i, rng.STREAM_OPT_FIELD)
                   for i in range(n)]
        evaluator = PDEEvaluator(ws.problem, samples, ws.tracking,
                                 threads=threads)
        method = "pde-saa"
    else:
        n = cfg.saa.n_optimize if n is None else int(n)
        model, mheader, pod = _load_model_with_bases(model_path, ws)
        form = build_tracking_form(pod, ws.u_target)
        m_r = np.vstack([
            ws.kle.encode(sample_field(ws.kle, seed, i, rng.STREAM_OPT_FIELD).values)
            for i in range(n)
        ])
        if m_r.shape[1] != model.spec.r_m:
            raise ProvenanceError("model input rank does not match the KLE basis")
        evaluator = SurrogateEvaluator(model, m_r, form)
        method = mheader["method"].lower()
        construction = {
            "state_solves": mheader["n_train"],
            "model_method": mheader["method"],
            "model_file": os.path.basename(model_path),
            "dataset_hash": mheader["dataset_hash"],
        }

    d_z = cfg.d_z
    prob = SAAProblem(
        evaluator=evaluator,
        bounds_lo=np.full(d_z, cfg.bounds.lo),
        bounds_hi=np.full(d_z, cfg.bounds.hi),
        risk=risk,
    )
    result = minimize(prob, np.zeros(d_z))

    report = {
        "kind": "solve_report", "version": 1,
        "config_hash": cfg.hash(), "method": method,
        "n_saa": n, "seed": seed,
        "risk": dataclasses.asdict(risk),
        "z_star": result.z_star.tolist(),
        "t_star": result.t_star,
        "objective": result.objective,
        "iterations": result.iterations,
        "converged": result.converged,
        "iteration_cap_hit": (not result.converged) and (not result.line_search_failed),
        "line_search_failed": result.line_search_failed,
        "counts": result.evaluator_counts,
        "construction": construction,
        "timings": {"wall_s": time.perf_counter() - t_wall},
    }
    if out:
        _write_json(out, report)
    return report


# ---------------------------------------------------------------------------
# ground-truth evaluation


def evaluate_values(cfg: ExperimentConfig, ws: Workspace, z: np.ndarray,
                    n_eval: int, seed: int, threads: int = 1) -> np.ndarray:
    """PDE performance values at z over the evaluation sample stream."""
    target = ws.tracking

    def one(i):
        m = sample_field(ws.kle, seed, i, rng.STREAM_EVAL_FIELD)
        state = solve_state(ws.problem, m, z)
        return q_tracking(state.u, target)[0]

    return np.array(parallel_map(one, n_eval, threads))


def cmd_evaluate(cfg: ExperimentConfig, solve_report_path: str, n_eval: int = None,
                 seed: int = None, out: str = "eval.json", threads: int = 1,
                 workspace: Workspace = None) -> dict:
    """Score a solve report's z* with the unsmoothed estimators on the PDE."""
    ws = workspace or build_workspace(cfg)
    n_eval = cfg.saa.n_eval if n_eval is None else int(n_eval)
    seed = cfg.seed if seed is None else int(seed)
    solve = _load_json(solve_report_path)
    if solve.get("config_hash") != cfg.hash():
        raise ProvenanceError("solve report was produced under a different config")
    z_star = np.asarray(solve["z_star"], dtype=float)

    t_wall = time.perf_counter()
    values = evaluate_values(cfg, ws, z_star, n_eval, seed, threads)
    beta = solve["risk"]["beta"]
    eval_set_id = hash_of({
        "config_hash": cfg.hash(), "seed": seed,
        "stream": rng.STREAM_EVAL_FIELD, "n_eval": n_eval,
    })
    solve_no_timing = {k: v for k, v in solve.items() if k != "timings"}
    report = {
        "kind": "eval_report", "version": 1,
        "eval_set_id": eval_set_id,
        "eval": {
            "seed": seed, "n_eval": n_eval, "beta": beta,
            "cvar": mc_cvar(values, beta),
            "var": mc_var(values, beta),
            "mean": float(values.mean()),
            "std": float(values.std()),
        },
        "solve": solve_no_timing,
        "timings": {"wall_s": time.perf_counter() - t_wall},
    }
    if out:
        _write_json(out, report)
    return report


# ---------------------------------------------------------------------------
# comparison table


def _report_label(solve: dict) -> str:
    method = solve["method"]
    if method == "pde-saa":
        return f"pde-saa@{solve['n_saa']}"
    return f"{method}@{solve['construction']['state_solves']}"


def _report_cost(report: dict) -> float:
    solve = report["solve"]
    if solve["method"] == "pde-saa":
        return float(solve["counts"]["state_solves"])
    return float(solve["construction"]["state_solves"])


def cmd_compare(report_paths: list, reference_path: str,
                out: str = "compare") -> dict:
    """Relative optimal cost error vs state solves, aggregated per label."""
    reference = _load_json(reference_path)
    reports = [_load_json(p) for p in report_paths]
    if reference_path not in report_paths:
        reports.append(reference)
    eval_ids = {r["eval_set_id"] for r in reports} | {reference["eval_set_id"]}
    if len(eval_ids) != 1:
        raise ProvenanceError(
            "all reports must be evaluated on the same evaluation sample set"
        )

    risk_kind = reference["solve"]["risk"]["kind"]
    key = "cvar" if risk_kind == "cvar" else "mean"
    j_ref = reference["eval"][key]
    if j_ref == 0:
        raise ValueError("reference optimal cost is zero; relative error undefined")

    runs = []
    for rep in reports:
        j = rep["eval"][key]
        runs.append({
            "label": _report_label(rep["solve"]),
            "seed": rep["solve"]["seed"],
            "state_solves": _report_cost(rep),
            "cost": j,
            "rel_cost_error": abs(j - j_ref) / abs(j_ref),
        })

    by_label = {}
    for run in runs:
        by_label.setdefault(run["label"], []).append(run)
    rows = []
    for label in sorted(by_label):
        group = by_label[label]
        errs = np.array([g["rel_cost_error"] for g in group])
        rows.append({
            "label": label,
            "n_runs": len(group),
            "state_solves": float(np.mean([g["state_solves"] for g in group])),
            "rel_cost_error_mean": float(errs.mean()),
            "rel_cost_error_std": float(errs.std()),
        })

    summary = {
        "kind": "compare_report",
        "reference": _report_label(reference["solve"]),
        "reference_cost": j_ref,
        "risk": reference["solve"]["risk"],
        "rows": rows,
        "runs": runs,
    }
    if out:
        _write_json(out + ".json", summary)
        for name, items, cols in (
            (out + ".csv", rows,
             ["label", "n_runs", "state_solves", "rel_cost_error_mean",
              "rel_cost_error_std"]),
            (out + ".runs.csv", runs,
             ["label", "seed", "state_solves", "cost", "rel_cost_error"]),
        ):
            buf = [",".join(cols) + "\n"]
            for item in items:
                buf.append(",".join(repr(item[c]) if isinstance(item[c], float)
                                    else str(item[c]) for c in cols) + "\n")
            atomic_write_bytes(name, "".join(buf).encode("utf-8"))
    return summary
