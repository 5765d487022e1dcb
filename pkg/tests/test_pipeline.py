import dataclasses
import json
import os

import numpy as np
import pytest

from ouukit.cli import main as cli_main
from ouukit.config import (ExperimentConfig, MeshConfig, NetworkConfig,
                           RankConfig, RiskConfig, SAAConfig, SourceConfig,
                           TrainingConfig)
from ouukit.fileio import load_dataset, load_model
from ouukit.fem import weighted_inner
from ouukit.pipeline import (ProvenanceError, build_workspace, cmd_build_basis,
                             cmd_compare, cmd_evaluate, cmd_gen_data,
                             cmd_solve_ouu, cmd_train)


def tiny_config(**overrides):
    cfg = ExperimentConfig(
        mesh=MeshConfig(nx=10, ny=10),
        sources=SourceConfig(grid=3, sigma=0.08),
        ranks=RankConfig(r_m=8, r_u=10, n_pod=16),
        network=NetworkConfig(hidden=(16, 16)),
        training=TrainingConfig(epochs=40, batch_size=8, lr_drop_epoch=20),
        risk=RiskConfig(kind="cvar", beta=0.5, eps=1e-3),
        saa=SAAConfig(n_train=16, n_optimize=12, n_eval=16, n_ref=6),
    )
    return dataclasses.replace(cfg, **overrides).validate()


@pytest.fixture(scope="module")
def tiny_ws():
    return build_workspace(tiny_config())


def file_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


class TestGenData:
    def test_smoke_small_dataset(self, tmp_path, tiny_ws):
        cfg = tiny_config()
        out = str(tmp_path / "train.bin")
        report = cmd_gen_data(cfg, n=4, with_jacobian=True, out=out,
                              workspace=tiny_ws)
        ds = load_dataset(out)
        assert ds.n == 4
        assert ds.has_jacobian
        # mean-centering 4 snapshots leaves at most rank 3
        assert ds.j_r.shape == (4, 3, 9)
        assert report["pod_rank"] == 3
        assert os.path.exists(str(tmp_path / "train.pod.bin"))
        assert os.path.exists(str(tmp_path / "train.kle.bin"))

    def test_byte_identical_rerun(self, tmp_path, tiny_ws):
        cfg = tiny_config()
        (tmp_path / "run1").mkdir()
        (tmp_path / "run2").mkdir()
        a, b = str(tmp_path / "run1" / "t.bin"), str(tmp_path / "run2" / "t.bin")
        r1 = cmd_gen_data(cfg, n=6, out=a, workspace=tiny_ws)
        r2 = cmd_gen_data(cfg, n=6, out=b, workspace=tiny_ws)
        assert r1["dataset_sha256"] == r2["dataset_sha256"]
        assert file_bytes(a) == file_bytes(b)

    def test_threads_change_nothing(self, tmp_path, tiny_ws):
        cfg = tiny_config()
        (tmp_path / "run1").mkdir()
        (tmp_path / "run2").mkdir()
        a, b = str(tmp_path / "run1" / "t.bin"), str(tmp_path / "run2" / "t.bin")
        r1 = cmd_gen_data(cfg, n=8, out=a, workspace=tiny_ws, threads=1)
        r2 = cmd_gen_data(cfg, n=8, out=b, workspace=tiny_ws, threads=4)
        assert r1["dataset_sha256"] == r2["dataset_sha256"]

    def test_jacobian_time_overhead_bounded(self, tmp_path):
        # jacобian data adds one factorization plus back substitutions on
        # top of the Newton solve, staying under the 1.6x envelope
        cfg = tiny_config(mesh=MeshConfig(nx=16, ny=16),
                          ranks=RankConfig(r_m=8, r_u=12, n_pod=24),
                          saa=SAAConfig(n_train=24, n_optimize=12,
                                        n_eval=16, n_ref=6))
        ws = build_workspace(cfg)
        out = str(tmp_path / "t.bin")
        rep = cmd_gen_data(cfg, n=24, with_jacobian=True, out=out, workspace=ws)
        state_s = rep["timings"]["state_solve_s"]
        jac_s = rep["timings"]["jacobian_s"]
        assert (state_s + jac_s) <= 1.6 * state_s

    def test_basis_from_projects_onto_existing_basis(self, tmp_path, tiny_ws):
        cfg = tiny_config()
        train_p = str(tmp_path / "train.bin")
        test_p = str(tmp_path / "test.bin")
        cmd_gen_data(cfg, n=8, out=train_p, workspace=tiny_ws)
        rep = cmd_gen_data(cfg, n=5, seed=99, out=test_p, workspace=tiny_ws,
                           basis_from=train_p)
        train_ds = load_dataset(train_p)
        test_ds = load_dataset(test_p)
        assert test_ds.u_r.shape[1] == train_ds.u_r.shape[1]
        # borrowed bases are re-saved verbatim: identical content hashes
        assert rep["basis_ids"]["pod"]["sha256"] == \
            train_ds.metadata["basis_ids"]["pod"]["sha256"]
        assert rep["basis_ids"]["kle"]["sha256"] == \
            train_ds.metadata["basis_ids"]["kle"]["sha256"]

    def test_projection_consistency(self, tmp_path, tiny_ws):
        # stored reduced coordinates and norms reproduce the full states
        cfg = tiny_config()
        out = str(tmp_path / "t.bin")
        cmd_gen_data(cfg, n=5, out=out, workspace=tiny_ws)
        ds = load_dataset(out)
        # truncation norms are nonnegative and bounded by the state norms
        assert np.all(ds.trunc_norm_sq >= -1e-14)
        assert np.all(ds.trunc_norm_sq <= ds.state_norm_sq + 1e-12)


class TestBuildBasis:
    def test_writes_both_bases(self, tmp_path, tiny_ws):
        rep = cmd_build_basis(tiny_config(), n=12, out=str(tmp_path / "b"),
                              workspace=tiny_ws)
        assert os.path.exists(rep["pod"]["file"])
        assert os.path.exists(rep["kle"]["file"])


@pytest.fixture(scope="module")
def data_path(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("train")
    cfg = tiny_config()
    out = str(tmp / "train.bin")
    cmd_gen_data(cfg, out=out, workspace=build_workspace(cfg))
    return out


class TestTrain:
    def test_method_tags(self, tmp_path, data_path):
        cfg = tiny_config()
        r0 = cmd_train(cfg, data_path, jacobian_weight=0.0,
                       out=str(tmp_path / "no.bin"))
        r1 = cmd_train(cfg, data_path, jacobian_weight=1.0,
                       out=str(tmp_path / "dino.bin"))
        assert r0["method"] == "MR-NO"
        assert r1["method"] == "MR-DINO"
        assert load_model(str(tmp_path / "no.bin"))[1]["method"] == "MR-NO"

    def test_retrain_same_seed_identical_hash(self, tmp_path, data_path):
        cfg = tiny_config()
        r1 = cmd_train(cfg, data_path, out=str(tmp_path / "m1.bin"), seed=5)
        r2 = cmd_train(cfg, data_path, out=str(tmp_path / "m2.bin"), seed=5)
        assert r1["model_sha256"] == r2["model_sha256"]

    def test_loss_csv_written(self, tmp_path, data_path):
        cfg = tiny_config()
        rep = cmd_train(cfg, data_path, out=str(tmp_path / "m.bin"))
        lines = open(rep["loss_csv"]).read().strip().splitlines()
        assert lines[0] == "epoch,loss"
        assert len(lines) == cfg.training.epochs + 1
        losses = [float(l.split(",")[1]) for l in lines[1:]]
        assert losses[-1] < losses[0]

    def test_config_mismatch_rejected(self, tmp_path, data_path):
        with pytest.raises(ProvenanceError):
            cmd_train(tiny_config(seed=999), data_path,
                      out=str(tmp_path / "m.bin"))


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = tiny_config()
    ws = build_workspace(cfg)
    data = str(tmp / "train.bin")
    cmd_gen_data(cfg, out=data, workspace=ws)
    model = str(tmp / "model.bin")
    cmd_train(cfg, data, jacobian_weight=1.0, out=model)
    return {"cfg": cfg, "ws": ws, "tmp": tmp, "data": data, "model": model}


class TestSolveAndEvaluate:
    def test_surrogate_solve(self, artifacts):
        out = str(artifacts["tmp"] / "s.json")
        rep = cmd_solve_ouu(artifacts["cfg"], model_path=artifacts["model"],
                            out=out, workspace=artifacts["ws"])
        assert rep["method"] == "mr-dino"
        assert rep["construction"]["state_solves"] == 16
        z = np.asarray(rep["z_star"])
        assert np.all(z >= -4.0) and np.all(z <= 4.0)
        assert rep["t_star"] is not None

    def test_pde_solve_accounting(self, artifacts):
        out = str(artifacts["tmp"] / "p.json")
        rep = cmd_solve_ouu(artifacts["cfg"], pde=True, n=4, out=out,
                            workspace=artifacts["ws"])
        counts = rep["counts"]
        # one batched evaluation per accepted step plus line-search trials
        # and the t0 quantile pass, each costing exactly N state solves
        assert counts["state_solves"] % 4 == 0
        assert counts["state_solves"] >= 4 * (rep["iterations"] + 1)
        assert counts["adjoint_solves"] <= counts["state_solves"]

    def test_solve_deterministic(self, artifacts):
        a = cmd_solve_ouu(artifacts["cfg"], model_path=artifacts["model"],
                          out=None, workspace=artifacts["ws"])
        b = cmd_solve_ouu(artifacts["cfg"], model_path=artifacts["model"],
                          out=None, workspace=artifacts["ws"])
        assert a["z_star"] == b["z_star"]
        assert a["objective"] == b["objective"]

    def test_model_xor_pde_required(self, artifacts):
        with pytest.raises(ValueError):
            cmd_solve_ouu(artifacts["cfg"], model_path=None, pde=False,
                          out=None, workspace=artifacts["ws"])

    def test_evaluate_zero_control_zero_variance(self, artifacts):
        # u(m, 0) = 0, so Q is ||u_target||_M^2 for every sample
        cfg, ws = artifacts["cfg"], artifacts["ws"]
        solve_rep = {
            "kind": "solve_report", "version": 1, "config_hash": cfg.hash(),
            "method": "pde-saa", "n_saa": 4, "seed": 0,
            "risk": dataclasses.asdict(RiskConfig(kind="cvar", beta=0.5,
                                                  eps=1e-3)),
            "z_star": [0.0] * 9, "t_star": 0.0, "objective": 0.0,
            "iterations": 0, "converged": True, "line_search_failed": False,
            "counts": {"state_solves": 0}, "construction": {"state_solves": 0},
        }
        path = str(artifacts["tmp"] / "zero.json")
        with open(path, "w") as fh:
            json.dump(solve_rep, fh)
        rep = cmd_evaluate(cfg, path, n_eval=8, out=None, workspace=ws)
        q_const = weighted_inner(ws.u_target, ws.u_target, ws.mass)
        assert rep["eval"]["std"] <= 1e-12 * q_const
        assert rep["eval"]["mean"] == pytest.approx(q_const, rel=1e-12)
        assert rep["eval"]["cvar"] == pytest.approx(q_const, rel=1e-12)

    def test_evaluate_deterministic(self, artifacts):
        out1 = str(artifacts["tmp"] / "e1.json")
        out2 = str(artifacts["tmp"] / "e2.json")
        solve = str(artifacts["tmp"] / "s.json")
        cmd_solve_ouu(artifacts["cfg"], model_path=artifacts["model"],
                      out=solve, workspace=artifacts["ws"])
        cmd_evaluate(artifacts["cfg"], solve, out=out1, workspace=artifacts["ws"])
        cmd_evaluate(artifacts["cfg"], solve, out=out2, workspace=artifacts["ws"])
        a = json.load(open(out1))
        b = json.load(open(out2))
        a.pop("timings")
        b.pop("timings")
        assert a == b

    def test_compare_reference_zero_error(self, artifacts):
        cfg, ws, tmp = artifacts["cfg"], artifacts["ws"], artifacts["tmp"]
        solve = str(tmp / "cmp_solve.json")
        cmd_solve_ouu(cfg, model_path=artifacts["model"], out=solve,
                      workspace=ws)
        ev = str(tmp / "cmp_eval.json")
        cmd_evaluate(cfg, solve, n_eval=6, out=ev, workspace=ws)
        summary = cmd_compare([ev], reference_path=ev,
                              out=str(tmp / "cmp"))
        assert len(summary["rows"]) == 1
        assert summary["rows"][0]["rel_cost_error_mean"] == 0.0
        assert os.path.exists(str(tmp / "cmp.csv"))
        assert os.path.exists(str(tmp / "cmp.runs.csv"))

    def test_compare_rejects_mixed_eval_sets(self, artifacts):
        cfg, ws, tmp = artifacts["cfg"], artifacts["ws"], artifacts["tmp"]
        solve = str(tmp / "mix_solve.json")
        cmd_solve_ouu(cfg, model_path=artifacts["model"], out=solve,
                      workspace=ws)
        e1 = str(tmp / "mix1.json")
        e2 = str(tmp / "mix2.json")
        cmd_evaluate(cfg, solve, n_eval=6, out=e1, workspace=ws)
        cmd_evaluate(cfg, solve, n_eval=6, seed=123, out=e2, workspace=ws)
        with pytest.raises(ProvenanceError):
            cmd_compare([e1], reference_path=e2, out=None)


class TestCLI:
    def test_full_pipeline_via_cli(self, tmp_path, capsys):
        cfg = tiny_config()
        cfg_path = str(tmp_path / "cfg.json")
        with open(cfg_path, "w") as fh:
            json.dump(cfg.to_dict(), fh)
        data = str(tmp_path / "train.bin")
        model = str(tmp_path / "model.bin")
        solve = str(tmp_path / "solve.json")
        ev = str(tmp_path / "eval.json")

        assert cli_main(["gen-data", "--config", cfg_path, "--n", "16",
                         "--jacobian", "--out", data]) == 0
        assert cli_main(["train", data, "--config", cfg_path,
                         "--jacobian-weight", "1.0", "--out", model]) == 0
        assert cli_main(["solve-ouu", "--config", cfg_path, "--model", model,
                         "--n", "8", "--out", solve]) == 0
        assert cli_main(["evaluate", solve, "--config", cfg_path, "--n", "6",
                         "--out", ev]) == 0
        assert cli_main(["compare", ev, "--reference", ev, "--out",
                         str(tmp_path / "cmp")]) == 0
        out = capsys.readouterr().out
        assert "compare_report" in out
        assert os.path.exists(str(tmp_path / "cmp.json"))

    def test_cli_beta_override(self, tmp_path):
        cfg = tiny_config()
        cfg_path = str(tmp_path / "cfg.json")
        with open(cfg_path, "w") as fh:
            json.dump(cfg.to_dict(), fh)
        data = str(tmp_path / "t.bin")
        solve = str(tmp_path / "s.json")
        cli_main(["gen-data", "--config", cfg_path, "--n", "8", "--out", data])
        cli_main(["solve-ouu", "--config", cfg_path, "--pde", "--n", "3",
                  "--beta", "0.25", "--out", solve])
        assert json.load(open(solve))["risk"]["beta"] == 0.25

    def test_cli_rejects_unknown_config_key(self, tmp_path):
        cfg_path = str(tmp_path / "cfg.json")
        with open(cfg_path, "w") as fh:
            json.dump({"not_a_key": 1}, fh)
        with pytest.raises(Exception):
            cli_main(["gen-data", "--config", cfg_path, "--out",
                      str(tmp_path / "x.bin")])
