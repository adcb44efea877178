import json

import numpy as np
import pytest

from covsteer.cli import (
    load_config,
    main,
    read_moments_csv,
    read_policy_csv,
    write_policy_csv,
)
from covsteer.errors import ConfigError
from covsteer.linear_steering import AffinePolicy
from covsteer.numerics import TimeGrid


def small_config(tmp_path, **overrides):
    doc = {
        "model": {"name": "double_integrator_drag", "params": {"c_d": 0.005}},
        "eps": 0.1,
        "horizon": 5.0,
        "n_steps": 200,
        "eta": 1.0,
        "conv_tol": 1e-4,
        "max_iters": 40,
        "init_mode": "zero-prior",
        "m0": [1.0, 8.0, 2.0, 0.0],
        "Sigma0": (0.01 * np.eye(4)).tolist(),
        "m1": [1.0, 2.0, -1.0, 0.0],
        "Sigma1": (0.1 * np.eye(4)).tolist(),
        "simulate": {"n_paths": 400, "seed": 11, "dump_paths": 3, "containment_coords": [0, 1]},
    }
    doc.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


class TestConfigLoading:
    def test_valid_config_loads(self, tmp_path):
        cfg = load_config(small_config(tmp_path))
        assert cfg.model.state_dim == 4
        assert cfg.grid.n_steps == 200
        assert cfg.n_paths == 400

    def test_non_spd_sigma_rejected_with_field_name(self, tmp_path):
        bad = (-0.01 * np.eye(4)).tolist()
        path = small_config(tmp_path, Sigma0=bad)
        with pytest.raises(ConfigError) as ei:
            load_config(path)
        assert "Sigma0" in str(ei.value)

    def test_wrong_dimension_rejected(self, tmp_path):
        path = small_config(tmp_path, m0=[1.0, 2.0])
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_model_rejected(self, tmp_path):
        path = small_config(tmp_path, model={"name": "pendulum"})
        with pytest.raises(ConfigError):
            load_config(path)

    def test_check_command_exit_codes(self, tmp_path, capsys):
        ok = small_config(tmp_path)
        assert main(["check", str(ok)]) == 0
        bad = small_config(tmp_path, Sigma0=(-0.01 * np.eye(4)).tolist())
        assert main(["check", str(bad)]) == 1


class TestPolicyCsvRoundTrip:
    def test_bit_exact_round_trip(self, tmp_path):
        g = TimeGrid(0.0, 1.0, 37)
        rng = np.random.default_rng(0)
        policy = AffinePolicy(
            grid=g, K=rng.standard_normal((g.n_nodes, 2, 4)), d=rng.standard_normal((g.n_nodes, 2))
        )
        path = tmp_path / "policy.csv"
        write_policy_csv(path, policy)
        back = read_policy_csv(path, g, n=4, p=2)
        assert np.array_equal(back.K, policy.K)
        assert np.array_equal(back.d, policy.d)

    def test_header_present(self, tmp_path):
        g = TimeGrid(0.0, 1.0, 2)
        policy = AffinePolicy(grid=g, K=np.zeros((3, 1, 2)), d=np.zeros((3, 1)))
        path = tmp_path / "policy.csv"
        write_policy_csv(path, policy)
        header = path.read_text().splitlines()[0]
        assert header == "t,K_0_0,K_0_1,d_0"


@pytest.fixture(scope="module")
def solved_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = small_config(tmp)
    code = main(["solve", str(cfg), "--out", str(tmp / "out")])
    assert code == 0
    return tmp, cfg


class TestSolveCommand:
    def test_artifacts_written_and_converged(self, solved_dir):
        tmp, cfg = solved_dir
        out = tmp / "out"
        report = json.loads((out / "report.json").read_text())
        assert report["converged"] is True
        assert (out / "policy.csv").exists() and (out / "moments.csv").exists()
        assert len(report["objective_trace"]) == report["iterations"] + 1

    def test_solve_deterministic_artifacts(self, solved_dir, tmp_path):
        tmp, cfg = solved_dir
        code = main(["solve", str(cfg), "--out", str(tmp_path / "b")])
        assert code == 0
        for name in ("policy.csv", "moments.csv"):
            a = (tmp / "out" / name).read_bytes()
            b = (tmp_path / "b" / name).read_bytes()
            assert a == b

    def test_invalid_config_exits_one(self, tmp_path):
        path = small_config(tmp_path, Sigma0=(-0.01 * np.eye(4)).tolist())
        assert main(["solve", str(path)]) == 1

    def test_nonconverged_exits_two_with_artifacts(self, tmp_path):
        path = small_config(tmp_path, max_iters=2, conv_tol=1e-12)
        code = main(["solve", str(path), "--out", str(tmp_path / "o")])
        assert code == 2
        assert (tmp_path / "o" / "policy.csv").exists()
        report = json.loads((tmp_path / "o" / "report.json").read_text())
        assert report["converged"] is False


class TestSimulateCommand:
    def test_simulate_writes_ensemble(self, solved_dir):
        tmp, cfg = solved_dir
        out = tmp / "out"
        code = main(["simulate", str(cfg), "--policy-dir", str(out)])
        assert code == 0
        doc = json.loads((out / "ensemble.json").read_text())
        assert doc["n_paths"] == 400
        assert "cost_mean" in doc and "cost_stderr" in doc
        assert doc["verdict"]["passed"] in (True, False)
        header = (out / "ensemble.csv").read_text().splitlines()[0]
        assert header.startswith("t,mean_0")
        assert "path2_3" in header

    def test_workers_do_not_change_bytes(self, solved_dir, tmp_path):
        tmp, cfg = solved_dir
        out = tmp / "out"
        a_dir, b_dir = tmp_path / "w1", tmp_path / "w3"
        assert main(["simulate", str(cfg), "--policy-dir", str(out), "--out", str(a_dir)]) == 0
        assert main(
            ["simulate", str(cfg), "--policy-dir", str(out), "--out", str(b_dir), "--workers", "3"]
        ) == 0
        for name in ("ensemble.csv", "ensemble.json"):
            assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()

    def test_seed_override_changes_output(self, solved_dir, tmp_path):
        tmp, cfg = solved_dir
        out = tmp / "out"
        a_dir, b_dir = tmp_path / "s1", tmp_path / "s2"
        main(["simulate", str(cfg), "--policy-dir", str(out), "--out", str(a_dir), "--seed", "1"])
        main(["simulate", str(cfg), "--policy-dir", str(out), "--out", str(b_dir), "--seed", "2"])
        assert (a_dir / "ensemble.csv").read_bytes() != (b_dir / "ensemble.csv").read_bytes()

    def test_grid_mismatch_exits_one(self, solved_dir, tmp_path):
        tmp, cfg = solved_dir
        out = tmp / "out"
        other = small_config(tmp_path, n_steps=100)
        assert main(["simulate", str(other), "--policy-dir", str(out)]) == 1

    def test_nan_in_policy_names_bad_row(self, solved_dir, tmp_path, capsys):
        tmp, cfg = solved_dir
        src = (tmp / "out" / "policy.csv").read_text().splitlines()
        row = src[5].split(",")
        row[1] = "nan"
        src[5] = ",".join(row)
        bad_dir = tmp_path / "bad"
        bad_dir.mkdir()
        (bad_dir / "policy.csv").write_text("\n".join(src) + "\n")
        (bad_dir / "moments.csv").write_text((tmp / "out" / "moments.csv").read_text())
        assert main(["simulate", str(cfg), "--policy-dir", str(bad_dir)]) == 1
        err = capsys.readouterr().err
        assert "row 4" in err

    def test_moments_reader_validates(self, solved_dir):
        tmp, cfg = solved_dir
        c = load_config(cfg)
        mom = read_moments_csv(tmp / "out" / "moments.csv", c.grid, 4)
        assert mom.z.shape == (c.grid.n_nodes, 4)
        assert np.allclose(mom.Sigma[0], c.rho0.cov, atol=1e-12)
