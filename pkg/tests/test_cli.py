import json
import subprocess
import sys

import numpy as np
import pytest

from cdiff.cli import build_domain, forward_viz, load_config, main
from cdiff.errors import ConfigError
from cdiff.geometry import make_domain
from cdiff.io import read_samples
from cdiff.schedule import NoiseSchedule


def write_config(path, **doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture
def cfg(tmp_path):
    return write_config(tmp_path / "cfg.json", domain={"kind": "hypercube", "dim": 2},
                        schedule={"T": 1.0, "N": 20}, seed=3)


class TestConfig:
    def test_defaults(self):
        cfg = load_config(env={})
        assert cfg["method"] == "reflected" and cfg["seed"] == 0
        assert cfg["sampling"]["lambda0"] == [1.0]

    def test_env_seed(self, cfg):
        assert load_config(cfg, env={"CDIFF_SEED": "42"})["seed"] == 42

    def test_bad_env_seed(self):
        with pytest.raises(ConfigError):
            load_config(env={"CDIFF_SEED": "x"})

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path / "c.json", colour="blue"), env={})

    def test_nested_merge(self, tmp_path):
        cfg = load_config(write_config(tmp_path / "c.json", sampling={"n": 5}), env={})
        assert cfg["sampling"]["n"] == 5 and cfg["sampling"]["psi"] == 0.0

    def test_domain_file(self, tmp_path):
        (tmp_path / "dom.json").write_text(make_domain("simplex", dim=3).to_json())
        cfg = load_config(write_config(tmp_path / "c.json", domain="dom.json"), env={})
        assert build_domain(cfg["domain"]).hash() == make_domain("simplex", dim=3).hash()

    def test_bad_domain(self):
        with pytest.raises(ConfigError):
            build_domain({"kind": "donut"})


class TestGenData:
    def test_header_and_rows(self, tmp_path, cfg, capsys):
        out = tmp_path / "d.csv"
        assert main(["gen-data", "--config", cfg, "--n", "50", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "x0,x1" and len(lines) == 51
        assert "mean" in capsys.readouterr().out
        assert (tmp_path / "d.csv.manifest.json").exists()

    def test_byte_identical_reruns(self, tmp_path, cfg):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["gen-data", "--config", cfg, "--n", "100", "--out", str(a)])
        main(["gen-data", "--config", cfg, "--n", "100", "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()
        ma = json.loads((tmp_path / "a.csv.manifest.json").read_text())
        mb = json.loads((tmp_path / "b.csv.manifest.json").read_text())
        ma.pop("artifact"), mb.pop("artifact")
        assert ma == mb

    def test_seed_flag_overrides(self, tmp_path, cfg):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["gen-data", "--config", cfg, "--n", "10", "--out", str(a)])
        main(["gen-data", "--config", cfg, "--n", "10", "--seed", "4", "--out", str(b)])
        assert a.read_bytes() != b.read_bytes()

    def test_simplex_rows_inside(self, tmp_path):
        c = write_config(tmp_path / "c.json", domain={"kind": "simplex", "dim": 3})
        out = tmp_path / "d.csv"
        assert main(["gen-data", "--config", c, "--n", "2000", "--out", str(out)]) == 0
        X = read_samples(out)
        assert X.shape == (2000, 3)
        assert np.all(make_domain("simplex", dim=3).contains(X, margin=-1e-12))

    def test_nonpositive_n(self, tmp_path, cfg):
        assert main(["gen-data", "--config", cfg, "--n", "0", "--out", str(tmp_path / "x")]) == 2


class TestTrainSample:
    @pytest.fixture
    def data(self, tmp_path, cfg):
        out = tmp_path / "d.csv"
        main(["gen-data", "--config", cfg, "--n", "200", "--out", str(out)])
        return str(out)

    def test_zero_iterations(self, tmp_path, cfg, data):
        ckpt = tmp_path / "m.ckpt"
        assert main(["train", "--config", cfg, "--data", data, "--iters", "0",
                     "--out", str(ckpt)]) == 0
        assert ckpt.exists()
        assert (tmp_path / "m.loss.csv").read_text() == "iteration,loss,lr\n"

    def test_loss_rows_and_sampling(self, tmp_path, cfg, data):
        ckpt = tmp_path / "m.ckpt"
        assert main(["train", "--config", cfg, "--data", data, "--iters", "4",
                     "--method", "barrier", "--out", str(ckpt)]) == 0
        rows = (tmp_path / "m.loss.csv").read_text().splitlines()
        assert len(rows) == 5 and rows[1].startswith("0,")
        out = tmp_path / "s.csv"
        assert main(["sample", "--ckpt", str(ckpt), "--n", "64", "--out", str(out)]) == 0
        X = read_samples(out)
        assert X.shape == (64, 2)
        assert np.all(make_domain("hypercube", dim=2).contains(X))
        man = json.loads((tmp_path / "s.csv.manifest.json").read_text())
        assert man["config"]["method"] == "barrier"

    def test_several_lambdas(self, tmp_path, cfg, data):
        ckpt = tmp_path / "m.ckpt"
        main(["train", "--config", cfg, "--data", data, "--iters", "0", "--out", str(ckpt)])
        out = tmp_path / "s.csv"
        assert main(["sample", "--ckpt", str(ckpt), "--n", "8", "--lambda0", "1", "2.5",
                     "--out", str(out)]) == 0
        assert (tmp_path / "s_lambda0-1.csv").exists()
        assert (tmp_path / "s_lambda0-2.5.csv").exists()

    def test_sample_domain_mismatch(self, tmp_path, cfg, data):
        ckpt = tmp_path / "m.ckpt"
        main(["train", "--config", cfg, "--data", data, "--iters", "0", "--out", str(ckpt)])
        other = write_config(tmp_path / "o.json", domain={"kind": "simplex", "dim": 2})
        assert main(["sample", "--ckpt", str(ckpt), "--config", other, "--n", "4",
                     "--out", str(tmp_path / "s.csv")]) == 2

    def test_bad_lambda(self, tmp_path, cfg, data):
        ckpt = tmp_path / "m.ckpt"
        main(["train", "--config", cfg, "--data", data, "--iters", "0", "--out", str(ckpt)])
        assert main(["sample", "--ckpt", str(ckpt), "--n", "4", "--lambda0", "0.5",
                     "--out", str(tmp_path / "s.csv")]) == 2

    def test_barrier_refused_on_ball(self, tmp_path, data):
        c = write_config(tmp_path / "c.json", domain={"kind": "cholesky_ball", "dim": 2, "C": 1.0},
                         method="barrier")
        assert main(["train", "--config", c, "--data", data, "--iters", "0",
                     "--out", str(tmp_path / "m.ckpt")]) == 2


class TestEval:
    def test_split_halves(self, tmp_path, cfg, capsys):
        data = tmp_path / "d.csv"
        main(["gen-data", "--config", cfg, "--n", "2000", "--out", str(data)])
        X = read_samples(data)
        np.savetxt(tmp_path / "a.csv", X[:1000], delimiter=",", header="x0,x1", comments="")
        np.savetxt(tmp_path / "b.csv", X[1000:], delimiter=",", header="x0,x1", comments="")
        out = tmp_path / "metrics.json"
        hist = tmp_path / "h.csv"
        assert main(["eval", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"), "--out", str(out),
                     "--hist-out", str(hist), "--bins", "10"]) == 0
        report = json.loads(out.read_text())
        assert abs(report["mmd2"]) < 0.01
        assert report["kernel"]["bandwidth"] == "median-heuristic"
        assert len(hist.read_text().splitlines()) == 1 + 20 + 100

    def test_m_and_bandwidth(self, tmp_path, cfg):
        data = tmp_path / "d.csv"
        main(["gen-data", "--config", cfg, "--n", "100", "--out", str(data)])
        out = tmp_path / "metrics.json"
        assert main(["eval", str(data), str(data), "--m", "30", "--bandwidth", "0.5",
                     "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["m"] == 30 and report["kernel"]["sigma"] == 0.5

    def test_dimension_mismatch(self, tmp_path):
        (tmp_path / "a.csv").write_text("x0\n0.1\n0.2\n")
        (tmp_path / "b.csv").write_text("x0,x1\n0.1,0.2\n0.2,0.3\n")
        assert main(["eval", str(tmp_path / "a.csv"), str(tmp_path / "b.csv"),
                     "--out", str(tmp_path / "m.json")]) == 2

    def test_missing_file(self, tmp_path):
        assert main(["eval", str(tmp_path / "nope.csv"), str(tmp_path / "nope.csv"),
                     "--out", str(tmp_path / "m.json")]) == 2


class TestForwardViz:
    def test_traces_share_noise(self):
        dom = make_domain("hypercube", dim=2)
        times, paths = forward_viz(dom, NoiseSchedule(N=200), [0.9, -0.9],
                                   np.random.default_rng(0))
        assert paths.shape == (3, 201, 2) and times[-1] == pytest.approx(1.0)
        assert np.all(dom.contains(paths[1])) and np.all(dom.contains(paths[2], margin=-1e-12))
        assert not np.all(dom.contains(paths[0]))
        # the first step is the same free move for all three while far from walls
        np.testing.assert_allclose(paths[2, 1], paths[0, 1])

    def test_csv(self, tmp_path):
        out = tmp_path / "fv.csv"
        assert main(["forward-viz", "--domain", '{"kind": "interval"}', "--x0", "0.5",
                     "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "t,unconstrained_x0,barrier_x0,reflected_x0"
        assert len(lines) == 1 + 1001
        T = np.loadtxt(out, delimiter=",", skiprows=1)
        assert np.all((T[:, 2:] > 0) & (T[:, 2:] < 1))

    def test_exterior_start(self, tmp_path):
        assert main(["forward-viz", "--domain", '{"kind": "interval"}', "--x0", "1.5",
                     "--out", str(tmp_path / "fv.csv")]) == 2

    def test_ball_refused(self, tmp_path):
        assert main(["forward-viz", "--domain", '{"kind": "cholesky_ball", "dim": 2, "C": 1}',
                     "--out", str(tmp_path / "fv.csv")]) == 2

    def test_numerical_failure_exit_code(self, tmp_path):
        c = write_config(tmp_path / "c.json", domain={"kind": "simplex", "dim": 2},
                         schedule={"T": 1.0, "N": 2, "beta_min": 1e16, "beta_max": 1e16})
        assert main(["forward-viz", "--config", c, "--out", str(tmp_path / "fv.csv")]) == 3


def test_module_entry_point(tmp_path):
    out = tmp_path / "d.csv"
    res = subprocess.run([sys.executable, "-m", "cdiff", "gen-data", "--n", "5", "--out", str(out)],
                         capture_output=True, text=True, env={"CDIFF_SEED": "9", "PATH": ""})
    assert res.returncode == 0, res.stderr
    assert json.loads((tmp_path / "d.csv.manifest.json").read_text())["seed"] == 9
