import json
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sjmvi import cli
from sjmvi import experiments as E
from sjmvi.errors import SpecError
from sjmvi.trainer import TrainConfig, TrainState, build_model, checkpoint_load

FAST = "hidden = 8\nratio_hidden = 8\nbatch_size = 16\n"


def write_spec(tmp_path, body, name="spec.txt"):
    path = tmp_path / name
    path.write_text(body)
    return path


class TestSpecParsing:
    def test_minimal_banana(self, tmp_path, monkeypatch):
        monkeypatch.delenv(E.OUTPUT_ROOT_ENV, raising=False)
        spec = E.parse_spec_text("experiment = banana\n", tmp_path)
        assert spec.source == "digits"
        assert spec.config == TrainConfig()
        assert spec.output_dir == tmp_path / "runs" / "banana"

    def test_config_fields_and_comments(self, tmp_path):
        text = "# header\nexperiment = banana  # trailing\nsteps = 5\nmode = vae\nhidden = 4,4\nlearn_scales = yes\n"
        spec = E.parse_spec_text(text, tmp_path)
        assert spec.config.steps == 5 and spec.config.mode == "vae"
        assert spec.config.hidden == (4, 4) and spec.config.learn_scales

    def test_linear_defaults(self, tmp_path):
        spec = E.parse_spec_text("experiment = gaussian-sanity\n", tmp_path)
        assert spec.config.linear and spec.config.prior_density == "standard-normal"
        assert (spec.data_dim, spec.latent_dim) == (1, 1)
        assert E.parse_spec_text("experiment = linear-ppca\nlinear = false\n", tmp_path).config.linear is False

    @pytest.mark.parametrize(
        "text",
        [
            "steps = 3\n",
            "experiment = mnist-gan\n",
            "experiment = banana\nsteps = many\n",
            "experiment = banana\nsteps = -4\n",
            "experiment = banana\nflavour = sour\n",
            "experiment = banana\nsteps = 1\nsteps = 2\n",
            "experiment = banana\njust words\n",
            "experiment = banana\ndataset = idx\n",
            "experiment = banana\ndataset = csv\ncsv = missing.csv\n",
            "experiment = banana\ndataset = tape\n",
            "experiment = banana\nlearn_scales = maybe\n",
        ],
    )
    def test_invalid(self, tmp_path, text):
        with pytest.raises(SpecError):
            E.parse_spec_text(text, tmp_path)

    def test_relative_paths_resolve_against_spec(self, tmp_path):
        (tmp_path / "d.csv").write_text("1,2\n3,4\n")
        spec = E.load_spec(write_spec(tmp_path, "experiment = banana\ndataset = csv\ncsv = d.csv\n"))
        assert spec.csv_path == tmp_path / "d.csv"

    def test_output_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv(E.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
        spec = E.parse_spec_text("experiment = banana\noutput = here\n", tmp_path / "elsewhere")
        assert spec.output_dir == tmp_path / "root" / "here"
        absolute = E.parse_spec_text(f"experiment = banana\noutput = {tmp_path / 'abs'}\n", tmp_path)
        assert absolute.output_dir == tmp_path / "abs"

    def test_unreadable_spec(self, tmp_path):
        with pytest.raises(SpecError):
            E.load_spec(tmp_path / "absent.txt")


class TestBanks:
    def test_banana_defaults(self):
        spec = E.parse_spec_text("experiment = banana\n")
        banks = E.prepare_banks(spec)
        assert banks.train.dim == 64 and banks.prior.dim == 2
        assert banks.test.count == 1797 // 7
        assert banks.train.count + banks.test.count == 1797
        assert banks.prior.count == 10000 and banks.eval_prior.count == 2000
        assert not np.array_equal(banks.prior.samples[:2000], banks.eval_prior.samples)

    def test_ppca_records_loadings(self):
        banks = E.prepare_banks(E.parse_spec_text("experiment = linear-ppca\nn_samples = 70\n"))
        assert banks.info["loadings"].shape == (2, 5)
        assert banks.train.count == 60


def _linear_model(dim):
    config = TrainConfig(linear=True, mode="vae", prior_density="standard-normal")
    model = build_model(config, dim, dim)
    params = model.init_params(0)
    eye = {"dec_W0": np.eye(dim), "dec_b0": np.zeros(dim), "enc_W0": np.eye(dim), "enc_b0": np.zeros(dim)}
    theta = params["theta"].replace({k: eye[k] for k in params["theta"]})
    phi = params["phi"].replace({k: eye[k] for k in params["phi"]})
    return model, TrainState({**params, "theta": theta, "phi": phi})


class TestEvaluate:
    def test_identity_maps(self):
        from sjmvi.distributions import SampleBank

        model, state = _linear_model(3)
        rng = np.random.default_rng(0)
        m = E.evaluate(model, state, SampleBank(rng.standard_normal((50, 3)), 0), SampleBank(rng.random((40, 3)), 0))
        assert m == {"mse_x": 0.0, "mse_z": 0.0}

    @pytest.mark.parametrize("c", [0.0, 1.0, -2.5])
    def test_constant_decoder_bias_variance(self, c):
        from sjmvi.distributions import SampleBank

        model, state = _linear_model(1)
        state.params["theta"] = state.params["theta"].replace({"dec_W0": np.zeros((1, 1)), "dec_b0": np.array([c])})
        x = np.random.default_rng(1).standard_normal((500, 1))
        m = E.evaluate(model, state, SampleBank(x, 0), SampleBank(x, 0))
        assert m["mse_x"] == pytest.approx(x.var() + (c - x.mean()) ** 2, abs=1e-12)

    @given(arrays(np.float64, (12, 2), elements=st.floats(-5, 5)), st.randoms(use_true_random=False))
    def test_permutation_invariant(self, x, rnd):
        from sjmvi.distributions import SampleBank

        model, state = _linear_model(2)
        state.params["theta"] = state.params["theta"].replace({"dec_W0": np.array([[0.5, 1.0], [-1.0, 2.0]])})
        perm = list(range(12))
        rnd.shuffle(perm)
        a = E.evaluate(model, state, SampleBank(x, 0), SampleBank(x, 0))
        b = E.evaluate(model, state, SampleBank(x[perm], 0), SampleBank(x[perm], 0))
        assert a["mse_x"] == pytest.approx(b["mse_x"], rel=1e-12, abs=1e-300)
        assert a["mse_z"] == pytest.approx(b["mse_z"], rel=1e-12, abs=1e-300)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("banana")
    spec = E.parse_spec_text(f"experiment = banana\nsteps = 0\n{FAST}output = {out}\n")
    return E.run_experiment(spec)


class TestEmission:
    def test_files_written(self, run):
        names = {p.name for p in run.files.values()}
        assert names == {
            "metrics.csv",
            "checkpoint.json",
            "prior_samples.csv",
            "posterior_means.csv",
            "grid_decodings.csv",
            "evaluation.json",
        }
        assert all(p.is_file() for p in run.files.values())

    def test_grid_has_400_rows(self, run):
        header, rows = E.read_rows(run.files["grid"])
        assert rows.shape == (400, 2 + 64)
        assert header[:3] == ["z1", "z2", "x1"]

    def test_prior_cloud_round_trip(self, run):
        _, rows = E.read_rows(run.files["prior"])
        banks = E.prepare_banks(run.spec)
        np.testing.assert_allclose(rows, banks.prior.samples, rtol=0, atol=1e-12)

    def test_posterior_cloud_has_labels(self, run):
        header, rows = E.read_rows(run.files["posterior"])
        banks = E.prepare_banks(run.spec)
        assert header == ["z1", "z2", "label"]
        np.testing.assert_array_equal(rows[:, 2], banks.test.labels)
        means = build_model(run.spec.config, 64, 2).encoder(run.state.params["phi"].const(), banks.test.samples)
        np.testing.assert_allclose(rows[:, :2], means.numpy(), rtol=0, atol=1e-12)

    def test_evaluation_record(self, run):
        record = json.loads(run.files["evaluation"].read_text())
        assert record["step"] == 0 and record["test_size"] == 256 and record["eval_prior_size"] == 2000
        assert np.isfinite(record["mse_x"]) and np.isfinite(record["mse_z"])

    def test_checkpoint_reevaluates(self, run):
        record = E.evaluate_checkpoint(run.spec, checkpoint_load(run.files["checkpoint"]))
        assert record == run.evaluation

    def test_checkpoint_mismatch(self, run, tmp_path):
        other = E.parse_spec_text(f"experiment = banana\nsteps = 0\nhidden = 5\noutput = {tmp_path}\n")
        with pytest.raises(SpecError):
            E.evaluate_checkpoint(other, checkpoint_load(run.files["checkpoint"]))

    def test_unlabelled_and_higher_latent(self, tmp_path):
        spec = E.parse_spec_text(f"experiment = linear-ppca\nsteps = 0\nlatent_dim = 3\nn_samples = 70\noutput = {tmp_path}\n")
        result = E.run_experiment(spec)
        assert "grid" not in result.files
        _, rows = E.read_rows(result.files["posterior"])
        assert (rows[:, 3] == -1).all()

    @given(arrays(np.float64, (5, 3), elements=st.floats(-1e6, 1e6, allow_subnormal=False)))
    def test_rows_round_trip(self, tmp_path_factory, x):
        path = tmp_path_factory.mktemp("rows") / "r.csv"
        E.write_rows(path, ["a", "b", "c"], x)
        _, back = E.read_rows(path)
        np.testing.assert_allclose(back, x, rtol=1e-12, atol=1e-12)


class TestLatentGrid:
    def test_covers_central_range(self):
        prior = np.random.default_rng(0).standard_normal((5000, 2))
        grid = E.latent_grid(prior)
        assert grid.shape == (400, 2)
        lo, hi = np.percentile(prior, [1, 99], axis=0)
        np.testing.assert_allclose(grid.min(axis=0), lo)
        np.testing.assert_allclose(grid.max(axis=0), hi)


class TestPpca:
    def test_recovers_pca_subspace(self, tmp_path):
        start = time.process_time()
        spec = E.parse_spec_text(f"experiment = linear-ppca\noutput = {tmp_path}\n")
        result = E.run_experiment(spec)
        assert result.evaluation["principal_angle_deg"] < 5.0
        assert time.process_time() - start < 120


class TestCli:
    def test_run_and_evaluate(self, tmp_path, capsys):
        spec = write_spec(tmp_path, f"experiment = gaussian-sanity\nsteps = 3\n{FAST}output = out\n")
        assert cli.main(["run", str(spec)]) == 0
        assert "mse_x=" in capsys.readouterr().out
        assert cli.main(["evaluate", str(tmp_path / "out" / "checkpoint.json"), str(spec)]) == 0
        assert "mse_z=" in capsys.readouterr().out

    def test_invalid_spec_exit_code(self, tmp_path, capsys):
        assert cli.main(["run", str(write_spec(tmp_path, "experiment = nope\n"))]) == 1
        assert "error" in capsys.readouterr().err

    def test_missing_checkpoint_exit_code(self, tmp_path):
        spec = write_spec(tmp_path, "experiment = gaussian-sanity\n")
        assert cli.main(["evaluate", str(tmp_path / "none.json"), str(spec)]) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_abort_exit_code(self, tmp_path, capsys):
        (tmp_path / "huge.csv").write_text("\n".join("1e200,1e200" for _ in range(14)) + "\n")
        spec = write_spec(tmp_path, f"experiment = gaussian-sanity\ndataset = csv\ncsv = huge.csv\ndata_dim = 2\n{FAST}output = o\n")
        assert cli.main(["run", str(spec)]) == 2
        assert "non-finite" in capsys.readouterr().err

    def test_selftest(self, capsys):
        assert cli.main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and out.count("PASS") == 6

    def test_usage_error(self):
        with pytest.raises(SystemExit):
            cli.main(["frobnicate"])
