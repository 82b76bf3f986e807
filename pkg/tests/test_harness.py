import json

import numpy as np
import pytest

from gradfree.checks import verify_suite
from gradfree.cli import main
from gradfree.directions import DirectionDistribution
from gradfree.harness import SpecError, load_spec, parse_spec, run_experiment, worker_count
from gradfree.problems import conditioned_quadratic
from gradfree.sgfd import RunConfig, StepsizeSchedule, feasible_sigma, run_sgfd
from gradfree.traceio import COLUMNS, read_trace_csv, trace_to_csv, write_trace_csv

QUAD = """\
problem = quadratic
problem.dimension = 4
problem.condition = 4
problem.noise_sd = 0.5
"""

SPEC = f"""\
[run plain]
{QUAD}optimizer = sgfd
beta = 2
sigma = 23
iterations = 100
replications = 2
seed = 1
stride = 5

[run accel]
{QUAD}optimizer = momentum
beta = 5
sigma = 59
iterations = 100
replications = 2
seed = 2
stride = 10
"""

DIVERGING = f"""\
[run blowup]
{QUAD}optimizer = reference-sgd
schedule = fixed
alpha_bar = 5
iterations = 200
replications = 2
seed = 3
"""


def _files(directory):
    return {f.name: f.read_bytes() for f in sorted(directory.iterdir()) if f.name != "timing.json"}


class TestParsing:
    def test_valid(self, tmp_path):
        spec = parse_spec(SPEC, tmp_path)
        assert [c.name for c in spec.combinations] == ["plain", "accel"]
        assert spec.output == tmp_path / "results"
        assert spec.combinations[1].schedule.beta == 5.0

    def test_empty_spec(self, tmp_path):
        spec = parse_spec("", tmp_path)
        assert spec.combinations == []
        report = run_experiment(spec, workers=1)
        assert report["combinations"] == []

    def test_output_from_defaults(self, tmp_path):
        spec = parse_spec("[experiment]\noutput = out/here\n", tmp_path)
        assert spec.output == tmp_path / "out" / "here"

    @pytest.mark.parametrize("edit, field", [
        (("iterations = 100\n", ""), "iterations"),
        (("seed = 1\n", "seed = one\n"), "seed"),
        (("beta = 2\n", "beta = 2\ncolour = red\n"), "colour"),
        (("optimizer = sgfd\n", "optimizer = adam\n"), "optimizer"),
        (("stride = 5\n", "stride = 500\n"), "stride"),
        (("replications = 2\n", "replications = 0\n"), "replications"),
        (("optimizer = sgfd\n", "optimizer = sgfd\ndirections = cauchy\n"), "directions"),
        (("optimizer = sgfd\n", "optimizer = sgfd\nclip_radius = 1\n"), "clip_radius"),
    ])
    def test_errors_name_the_field(self, tmp_path, edit, field):
        old, new = edit
        with pytest.raises(SpecError, match=rf"\[plain\].*{field}"):
            parse_spec(SPEC.replace(old, new, 1), tmp_path)

    def test_duplicate_seed(self, tmp_path):
        with pytest.raises(SpecError, match="already used by \\[plain\\]"):
            parse_spec(SPEC.replace("seed = 2", "seed = 1"), tmp_path)

    def test_bad_section_name(self, tmp_path):
        with pytest.raises(SpecError, match="run <name>"):
            parse_spec("[plain]\nproblem = quadratic\n", tmp_path)

    def test_infeasible_schedule(self, tmp_path):
        # l = 1, so beta = 0.9 violates beta > 1/l
        with pytest.raises(SpecError, match=r"\[plain\] infeasible schedule: .*beta > 1/l"):
            parse_spec(SPEC.replace("beta = 2\n", "beta = 0.9\n"), tmp_path)

    def test_momentum_needs_larger_beta(self, tmp_path):
        with pytest.raises(SpecError, match=r"\[accel\].*4/l"):
            parse_spec(SPEC.replace("beta = 5\n", "beta = 3\n"), tmp_path)

    def test_unknown_problem_parameter(self, tmp_path):
        with pytest.raises(SpecError, match="unknown parameters"):
            parse_spec(SPEC.replace("problem.noise_sd", "problem.noise", 1), tmp_path)

    def test_fail_fast_writes_nothing(self, tmp_path):
        bad = SPEC + "\n[run late]\nproblem = quadratic\niterations = 10\nseed = 9\nbeta = 0.5\nsigma = 1\n"
        path = tmp_path / "exp.ini"
        path.write_text(bad)
        assert main(["run", str(path)]) == 1
        assert not (tmp_path / "results").exists()

    def test_missing_file(self, tmp_path):
        with pytest.raises(SpecError, match="cannot read"):
            load_spec(tmp_path / "nope.ini")

    def test_worker_env(self, monkeypatch):
        monkeypatch.setenv("GRADFREE_WORKERS", "3")
        assert worker_count() == 3
        monkeypatch.setenv("GRADFREE_WORKERS", "zero")
        with pytest.raises(SpecError):
            worker_count()


@pytest.fixture(scope="module")
def batch(tmp_path_factory):
    root = tmp_path_factory.mktemp("batch")
    spec = parse_spec(SPEC, root, output=root / "a")
    report = run_experiment(spec, workers=1)
    return root, spec, report


class TestRunExperiment:
    def test_rows_and_columns(self, batch):
        _, spec, report = batch
        plain = read_trace_csv(spec.output / "plain.csv")
        assert len(plain) == 100 // 5
        np.testing.assert_array_equal(plain.k, np.arange(5, 101, 5))
        header = (spec.output / "accel.csv").read_text().splitlines()[0]
        assert tuple(header.split(",")) == COLUMNS
        assert [e["rows"] for e in report["combinations"]] == [20, 10]

    def test_report_contents(self, batch):
        _, spec, _ = batch
        report = json.loads((spec.output / "report.json").read_text())
        plain, accel = report["combinations"]
        assert plain["status"] == "ok" and plain["envelope"] is not None
        assert accel["envelope"] is None
        assert "wall_clock_seconds" not in plain["metadata"]
        assert plain["metadata"]["schedule"]["beta"] == 2.0
        assert set(json.loads((spec.output / "timing.json").read_text())) == {"plain", "accel"}

    def test_rerun_byte_identical(self, batch):
        root, spec, _ = batch
        again = parse_spec(SPEC, root, output=root / "b")
        run_experiment(again, workers=1)
        assert _files(spec.output) == _files(again.output)

    def test_workers_do_not_change_output(self, batch):
        root, spec, _ = batch
        par = parse_spec(SPEC, root, output=root / "c")
        run_experiment(par, workers=2)
        assert _files(spec.output) == _files(par.output)

    def test_divergence_flagged_batch_continues(self, tmp_path):
        spec = parse_spec(DIVERGING + "\n" + SPEC, tmp_path)
        report = run_experiment(spec, workers=1)
        blowup, plain, accel = report["combinations"]
        assert blowup["status"] == "diverged" and blowup["csv"] is None
        assert blowup["diverged_at"] >= 1
        assert plain["status"] == accel["status"] == "ok"
        assert not (spec.output / "blowup.csv").exists()


class TestTraceCsv:
    def test_round_trip_exact(self, tmp_path):
        p = conditioned_quadratic(3, 3.0, noise_sd=0.5)
        cfg = RunConfig(p, StepsizeSchedule.robbins_monro(2.0, feasible_sigma(2.0, 3.0)), 50,
                        replications=3, seed=4, stride=5)
        tr = run_sgfd(cfg)
        back = read_trace_csv(write_trace_csv(tr, tmp_path / "t.csv"))
        np.testing.assert_array_equal(back.mean_gap, tr.mean_gap)
        np.testing.assert_array_equal(back.alpha, tr.alpha)
        assert trace_to_csv(back) == trace_to_csv(tr)
        assert all(f"{v:.17g}" == f"{w:.17g}" for v, w in zip(back.mean_grad_sq, tr.mean_grad_sq))

    @pytest.mark.parametrize("text", ["", "k,alpha_k\n1,2\n", ",".join(COLUMNS) + "\n1,x,1,1,,1\n"])
    def test_rejects_malformed(self, tmp_path, text):
        path = tmp_path / "bad.csv"
        path.write_text(text)
        with pytest.raises(ValueError):
            read_trace_csv(path)


class TestCli:
    def test_run(self, tmp_path, capsys):
        path = tmp_path / "exp.ini"
        path.write_text(SPEC)
        assert main(["run", str(path), "--output", str(tmp_path / "o")]) == 0
        out = capsys.readouterr().out
        assert "plain: ok slope=" in out and "accel: ok" in out
        assert (tmp_path / "o" / "plain.csv").exists()

    def test_rates(self, tmp_path, capsys):
        k = range(1, 201)
        path = tmp_path / "t.csv"
        rows = [",".join(COLUMNS)] + [f"{j},0.1,{3 / j**2!r},{1 / j!r},,1" for j in k]
        path.write_text("\n".join(rows) + "\n")
        assert main(["rates", str(path)]) == 0
        assert json.loads(capsys.readouterr().out)["slope"] == pytest.approx(-2.0)
        assert main(["rates", str(path), "--column", "mean_grad_sq", "--window", "10:200"]) == 0
        assert json.loads(capsys.readouterr().out)["slope"] == pytest.approx(-1.0)

    def test_rates_bad_window(self, tmp_path):
        assert main(["rates", str(tmp_path / "t.csv"), "--window", "10"]) == 1

    def test_bounds(self, capsys):
        assert main(["bounds", "--beta", "1.5", "--sigma", "1", "--l", "1", "--k", "1"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["A_k"] == pytest.approx(0.25) and out["B_k"] == pytest.approx(0.5625)

    def test_bounds_pole(self, capsys):
        assert main(["bounds", "--beta", "4", "--sigma", "2", "--l", "1", "--k", "5"]) == 1
        assert "pole" in capsys.readouterr().err

    def test_usage_errors(self):
        assert main([]) == 1
        assert main(["frobnicate"]) == 1
        assert main(["--help"]) == 0

    def test_verify_fast(self, capsys):
        assert main(["verify", "--fast"]) == 0
        assert "checks passed" in capsys.readouterr().out

    def test_verify_failure_exit_code(self, monkeypatch, capsys):
        import gradfree.checks as checks

        monkeypatch.setattr(checks, "update_direction", _unnormalized_update)
        monkeypatch.setattr(checks.verify_suite, "__defaults__", ("fast", DirectionDistribution, _unnormalized_update))
        assert main(["verify"]) == 2
        assert "FAIL  momentum.weight_sum" in capsys.readouterr().out


class _StretchedDirections(DirectionDistribution):
    def from_uniform(self, u):
        return 1.1 * super().from_uniform(u)


def _unnormalized_update(state, step, alpha):
    from gradfree.momentum import update_direction

    update_direction(state, step, alpha)
    return state.v


class TestMutations:
    def test_scaled_directions_fail_covariance(self):
        report = verify_suite("fast", direction_factory=_StretchedDirections)
        failed = {r.name.split("[")[0] for r in report.failures()}
        assert not report.passed
        assert "directions.unit_covariance" in failed
        assert "directions.zero_mean" not in failed

    def test_unnormalized_momentum_fails_weight_sum(self):
        report = verify_suite("fast", update_fn=_unnormalized_update)
        assert [r.name for r in report.failures()] == ["momentum.weight_sum", "momentum.closed_form"]

    def test_unmutated_suite_passes(self):
        assert verify_suite("fast").passed
