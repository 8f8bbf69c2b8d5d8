"""Tests for the command-line surface and file persistence."""

import json

import numpy as np
import pytest

from stepturn.cli import (
    IngestionError,
    config_hash,
    do_fit,
    do_simulate,
    do_study,
    do_summarize,
    load_config,
    main,
    read_samples,
    read_track,
)

TRUE_PARAMS = {
    "sigmaB2": 1.0,
    "mu": 26.0,
    "lambda": 0.55,
    "sigmaS2": 125.0,
    "sigmaE2": 90.0,
}


def write_config(path, **kv):
    path.write_text(json.dumps(kv))
    return str(path)


def sim_config(tmp_path, **extra):
    cfg = {
        "dt": 0.5,
        "seed": 7,
        "true_params": TRUE_PARAMS,
        "n_observations": 10,
        "obs_interval": 2.0,
        "track_out": str(tmp_path / "track.csv"),
        "truth_out": str(tmp_path / "truth.csv"),
    }
    cfg.update(extra)
    tmp_path.mkdir(parents=True, exist_ok=True)
    return load_config(write_config(tmp_path / "_config.json", **cfg))


class TestLoadConfig:
    def test_rejects_unknown_keys(self, tmp_path):
        p = write_config(tmp_path / "c.json", dt=0.5, bogus=1)
        with pytest.raises(IngestionError, match="bogus"):
            load_config(p)

    def test_rejects_bad_types(self, tmp_path):
        p = write_config(tmp_path / "c.json", dt="fast")
        with pytest.raises(IngestionError, match="dt"):
            load_config(p)

    def test_rejects_bool_masquerading_as_int(self, tmp_path):
        p = write_config(tmp_path / "c.json", dt=0.5, seed=True)
        with pytest.raises(IngestionError, match="seed"):
            load_config(p)

    def test_overrides_and_defaults(self, tmp_path):
        p = write_config(tmp_path / "c.json", dt=0.5, seed=1)
        cfg = load_config(p, seed=99, dt=None)
        assert cfg["seed"] == 99
        assert cfg["dt"] == 0.5
        assert cfg["thin"] == 1
        assert cfg["level"] == 0.9

    def test_param_block_must_be_complete(self, tmp_path):
        p = write_config(
            tmp_path / "c.json", dt=0.5, true_params={"mu": 26.0}
        )
        with pytest.raises(IngestionError, match="true_params"):
            load_config(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(IngestionError):
            load_config(str(tmp_path / "absent.json"))

    def test_config_hash_is_canonical(self):
        a = config_hash({"b": 1, "a": 2})
        b = config_hash({"a": 2, "b": 1})
        assert a == b and len(a) == 12


class TestSimulate:
    def test_geometry_and_round_trip(self, tmp_path):
        cfg = sim_config(tmp_path, n_observations=50)
        do_simulate(cfg)
        times, xs, ys = read_track(cfg["track_out"])
        assert len(times) == 50
        assert np.allclose(np.diff(times), 2.0)
        # 2-minute gaps at dt=0.5 -> 4 steps per gap, 196 steps, 197 nodes
        # including the origin, spanning 98 minutes
        truth = (tmp_path / "truth.csv").read_text().strip().splitlines()
        node_rows = [l for l in truth if l and not l.startswith("#") and l[0].isdigit()]
        assert len(node_rows) == 197
        assert node_rows[-1].split(",")[1] == repr(98.0)

    def test_zero_noise_observations_on_path(self, tmp_path):
        tp = dict(TRUE_PARAMS, sigmaE2=0.0)
        cfg = sim_config(tmp_path, true_params=tp)
        do_simulate(cfg)
        times, xs, ys = read_track(cfg["track_out"])
        truth = (tmp_path / "truth.csv").read_text().strip().splitlines()
        node_xy = {}
        for l in truth:
            if l and not l.startswith("#") and l[0].isdigit():
                parts = l.split(",")
                node_xy[int(parts[0])] = (float(parts[2]), float(parts[3]))
        for t, x, y in zip(times, xs, ys):
            node = int(round(t / 0.5))
            assert node_xy[node] == (x, y)

    def test_deterministic_bytes(self, tmp_path):
        c1 = sim_config(tmp_path / "a")
        c2 = sim_config(tmp_path / "b", seed=7)
        do_simulate(c1)
        do_simulate(c2)
        assert (
            open(c1["track_out"]).read().split("\n", 1)[1]
            == open(c2["track_out"]).read().split("\n", 1)[1]
        )

    def test_header_records_hash_and_seed(self, tmp_path):
        cfg = sim_config(tmp_path)
        do_simulate(cfg)
        first = open(cfg["track_out"]).readline()
        assert first.startswith(f"# config_hash={config_hash(cfg)} seed=7")

    def test_interval_must_be_grid_multiple(self, tmp_path):
        cfg = sim_config(tmp_path, obs_interval=0.7)
        with pytest.raises(IngestionError, match="multiple"):
            do_simulate(cfg)


class TestReadTrack:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("")
        with pytest.raises(IngestionError, match="empty"):
            read_track(str(p))

    def test_bad_row_reports_line_number(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("time,x,y\n0,1,2\n1,oops,4\n")
        with pytest.raises(IngestionError, match="row 3"):
            read_track(str(p))

    def test_non_increasing_times(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("time,x,y\n0,1,2\n0,3,4\n")
        with pytest.raises(IngestionError, match="increasing"):
            read_track(str(p))

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("# hdr\n\ntime,x,y\n0,1.5,2.5\n2,3.5,4.5\n")
        times, xs, ys = read_track(str(p))
        assert list(times) == [0.0, 2.0]
        assert list(xs) == [1.5, 3.5]


def fit_config(tmp_path, **extra):
    cfg = sim_config(tmp_path)
    cfg.update(
        n_iterations=20,
        burn_in=20,
        thin=4,
        path_updates_per_param_update=10,
        path_snapshot_stride=2,
        samples_out=str(tmp_path / "samples.csv"),
        diagnostics_out=str(tmp_path / "diagnostics.csv"),
        paths_out=str(tmp_path / "paths.csv"),
        initial_params=None,
        proposal_scales=None,
        tune_proposals=True,
        speed_prior_k=2.0,
        init_step_convention="legacy",
        section_len_min=5,
        section_len_max=8,
        check_constraints=False,
        level=0.9,
    )
    cfg.update(extra)
    return cfg


class TestFit:
    def test_outputs_and_thinning(self, tmp_path):
        cfg = fit_config(tmp_path)
        do_simulate(cfg)
        do_fit(cfg, cfg["track_out"])
        mat = read_samples(cfg["samples_out"])
        assert mat.shape == (5, 5)  # 20 retained sweeps, thin 4
        diag = (tmp_path / "diagnostics.csv").read_text()
        assert "param_accept_rate," in diag
        paths = [
            l for l in (tmp_path / "paths.csv").read_text().splitlines()
            if l and not l.startswith("#") and not l.startswith("sample")
        ]
        # snapshots every 2nd retained sample: 3 snapshots x 37 nodes
        assert len(paths) == 3 * 37

    def test_rerun_byte_identical(self, tmp_path):
        cfg = fit_config(tmp_path)
        do_simulate(cfg)
        do_fit(cfg, cfg["track_out"])
        first = open(cfg["samples_out"]).read()
        do_fit(cfg, cfg["track_out"])
        assert open(cfg["samples_out"]).read() == first

    def test_samples_round_trip(self, tmp_path):
        cfg = fit_config(tmp_path)
        do_simulate(cfg)
        do_fit(cfg, cfg["track_out"])
        mat = read_samples(cfg["samples_out"])
        # shortest round-trip floats re-ingest losslessly: rewrite and compare
        again = read_samples(cfg["samples_out"])
        assert np.array_equal(mat, again)

    def test_off_grid_track_is_ingestion_error(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("time,x,y\n0,0,0\n0.3,1,1\n1.0,2,2\n")
        cfg = fit_config(tmp_path)
        with pytest.raises(IngestionError, match="grid"):
            do_fit(cfg, str(p))


class TestSummarize:
    def make_samples(self, tmp_path):
        p = tmp_path / "s.csv"
        rng = np.random.default_rng(0)
        lines = ["iteration,sigmaB2,mu,lambda,sigmaS2,sigmaE2"]
        for i in range(200):
            vals = rng.uniform(1, 2, 5)
            lines.append(f"{i}," + ",".join(repr(float(v)) for v in vals))
        p.write_text("\n".join(lines) + "\n")
        return str(p)

    def test_table_shape(self, tmp_path, capsys):
        p = self.make_samples(tmp_path)
        rows = do_summarize(p, 0.9)
        assert [r[0] for r in rows] == [
            "sigmaB2", "mu", "lambda", "sigmaS2", "sigmaE2"
        ]
        out = capsys.readouterr().out.strip().splitlines()
        assert out[0] == "parameter,mean,lo,hi"
        assert len(out) == 6

    def test_interval_nesting(self, tmp_path, capsys):
        p = self.make_samples(tmp_path)
        r50 = do_summarize(p, 0.5)
        r90 = do_summarize(p, 0.9)
        for (_, _, lo5, hi5), (_, _, lo9, hi9) in zip(r50, r90):
            assert lo9 <= lo5 <= hi5 <= hi9

    def test_degenerate_column(self, tmp_path, capsys):
        p = tmp_path / "s.csv"
        lines = ["iteration,sigmaB2,mu,lambda,sigmaS2,sigmaE2"]
        for i in range(5):
            lines.append(f"{i},1.0,2.0,3.0,4.0,5.0")
        p.write_text("\n".join(lines) + "\n")
        rows = do_summarize(str(p), 0.9)
        assert rows[1][2] == rows[1][3] == 2.0

    def test_malformed_header(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("iter,a,b,c,d,e\n0,1,2,3,4,5\n")
        with pytest.raises(IngestionError):
            read_samples(str(p))


class TestStudy:
    def test_single_replicate_report(self, tmp_path):
        cfg = fit_config(tmp_path)
        cfg.update(replicates=1, output_dir=str(tmp_path / "study"))
        do_study(cfg)
        cov = (tmp_path / "study" / "coverage.csv").read_text().splitlines()
        rows = [l for l in cov if l and not l.startswith("#") and not l.startswith("parameter")]
        assert len(rows) == 5
        for row in rows:
            name, n_ok, n_cov, _, _ = row.split(",")
            assert n_ok == "1" and n_cov in ("0", "1")
        reps = (tmp_path / "study" / "replicates.csv").read_text()
        assert ",ok," in reps

    def test_broken_fit_flagged_not_fatal(self, tmp_path):
        # zero retained iterations -> fewer than two samples -> replicate
        # fails, study still writes its report with coverage undefined
        cfg = fit_config(tmp_path)
        cfg.update(
            replicates=1, output_dir=str(tmp_path / "study"), n_iterations=0
        )
        do_study(cfg)
        reps = (tmp_path / "study" / "replicates.csv").read_text()
        assert "failed:" in reps
        cov = (tmp_path / "study" / "coverage.csv").read_text().splitlines()
        rows = [l for l in cov if l and not l.startswith("#") and not l.startswith("parameter")]
        assert all(r.split(",")[1] == "0" for r in rows)


class TestExitCodes:
    def test_ingestion_error_is_exit_2(self, tmp_path, capsys):
        cfgp = write_config(tmp_path / "c.json", dt=0.5, bogus=1)
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--config", cfgp])
        assert exc.value.code == 2

    def test_empty_track_is_exit_2(self, tmp_path, capsys):
        track = tmp_path / "t.csv"
        track.write_text("")
        cfg = fit_config(tmp_path)
        cfgp = tmp_path / "c.json"
        cfgp.write_text(json.dumps(cfg))
        with pytest.raises(SystemExit) as exc:
            main(["fit", "--config", str(cfgp), "--track", str(track)])
        assert exc.value.code == 2

    def test_success_returns_zero(self, tmp_path, capsys):
        cfg = sim_config(tmp_path)
        cfgp = tmp_path / "c.json"
        cfgp.write_text(json.dumps(cfg))
        assert main(["simulate", "--config", str(cfgp)]) == 0
        assert (tmp_path / "track.csv").exists()
