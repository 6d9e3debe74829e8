"""Tests for the benchmark command line: config handling, artifacts,
determinism, and exit codes."""

import json

import numpy as np
import pytest

from flowfilter import cli
from flowfilter import models as md


def write_config(path, text):
    path.write_text(text)
    return str(path)


SMALL = """
[experiment]
kind = lgssm1d
variant = aesmc-bootstrap
seeds = 0,1
val_size = 4
test_size = 4
[filter]
n_particles = 25
[training]
iterations = 3
k_sequences = 2
horizon = 8
val_every = 2
val_count = 3
"""


@pytest.fixture
def small_cfg(tmp_path):
    return write_config(tmp_path / "c.ini", SMALL)


class TestConfig:
    def test_defaults_without_file(self):
        cfg = cli.load_config(None)
        assert cfg.kind == "lgssm1d"
        assert cfg.seeds == (0, 1, 2, 3, 4)
        assert (cfg.train_size, cfg.val_size, cfg.test_size) == (0, 50, 50)
        assert cfg.filter.n_particles == 100
        assert cfg.filter.ess_min == 50.0

    def test_file_and_overrides(self, small_cfg):
        cfg = cli.load_config(small_cfg, seed=9, out="elsewhere")
        assert cfg.seeds == (9,)
        assert cfg.out == "elsewhere"
        assert cfg.iterations == 3
        assert cfg.filter.n_particles == 25

    def test_blank_value_keeps_default(self, tmp_path):
        path = write_config(tmp_path / "c.ini",
                            "[training]\niterations =\nlr = 0.01\n")
        cfg = cli.load_config(path)
        assert cfg.iterations == 500
        assert cfg.lr == 0.01

    def test_unknown_section_rejected(self, tmp_path):
        path = write_config(tmp_path / "c.ini", "[optimizer]\nlr = 1\n")
        with pytest.raises(cli.ConfigError, match="unknown config section"):
            cli.load_config(path)

    def test_unknown_key_rejected(self, tmp_path):
        path = write_config(tmp_path / "c.ini", "[training]\nlr2 = 1\n")
        with pytest.raises(cli.ConfigError, match="unknown key"):
            cli.load_config(path)

    def test_bad_value_rejected(self, tmp_path):
        path = write_config(tmp_path / "c.ini",
                            "[filter]\nn_particles = many\n")
        with pytest.raises(cli.ConfigError, match="bad value"):
            cli.load_config(path)

    def test_variant_compatibility(self, tmp_path):
        path = write_config(tmp_path / "c.ini",
                            "[experiment]\nkind = disk\nvariant = aesmc\n")
        with pytest.raises(cli.ConfigError, match="disk"):
            cli.load_config(path)

    def test_dimension_rules(self, tmp_path):
        p1 = write_config(tmp_path / "a.ini",
                          "[experiment]\nkind = lgssm1d\ndimension = 3\n")
        with pytest.raises(cli.ConfigError, match="one-dimensional"):
            cli.load_config(p1)
        p2 = write_config(tmp_path / "b.ini",
                          "[experiment]\nkind = lgssm-multi\n")
        with pytest.raises(cli.ConfigError, match="dimension >= 2"):
            cli.load_config(p2)

    def test_seed_list_rules(self, tmp_path):
        p1 = write_config(tmp_path / "a.ini", "[experiment]\nseeds = 1,1\n")
        with pytest.raises(cli.ConfigError, match="duplicates"):
            cli.load_config(p1)
        p2 = write_config(tmp_path / "b.ini", "[experiment]\nseeds = -1,2\n")
        with pytest.raises(cli.ConfigError, match="non-negative"):
            cli.load_config(p2)

    def test_bad_filter_settings(self, tmp_path):
        path = write_config(tmp_path / "c.ini", "[filter]\nepsilon = 0\n")
        with pytest.raises(cli.ConfigError, match="filter"):
            cli.load_config(path)

    def test_paper_scale_upgrades_defaults(self):
        cfg = cli.load_config(None, paper_scale=True)
        assert cfg.seeds == tuple(range(50))
        assert (cfg.val_size, cfg.test_size) == (1000, 1000)
        assert cfg.seeds_per_cell == 50

    def test_paper_scale_respects_explicit_settings(self, tmp_path):
        path = write_config(tmp_path / "c.ini",
                            "[experiment]\nseeds = 3,4\nval_size = 7\n")
        cfg = cli.load_config(path, paper_scale=True)
        assert cfg.seeds == (3, 4)
        assert cfg.val_size == 7
        assert cfg.test_size == 1000

    def test_disk_sizes(self, tmp_path):
        path = write_config(tmp_path / "c.ini", "[experiment]\nkind = disk\n")
        cfg = cli.load_config(path)
        assert (cfg.train_size, cfg.val_size, cfg.test_size) == (60, 10, 10)
        assert cfg.dimension == 2

    def test_digest_ignores_out_but_tracks_settings(self, small_cfg):
        a = cli.config_digest(cli.load_config(small_cfg, out="x"))
        b = cli.config_digest(cli.load_config(small_cfg, out="y"))
        c = cli.config_digest(cli.load_config(small_cfg, seed=3))
        assert a == b
        assert a != c


class TestExitCodes:
    def test_config_error_is_2(self, tmp_path, capsys):
        bad = write_config(tmp_path / "c.ini", "[nope]\nx = 1\n")
        rc = cli.main(["simulate", "--config", bad, "--out", str(tmp_path)])
        assert rc == 2
        assert "config error" in capsys.readouterr().err

    def test_simulate_convergence_kind_is_2(self, tmp_path):
        cfgp = write_config(tmp_path / "c.ini",
                            "[experiment]\nkind = convergence\n")
        rc = cli.main(["simulate", "--config", cfgp, "--out", str(tmp_path)])
        assert rc == 2

    def test_evaluate_needs_checkpoint_or_truth(self, tmp_path, small_cfg):
        rc = cli.main(["evaluate", "--config", small_cfg,
                       "--out", str(tmp_path / "e")])
        assert rc == 2
        rc = cli.main(["evaluate", "--config", small_cfg, "--at-truth",
                       "--checkpoint", "x.ckpt",
                       "--out", str(tmp_path / "e")])
        assert rc == 2

    def test_resume_needs_single_seed(self, tmp_path, small_cfg):
        rc = cli.main(["train", "--config", small_cfg,
                       "--resume", "x.ckpt", "--out", str(tmp_path / "r")])
        assert rc == 2

    def test_diverged_training_is_3(self, tmp_path, capsys):
        cfgp = write_config(tmp_path / "c.ini", """
[experiment]
variant = aesmc-bootstrap
[filter]
n_particles = 16
[training]
iterations = 6
k_sequences = 2
horizon = 5
lr = 1e6
val_count = 2
""")
        rc = cli.main(["train", "--config", cfgp,
                       "--out", str(tmp_path / "run"), "--seed", "0"])
        assert rc == 3
        report = json.loads(
            (tmp_path / "run" / "seed000" / "report.json").read_text())
        assert report["aborted"].startswith("diverged")


class TestSimulate:
    def test_artifacts_and_manifest(self, tmp_path, small_cfg):
        out = tmp_path / "data"
        assert cli.main(["simulate", "--config", small_cfg,
                         "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["splits"]["train"]["size"] == 0
        assert not (out / "train.nfd").exists()
        for split in ("val", "test"):
            entry = manifest["splits"][split]
            assert entry["size"] == 4
            assert cli._sha256(out / entry["path"]) == entry["sha256"]
        ds = md.load_dataset(out / "val.nfd")
        assert ds.observations.shape == (4, 9, 1)

    def test_byte_identical_reruns(self, tmp_path, small_cfg):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        cli.main(["simulate", "--config", small_cfg, "--out", str(out_a)])
        cli.main(["simulate", "--config", small_cfg, "--out", str(out_b)])
        for name in ("val.nfd", "test.nfd", "val.csv", "manifest.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_disk_split_has_actions(self, tmp_path):
        cfgp = write_config(tmp_path / "c.ini", """
[experiment]
kind = disk
train_size = 5
val_size = 2
test_size = 2
[training]
horizon = 6
""")
        out = tmp_path / "d"
        assert cli.main(["simulate", "--config", cfgp,
                         "--out", str(out)]) == 0
        ds = md.load_dataset(out / "train.nfd")
        assert ds.actions.shape == (5, 6, 2)


class TestTrain:
    def test_artifacts(self, tmp_path, small_cfg):
        out = tmp_path / "run"
        assert cli.main(["train", "--config", small_cfg,
                         "--out", str(out)]) == 0
        for seed in ("seed000", "seed001"):
            for name in ("train_curve.csv", "report.json", "best.ckpt",
                         "last.ckpt"):
                assert (out / seed / name).exists()
        lines = (out / "seed000" / "train_curve.csv").read_text().splitlines()
        assert lines[0].startswith("# config=")
        assert lines[1].split(",")[:2] == ["iteration", "loss"]
        # iterations 0..2 carry losses; the final row is validation-only
        last = lines[-1].split(",")
        assert last[0] == "3" and last[1] == ""
        assert last[2] != ""

    def test_summary_has_aggregate_rows(self, tmp_path, small_cfg):
        out = tmp_path / "run"
        cli.main(["train", "--config", small_cfg, "--out", str(out)])
        rows = (out / "summary.csv").read_text().splitlines()
        seeds = [r.split(",")[0] for r in rows[2:]]
        assert seeds == ["0", "1", "mean", "std"]
        blob = json.loads((out / "summary.json").read_text())
        assert set(blob["seeds"]) == {"seed000", "seed001"}

    def test_param_count_differs_between_variants(self, tmp_path, small_cfg):
        """The flow-proposal variant learns proposal parameters on top of the
        model coefficients; the bootstrap variant has none."""
        cfg = cli.load_config(small_cfg)
        store_b = cli.ParamStore()
        cli.build_variant(cfg, store_b, 0)
        cfg.variant = "nf-dpf"
        store_f = cli.ParamStore()
        cli.build_variant(cfg, store_f, 0)
        prop_b = [n for n in store_b.names() if "proposal" in n]
        prop_f = [n for n in store_f.names() if "proposal" in n]
        assert prop_b == []
        assert prop_f != []

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        base = """
[experiment]
variant = aesmc-bootstrap
[filter]
n_particles = 16
[training]
iterations = %d
k_sequences = 2
horizon = 6
val_every = 3
val_count = 2
lr = 0.01
"""
        full_cfg = write_config(tmp_path / "full.ini", base % 6)
        half_cfg = write_config(tmp_path / "half.ini", base % 3)
        out_full = tmp_path / "full"
        out_half = tmp_path / "half"
        assert cli.main(["train", "--config", full_cfg, "--seed", "0",
                         "--out", str(out_full)]) == 0
        assert cli.main(["train", "--config", half_cfg, "--seed", "0",
                         "--out", str(out_half)]) == 0
        assert cli.main(["train", "--config", half_cfg, "--seed", "0",
                         "--out", str(out_half), "--resume",
                         str(out_half / "seed000" / "last.ckpt")]) == 0
        full = json.loads(
            (out_full / "seed000" / "report.json").read_text())
        part = json.loads(
            (out_half / "seed000" / "report.json").read_text())
        assert part["start_iteration"] == 3
        # the resumed half reproduces the tail of the uninterrupted run
        np.testing.assert_array_equal(part["loss"], full["loss"][3:])
        assert part["val_loss"][-1] == full["val_loss"][-1]

    def test_resume_seed_mismatch_is_2(self, tmp_path, small_cfg):
        out = tmp_path / "run"
        assert cli.main(["train", "--config", small_cfg, "--seed", "0",
                         "--out", str(out)]) == 0
        rc = cli.main(["train", "--config", small_cfg, "--seed", "1",
                       "--out", str(out),
                       "--resume", str(out / "seed000" / "last.ckpt")])
        assert rc == 2

    def test_fixed_pool_smaller_than_batch_is_2(self, tmp_path):
        cfgp = write_config(tmp_path / "c.ini", """
[experiment]
train_size = 3
[training]
iterations = 1
k_sequences = 10
horizon = 5
""")
        rc = cli.main(["train", "--config", cfgp, "--seed", "0",
                       "--out", str(tmp_path / "run")])
        assert rc == 2


class TestEvaluate:
    def run_small_train(self, tmp_path, small_cfg):
        out = tmp_path / "run"
        assert cli.main(["train", "--config", small_cfg, "--seed", "0",
                         "--out", str(out)]) == 0
        return out / "seed000" / "best.ckpt"

    def test_metrics_row_and_idempotence(self, tmp_path, small_cfg):
        ckpt = self.run_small_train(tmp_path, small_cfg)
        out = tmp_path / "ev"
        before = cli._sha256(ckpt)
        assert cli.main(["evaluate", "--config", small_cfg, "--seed", "0",
                         "--checkpoint", str(ckpt),
                         "--out", str(out)]) == 0
        assert cli._sha256(ckpt) == before, "evaluation must not touch ckpt"
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("# config=")
        assert len(lines) == 3
        first = (out / "metrics.csv").read_bytes()
        seq_first = (out / "sequences.csv").read_bytes()
        assert cli.main(["evaluate", "--config", small_cfg, "--seed", "0",
                         "--checkpoint", str(ckpt),
                         "--out", str(out)]) == 0
        assert (out / "metrics.csv").read_bytes() == first
        assert (out / "sequences.csv").read_bytes() == seq_first

    def test_truth_evaluation_tracks_exact_filter(self, tmp_path):
        cfgp = write_config(tmp_path / "c.ini", """
[experiment]
test_size = 8
[filter]
n_particles = 400
resampler = multinomial
[training]
horizon = 20
""")
        out = tmp_path / "ev"
        assert cli.main(["evaluate", "--config", cfgp, "--at-truth",
                         "--seed", "0", "--out", str(out)]) == 0
        blob = json.loads((out / "metrics.json").read_text())
        assert abs(blob["loglik_gap"]) < 1.0
        assert 1.0 < blob["mean_ess"] <= 400.0
        assert blob["param_dist"] == 0.0

    def test_init_checkpoint_reports_initial_distance(self, tmp_path):
        """An untrained flow-variant checkpoint sits at the documented
        starting distance from the generative coefficients."""
        cfgp = write_config(tmp_path / "c.ini", """
[experiment]
variant = nf-dpf
test_size = 3
[filter]
n_particles = 25
[training]
iterations = 0
horizon = 6
val_count = 2
""")
        out = tmp_path / "run"
        assert cli.main(["train", "--config", cfgp, "--seed", "0",
                         "--out", str(out)]) == 0
        ev = tmp_path / "ev"
        assert cli.main(["evaluate", "--config", cfgp, "--seed", "0",
                         "--checkpoint", str(out / "seed000" / "best.ckpt"),
                         "--out", str(ev)]) == 0
        blob = json.loads((ev / "metrics.json").read_text())
        np.testing.assert_allclose(blob["param_dist"], np.sqrt(0.8),
                                   atol=1e-12)

    def test_identity_start_disk_model_has_full_ess(self, tmp_path):
        """At initialization the flow-based disk model scores every particle
        identically, so the mean effective sample size equals N exactly."""
        cfgp = write_config(tmp_path / "c.ini", """
[experiment]
kind = disk
variant = nf-dpf
train_size = 4
val_size = 2
test_size = 3
[filter]
n_particles = 20
[training]
iterations = 0
k_sequences = 2
horizon = 8
val_count = 2
""")
        out = tmp_path / "run"
        assert cli.main(["train", "--config", cfgp, "--seed", "0",
                         "--out", str(out)]) == 0
        ev = tmp_path / "ev"
        assert cli.main(["evaluate", "--config", cfgp, "--seed", "0",
                         "--checkpoint", str(out / "seed000" / "best.ckpt"),
                         "--out", str(ev)]) == 0
        blob = json.loads((ev / "metrics.json").read_text())
        np.testing.assert_allclose(blob["mean_ess"], 20.0, rtol=0, atol=1e-9)

    def test_mismatched_checkpoint_is_2(self, tmp_path, small_cfg):
        ckpt = self.run_small_train(tmp_path, small_cfg)
        other = write_config(tmp_path / "o.ini", SMALL.replace(
            "variant = aesmc-bootstrap", "variant = nf-dpf"))
        rc = cli.main(["evaluate", "--config", other, "--seed", "0",
                       "--checkpoint", str(ckpt),
                       "--out", str(tmp_path / "ev")])
        assert rc == 2


class TestConvergence:
    def test_grid_probe_and_slopes(self, tmp_path):
        cfgp = write_config(tmp_path / "c.ini", """
[convergence]
grid = 25,50,100
seeds_per_cell = 20
horizon = 20
probe_particles = 100
probe_epsilons = 10.0
""")
        out = tmp_path / "conv"
        assert cli.main(["convergence", "--config", cfgp, "--seed", "0",
                         "--out", str(out)]) == 0
        lines = (out / "convergence.csv").read_text().splitlines()
        assert lines[0].startswith("# config=")
        rows = [r.split(",") for r in lines[2:]]
        assert len(rows) == 3 * 2 * 2      # grid x arms x functionals
        med = {(r[0], r[1], int(r[2])): float(r[4]) for r in rows}
        ot_x = [med[("x", "ot", n)] for n in (25, 50, 100)]
        assert ot_x[0] > ot_x[1] > ot_x[2], "error must shrink with N"

        blob = json.loads((out / "summary.json").read_text())
        assert set(blob["slopes"]) == {"x/ot", "x/multinomial",
                                       "tanh/ot", "tanh/multinomial"}
        assert blob["slopes"]["x/ot"] < 0.0

        probe = [r.split(",") for r in
                 (out / "epsilon_probe.csv").read_text().splitlines()[2:]]
        assert len(probe) == 2
        sched_mse, large_mse = float(probe[0][4]), float(probe[1][4])
        assert float(probe[1][3]) == 10.0
        assert large_mse > sched_mse, \
            "over-regularized transport must blur the posterior"
