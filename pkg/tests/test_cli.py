import numpy as np
import pytest

from maskgrid import cli, config
from maskgrid.checkpoint import load_checkpoint


TINY = dict(enc_layers=1, dec_layers=1, width=16, heads=2,
            vocab_image=64, seq_len_target=16, seq_len_text=8,
            grid_height=4, grid_width=4,
            n_train=24, n_val=8, n_test=8,
            batch_size=4, total_steps=4, eval_interval=2, log_interval=2,
            checkpoint_interval=4, iterations=2,
            bench_repeats=1, bench_warmup=0)


def tiny_args(extra=()):
    sets = [f"--set={k}={v}" for k, v in TINY.items()]
    return sets + list(extra)


def run(argv, capsys=None):
    return cli.main(argv)


@pytest.fixture()
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    rc = run(["gen-data", "--out", "data"] + tiny_args())
    assert rc == 0
    return tmp_path


class TestGenData:
    def test_writes_three_splits(self, workspace):
        for split in ("train", "val", "test"):
            assert (workspace / "data" / f"{split}.txt").exists()

    def test_refuses_overwrite_without_force(self, workspace, capsys):
        rc = run(["gen-data", "--out", "data"] + tiny_args())
        assert rc == cli.EXIT_IO
        assert "--force" in capsys.readouterr().err

    def test_force_overwrites(self, workspace):
        assert run(["gen-data", "--out", "data", "--force"] + tiny_args()) == 0

    def test_invalid_family_lists_valid_ones(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        rc = run(["gen-data", "--out", "data", "--set", "families=plaid"] + tiny_args())
        assert rc == cli.EXIT_CONFIG
        assert "stripes" in capsys.readouterr().err


class TestConfigResolution:
    def test_prints_resolved_config(self, workspace, capsys):
        run(["gen-data", "--out", "data2"] + tiny_args())
        out = capsys.readouterr().out
        assert "resolved config:" in out
        assert "seed = 0" in out

    def test_precedence_flags_over_file_over_defaults(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("seed=7\niterations=3\n")
        cfg = config.resolve_config(config.parse_config_file(f), {"seed": 11})
        assert cfg.seed == 11          # flag wins
        assert cfg.iterations == 3     # file beats default
        assert cfg.candidates == 1     # default

    def test_unknown_key_rejected(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("not_a_key=1\n")
        with pytest.raises(config.ConfigError, match="not_a_key"):
            config.parse_config_file(f)

    def test_bad_config_exit_code(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        rc = run(["gen-data", "--out", "d", "--set", "regime=bogus"] + tiny_args())
        assert rc == cli.EXIT_CONFIG

    def test_missing_corpus_exit_code(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        rc = run(["train", "--out", "runs"] + tiny_args())
        assert rc == cli.EXIT_IO


class TestTrain:
    def test_train_writes_curve_and_checkpoint(self, workspace):
        rc = run(["train", "--regime", "iter_v1", "--out", "runs"] + tiny_args())
        assert rc == 0
        assert (workspace / "runs" / "curve_iter_v1.csv").exists()
        bundle, opt, rng, _ = load_checkpoint(workspace / "runs" / "ckpt_iter_v1.emg")
        assert bundle.step == TINY["total_steps"]
        assert opt is not None and rng is not None

    def test_resume_continues_from_checkpoint(self, workspace):
        run(["train", "--regime", "iter_v1", "--out", "runs"] + tiny_args())
        rc = run(["train", "--regime", "iter_v1", "--out", "runs",
                  "--checkpoint", "runs/ckpt_iter_v1.emg", "--steps", "6"]
                 + [a for a in tiny_args() if "total_steps" not in a])
        assert rc == 0
        bundle, _, _, _ = load_checkpoint(workspace / "runs" / "ckpt_iter_v1.emg")
        assert bundle.step == 6

    def test_ar_schedule_conflict_warns(self, workspace, capsys):
        rc = run(["train", "--regime", "ar", "--train-schedule", "cosine",
                  "--out", "runs_ar"] + tiny_args())
        assert rc == 0
        assert "ignored for the AR regime" in capsys.readouterr().err


class TestDecodeBenchSweeps:
    @pytest.fixture()
    def trained(self, workspace):
        run(["train", "--regime", "iter_v3", "--out", "runs"] + tiny_args())
        return workspace

    def test_decode_single(self, trained):
        rc = run(["decode", "--out", "dec", "--checkpoint", "runs/ckpt_iter_v3.emg",
                  "--algorithm", "revise"] + tiny_args())
        assert rc == 0
        grid = (trained / "dec" / "decode.txt").read_text().split()
        assert len(grid) == 16
        telem = (trained / "dec" / "telemetry.txt").read_text()
        assert "iteration=1" in telem and "revealed=" in telem

    def test_decode_candidates(self, trained):
        rc = run(["decode", "--out", "cand", "--checkpoint", "runs/ckpt_iter_v3.emg",
                  "--candidates", "3", "--gumbel-temp", "1.0",
                  "--set", "sampling=sample"] + tiny_args())
        assert rc == 0
        for i in range(3):
            assert (trained / "cand" / f"candidate_{i:02d}.txt").exists()
        sel = int((trained / "cand" / "selected.txt").read_text())
        assert 0 <= sel < 3

    def test_bench(self, trained, capsys):
        rc = run(["bench", "--out", "bench", "--checkpoint", "runs/ckpt_iter_v3.emg"]
                 + tiny_args())
        assert rc == 0
        out = capsys.readouterr().out
        assert "pass ratio AR:NAR = 16:2" in out
        assert (trained / "bench" / "bench.csv").exists()

    def test_sweep_iterations(self, trained):
        rc = run(["sweep-iterations", "--out", "sw", "--checkpoint",
                  "runs/ckpt_iter_v3.emg", "--set", "sweep_T=1,2"] + tiny_args())
        assert rc == 0
        body = (trained / "sw" / "sweep_iterations.csv").read_text()
        assert body.splitlines()[0].startswith("T,")
        assert len(body.splitlines()) == 3

    def test_sweep_schedules(self, trained):
        rc = run(["sweep-schedules", "--out", "ss", "--set", "sweep_steps=2",
                  "--set", "candidates=1"] + tiny_args())
        assert rc == 0
        body = (trained / "ss" / "sweep_schedules.csv").read_text()
        # 3 regimes x 2 train schedules + 2 inference-schedule rows
        assert len(body.splitlines()) == 9


class TestEntryPoint:
    def test_no_subcommand_is_config_error(self, capsys):
        assert run([]) == cli.EXIT_CONFIG

    def test_bad_set_syntax(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert run(["gen-data", "--set", "noequals"]) == cli.EXIT_CONFIG
