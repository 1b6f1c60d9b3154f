import json

import numpy as np
import pytest

from gsreid import config as C
from gsreid.cli import RUN_FILES, main, read_epochs_csv
from gsreid.metrics import METRIC_COLUMNS
from gsreid.synth import SynthConfig, generate, write_features, write_labels

TINY = """\
run.seed = 3
synth.num_identities = 6
synth.samples_per_identity = 8
synth.obs_dim = 12
synth.num_cameras = 2
train.epochs = 3
train.batch_size = 16
train.dim_out = 6
train.lr = 0.05
affinity.k = 6
sampler.kind = {kind}
sampler.N = 16
"""


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


@pytest.fixture
def tiny_run(tmp_path):
    cfg = write_cfg(tmp_path, TINY.format(kind="group"))
    out = tmp_path / "run"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    return cfg, out


class TestConfig:
    def test_defaults(self):
        cfg = C.loads("")
        t = cfg.train
        assert (t.tau, t.momentum, t.k, t.dbscan.eps, t.dbscan.min_pts) == (0.05, 0.2, 30, 0.6, 4)
        assert (t.batch_size, t.lr, t.lr_decay, t.epochs) == (64, 3.5e-4, 20, 50)

    def test_preset(self):
        cfg = C.loads("run.preset = bench-50  # desk scale\n")
        assert cfg.train.epochs == 20
        s = cfg.synth
        assert (s.num_identities, s.samples_per_identity, s.obs_dim, s.num_cameras) == (50, 20, 32, 4)
        assert (s.identity_noise, s.camera_offset_scale, cfg.train.dim_out) == (0.35, 0.25, 16)

    def test_file_overrides_preset_in_any_order(self):
        cfg = C.loads("train.epochs = 7\nrun.preset = bench-50\n")
        assert cfg.train.epochs == 7

    def test_unknown_key(self):
        with pytest.raises(C.ConfigError, match="train.tua"):
            C.loads("train.tua = 0.1\n")

    def test_invalid_value_names_key(self):
        with pytest.raises(C.ConfigError, match=r"train\.tau"):
            C.loads("train.tau = 0\n")
        with pytest.raises(C.ConfigError, match=r"metrics\.retrieval"):
            C.loads("metrics.retrieval = yes\n")

    def test_shuffle_degree(self):
        assert C.loads("sampler.M = all\n").train.sampler.shuffle_degree == "all"
        assert C.loads("sampler.M = 4\n").train.sampler.shuffle_degree == 4

    def test_snapshot_round_trip(self):
        cfg = C.loads("run.preset = bench-50\nsampler.kind = random\nmetrics.retrieval = false\n")
        assert C.loads(cfg.snapshot()).values == cfg.values

    def test_seed_pairs_data_and_training(self):
        cfg = C.loads("run.seed = 9\n")
        assert cfg.synth.seed == 9
        assert C.loads("run.seed = 9\nsynth.seed = 2\n").synth.seed == 2


class TestRun:
    def test_directory_contents(self, tiny_run):
        _, out = tiny_run
        for name in RUN_FILES:
            assert (out / name).exists()
        rows = read_epochs_csv(out / "epochs.csv")
        assert len(rows) == 3
        header = (out / "epochs.csv").read_text().splitlines()[0]
        assert header == ",".join(METRIC_COLUMNS)
        assert json.loads((out / "summary.json").read_text())["final"]["epoch"] == 2

    def test_bad_config_exit_1(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "train.tau = 0\n")
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 1
        assert "train.tau" in capsys.readouterr().err

    def test_missing_config_exit_1(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path / "o")]) == 1

    def test_runtime_error_exit_2(self, tmp_path):
        # PK needs more clusters than six identities can provide
        cfg = write_cfg(tmp_path, TINY.format(kind="pk") + "sampler.P = 40\n")
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_byte_identical(self, tmp_path, tiny_run):
        cfg, out = tiny_run
        again = tmp_path / "again"
        assert main(["run", "--config", cfg, "--out", str(again)]) == 0
        assert (out / "epochs.csv").read_bytes() == (again / "epochs.csv").read_bytes()

    def test_seed_flag_changes_run(self, tmp_path, tiny_run):
        cfg, out = tiny_run
        other = tmp_path / "other"
        assert main(["run", "--config", cfg, "--out", str(other), "--seed", "4"]) == 0
        assert (out / "final_features.bin").read_bytes() != (other / "final_features.bin").read_bytes()
        assert "run.seed = 4" in (other / "config.snapshot").read_text()


class TestEval:
    def test_reproduces_final_row(self, tiny_run, capsys):
        _, out = tiny_run
        capsys.readouterr()
        code = main(["eval", "--features", str(out / "final_features.bin"),
                     "--labels", str(out / "final_labels.csv"), "--config", str(out / "config.snapshot")])
        assert code == 0
        got = json.loads(capsys.readouterr().out)
        final = read_epochs_csv(out / "epochs.csv")[-1]
        for key in ("num_clusters", "num_outliers", "nmi", "purity", "chaos", "intra_var", "inter_var"):
            assert got[key] == final[key], key

    def test_schema_without_queries(self, tiny_run, capsys):
        _, out = tiny_run
        capsys.readouterr()
        main(["eval", "--features", str(out / "final_features.bin"),
              "--labels", str(out / "final_labels.csv"), "--config", str(out / "config.snapshot")])
        got = json.loads(capsys.readouterr().out)
        expected = set(METRIC_COLUMNS) - {"mean_loss", "map", "top1", "top5", "top10"}
        assert set(got) == expected

    def test_with_queries(self, tiny_run, tmp_path, capsys):
        _, out = tiny_run
        (tmp_path / "q.csv").write_text("sample_id\n0\n9\n17\n")
        capsys.readouterr()
        assert main(["eval", "--features", str(out / "final_features.bin"),
                     "--labels", str(out / "final_labels.csv"), "--config", str(out / "config.snapshot"),
                     "--queries", str(tmp_path / "q.csv")]) == 0
        got = json.loads(capsys.readouterr().out)
        assert 0 <= got["map"] <= 1 and got["top1"] <= got["top5"] <= got["top10"]

    def test_length_mismatch(self, tiny_run, tmp_path):
        _, out = tiny_run
        (tmp_path / "l.csv").write_text("sample_id,identity,camera\n0,0,0\n1,0,1\n")
        assert main(["eval", "--features", str(out / "final_features.bin"),
                     "--labels", str(tmp_path / "l.csv"), "--config", str(out / "config.snapshot")]) == 1

    def test_corrupt_features(self, tiny_run, tmp_path):
        _, out = tiny_run
        (tmp_path / "f.bin").write_bytes(b"nope")
        assert main(["eval", "--features", str(tmp_path / "f.bin"),
                     "--labels", str(out / "final_labels.csv"), "--config", str(out / "config.snapshot")]) == 1

    def test_separable_bench_observations(self, tmp_path, capsys):
        # camera-free bench-50 data; k matches the 20 samples per identity
        d = generate(SynthConfig(camera_offset_scale=0.0))
        write_features(tmp_path / "f.bin", d.observations)
        write_labels(tmp_path / "l.csv", d.gt)
        cfg = write_cfg(tmp_path, "run.preset = bench-50\naffinity.k = 20\n")
        capsys.readouterr()
        assert main(["eval", "--features", str(tmp_path / "f.bin"), "--labels", str(tmp_path / "l.csv"),
                     "--config", cfg]) == 0
        got = json.loads(capsys.readouterr().out)
        assert got["num_clusters"] == 50 and got["purity"] == 1.0


class TestCompare:
    def test_self_compare_zero(self, tiny_run, capsys):
        _, out = tiny_run
        capsys.readouterr()
        assert main(["compare", str(out), str(out)]) == 0
        lines = capsys.readouterr().out.splitlines()[1:]
        assert len(lines) == len(METRIC_COLUMNS) - 1
        for line in lines:
            assert line.split()[-1] in ("0", "0.000000", "nan")

    def test_missing_epochs(self, tiny_run, tmp_path):
        _, out = tiny_run
        (tmp_path / "empty").mkdir()
        assert main(["compare", str(out), str(tmp_path / "empty")]) == 1

    def test_module_entry(self, tiny_run):
        import subprocess
        import sys
        _, out = tiny_run
        res = subprocess.run([sys.executable, "-m", "gsreid", "compare", str(out), str(out)],
                             capture_output=True, text=True)
        assert res.returncode == 0 and "nmi" in res.stdout
