import numpy as np
import pytest

from binspot.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


TRAIN_FAST = [
    "train", "--toy", "--per-class", "8", "--epochs", "2", "--teacher-epochs", "1",
    "--batch-size", "8", "--mem-back", "2", "--mem-ahead", "1",
    "--backbone-dim", "8", "--hidden-dim", "12", "--head-channels", "3,3",
]


class TestGenData:
    def test_writes_loadable_file(self, tmp_path, capsys):
        out = tmp_path / "toy.bftr"
        code, _, _ = run(capsys, "--seed", "1", "gen-data", "--out", str(out),
                         "--per-class", "5")
        assert code == 0
        from binspot.data import load_features

        ds = load_features(out)
        assert len(ds) == 20

    def test_deterministic_bytes(self, tmp_path, capsys):
        a, b = tmp_path / "a.bftr", tmp_path / "b.bftr"
        run(capsys, "--seed", "9", "gen-data", "--out", str(a), "--per-class", "4")
        run(capsys, "--seed", "9", "gen-data", "--out", str(b), "--per-class", "4")
        assert a.read_bytes() == b.read_bytes()


class TestTrainEval:
    def test_pipeline_and_determinism(self, tmp_path, capsys):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        for out in (out1, out2):
            code, _, err = run(capsys, "--seed", "5", *TRAIN_FAST,
                               "--out-dir", str(out))
            assert code == 0, err
            assert (out / "student.ckpt").exists()
            assert (out / "teacher.ckpt").exists()
        assert (out1 / "metrics.csv").read_bytes() == (out2 / "metrics.csv").read_bytes()

    def test_gen_data_then_train_then_eval(self, tmp_path, capsys):
        feats = tmp_path / "toy.bftr"
        run(capsys, "--seed", "2", "gen-data", "--out", str(feats),
            "--per-class", "8")
        out = tmp_path / "run"
        code, _, err = run(capsys, "--seed", "2", "train", "--features", str(feats),
                           "--toy", "--epochs", "1", "--teacher-epochs", "1",
                           "--batch-size", "8", "--mem-back", "2", "--mem-ahead", "1",
                           "--backbone-dim", "8", "--hidden-dim", "12",
                           "--head-channels", "3,3", "--out-dir", str(out))
        assert code == 0, err
        code, stdout, _ = run(capsys, "eval", "--checkpoint",
                              str(out / "student.ckpt"), "--features", str(feats),
                              "--split", "train")
        assert code == 0
        lines = stdout.strip().splitlines()
        assert lines[0] == "delta,accuracy"
        assert len(lines) == 4  # header + one row per delta

    def test_eval_single_delta(self, tmp_path, capsys):
        out = tmp_path / "run"
        run(capsys, "--seed", "3", *TRAIN_FAST, "--out-dir", str(out))
        code, stdout, _ = run(capsys, "--seed", "3", "eval", "--checkpoint",
                              str(out / "student.ckpt"), "--toy", "--per-class", "4",
                              "--delta", "4")
        assert code == 0
        lines = stdout.strip().splitlines()
        assert len(lines) == 2 and lines[1].startswith("4,")

    def test_eval_rejects_malformed_checkpoint(self, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOTACKPT" * 4)
        code, _, err = run(capsys, "eval", "--checkpoint", str(bad), "--toy")
        assert code == 1
        assert "magic" in err

    def test_eval_requires_exactly_one_model_source(self, capsys):
        code, _, err = run(capsys, "eval", "--toy")
        assert code == 1


class TestExportPacked:
    def test_export_then_packed_eval_matches(self, tmp_path, capsys):
        out = tmp_path / "run"
        run(capsys, "--seed", "4", *TRAIN_FAST, "--out-dir", str(out))
        bundle = tmp_path / "m.bfsp"
        code, _, _ = run(capsys, "export", "--checkpoint",
                         str(out / "student.ckpt"), "--out", str(bundle))
        assert code == 0
        code, out_ckpt, _ = run(capsys, "--seed", "4", "eval", "--checkpoint",
                                str(out / "student.ckpt"), "--toy", "--per-class", "6")
        assert code == 0
        code, out_packed, _ = run(capsys, "--seed", "4", "eval", "--packed",
                                  str(bundle), "--toy", "--per-class", "6")
        assert code == 0
        assert out_ckpt == out_packed


class TestBench:
    def test_stdout_csv(self, capsys):
        code, stdout, _ = run(capsys, "bench", "--sizes", "4x128x4", "--repeats", "1")
        assert code == 0
        lines = stdout.strip().splitlines()
        assert lines[0].startswith("size_m,size_n,size_k,")
        assert lines[1].startswith("4,128,4,")

    def test_bad_size_string(self, capsys):
        code, _, err = run(capsys, "bench", "--sizes", "4x128")
        assert code == 1

    def test_thread_cap_env(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("BINSPOT_THREADS", "2")
        out = tmp_path / "bench.csv"
        code, _, _ = run(capsys, "bench", "--sizes", "8x128x8", "--repeats", "1",
                         "--out", str(out))
        assert code == 0
        assert out.read_text().startswith("size_m")


class TestFlops:
    def test_dual_scale_report(self, capsys):
        code, stdout, _ = run(capsys, "flops", "--mode", "dual_scale", "--delta", "1")
        assert code == 0
        assert stdout.startswith("part,name,float_flops,bin_flops")

    def test_backbone_scaling_visible(self, capsys):
        _, d1, _ = run(capsys, "flops", "--mode", "single_scale", "--delta", "1")
        _, d4, _ = run(capsys, "flops", "--mode", "single_scale", "--delta", "4")

        def backbone_total(text):
            return sum(
                float(line.split(",")[3])
                for line in text.strip().splitlines()[1:]
                if line.startswith("backbone,") and ".matmul" in line.split(",")[1]
                or (line.startswith("backbone,") and ".taps" in line.split(",")[1])
            )

        assert backbone_total(d4) == pytest.approx(backbone_total(d1) / 4)


class TestAnalyzeFreq:
    def test_writes_both_csvs(self, tmp_path, capsys):
        out = tmp_path / "run"
        run(capsys, "--seed", "6", *TRAIN_FAST, "--out-dir", str(out))
        code, _, err = run(capsys, "--seed", "6", "analyze-freq",
                           "--checkpoint", str(out / "student.ckpt"),
                           "--teacher", str(out / "teacher.ckpt"),
                           "--toy", "--per-class", "4", "--sample", "8",
                           "--out-dir", str(out))
        assert code == 0, err
        freq = (out / "freq.csv").read_text()
        qerr = (out / "qerr.csv").read_text()
        assert freq.startswith("model,layer,p_low,p_high")
        assert qerr.startswith("layer,mse_single,mse_dual")
        for line in qerr.strip().splitlines()[1:]:
            _, single, dual = line.split(",")
            assert float(dual) <= float(single) + 1e-12


class TestErrors:
    def test_unknown_flag_is_error(self, capsys):
        code, _, err = run(capsys, "bench", "--no-such-flag")
        assert code == 1

    def test_unknown_command_is_error(self, capsys):
        code, _, _ = run(capsys, "frobnicate")
        assert code == 1

    def test_missing_data_source(self, capsys):
        code, _, err = run(capsys, "train")
        assert code == 1
        assert "--features or --toy" in err

    def test_help_lists_subcommands(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["--help"])
        assert e.value.code == 0
        stdout = capsys.readouterr().out
        for cmd in ("train", "eval", "bench", "flops", "analyze-freq",
                    "gen-data", "export"):
            assert cmd in stdout
