"""CLI behavior: happy paths, config validation, idempotence, cleanup."""

import json
from pathlib import Path

import numpy as np
import pytest

from polyemb import cli, dataio


def run(*argv):
    return cli.main(list(argv))


def dir_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(Path(path).iterdir())
            if p.is_file()}


@pytest.fixture()
def data_dir(tmp_path):
    out = tmp_path / "data"
    code = run("gen-synth", "--out", str(out), "--pairs", "60", "--seed", "3",
               "--feat-dim", "8", "--concepts", "8", "--distractors", "1")
    assert code == 0
    return out


class TestGenSynth:
    def test_default_config_writes_files(self, tmp_path):
        out = tmp_path / "d"
        assert run("gen-synth", "--out", str(out), "--pairs", "30") == 0
        assert (out / "x.pvsf").exists()
        assert (out / "y.pvsf").exists()
        assert (out / "manifest.json").exists()
        assert (out / "resolved_config.json").exists()

    def test_same_seed_bitwise_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        args = ("gen-synth", "--pairs", "25", "--seed", "9")
        assert run(*args, "--out", str(a)) == 0
        assert run(*args, "--out", str(b)) == 0
        assert dir_bytes(a) == dir_bytes(b)

    def test_seed_override_changes_output(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run("gen-synth", "--pairs", "25", "--seed", "1", "--out", str(a)) == 0
        assert run("gen-synth", "--pairs", "25", "--seed", "2", "--out", str(b)) == 0
        assert dir_bytes(a)["x.pvsf"] != dir_bytes(b)["x.pvsf"]

    def test_infeasible_config_fails_with_field_name(self, tmp_path, capsys):
        out = tmp_path / "d"
        code = run("gen-synth", "--out", str(out), "--senses-min", "1",
                   "--shared-max", "2", "--shared-min", "2")
        assert code == 1
        err = capsys.readouterr().err
        assert "shared_max" in err
        assert not out.exists()

    def test_config_file_plus_flag_override(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"synth": {"pairs": 10, "seed": 4}}))
        out = tmp_path / "d"
        assert run("gen-synth", "--config", str(cfg_path), "--out", str(out),
                   "--pairs", "14") == 0
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["synth"]["pairs"] == 14
        assert resolved["synth"]["seed"] == 4
        assert len(dataio.load_dataset(out).x) == 14

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps({"synth": {"bogus_knob": 1}}))
        code = run("gen-synth", "--config", str(cfg_path),
                   "--out", str(tmp_path / "d"))
        assert code == 1
        assert "bogus_knob" in capsys.readouterr().err

    def test_refuses_nonempty_output_dir(self, tmp_path, capsys):
        out = tmp_path / "d"
        out.mkdir()
        (out / "junk.txt").write_text("hi")
        assert run("gen-synth", "--out", str(out), "--pairs", "30") == 1
        assert "not empty" in capsys.readouterr().err
        assert (out / "junk.txt").exists()


@pytest.fixture()
def run_dir(tmp_path, data_dir):
    out = tmp_path / "run"
    code = run("train", "--data", str(data_dir), "--out", str(out),
               "--epochs", "2", "--batch-size", "8", "--seed", "1",
               "--num-heads", "2", "--embed-dim", "8")
    assert code == 0
    return out


class TestTrain:
    def test_outputs_present(self, run_dir):
        assert (run_dir / "checkpoint.pvsf").exists()
        assert (run_dir / "checkpoint.json").exists()
        assert (run_dir / "train_log.jsonl").exists()
        assert (run_dir / "resolved_config.json").exists()

    def test_log_is_one_json_record_per_line(self, run_dir):
        lines = (run_dir / "train_log.jsonl").read_text().splitlines()
        records = [json.loads(line) for line in lines]
        assert sum(1 for r in records if "val_rsum" in r) == 2

    def test_deterministic_runs_bitwise(self, tmp_path, data_dir):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert run("train", "--data", str(data_dir), "--out", str(out),
                       "--epochs", "1", "--batch-size", "8",
                       "--num-heads", "2", "--embed-dim", "8") == 0
            outs.append(dir_bytes(out))
        assert outs[0] == outs[1]


class TestEmbedEval:
    def test_embed_writes_per_instance_embeddings(self, tmp_path, run_dir,
                                                  data_dir):
        out = tmp_path / "emb"
        assert run("embed", "--model", str(run_dir), "--data", str(data_dir),
                   "--out", str(out), "--split", "test") == 0
        records = dataio.read_features(out / "embeddings_x.pvsf")
        ds = dataio.load_dataset(data_dir)
        assert len(records) == len(ds.indices("test"))
        assert records[0][1].shape == (2, 8)

    def test_single_head_model_emits_one_row(self, tmp_path, data_dir):
        rd = tmp_path / "k1run"
        assert run("train", "--data", str(data_dir), "--out", str(rd),
                   "--epochs", "1", "--batch-size", "8", "--num-heads", "1",
                   "--embed-dim", "8") == 0
        out = tmp_path / "emb1"
        assert run("embed", "--model", str(rd), "--data", str(data_dir),
                   "--out", str(out)) == 0
        records = dataio.read_features(out / "embeddings_x.pvsf")
        assert records[0][1].shape == (1, 8)

    def test_eval_from_model_and_from_embeddings_agree(self, tmp_path,
                                                       run_dir, data_dir):
        emb = tmp_path / "emb"
        assert run("embed", "--model", str(run_dir), "--data", str(data_dir),
                   "--out", str(emb)) == 0
        r1 = tmp_path / "direct.json"
        r2 = tmp_path / "indirect.json"
        assert run("eval", "--model", str(run_dir), "--data", str(data_dir),
                   "--report", str(r1)) == 0
        assert run("eval", "--embeddings", str(emb), "--report", str(r2)) == 0
        assert json.loads(r1.read_text()) == json.loads(r2.read_text())

    def test_eval_self_index_is_perfect(self, tmp_path):
        # hand-built embedding dir where x and y sides are identical
        emb = tmp_path / "emb"
        emb.mkdir()
        rng = np.random.default_rng(90)
        z = rng.standard_normal((8, 2, 4))
        pairs_x = [(f"x{i}", z[i]) for i in range(8)]
        pairs_y = [(f"y{i}", z[i]) for i in range(8)]
        dataio.write_features(emb / "embeddings_x.pvsf", pairs_x)
        dataio.write_features(emb / "embeddings_y.pvsf", pairs_y)
        report_path = tmp_path / "rep.json"
        assert run("eval", "--embeddings", str(emb),
                   "--report", str(report_path)) == 0
        report = json.loads(report_path.read_text())
        assert report["rsum"] == 600.0
        assert report["x_to_y"]["r_at"]["1"] == 1.0

    def test_eval_requires_exactly_one_source(self, tmp_path, capsys):
        assert run("eval", "--report", str(tmp_path / "r.json")) == 1
        assert "exactly one" in capsys.readouterr().err

    def test_eval_prints_table(self, tmp_path, run_dir, data_dir, capsys):
        assert run("eval", "--model", str(run_dir), "--data", str(data_dir)) == 0
        out = capsys.readouterr().out
        assert "direction" in out and "x->y" in out and "rsum" in out

    def test_pipeline_idempotent(self, tmp_path, run_dir, data_dir):
        a, b = tmp_path / "e1", tmp_path / "e2"
        for out in (a, b):
            assert run("embed", "--model", str(run_dir), "--data",
                       str(data_dir), "--out", str(out)) == 0
        assert dir_bytes(a) == dir_bytes(b)


class TestHelp:
    @pytest.mark.parametrize("cmd", ["gen-synth", "train", "embed", "eval"])
    def test_every_subcommand_documents_flags(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            run(cmd, "--help")
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "--" in out
