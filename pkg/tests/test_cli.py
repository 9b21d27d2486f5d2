import json
import os
from pathlib import Path

import numpy as np
import pytest

from navformer import envsim as es
from navformer.checkpoint import load_checkpoint, save_checkpoint
from navformer.cli import main
from navformer.model import ModelConfig, ModelParams


def gen(tmp_path, sub="env", **extras):
    out = tmp_path / sub
    argv = ["gen-env", "--seed", "5", "--nodes", "10", "--episodes", "8",
            "--val-episodes", "4", "--out", str(out),
            "--landmarks", "12", "--feat-dim", "8", "--rep-factor", "2",
            "--min-hops", "1", "--max-hops", "3", "--min-dist", "0",
            "--baseline-trials", "2"]
    for k, v in extras.items():
        argv += [f"--{k}", str(v)]
    assert main(argv) == 0
    return out


def write_config(tmp_path, env_dir, **train_overrides):
    cfg = {
        "seed": 11,
        "train_suite": str(env_dir / "suite_train.json"),
        "val_suite": str(env_dir / "suite_val.json"),
        "model": {"hidden": 16, "n_heads": 2, "head_dim": 8, "ffn_dim": 24,
                  "n_layers": 1},
        "train": {"iterations": 8, "batch_size": 2, "eval_every": 4,
                  "checkpoint_every": 8, "max_steps": 5, **train_overrides},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


class TestGenEnv:
    def test_deterministic_byte_identical(self, tmp_path):
        a = gen(tmp_path, "a")
        b = gen(tmp_path, "b")
        assert (a / "suite_train.json").read_bytes() == (b / "suite_train.json").read_bytes()
        assert (a / "suite_val.json").read_bytes() == (b / "suite_val.json").read_bytes()

    def test_writes_summary_and_config_echo(self, tmp_path, capsys):
        out = gen(tmp_path)
        captured = capsys.readouterr().out
        assert "random-walk baseline SR" in captured
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["command"] == "gen-env" and resolved["seed"] == 5
        suite = es.load_suite(out / "suite_train.json")
        assert suite.baseline_sr is not None

    def test_seed_env_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("RVB_SEED", "5")
        out = tmp_path / "envfb"
        assert main(["gen-env", "--nodes", "10", "--episodes", "4",
                     "--val-episodes", "0", "--out", str(out),
                     "--landmarks", "12", "--feat-dim", "8", "--rep-factor", "2",
                     "--min-hops", "1", "--max-hops", "3", "--min-dist", "0",
                     "--baseline-trials", "1"]) == 0
        assert (out / "suite_train.json").exists()

    def test_missing_seed_is_config_error(self, tmp_path, monkeypatch):
        monkeypatch.delenv("RVB_SEED", raising=False)
        assert main(["gen-env", "--out", str(tmp_path / "x")]) == 2


class TestTrainEval:
    def test_train_then_eval_smoke(self, tmp_path, capsys):
        env_dir = gen(tmp_path)
        cfg_path = write_config(tmp_path, env_dir)
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert (out / "stats.csv").exists()
        assert (out / "ckpt_final.bin").exists()
        assert (out / "ckpt_best.bin").exists()
        assert (out / "resolved_config.json").exists()
        stats = (out / "stats.csv").read_text().splitlines()
        assert stats[0] == "iteration,loss_rl,loss_il,loss_critic,train_SR,val_SR,val_SPL,val_nDTW"
        assert len(stats) == 9  # header + 8 iterations
        for line in stats[1:]:
            assert all(cell != "" for cell in line.split(","))

        ev_out = tmp_path / "eval"
        code = main(["eval", "--checkpoint", str(out / "ckpt_final.bin"),
                     "--suite", str(env_dir / "suite_val.json"),
                     "--out", str(ev_out), "--max-steps", "5"])
        assert code == 0
        assert (ev_out / "metrics.csv").exists()
        assert (ev_out / "traces.jsonl").exists()
        table = capsys.readouterr().out
        assert "SR" in table
        first = json.loads((ev_out / "traces.jsonl").read_text().splitlines()[0])
        assert {"episode_id", "trajectory", "steps", "stopped"} <= set(first)
        assert {"t", "candidate_nodes", "p_a", "action", "state_checksum"} <= set(first["steps"][0])

    def test_train_determinism_bit_identical_stats(self, tmp_path):
        env_dir = gen(tmp_path)
        cfg_path = write_config(tmp_path, env_dir)
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(["train", "--config", str(cfg_path), "--out", str(out1)]) == 0
        assert main(["train", "--config", str(cfg_path), "--out", str(out2)]) == 0
        assert (out1 / "stats.csv").read_bytes() == (out2 / "stats.csv").read_bytes()
        assert (out1 / "ckpt_final.bin").read_bytes() == (out2 / "ckpt_final.bin").read_bytes()

    def test_unknown_config_key_rejected(self, tmp_path):
        env_dir = gen(tmp_path)
        cfg = {"train_suite": str(env_dir / "suite_train.json"), "bogus": 1}
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(cfg), encoding="utf-8")
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_bad_nested_value_rejected(self, tmp_path):
        env_dir = gen(tmp_path)
        cfg = {"seed": 1, "train_suite": str(env_dir / "suite_train.json"),
               "train": {"rl_fraction": 1.5}}
        p = tmp_path / "bad2.json"
        p.write_text(json.dumps(cfg), encoding="utf-8")
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o2")]) == 2

    def test_missing_config_file_is_io_error(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "o3")]) == 4

    def test_eval_empty_suite_errors_without_outputs(self, tmp_path):
        env_dir = gen(tmp_path)
        cfg_path = write_config(tmp_path, env_dir)
        out = tmp_path / "run2"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        suite = es.load_suite(env_dir / "suite_train.json")
        suite.episodes = []
        es.save_suite(suite, tmp_path / "empty.json")
        ev_out = tmp_path / "eval_empty"
        code = main(["eval", "--checkpoint", str(out / "ckpt_final.bin"),
                     "--suite", str(tmp_path / "empty.json"), "--out", str(ev_out)])
        assert code == 2
        assert not ev_out.exists()

    def test_eval_dimension_mismatch_rejected(self, tmp_path):
        env_dir = gen(tmp_path)
        other = gen(tmp_path, "other", **{"feat-dim": 16})
        cfg_path = write_config(tmp_path, env_dir)
        out = tmp_path / "run3"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        code = main(["eval", "--checkpoint", str(out / "ckpt_final.bin"),
                     "--suite", str(other / "suite_train.json"),
                     "--out", str(tmp_path / "ev3")])
        assert code == 2


class TestLearningOnBundledFixture:
    def test_train_then_eval_beats_random_baseline(self, tmp_path):
        """500 iterations on a small 10-node fixture must lift greedy SR
        strictly above the random-walk baseline printed by gen-env."""
        env_dir = tmp_path / "env"
        assert main(["gen-env", "--seed", "17", "--nodes", "10", "--episodes", "60",
                     "--val-episodes", "12", "--out", str(env_dir),
                     "--landmarks", "12", "--feat-dim", "8", "--rep-factor", "2",
                     "--min-hops", "1", "--max-hops", "3", "--min-dist", "0",
                     "--baseline-trials", "10", "--max-steps", "6"]) == 0
        suite = es.load_suite(env_dir / "suite_train.json")
        baseline = suite.baseline_sr
        cfg = {"seed": 3,
               "train_suite": str(env_dir / "suite_train.json"),
               "val_suite": str(env_dir / "suite_val.json"),
               "model": {"hidden": 16, "n_heads": 2, "head_dim": 8,
                         "ffn_dim": 24, "n_layers": 1},
               "train": {"iterations": 500, "batch_size": 4, "eval_every": 250,
                         "checkpoint_every": 500, "max_steps": 6}}
        cfg_path = tmp_path / "learn.json"
        cfg_path.write_text(json.dumps(cfg), encoding="utf-8")
        out = tmp_path / "train"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        last = (out / "stats.csv").read_text().splitlines()[-1].split(",")
        train_sr = float(last[4])
        assert train_sr > baseline, f"SR {train_sr} vs baseline {baseline}"


class TestDumpAttention:
    def test_dump_schema_and_progress_files(self, tmp_path, capsys):
        env_dir = gen(tmp_path)
        cfg_path = write_config(tmp_path, env_dir)
        out = tmp_path / "run4"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        dump = tmp_path / "dump"
        code = main(["dump-attention", "--checkpoint", str(out / "ckpt_final.bin"),
                     "--suite", str(env_dir / "suite_val.json"),
                     "--out", str(dump), "--max-steps", "5", "--limit", "3"])
        assert code == 0
        files = sorted(dump.glob("attention_ep*.csv"))
        assert len(files) == 3
        header = files[0].read_text().splitlines()[0]
        assert header == "step,token_role,token_index,mean_score,mean_weight"
        roles = {line.split(",")[1] for line in files[0].read_text().splitlines()[1:]}
        assert {"language", "scene"} <= roles
        assert (dump / "progress_centroid.csv").exists()
        assert (dump / "progress_summary.csv").exists()
        assert "mean progress rank correlation" in capsys.readouterr().out


class TestCheckpointRoundTrip:
    def test_exact_round_trip(self, tmp_path):
        cfg = ModelConfig(vocab_size=19, hidden=16, n_heads=2, head_dim=8,
                          ffn_dim=24, n_layers=1, scene_feat_dim=8,
                          obj_feat_dim=8, dir_dim=8)
        params = ModelParams(cfg, seed=3)
        # make values non-trivial
        for t in params.named().values():
            t.data += np.random.default_rng(0).standard_normal(t.data.shape)
        path = tmp_path / "ck.bin"
        save_checkpoint(params, path, extra_meta={"seed": 3})
        loaded, extra = load_checkpoint(path)
        assert extra == {"seed": 3}
        assert loaded.config == params.config
        for (na, a), (nb, b) in zip(sorted(params.named().items()),
                                    sorted(loaded.named().items())):
            assert na == nb
            assert a.data.tobytes() == b.data.tobytes()

    def test_corrupt_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"XXXX" + b"\0" * 32)
        from navformer.autodiff import ContractError
        with pytest.raises(ContractError):
            load_checkpoint(p)
