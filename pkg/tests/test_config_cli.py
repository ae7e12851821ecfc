import json
import re

import numpy as np
import pytest

from alp import cli, pipeline
from alp import ndmath as nd
from alp.config import ConfigError, RunConfig, config_hash, parse_config, serialize_config
from alp.downstream import dataset
from alp.worldsim import Pose, TrajectoryLog, generate_split, read_pgm

TINY = """\
# smallest useful run
total_frames = 128
num_envs = 2
window = 64
image_size = 16
channels = 4,8,16
feature_dim = 32
hidden_dim = 32
n_train_scenes = 2
n_test_scenes = 1
max_episode_steps = 40
ppo_epochs = 1
idm_epochs = 1
reward_epochs = 1
label_events = 1
label_budget = 3
finetune_epochs = 1
eval_train_frames = 2
eval_test_frames = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


# ---------------------------------------------------------------- config parsing

def test_empty_config_gives_defaults():
    cfg = parse_config("")
    assert (cfg.gamma, cfg.clip_eps, cfg.entropy_coef) == (0.99, 0.1, 0.01)
    assert (cfg.gae_lambda, cfg.value_coef, cfg.max_grad_norm, cfg.lr) == (0.95, 0.5, 0.5, 2.5e-4)
    assert cfg.idm_steps == 8 and cfg.window == 64 and cfg.ppo_minibatches == 2 and cfg.ppo_epochs == 4
    assert cfg == RunConfig()


def test_bad_value_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_config("# header\nseed = 3\ngamma=abc\n")
    assert info.value.line == 3 and info.value.key == "gamma"
    assert "line 3" in str(info.value)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as info:
        parse_config("gammma = 0.9")
    assert info.value.key == "gammma" and info.value.line == 1


def test_semantic_validation_names_key():
    with pytest.raises(ConfigError) as info:
        parse_config("objectives = simclr\n")
    assert info.value.key == "objectives" and info.value.line == 1
    with pytest.raises(ConfigError):
        parse_config("reward_mode = icm")
    with pytest.raises(ConfigError):
        parse_config("gamma = -1")


def test_round_trip():
    cfg = parse_config(TINY + "objectives = pg, idm, cpc\nalp = false\nreward_mode = crl\n")
    assert cfg.objectives == ("pg", "idm", "cpc") and cfg.channels == (4, 8, 16)
    assert parse_config(serialize_config(cfg)) == cfg
    assert serialize_config(parse_config(serialize_config(cfg))) == serialize_config(cfg)


def test_hash_ignores_output_path_only():
    cfg = parse_config(TINY)
    assert config_hash(cfg) == config_hash(cfg.with_(out_dir="elsewhere"))
    assert config_hash(cfg) != config_hash(cfg.with_(seed=1))
    assert re.fullmatch(r"[0-9a-f]{16}", config_hash(cfg))


def test_ablation_rows_are_valid_configs():
    for objectives in ("pg", "idm", "pg,idm"):
        parse_config(f"objectives = {objectives}")


# ---------------------------------------------------------------- commands

def _train(tiny_config, out, *extra):
    return cli.main(["train-explore", "--config", str(tiny_config), "--out", str(out), *extra])


def test_train_explore_tiny_run(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert _train(tiny_config, out, "--deterministic") == cli.EXIT_OK
    assert "windows=1" in capsys.readouterr().out
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    cfg = parse_config(TINY)
    assert rec["step"] == 128 and rec["config_hash"] == config_hash(cfg)
    assert "wall_time" in rec and {"policy_loss", "value_loss", "entropy", "clip_fraction", "idm_loss"} <= set(rec)
    assert len(dataset.read(out / "dataset.alpd")) == rec["labeled"] > 0
    assert (out / "final.alpw").exists() and (out / "timing.jsonl").exists()
    assert parse_config((out / "config.txt").read_text()) == cfg.with_(out_dir=str(out))


def test_wall_time_recorded_outside_deterministic_mode(tiny_config, tmp_path):
    out = tmp_path / "run"
    assert _train(tiny_config, out) == cli.EXIT_OK
    rec = json.loads((out / "metrics.jsonl").read_text())
    assert isinstance(rec["wall_time"], float)


def test_exit_code_for_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("num_envs = two\n")
    assert cli.main(["train-explore", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert "num_envs" in capsys.readouterr().err
    assert cli.main(["train-explore", "--config", str(tmp_path / "missing.cfg")]) == cli.EXIT_CONFIG


def test_exit_code_for_divergence(tiny_config, tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(pipeline, "rnd_reward", lambda frames, state: np.full(len(frames), np.nan))
    assert _train(tiny_config, tmp_path / "run") == cli.EXIT_DIVERGED
    assert "step" in capsys.readouterr().err


def test_finetune_random_and_pretrained(tiny_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert _train(tiny_config, out, "--deterministic") == cli.EXIT_OK
    capsys.readouterr()
    ft = tmp_path / "ft"
    for ckpt in ("random", str(out / "final.alpw")):
        code = cli.main(["finetune", "--config", str(tiny_config), "--checkpoint", ckpt,
                         "--dataset", str(out / "dataset.alpd"), "--out", str(ft), "--deterministic"])
        assert code == cli.EXIT_OK
        reports = [json.loads(line) for line in (ft / "segmentation_reports.jsonl").read_text().splitlines()]
        assert [r["split"] for r in reports] == ["train", "test"]
        assert all(r["config_hash"] == config_hash(parse_config(TINY)) and r["model"] == ckpt for r in reports)
    code = cli.main(["evaluate", "--config", str(tiny_config), "--checkpoint", str(ft / "segmentation.alpw"),
                     "--split", "test"])
    assert code == cli.EXIT_OK
    assert json.loads(capsys.readouterr().out.splitlines()[-1])["split"] == "test"


def test_finetune_missing_inputs_and_mismatch(tiny_config, tmp_path):
    common = ["--config", str(tiny_config), "--out", str(tmp_path / "ft")]
    assert cli.main(["finetune", "--checkpoint", "random", "--dataset", str(tmp_path / "none.alpd"),
                     *common]) == cli.EXIT_CONFIG
    data = tmp_path / "d.alpd"
    dataset.write(data, [])
    assert cli.main(["finetune", "--checkpoint", "random", "--dataset", str(data), *common]) == cli.EXIT_CONFIG
    ckpt = tmp_path / "wrong.alpw"
    nd.checkpoint.save(ckpt, {"backbone.fc.weight": np.zeros((2, 2), np.float32)})
    rng = np.random.default_rng(0)
    sample = dataset.LabeledSample(rng.integers(0, 255, (16, 16, 3), dtype=np.uint8),
                                   np.full((16, 16), 255, np.uint8), np.ones((16, 16), np.float32), 0, 0)
    dataset.write(data, [sample])
    assert cli.main(["finetune", "--checkpoint", str(ckpt), "--dataset", str(data), *common]) == cli.EXIT_MISMATCH
    assert cli.main(["evaluate", "--checkpoint", str(ckpt), *common[:2]]) == cli.EXIT_MISMATCH


def test_export_coverage(tiny_config, tmp_path, capsys):
    log = tmp_path / "walk.alpt"
    scene = generate_split(parse_config(TINY).profile(), "train")[0]
    with open(log, "wb") as fh:
        tl = TrajectoryLog(fh)
        for _ in range(3):
            tl.write(scene.seed, Pose(1.125, 1.125, 0), 1)
    pgm = tmp_path / "cov.pgm"
    code = cli.main(["export-coverage", "--config", str(tiny_config), "--log", str(log), "--scene",
                     str(scene.seed), "--pgm", str(pgm)])
    assert code == cli.EXIT_OK
    assert capsys.readouterr().out.strip() == f"scene={scene.seed} unique_cells=1 path_length=0"
    assert read_pgm(pgm.read_bytes()).max() > 0
    code = cli.main(["export-coverage", "--config", str(tiny_config), "--log", str(log), "--scene", "12345"])
    assert code == cli.EXIT_MISMATCH


def test_gen_scenes(tiny_config, tmp_path, capsys):
    assert cli.main(["gen-scenes", "--config", str(tiny_config), "--split", "test", "--out", str(tmp_path)]) == 0
    assert len(list((tmp_path / "scenes").glob("scene_*.txt"))) == 1
    assert capsys.readouterr().out.startswith("scene=")


def test_thread_cap(monkeypatch):
    cfg = RunConfig(num_envs=8)
    monkeypatch.setenv("ALP_THREADS", "1")
    assert cli.worker_count(cfg, False) == 1
    assert cli.worker_count(cfg, True) == 1
    monkeypatch.setenv("ALP_THREADS", "x")
    with pytest.raises(cli.UsageError):
        cli.worker_count(cfg, False)
