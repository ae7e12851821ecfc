"""End-to-end acceptance checks, one test per criterion.

Stage-1 runs are shared between criteria through a session cache, so the
first test that needs a given (objectives, seed) run pays for it. Each test
records a one-line verdict that is printed in the terminal summary.
"""
import time

import numpy as np
import pytest
import torch

import conftest
from alp import cli
from alp import ndmath as nd
from alp.actionrep import IDMHeads, idm_accuracy, idm_fit, window_starts, window_targets
from alp.config import RunConfig
from alp.downstream import LabeledSample, dataset
from alp.intrinsic import rnd_reward
from alp.pipeline import Explorer, UniformPolicy, measure_coverage, transfer
from alp.policy import Backbone, HyperParams, ModelBundle, ppo_update
from alp.rollout import Collector, compute_gae, gae
from alp.worldsim import BACKGROUND, NUM_CATEGORIES, SceneEnv, SceneProfile, VecEnv, generate_split
from corridor import HEADINGS, CorridorEnv, CorridorVec, greedy_return, optimal_return
from gradcases import OPS, check_op
from oracles import gae_bruteforce

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
# value_coef is lowered from the 0.5 default: with unnormalised-mean rewards the returns sit
# near 40 and at 0.5 the value regression dominates the shared backbone at this run length
STAGE1 = dict(num_envs=8, window=64, total_frames=20_480, n_train_scenes=5, n_test_scenes=5,
              max_episode_steps=256, label_events=10, label_budget=10, value_coef=0.01)
_RUNS = {}


def record(n, ok, detail, started):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}  ({time.perf_counter() - started:.0f}s)"
    conftest.ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


def stage1(objectives, seed):
    key = (objectives, seed)
    if key not in _RUNS:
        cfg = RunConfig(objectives=objectives, seed=seed, **STAGE1)
        _RUNS[key] = Explorer(cfg, deterministic=True).run()
    return _RUNS[key]


def stage1_config(seed, objectives=("pg", "idm")):
    return RunConfig(objectives=objectives, seed=seed, **STAGE1)


# ---------------------------------------------------------------- 1

def test_criterion_01_finite_difference_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {name: max(check_op(name, rng) for _ in range(100)) for name in OPS}
    bad = {k: v for k, v in worst.items() if not v < 1e-3}
    elapsed = time.perf_counter() - t0
    record(1, not bad and elapsed < 60,
           f"{len(OPS)} ops x 100 instances, max rel err {max(worst.values()):.2e}, failing {sorted(bad)}", t0)


# ---------------------------------------------------------------- 2

def test_criterion_02_gae_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        L, N = 50, 1
        r, v = rng.normal(size=(L, N)), rng.normal(size=(L, N))
        d = rng.random((L, N)) < 0.1
        boot = rng.normal(size=N)
        gamma, lam = rng.uniform(0.8, 0.999), rng.uniform(0.5, 1.0)
        adv, ret = gae(r, v, d, boot, gamma, lam)
        adv_o, ret_o = gae_bruteforce(r, v, d, boot, gamma, lam)
        worst = max(worst, np.abs(adv - adv_o).max(), np.abs(ret - ret_o).max())
    elapsed = time.perf_counter() - t0
    record(2, worst < 1e-6 and elapsed < 10, f"1000 sequences of 50 steps, max abs diff {worst:.1e}", t0)


# ---------------------------------------------------------------- 3

def _corridor_run(seed, target, updates=300, window=32, check_every=10):
    torch.manual_seed(seed)
    bundle = ModelBundle(16, (8, 16), 32, 32)
    vec = CorridorVec([CorridorEnv([seed, k]) for k in range(8)])
    collector = Collector(vec, bundle, np.random.default_rng(seed))
    hp = HyperParams(lr=1e-3, total_frames=10**9)
    opt = nd.Adam(bundle.policy_params(), lr=hp.lr)
    rng = np.random.default_rng([seed, 1])
    best = -np.inf
    for u in range(1, updates + 1):
        batch = collector.collect(window)
        batch.rewards = np.stack(vec.rewards[-window:]).astype(np.float32)
        compute_gae(batch, hp.gamma, hp.gae_lambda)
        ppo_update(batch, bundle, hp, opt, hp.clip_eps, rng)
        if u % check_every == 0:
            best = max(best, float(np.mean([greedy_return(bundle, h) for h in HEADINGS])))
            if best >= target:
                break
    vec.close()
    return best, u


def test_criterion_03_ppo_corridor():
    t0 = time.perf_counter()
    optimal = float(np.mean([optimal_return(h) for h in HEADINGS]))
    results = [_corridor_run(s, 0.9 * optimal) for s in SEEDS]
    ok = all(ret >= 0.9 * optimal for ret, _ in results) and time.perf_counter() - t0 < 300
    detail = ", ".join(f"seed {s}: {ret / optimal:.0%} at update {u}" for s, (ret, u) in zip(SEEDS, results))
    record(3, ok, f"planner optimum {optimal:.3f}; {detail}", t0)


# ---------------------------------------------------------------- 4

def test_criterion_04_idm_learnability():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    scenes = generate_split(SceneProfile(n_train=5), "train")

    def collector(seed):
        envs = VecEnv([SceneEnv(scenes, [seed, j], 256, 64) for j in range(8)])
        return Collector(envs, UniformPolicy(), np.random.default_rng(seed))

    train = collector(1)
    data = [train.collect(64) for _ in range(50_000 // 512 + 1)]
    held = [collector(99).collect(64) for _ in range(4)]
    bb, heads = Backbone(), IDMHeads(8)
    params = {**{f"b.{n}": p for n, p in bb.named_parameters()}, **{f"h.{n}": p for n, p in heads.named_parameters()}}
    idm_fit(data, heads, bb, nd.Adam(params, lr=1e-3), 2000, np.random.default_rng(0))
    acc = float(np.mean([idm_accuracy(b, heads, bb) for b in held]))
    guess_rng = np.random.default_rng(5)
    targets = np.concatenate([window_targets(b.actions, window_starts(b.dones, 8), 8).ravel() for b in held])
    uniform = float((guess_rng.integers(0, 3, targets.size) == targets).mean())
    ok = acc >= 0.9 and abs(uniform - 1 / 3) < 0.03 and time.perf_counter() - t0 < 600
    record(4, ok, f"k=8 held-out top-1 {acc:.3f} on {sum(b.actions.size for b in data)} frames, "
                  f"uniform guess {uniform:.3f}", t0)


# ---------------------------------------------------------------- 5

def _policy_frames(bundle, scenes, seed, steps=64, n_envs=8):
    envs = VecEnv([SceneEnv(scenes, [seed, 11, k], 256, 64) for k in range(n_envs)])
    batch = Collector(envs, bundle, np.random.default_rng([seed, 12])).collect(steps)
    envs.close()
    return batch.obs.reshape(-1, *batch.obs.shape[2:])


def test_criterion_05_rnd_novelty_ordering():
    t0 = time.perf_counter()
    rows = []
    for seed in SEEDS:
        res = stage1(("pg", "idm"), seed)
        cfg = stage1_config(seed)
        state = res.bundle.reward["rnd"]
        train = rnd_reward(_policy_frames(res.bundle, res.scenes, seed), state).mean()
        test = rnd_reward(_policy_frames(res.bundle, generate_split(cfg.profile(), "test"), seed), state).mean()
        rows.append((seed, train, test))
    ok = all(test > train for _, train, test in rows)
    detail = ", ".join(f"seed {s}: test {te:.3f} vs train {tr:.3f}" for s, tr, te in rows)
    record(5, ok, detail, t0)


# ---------------------------------------------------------------- 6

def test_criterion_06_coverage():
    t0 = time.perf_counter()
    random_cells, alp_cells = [], []
    for seed in SEEDS:
        scenes = generate_split(stage1_config(seed).profile(), "train")
        random_cells.append(measure_coverage(UniformPolicy(), scenes, 10_000, 8, 256, seed)["unique_cells"])
    for seed in SEEDS:
        res = stage1(("pg", "idm"), seed)
        alp_cells.append(measure_coverage(res.bundle, res.scenes, 10_000, 8, 256, seed)["unique_cells"])
    ratio = np.mean(alp_cells) / np.mean(random_cells)
    record(6, ratio >= 1.5, f"unique cells random {random_cells} vs trained {alp_cells}, ratio {ratio:.2f}", t0)


# ---------------------------------------------------------------- 7 and 8

def _transfer_scenes(seed):
    profile = stage1_config(seed).profile()
    return generate_split(profile, "train"), generate_split(profile, "test")


def test_criterion_07_transfer_direction():
    t0 = time.perf_counter()
    rows = []
    for seed in SEEDS:
        samples = stage1(("pg", "idm"), seed).samples
        train, test = _transfer_scenes(seed)
        cfg = stage1_config(seed)
        scores = {}
        for name, obj in (("scratch", None), ("pg+idm", ("pg", "idm")), ("pg", ("pg",)), ("idm", ("idm",))):
            init = None if obj is None else nd.checkpoint.state_entries(stage1(obj, seed).bundle)
            scores[name] = transfer(cfg, init, samples, seed, train, test, "segmentation")[2].mean_iou
        rows.append(scores)
    beats_scratch = sum(r["pg+idm"] > r["scratch"] for r in rows)
    beats_ablations = sum(r["pg+idm"] >= max(r["pg"], r["idm"]) for r in rows)
    detail = "; ".join(" ".join(f"{k} {v:.3f}" for k, v in r.items()) for r in rows)
    record(7, beats_scratch == 3 and beats_ablations >= 2,
           f"test mIoU per seed: {detail}; >scratch {beats_scratch}/3, >=ablations {beats_ablations}/3", t0)


def test_criterion_08_depth_transfer():
    t0 = time.perf_counter()
    rows = []
    for seed in SEEDS:
        res = stage1(("pg", "idm"), seed)
        train, test = _transfer_scenes(seed)
        init = nd.checkpoint.state_entries(res.bundle)
        rep = transfer(stage1_config(seed), init, res.samples, seed, train, test, "depth")[2]
        rows.append((rep.depth_rmse, rep.depth_baseline_rmse))
    gains = [1 - a / b for a, b in rows]
    detail = ", ".join(f"rmse {a:.3f} vs std {b:.3f}" for a, b in rows)
    record(8, all(g >= 0.2 for g in gains), f"{detail}; relative gains {[round(g, 3) for g in gains]}", t0)


# ---------------------------------------------------------------- 9

DETERMINISM_CONFIG = """\
total_frames = 4096
num_envs = 4
image_size = 32
channels = 8,16
n_train_scenes = 3
n_test_scenes = 1
max_episode_steps = 128
label_events = 4
label_budget = 5
checkpoint_every = 2048
"""


def test_criterion_09_determinism(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "det.cfg"
    cfg.write_text(DETERMINISM_CONFIG)
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli.main(["train-explore", "--config", str(cfg), "--out", str(out), "--deterministic"]) == 0
        outs.append(out)
    names = ["metrics.jsonl", "dataset.alpd", "final.alpw"]
    names += sorted(str(p.relative_to(outs[0])) for p in (outs[0] / "checkpoints").glob("*.alpw"))
    same = [(outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names]
    ok = all(same) and len(names) > 3 and time.perf_counter() - t0 < 300
    record(9, ok, f"{sum(same)}/{len(names)} files byte-identical across two runs", t0)


# ---------------------------------------------------------------- 10

def _random_samples(rng):
    out = []
    for _ in range(int(rng.integers(0, 6))):
        h, w = int(rng.integers(1, 20)), int(rng.integers(1, 20))
        sem = rng.integers(0, NUM_CATEGORIES + 1, size=(h, w)).astype(np.uint8)
        sem[sem == NUM_CATEGORIES] = BACKGROUND
        out.append(LabeledSample(rng.integers(0, 256, (h, w, 3), dtype=np.uint8), sem,
                                 rng.normal(size=(h, w)).astype(np.float32), int(rng.integers(0, 2**32)),
                                 int(rng.integers(0, 2**63))))
    return out


def _random_entries(rng):
    entries = {}
    for k in range(int(rng.integers(0, 6))):
        shape = tuple(int(s) for s in rng.integers(0, 5, size=int(rng.integers(0, 4))))
        entries[f"group{k}.param_{rng.integers(1000)}"] = rng.normal(size=shape).astype(np.float32)
    return entries


def test_criterion_10_format_round_trips(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    good = 0
    for i in range(100):
        samples = _random_samples(rng)
        path = tmp_path / "d.alpd"
        dataset.write(path, samples)
        first = path.read_bytes()
        dataset.write(path, dataset.read(path))
        d_ok = path.read_bytes() == first
        entries = _random_entries(rng)
        path = tmp_path / "w.alpw"
        nd.checkpoint.save(path, entries)
        first = path.read_bytes()
        nd.checkpoint.save(path, nd.checkpoint.load(path))
        good += d_ok and path.read_bytes() == first
    record(10, good == 100 and time.perf_counter() - t0 < 60, f"{good}/100 instances byte-identical", t0)
