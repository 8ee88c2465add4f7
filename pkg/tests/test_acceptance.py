"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are printed at the end of the pytest session (see ``conftest.py``)
and also inline when run with ``-s``. Criteria 7 and 8 are long CPU runs and
carry the ``slow`` marker; deselect with ``-m "not slow"``.
"""

import csv
import hashlib
import itertools
import json
import math
import time

import numpy as np
import pytest
import torch

from mcurl import cli, losses
from mcurl.encoder import MomentumEncoder, PixelEncoder
from mcurl.env import EnvConfig, PixelEnv
from mcurl.masking import KEEP, RANDOM, UNMASKED, ZERO, corrupt, draw_mask
from mcurl.replay import ReplayBuffer
from mcurl.sac import Actor, Critic
from mcurl.trainer import Learner, TrainConfig, Trainer, lr_schedule
from mcurl.transformer import SequenceTransformer
from tests.conftest import autograd_grads, central_difference, relative_error

RESULTS = {}

SMOKE = {
    "env": {"frame_size": [16, 16], "crop_out": [16, 16], "episode_limit": 40},
    "train": {"total_env_steps": 400, "init_env_steps": 100, "rl_batch_size": 16, "ct_windows": 2,
              "seq_len": 8, "feature_dim": 16, "num_filters": 8, "hidden_dim": 32,
              "replay_capacity": 1000, "eval_episodes": 2, "warmup_steps": 50},
    "log_interval": 40,
}

# desk-scale settings for the two learning criteria
CT_ENV = EnvConfig(frame_size=(32, 32), crop_out=(28, 28))
CT_TRAIN = dict(conv_strides=(2, 2, 1, 1), lr=1e-3, rl_batch_size=32, ct_windows=4, seq_len=32,
                warmup_steps=500, temperature=7.0, gamma=0.9)
CT_UPDATES = 5000
CT_BUFFER_STEPS = 20_000

E2E_ENV = EnvConfig(frame_size=(64, 64), stack_k=3, action_repeat=4)
E2E_TRAIN = dict(total_env_steps=20_000, init_env_steps=1000, conv_strides=(2, 2, 1, 1), lr=1e-3,
                 rl_batch_size=64, ct_windows=2, gamma=0.9, replay_capacity=20_000, eval_episodes=10)
RANDOM_EPISODES = 100


class Criterion:
    """Records a PASS/FAIL line for criterion ``number`` whatever the outcome."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.details = []
        self.start = time.monotonic()

    def note(self, text):
        self.details.append(text)

    def check(self, ok, text):
        self.note(text)
        assert ok, text

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.monotonic() - self.start
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number} [{status}] {self.title} ({elapsed:.1f}s)"
        if self.details:
            line += ": " + "; ".join(self.details)
        if exc_type is not None and not isinstance(exc, AssertionError):
            line += f"; error {exc_type.__name__}: {exc}"
        RESULTS[self.number] = line
        print(line)
        return False


# -- 1 --------------------------------------------------------------------------------------


def brute_force_infonce(Q, K, M, tau):
    total = 0.0
    for i in range(len(Q)):
        sims = [math.fsum(a * b for a, b in zip(Q[i], K[j])) / tau for j in range(len(K))]
        top = max(sims)
        lse = top + math.log(math.fsum(math.exp(s - top) for s in sims))
        total += -M[i] * (sims[i] - lse)
    return total


def test_criterion_1_oracle_equivalence():
    with Criterion(1, "masked InfoNCE vs brute-force log-sum-exp") as c:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for n in range(100):
            T = 64 if n == 0 else int(rng.integers(1, 65))
            d = int(rng.integers(1, 17))
            Q, K = rng.normal(size=(T, d)), rng.normal(size=(T, d))
            M = (rng.random(T) < rng.random()).astype(float)
            tau = float(rng.uniform(0.05, 2.0))
            got = losses.masked_infonce(torch.as_tensor(Q), torch.as_tensor(K), torch.as_tensor(M), tau).item()
            worst = max(worst, abs(got - brute_force_infonce(Q.tolist(), K.tolist(), M.tolist(), tau)))
        c.check(worst < 1e-6, f"max abs error {worst:.2e} over 100 instances")
        c.check(time.monotonic() - c.start < 5, "runtime under 5 s")


# -- 2 --------------------------------------------------------------------------------------


def test_criterion_2_gradient_checks(float64):
    with Criterion(2, "finite differences vs autodiff (float64)") as c:
        torch.manual_seed(0)
        rng = np.random.default_rng(0)
        T, d = 3, 8
        shape = (1, 21, 21)
        pair = MomentumEncoder(PixelEncoder(shape, feature_dim=d, num_filters=4), momentum=0.05)
        with torch.no_grad():
            # move biases off the ReLU kinks where finite differences are one-sided
            for name, p in pair.query.named_parameters():
                if name.startswith("convs") and name.endswith("bias"):
                    p.uniform_(0.05, 0.15)
            for p in pair.key.parameters():
                p.add_(0.1 * torch.randn_like(p))
        model = SequenceTransformer(d=d, num_layers=1)
        clean = rng.random((T, *shape))
        mask = np.array([1, 0, 1])
        buf = ReplayBuffer(4, shape, 2)
        for _ in range(4):
            buf.add(rng.random(shape), np.zeros(2), 0.0, rng.random(shape), False)
        corrupted = torch.as_tensor(corrupt(clean, mask, buf, rng).states)
        keys = pair.key_encode(torch.as_tensor(clean))

        def ct_loss():
            q = model(pair.encode(corrupted))
            return losses.masked_infonce(q, keys, torch.as_tensor(mask, dtype=torch.float64), 0.5)

        params = list(pair.query.parameters()) + list(model.parameters())
        err_ct = relative_error(autograd_grads(ct_loss, params), central_difference(ct_loss, params))

        actor, critic, target = Actor(d, 2, hidden_dim=16), Critic(d, 2, hidden_dim=16), Critic(d, 2, hidden_dim=16)
        feat = torch.randn(5, d, requires_grad=True)
        batch = dict(action=torch.rand(5, 2) * 2 - 1, reward=torch.randn(5), next_feat=torch.randn(5, d),
                     next_target_feat=torch.randn(5, d), done=torch.tensor([0.0, 0.0, 1.0, 0.0, 1.0]))

        def critic_loss():
            return losses.sac_critic_loss(critic, target, actor, feat, **batch, gamma=0.99, alpha=0.1,
                                          generator=torch.Generator().manual_seed(1))[0]

        def actor_loss():
            return losses.sac_actor_loss(actor, critic, feat, alpha=0.1,
                                         generator=torch.Generator().manual_seed(2))[0]

        cp = [feat] + list(critic.parameters())
        err_critic = relative_error(autograd_grads(critic_loss, cp), central_difference(critic_loss, cp))
        ap = list(actor.parameters())
        err_actor = relative_error(autograd_grads(actor_loss, ap), central_difference(actor_loss, ap))
        c.check(err_ct < 1e-4, f"InfoNCE through CNN+Transformer rel err {err_ct:.1e}")
        c.check(err_critic < 1e-4, f"critic rel err {err_critic:.1e}")
        c.check(err_actor < 1e-4, f"actor rel err {err_actor:.1e}")
        c.check(time.monotonic() - c.start < 120, "runtime under 2 min")


# -- 3 --------------------------------------------------------------------------------------


def test_criterion_3_stop_gradient_and_ema():
    with Criterion(3, "stop-gradient and EMA algebra") as c:
        env = EnvConfig(frame_size=(16, 16), crop_out=(16, 16), episode_limit=40)
        cfg = TrainConfig(**{**SMOKE["train"], "total_env_steps": 1000})
        for variant in ("mcurl", "sym_curl", "seq_curl", "plain_sac"):
            t = Trainer(env, TrainConfig(**{**cfg.__dict__, "variant": variant}))
            frozen = [t.learner.encoder.key, t.learner.critic.target]
            if t.learner.key_transformer is not None:
                frozen.append(t.learner.key_transformer)
            updates = 0
            while updates < 30:
                updates += len(t.train_step()["updates"])
                for module in frozen:
                    for p in module.parameters():
                        assert p.grad is None or torch.count_nonzero(p.grad) == 0, variant
        c.note("key encoder, target critics and key Transformer carry no gradient over 30 full steps x 4 variants")

        torch.set_default_dtype(torch.float64)
        try:
            torch.manual_seed(1)
            learner = Learner(TrainConfig(**{**cfg.__dict__, "feature_dim": 8, "num_filters": 4}),
                              (3, 16, 16), 2, (16, 16))
            with torch.no_grad():
                for p in learner.encoder.key.parameters():
                    p.add_(torch.randn_like(p))
            flat = lambda m: torch.cat([p.detach().reshape(-1) for p in m.parameters()])
            d0 = flat(learner.encoder.key) - flat(learner.encoder.query)
            worst = 0.0
            m = learner.config.momentum
            for u in range(1, 101):
                learner.soft_updates()
                d = flat(learner.encoder.key) - flat(learner.encoder.query)
                expected = (1 - m) ** u * d0
                worst = max(worst, ((d - expected).norm() / expected.norm()).item())
        finally:
            torch.set_default_dtype(torch.float32)
        c.check(worst < 1e-12, f"|theta_k - theta| follows (1-m)^u, max rel dev {worst:.1e} over 100 updates")


# -- 4 --------------------------------------------------------------------------------------


def enumerate_valid_starts(dones, T):
    n = len(dones)
    return [s for s in range(n - T + 1) if not any(dones[s:s + T - 1])]


def within_3_sigma(count, n, p):
    return abs(count - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def chi_square_within_3_sigma(counts):
    counts = np.asarray(counts, dtype=float)
    expected = counts.sum() / len(counts)
    stat = ((counts - expected) ** 2 / expected).sum()
    df = len(counts) - 1
    return abs(stat - df) <= 3 * math.sqrt(2 * df), stat, df


def test_criterion_4_stochastic_contracts():
    with Criterion(4, "stochastic contracts") as c:
        rng = np.random.default_rng(7)
        n = 20_000
        bits = draw_mask(n, 0.3, rng)
        c.check(within_3_sigma(bits.sum(), n, 0.3), f"mask popcount {bits.sum()} of {n} at rho 0.3")

        states = np.zeros((n, 1, 1, 1), dtype=np.float32)
        buf = ReplayBuffer(2, (1, 1, 1), 1)
        buf.add(np.zeros((1, 1, 1)), np.zeros(1), 0.0, np.zeros((1, 1, 1)), False)
        branches = corrupt(states, np.ones(n, dtype=int), buf, rng).branches
        counts = [int(np.sum(branches == b)) for b in (ZERO, RANDOM, KEEP)]
        ok = all(within_3_sigma(k, n, p) for k, p in zip(counts, (0.8, 0.1, 0.1)))
        c.check(ok and not np.any(branches == UNMASKED), f"branch counts {counts}")

        big = ReplayBuffer(50, (1, 1, 1), 1)
        for i in range(50):
            big.add(np.zeros((1, 1, 1)), np.zeros(1), 0.0, np.zeros((1, 1, 1)), i in (9, 30))
        iid = np.bincount(big.sample_iid_indices(n, rng), minlength=50)
        ok_iid, stat_iid, df = chi_square_within_3_sigma(iid)
        c.check(ok_iid, f"iid sampler chi2 {stat_iid:.1f} (df {df})")
        valid = big.valid_window_starts(5)
        starts = big.sample_window_starts(5, n, rng)
        assert set(starts.tolist()) <= set(valid.tolist())
        ok_win, stat_win, df = chi_square_within_3_sigma([np.sum(starts == s) for s in valid])
        c.check(ok_win, f"window sampler chi2 {stat_win:.1f} (df {df})")

        checked = 0
        for size in range(1, 11):
            for pattern in itertools.product((False, True), repeat=size):
                b = ReplayBuffer(size, (1, 1, 1), 1)
                for dn in pattern:
                    b.add(np.zeros((1, 1, 1)), np.zeros(1), 0.0, np.zeros((1, 1, 1)), dn)
                for T in range(1, size + 1):
                    assert b.valid_window_starts(T).tolist() == enumerate_valid_starts(pattern, T)
                    checked += 1
        for _ in range(300):
            size = int(rng.integers(11, 33))
            pattern = (rng.random(size) < rng.random() * 0.3).tolist()
            b = ReplayBuffer(size, (1, 1, 1), 1)
            for dn in pattern:
                b.add(np.zeros((1, 1, 1)), np.zeros(1), 0.0, np.zeros((1, 1, 1)), dn)
            for T in range(1, size + 1):
                expected = enumerate_valid_starts(pattern, T)
                assert b.valid_window_starts(T).tolist() == expected
                if expected:
                    for s in b.sample_window_starts(T, 20, rng):
                        assert not any(b.window(int(s), T).dones[:-1])
                checked += 1
        c.note(f"window validity matches enumeration on {checked} (buffer, T) cases up to 32 entries")


# -- 5 --------------------------------------------------------------------------------------


def test_criterion_5_schedule_values():
    with Criterion(5, "learning-rate schedule") as c:
        for step_w, eta0 in ((6000, 1e-4), (1000, 3e-4), (7, 0.1)):
            assert lr_schedule(step_w, step_w, eta0) == eta0
            assert lr_schedule(4 * step_w, step_w, eta0) == 0.5 * eta0
            for eps in (1e-3, 1e-6, 1e-9):
                gap = abs(lr_schedule(step_w + eps, step_w, eta0) - lr_schedule(step_w - eps, step_w, eta0))
                assert gap <= 2 * eps / step_w * eta0 + 1e-15
        c.note("peak equals eta0 and 4*step_w gives eta0/2 exactly; gap at step_w shrinks with eps")


# -- 6 --------------------------------------------------------------------------------------


def test_criterion_6_determinism(tmp_path):
    with Criterion(6, "bitwise determinism") as c:
        cfg = tmp_path / "smoke.json"
        cfg.write_text(json.dumps(SMOKE))
        digests, times = [], []
        for name in ("a", "b"):
            start = time.monotonic()
            assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "11"]) == 0
            times.append(time.monotonic() - start)
            digests.append(hashlib.sha256((tmp_path / name / "run" / "metrics.csv").read_bytes()).hexdigest())
        c.check(digests[0] == digests[1], f"metrics.csv sha256 {digests[0][:12]} twice")
        c.check(max(times) < 60, f"runs took {times[0]:.1f}s and {times[1]:.1f}s")


# -- 7 --------------------------------------------------------------------------------------


def collect_random_buffer(env_config, train_config, env_steps):
    t = Trainer(env_config, TrainConfig(**{**train_config.__dict__, "init_env_steps": env_steps,
                                           "total_env_steps": env_steps,
                                           "replay_capacity": env_steps // env_config.action_repeat}))
    while not t.warm:
        t.interact()
    return t


def retrieval_by_branch(learner, buffer, rng, batches):
    hits = {ZERO: 0, RANDOM: 0, KEEP: 0}
    counts = dict.fromkeys(hits, 0)
    with torch.no_grad():
        for _ in range(batches):
            q, k, mask = learner.contrastive_batch(buffer, rng)
            correct = (losses.similarity(q, k).argmax(-1) == torch.arange(q.shape[1])).numpy()
            for b in hits:
                sel = learner.last_branches == b
                hits[b] += int(correct[sel].sum())
                counts[b] += int(sel.sum())
    return hits, counts


@pytest.mark.slow
def test_criterion_7_contrastive_signal():
    with Criterion(7, "contrastive retrieval beats 5x chance") as c:
        cfg = TrainConfig(**CT_TRAIN)
        t = collect_random_buffer(CT_ENV, cfg, CT_BUFFER_STEPS)
        buffer, T = t.buffer, cfg.seq_len
        chance = 1.0 / T

        # Chance baseline: frozen random query side against an independently initialized frozen
        # key encoder, so queries carry no information about which key is theirs.
        rng = np.random.default_rng(5)
        frozen = Learner(cfg, buffer.obs_shape, 2, CT_ENV.crop_out)
        independent = Learner(TrainConfig(**{**cfg.__dict__, "seed": cfg.seed + 1000}), buffer.obs_shape, 2,
                              CT_ENV.crop_out)
        frozen.encoder.key = independent.encoder.key
        hits, counts = retrieval_by_branch(frozen, buffer, rng, 200)
        n = sum(counts.values())
        base = sum(hits.values()) / n
        sigma = math.sqrt(chance * (1 - chance) / n)
        c.check(abs(base - chance) <= 3 * sigma,
                f"frozen random baseline {base:.4f} vs 1/{T}={chance:.4f} (3 sigma {3 * sigma:.4f}, n={n})")

        untrained = Learner(cfg, buffer.obs_shape, 2, CT_ENV.crop_out)
        hits, counts = retrieval_by_branch(untrained, buffer, np.random.default_rng(6), 100)
        keep0 = hits[KEEP] / counts[KEEP]
        corrupted0 = (hits[ZERO] + hits[RANDOM]) / (counts[ZERO] + counts[RANDOM])
        c.note(f"untrained shared-init accuracy {sum(hits.values()) / sum(counts.values()):.3f} "
               f"(kept positions {keep0:.2f}, corrupted {corrupted0:.3f})")

        learner = t.learner
        recent_hits = recent_count = 0
        for u in range(CT_UPDATES):
            out = learner.update(buffer, t.rl_rng, t.ct_rng)
            if u >= CT_UPDATES - 200:
                recent_hits += out["ct_hits"]
                recent_count += out["ct_count"]
        acc = recent_hits / recent_count
        hits, counts = retrieval_by_branch(learner, buffer, np.random.default_rng(7), 100)
        corrupted = (hits[ZERO] + hits[RANDOM]) / (counts[ZERO] + counts[RANDOM])
        c.check(acc > 5 * chance, f"ct_accuracy over last 200 of {CT_UPDATES} joint updates {acc:.3f} "
                                  f"vs 5/{T}={5 * chance:.3f}")
        c.note(f"held-out accuracy at corrupted positions {corrupted:.3f}")
        c.check(time.monotonic() - c.start < 600, "runtime under 10 min")


# -- 8 --------------------------------------------------------------------------------------


def random_policy_return(env_config, episodes, seed):
    env = PixelEnv(env_config)
    rng = np.random.default_rng(seed)
    returns = []
    for _ in range(episodes):
        env.reset(rng)
        total, done = 0.0, False
        while not done:
            _, reward, done = env.step(rng.uniform(-1, 1, size=env.action_dim))
            total += reward
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns, ddof=1) / math.sqrt(episodes))


def train_variant(variant, seed, tmp_path):
    cfg = TrainConfig(**{**E2E_TRAIN, "variant": variant, "seed": seed})
    t = Trainer(E2E_ENV, cfg, output_dir=tmp_path / variant, log_interval=2000)
    rows = list(t.run())
    return float(np.mean(t.final_eval_returns)), rows


@pytest.mark.slow
def test_criterion_8_end_to_end(tmp_path):
    with Criterion(8, "desk-scale training beats the random policy 3x") as c:
        baseline, sem = random_policy_return(E2E_ENV, RANDOM_EPISODES, seed=123)
        c.note(f"random policy {baseline:.1f} +/- {sem:.1f} over {RANDOM_EPISODES} episodes")
        mcurl, _ = train_variant("mcurl", 0, tmp_path)
        plain, plain_rows = train_variant("plain_sac", 0, tmp_path)
        c.note(f"mcurl final-10 eval {mcurl:.1f}, plain_sac {plain:.1f}")
        # Returns are negative distances, so 3x better means a third of the random policy's cost.
        c.check(mcurl >= baseline / 3, f"mcurl cost ratio {baseline / mcurl:.2f} (need >= 3)")
        c.check(math.isfinite(plain) and plain_rows and plain_rows[-1]["env_step"] >= 20_000 - 2000,
                "plain_sac ran to completion")
        c.check(time.monotonic() - c.start < 1800, "runtime under 30 min")


# -- 9 --------------------------------------------------------------------------------------


def test_criterion_9_variant_fidelity(tmp_path, monkeypatch):
    with Criterion(9, "variant fidelity and mask-probability sweep") as c:
        env = EnvConfig(frame_size=(16, 16), crop_out=(16, 16), episode_limit=40)
        cfg = TrainConfig(**{**SMOKE["train"], "seq_len": 6})

        calls = []
        original_forward = SequenceTransformer.forward
        monkeypatch.setattr(SequenceTransformer, "forward",
                            lambda self, *a, **k: calls.append(1) or original_forward(self, *a, **k))
        t = Trainer(env, TrainConfig(**{**cfg.__dict__, "variant": "seq_curl"}))
        windows = []
        original_window = t.buffer.window
        t.buffer.window = lambda start, T: windows.append(original_window(start, T)) or windows[-1]
        while len(windows) < 40:
            t.train_step()
        capacity = t.buffer.capacity
        for w in windows:
            assert list(w.indices) == [(w.start_index + i) % capacity for i in range(len(w.indices))]
            assert not any(w.dones[:-1])
        c.check(not calls and t.learner.transformer is None,
                f"seq_curl: {len(windows)} windows consecutive, Transformer never called")
        monkeypatch.undo()

        t = Trainer(env, TrainConfig(**{**cfg.__dict__, "variant": "sym_curl"}))
        flat = lambda m: torch.cat([p.detach().reshape(-1) for p in m.parameters()])
        learner = t.learner
        while not t.warm:
            t.interact()
        m = learner.config.momentum
        for _ in range(10):
            before = flat(learner.key_transformer)
            learner.update_rl(t.buffer, t.rl_rng)
            learner.update_contrastive(t.buffer, t.ct_rng)
            assert torch.equal(before, flat(learner.key_transformer))
            online = flat(learner.transformer)
            learner.soft_updates()
            torch.testing.assert_close(flat(learner.key_transformer), (1 - m) * before + m * online,
                                       rtol=1e-6, atol=1e-7)
        c.note("sym_curl key Transformer unchanged by gradient steps, moved only by EMA")

        spec = {"axis": "mask_prob", "values": [0.1, 0.5, 0.9], "seeds": [0],
                "base": {**SMOKE, "output_dir": str(tmp_path), "run_id": "mask_sweep"}}
        (tmp_path / "sweep.json").write_text(json.dumps(spec))
        assert cli.main(["sweep", "--spec", str(tmp_path / "sweep.json")]) == 0
        with open(tmp_path / "mask_sweep" / "summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        c.check(sorted(float(r["value"]) for r in rows) == [0.1, 0.5, 0.9]
                and all(r["status"] == "ok" and r["final_return"] for r in rows),
                "sweep over mask_prob {0.1, 0.5, 0.9} wrote summary.csv with 3 ok rows")
