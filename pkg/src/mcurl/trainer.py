"""Interaction/update loop coupling SAC with masked contrastive representation learning."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from mcurl import losses
from mcurl.encoder import MomentumEncoder, PixelEncoder, ema_update, make_key_copy
from mcurl.env import EnvConfig, PixelEnv, center_crop, crop_batch, to_channels_first
from mcurl.masking import corrupt, draw_mask
from mcurl.replay import ReplayBuffer
from mcurl.sac import Actor, Critic, TwinCritic
from mcurl.transformer import SequenceTransformer

log = logging.getLogger(__name__)

VARIANTS = ("mcurl", "seq_curl", "sym_curl", "plain_sac")
METRIC_COLUMNS = ("env_step", "episode_return", "critic_loss", "actor_loss", "ct_loss",
                  "ct_accuracy", "lr", "alpha")
CHECKPOINT_VERSION = 1


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    variant: str = "mcurl"
    seed: int = 0
    total_env_steps: int = 100_000
    init_env_steps: int = 1000  # collected with a uniform random policy before learning
    updates_per_step: int = 1
    rl_batch_size: int = 128
    ct_windows: int = 4
    seq_len: int = 32
    mask_prob: float = 0.5
    ct_weight: float = 1.0
    temperature: float = 1.0
    similarity: str = "dot"
    lr: float = 1e-4
    warmup_steps: int = 6000
    momentum: float = 0.05
    tau2: float = 0.01
    gamma: float = 0.99
    init_alpha: float = 0.1
    target_entropy: float | None = None  # None -> -action_dim
    betas: tuple[float, float] = (0.9, 0.999)
    alpha_betas: tuple[float, float] = (0.5, 0.999)
    num_layers: int = 2
    heads: int = 1
    ffn_mult: int = 4
    attn_scale: bool = False
    feature_dim: int = 50
    num_filters: int = 32
    conv_strides: tuple[int, ...] = (2, 1, 1, 1)
    hidden_dim: int = 256
    log_std_min: float = -10.0
    log_std_max: float = 2.0
    replay_capacity: int = 100_000
    eval_episodes: int = 10
    eval_interval: int = 0  # env steps; 0 -> evaluate only at the end

    def validate(self, prefix: str = "train") -> None:
        def check(ok, name, msg):
            if not ok:
                raise ValueError(f"{prefix}.{name} {msg}, got {getattr(self, name)!r}")

        check(self.variant in VARIANTS, "variant", f"must be one of {VARIANTS}")
        for name in ("total_env_steps", "updates_per_step", "rl_batch_size", "ct_windows", "seq_len",
                     "warmup_steps", "num_layers", "heads", "ffn_mult", "feature_dim", "num_filters",
                     "hidden_dim", "replay_capacity"):
            check(getattr(self, name) >= 1, name, "must be >= 1")
        for name in ("init_env_steps", "eval_episodes", "eval_interval"):
            check(getattr(self, name) >= 0, name, "must be >= 0")
        check(0.0 <= self.mask_prob <= 1.0, "mask_prob", "must lie in [0, 1]")
        check(self.ct_weight >= 0, "ct_weight", "must be >= 0")
        check(self.temperature > 0, "temperature", "must be > 0")
        check(self.similarity in ("dot", "bilinear"), "similarity", "must be 'dot' or 'bilinear'")
        check(self.lr > 0, "lr", "must be > 0")
        check(0.0 <= self.momentum <= 1.0, "momentum", "must lie in [0, 1]")
        check(0.0 <= self.tau2 <= 1.0, "tau2", "must lie in [0, 1]")
        check(0.0 < self.gamma <= 1.0, "gamma", "must lie in (0, 1]")
        check(self.init_alpha > 0, "init_alpha", "must be > 0")
        check(self.feature_dim % 2 == 0, "feature_dim", "must be even")
        check(self.feature_dim % self.heads == 0, "heads", "must divide feature_dim")
        check(len(self.conv_strides) == 4, "conv_strides", "must list 4 strides")
        check(self.log_std_min < self.log_std_max, "log_std_min", "must be below log_std_max")


def lr_schedule(step: int, step_w: int, eta0: float) -> float:
    """Inverse-square-root schedule with linear warmup, peaking at ``eta0`` when ``step == step_w``."""
    if step < 1:
        raise ValueError(f"schedule step must be >= 1, got {step}")
    if step_w < 1 or eta0 <= 0:
        raise ValueError("step_w must be >= 1 and eta0 > 0")
    ratio = step / step_w
    return eta0 * min(ratio ** -0.5, ratio)


def _check_finite(name: str, value: torch.Tensor, context: dict) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(f"non-finite {name}: {value.item()}", {"loss": name, **context})


class Learner:
    """All networks and optimizers of one agent, plus the update step."""

    def __init__(self, config: TrainConfig, obs_shape, action_dim: int, crop_out):
        self.config = c = config
        self.crop_out = tuple(crop_out)
        self.action_dim = action_dim
        torch.manual_seed(c.seed)
        enc_shape = (obs_shape[0], *self.crop_out)
        # construction order fixed so every variant shares the same initial weights
        self.encoder = MomentumEncoder(
            PixelEncoder(enc_shape, c.feature_dim, num_filters=c.num_filters, strides=c.conv_strides),
            momentum=c.momentum,
        )
        self.actor = Actor(c.feature_dim, action_dim, c.hidden_dim, c.log_std_min, c.log_std_max)
        self.critic = TwinCritic(Critic(c.feature_dim, action_dim, c.hidden_dim))
        self.log_alpha = torch.tensor(math.log(c.init_alpha), requires_grad=True)
        self.target_entropy = -float(action_dim) if c.target_entropy is None else c.target_entropy

        self.transformer = None
        self.key_transformer = None
        self.bilinear = None
        if c.variant in ("mcurl", "sym_curl"):
            self.transformer = SequenceTransformer(c.feature_dim, c.num_layers, c.heads, c.ffn_mult,
                                                   c.attn_scale)
            if c.variant == "sym_curl":
                self.key_transformer = make_key_copy(self.transformer)
        if c.similarity == "bilinear" and c.variant != "plain_sac":
            self.bilinear = torch.nn.Parameter(torch.randn(c.feature_dim, c.feature_dim) * 0.01)

        self.critic_opt = torch.optim.Adam(
            list(self.encoder.query.parameters()) + list(self.critic.online.parameters()),
            lr=c.lr, betas=c.betas)
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=c.lr, betas=c.betas)
        self.alpha_opt = torch.optim.Adam([self.log_alpha], lr=c.lr, betas=c.alpha_betas)
        self.ct_opt = None
        if c.variant != "plain_sac":
            aux = list(self.transformer.parameters()) if self.transformer is not None else []
            if self.bilinear is not None:
                aux.append(self.bilinear)
            groups = [{"params": list(self.encoder.query.parameters()), "lr": c.lr}]
            if aux:
                groups.insert(0, {"params": aux, "lr": self._aux_lr(1)})
            self.ct_opt = torch.optim.Adam(groups, lr=c.lr, betas=c.betas)
        self.ct_steps = 0
        self.updates = 0
        self.last_window_starts = None
        self.last_branches = None
        self.torch_gen = torch.Generator().manual_seed(c.seed + 1)

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    def _aux_lr(self, step: int) -> float:
        return lr_schedule(step, self.config.warmup_steps, self.config.lr)

    def current_lr(self) -> float:
        if self.transformer is None:
            return self.config.lr
        return self._aux_lr(max(self.ct_steps, 1))

    def modules(self) -> dict[str, torch.nn.Module]:
        mods = {"encoder": self.encoder, "actor": self.actor, "critic": self.critic}
        if self.transformer is not None:
            mods["transformer"] = self.transformer
        if self.key_transformer is not None:
            mods["key_transformer"] = self.key_transformer
        return mods

    def optimizers(self) -> dict[str, torch.optim.Optimizer]:
        opts = {"critic": self.critic_opt, "actor": self.actor_opt, "alpha": self.alpha_opt}
        if self.ct_opt is not None:
            opts["ct"] = self.ct_opt
        return opts

    # -- acting ---------------------------------------------------------------

    def act(self, stack: np.ndarray, deterministic: bool) -> np.ndarray:
        """Action for one ``(K, H, W, C)`` stack, using the center crop."""
        obs = center_crop(to_channels_first(stack), self.crop_out)
        with torch.no_grad():
            feat = self.encoder.encode(torch.as_tensor(np.ascontiguousarray(obs))[None])
            action = self.actor.act(feat, deterministic=deterministic, generator=self.torch_gen)
        return action[0].numpy().astype(np.float64)

    # -- updates --------------------------------------------------------------

    def update_rl(self, buffer: ReplayBuffer, rng: np.random.Generator) -> dict:
        c = self.config
        batch = buffer.sample_iid(c.rl_batch_size, rng)
        obs = torch.as_tensor(crop_batch(batch.obs, self.crop_out, rng))
        next_obs = torch.as_tensor(crop_batch(batch.next_obs, self.crop_out, rng))
        action = torch.as_tensor(batch.action)
        reward = torch.as_tensor(batch.reward)
        done = torch.as_tensor(batch.done.astype(np.float32))

        feat = self.encoder.encode(obs)
        with torch.no_grad():
            next_feat = self.encoder.encode(next_obs)
            next_target_feat = self.encoder.key_encode(next_obs)
        critic_loss, _ = losses.sac_critic_loss(
            self.critic.online, self.critic.target, self.actor, feat, action, reward, next_feat,
            next_target_feat, done, c.gamma, self.alpha.detach(), generator=self.torch_gen)
        _check_finite("critic_loss", critic_loss, {"update": self.updates})
        self.critic_opt.zero_grad(set_to_none=False)
        critic_loss.backward()
        self.critic_opt.step()

        actor_loss, log_pi = losses.sac_actor_loss(self.actor, self.critic.online, feat.detach(),
                                                   self.alpha.detach(), generator=self.torch_gen)
        _check_finite("actor_loss", actor_loss, {"update": self.updates})
        self.actor_opt.zero_grad(set_to_none=False)
        actor_loss.backward()
        self.actor_opt.step()

        alpha_loss = losses.sac_temperature_loss(self.log_alpha, log_pi, self.target_entropy)
        self.alpha_opt.zero_grad(set_to_none=False)
        alpha_loss.backward()
        self.alpha_opt.step()
        return {"critic_loss": critic_loss.item(), "actor_loss": actor_loss.item()}

    def contrastive_batch(self, buffer: ReplayBuffer, rng: np.random.Generator):
        """Queries, keys and mask ``(B, T, d)`` / ``(B, T)`` for the configured variant."""
        c = self.config
        B, T = c.ct_windows, c.seq_len
        starts = buffer.sample_window_starts(T, B, rng)
        self.last_window_starts = starts
        raw = np.stack([buffer.window(int(s), T).states for s in starts])  # (B, T, C, H, W)
        flat = raw.reshape(B * T, *raw.shape[2:])

        if c.variant == "seq_curl":
            anchors = torch.as_tensor(crop_batch(flat, self.crop_out, rng))
            positives = torch.as_tensor(crop_batch(flat, self.crop_out, rng))
            q = self.encoder.encode(anchors).reshape(B, T, -1)
            k = self.encoder.key_encode(positives).reshape(B, T, -1)
            return q, k, torch.ones(B, T)

        states = crop_batch(flat, self.crop_out, rng).reshape(B, T, -1, *self.crop_out)
        mask = draw_mask((B, T), c.mask_prob, rng)
        corrupted = corrupt(states, mask, buffer, rng)
        self.last_branches = corrupted.branches
        corrupted = corrupted.states
        h0 = self.encoder.encode(torch.as_tensor(corrupted.reshape(B * T, *states.shape[2:])))
        q = self.transformer(h0.reshape(B, T, -1))
        k = self.encoder.key_encode(torch.as_tensor(states.reshape(B * T, *states.shape[2:])))
        k = k.reshape(B, T, -1)
        if self.key_transformer is not None:
            with torch.no_grad():
                k = self.key_transformer(k)
        return q, k, torch.as_tensor(mask)

    def update_contrastive(self, buffer: ReplayBuffer, rng: np.random.Generator) -> dict:
        c = self.config
        q, k, mask = self.contrastive_batch(buffer, rng)
        ct_loss = losses.masked_infonce(q, k, mask, c.temperature, self.bilinear)
        _check_finite("ct_loss", ct_loss, {"update": self.updates})
        hits, count = losses.retrieval_accuracy(q, k, mask, self.bilinear)
        self.ct_steps += 1
        if self.transformer is not None or self.bilinear is not None:
            self.ct_opt.param_groups[0]["lr"] = self._aux_lr(self.ct_steps)
        self.ct_opt.zero_grad(set_to_none=False)
        (c.ct_weight * ct_loss).backward()
        self.ct_opt.step()
        return {"ct_loss": ct_loss.item(), "ct_hits": hits, "ct_count": count}

    def soft_updates(self) -> None:
        self.encoder.momentum_update()
        self.critic.update_targets(self.config.tau2)
        if self.key_transformer is not None:
            ema_update(self.key_transformer, self.transformer, self.config.momentum)

    def update(self, buffer: ReplayBuffer, rl_rng: np.random.Generator,
               ct_rng: np.random.Generator) -> dict:
        """One gradient block: RL losses, contrastive loss, then EMA updates."""
        out = self.update_rl(buffer, rl_rng)
        if self.ct_opt is not None:
            out.update(self.update_contrastive(buffer, ct_rng))
        else:
            out.update(ct_loss=0.0, ct_hits=0, ct_count=0)
        out["joint_loss"] = losses.combine(out["critic_loss"] + out["actor_loss"], out["ct_loss"],
                                           self.config.ct_weight)
        self.soft_updates()
        self.updates += 1
        return out

    # -- persistence ----------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "modules": {name: m.state_dict() for name, m in self.modules().items()},
            "optimizers": {name: o.state_dict() for name, o in self.optimizers().items()},
            "log_alpha": self.log_alpha.detach().clone(),
            "bilinear": None if self.bilinear is None else self.bilinear.detach().clone(),
            "ct_steps": self.ct_steps,
            "updates": self.updates,
            "torch_gen": self.torch_gen.get_state(),
        }

    def load_state_dict(self, state: dict) -> None:
        for name, m in self.modules().items():
            m.load_state_dict(state["modules"][name])
        for name, o in self.optimizers().items():
            o.load_state_dict(state["optimizers"][name])
        with torch.no_grad():
            self.log_alpha.copy_(state["log_alpha"])
            if self.bilinear is not None:
                self.bilinear.copy_(state["bilinear"])
        self.ct_steps = state["ct_steps"]
        self.updates = state["updates"]
        self.torch_gen.set_state(state["torch_gen"])


@dataclass
class _Interval:
    critic: list = field(default_factory=list)
    actor: list = field(default_factory=list)
    ct: list = field(default_factory=list)
    hits: int = 0
    count: int = 0
    returns: list = field(default_factory=list)


class Trainer:
    """Runs the canonical single-threaded loop for one seed and variant.

    ``env_step`` counts inner simulator steps, so each agent interaction
    advances it by ``action_repeat``.
    """

    def __init__(self, env_config: EnvConfig, config: TrainConfig, output_dir: Path | None = None,
                 log_interval: int = 1000, checkpoint_interval: int = 0):
        env_config.validate()
        config.validate()
        self.env_config = env_config
        self.config = config
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.log_interval = log_interval
        self.checkpoint_interval = checkpoint_interval

        seeds = np.random.SeedSequence(config.seed).spawn(5)
        self.env_rng, self.act_rng, self.rl_rng, self.ct_rng, self.eval_rng = (
            np.random.Generator(np.random.PCG64(s)) for s in seeds)
        self.env = PixelEnv(env_config)
        self.eval_env = PixelEnv(env_config)
        k, h, w, ch = self.env.obs_shape
        self.buffer = ReplayBuffer(config.replay_capacity, (k * ch, h, w), self.env.action_dim)
        self.learner = Learner(config, (k * ch, h, w), self.env.action_dim, env_config.crop_out)

        self.env_step = 0
        self.episode = 0
        self._episode_return = 0.0
        self._last_return: float | None = None
        self._obs = self.env.reset(self.env_rng)
        self._interval = _Interval()
        self.action_trace: list[np.ndarray] = []

    @property
    def warm(self) -> bool:
        return self.env_step >= self.config.init_env_steps

    def interact(self) -> None:
        if self.warm:
            action = self.learner.act(self._obs, deterministic=False)
        else:
            action = self.act_rng.uniform(-1.0, 1.0, size=self.env.action_dim)
        self.action_trace.append(action)
        next_obs, reward, done = self.env.step(action)
        self.buffer.add(self._obs, action, reward, next_obs, done)
        self._episode_return += reward
        self.env_step += self.env_config.action_repeat
        if done:
            self._interval.returns.append(self._episode_return)
            self._last_return = self._episode_return
            self.episode += 1
            self._episode_return = 0.0
            self._obs = self.env.reset(self.env_rng)
        else:
            self._obs = next_obs

    def train_step(self) -> dict:
        """One environment interaction followed by ``updates_per_step`` gradient blocks."""
        self.interact()
        deltas = []
        if self.warm:
            for _ in range(self.config.updates_per_step):
                try:
                    delta = self.learner.update(self.buffer, self.rl_rng, self.ct_rng)
                except NonFiniteLossError as err:
                    err.diagnostics.update(env_step=self.env_step, episode=self.episode)
                    self._dump_diagnostics(err.diagnostics)
                    raise
                deltas.append(delta)
                iv = self._interval
                iv.critic.append(delta["critic_loss"])
                iv.actor.append(delta["actor_loss"])
                iv.ct.append(delta["ct_loss"])
                iv.hits += delta["ct_hits"]
                iv.count += delta["ct_count"]
        return {"env_step": self.env_step, "updates": deltas}

    def _metrics_row(self) -> dict | None:
        iv = self._interval
        if self._last_return is None:
            return None
        row = {
            "env_step": self.env_step,
            "episode_return": float(np.mean(iv.returns)) if iv.returns else self._last_return,
            "critic_loss": float(np.mean(iv.critic)) if iv.critic else 0.0,
            "actor_loss": float(np.mean(iv.actor)) if iv.actor else 0.0,
            "ct_loss": float(np.mean(iv.ct)) if iv.ct else 0.0,
            "ct_accuracy": iv.hits / iv.count if iv.count else 0.0,
            "lr": self.learner.current_lr(),
            "alpha": float(self.learner.alpha.item()),
        }
        self._interval = _Interval()
        return row

    def evaluate(self, episodes: int | None = None) -> list[float]:
        """Deterministic-policy returns on a separate environment instance."""
        episodes = self.config.eval_episodes if episodes is None else episodes
        returns = []
        for _ in range(episodes):
            obs = self.eval_env.reset(self.eval_rng)
            total, done = 0.0, False
            while not done:
                obs, reward, done = self.eval_env.step(self.learner.act(obs, deterministic=True))
                total += reward
            returns.append(total)
        return returns

    def run(self) -> Iterator[dict]:
        """Train to ``total_env_steps``, yielding one metrics row per logging interval."""
        csv_file = writer = eval_writer = eval_file = None
        if self.output_dir is not None:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            csv_file = open(self.output_dir / "metrics.csv", "w", newline="")
            writer = csv.writer(csv_file, lineterminator="\n")
            writer.writerow(METRIC_COLUMNS)
            eval_file = open(self.output_dir / "eval.csv", "w", newline="")
            eval_writer = csv.writer(eval_file, lineterminator="\n")
            eval_writer.writerow(("env_step", "episode", "return"))
        try:
            next_log = self.log_interval
            next_ckpt = self.checkpoint_interval or None
            next_eval = self.config.eval_interval or None
            while self.env_step < self.config.total_env_steps:
                self.train_step()
                if self.env_step >= next_log:
                    next_log += self.log_interval
                    row = self._metrics_row()
                    if row is not None:
                        if writer is not None:
                            writer.writerow([format_value(row[k]) for k in METRIC_COLUMNS])
                            csv_file.flush()
                        log.info("step %d return %.3f ct_acc %.3f", row["env_step"],
                                 row["episode_return"], row["ct_accuracy"])
                        yield row
                if next_eval is not None and self.env_step >= next_eval:
                    next_eval += self.config.eval_interval
                    self._write_eval(eval_writer, self.evaluate())
                if next_ckpt is not None and self.env_step >= next_ckpt and self.output_dir is not None:
                    next_ckpt += self.checkpoint_interval
                    self.save_checkpoint(self.output_dir / "checkpoint.pt")
            self.final_eval_returns = self.evaluate()
            self._write_eval(eval_writer, self.final_eval_returns)
            if self.output_dir is not None:
                self.save_checkpoint(self.output_dir / "checkpoint.pt")
        finally:
            for fh in (csv_file, eval_file):
                if fh is not None:
                    fh.close()

    def _write_eval(self, writer, returns) -> None:
        if writer is None:
            return
        for i, r in enumerate(returns):
            writer.writerow((self.env_step, i, format_value(r)))

    def _dump_diagnostics(self, diagnostics: dict) -> None:
        if self.output_dir is None:
            return
        self.output_dir.mkdir(parents=True, exist_ok=True)
        with open(self.output_dir / "diagnostics.json", "w") as fh:
            json.dump(diagnostics, fh, indent=2, default=str)

    def save_checkpoint(self, path) -> None:
        torch.save({
            "version": CHECKPOINT_VERSION,
            "env_config": asdict(self.env_config),
            "train_config": asdict(self.config),
            "learner": self.learner.state_dict(),
            "env_step": self.env_step,
            "episode": self.episode,
            "rng": {name: getattr(self, name).bit_generator.state
                    for name in ("env_rng", "act_rng", "rl_rng", "ct_rng", "eval_rng")},
        }, path)


def load_checkpoint(path) -> dict:
    state = torch.load(path, weights_only=False)
    if state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {state.get('version')}")
    return state


def format_value(x) -> str:
    """Locale-independent, round-trippable CSV cell."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))
