"""Soft actor-critic acquisition over trajectory states.

Actor and critics each encode the (x, standardized y) history with their own
position-free transformer encoder, reading the latent at the most recent
observation. Critics additionally see the candidate action through the
surrogate: its conditional embedding and the predictive mean/variance at the
action (standardized scale), all computed with the surrogate's parameters
frozen so acquisition training never moves the surrogate. Action selection
draws a batch of actor proposals and importance-resamples them toward the
Boltzmann distribution of the conservative Q value.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn as torch_nn

from . import checkpoint, instrumentation
from .env import Trajectory
from .errors import (
    CheckpointError,
    ConfigError,
    EmptyInputError,
    InvalidDomainError,
    RequiresContextError,
    TrainingDivergenceError,
)
from .gp import as_tensor, standardize_masked
from .nn import DTYPE, MLP, TanhGaussianHead, TransformerConfig, TransformerEncoder, \
    make_linear, seeded_generator
from .objectives import Box
from .surrogate import TdklSurrogate

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AgentHyperparameters:
    """SAC training knobs; defaults follow common continuous-control practice."""

    gamma: float = 0.99
    tau: float = 0.005
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_temperature: float = 3e-4
    batch_size: int = 64
    boltzmann_beta: float = 1.0
    num_proposals: int = 1024


@dataclass
class ActionEncoding:
    """Surrogate view of one action: conditional embedding plus predictive
    mean/variance on the conditioning trajectory's standardized y scale."""

    embedding: torch.Tensor
    mean: torch.Tensor
    variance: torch.Tensor


def pad_trajectories(trajs) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Right-pad a list of trajectories into (xs, ys, mask) batch tensors."""
    if any(len(t) == 0 for t in trajs):
        raise EmptyInputError("cannot encode an empty trajectory")
    dim = trajs[0].steps[0][0].shape[0]
    max_len = max(len(t) for t in trajs)
    xs = np.zeros((len(trajs), max_len, dim))
    ys = np.zeros((len(trajs), max_len))
    mask = np.zeros((len(trajs), max_len), dtype=bool)
    for b, traj in enumerate(trajs):
        n = len(traj)
        for i, (x, y) in enumerate(traj.steps):
            xs[b, i] = x
            ys[b, i] = y
        mask[b, :n] = True
    return (torch.from_numpy(xs), torch.from_numpy(ys), torch.from_numpy(mask))


class _StateEncoder(torch_nn.Module):
    """Project (x, standardized y) pairs and read the final-position latent."""

    def __init__(self, input_dim: int, config: TransformerConfig, seed: int):
        super().__init__()
        gen = seeded_generator(seed)
        self.proj = make_linear(input_dim + 1, config.model_dim, gen)
        self.encoder = TransformerEncoder(config, seed=seed + 1)

    def forward(self, xs, ys, mask):
        y_std = standardize_masked(ys, mask)
        tokens = self.proj(torch.cat([xs, y_std.unsqueeze(-1)], dim=-1))
        latents = self.encoder(tokens, key_mask=mask)
        last = mask.sum(dim=-1) - 1
        return latents[torch.arange(latents.shape[0]), last]


class _Critic(torch_nn.Module):
    def __init__(self, input_dim: int, embed_dim: int, config: TransformerConfig,
                 seed: int):
        super().__init__()
        self.state_encoder = _StateEncoder(input_dim, config, seed)
        gen = seeded_generator(seed + 101)
        self.head = MLP((config.model_dim + embed_dim + 2, 128, 128, 1), gen)

    def q_from_state(self, state_enc, embedding, mean, variance):
        feats = torch.cat([state_enc, embedding,
                           mean.unsqueeze(-1), variance.unsqueeze(-1)], dim=-1)
        return self.head(feats).squeeze(-1)

    def forward(self, xs, ys, mask, embedding, mean, variance):
        return self.q_from_state(self.state_encoder(xs, ys, mask),
                                 embedding, mean, variance)


@contextmanager
def frozen_parameters(module: torch_nn.Module):
    """Temporarily stop a module's parameters from entering autograd graphs;
    gradients still flow through the module to its inputs."""
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def boltzmann_log_weights(q_values: torch.Tensor, log_density: torch.Tensor,
                          beta: float) -> torch.Tensor:
    """Self-normalized importance log-weights toward exp(Q/beta)."""
    return q_values / beta - log_density


class BoAgent(torch_nn.Module):
    """Actor, twin critics with delayed copies, and the entropy temperature."""

    def __init__(self, input_dim: int, embed_dim: int,
                 config: TransformerConfig | None = None, seed: int = 0,
                 target_entropy: float | None = None):
        super().__init__()
        if input_dim < 1 or embed_dim < 1:
            raise ConfigError("input_dim and embed_dim must be >= 1")
        self.input_dim = input_dim
        self.embed_dim = embed_dim
        self.config = config or TransformerConfig()
        self.seed = seed
        self.target_entropy = float(-input_dim if target_entropy is None
                                    else target_entropy)
        base = seed * 6133
        self.actor_encoder = _StateEncoder(input_dim, self.config, base + 1)
        self.actor_head = TanhGaussianHead(self.config.model_dim, input_dim,
                                           seed=base + 3)
        self.critic1 = _Critic(input_dim, embed_dim, self.config, base + 5)
        self.critic2 = _Critic(input_dim, embed_dim, self.config, base + 7)
        self.target1 = _Critic(input_dim, embed_dim, self.config, base + 5)
        self.target2 = _Critic(input_dim, embed_dim, self.config, base + 7)
        self.target1.load_state_dict(self.critic1.state_dict())
        self.target2.load_state_dict(self.critic2.state_dict())
        for p in self.target1.parameters():
            p.requires_grad_(False)
        for p in self.target2.parameters():
            p.requires_grad_(False)
        self.log_temperature = torch_nn.Parameter(torch.zeros((), dtype=DTYPE))

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()

    # -- encodings ----------------------------------------------------------

    def encode_state(self, traj: Trajectory, which: str = "actor") -> torch.Tensor:
        """Latent at the most recent observation of a single trajectory."""
        if len(traj) == 0:
            raise EmptyInputError("cannot encode an empty trajectory state")
        encoder = {"actor": self.actor_encoder,
                   "critic1": self.critic1.state_encoder,
                   "critic2": self.critic2.state_encoder}[which]
        xs, ys, mask = pad_trajectories([traj])
        return encoder(xs, ys, mask)[0]

    def encode_action(self, action, traj: Trajectory,
                      surrogate: TdklSurrogate) -> ActionEncoding:
        """Surrogate features of one action given the trajectory so far.

        Detached from the surrogate graph: acquisition losses treat these as
        functions of the action only.
        """
        if len(traj) == 0:
            raise RequiresContextError("action encoding needs >= 1 observation")
        xs, ys, mask = pad_trajectories([traj])
        with torch.no_grad():
            w, mu, var = surrogate.action_features(
                as_tensor(action).reshape(1, 1, -1), xs, ys, mask)
        return ActionEncoding(embedding=w[0, 0], mean=mu[0, 0], variance=var[0, 0])

    def conservative_q(self, state_encs, act_enc: ActionEncoding) -> torch.Tensor:
        """min(q1, q2) on the concatenated state/action features.

        `state_encs` is (enc_for_critic1, enc_for_critic2); pass the same
        tensor twice when a single shared encoding is wanted.
        """
        enc1, enc2 = state_encs
        feats = (act_enc.embedding.reshape(1, -1),
                 act_enc.mean.reshape(1), act_enc.variance.reshape(1))
        q1 = self.critic1.q_from_state(enc1.reshape(1, -1), *feats)
        q2 = self.critic2.q_from_state(enc2.reshape(1, -1), *feats)
        return torch.minimum(q1, q2)[0]

    # -- action selection -----------------------------------------------------

    def _candidate_q(self, traj: Trajectory, actions: torch.Tensor,
                     surrogate: TdklSurrogate) -> torch.Tensor:
        """Conservative Q for (m, d) candidate actions under one trajectory."""
        xs, ys, mask = pad_trajectories([traj])
        w, mu, var = surrogate.action_features(actions.unsqueeze(0), xs, ys, mask)
        m = actions.shape[0]
        q_vals = []
        for critic in (self.critic1, self.critic2):
            enc = critic.state_encoder(xs, ys, mask).expand(m, -1)
            q_vals.append(critic.q_from_state(enc, w[0], mu[0], var[0]))
        return torch.minimum(q_vals[0], q_vals[1])

    def select_action(self, traj: Trajectory, domain, surrogate: TdklSurrogate,
                      rng: np.random.Generator, torch_gen: torch.Generator, *,
                      candidates=None, beta: float = 1.0,
                      num_proposals: int = 1024, greedy: bool = False) -> np.ndarray:
        """Next query point.

        Continuous: importance-resample `num_proposals` actor draws toward
        exp(Q/beta). Discrete: sample softmax(Q/beta) over the candidates.
        With an empty trajectory there is nothing to condition on, so the
        action is uniform over the domain.
        """
        instrumentation.count("agent.select_action")
        with torch.no_grad():
            if candidates is not None:
                candidates = np.asarray(candidates, dtype=np.float64)
                if len(candidates) == 0:
                    raise InvalidDomainError("empty candidate list")
                if len(traj) == 0:
                    return candidates[int(rng.integers(len(candidates)))]
                q = self._candidate_q(traj, as_tensor(candidates), surrogate)
                logits = (q / beta).numpy()
                if greedy:
                    return candidates[int(np.argmax(logits))]
                probs = np.exp(logits - logits.max())
                probs /= probs.sum()
                return candidates[int(rng.choice(len(candidates), p=probs))]

            if not isinstance(domain, Box):
                raise InvalidDomainError("continuous selection needs a box domain")
            if len(traj) == 0:
                return domain.sample(rng)
            lower = as_tensor(domain.lower)
            upper = as_tensor(domain.upper)
            latent = self.encode_state(traj, which="actor")
            actions, log_p = self.actor_head.sample(latent, lower, upper,
                                                    torch_gen, num_samples=num_proposals)
            q = self._candidate_q(traj, actions, surrogate)
            log_w = boltzmann_log_weights(q, log_p, beta)
            log_w = torch.where(torch.isfinite(log_w),
                                log_w, torch.full_like(log_w, -np.inf))
            if not torch.isfinite(log_w).any():
                logger.warning("all importance weights degenerate; "
                               "falling back to the highest-Q proposal")
                return actions[int(torch.argmax(q))].numpy()
            if greedy:
                return actions[int(torch.argmax(log_w))].numpy()
            shifted = (log_w - log_w.max()).numpy()
            probs = np.exp(shifted)
            probs /= probs.sum()
            return actions[int(rng.choice(num_proposals, p=probs))].numpy()

    # -- checkpointing ----------------------------------------------------------

    def soft_update_targets(self, tau: float) -> None:
        with torch.no_grad():
            for target, critic in ((self.target1, self.critic1),
                                   (self.target2, self.critic2)):
                for tp, p in zip(target.parameters(), critic.parameters()):
                    tp.mul_(1.0 - tau).add_(p, alpha=tau)

    def save(self, path) -> None:
        tensors = {name: value.detach().numpy()
                   for name, value in self.state_dict().items()}
        meta = {
            "kind": "agent",
            "input_dim": self.input_dim,
            "embed_dim": self.embed_dim,
            "seed": self.seed,
            "target_entropy": self.target_entropy,
            "config": {
                "model_dim": self.config.model_dim,
                "num_heads": self.config.num_heads,
                "num_encoder_layers": self.config.num_encoder_layers,
                "num_decoder_layers": self.config.num_decoder_layers,
                "feedforward_dim": self.config.feedforward_dim,
            },
        }
        checkpoint.save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "BoAgent":
        tensors, meta = checkpoint.load_tensors(path)
        if meta.get("kind") != "agent":
            raise CheckpointError(f"{path}: not an agent checkpoint")
        agent = cls(input_dim=meta["input_dim"], embed_dim=meta["embed_dim"],
                    config=TransformerConfig(**meta["config"]),
                    seed=meta["seed"], target_entropy=meta["target_entropy"])
        expected = {name: tuple(value.shape)
                    for name, value in agent.state_dict().items()}
        checkpoint.validate_shapes(tensors, expected, path=str(path))
        agent.load_state_dict({name: torch.as_tensor(arr, dtype=DTYPE)
                               for name, arr in tensors.items()})
        return agent


class AgentTrainer:
    """Entropy-regularized Bellman updates with delayed target blending."""

    def __init__(self, agent: BoAgent, surrogate: TdklSurrogate, domain: Box,
                 hyper: AgentHyperparameters | None = None):
        self.agent = agent
        self.surrogate = surrogate
        self.domain = domain
        self.hyper = hyper or AgentHyperparameters()
        actor_params = list(agent.actor_encoder.parameters()) \
            + list(agent.actor_head.parameters())
        critic_params = list(agent.critic1.parameters()) \
            + list(agent.critic2.parameters())
        self.actor_opt = torch.optim.Adam(actor_params, lr=self.hyper.lr_actor,
                                          foreach=True)
        self.critic_opt = torch.optim.Adam(critic_params, lr=self.hyper.lr_critic,
                                           foreach=True)
        self.temp_opt = torch.optim.Adam([agent.log_temperature],
                                         lr=self.hyper.lr_temperature)

    def _features(self, actions: torch.Tensor, xs, ys, mask):
        w, mu, var = self.surrogate.action_features(actions.unsqueeze(1), xs, ys, mask)
        return w[:, 0], mu[:, 0], var[:, 0]

    def compute_losses(self, batch, torch_gen: torch.Generator):
        """Critic/actor/temperature losses for one transition batch.

        Deterministic given the generator state, which makes the losses
        finite-difference checkable.
        """
        if not batch:
            raise ConfigError("sac update needs a non-empty batch")
        agent, hyper = self.agent, self.hyper
        lower = as_tensor(self.domain.lower)
        upper = as_tensor(self.domain.upper)
        states = [t.state for t in batch]
        next_states = [t.next_state for t in batch]
        actions = as_tensor(np.stack([t.action for t in batch]))
        rewards = as_tensor([t.reward for t in batch])
        not_done = as_tensor([0.0 if t.done else 1.0 for t in batch])

        xs_s, ys_s, mask_s = pad_trajectories(states)
        xs_n, ys_n, mask_n = pad_trajectories(next_states)
        alpha = agent.temperature.detach()

        with frozen_parameters(self.surrogate):
            with torch.no_grad():
                next_latent = agent.actor_encoder(xs_n, ys_n, mask_n)
                next_actions, next_log_p = agent.actor_head.sample(
                    next_latent, lower, upper, torch_gen)
                feats_next = self._features(next_actions, xs_n, ys_n, mask_n)
                tq1 = agent.target1(xs_n, ys_n, mask_n, *feats_next)
                tq2 = agent.target2(xs_n, ys_n, mask_n, *feats_next)
                target_v = torch.minimum(tq1, tq2) - alpha * next_log_p
                target_q = rewards + hyper.gamma * not_done * target_v

                feats_buf = self._features(actions, xs_s, ys_s, mask_s)

            q1 = agent.critic1(xs_s, ys_s, mask_s, *feats_buf)
            q2 = agent.critic2(xs_s, ys_s, mask_s, *feats_buf)
            critic_loss = ((q1 - target_q) ** 2).mean() + ((q2 - target_q) ** 2).mean()

            latent = agent.actor_encoder(xs_s, ys_s, mask_s)
            new_actions, new_log_p = agent.actor_head.sample(latent, lower, upper,
                                                             torch_gen)
            feats_new = self._features(new_actions, xs_s, ys_s, mask_s)
            q1_new = agent.critic1(xs_s, ys_s, mask_s, *feats_new)
            q2_new = agent.critic2(xs_s, ys_s, mask_s, *feats_new)
            actor_loss = (alpha * new_log_p
                          - torch.minimum(q1_new, q2_new)).mean()

        temp_loss = -(agent.log_temperature
                      * (new_log_p.detach() + agent.target_entropy)).mean()
        return critic_loss, actor_loss, temp_loss, {
            "entropy": float(-new_log_p.detach().mean()),
            "q1": float(q1.detach().mean()),
            "target_q": float(target_q.mean()),
        }

    def sac_update(self, batch, torch_gen: torch.Generator) -> dict:
        """One full SAC step; rejected without touching parameters when any
        loss is non-finite."""
        instrumentation.count("agent.sac_update")
        critic_loss, actor_loss, temp_loss, stats = self.compute_losses(batch, torch_gen)
        for name, loss in (("critic", critic_loss), ("actor", actor_loss),
                           ("temperature", temp_loss)):
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite {name} loss")
        self.critic_opt.zero_grad(set_to_none=True)
        critic_loss.backward(retain_graph=True)
        self.actor_opt.zero_grad(set_to_none=True)
        actor_loss.backward()
        self.temp_opt.zero_grad(set_to_none=True)
        temp_loss.backward()
        self.critic_opt.step()
        self.actor_opt.step()
        self.temp_opt.step()
        self.agent.soft_update_targets(self.hyper.tau)
        return {"critic_loss": float(critic_loss.detach()),
                "actor_loss": float(actor_loss.detach()),
                "temperature_loss": float(temp_loss.detach()),
                "temperature": float(self.agent.temperature.detach()), **stats}


def transitions_from_buffer(buffer, n_init: int, reward_fn,
                            rng: np.random.Generator, batch_size: int):
    """Sample SAC transitions on the fly from stored trajectories."""
    from .env import sample_transition
    batch = []
    for _ in range(batch_size):
        traj = buffer.sample(rng)
        batch.append(sample_transition(traj, n_init, reward_fn, rng))
    return batch
