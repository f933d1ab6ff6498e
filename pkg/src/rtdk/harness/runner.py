"""Experiment orchestration: pre-training, evaluation runs, ablation sweeps.

Budget accounting is exact: every objective evaluation passes through a
meter that refuses to exceed the configured totals, and the counts are
cross-checked against the variants' own evaluation counters.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .. import objectives, seeding
from ..agent import AgentHyperparameters, AgentTrainer, BoAgent, transitions_from_buffer
from ..baselines import AcquisitionConfig, ClassicalGpPolicy, RandomPolicy
from ..env import EnvironmentConfig, ReplayBuffer, exploration_mix, reset_episode, step
from ..errors import BudgetExceededError, ConfigError, TrainingDivergenceError
from ..gp import ObservationSet
from ..nn import TransformerConfig
from ..surrogate import SurrogateTrainer, TdklSurrogate
from .config import ExperimentConfig
from .report import emit_report, write_trajectory_log

logger = logging.getLogger(__name__)

MAX_CONSECUTIVE_DIVERGENCES = 5


@dataclass
class RegretRecord:
    """Per-step outcome of one optimization run."""

    method: str
    variant_id: str
    seed: int
    step: int
    x: np.ndarray
    y: float
    y_best: float
    regret: float
    wall_time_ms: float
    reward: float


class _BudgetMeter:
    def __init__(self, limit: int):
        self.limit = limit
        self.used = 0

    def spend(self, n: int = 1) -> None:
        if self.used + n > self.limit:
            raise BudgetExceededError(
                f"evaluation budget exceeded: {self.used} + {n} > {self.limit}")
        self.used += n


def _transformer_config(config: ExperimentConfig) -> TransformerConfig:
    return TransformerConfig(model_dim=config.model_dim,
                             num_heads=config.num_heads,
                             num_encoder_layers=config.num_encoder_layers,
                             num_decoder_layers=config.num_decoder_layers,
                             feedforward_dim=config.feedforward_dim)


def _variant_seed(master: int, *tags) -> int:
    return int(seeding.numpy_rng(master, "variant-seed", *tags).integers(2 ** 31))


def build_models(config: ExperimentConfig, input_dim: int):
    """Fresh surrogate + agent sized for the objective's input dimension."""
    surrogate = TdklSurrogate(input_dim=input_dim,
                              variant=config.surrogate_variant,
                              config=_transformer_config(config),
                              kernel_components=config.kernel_components,
                              seed=config.master_seed,
                              jitter=config.jitter)
    embed_dim = input_dim if config.surrogate_variant == "none" else config.model_dim
    agent = BoAgent(input_dim=input_dim, embed_dim=embed_dim,
                    config=_transformer_config(config), seed=config.master_seed)
    return surrogate, agent


def _agent_hyper(config: ExperimentConfig) -> AgentHyperparameters:
    return AgentHyperparameters(gamma=config.gamma, tau=config.tau,
                                lr_actor=config.lr_actor,
                                lr_critic=config.lr_critic,
                                lr_temperature=config.lr_temperature,
                                batch_size=config.sac_batch,
                                boltzmann_beta=config.boltzmann_beta,
                                num_proposals=config.num_proposals)


def _env_config(config: ExperimentConfig, t_max: int,
                subtrajectory_length: int) -> EnvironmentConfig:
    return EnvironmentConfig(t_max=t_max,
                             subtrajectory_length=subtrajectory_length,
                             n_init=config.n_init,
                             epsilon_clamp=config.epsilon_clamp,
                             exploration_p0=config.exploration_p0)


def _reward(variant, y: float, epsilon: float) -> float:
    return float(-np.log(max(variant.f_star - y, epsilon)))


def _select(config, agent, surrogate, traj, variant, np_rng, torch_gen,
            greedy: bool):
    candidates = variant.candidates if variant.is_discrete else None
    return agent.select_action(traj, variant.bounds, surrogate, np_rng, torch_gen,
                               candidates=candidates,
                               beta=config.boltzmann_beta,
                               num_proposals=config.num_proposals,
                               greedy=greedy)


def run_pretraining(config: ExperimentConfig):
    """Meta-train surrogate + agent on fresh objective variants.

    Per variant, consecutive trajectories of `subtrajectory_length` samples
    are rolled out with exploration annealing until the per-variant sample
    budget is spent; each completed trajectory is stored and followed by a
    burst of surrogate and SAC updates.
    """
    if config.method != "rtdk":
        raise ConfigError("pre-training only applies to method 'rtdk'")
    if config.subtrajectory_length <= config.n_init:
        raise ConfigError("pre-training needs subtrajectory_length > n_init")
    torch.set_num_threads(config.torch_threads)
    master = config.master_seed
    budget = _BudgetMeter(config.n_pretrain_variants
                          * config.pretrain_samples_per_variant)
    env_cfg = _env_config(config, t_max=config.subtrajectory_length,
                          subtrajectory_length=config.subtrajectory_length)
    buffer = ReplayBuffer(config.replay_capacity)
    variants: dict = {}

    def reward_fn(variant_id: str, y: float) -> float:
        return _reward(variants[variant_id], y, config.epsilon_clamp)

    surrogate = agent = None
    surrogate_trainer = agent_trainer = None
    train_rng = seeding.numpy_rng(master, "pretrain-train")
    train_gen = seeding.torch_generator(master, "pretrain-train")
    surrogate_losses: list = []
    sac_stats: list = []
    consecutive_failures = 0

    for i in range(config.n_pretrain_variants):
        variant = config.objective.make_variant(_variant_seed(master, "pretrain", i),
                                                config.optimum_budget)
        variants[variant.variant_id] = variant
        if surrogate is None:
            surrogate, agent = build_models(config, variant.dim)
            surrogate_trainer = SurrogateTrainer(surrogate, lr=config.surrogate_lr)
            agent_trainer = AgentTrainer(agent, surrogate,
                                         domain=variant.bounds or objectives.Box.unit(variant.dim),
                                         hyper=_agent_hyper(config))
        np_rng = seeding.numpy_rng(master, "pretrain-rollout", i)
        torch_gen = seeding.torch_generator(master, "pretrain-rollout", i)
        trajectories = config.pretrain_samples_per_variant // config.subtrajectory_length
        for _ in range(trajectories):
            budget.spend(config.n_init)
            traj = reset_episode(variant, env_cfg, np_rng)
            done = False
            while not done:
                budget.spend(1)
                proposed = _select(config, agent, surrogate, traj, variant,
                                   np_rng, torch_gen, greedy=False)
                action = exploration_mix(proposed, len(traj), env_cfg, variant, np_rng)
                _, done = step(traj, action, variant, env_cfg)
            buffer.store(traj)

            for _ in range(config.updates_per_trajectory):
                try:
                    batch = [buffer.sample(train_rng)
                             for _ in range(config.surrogate_batch)]
                    surrogate_losses.append(
                        surrogate_trainer.train_step(batch, train_rng))
                    consecutive_failures = 0
                except TrainingDivergenceError as exc:
                    consecutive_failures += 1
                    logger.warning("surrogate step rejected: %s", exc)
                    if consecutive_failures >= MAX_CONSECUTIVE_DIVERGENCES:
                        raise
            for _ in range(config.updates_per_trajectory):
                try:
                    batch = transitions_from_buffer(buffer, config.n_init, reward_fn,
                                                    train_rng, config.sac_batch)
                    sac_stats.append(agent_trainer.sac_update(batch, train_gen))
                    consecutive_failures = 0
                except TrainingDivergenceError as exc:
                    consecutive_failures += 1
                    logger.warning("sac update rejected: %s", exc)
                    if consecutive_failures >= MAX_CONSECUTIVE_DIVERGENCES:
                        raise

    total_evals = sum(v.evaluations for v in variants.values())
    if total_evals != budget.limit or budget.used != budget.limit:
        raise BudgetExceededError(
            f"pre-training accounting mismatch: {total_evals} evaluations, "
            f"{budget.used} metered, budget {budget.limit}")
    info = {"objective_evaluations": total_evals,
            "surrogate_losses": surrogate_losses,
            "sac_stats": sac_stats,
            "variants": sorted(variants)}
    return surrogate, agent, info


def _init_records(config, method, variant, seed, traj, start_step, y_best,
                  reset_ms):
    records = []
    per_point_ms = reset_ms / max(len(traj), 1)
    for offset, (x, y) in enumerate(traj.steps):
        y_best = max(y_best, y)
        records.append(RegretRecord(
            method=method, variant_id=variant.variant_id, seed=seed,
            step=start_step + offset, x=np.asarray(x, dtype=np.float64), y=y,
            y_best=y_best, regret=np.nan, wall_time_ms=per_point_ms,
            reward=_reward(variant, y, config.epsilon_clamp)))
    return records, y_best


def _rollout_rtdk(config, variant, seed, surrogate, agent):
    master = config.master_seed
    np_rng = seeding.numpy_rng(master, "eval-run", variant.seed, seed)
    torch_gen = seeding.torch_generator(master, "eval-run", variant.seed, seed)
    env_cfg = _env_config(config, t_max=config.subtrajectory_length,
                          subtrajectory_length=config.subtrajectory_length)
    budget = _BudgetMeter(config.eval_budget)
    records: list = []
    y_best = -np.inf
    global_step = 0

    online_buffer = online_surrogate_trainer = online_agent_trainer = None
    if config.online_updates:
        online_buffer = ReplayBuffer(config.replay_capacity)
        online_surrogate_trainer = SurrogateTrainer(surrogate, lr=config.surrogate_lr)
        online_agent_trainer = AgentTrainer(
            agent, surrogate, domain=variant.bounds or objectives.Box.unit(variant.dim),
            hyper=_agent_hyper(config))
        online_rng = seeding.numpy_rng(master, "eval-online", variant.seed, seed)
        online_gen = seeding.torch_generator(master, "eval-online", variant.seed, seed)

    for _ in range(config.eval_budget // config.subtrajectory_length):
        budget.spend(config.n_init)
        t0 = time.perf_counter()
        traj = reset_episode(variant, env_cfg, np_rng)
        reset_ms = (time.perf_counter() - t0) * 1e3
        new_records, y_best = _init_records(config, "rtdk", variant, seed, traj,
                                            global_step, y_best, reset_ms)
        records.extend(new_records)
        global_step += len(traj)
        done = False
        while not done:
            budget.spend(1)
            t0 = time.perf_counter()
            proposed = _select(config, agent, surrogate, traj, variant,
                               np_rng, torch_gen, greedy=config.greedy_eval)
            action = exploration_mix(proposed, global_step, env_cfg, variant, np_rng)
            reward, done = step(traj, action, variant, env_cfg)
            wall_ms = (time.perf_counter() - t0) * 1e3
            x, y = traj.steps[-1]
            y_best = max(y_best, y)
            records.append(RegretRecord(
                method="rtdk", variant_id=variant.variant_id, seed=seed,
                step=global_step, x=x, y=y, y_best=y_best, regret=np.nan,
                wall_time_ms=wall_ms, reward=reward))
            global_step += 1
        if config.online_updates:
            online_buffer.store(traj)
            def online_reward(variant_id, y, _variant=variant):
                return _reward(_variant, y, config.epsilon_clamp)
            for _ in range(config.updates_per_trajectory):
                try:
                    batch = [online_buffer.sample(online_rng)
                             for _ in range(config.surrogate_batch)]
                    online_surrogate_trainer.train_step(batch, online_rng)
                    sac_batch = transitions_from_buffer(
                        online_buffer, config.n_init, online_reward,
                        online_rng, config.sac_batch)
                    online_agent_trainer.sac_update(sac_batch, online_gen)
                except TrainingDivergenceError as exc:
                    logger.warning("online update rejected: %s", exc)
    return records


def _rollout_baseline(config, variant, seed):
    method = config.method
    np_rng = seeding.numpy_rng(config.master_seed, "eval-run", variant.seed, seed)
    env_cfg = _env_config(config, t_max=config.eval_budget,
                          subtrajectory_length=config.eval_budget - config.n_init)
    budget = _BudgetMeter(config.eval_budget)
    if method == "random":
        policy = RandomPolicy()
    else:
        policy = ClassicalGpPolicy(
            dim=variant.dim,
            acquisition=AcquisitionConfig(kind=method, xi=config.acquisition_xi,
                                          kappa=config.acquisition_kappa),
            kernel_components=config.kernel_components, jitter=config.jitter)
    domain = variant.candidates if variant.is_discrete else variant.bounds

    budget.spend(config.n_init)
    t0 = time.perf_counter()
    traj = reset_episode(variant, env_cfg, np_rng)
    reset_ms = (time.perf_counter() - t0) * 1e3
    records, y_best = _init_records(config, method, variant, seed, traj, 0,
                                    -np.inf, reset_ms)
    global_step = len(traj)
    done = False
    while not done:
        budget.spend(1)
        t0 = time.perf_counter()
        obs = ObservationSet.from_data(traj.xs(), traj.ys())
        action = policy.propose(obs, domain, np_rng)
        reward, done = step(traj, action, variant, env_cfg)
        wall_ms = (time.perf_counter() - t0) * 1e3
        x, y = traj.steps[-1]
        y_best = max(y_best, y)
        records.append(RegretRecord(
            method=method, variant_id=variant.variant_id, seed=seed,
            step=global_step, x=x, y=y, y_best=y_best, regret=np.nan,
            wall_time_ms=wall_ms, reward=reward))
        global_step += 1
    return records


def run_evaluation(config: ExperimentConfig, surrogate: TdklSurrogate | None = None,
                   agent: BoAgent | None = None) -> list:
    """Evaluate the configured method on fresh variants under the strict
    sample budget; one RegretRecord per objective evaluation."""
    torch.set_num_threads(config.torch_threads)
    if config.method == "rtdk" and (surrogate is None or agent is None):
        raise ConfigError("rtdk evaluation needs surrogate and agent checkpoints")
    records: list = []
    variants = []
    for j in range(config.n_eval_variants):
        variant = config.objective.make_variant(
            _variant_seed(config.master_seed, "eval", j), config.optimum_budget)
        variants.append(variant)
        for seed in config.seeds:
            if config.method == "rtdk":
                records.extend(_rollout_rtdk(config, variant, seed, surrogate, agent))
            else:
                records.extend(_rollout_baseline(config, variant, seed))
    f_star = {v.variant_id: v.f_star for v in variants}
    for record in records:
        record.regret = f_star[record.variant_id] - record.y_best
    return records


def run_experiment(config: ExperimentConfig) -> dict:
    """Pre-train (rtdk only), evaluate, and write all artifacts to out_dir."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save_json(out_dir / "config.json")
    surrogate = agent = None
    pretrain_info = None
    if config.method == "rtdk":
        surrogate, agent, pretrain_info = run_pretraining(config)
        surrogate.save(out_dir / "surrogate.ckpt")
        agent.save(out_dir / "agent.ckpt")
    records = run_evaluation(config, surrogate, agent)
    paths = emit_report(records, out_dir, make_plot=config.make_plot)
    paths["trajectories"] = write_trajectory_log(records, out_dir / "trajectories.csv")
    objectives.save_fstar_cache(out_dir / "fstar_cache.csv")
    return {"records": records, "paths": paths, "pretrain_info": pretrain_info}


def run_ablation(config: ExperimentConfig, sweep: dict) -> dict:
    """Run the experiment once per sweep setting with shared seeds.

    sweep is {"subtrajectory_lengths": [...]} or {"surrogate_variants": [...]};
    outputs land in per-setting subdirectories of out_dir.
    """
    out_dir = Path(config.out_dir)
    settings = []
    if sweep.get("subtrajectory_lengths"):
        for length in sweep["subtrajectory_lengths"]:
            settings.append((f"L{length}",
                             config.replace(subtrajectory_length=int(length))))
    elif sweep.get("surrogate_variants"):
        for variant in sweep["surrogate_variants"]:
            settings.append((f"surrogate-{variant}",
                             config.replace(surrogate_variant=variant)))
    if not settings:
        raise ConfigError("ablation sweep is empty")
    results = {}
    for tag, setting in settings:
        setting = setting.replace(out_dir=str(out_dir / tag))
        logger.info("ablation setting %s", tag)
        results[tag] = run_experiment(setting)
    return results
