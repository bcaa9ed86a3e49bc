"""Experiment stages: expert -> demonstration -> reward module -> imitation -> evaluation.

Each stage draws its randomness from ``child_seed(run.seed, <stage>)`` so a
stage can be rerun alone and still reproduce the full-pipeline result. The
imitation learner only ever sees the configured intrinsic reward; the true
environment reward is read by the periodic greedy evaluation and nowhere else.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..adversarial import Discriminator, GailReward, train_bc
from ..demo import Demonstration
from ..diff import Adam, assign_params, load_params, save_params
from ..envs import GridHazardEnv, PendulumEnv, VecEnv
from ..girl import GirlModule, GirlReward, Normalizer, train_girl
from ..icm import IcmModule, IcmReward, train_icm
from ..ppo import (
    EvalResult,
    PolicyNet,
    PpoConfig,
    RewardStandardizer,
    TrueEnvReward,
    collect_rollout,
    evaluate,
    ppo_update,
)
from .config import ConfigError, ExperimentConfig
from .plotting import METRICS_HEADER
from .seeding import child_rng, child_seed


class MissingArtifact(FileNotFoundError):
    pass


# ------------------------------------------------------------------ builders


def build_env(cfg: ExperimentConfig):
    if cfg["env"]["id"] == "grid_hazard":
        g = cfg["grid"]
        return GridHazardEnv(
            width=g["width"], height=g["height"], lives=g["lives"], n_pellets=g["n_pellets"],
            n_hazards=g["n_hazards"], life_steps=g["life_steps"], pellet_oxygen=g["pellet_oxygen"],
            max_episode_steps=None if g["max_episode_steps"] == "none" else g["max_episode_steps"],
            layout_seed=None if g["layout_seed"] == "none" else g["layout_seed"],
        )
    p = cfg["pendulum"]
    return PendulumEnv(max_torque=p["max_torque"], max_speed=p["max_speed"], dt=p["dt"],
                       init_angle=p["init_angle"], max_episode_steps=p["max_episode_steps"])


def ppo_config(cfg: ExperimentConfig, stage: str) -> PpoConfig:
    s = cfg.ppo_settings(stage)
    s.pop("hidden")
    return PpoConfig(**s)


def new_policy(cfg: ExperimentConfig, stage: str, rng: np.random.Generator, cls=PolicyNet) -> PolicyNet:
    spec = build_env(cfg).spec
    return cls(spec.state_dim, spec.action_space, rng, hidden=cfg.ppo_settings(stage)["hidden"])


def load_policy(cfg: ExperimentConfig, stage: str, path) -> PolicyNet:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"policy checkpoint not found: {path}")
    policy = new_policy(cfg, stage, np.random.default_rng(0))
    assign_params(policy.named_parameters("policy"), load_params(path))
    return policy


def build_reward_module(cfg: ExperimentConfig, rng: np.random.Generator):
    spec = build_env(cfg).spec
    space = spec.action_space
    k = space.n if space.discrete else space.dim
    method = cfg["method"]["name"]
    if method == "girl":
        g = cfg["girl"]
        return GirlModule(spec.state_dim, k, space.discrete, rng, hidden=g["hidden"], alpha=cfg.girl_alpha(),
                          lam=g["lambda"], beta=g["beta"], prior=g["prior"])
    if method == "cdil":
        c = cfg["icm"]
        return IcmModule(spec.state_dim, k, space.discrete, rng, feature_dim=c["feature_dim"],
                         hidden=c["hidden"], lam=c["lambda"])
    raise ConfigError(f"method {method!r} has no separately trained reward module")


def reward_prefix(cfg: ExperimentConfig) -> str:
    return "girl" if cfg["method"]["name"] == "girl" else "icm"


def load_reward_module(cfg: ExperimentConfig, path):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"reward checkpoint not found: {path}")
    module = build_reward_module(cfg, np.random.default_rng(0))
    assign_params(module.named_parameters(reward_prefix(cfg)), load_params(path))
    return module


def normalizer_for(cfg: ExperimentConfig) -> Normalizer:
    return Normalizer.from_spec(build_env(cfg).spec)


# ------------------------------------------------------------------- metrics


def write_csv(path, header, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                        for v in row])


def write_metrics(path, rows: list[dict]) -> None:
    write_csv(path, METRICS_HEADER, [[r.get(k) for k in METRICS_HEADER] for r in rows])


def eval_policy(cfg: ExperimentConfig, policy) -> EvalResult:
    return evaluate(policy, build_env(cfg), cfg["eval"]["episodes"], cfg["eval"]["seeds"])


# ----------------------------------------------------------------------- PPO


@dataclass
class PpoRun:
    policy: PolicyNet
    rows: list[dict]
    updates: int
    steps: int
    raw_rewards: list = field(default_factory=list)
    standardized: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    standardizer: RewardStandardizer | None = None


def run_ppo(cfg: ExperimentConfig, stage: str, reward_source, after_rollout=None,
            keep_rewards: bool = False) -> PpoRun:
    """PPO against ``reward_source`` for the stage's step budget.

    Only whole rollouts that fit in the budget are collected, so the step
    count never exceeds ``total_steps``. A metrics row (greedy true-return evaluation) is appended every
    ``eval_interval`` updates and after the final update.
    """
    seed = cfg["run"]["seed"]
    pcfg = ppo_config(cfg, stage)
    rng = child_rng(seed, f"{stage}.policy")
    policy = new_policy(cfg, stage, rng)
    vec = VecEnv([build_env(cfg) for _ in range(pcfg.num_envs)], child_seed(seed, f"{stage}.envs"))
    std_on = stage == "imitation" and cfg["imitation"]["standardize"]
    standardizer = RewardStandardizer(pcfg.num_envs, pcfg.gamma, enabled=std_on)
    opt = Adam(policy.parameters(), pcfg.lr)
    total = cfg.total_steps(stage)
    interval = cfg[stage]["eval_interval"]
    run = PpoRun(policy, [], 0, 0, standardizer=standardizer)
    stats, mean_r = {}, float("nan")
    while run.steps + pcfg.num_envs * pcfg.horizon <= total:
        batch = collect_rollout(policy, vec, reward_source, pcfg.horizon, rng, standardizer,
                                life_loss_done=cfg[stage]["episodic_life"])
        if after_rollout is not None:
            after_rollout(batch)
        stats = ppo_update(policy, batch, pcfg, opt, rng)
        run.steps += batch.size
        run.updates += 1
        mean_r = float(batch.raw_rewards.mean())
        if keep_rewards:
            run.raw_rewards.append(batch.raw_rewards.copy())
            run.standardized.append(batch.rewards.copy())
            run.dones.append(batch.dones.copy())
        if run.updates % interval == 0:
            run.rows.append(_row(cfg, policy, run, mean_r, stats, seed))
    if not run.rows or run.rows[-1]["update"] != run.updates:
        run.rows.append(_row(cfg, policy, run, mean_r, stats, seed))
    return run


def _row(cfg, policy, run: PpoRun, mean_r: float, stats: dict, seed: int) -> dict:
    return {
        "step": run.steps,
        "update": run.updates,
        "mean_intrinsic_reward": mean_r,
        "mean_true_return": eval_policy(cfg, policy).mean,
        "loss_recon": stats.get("value_loss"),
        "loss_kl": stats.get("approx_kl"),
        "loss_policy": stats.get("policy_loss"),
        "seed": seed,
    }


# -------------------------------------------------------------------- stages


def expert_train(cfg: ExperimentConfig, out_dir) -> PpoRun:
    out = Path(out_dir)
    run = run_ppo(cfg, "expert", TrueEnvReward())
    save_params(out / "expert.params", run.policy.named_parameters("policy"))
    write_metrics(out / "expert_metrics.csv", run.rows)
    return run


def record_demo(cfg: ExperimentConfig, expert: PolicyNet, out_dir=None) -> Demonstration:
    from ..demo import record, save

    d = cfg["demo"]
    demo = record(expert.greedy, build_env(cfg), d["mode"], d["episodes"], child_seed(cfg["run"]["seed"], "demo"))
    if out_dir is not None:
        save(demo, Path(out_dir) / "demo.bin")
    return demo


def load_demo(path) -> Demonstration:
    from ..demo import load

    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"demonstration not found: {path}")
    return load(path)


def train_reward(cfg: ExperimentConfig, demo: Demonstration, out_dir=None):
    """Fit the GIRL or ICM module on the demonstration; returns (module, log)."""
    method = cfg["method"]["name"]
    if method not in ("girl", "cdil"):
        raise ConfigError(f"train-reward needs method girl or cdil, not {method!r}")
    seed = cfg["run"]["seed"]
    module = build_reward_module(cfg, child_rng(seed, "reward.init"))
    norm = normalizer_for(cfg)
    if demo.env_id != build_env(cfg).env_id:
        raise ConfigError(f"demonstration was recorded on {demo.env_id}, config uses {cfg['env']['id']}")
    sec = cfg["girl"] if method == "girl" else cfg["icm"]
    trainer = train_girl if method == "girl" else train_icm
    log = trainer(module, demo, epochs=sec["epochs"], batch_size=sec["batch_size"], lr=sec["lr"],
                  stride=cfg.stride(), rng=child_rng(seed, "reward.train"), normalizer=norm,
                  log_interval=max(1, sec["epochs"] // 100))
    if out_dir is not None:
        out = Path(out_dir)
        save_params(out / "reward.params", module.named_parameters(reward_prefix(cfg)))
        rows = []
        for entry in log:
            if method == "girl":
                losses = (-entry["recon"], entry["kl"], entry["policy"])
            else:
                losses = (entry["forward"], None, entry["inverse"])
            rows.append({"step": entry["epoch"], "update": entry["epoch"], "loss_recon": losses[0],
                         "loss_kl": losses[1], "loss_policy": losses[2], "seed": seed})
        write_metrics(out / "reward_loss.csv", rows)
    return module, log


@dataclass
class ImitationResult:
    policy: PolicyNet
    rows: list[dict]
    final: EvalResult
    run: PpoRun | None = None
    extra: dict = field(default_factory=dict)


def imitate(cfg: ExperimentConfig, demo: Demonstration, reward_module=None, out_dir=None,
            keep_rewards: bool = False) -> ImitationResult:
    method = cfg["method"]["name"]
    seed = cfg["run"]["seed"]
    norm = normalizer_for(cfg)
    env = build_env(cfg)
    if demo.env_id != env.env_id:
        raise ConfigError(f"demonstration was recorded on {demo.env_id}, config uses {cfg['env']['id']}")
    extra = {}
    if method == "bc":
        b = cfg["bc"]
        policy, log = train_bc(demo, env.spec.action_space, epochs=b["epochs"], lr=b["lr"],
                               batch_size=b["batch_size"], rng=child_rng(seed, "bc"),
                               hidden=cfg.ppo_settings("imitation")["hidden"])
        final = eval_policy(cfg, policy)
        rows = [{"step": 0, "update": b["epochs"], "mean_true_return": final.mean,
                 "loss_policy": log[-1]["nll"] if log else None, "seed": seed}]
        result = ImitationResult(policy, rows, final)
    else:
        after = None
        if method in ("girl", "cdil"):
            if reward_module is None:
                raise MissingArtifact(f"method {method} needs a trained reward module")
            if method == "girl":
                reward_module.beta = float(cfg["girl"]["beta"])
                source = GirlReward(reward_module, norm, child_rng(seed, "imitation.reward"))
            else:
                source = IcmReward(reward_module, norm)
        else:
            space = env.spec.action_space
            k = space.n if space.discrete else space.dim
            g = cfg["gail"]
            vail = method == "vail"
            disc = Discriminator(env.spec.state_dim, k, space.discrete, child_rng(seed, "disc.init"),
                                 hidden=g["hidden"], bottleneck=cfg["vail"]["bottleneck"] if vail else None,
                                 i_c=cfg.vail_i_c() if vail else 0.5, dual_step=cfg["vail"]["dual_step"])
            variant = cfg["vail"]["reward_variant"] if vail else g["reward_variant"]
            source = GailReward(disc, demo, norm, child_rng(seed, "disc.train"), variant=variant,
                                lr=g["lr"], batch_size=g["batch_size"])
            extra["discriminator"] = disc

            def after(batch):
                n = batch.size
                acts = batch.actions.reshape(n) if space.discrete else batch.env_actions.reshape(n, -1)
                source.update(batch.states.reshape(n, -1), acts)

        run = run_ppo(cfg, "imitation", source, after, keep_rewards=keep_rewards)
        final = eval_policy(cfg, run.policy)
        result = ImitationResult(run.policy, run.rows, final, run, extra)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_params(out / "policy.params", result.policy.named_parameters("policy"))
        write_metrics(out / "metrics.csv", result.rows)
        if "discriminator" in extra:
            save_params(out / "disc.params", extra["discriminator"].named_parameters("disc"))
    return result


BETA_TABLE_HEADER = ("beta", "seed", "final_return", "mean_intrinsic_reward")


def ablate_beta(cfg: ExperimentConfig, demo: Demonstration, reward_path, out_dir=None) -> list[dict]:
    """GIRIL imitation once per (beta, seed); the reward module is shared."""
    if cfg["method"]["name"] != "girl":
        raise ConfigError("ablate-beta needs method girl")
    rows = []
    for beta in cfg["ablation"]["betas"]:
        for seed in cfg["ablation"]["seeds"]:
            sub = cfg.copy()
            sub["girl"]["beta"] = beta
            sub["run"]["seed"] = seed
            module = load_reward_module(sub, reward_path)
            sub_out = None if out_dir is None else Path(out_dir) / f"beta_{beta!r}" / f"seed_{seed}"
            res = imitate(sub, demo, module, sub_out)
            rows.append({"beta": beta, "seed": seed, "final_return": res.final.mean,
                         "mean_intrinsic_reward": res.rows[-1]["mean_intrinsic_reward"]})
    if out_dir is not None:
        write_csv(Path(out_dir) / "beta_table.csv", BETA_TABLE_HEADER,
                  [[r[k] for k in BETA_TABLE_HEADER] for r in rows])
    return rows
