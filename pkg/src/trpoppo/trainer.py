"""Training orchestration: phase schedule, logging, checkpoints, evaluation."""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from trpoppo.autodiff import ParamVector
from trpoppo.env import EnvConfig, ExpressionDataset, PerturbEnv, load_dataset, synthesize_dataset
from trpoppo.metrics import MetricReport, PredictionSet, build_report, render_table, report_csv
from trpoppo.networks import (
    POLICY_PREFIX,
    VALUE_PREFIX,
    PolicyNet,
    ValueNet,
    init_policy,
    init_value,
    load_checkpoint,
    policy_forward,
    save_checkpoint,
)
from trpoppo.ppo import Adam, PpoConfig, fine_tune
from trpoppo.rollout import collect_rollout, compute_gae, normalize_advantages
from trpoppo.trpo import TrustRegionConfig, trpo_step

log = logging.getLogger(__name__)

RUNLOG_SCHEMA = "trpoppo.runlog/1"
VARIANTS = ("PPO_ONLY", "TRPO_PPO")
SCHEDULES = ("phased", "every_iteration")
EVAL_SEED_OFFSET = 7919
DISPLAY_NAME = {"PPO_ONLY": "PPO", "TRPO_PPO": "TRPO_PPO"}


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    total_timesteps: int = 50_000
    trpo_timesteps: int = 10_000
    batch_size: int = 2048
    seed: int = 0
    variant: str = "TRPO_PPO"
    schedule: str = "phased"
    modality: str = "RNA"
    dataset: str = ""
    data_seed: int = 0
    synth_cells: int = 400
    synth_genes: int = 32
    synth_density: float = 0.1
    hidden: Tuple[int, ...] = (256, 256)
    init_log_std: float = -1.6
    gamma: float = 0.99
    lam: float = 0.95
    output_dir: str = ""
    env: EnvConfig = field(default_factory=EnvConfig)
    trust_region: TrustRegionConfig = field(default_factory=TrustRegionConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.batch_size < 1 or self.total_timesteps < 1:
            raise ConfigError("batch_size and total_timesteps must be >= 1")
        if not 0 <= self.trpo_timesteps <= self.total_timesteps:
            raise ConfigError("need 0 <= trpo_timesteps <= total_timesteps")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# -- config files ---------------------------------------------------------------

SECTIONS = {"env": EnvConfig, "trust_region": TrustRegionConfig, "ppo": PpoConfig}


def _parse(value: str, typ) -> object:
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    if typ == "bool":
        return value.strip().lower() in ("1", "true", "yes", "on")
    if typ.startswith("Tuple"):
        return tuple(int(x) for x in value.replace(" ", "").split(",") if x)
    return value


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def config_to_ini(config: RunConfig) -> str:
    cp = configparser.ConfigParser()
    cp["run"] = {f.name: _fmt(getattr(config, f.name)) for f in dataclasses.fields(config) if f.name not in SECTIONS}
    for name in SECTIONS:
        sub = getattr(config, name)
        cp[name] = {f.name: _fmt(getattr(sub, f.name)) for f in dataclasses.fields(sub)}
    out = []

    class _W:
        def write(self, s):
            out.append(s)

    cp.write(_W())
    return "".join(out)


def config_from_mapping(values: Dict[str, Dict[str, str]], base: Optional[RunConfig] = None) -> RunConfig:
    """Build a config from {section: {key: text}}; unknown keys are errors."""
    base = base or RunConfig()
    try:
        run_fields = {f.name: f for f in dataclasses.fields(RunConfig) if f.name not in SECTIONS}
        changes = {}
        for key, raw in values.get("run", {}).items():
            if key not in run_fields:
                raise ConfigError(f"unknown key run.{key}")
            changes[key] = _parse(raw, run_fields[key].type)
        for name, cls in SECTIONS.items():
            sub_fields = {f.name: f for f in dataclasses.fields(cls)}
            sub_changes = {}
            for key, raw in values.get(name, {}).items():
                if key not in sub_fields:
                    raise ConfigError(f"unknown key {name}.{key}")
                sub_changes[key] = _parse(raw, sub_fields[key].type)
            if sub_changes:
                changes[name] = dataclasses.replace(getattr(base, name), **sub_changes)
        unknown = set(values) - {"run", *SECTIONS}
        if unknown:
            raise ConfigError(f"unknown sections {sorted(unknown)}")
        return dataclasses.replace(base, **changes)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Union[str, Path]) -> RunConfig:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ConfigError(f"cannot read config {path}")
    return config_from_mapping({s: dict(cp[s]) for s in cp.sections()})


# -- run log ------------------------------------------------------------------


@dataclass
class RunLog:
    config: RunConfig
    records: List[dict] = field(default_factory=list)
    final: Dict[str, dict] = field(default_factory=dict)
    halted: bool = False

    def to_jsonl(self) -> str:
        lines = [json.dumps({"schema": RUNLOG_SCHEMA, "type": "header", "variant": self.config.variant,
                             "modality": self.config.modality, "seed": self.config.seed}, sort_keys=True)]
        for rec in self.records:
            lines.append(json.dumps({"schema": RUNLOG_SCHEMA, "type": "iteration", **rec}, sort_keys=True))
        for split, rep in sorted(self.final.items()):
            lines.append(json.dumps({"schema": RUNLOG_SCHEMA, "type": "final", "split": split, **rep}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @property
    def final_episode_reward(self) -> float:
        for rec in reversed(self.records):
            if rec.get("mean_episode_reward") is not None:
                return float(rec["mean_episode_reward"])
        return float("nan")


def read_runlog(path: Union[str, Path]) -> dict:
    """Parse a runlog.jsonl into {header, records, final}."""
    header, records, final = None, [], {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("schema") != RUNLOG_SCHEMA:
            raise ValueError(f"{path}: unsupported log schema {rec.get('schema')!r}")
        kind = rec.pop("type")
        rec.pop("schema")
        if kind == "header":
            header = rec
        elif kind == "iteration":
            records.append(rec)
        elif kind == "final":
            final[rec.pop("split")] = rec
    if header is None:
        raise ValueError(f"{path}: missing header record")
    return {"header": header, "records": records, "final": final}


# -- training -------------------------------------------------------------------


@dataclass
class TrainingResult:
    log: RunLog
    policy: PolicyNet
    value: ValueNet
    dataset: ExpressionDataset


def make_dataset(config: RunConfig) -> ExpressionDataset:
    if config.dataset:
        return load_dataset(config.dataset, config.modality)
    return synthesize_dataset(config.data_seed, config.synth_cells, config.synth_genes, config.synth_density, config.modality)


def _finite(*arrays) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)


def _checkpoint_meta(config: RunConfig, policy: PolicyNet, value: ValueNet, env: PerturbEnv, timestep: int) -> dict:
    return {
        "obs_dim": policy.obs_dim,
        "act_dim": policy.act_dim,
        "policy_hidden": list(policy.hidden),
        "value_hidden": list(value.hidden),
        "genes": [int(g) for g in env.genes],
        "modality": config.modality,
        "variant": config.variant,
        "seed": config.seed,
        "timestep": timestep,
    }


def write_checkpoint(path: Union[str, Path], config: RunConfig, policy: PolicyNet, value: ValueNet, env: PerturbEnv, timestep: int) -> None:
    save_checkpoint(path, policy.params.merged(value.params), _checkpoint_meta(config, policy, value, env, timestep))


def networks_from_checkpoint(path: Union[str, Path]) -> Tuple[PolicyNet, ValueNet, dict]:
    params, meta = load_checkpoint(path)
    pi_names = [n for n in params.names if n.startswith(POLICY_PREFIX)]
    v_names = [n for n in params.names if n.startswith(VALUE_PREFIX)]
    policy = init_policy(meta["obs_dim"], meta["act_dim"], None, meta["policy_hidden"])
    value = init_value(meta["obs_dim"], None, meta["value_hidden"])
    try:
        policy = policy.with_params(params.subset(pi_names))
        value = value.with_params(params.subset(v_names))
    except ValueError as exc:
        raise ConfigError(f"{path}: checkpoint layout does not match its declared architecture") from exc
    return policy, value, meta


def run_training(config: RunConfig, progress: Optional[Callable[[dict], None]] = None) -> TrainingResult:
    """Training loop: collect -> GAE -> (major step) -> clipped fine-tune.

    With the phased schedule the major step runs while the timestep count
    at the start of an iteration is below ``trpo_timesteps``; afterwards only
    the fine-tune runs, warm-started from the phase-one parameters.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    init_rng, env_seq, act_seq, shuffle_seq = (np.random.default_rng(s) for s in seeds)
    dataset = make_dataset(config)
    env = PerturbEnv(dataset, config.env, "TRAIN", seed=int(env_seq.integers(2**31)))
    policy = init_policy(env.obs_dim, env.act_dim, init_rng, config.hidden, config.init_log_std)
    value = init_value(env.obs_dim, init_rng, config.hidden)
    optimizer = Adam(policy.params.size + value.params.size, config.ppo.learning_rate,
                     config.ppo.adam_beta1, config.ppo.adam_beta2, config.ppo.adam_eps)

    out = Path(config.output_dir) if config.output_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(config_to_ini(config))
        timing = open(out / "timing.jsonl", "w")
    else:
        timing = None

    runlog = RunLog(config)
    timestep = 0
    iteration = 0
    wrote_boundary = False
    try:
        while timestep < config.total_timesteps:
            start = time.perf_counter()
            in_phase_one = config.variant == "TRPO_PPO" and (
                config.schedule == "every_iteration" or timestep < config.trpo_timesteps
            )
            batch = collect_rollout(env, policy, value, config.batch_size, act_seq)
            timestep += len(batch)
            rec = {
                "iteration": iteration,
                "timestep": timestep,
                "phase": 1 if in_phase_one else 2,
                "mean_episode_reward": float(batch.episode_returns.mean()) if batch.episode_returns.size else None,
                "episodes": int(batch.episode_returns.size),
            }
            if not _finite(batch.rewards, batch.values):
                rec["flag"] = "non_finite_rollout"
                runlog.records.append(rec)
                runlog.halted = True
                break
            batch = normalize_advantages(compute_gae(batch, config.gamma, config.lam))

            if in_phase_one:
                policy, report = trpo_step(policy, batch, config.trust_region)
                rec["natural_step"] = report.to_dict()
            result = fine_tune(policy, value, batch, config.ppo, shuffle_seq, optimizer)
            rec["ppo"] = result.epochs
            if result.aborted or not _finite(result.policy.params.values, result.value.params.values):
                rec["flag"] = "non_finite_loss"
                runlog.records.append(rec)
                runlog.halted = True
                break
            policy, value = result.policy, result.value
            runlog.records.append(rec)
            if progress is not None:
                progress(rec)
            if timing is not None:
                timing.write(json.dumps({"iteration": iteration, "wall_clock": time.perf_counter() - start}) + "\n")
            iteration += 1

            if out is not None and in_phase_one and not wrote_boundary and config.schedule == "phased":
                if timestep >= config.trpo_timesteps:
                    write_checkpoint(out / "checkpoint_phase1.bin", config, policy, value, env, timestep)
                    wrote_boundary = True
    finally:
        if timing is not None:
            timing.close()

    for split in ("TRAIN", "TEST"):
        if dataset.cells_in(split).size:
            rep = evaluate_policy(policy, dataset, config.env, split, eval_seed(config))
            runlog.final[split] = rep.to_dict()

    if out is not None:
        write_checkpoint(out / "checkpoint_final.bin", config, policy, value, env, timestep)
        (out / "runlog.jsonl").write_text(runlog.to_jsonl())
        if "TEST" in runlog.final:
            rows = [(DISPLAY_NAME[config.variant], config.modality, MetricReport.from_dict(runlog.final["TEST"]))]
            (out / "metrics.csv").write_text(report_csv(rows))
    return TrainingResult(runlog, policy, value, dataset)


# -- evaluation -----------------------------------------------------------------


def eval_seed(config: RunConfig) -> int:
    return config.data_seed + EVAL_SEED_OFFSET


def rollout_predictions(actor: Callable[[np.ndarray], np.ndarray], env: PerturbEnv, seed: int) -> PredictionSet:
    """One episode per cell of ``env.split`` (in order) with seeded perturbations."""
    from trpoppo.env import sample_perturbation

    rng = np.random.default_rng(seed)
    env.rng = np.random.default_rng(rng.integers(2**63))
    preds, targets, bases = [], [], []
    for cell in env.cells:
        spec = sample_perturbation(rng, env.n_genes, env.config)
        obs = env.reset(int(cell), spec)
        done = False
        while not done:
            obs, _, done = env.step(actor(obs))
        preds.append(env.state.prediction)
        targets.append(env.state.target)
        bases.append(env.state.baseline)
    return PredictionSet(np.array(preds), np.array(targets), np.array(bases))


def evaluate_policy(policy: PolicyNet, dataset: ExpressionDataset, env_config: EnvConfig, split: str, seed: int) -> MetricReport:
    """Deterministic (mean-action) rollout over every cell in ``split``."""
    env = PerturbEnv(dataset, env_config, split, seed=seed)
    if env.obs_dim != policy.obs_dim or env.act_dim != policy.act_dim:
        raise ConfigError(
            f"policy expects obs/act dims {policy.obs_dim}/{policy.act_dim}, environment gives {env.obs_dim}/{env.act_dim}"
        )
    preds = rollout_predictions(lambda o: policy_forward(policy, o).mean, env, seed)
    return build_report(preds)


def evaluate(checkpoint: Union[str, Path], dataset: ExpressionDataset, split: str = "TEST",
             env_config: EnvConfig = EnvConfig(), seed: int = EVAL_SEED_OFFSET) -> MetricReport:
    policy, _, meta = networks_from_checkpoint(checkpoint)
    env = PerturbEnv(dataset, env_config, split, seed=seed)
    if list(env.genes) != list(meta.get("genes", env.genes)):
        raise ConfigError("checkpoint was trained on a different gene subset")
    return evaluate_policy(policy, dataset, env_config, split, seed)


# -- reporting --------------------------------------------------------------------


def emit_report(logs: Sequence[Union[RunLog, dict]], split: str = "TEST") -> Tuple[List[Tuple[str, str, MetricReport]], str, str]:
    """Rows (algorithm, modality, mean report) plus CSV and aligned-table text."""
    if not logs:
        raise ValueError("need at least one run")
    groups: Dict[Tuple[str, str], List[MetricReport]] = {}
    keys = None
    for lg in logs:
        if isinstance(lg, RunLog):
            variant, modality, final = lg.config.variant, lg.config.modality, lg.final
        else:
            variant, modality, final = lg["header"]["variant"], lg["header"]["modality"], lg["final"]
        if split not in final:
            raise ValueError(f"run has no final {split} report")
        these = set(final[split])
        if keys is None:
            keys = these
        elif these != keys:
            raise ValueError("runs report inconsistent metric columns")
        groups.setdefault((DISPLAY_NAME.get(variant, variant), modality), []).append(MetricReport.from_dict(final[split]))
    order = {"PPO": 0, "TRPO_PPO": 1}
    rows = [(a, m, MetricReport.mean(reps)) for (a, m), reps in sorted(groups.items(), key=lambda kv: (kv[0][1], order.get(kv[0][0], 9), kv[0][0]))]
    return rows, report_csv(rows), render_table(rows)
