"""Experiment orchestration: config, training loop, evaluation metrics, results."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from importlib import resources
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .env import EnvSpec, load_env, sample_context
from .errors import ConfigError
from .estimator import (
    EpisodeState,
    ReplayBuffer,
    RewardPredictor,
    loo_marginal_contribution,
    routing_marginal_contribution,
    update_predictor,
    winner_take_all_signal,
)
from .mechanism import (
    Aggregator,
    LoggedObservation,
    Router,
    aggregate,
    candidate_scores,
    log_observation,
    route_probabilities,
)
from .optimizer import (
    CONFIG_PRESETS,
    OptimizerConfig,
    capture_snapshot,
    grpo_update,
    make_group,
    reinforce_update,
)
from .policy import (
    AgentPolicy,
    Proposal,
    ReplacementPolicy,
    action_probabilities,
    encode_for,
    init_policies,
    joint_distribution,
)
from .presets import PRESETS, get_preset
from .rollout import run_episode

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
SIGNAL_KINDS = ("wta", "dr", "loo", "shared", "frozen")


@dataclass
class ExperimentConfig:
    env: str = "routing-basic"
    env_file: Optional[str] = None
    mechanism: Optional[str] = None  # "router" or an aggregation rule; preset default if None
    conditioning: Optional[str] = None
    estimator: str = "dr"
    optimizer: str = "grpo"
    optimizer_preset: str = "default"
    optimizer_config: dict = field(default_factory=dict)
    n_updates: int = 150
    group_size: int = 4
    contexts_per_update: int = 1
    warmup_updates: int = 25
    tau_start: float = 1.00
    tau_end: float = 0.70
    epsilon_start: float = 0.05
    epsilon_end: float = 0.03
    replay_capacity: int = 50_000
    replay_batch: int = 64
    propensity_floor: float = 0.05
    ips_clip: float = 3.0
    predictor_lr: float = 0.5
    predictor_steps: int = 1
    replacement: str = "uniform"
    reference_refresh: int = 0  # 0: reference policy stays the initial policy
    init_scale: float = 0.0
    eval_interval: int = 10
    eval_contexts: Optional[list] = None  # None: every context
    eval_mode: str = "greedy"
    seed: int = 42
    name: Optional[str] = None

    def resolved_optimizer(self) -> OptimizerConfig:
        if self.optimizer_preset not in CONFIG_PRESETS:
            raise ConfigError(f"unknown optimizer preset {self.optimizer_preset!r}")
        base = dataclasses.asdict(CONFIG_PRESETS[self.optimizer_preset])
        unknown = set(self.optimizer_config) - set(base)
        if unknown:
            raise ConfigError(f"unknown optimizer_config keys: {sorted(unknown)}")
        base.update(self.optimizer_config)
        return OptimizerConfig(**base)

    def build_env(self) -> EnvSpec:
        return load_env(self.env_file) if self.env_file else get_preset(self.env)

    def resolve(self) -> "ExperimentConfig":
        """Fill preset-dependent defaults and validate; raises before any work is done."""
        cfg = dataclasses.replace(self)
        env = cfg.build_env()
        preset = PRESETS.get(env.name)
        if cfg.mechanism is None:
            cfg.mechanism = preset.mechanism if preset else (
                "router" if env.output_kind == "proposal" else "tuple-identity")
        if cfg.conditioning is None:
            cfg.conditioning = preset.conditioning if preset else (
                "independent" if cfg.mechanism == "router" else "autoregressive")
        if cfg.name is None:
            cfg.name = f"{env.name}-{cfg.estimator}-{cfg.optimizer}"
        cfg.optimizer_config = dataclasses.asdict(cfg.resolved_optimizer())
        cfg._validate(env)
        return cfg

    def _validate(self, env: EnvSpec) -> None:
        if self.estimator not in SIGNAL_KINDS:
            raise ConfigError(f"estimator must be one of {SIGNAL_KINDS}")
        if self.optimizer not in ("grpo", "reinforce"):
            raise ConfigError("optimizer must be 'grpo' or 'reinforce'")
        routing = self.mechanism == "router"
        if routing and env.output_kind != "proposal":
            raise ConfigError("routing needs an env with proposal outputs")
        if not routing and env.output_kind != "tuple" and self.mechanism == "tuple-identity":
            raise ConfigError("tuple-identity aggregation needs an env with tuple outputs")
        if self.estimator in ("dr", "wta") and not routing:
            raise ConfigError(f"estimator {self.estimator!r} needs the router mechanism")
        if self.estimator == "loo" and routing:
            raise ConfigError("estimator 'loo' needs a collaborative mechanism")
        if self.estimator in ("dr",) and env.K < 2:
            raise ConfigError("doubly-robust credit needs at least two agents")
        for name in ("n_updates", "warmup_updates", "reference_refresh"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.optimizer == "grpo" and self.group_size < 2:
            raise ConfigError("GRPO needs group_size >= 2")
        if self.group_size < 1 or self.contexts_per_update < 1 or self.eval_interval < 1:
            raise ConfigError("group_size, contexts_per_update and eval_interval must be positive")
        if self.predictor_steps < 0 or self.replay_batch < 1 or self.replay_capacity < 1:
            raise ConfigError("invalid replay / predictor settings")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ConfigError("tau schedule must stay positive")
        for v in (self.epsilon_start, self.epsilon_end):
            if not 0 <= v <= 1:
                raise ConfigError("epsilon schedule must stay in [0, 1]")
        if self.replacement not in ("uniform", "frozen-copy"):
            raise ConfigError("replacement must be 'uniform' or 'frozen-copy'")
        if self.eval_mode not in ("greedy", "stochastic"):
            raise ConfigError("eval_mode must be 'greedy' or 'stochastic'")
        if self.eval_contexts is not None:
            if not self.eval_contexts or any(not 0 <= c < env.n_contexts for c in self.eval_contexts):
                raise ConfigError("eval_contexts must be a non-empty list of valid context ids")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    if data.get("env_file"):
        data["env_file"] = str((Path(path).parent / data["env_file"]).resolve())
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**data)


def linear_schedule(start: float, end: float, u: int, n: int) -> float:
    if n <= 0:
        return start
    return start + (end - start) * (u / n)


# -- metrics ------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRecord:
    update: int
    tau: Optional[float]
    epsilon: Optional[float]
    mean_return: float
    router_accuracy: Optional[float]
    oracle_accuracy: Optional[float]
    regret: Optional[float]
    routing_entropy: Optional[float]
    routing_entropy_raw: Optional[float]
    brier: Optional[float]
    specialization: Optional[float]
    selection_shares: tuple = ()

    def to_row(self) -> dict:
        row = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "selection_shares"}
        for i, s in enumerate(self.selection_shares):
            row[f"share_{i}"] = s
        return row

    @classmethod
    def from_row(cls, row: dict) -> "MetricsRecord":
        def num(v, cast=float):
            return None if v in ("", None) else cast(v)

        shares = tuple(float(row[k]) for k in sorted((k for k in row if k.startswith("share_")),
                                                     key=lambda k: int(k.split("_")[1])))
        kw = {f.name: num(row[f.name], int if f.name == "update" else float)
              for f in dataclasses.fields(cls) if f.name != "selection_shares"}
        return cls(selection_shares=shares, **kw)


def brier_score(predictions, outcomes) -> float:
    p = np.clip(np.asarray(predictions, dtype=float), 0.0, 1.0)
    y = np.asarray(outcomes, dtype=float)
    return float(np.mean((p - y) ** 2))


def expected_brier(predictions, means) -> float:
    """Brier score in expectation over Bernoulli outcomes with the given means."""
    p = np.clip(np.asarray(predictions, dtype=float), 0.0, 1.0)
    m = np.asarray(means, dtype=float)
    return float(np.mean((p - m) ** 2 + m * (1 - m)))


def specialization_score(selections, context_labels, agent_specialties) -> float:
    """Fraction of decisions whose selected agent's specialty matches the context label."""
    if context_labels is None or agent_specialties is None:
        raise ConfigError("specialization needs context labels and agent specialties")
    if len(selections) != len(context_labels):
        raise ConfigError("need one context label per selection")
    if len(selections) == 0:
        raise ConfigError("no selections to score")
    hits = [agent_specialties[s] == lab for s, lab in zip(selections, context_labels)]
    return float(np.mean(hits))


def normalized_entropy(p) -> tuple:
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    h = float(-np.sum(nz * np.log(nz)))
    return (h / np.log(len(p)) if len(p) > 1 else 0.0), h


def greedy_proposals(policies, ctx) -> list:
    props = []
    for pol in policies:
        probs = action_probabilities(pol, encode_for(pol, ctx, props))
        props.append(Proposal(pol.agent, int(np.argmax(probs))))
    return props


def evaluate(
    policies,
    mechanism,
    env: EnvSpec,
    eval_contexts,
    update: int = 0,
    mode: str = "greedy",
) -> MetricsRecord:
    """Deterministic evaluation over ``eval_contexts``.

    Greedy mode: every agent proposes its argmax token and the router deploys
    the candidate with the highest score (its predicted reward). Stochastic
    mode averages exactly over the policies' and router's distributions.
    Rewards are scored by their expected value, so Bernoulli noise never
    enters the metrics.
    """
    if len(eval_contexts) == 0:
        raise ConfigError("evaluation set is empty")
    routing = isinstance(mechanism, Router)
    tau = mechanism.tau if routing else None
    eps = mechanism.epsilon if routing else None
    if not routing:
        return _evaluate_collab(policies, mechanism, env, eval_contexts, update, mode, tau, eps)

    K = env.K
    acc, orc, ent, ent_raw, brier, spec_hits = [], [], [], [], [], []
    shares = np.zeros(K)
    outputs = {}
    for cid in eval_contexts:
        ctx = env.context(cid)
        if mode == "greedy":
            dists = [(greedy_proposals(policies, ctx), 1.0)]
        else:
            dists = joint_distribution(policies, ctx)
        a = o = e = er = b = s = 0.0
        sh = np.zeros(K)
        for props, pr in dists:
            means = np.array([env.rewards[cid, env.output_index((c.agent, c.token))] for c in props])
            scores = candidate_scores(mechanism, ctx, props)
            probs = route_probabilities(mechanism, ctx, props)
            if mode == "greedy":
                sel_dist = np.zeros(K)
                sel_dist[int(np.argmax(scores))] = 1.0
                outputs[cid] = env.output_index((props[int(np.argmax(scores))].agent,
                                                 props[int(np.argmax(scores))].token))
            else:
                sel_dist = probs
            a += pr * float(sel_dist @ means)
            o += pr * float(means.max())
            hn, hr = normalized_entropy(probs)
            e += pr * hn
            er += pr * hr
            b += pr * expected_brier(scores, means)
            sh += pr * sel_dist
            if env.context_labels is not None and env.agent_specialties is not None:
                match = np.array([env.agent_specialties[c.agent] == env.context_labels[cid] for c in props])
                s += pr * float(sel_dist @ match)
        acc.append(a)
        orc.append(o)
        ent.append(e)
        ent_raw.append(er)
        brier.append(b)
        spec_hits.append(s)
        shares += sh
    router_acc = float(np.mean(acc))
    oracle_acc = float(np.mean(orc))
    if env.T > 1:
        mean_return = _multi_turn_return(policies, mechanism, env, eval_contexts, mode, outputs)
    else:
        mean_return = router_acc
    has_spec = env.context_labels is not None and env.agent_specialties is not None
    return MetricsRecord(
        update=update, tau=tau, epsilon=eps, mean_return=mean_return,
        router_accuracy=router_acc, oracle_accuracy=oracle_acc, regret=oracle_acc - router_acc,
        routing_entropy=float(np.mean(ent)), routing_entropy_raw=float(np.mean(ent_raw)),
        brier=float(np.mean(brier)), specialization=float(np.mean(spec_hits)) if has_spec else None,
        selection_shares=tuple(float(x) for x in shares / len(eval_contexts)),
    )


def _greedy_output_table(policies, mechanism, env: EnvSpec) -> np.ndarray:
    """Output index the greedy system deploys in every context."""
    out = np.zeros(env.n_contexts, dtype=int)
    for c in range(env.n_contexts):
        ctx = env.context(c)
        props = greedy_proposals(policies, ctx)
        if isinstance(mechanism, Router):
            best = props[int(np.argmax(candidate_scores(mechanism, ctx, props)))]
            out[c] = env.output_index((best.agent, best.token))
        else:
            out[c] = env.output_index(aggregate(mechanism, ctx, props).key)
    return out


def _multi_turn_return(policies, mechanism, env: EnvSpec, eval_contexts, mode, _outputs) -> float:
    if mode == "stochastic":
        from .oracle import ExactQuantities

        ex = ExactQuantities(list(policies), mechanism, env)
        return float(np.mean([ex.values[0][c] for c in eval_contexts]))
    choice = _greedy_output_table(policies, mechanism, env)
    idx = np.arange(env.n_contexts)
    value = np.zeros(env.n_contexts)
    for t in reversed(range(env.T)):
        q = env.rewards[idx, choice]
        if t + 1 < env.T:
            q = q + env.transitions[idx, choice] @ value
        value = q
    return float(np.mean(value[list(eval_contexts)]))


def _evaluate_collab(policies, agg, env, eval_contexts, update, mode, tau, eps) -> MetricsRecord:
    if env.T > 1:
        mean_return = _multi_turn_return(policies, agg, env, eval_contexts, mode, None)
    else:
        vals = []
        for cid in eval_contexts:
            ctx = env.context(cid)
            if mode == "greedy":
                y = aggregate(agg, ctx, greedy_proposals(policies, ctx))
                vals.append(env.expected_reward(ctx, y))
            else:
                vals.append(sum(pr * env.expected_reward(ctx, aggregate(agg, ctx, props))
                                for props, pr in joint_distribution(policies, ctx)))
        mean_return = float(np.mean(vals))
    return MetricsRecord(update, tau, eps, mean_return, None, None, None, None, None, None, None, ())


# -- training loop -----------------------------------------------------------------

@dataclass
class TrainState:
    update: int
    policies: list
    reference: list
    predictor: RewardPredictor
    buffer: ReplayBuffer
    rng: np.random.Generator
    series: list


def _mechanism_for(cfg: ExperimentConfig, pred: RewardPredictor, u: int):
    if cfg.mechanism == "router":
        tau = linear_schedule(cfg.tau_start, cfg.tau_end, u, cfg.n_updates)
        eps = linear_schedule(cfg.epsilon_start, cfg.epsilon_end, u, cfg.n_updates)
        return pred.router(tau, eps)
    return Aggregator(cfg.mechanism)


def initial_state(cfg: ExperimentConfig, env: EnvSpec) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    policies = init_policies(env.K, env.V, env.d, cfg.conditioning, cfg.init_scale, rng)
    pred = RewardPredictor.zeros(
        env.d, env.K, env.V, learning_rate=cfg.predictor_lr, propensity_floor=cfg.propensity_floor,
        ips_clip=cfg.ips_clip, replay_capacity=cfg.replay_capacity, replay_batch=cfg.replay_batch,
    )
    return TrainState(0, policies, [capture_snapshot(p) for p in policies], pred,
                      ReplayBuffer(cfg.replay_capacity), rng, [])


def _eval_ids(cfg: ExperimentConfig, env: EnvSpec) -> list:
    return list(cfg.eval_contexts) if cfg.eval_contexts is not None else list(range(env.n_contexts))


def _replacement(cfg: ExperimentConfig, pol: AgentPolicy, ref) -> ReplacementPolicy:
    if cfg.replacement == "frozen-copy":
        return ReplacementPolicy.frozen(ref.policy, version=0)
    return ReplacementPolicy.uniform(pol.agent, pol.V)


def train_step(cfg: ExperimentConfig, env: EnvSpec, state: TrainState) -> None:
    """One update round: rollouts, logging, predictor step(s), policy step."""
    u = state.update
    mech = _mechanism_for(cfg, state.predictor, u)
    routing = isinstance(mech, Router)
    rng = state.rng
    policies = state.policies
    old = [capture_snapshot(p) for p in policies]

    # one entry per decision: (group key, TurnRecord, return-to-go, LoggedObservation | None)
    decisions = []
    for b in range(cfg.contexts_per_update):
        ctx = sample_context(env, rng)
        for n in range(cfg.group_size):
            records, rtg = run_episode(env, policies, mech, rng, ctx)
            for rec, g in zip(records, rtg):
                obs = None
                if routing:
                    dep = rec.deployment
                    obs = log_observation(rec.ctx, rec.proposals, dep.propensities, dep.selected,
                                          g, dep.mech_seed, rec.turn)
                    state.buffer.add(obs)
                decisions.append(((b, rec.turn, rec.ctx.id), rec, g, obs))

    if routing and cfg.estimator != "frozen":
        for _ in range(cfg.predictor_steps):
            state.predictor = update_predictor(state.predictor, state.buffer, rng)

    train_policies = u >= cfg.warmup_updates and cfg.estimator != "frozen"
    if train_policies:
        opt = cfg.resolved_optimizer()
        new_policies = []
        for i, pol in enumerate(policies):
            q = _replacement(cfg, pol, state.reference[i]) if cfg.estimator == "loo" else None
            signals = [_signal(cfg, env, i, rec, g, obs, state, mech, q, rng) for _, rec, g, obs in decisions]
            zs = [encode_for(pol, rec.ctx, rec.proposals) for _, rec, _, _ in decisions]
            tokens = [rec.proposals[i].token for _, rec, _, _ in decisions]
            if cfg.optimizer == "reinforce":
                batch = list(zip(zs, tokens, signals))
                new_policies.append(reinforce_update(pol, batch, opt.learning_rate, opt.grad_clip_norm))
            else:
                groups = _groups(decisions, zs, tokens, signals, old[i])
                new_policies.append(grpo_update(pol, groups, old[i], state.reference[i], opt) if groups else pol)
        state.policies = new_policies
        if cfg.reference_refresh and (u + 1) % cfg.reference_refresh == 0:
            state.reference = [capture_snapshot(p) for p in state.policies]
    state.update = u + 1


def _signal(cfg, env, i, rec, g, obs: Optional[LoggedObservation], state, mech, q, rng) -> float:
    kind = cfg.estimator
    if kind == "dr":
        return routing_marginal_contribution(obs, i, state.predictor, mech).value
    if kind == "wta":
        return winner_take_all_signal(obs, i).value
    if kind == "shared":
        return g
    es = EpisodeState(rec.ctx, rec.proposals, rec.turn, g)
    return loo_marginal_contribution(es, i, q, state.policies, mech, env, rng).value


def _groups(decisions, zs, tokens, signals, old):
    by_key: dict = {}
    for k, (key, rec, _, _) in enumerate(decisions):
        by_key.setdefault(key, []).append(k)
    groups = []
    for key, idx in by_key.items():
        if len(idx) < 2:
            continue  # later-turn histories that no other rollout reached
        ctx = decisions[idx[0]][1].ctx
        groups.append(make_group(ctx, [zs[k] for k in idx], [tokens[k] for k in idx],
                                 [signals[k] for k in idx], old))
    return groups


def _evaluate_state(cfg, env, state) -> MetricsRecord:
    mech = _mechanism_for(cfg, state.predictor, state.update)
    return evaluate(state.policies, mech, env, _eval_ids(cfg, env), state.update, cfg.eval_mode)


def run_experiment(
    config: ExperimentConfig,
    checkpoint_dir: Optional[str | Path] = None,
    checkpoint_every: int = 0,
    resume: Optional[str | Path] = None,
):
    """Run one training run; returns ``(metrics series, final report)``."""
    cfg = config.resolve()
    env = cfg.build_env()
    if resume is not None:
        state = load_checkpoint(resume, cfg, env)
    else:
        state = initial_state(cfg, env)
        state.series.append(_evaluate_state(cfg, env, state))
    while state.update < cfg.n_updates:
        train_step(cfg, env, state)
        if state.update % cfg.eval_interval == 0 or state.update == cfg.n_updates:
            state.series.append(_evaluate_state(cfg, env, state))
            log.info("%s update %d: return %.4f", cfg.name, state.update, state.series[-1].mean_return)
        if checkpoint_dir is not None and checkpoint_every and state.update % checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"update_{state.update:05d}", cfg, state)
    report = build_report(cfg, env, state.series)
    return state.series, report


def build_report(cfg: ExperimentConfig, env: EnvSpec, series) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "library_version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "env": {"name": env.name, "K": env.K, "V": env.V, "T": env.T,
                "n_contexts": env.n_contexts, "optimum": env.optimum},
        "initial": series[0].to_row(),
        "final": series[-1].to_row(),
        "n_records": len(series),
    }


# -- output ---------------------------------------------------------------------------

def emit_results(series, report: dict, out_dir: str | Path) -> tuple:
    """Write ``metrics.csv`` and ``report.json``; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "metrics.csv", out / "report.json"
    rows = [r.to_row() for r in series]
    columns = list(rows[0].keys()) if rows else [f.name for f in dataclasses.fields(MetricsRecord)]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})
    with open(json_path, "w") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, json_path


def report_schema() -> dict:
    """JSON schema that every ``report.json`` validates against."""
    return json.loads(resources.files(__package__).joinpath("report.schema.json").read_text())


def read_metrics(path: str | Path) -> list:
    with open(path, newline="") as fh:
        return [MetricsRecord.from_row(row) for row in csv.DictReader(fh)]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


# -- checkpoints ----------------------------------------------------------------------

def save_checkpoint(path: str | Path, cfg: ExperimentConfig, state: TrainState) -> Path:
    """Everything needed for a bit-exact resume: parameters, snapshots, replay, rng."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    np.savez(
        path / "arrays.npz",
        policies=np.stack([p.theta for p in state.policies]),
        reference=np.stack([s.policy.theta for s in state.reference]),
        psi=state.predictor.psi,
    )
    meta = {
        "update": state.update,
        "config": cfg.to_dict(),
        "rng_state": state.rng.bit_generator.state,
        "series": [r.to_row() for r in state.series],
        "buffer": [obs.to_record() for obs in state.buffer],
    }
    with open(path / "state.json", "w") as fh:
        json.dump(_jsonable(meta), fh)
    return path


def load_checkpoint(path: str | Path, cfg: ExperimentConfig, env: EnvSpec) -> TrainState:
    path = Path(path)
    with open(path / "state.json") as fh:
        meta = json.load(fh)
    arrays = np.load(path / "arrays.npz")
    state = initial_state(cfg, env)
    state.update = int(meta["update"])
    state.policies = [p.with_theta(arrays["policies"][i]) for i, p in enumerate(state.policies)]
    state.reference = [capture_snapshot(p.with_theta(arrays["reference"][i]))
                       for i, p in enumerate(state.policies)]
    state.predictor = state.predictor.with_psi(arrays["psi"])
    state.buffer = ReplayBuffer(cfg.replay_capacity,
                                [LoggedObservation.from_record(r) for r in meta["buffer"]])
    state.rng.bit_generator.state = meta["rng_state"]
    state.series = [MetricsRecord.from_row({k: ("" if v is None else v) for k, v in row.items()})
                    for row in meta["series"]]
    return state
