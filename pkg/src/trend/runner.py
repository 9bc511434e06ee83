"""End-to-end experiment loop, metrics CSV, and seed sweeps."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import envs
from .annotate import MockVlmAnnotator, NoisyScriptedAnnotator, QueryBudget, query_session
from .config import RunConfig
from .demos import AlphaSchedule, DemoSet, bc_pretrain, generate_demos, mixed_policy_update
from .envs import ACTION_DIM, EPISODE_LEN, OBS_DIM, STATE_DIM, EnvKind
from .reward import N_MEMBERS, PreferenceDataset, RewardEnsemble
from .sac import ReplayBuffer, SacAgent, SacConfig, relabel_all, sac_update, sample_action
from .triteach import SCHEDULES, SelectionReport, reward_update_session

log = logging.getLogger(__name__)

# fixed stream ids; one global seed fans out to independent sub-streams
STREAM_ENV, STREAM_POLICY, STREAM_AGENT, STREAM_REWARD = 1, 2, 3, 4
STREAM_ANNOTATOR, STREAM_QUERY, STREAM_MINIBATCH, STREAM_EVAL = 5, 6, 7, 8


def stream(seed: int, stream_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, stream_id])


def rng_for(seed: int, stream_id: int) -> np.random.Generator:
    return np.random.default_rng(stream(seed, stream_id))


class NumericFailure(RuntimeError):
    pass


@dataclass
class MetricsRow:
    step: int
    success_rate: float
    mean_return: float
    selected_clean_ratio_m1: float
    selected_clean_ratio_m2: float
    selected_clean_ratio_m3: float
    dataset_clean_ratio: float
    reward_loss_m1: float
    reward_loss_m2: float
    reward_loss_m3: float
    feedback_used: int
    alpha_demo: float


METRIC_FIELDS = [f.name for f in fields(MetricsRow)]


def format_row(row: MetricsRow) -> list[str]:
    out = []
    for name in METRIC_FIELDS:
        v = getattr(row, name)
        out.append(str(v) if isinstance(v, int) else f"{v:.6f}")
    return out


def write_metrics(rows: list[MetricsRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow(format_row(r))


def session_stats(reports: list[SelectionReport]) -> tuple[list[float], list[float]]:
    """Per-member selected clean ratio and mean student loss over one session."""
    if not reports:
        return [math.nan] * N_MEMBERS, [math.nan] * N_MEMBERS
    clean = np.zeros(N_MEMBERS)
    total = np.zeros(N_MEMBERS)
    loss = np.zeros(N_MEMBERS)
    for r in reports:
        for j in range(N_MEMBERS):
            clean[j] += r.clean_counts[j]
            total[j] += len(r.selected[j])
            loss[j] += r.student_losses[j]
    return list(clean / total), list(loss / len(reports))


def evaluate(agent: SacAgent, kind: EnvKind, seeds) -> tuple[float, float]:
    """Deterministic-mean rollouts; returns (success rate, mean true return)."""
    succ, rets = [], []
    for s in seeds:
        _, _, rew, ok = envs.rollout(kind, lambda st, o: sample_action(agent.policy, o, "mean"), s)
        succ.append(ok)
        rets.append(rew.sum())
    return float(np.mean(succ)), float(np.mean(rets))


@dataclass
class RunResult:
    rows: list[MetricsRow]
    agent: SacAgent
    ensemble: RewardEnsemble
    dataset: PreferenceDataset
    budget: QueryBudget
    session_reports: list[list[SelectionReport]]


def _build_annotator(config: RunConfig):
    if config.annotator == "mock_vlm":
        return MockVlmAnnotator(config.vlm_fixture)
    return NoisyScriptedAnnotator(config.noise, rng_for(config.seed, STREAM_ANNOTATOR), config.tau_tie)


def run_experiment(
    config: RunConfig,
    demos: Optional[DemoSet] = None,
    audit: Optional[list] = None,
    progress: bool = False,
) -> RunResult:
    """Run one seeded experiment.

    Training episodes always last EPISODE_LEN steps so that stored episodes
    can supply H-step windows; success only ends evaluation episodes.
    ``audit``, when given, receives the pair uids of every reward batch.
    """
    config.validate()
    kind = EnvKind(config.env)
    seed = config.seed
    obs_dim = OBS_DIM[kind]
    learned = config.reward_source == "learned"
    n_demos = config.effective_demos
    gamma = config.effective_gamma
    schedule = SCHEDULES[config.effective_schedule]

    agent = SacAgent.create(obs_dim, ACTION_DIM, stream(seed, STREAM_AGENT), SacConfig(
        hidden=tuple(config.sac_hidden), lr=config.sac_lr, alpha_ent=config.alpha_ent,
        discount=config.discount, tau=config.tau))
    ensemble = RewardEnsemble.create(obs_dim + ACTION_DIM, stream(seed, STREAM_REWARD),
                                     hidden=tuple(config.reward_hidden), lr=config.reward_lr,
                                     output=config.reward_output)
    buffer = ReplayBuffer(obs_dim, ACTION_DIM, capacity=config.buffer_capacity, state_dim=STATE_DIM[kind])
    dataset = PreferenceDataset()
    budget = QueryBudget(config.budget, config.per_session, config.pool, config.session_interval,
                         count_skips=config.count_skips)
    annotator = _build_annotator(config) if learned else None
    alpha_sched = AlphaSchedule(config.alpha_start, config.alpha_end,
                                int(round(config.alpha_horizon_frac * config.total_steps)))
    env_rng = rng_for(seed, STREAM_ENV)
    act_rng = rng_for(seed, STREAM_POLICY)
    query_rng = rng_for(seed, STREAM_QUERY)
    mb_rng = rng_for(seed, STREAM_MINIBATCH)
    eval_seeds = [int(s) for s in rng_for(seed, STREAM_EVAL).integers(2**63, size=config.eval_episodes)]

    if n_demos:
        if demos is None:
            demos = generate_demos(kind, n_demos, seed)
        elif len(demos.trajectories) != n_demos or demos.kind is not kind:
            raise ValueError("provided demonstrations do not match n_demos / env")
        bc_pretrain(agent, demos, config.bc_epochs, config.bc_lr, config.bc_early_stop)
    else:
        demos = None

    def reward_of(o, a) -> float:
        return float(ensemble(o, a)) if learned else 0.0

    rows: list[MetricsRow] = []
    all_reports: list[list[SelectionReport]] = []
    last_clean = [math.nan] * N_MEMBERS
    last_loss = [math.nan] * N_MEMBERS
    reward_ready = not learned

    state = envs.reset(kind, env_rng)
    raw = envs.encode(state)
    obs = envs.observe(kind, raw)
    for t in range(config.total_steps):
        if n_demos == 0 and t < config.learning_starts:
            action = act_rng.uniform(-1.0, 1.0, ACTION_DIM)
        else:
            action = sample_action(agent.policy, obs, "stochastic", act_rng)
        res = envs.step(state, action)
        next_raw = envs.encode(res.next_state)
        next_obs = envs.observe(kind, next_raw)
        r_store = res.true_reward if not learned else (reward_of(obs, action) if reward_ready else 0.0)
        # time-limit ends are truncations, so the critic bootstraps through them
        buffer.add(obs, action, r_store, next_obs, False, res.true_reward, raw)
        state, raw, obs = res.next_state, next_raw, next_obs
        if state.t >= EPISODE_LEN:
            buffer.end_episode()
            state = envs.reset(kind, env_rng)
            raw = envs.encode(state)
            obs = envs.observe(kind, raw)

        step = t + 1
        if learned and step >= config.learning_starts and (
            step == config.learning_starts or (step - config.learning_starts) % config.session_interval == 0
        ) and len(buffer.complete_episodes(config.segment_len)) >= 2:
            query_session(buffer, annotator, budget, ensemble, dataset, kind, query_rng,
                          config.segment_len, config.tau_tie, config.exclude_ties)
            try:
                reports = reward_update_session(
                    ensemble, dataset, gamma, schedule, config.reward_epochs, config.reward_batch,
                    config.reselect, audit)
            except FloatingPointError as exc:
                raise NumericFailure(f"reward module at step {step}: {exc}") from exc
            all_reports.append(reports)
            if reports:
                last_clean, last_loss = session_stats(reports)
            relabel_all(buffer, ensemble)
            reward_ready = True

        if step >= config.learning_starts and len(buffer) >= config.batch_size:
            try:
                if demos is not None:
                    mixed_policy_update(agent, demos, buffer, t, config.lambda_bc, alpha_sched,
                                        mb_rng, config.batch_size)
                else:
                    sac_update(agent, buffer.sample(config.batch_size, mb_rng), mb_rng)
            except FloatingPointError as exc:
                raise NumericFailure(f"sac module at step {step}: {exc}") from exc

        if step % config.eval_interval == 0:
            success, ret = evaluate(agent, kind, eval_seeds)
            rows.append(MetricsRow(
                step, success, ret, *last_clean, dataset.clean_ratio() if len(dataset) else math.nan,
                *last_loss, budget.used, alpha_sched(t) if demos is not None else 0.0,
            ))
            if progress:
                log.info("step %d success %.2f return %.2f feedback %d", step, success, ret, budget.used)

    return RunResult(rows, agent, ensemble, dataset, budget, all_reports)


def save_checkpoint(result: RunResult, path) -> None:
    arrays = {}
    for name, params in (("policy", result.agent.policy), ("q1", result.agent.q1),
                         ("q2", result.agent.q2)):
        for key, a in params.arrays():
            arrays[f"{name}.{key}"] = a
    for i, m in enumerate(result.ensemble.members):
        for key, a in m.arrays():
            arrays[f"reward{i + 1}.{key}"] = a
    np.savez(path, **arrays)


def run_to_dir(config: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(config)
    csv_path = out / f"metrics_seed{config.seed}.csv"
    write_metrics(result.rows, csv_path)
    save_checkpoint(result, out / f"checkpoint_seed{config.seed}.npz")
    return csv_path


def _sweep_one(args):
    config, out_dir = args
    return run_to_dir(config, out_dir)


def sweep(config: RunConfig, seeds, out_dir, jobs: int = 1) -> Path:
    """Independent runs per seed, then a mean/std summary per eval step."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(config.replace(seed=s), out) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            paths = list(pool.map(_sweep_one, tasks))
    else:
        paths = [_sweep_one(t) for t in tasks]
    return summarize(paths, out / "summary.csv")


def summarize(csv_paths, out_path) -> Path:
    tables = []
    for p in csv_paths:
        with open(p, newline="") as fh:
            tables.append([[float(v) for v in row] for row in list(csv.reader(fh))[1:]])
    data = np.array(tables)  # (runs, rows, fields)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["step"]
        for name in METRIC_FIELDS[1:]:
            header += [f"{name}_mean", f"{name}_std"]
        w.writerow(header)
        for i in range(data.shape[1]):
            row = [str(int(data[0, i, 0]))]
            for k in range(1, data.shape[2]):
                col = data[:, i, k]
                row += [f"{np.mean(col):.6f}", f"{np.std(col):.6f}"]
            w.writerow(row)
    return Path(out_path)


def collect_segment_buffer(kind: EnvKind, seed: int, n_episodes: int) -> ReplayBuffer:
    """Episodes from an expert with varying amounts of action noise.

    Gives segment pairs that span good and bad behavior, which is what a
    reward-learning-only study needs.
    """
    kind = EnvKind(kind)
    rng = rng_for(seed, STREAM_ENV)
    buffer = ReplayBuffer(OBS_DIM[kind], ACTION_DIM, capacity=n_episodes * EPISODE_LEN,
                          state_dim=STATE_DIM[kind])
    for _ in range(n_episodes):
        noise = rng.uniform(0.0, 2.0)
        state = envs.reset(kind, rng)
        for _ in range(EPISODE_LEN):
            x = envs.encode(state)
            a = np.clip(envs.expert_action(kind, state) + noise * rng.standard_normal(ACTION_DIM), -1, 1)
            res = envs.step(state, a)
            buffer.add(envs.observe(kind, x), a, 0.0, envs.observe(kind, envs.encode(res.next_state)),
                       False, res.true_reward, x)
            state = res.next_state
        buffer.end_episode()
    return buffer


@dataclass
class RecoveryResult:
    selected_clean: list[float]  # per session, averaged over members
    dataset_clean: list[float]  # per session


def clean_label_experiment(
    seed: int,
    noise: float = 0.4,
    schedule: str = "tri",
    gamma_rate: float = 0.6,
    n_sessions: int = 20,
    per_session: int = 20,
    pool: int = 100,
    epochs: int = 20,
    batch: int = 64,
    kind: EnvKind | str = EnvKind.POINT_REACH,
    n_episodes: int = 60,
    hidden=(64, 64, 64),
    lr: float = 3e-4,
    h: int = 50,
    output: str = "identity",
) -> RecoveryResult:
    """Reward learning alone: grow a noisy preference set session by session and
    record how clean each session's small-loss selections are."""
    kind = EnvKind(kind)
    buffer = collect_segment_buffer(kind, seed, n_episodes)
    ensemble = RewardEnsemble.create(OBS_DIM[kind] + ACTION_DIM, stream(seed, STREAM_REWARD),
                                     hidden=hidden, lr=lr, output=output)
    annotator = NoisyScriptedAnnotator(noise, rng_for(seed, STREAM_ANNOTATOR))
    budget = QueryBudget(n_sessions * per_session, per_session, pool, 1)
    dataset = PreferenceDataset()
    q_rng = rng_for(seed, STREAM_QUERY)
    sel, ds = [], []
    for _ in range(n_sessions):
        query_session(buffer, annotator, budget, ensemble, dataset, kind, q_rng, h)
        reports = reward_update_session(ensemble, dataset, gamma_rate, SCHEDULES[schedule], epochs, batch)
        clean, _ = session_stats(reports)
        sel.append(float(np.mean(clean)))
        ds.append(dataset.clean_ratio())
    return RecoveryResult(sel, ds)


def metrics_dict(row: MetricsRow) -> dict:
    return asdict(row)
