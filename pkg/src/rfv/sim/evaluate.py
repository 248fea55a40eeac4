"""Demo collection, closed-loop rollouts, success tables and ablation harnesses."""

from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..blob import read_blob, write_blob
from ..errors import ExpertFailure
from ..policy import (
    ChunkEnsembler,
    Policy,
    PolicyConfig,
    RetrievalContext,
    make_sample,
    stack_samples,
    train,
)
from ..retriever import embed_text
from .world import (
    HELDOUT_COLORS,
    TASK_TYPES,
    Demo,
    RobotObservation,
    Task,
    TaskSpec,
    WorldState,
    expert_action,
    generate_task,
    is_success,
    observe,
    scripted_expert,
    step,
)

MAX_STEPS = 40
MAX_RESEEDS = 200
EVAL_SEED_BASE = 1_000_000


def default_suite(**kw) -> tuple[TaskSpec, ...]:
    return tuple(TaskSpec(t, **kw) for t in TASK_TYPES)


# ------------------------------------------------------------------- demos


def collect_demos(specs: Sequence[TaskSpec], n_per_task: int, seed: int = 0,
                  views=("top",), max_steps: int = MAX_STEPS) -> list[Demo]:
    """Expert demos; configurations the expert cannot finish are re-seeded."""
    demos = []
    for ti, spec in enumerate(specs):
        s = seed * 100_003 + ti * 10_007
        got = misses = 0
        while got < n_per_task:
            state, task = generate_task(spec, s)
            s += 1
            try:
                demo = scripted_expert(state, task, views, max_steps)
            except ExpertFailure:
                misses += 1
                if misses > MAX_RESEEDS:
                    raise ExpertFailure(f"{spec.task_type}: expert failed {misses} times "
                                        f"within {max_steps} steps") from None
                continue
            demos.append(demo)
            got += 1
    return demos


def save_demos(demos: Sequence[Demo], path: str | os.PathLike) -> Path:
    """One JSON file per episode plus a u8 frame blob (steps, views, h, w, 3)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i, d in enumerate(demos):
        views = list(d.observations[0].frames)
        frames = np.stack([np.stack([o.frames[v] for v in views]) for o in d.observations])
        write_blob(root / f"episode_{i:05d}.rfvb", frames)
        rec = {"instruction": d.instruction, "task_type": d.task_type, "site": d.site,
               "success": d.success, "views": views, "frames_shape": list(frames.shape),
               "frames_blob": f"episode_{i:05d}.rfvb",
               "proprio": [o.proprio.tolist() for o in d.observations],
               "actions": np.asarray(d.actions).tolist()}
        (root / f"episode_{i:05d}.json").write_text(json.dumps(rec) + "\n", encoding="utf-8")
    return root


def load_demos(path: str | os.PathLike) -> list[Demo]:
    root = Path(path)
    demos = []
    for f in sorted(root.glob("episode_*.json")):
        rec = json.loads(f.read_text(encoding="utf-8"))
        frames = read_blob(root / rec["frames_blob"]).reshape(rec["frames_shape"])
        obs = [RobotObservation({v: frames[t, j] for j, v in enumerate(rec["views"])},
                                np.asarray(p, dtype=np.float64), rec["instruction"])
               for t, p in enumerate(rec["proprio"])]
        demos.append(Demo(rec["instruction"], obs, np.asarray(rec["actions"], dtype=np.float64),
                          rec["success"], rec["task_type"], rec["site"]))
    return demos


# ------------------------------------------------------------------ agents


class ExpertAgent:
    """Privileged scripted controller (reads the true state)."""

    def reset(self, n: int) -> None:
        pass

    def act(self, obs: list[RobotObservation], states: list[WorldState], tasks: list[Task]):
        return [expert_action(s, t) for s, t in zip(states, tasks)]


class RandomAgent:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def reset(self, n: int) -> None:
        pass

    def act(self, obs, states, tasks):
        return [self.rng.uniform(0, 1, size=4) for _ in obs]


class ZeroAgent:
    def reset(self, n: int) -> None:
        pass

    def act(self, obs, states, tasks):
        return [np.zeros(4) for _ in obs]


class PolicyAgent:
    """Learned policy; all live episodes are batched into one forward pass."""

    def __init__(self, policy: Policy, ctx: RetrievalContext | None):
        self.policy = policy
        self.ctx = ctx
        self.ensemblers: list[ChunkEnsembler] = []

    def reset(self, n: int) -> None:
        cfg = self.policy.cfg
        self.ensemblers = [ChunkEnsembler(cfg.horizon, cfg.ensemble_m, cfg.ensemble) for _ in range(n)]

    def act(self, obs, states, tasks, live=None):
        cfg = self.policy.cfg
        samples = []
        for o in obs:
            grid = self.policy.observation_tokens([o.frames[v] for v in cfg.views])
            mems = self.ctx.memories(o.instruction) if cfg.use_retrieval else None
            if mems is not None:
                assert len(mems) == cfg.k_retrieved * len(cfg.views)
            samples.append(make_sample(grid, o.proprio, embed_text(o.instruction, cfg.embedder), mems))
        chunks = self.policy.predict(stack_samples(samples, cfg))
        live = range(len(obs)) if live is None else live
        return [self.ensemblers[i].step(ch) for i, ch in zip(live, chunks)]


# ---------------------------------------------------------------- rollouts


@dataclass
class Trace:
    success: bool
    steps: int
    effector: np.ndarray     # (steps + 1, 4)
    actions: np.ndarray      # (steps, 4)


def _act(agent, obs, states, tasks, live):
    if isinstance(agent, PolicyAgent):
        return agent.act(obs, states, tasks, live)
    return agent.act(obs, states, tasks)


def rollout_batch(agent, episodes: Sequence[tuple[WorldState, Task]], max_steps: int = MAX_STEPS,
                  views=("top",)) -> list[Trace]:
    """Lock-step closed-loop rollouts; an episode stops as soon as it succeeds."""
    n = len(episodes)
    states = [s.copy() for s, _ in episodes]
    tasks = [t for _, t in episodes]
    agent.reset(n)
    done = [is_success(s, t) for s, t in zip(states, tasks)]
    effs = [[s.effector.copy()] for s in states]
    acts: list[list[np.ndarray]] = [[] for _ in range(n)]
    for _ in range(max_steps):
        live = [i for i in range(n) if not done[i]]
        if not live:
            break
        obs = [observe(states[i], tasks[i], views) for i in live]
        actions = _act(agent, obs, [states[i] for i in live], [tasks[i] for i in live], live)
        for i, a in zip(live, actions):
            a = np.asarray(a, dtype=np.float64)
            states[i] = step(states[i], a)
            acts[i].append(a)
            effs[i].append(states[i].effector.copy())
            done[i] = is_success(states[i], tasks[i])
    return [Trace(bool(done[i]), len(acts[i]), np.array(effs[i]),
                  np.array(acts[i]).reshape(-1, 4)) for i in range(n)]


def rollout(agent, spec: TaskSpec, seed: int, max_steps: int = MAX_STEPS, views=("top",)):
    """Single episode; returns (success, trace)."""
    tr = rollout_batch(agent, [generate_task(spec, seed)], max_steps, views)[0]
    return tr.success, tr


def replay(actions, state: WorldState, task: Task) -> bool:
    """Open-loop replay of an action sequence."""
    s = state.copy()
    for a in actions:
        s = step(s, a)
    return is_success(s, task)


# -------------------------------------------------------------- evaluation


@dataclass
class SuccessTable:
    """Success rate per task (rows) and seed (columns)."""

    tasks: list[str]
    seeds: list[int]
    rates: np.ndarray        # (tasks, seeds)
    episodes: int = 0

    @property
    def per_task(self) -> np.ndarray:
        return self.rates.mean(axis=1)

    @property
    def aggregate(self) -> float:
        return float(self.rates.mean())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task"] + [f"seed{s}" for s in self.seeds] + ["mean"])
        for t, row in zip(self.tasks, self.rates):
            w.writerow([t] + [f"{v:.4f}" for v in row] + [f"{row.mean():.4f}"])
        w.writerow(["aggregate"] + [f"{v:.4f}" for v in self.rates.mean(axis=0)] + [f"{self.aggregate:.4f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        head = ["task"] + [f"seed{s}" for s in self.seeds] + ["mean"]
        rows = [[t] + [f"{100 * v:.1f}" for v in row] + [f"{100 * row.mean():.1f}"]
                for t, row in zip(self.tasks, self.rates)]
        rows.append(["aggregate"] + [f"{100 * v:.1f}" for v in self.rates.mean(axis=0)]
                    + [f"{100 * self.aggregate:.1f}"])
        return format_table(head, rows)


def format_table(head: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [head] + rows) for i in range(len(head))]
    line = lambda r: "  ".join(str(c).rjust(w) if i else str(c).ljust(w)
                               for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([line(head), "  ".join("-" * w for w in widths)] + [line(r) for r in rows]) + "\n"


def evaluation_episodes(spec: TaskSpec, seed: int, episodes: int):
    base = EVAL_SEED_BASE + seed * 10_000 + TASK_TYPES.index(spec.task_type) * 1000
    return [generate_task(spec, base + e) for e in range(episodes)]


def evaluate(agent, suite: Sequence[TaskSpec], seeds: Sequence[int] = (0, 1, 2), episodes: int = 20,
             max_steps: int = MAX_STEPS, views=("top",)) -> SuccessTable:
    """Mean success per task per seed; every (task, seed) cell runs as one batch."""
    rates = np.zeros((len(suite), len(seeds)))
    for i, spec in enumerate(suite):
        for j, seed in enumerate(seeds):
            traces = rollout_batch(agent, evaluation_episodes(spec, seed, episodes), max_steps, views)
            rates[i, j] = np.mean([t.success for t in traces])
    return SuccessTable([s.task_type for s in suite], list(seeds), rates, episodes)


# --------------------------------------------------------------- harnesses


@dataclass
class ExperimentConfig:
    policy: PolicyConfig = field(default_factory=lambda: PolicyConfig(
        embed_dim=128, steps=1500, batch_size=16, text_dropout=0.5))
    demos_per_task: int = 10
    bank_per_task: int = 144
    seeds: tuple[int, ...] = (0, 1, 2)
    episodes: int = 20
    max_steps: int = MAX_STEPS
    demo_seed: int = 0
    bank_seed: int = 0


class Experiment:
    """Shared demos, bank and index for a family of training runs."""

    def __init__(self, cfg: ExperimentConfig, bank=None, demos=None, log=print):
        from ..retriever import EmbedderConfig, build_index
        from .humanbank import synthesize_human_bank

        self.cfg = cfg
        self.log = log or (lambda *a, **k: None)
        self.suite = default_suite()
        pc = cfg.policy
        self.demos = demos if demos is not None else collect_demos(
            self.suite, cfg.demos_per_task, cfg.demo_seed, pc.views, cfg.max_steps)
        self.bank = bank if bank is not None else synthesize_human_bank(
            self.suite, cfg.bank_per_task, cfg.bank_seed, pc.embed_dim, view_id=pc.views[0])
        self.index = build_index(self.bank, EmbedderConfig(pc.embed_dim))
        self._contexts: dict[PolicyConfig, RetrievalContext] = {}
        self._policies: dict[PolicyConfig, Policy] = {}

    def context(self, pc: PolicyConfig) -> RetrievalContext | None:
        if not pc.use_retrieval:
            return None
        key = replace(pc, seed=0, steps=0, zero_traj=False, zero_mask=False, lr=0.0)
        ctx = self._contexts.get(key)
        if ctx is None:
            ctx = RetrievalContext(self.bank, self.index, pc)
            self._contexts[key] = ctx
        return ctx

    def policy(self, pc: PolicyConfig) -> Policy:
        pol = self._policies.get(pc)
        if pol is None:
            t0 = time.time()
            ctx = self.context(pc)
            res = train(self.demos, self.bank if ctx else None, self.index if ctx else None, pc)
            pol = res.policy
            pol.losses = res.losses
            self._policies[pc] = pol
            self.log(f"trained {describe(pc)}: loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f} "
                     f"({time.time() - t0:.0f}s)")
        return pol

    def evaluate(self, pc: PolicyConfig, suite=None) -> SuccessTable:
        t0 = time.time()
        agent = PolicyAgent(self.policy(pc), self.context(pc))
        tab = evaluate(agent, suite or self.suite, self.cfg.seeds, self.cfg.episodes,
                       self.cfg.max_steps, pc.views)
        self.log(f"evaluated {describe(pc)}: {100 * tab.aggregate:.1f}% ({time.time() - t0:.0f}s)")
        return tab


def describe(pc: PolicyConfig) -> str:
    if not pc.use_retrieval:
        return "no-retrieval"
    parts = [f"k={pc.k_retrieved}"]
    if pc.zero_traj:
        parts.append("-traj")
    if pc.zero_mask:
        parts.append("-mask")
    return " ".join(parts)


@dataclass
class ComparisonTable:
    """Aggregate success (percent) per named variant."""

    title: str
    columns: list[str]
    values: list[float]
    tables: dict[str, SuccessTable] = field(default_factory=dict)

    def to_csv(self) -> str:
        return ",".join(["variant"] + self.columns) + "\n" + ",".join(
            ["success"] + [f"{v:.4f}" for v in self.values]) + "\n"

    def to_text(self) -> str:
        return self.title + "\n" + format_table(["variant"] + self.columns,
                                                [["success %"] + [f"{100 * v:.1f}" for v in self.values]])

    def __getitem__(self, col: str) -> float:
        return self.values[self.columns.index(col)]


def ablation_k(exp: Experiment, ks: Sequence[int] = (1, 3, 5, 7)) -> ComparisonTable:
    cols, vals, tabs = [], [], {}
    for k in ks:
        tab = exp.evaluate(replace(exp.cfg.policy, k_retrieved=k, use_retrieval=True))
        cols.append(f"k={k}")
        vals.append(tab.aggregate)
        tabs[f"k={k}"] = tab
    return ComparisonTable("retrieved videos", cols, vals, tabs)


def ablation_midlevel(exp: Experiment) -> ComparisonTable:
    base = replace(exp.cfg.policy, use_retrieval=True)
    variants = (("full", base), ("-trajectory", replace(base, zero_traj=True)),
                ("-affordance", replace(base, zero_mask=True)))
    tabs = {name: exp.evaluate(pc) for name, pc in variants}
    return ComparisonTable("mid-level channels", list(tabs), [t.aggregate for t in tabs.values()], tabs)


def generalization_probes(exp: Experiment) -> dict[str, ComparisonTable]:
    """Held-out colours, held-out spawn ring and three extra distractors: RfV vs no retrieval."""
    probes = {
        "heldout-color": default_suite(colors=HELDOUT_COLORS),
        "heldout-spawn": default_suite(spawn_region="ring"),
        "distractors": default_suite(distractors=3),
    }
    full = replace(exp.cfg.policy, use_retrieval=True)
    base = replace(exp.cfg.policy, use_retrieval=False)
    out = {}
    for name, suite in probes.items():
        tr = exp.evaluate(full, suite)
        tb = exp.evaluate(base, suite)
        out[name] = ComparisonTable(name, ["rfv", "no-retrieval"], [tr.aggregate, tb.aggregate],
                                    {"rfv": tr, "no-retrieval": tb})
    return out
