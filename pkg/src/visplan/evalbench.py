"""Closed-loop planning evaluation, image metrics and the sampling benchmark.

A planner proposes a text action and optionally a generated next-state token
image for each ``(task, state)``. The symbolic executor runs the parsed
action; the image is only scored, never executed.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np
import torch

from . import genmodel as gm
from . import gridworld as gw
from . import objectives as obj
from . import vision
from . import vocab
from .dynreward import DimensionMismatch, dynamic_reward, to_gray

HORIZON = 12
MIN_EPISODES = 30
METRICS = ("SR", "LA", "image_token_acc", "ssim", "mean_reward")


class CounterMismatch(AssertionError):
    pass


class TooFewEpisodes(ValueError):
    pass


# --------------------------------------------------------------------------
# image metrics

SSIM_WINDOW = 8
SSIM_STRIDE = 4
SSIM_C1 = (0.01 * 255) ** 2
SSIM_C2 = (0.03 * 255) ** 2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over 8x8 gray windows at stride 4."""
    if np.shape(a) != np.shape(b):
        raise DimensionMismatch(f"image shapes differ: {np.shape(a)} vs {np.shape(b)}")
    ga, gb = to_gray(a) * 255.0, to_gray(b) * 255.0
    h, w = ga.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DimensionMismatch(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    vals = []
    for y in range(0, h - SSIM_WINDOW + 1, SSIM_STRIDE):
        for x in range(0, w - SSIM_WINDOW + 1, SSIM_STRIDE):
            pa = ga[y:y + SSIM_WINDOW, x:x + SSIM_WINDOW]
            pb = gb[y:y + SSIM_WINDOW, x:x + SSIM_WINDOW]
            ma, mb = pa.mean(), pb.mean()
            va, vb = pa.var(), pb.var()
            cov = ((pa - ma) * (pb - mb)).mean()
            vals.append(((2 * ma * mb + SSIM_C1) * (2 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2)))
    return float(np.mean(vals))


def token_accuracy(generated, realized) -> float:
    return float(np.mean(np.asarray(generated).ravel() == vision.tokenize(realized)))


# --------------------------------------------------------------------------
# planners


@dataclass
class Proposal:
    action: str
    image: np.ndarray | None = None  # (N,) token ids


class Planner(Protocol):
    def propose(self, tasks: list[gw.TaskSpec], states: list[np.ndarray],
                rngs: list[np.random.Generator]) -> list[Proposal]: ...


class OraclePlanner:
    """Replays the deterministic oracle; with ``perfect_image`` it also emits the true next state."""

    def __init__(self, perfect_image: bool = True):
        self.perfect_image = perfect_image

    def propose(self, tasks, states, rngs):
        out = []
        for task, state in zip(tasks, states):
            a = gw.next_oracle_action(task, state)
            if a is None:
                out.append(Proposal("", None))
                continue
            img = vision.tokenize(gw.apply_action(state, a)) if self.perfect_image else None
            out.append(Proposal(a.text, img))
        return out


class RandomPlanner:
    """Uniformly random colour and cells; no image."""

    def propose(self, tasks, states, rngs):
        out = []
        for state, rng in zip(states, rngs):
            n = state.shape[0]
            color = int(rng.integers(gw.N_COLORS))
            r1, c1, r2, c2 = (int(v) for v in rng.integers(0, n, 4))
            out.append(Proposal(gw.Action(color, (r1, c1), (r2, c2)).text))
        return out


def greedy_actions(model: gm.UnifiedModel, seqs: list[gm.Sequence], max_len: int = vocab.ACTION_LEN) -> list[list[int]]:
    """Batched greedy decoding of action tokens after planning prompts."""
    ids = np.zeros((len(seqs), 0), dtype=np.int64)
    with torch.no_grad():
        for _ in range(max_len):
            batch = gm.collate([gm.append_text(s, row, model.cfg) for s, row in zip(seqs, ids)])
            nxt = model(batch).text_logits[:, -1].argmax(-1).numpy()
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
            if np.all((ids == vocab.END_ID).any(axis=1)):
                break
    out = []
    for row in ids:
        row = list(row)
        out.append(row[: row.index(vocab.END_ID) + 1] if vocab.END_ID in row else row)
    return out


class ModelPlanner:
    """Greedy action decoding, then one sampled subgoal image conditioned on the decoded action."""

    def __init__(self, model: gm.UnifiedModel, with_image: bool = True):
        self.model = model.eval()
        self.with_image = with_image

    def propose(self, tasks, states, rngs):
        cfg = self.model.cfg
        prompts = [gm.build_sequence(gm.PromptKind.PLAN, cfg, x_t=s, task=t, with_target=False)
                   for t, s in zip(tasks, states)]
        decoded = greedy_actions(self.model, prompts)
        out = []
        for task, state, ids, rng in zip(tasks, states, decoded, rngs):
            try:
                action = vocab.tokens_to_action(ids)
            except gw.IllegalAction:
                out.append(Proposal(" ".join(vocab.decode(ids)), None))
                continue
            img = None
            if self.with_image:
                img = self._image(state, action, task, rng)
            out.append(Proposal(action.text, img))
        return out

    def _image(self, state, action, task, rng):
        cfg = self.model.cfg
        seq = gm.build_sequence(gm.PromptKind.PLAN, cfg, state, None, action, task)
        if gm.Variant(cfg.variant) is gm.Variant.AR:
            return gm.ar_sample_image(self.model, seq, rng)
        return gm.sample_images(gm.image_distribution(self.model, seq), 1, rng)[0][0]


# --------------------------------------------------------------------------
# rollouts


@dataclass
class StepRecord:
    action: str
    oracle: str
    match: bool
    legal: bool
    token_acc: float | None = None
    ssim: float | None = None
    reward: float | None = None


@dataclass
class EpisodeResult:
    task: gw.TaskSpec
    steps: int
    success: bool
    records: list[StepRecord] = field(default_factory=list)

    @property
    def action_matches(self) -> list[bool]:
        return [r.match for r in self.records]

    @property
    def la(self) -> float:
        return float(np.mean(self.action_matches)) if self.records else 0.0

    def image_mean(self, key: str) -> float | None:
        vals = [getattr(r, key) for r in self.records if getattr(r, key) is not None]
        return float(np.mean(vals)) if vals else None


def run_episodes(planner: Planner, episodes, rngs, horizon: int = HORIZON) -> list[EpisodeResult]:
    """Step every episode in lockstep so model planners can batch their forwards."""
    results = [EpisodeResult(task, 0, False) for task, _ in episodes]
    states = [np.array(s, copy=True) for _, s in episodes]
    active = [i for i, (task, s) in enumerate(episodes) if not gw.check_success(task, s)]
    for i in set(range(len(episodes))) - set(active):
        results[i].success = True
    for _ in range(horizon):
        if not active:
            break
        props = planner.propose([episodes[i][0] for i in active], [states[i] for i in active], [rngs[i] for i in active])
        still = []
        for i, prop in zip(active, props):
            task, state = episodes[i][0], states[i]
            try:
                oracle = gw.next_oracle_action(task, state)
            except gw.Unsolvable:
                # earlier model moves left no expert continuation; the step cannot match
                oracle = None
            try:
                action = gw.parse_action(prop.action)
                nxt = gw.apply_action(state, action)
                legal = True
            except gw.IllegalAction:
                action, nxt, legal = None, state, False
            rec = StepRecord(prop.action, oracle.text if oracle else "", action is not None and action == oracle, legal)
            if prop.image is not None:
                gen = vision.detokenize(prop.image, state.shape[0])
                rec.token_acc = token_accuracy(gen, nxt)
                x_gen, x_real = gw.render(gen), gw.render(nxt)
                rec.ssim = ssim(x_gen, x_real)
                rec.reward = dynamic_reward(gw.render(state), x_gen, x_real)
            res = results[i]
            res.records.append(rec)
            res.steps += 1
            states[i] = nxt
            if gw.check_success(task, nxt):
                res.success = True
            else:
                still.append(i)
        active = still
    return results


def rollout_episode(planner: Planner, task: gw.TaskSpec, state: np.ndarray, rng: np.random.Generator | None = None,
                    horizon: int = HORIZON) -> EpisodeResult:
    return run_episodes(planner, [(task, state)], [rng or np.random.default_rng(0)], horizon)[0]


def bootstrap_ci(values, n_boot: int = 1000, seed: int = 0, alpha: float = 0.05) -> tuple[float, float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan"), float("nan")
    rng = np.random.default_rng(seed)
    means = v[rng.integers(0, v.size, (n_boot, v.size))].mean(axis=1)
    lo, hi = np.quantile(means, [alpha / 2, 1 - alpha / 2])
    return float(v.mean()), float(lo), float(hi)


def evaluate(planner: Planner, episodes, n_episodes: int | None = None, seed: int = 0,
             horizon: int = HORIZON, n_boot: int = 1000) -> tuple[dict, list[EpisodeResult]]:
    """Summary means with 95% bootstrap intervals over the first ``n_episodes`` episodes."""
    n = len(episodes) if n_episodes is None else n_episodes
    if n < MIN_EPISODES:
        raise TooFewEpisodes(f"evaluation needs at least {MIN_EPISODES} episodes, got {n}")
    if n > len(episodes):
        raise TooFewEpisodes(f"asked for {n} episodes but only {len(episodes)} are available")
    episodes = list(episodes)[:n]
    rngs = [np.random.default_rng([seed, i]) for i in range(n)]
    results = run_episodes(planner, episodes, rngs, horizon)
    per = {
        "SR": [float(r.success) for r in results],
        "LA": [r.la for r in results],
        "image_token_acc": [r.image_mean("token_acc") for r in results],
        "ssim": [r.image_mean("ssim") for r in results],
        "mean_reward": [r.image_mean("reward") for r in results],
    }
    summary = {"n_episodes": n, "horizon": horizon}
    for k, vals in per.items():
        vals = [v for v in vals if v is not None]
        mean, lo, hi = bootstrap_ci(vals, n_boot, seed)
        summary[k] = {"mean": mean, "ci_low": lo, "ci_high": hi, "n": len(vals)}
    return summary, results


def episodes_csv(results: list[EpisodeResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "family", "instruction", "steps", "success", "la", "token_acc", "ssim", "reward"])
    for i, r in enumerate(results):
        w.writerow([i, r.task.family.value, r.task.instruction, r.steps, int(r.success), repr(r.la)]
                   + ["" if r.image_mean(k) is None else repr(r.image_mean(k)) for k in ("token_acc", "ssim", "reward")])
    return buf.getvalue()


# --------------------------------------------------------------------------
# teacher-forced held-out accuracies


def heldout_accuracy(model: gm.UnifiedModel, transitions, batch_size: int = 64) -> dict[str, float]:
    """Token accuracies on held-out transitions with ground-truth inputs.

    ``inverse_action_acc``: action tokens from ``(x_t, x_t+1)``;
    ``forward_image_acc``: next-image tokens from ``(x_t, a_t)``;
    ``plan_action_acc`` / ``plan_image_acc``: the planning prompt's heads.
    """
    totals: dict[str, list[float]] = {}
    model.eval()
    with torch.no_grad():
        for i in range(0, len(transitions), batch_size):
            chunk = transitions[i:i + batch_size]
            parts = {
                "inverse_action_acc": obj.inverse_dynamics_loss(model, chunk).stats["action_acc"],
                "forward_image_acc": obj.forward_dynamics_loss(model, chunk).stats["image_token_acc"],
            }
            plan = obj.sft_loss(model, chunk).stats
            parts["plan_action_acc"] = plan["action_acc"]
            parts["plan_image_acc"] = plan["image_token_acc"]
            for k, v in parts.items():
                totals.setdefault(k, []).append(v * len(chunk))
    return {k: float(sum(v) / len(transitions)) for k, v in totals.items()}


# --------------------------------------------------------------------------
# sampling benchmark


@dataclass
class BenchRecord:
    variant: str
    k: int
    n: int
    trials: int
    forward_calls: int
    wall_seconds: float

    def to_json(self) -> dict:
        return asdict(self)


def bench_sampling(model_onestep: gm.UnifiedModel, model_ar: gm.UnifiedModel, contexts: list[gw.GoalTransition],
                   k: int = 8, trials: int = 1, seed: int = 0) -> tuple[BenchRecord, BenchRecord, str]:
    """Time drawing ``k`` next-state images per trial with both variants.

    Forward calls are counted exactly; a count other than ``1`` (one-step)
    or ``k * N`` (autoregressive) per trial raises :class:`CounterMismatch`.
    """
    a, b = model_onestep.cfg, model_ar.cfg
    if (a.d_model, a.n_layers, a.n_heads, a.grid, a.codebook) != (b.d_model, b.n_layers, b.n_heads, b.grid, b.codebook):
        raise ValueError("benchmark models must share their dimensions")
    if gm.Variant(a.variant) is not gm.Variant.ONE_STEP or gm.Variant(b.variant) is not gm.Variant.AR:
        raise ValueError("expected a one-step model and an autoregressive model")
    n = a.n_image
    records = []
    for model, per_trial in ((model_onestep, 1), (model_ar, k * n)):
        model.eval()
        rng = np.random.default_rng(seed)
        before = model.forward_calls
        t0 = time.perf_counter()
        for i in range(trials):
            t = contexts[i % len(contexts)]
            seq = gm.build_sequence(gm.PromptKind.PLAN, model.cfg, t.x_t, None, t.action, t.task)
            if model is model_onestep:
                gm.sample_images(gm.image_distribution(model, seq), k, rng)
            else:
                for _ in range(k):
                    gm.ar_sample_image(model, seq, rng)
        wall = time.perf_counter() - t0
        calls = model.forward_calls - before
        if calls != per_trial * trials:
            raise CounterMismatch(f"{model.cfg.variant}: {calls} forward calls, expected {per_trial * trials}")
        records.append(BenchRecord(model.cfg.variant, k, n, trials, calls, wall))
    one, ar = records
    return one, ar, bench_report(one, ar)


def bench_report(one: BenchRecord, ar: BenchRecord) -> str:
    ratio = ar.wall_seconds / one.wall_seconds if one.wall_seconds > 0 else float("inf")
    lines = [
        f"Image sampling time for K={one.k} samples of N={one.n} tokens, {one.trials} trial(s)",
        "",
        "| Method | Forward passes | Image sampling time (seconds) |",
        "|---|---|---|",
        f"| Autoregressive (one token per pass) | {ar.forward_calls} | {ar.wall_seconds:.4f} |",
        f"| One-step parallel (this model) | {one.forward_calls} | {one.wall_seconds:.4f} |",
        "",
        f"Wall-clock ratio autoregressive / one-step: {ratio:.1f}x",
        "",
        "No diffusion baseline row: this artifact contains no diffusion model, so iterative-denoising",
        "timing is not measured.",
    ]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# reward curves


def reward_curve(checkpoints, transitions, reward_fn, k: int = 4, seed: int = 0) -> list[dict]:
    """Mean test reward per ``(step, model)`` pair; sample streams depend only on ``(seed, step)``."""
    from .trainer import test_reward

    out = []
    for step, model in checkpoints:
        rng = np.random.default_rng([seed, int(step)])
        out.append({"step": int(step), "mean_reward": test_reward(model.eval(), transitions, k, rng, reward_fn)})
    return out


def paired_curves(a: list[dict], b: list[dict], names=("rsft", "sft")) -> list[dict]:
    """Join two curves on their common steps."""
    bm = {r["step"]: r["mean_reward"] for r in b}
    return [{"step": r["step"], names[0]: r["mean_reward"], names[1]: bm[r["step"]]} for r in a if r["step"] in bm]
