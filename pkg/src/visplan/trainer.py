"""Three-phase training: joint dynamics pretraining, SFT warmup, RSFT.

Every phase is a plain loop over ``steps`` updates with AdamW, linear warmup
and cosine decay. All randomness comes from numpy Generators seeded by
``(seed, global step at phase start, stream)``, so a checkpoint can carry the
full RNG state and a resumed phase replays the uninterrupted one exactly.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ck
from . import genmodel as gm
from . import objectives as obj
from . import vision
from .dynreward import CompressibilityScorer, RewardParams, TransitionScorer
from .gridworld import Dataset, GoalTransition

torch.use_deterministic_algorithms(True)

PHASES = ("init", "pretrain", "sft", "rsft")
METRIC_COLUMNS = [
    "step", "phase", "loss_total", "loss_sft_text", "loss_sft_image", "loss_rl", "mean_reward",
    "test_reward", "action_acc", "image_token_acc", "fwd_calls", "loss_inverse", "loss_forward",
]
# stream ids mixed into the phase seed
_BATCH, _SAMPLE, _EVAL = 0, 1, 2


class NonFiniteLoss(FloatingPointError):
    pass


class PhaseOrderError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    k_samples: int = 8
    lam: float = 0.5
    pretrain_steps: int = 2000
    sft_steps: int = 500
    rsft_steps: int = 2000
    warmup: float = 0.03
    min_lr_ratio: float = 1.0  # constant after warmup; < 1 enables cosine decay
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    adv_mode: str = "per_prompt"
    adv_eps: float = 1e-6
    normalize_image: bool = True
    reward: str = "dynamic"
    eval_every: int = 50
    eval_size: int = 64
    eval_k: int = 4
    checkpoint_every: int = 0
    no_idm: bool = False
    no_fdm: bool = False
    no_se: bool = False
    no_en: bool = False
    no_gen: bool = False
    rl_only: bool = False
    ar_variant: bool = False

    def __post_init__(self):
        for name in ("lr", "batch_size", "k_samples", "eval_every", "eval_size", "eval_k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lam", "pretrain_steps", "sft_steps", "rsft_steps", "weight_decay", "grad_clip", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 <= self.warmup < 1:
            raise ValueError("warmup must lie in [0, 1)")
        if self.no_idm and (self.no_fdm or self.no_gen):
            raise ValueError("no_idm with no_fdm/no_gen leaves pretraining without a loss")
        if self.reward not in ("dynamic", "compress", "incompress"):
            raise ValueError(f"unknown reward {self.reward!r}")
        if self.adv_mode not in ("per_prompt", "per_batch"):
            raise ValueError(f"unknown advantage mode {self.adv_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def effective_model_config(mcfg: gm.ModelConfig, cfg: TrainConfig) -> gm.ModelConfig:
    """Apply the architecture ablation flags."""
    fusion = mcfg.fusion
    if cfg.no_se and cfg.no_en:
        raise ValueError("no_se and no_en cannot both be set")
    if cfg.no_se:
        fusion = vision.FusionMode.NO_SE.value
    if cfg.no_en:
        fusion = vision.FusionMode.NO_EN.value
    variant = gm.Variant.AR.value if cfg.ar_variant else mcfg.variant
    return replace(mcfg, fusion=fusion, variant=variant)


def make_reward_fn(cfg: TrainConfig, params: RewardParams | None = None):
    if cfg.reward == "dynamic":
        return TransitionScorer(params)
    return CompressibilityScorer(cfg.reward)


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    """Learning rate for 0-based ``step``: linear warmup, then cosine decay to ``min_lr_ratio``."""
    warm = max(1, math.ceil(cfg.warmup * total)) if cfg.warmup > 0 else 0
    if step < warm:
        return cfg.lr * (step + 1) / warm
    frac = (step - warm) / max(1, total - warm)
    return cfg.lr * (cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


def make_optimizer(model: gm.UnifiedModel, cfg: TrainConfig) -> torch.optim.AdamW:
    decay = [p for p in model.parameters() if p.ndim >= 2]
    rest = [p for p in model.parameters() if p.ndim < 2]
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": rest, "weight_decay": 0.0}],
        lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
    )


# --------------------------------------------------------------------------
# run state and checkpoints


@dataclass
class RunState:
    model: gm.UnifiedModel
    cfg: TrainConfig
    phase: str
    phase_step: int = 0
    phase_steps: int = 0
    global_start: int = 0
    optimizer: torch.optim.AdamW | None = None
    rng_batch: np.random.Generator | None = None
    rng_sample: np.random.Generator | None = None

    @property
    def global_step(self) -> int:
        return self.global_start + self.phase_step

    @property
    def finished(self) -> bool:
        return self.phase_step >= self.phase_steps


def _rng(seed: int, start: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, start, stream, *extra])


def to_checkpoint(state: RunState) -> ck.Checkpoint:
    model = state.model
    arrays = {f"param/{n}": p.detach().cpu().numpy().copy() for n, p in model.named_parameters()}
    opt_steps = {}
    if state.optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in state.optimizer.param_groups:
            for p in group["params"]:
                st = state.optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                arrays[f"adam_m/{n}"] = st["exp_avg"].detach().cpu().numpy().copy()
                arrays[f"adam_v/{n}"] = st["exp_avg_sq"].detach().cpu().numpy().copy()
                opt_steps[n] = float(st["step"])
    header = {
        "format": "visplan-checkpoint",
        "version": 1,
        "model_config": model.cfg.to_dict(),
        "train_config": state.cfg.to_dict(),
        "codebook": vision.codebook(),
        "seed": state.cfg.seed,
        "phase": state.phase,
        "phase_step": state.phase_step,
        "phase_steps": state.phase_steps,
        "global_start": state.global_start,
        "global_step": state.global_step,
        "optimizer_steps": opt_steps,
        "rng": {
            "batch": None if state.rng_batch is None else state.rng_batch.bit_generator.state,
            "sample": None if state.rng_sample is None else state.rng_sample.bit_generator.state,
        },
    }
    return ck.Checkpoint(header, arrays)


def model_from_checkpoint(ckpt: ck.Checkpoint) -> gm.UnifiedModel:
    cfg = gm.ModelConfig(**ckpt.header["model_config"])
    model = gm.UnifiedModel(cfg)
    params = dict(model.named_parameters())
    missing = set(params) - {k[6:] for k in ckpt.arrays if k.startswith("param/")}
    if missing:
        raise ck.CorruptCheckpoint(f"checkpoint lacks parameters {sorted(missing)}")
    with torch.no_grad():
        for n, p in params.items():
            arr = ckpt.arrays[f"param/{n}"]
            if tuple(arr.shape) != tuple(p.shape):
                raise ck.CorruptCheckpoint(f"parameter {n} has shape {arr.shape}, expected {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr.copy()))
    return model


def _restore_generator(state) -> np.random.Generator | None:
    if state is None:
        return None
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def state_from_checkpoint(ckpt: ck.Checkpoint) -> RunState:
    """Rebuild the full run state, including optimizer moments and RNG positions."""
    h = ckpt.header
    model = model_from_checkpoint(ckpt)
    cfg = TrainConfig.from_dict(h["train_config"])
    state = RunState(model, cfg, h["phase"], h["phase_step"], h["phase_steps"], h["global_start"])
    state.rng_batch = _restore_generator(h["rng"]["batch"])
    state.rng_sample = _restore_generator(h["rng"]["sample"])
    if h["optimizer_steps"]:
        opt = make_optimizer(model, cfg)
        for n, p in model.named_parameters():
            if n in h["optimizer_steps"]:
                opt.state[p] = {
                    "step": torch.tensor(h["optimizer_steps"][n]),
                    "exp_avg": torch.from_numpy(ckpt.arrays[f"adam_m/{n}"].copy()),
                    "exp_avg_sq": torch.from_numpy(ckpt.arrays[f"adam_v/{n}"].copy()),
                }
        state.optimizer = opt
    return state


def save_checkpoint(state_or_ckpt, path) -> None:
    ckpt = state_or_ckpt if isinstance(state_or_ckpt, ck.Checkpoint) else to_checkpoint(state_or_ckpt)
    ck.save(ckpt, path)


def load_checkpoint(path) -> ck.Checkpoint:
    return ck.load(path)


def initial_checkpoint(cfg: TrainConfig, mcfg: gm.ModelConfig | None = None) -> ck.Checkpoint:
    model = gm.init_params(effective_model_config(mcfg or gm.ModelConfig(), cfg), cfg.seed)
    return to_checkpoint(RunState(model, cfg, "init"))


# --------------------------------------------------------------------------
# metrics


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: format_value(r.get(c)) for c in METRIC_COLUMNS})
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected metric columns {reader.fieldnames}")
        return list(reader)


def test_subset(dataset: Dataset, size: int) -> list[GoalTransition]:
    return sorted(dataset.test, key=lambda t: (t.episode, t.step))[:size]


def test_reward(model: gm.UnifiedModel, transitions, k: int, rng: np.random.Generator, reward_fn) -> float:
    """Mean reward of ``k`` sampled next-state images per teacher-forced test prompt."""
    with torch.no_grad():
        out = model(obj.plan_batch(model, transitions))
    samples = np.stack([gm.sample_images(out.image_logits[i], k, rng)[0] for i in range(len(transitions))])
    rewards, _ = obj.score_samples(reward_fn, transitions, samples)
    return float(np.nanmean(rewards)) if np.isfinite(rewards).any() else float("nan")


# --------------------------------------------------------------------------
# phase loop


@dataclass
class PhaseResult:
    checkpoint: ck.Checkpoint
    metrics: list[dict] = field(default_factory=list)
    state: RunState | None = None


def _dump_nonfinite(run_dir, payload: dict) -> None:
    if run_dir is None:
        return
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    with open(Path(run_dir) / "nonfinite.json", "w") as fh:
        json.dump(payload, fh, indent=2, default=str)


def _begin(phase: str, cfg: TrainConfig, source: ck.Checkpoint, steps: int) -> RunState:
    """Resume ``source`` if it is an unfinished run of ``phase``, else start the phase fresh from its weights."""
    h = source.header
    if h["phase"] == phase and h["phase_step"] < h["phase_steps"]:
        state = state_from_checkpoint(source)
        if state.cfg != cfg:
            raise ValueError("resuming with a different train config")
        return state
    model = model_from_checkpoint(source)
    start = h["global_step"]
    return RunState(
        model, cfg, phase, 0, steps, start, make_optimizer(model, cfg),
        _rng(cfg.seed, start, _BATCH), _rng(cfg.seed, start, _SAMPLE),
    )


def _run(state: RunState, dataset: Dataset, step_fn, run_dir=None, stop_after: int | None = None,
         reward_fn=None, metrics: list[dict] | None = None) -> PhaseResult:
    cfg, model = state.cfg, state.model
    train = dataset.train
    if not train:
        raise obj.EmptyBatch("dataset has no training transitions")
    evalset = test_subset(dataset, cfg.eval_size) if reward_fn is not None else []
    rows = list(metrics or [])
    params = [p for p in model.parameters()]
    run_dir = None if run_dir is None else Path(run_dir)
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    while not state.finished:
        if stop_after is not None and state.phase_step >= stop_after:
            break
        s = state.phase_step
        for g in state.optimizer.param_groups:
            g["lr"] = lr_at(cfg, s, state.phase_steps)
        idx = state.rng_batch.integers(0, len(train), cfg.batch_size)
        batch = [train[i] for i in idx]
        calls0 = model.forward_calls
        model.train()
        state.optimizer.zero_grad(set_to_none=True)
        lb = step_fn(model, batch, state)
        if not torch.isfinite(lb.total):
            _dump_nonfinite(run_dir, {"phase": state.phase, "step": s + 1, "parts": lb.parts})
            raise NonFiniteLoss(f"{state.phase} step {s + 1}: loss is not finite ({lb.parts})")
        lb.total.backward()
        norm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip if cfg.grad_clip > 0 else float("inf"))
        if not torch.isfinite(norm):
            _dump_nonfinite(run_dir, {"phase": state.phase, "step": s + 1, "parts": lb.parts, "grad_norm": float(norm)})
            raise NonFiniteLoss(f"{state.phase} step {s + 1}: gradient is not finite")
        state.optimizer.step()
        state.phase_step += 1

        row = {
            "step": state.phase_step,
            "phase": state.phase,
            "loss_total": lb.total.item(),
            "loss_sft_text": lb.parts.get("sft_text"),
            "loss_sft_image": lb.parts.get("sft_image"),
            "loss_rl": lb.parts.get("rl"),
            "mean_reward": lb.stats.get("mean_reward"),
            "action_acc": lb.stats.get("action_acc"),
            "image_token_acc": lb.stats.get("image_token_acc"),
            "loss_inverse": lb.parts.get("inverse"),
            "loss_forward": lb.parts.get("forward"),
        }
        if evalset and (state.phase_step % cfg.eval_every == 0 or state.finished):
            model.eval()
            rng = _rng(cfg.seed, state.global_start, _EVAL, state.phase_step)
            row["test_reward"] = test_reward(model, evalset, cfg.eval_k, rng, reward_fn)
        row["fwd_calls"] = model.forward_calls - calls0
        rows.append(row)

        if run_dir is not None and cfg.checkpoint_every and state.phase_step % cfg.checkpoint_every == 0:
            save_checkpoint(state, run_dir / "checkpoints" / f"{state.phase}_{state.phase_step:06d}.ckpt")

    result = PhaseResult(to_checkpoint(state), rows, state)
    if run_dir is not None:
        (run_dir / "metrics.csv").write_text(metrics_csv(rows))
        ck.save(result.checkpoint, run_dir / ("final.ckpt" if state.finished else "last.ckpt"))
    return result


def _pretrain_step(model, batch, state):
    cfg = state.cfg
    total, parts, stats = None, {}, {}
    if not cfg.no_idm:
        inv = obj.inverse_dynamics_loss(model, batch)
        total = inv.total
        parts.update(inv.parts)
        stats.update(inv.stats)
    if not (cfg.no_fdm or cfg.no_gen):
        fwd = obj.forward_dynamics_loss(model, batch, cfg.normalize_image)
        total = fwd.total if total is None else total + fwd.total
        parts.update(fwd.parts)
        stats.update(fwd.stats)
    return obj.LossBreakdown(total, parts, stats)


def _sft_step(model, batch, state):
    cfg = state.cfg
    return obj.sft_loss(model, batch, 0.0 if cfg.no_gen else 1.0, cfg.normalize_image)


def _prior_rows(run_dir, state: RunState) -> list[dict]:
    """Rows of an interrupted run that precede the resume point."""
    if run_dir is None or state.phase_step == 0:
        return []
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        return []
    rows = [r for r in read_metrics(path) if r["phase"] == state.phase and int(r["step"]) <= state.phase_step]
    return [{k: _parse(v) for k, v in r.items()} for r in rows]


def _parse(v: str):
    if v == "":
        return None
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def pretrain(cfg: TrainConfig, dataset: Dataset, source: ck.Checkpoint | None = None,
             model_cfg: gm.ModelConfig | None = None, run_dir=None, stop_after: int | None = None) -> PhaseResult:
    """Joint inverse + forward dynamics pretraining on the same batch each step.

    ``source`` defaults to a freshly initialised model; pass an unfinished
    pretraining checkpoint to resume it.
    """
    source = source or initial_checkpoint(cfg, model_cfg)
    state = _begin("pretrain", cfg, source, cfg.pretrain_steps)
    return _run(state, dataset, _pretrain_step, run_dir, stop_after, metrics=_prior_rows(run_dir, state))


def sft_phase(cfg: TrainConfig, source: ck.Checkpoint, dataset: Dataset, run_dir=None,
              stop_after: int | None = None, steps: int | None = None) -> PhaseResult:
    """Supervised fine-tuning on planning prompts (action + next image)."""
    state = _begin("sft", cfg, source, cfg.sft_steps if steps is None else steps)
    reward_fn = None if cfg.no_gen else make_reward_fn(cfg)
    return _run(state, dataset, _sft_step, run_dir, stop_after, reward_fn, _prior_rows(run_dir, state))


def rsft_phase(cfg: TrainConfig, source: ck.Checkpoint, dataset: Dataset, reward_fn=None, run_dir=None,
               stop_after: int | None = None, steps: int | None = None) -> PhaseResult:
    """``L_SFT + lam * L_RL`` with one forward per prompt and ``K`` sampled images.

    ``rl_only`` drops the likelihood term and may start from a pretrained
    checkpoint; otherwise ``source`` must have been through SFT.
    """
    if cfg.no_gen:
        raise ValueError("RSFT needs the image head; no_gen is incompatible")
    if cfg.ar_variant:
        raise ValueError("RSFT samples images in one pass; the AR variant is benchmark-only")
    allowed = ("pretrain", "sft", "rsft") if cfg.rl_only else ("sft", "rsft")
    if source.header["phase"] not in allowed:
        raise PhaseOrderError(f"rsft_phase needs a checkpoint from {allowed}, got {source.header['phase']!r}")
    reward_fn = reward_fn or make_reward_fn(cfg)

    def step(model, batch, state):
        return obj.rsft_loss(
            model, batch, cfg.k_samples, cfg.lam, reward_fn, state.rng_sample,
            sft_weight=0.0 if cfg.rl_only else 1.0, adv_mode=cfg.adv_mode, eps=cfg.adv_eps,
            normalize_image=cfg.normalize_image,
        )

    state = _begin("rsft", cfg, source, cfg.rsft_steps if steps is None else steps)
    return _run(state, dataset, step, run_dir, stop_after, reward_fn, _prior_rows(run_dir, state))


def run_root() -> Path:
    """Directory under which the CLI creates run directories (``VISPLAN_RUNS``, default ``runs``)."""
    return Path(os.environ.get("VISPLAN_RUNS", "runs"))
