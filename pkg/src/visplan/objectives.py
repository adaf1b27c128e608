"""Training objectives, advantage normalisation and a finite-difference checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import genmodel as gm
from .gridworld import GoalTransition


class EmptyBatch(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class DegenerateGroup(ValueError):
    pass


class NonDeterministicLoss(RuntimeError):
    pass


@dataclass
class LossBreakdown:
    """``total`` keeps its autograd graph; ``parts`` are plain floats."""

    total: torch.Tensor
    parts: dict[str, float]
    stats: dict = field(default_factory=dict)
    grad: np.ndarray | None = None


def _check(batch):
    if len(batch) == 0:
        raise EmptyBatch("loss needs at least one transition")


def text_nll(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the per-sequence mean token NLL."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1))


def image_nll(logits: torch.Tensor, target: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Mean over the batch of ``-log P(image)``, divided by ``N`` when ``normalize``."""
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1))
    return nll if normalize else nll * target.shape[-1]


def _accuracy(logits: torch.Tensor, target: torch.Tensor) -> float:
    return float((logits.argmax(-1) == target).double().mean())


def inverse_dynamics_loss(model: gm.UnifiedModel, batch: list[GoalTransition]) -> LossBreakdown:
    _check(batch)
    seqs = [gm.build_sequence(gm.PromptKind.INVERSE, model.cfg, t.x_t, t.x_t1, t.action) for t in batch]
    b = gm.collate(seqs)
    out = model(b)
    loss = text_nll(out.text_logits, b.text_target)
    return LossBreakdown(loss, {"inverse": loss.item()}, {"action_acc": _accuracy(out.text_logits, b.text_target)})


def forward_dynamics_loss(model: gm.UnifiedModel, batch: list[GoalTransition], normalize: bool = True) -> LossBreakdown:
    _check(batch)
    seqs = [gm.build_sequence(gm.PromptKind.FORWARD, model.cfg, t.x_t, t.x_t1, t.action) for t in batch]
    b = gm.collate(seqs)
    out = model(b)
    loss = image_nll(out.image_logits, b.image_target, normalize)
    return LossBreakdown(loss, {"forward": loss.item()}, {"image_token_acc": _accuracy(out.image_logits, b.image_target)})


def plan_batch(model: gm.UnifiedModel, batch: list[GoalTransition], with_image: bool = True) -> gm.Batch:
    return gm.collate([
        gm.build_sequence(gm.PromptKind.PLAN, model.cfg, t.x_t, t.x_t1, t.action, t.task, with_image=with_image)
        for t in batch
    ])


def _sft_terms(out, b, image_weight: float, normalize_image: bool):
    text = text_nll(out.text_logits, b.text_target)
    parts = {"sft_text": text.item()}
    stats = {"action_acc": _accuracy(out.text_logits, b.text_target)}
    total = text
    if image_weight:
        image = image_nll(out.image_logits, b.image_target, normalize_image)
        parts["sft_image"] = image.item()
        stats["image_token_acc"] = _accuracy(out.image_logits, b.image_target)
        total = total + image_weight * image
    return total, parts, stats


def sft_loss(
    model: gm.UnifiedModel,
    batch: list[GoalTransition],
    image_weight: float = 1.0,
    normalize_image: bool = True,
) -> LossBreakdown:
    """Joint action + next-image likelihood on planning prompts.

    ``image_weight=0`` drops the image slots entirely (pure language planner).
    """
    _check(batch)
    b = plan_batch(model, batch, with_image=bool(image_weight))
    out = model(b)
    total, parts, stats = _sft_terms(out, b, image_weight, normalize_image)
    return LossBreakdown(total, parts, stats)


# --------------------------------------------------------------------------
# policy gradient


@dataclass
class AdvantageBatch:
    rewards: np.ndarray  # (B, K), NaN marks an excluded sample
    normalized: np.ndarray
    advantages: np.ndarray
    mode: str


def normalize_advantages(rewards, mode: str = "per_prompt", eps: float = 1e-6) -> AdvantageBatch:
    """Standardise rewards within each prompt's group (or across the batch).

    Population std; groups whose std is below ``eps`` get zero advantage.
    NaN rewards are excluded from the statistics and get zero advantage.
    """
    r = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    if mode not in ("per_prompt", "per_batch"):
        raise ValueError(f"unknown advantage mode {mode!r}")
    if mode == "per_prompt" and r.shape[1] < 2:
        raise DegenerateGroup("per-prompt normalisation needs at least 2 samples per prompt")
    valid = np.isfinite(r)
    norm = np.zeros_like(r)
    groups = [np.s_[i, :] for i in range(r.shape[0])] if mode == "per_prompt" else [np.s_[:, :]]
    for g in groups:
        v = valid[g]
        vals = r[g][v]
        if vals.size == 0:
            continue
        mu, sd = vals.mean(), vals.std()
        if sd < eps:
            continue
        sub = np.zeros(v.shape)
        sub[v] = (vals - mu) / sd
        norm[g] = sub
    return AdvantageBatch(r, norm, norm.copy(), mode)


def sample_log_probs(image_logits: torch.Tensor, samples: torch.Tensor) -> torch.Tensor:
    """``(B, N, K_img)`` logits, ``(B, S, N)`` samples -> ``(B, S)`` summed log-probs."""
    logp = torch.log_softmax(image_logits, dim=-1)  # (B, N, K_img)
    idx = samples.transpose(1, 2)  # (B, N, S)
    return logp.gather(2, idx).sum(dim=1)


def _rl_term(image_logits: torch.Tensor, samples, advantages) -> torch.Tensor:
    samples = torch.as_tensor(np.asarray(samples), dtype=torch.long)
    adv = torch.as_tensor(np.asarray(advantages), dtype=image_logits.dtype)
    if samples.ndim != 3 or samples.shape[0] != image_logits.shape[0] or samples.shape[2] != image_logits.shape[1]:
        raise ShapeMismatch(f"samples {tuple(samples.shape)} do not fit logits {tuple(image_logits.shape)}")
    if adv.shape != samples.shape[:2]:
        raise ShapeMismatch(f"advantages {tuple(adv.shape)} do not match samples {tuple(samples.shape[:2])}")
    logp = sample_log_probs(image_logits, samples)
    return -(adv * logp).mean()


def rl_loss(model: gm.UnifiedModel, batch: list[GoalTransition], samples, advantages) -> LossBreakdown:
    """REINFORCE surrogate ``-(1/BK) sum A_k log P(x^k | g, x_t, a_t)``.

    ``samples`` is ``(B, K, N)``; advantages are constants.
    """
    _check(batch)
    b = plan_batch(model, batch)
    out = model(b)
    loss = _rl_term(out.image_logits, samples, advantages)
    return LossBreakdown(loss, {"rl": loss.item()})


RewardFn = Callable[[GoalTransition, np.ndarray], float]


def score_samples(reward_fn: RewardFn, batch, samples) -> tuple[np.ndarray, int]:
    """Rewards ``(B, K)``; a sample whose reward raises is recorded as NaN."""
    rewards = np.empty(samples.shape[:2])
    failures = 0
    for i, t in enumerate(batch):
        for k in range(samples.shape[1]):
            try:
                rewards[i, k] = float(reward_fn(t, samples[i, k]))
            except Exception:
                rewards[i, k] = np.nan
                failures += 1
    return rewards, failures


def rsft_loss(
    model: gm.UnifiedModel,
    batch: list[GoalTransition],
    k: int,
    lam: float,
    reward_fn: RewardFn,
    rng: np.random.Generator | None = None,
    sft_weight: float = 1.0,
    adv_mode: str = "per_prompt",
    eps: float = 1e-6,
    normalize_image: bool = True,
    samples: np.ndarray | None = None,
) -> LossBreakdown:
    """``sft_weight * L_SFT + lam * L_RL`` from a single forward pass.

    The image distribution used for the likelihood term is also the one the
    ``k`` samples per prompt are drawn from. Pass ``samples`` (``(B, k, N)``)
    to freeze them. ``sft_weight=0`` is the unconstrained policy-gradient form.
    """
    _check(batch)
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    b = plan_batch(model, batch)
    out = model(b)
    sft_total, parts, stats = _sft_terms(out, b, 1.0, normalize_image)

    if samples is None:
        drawn = [gm.sample_images(out.image_logits[i], k, rng)[0] for i in range(len(batch))]
        samples = np.stack(drawn)
    rewards, failures = score_samples(reward_fn, batch, samples)
    adv = normalize_advantages(rewards, adv_mode, eps)

    total = sft_total if sft_weight == 1.0 else sft_weight * sft_total
    if lam and np.any(adv.advantages):
        rl = _rl_term(out.image_logits, samples, adv.advantages)
        total = total + lam * rl
        parts["rl"] = rl.item()
    else:
        parts["rl"] = 0.0
    stats.update(mean_reward=float(np.nanmean(rewards)) if np.isfinite(rewards).any() else float("nan"),
                 reward_failures=failures, samples=samples, advantages=adv)
    return LossBreakdown(total, parts, stats)


# --------------------------------------------------------------------------
# gradients


def flat_grad(params: list[torch.Tensor]) -> np.ndarray:
    return np.concatenate([
        (p.grad if p.grad is not None else torch.zeros_like(p)).detach().double().reshape(-1).numpy() for p in params
    ])


def with_grad(model: torch.nn.Module, loss_fn: Callable[[], LossBreakdown]) -> LossBreakdown:
    """Evaluate a loss and attach its gradient as a flat array over ``model.parameters()``."""
    params = list(model.parameters())
    model.zero_grad(set_to_none=True)
    lb = loss_fn()
    lb.total.backward()
    lb.grad = flat_grad(params)
    return lb


def finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    params: list[torch.Tensor],
    n_probes: int = 200,
    h: float = 1e-4,
    seed: int = 0,
    floor: float = 1e-6,
    order: int = 4,
) -> float:
    """Max relative error between autograd and central differences on random coordinates.

    ``order=2`` is the two-point stencil ``(f(x+h) - f(x-h)) / 2h``; ``order=4``
    adds the ``x +- 2h`` points, cancelling the O(h^2) truncation term. The
    error is ``|g - fd| / max(|g|, |fd|, floor)``; the floor keeps
    coordinates whose true gradient is zero from dividing roundoff by ~0.

    ``loss_fn`` must return a scalar tensor (or a LossBreakdown) and be
    deterministic at fixed parameters.
    """
    def value():
        out = loss_fn()
        return out.total if isinstance(out, LossBreakdown) else out

    for p in params:
        p.grad = None
    loss = value()
    loss.backward()
    analytic = flat_grad(params)
    with torch.no_grad():
        if float(value()) != float(loss):
            raise NonDeterministicLoss("two evaluations at identical parameters differ")

    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    sizes = [p.numel() for p in params]
    offsets = np.cumsum([0] + sizes)
    n = int(offsets[-1])
    rng = np.random.default_rng(seed)
    probes = rng.choice(n, size=min(n_probes, n), replace=False)
    worst = 0.0
    with torch.no_grad():
        for idx in probes:
            pi = int(np.searchsorted(offsets, idx, side="right") - 1)
            flat = params[pi].view(-1)
            j = int(idx - offsets[pi])
            fd = _central(value, flat, j, h, order)
            worst = max(worst, abs(analytic[idx] - fd) / max(abs(analytic[idx]), abs(fd), floor))
    return worst


def _central(value, flat: torch.Tensor, j: int, h: float, order: int) -> float:
    orig = flat[j].item()

    def at(x):
        flat[j] = x
        return float(value())

    d1 = at(orig + h) - at(orig - h)
    if order == 2:
        flat[j] = orig
        return d1 / (2 * h)
    d2 = at(orig + 2 * h) - at(orig - 2 * h)
    flat[j] = orig
    return (8 * d1 - d2) / (12 * h)
