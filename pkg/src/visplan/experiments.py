"""Directional experiments shared by ``scripts/`` and the acceptance suite.

A :class:`Lab` memoises phase runs so experiments that share a prefix (the
same pretrained or SFT checkpoint) train it once per process. Every run is a
pure function of its seed, flags and :class:`Budget`.
"""
from __future__ import annotations

import ctypes
import ctypes.util
import gc
import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import evalbench as eb
from . import gridworld as gw
from . import trainer as tr

ABLATIONS = ("no_idm", "no_fdm", "no_se", "no_en")


@dataclass(frozen=True)
class Budget:
    data_count: int = 5000
    pretrain_steps: int = 2000
    sft_steps: int = 500
    rsft_steps: int = 500
    episodes: int = 1000  # capped by the number of held-out episodes
    horizon: int = eb.HORIZON

    def train_config(self, seed: int, **flags) -> tr.TrainConfig:
        return tr.TrainConfig(seed=seed, pretrain_steps=self.pretrain_steps, sft_steps=self.sft_steps,
                              rsft_steps=self.rsft_steps, **flags)


class Lab:
    def __init__(self, budget: Budget | None = None, out_dir=None, log=print):
        self.budget = budget or Budget()
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.log = log or (lambda *a: None)
        self._cache: dict = {}

    def _memo(self, key, fn):
        if key not in self._cache:
            t0 = time.perf_counter()
            self._cache[key] = fn()
            release_memory()
            self.log(f"[lab] {key[0]} seed={key[1]} {dict(key[2])} done in {time.perf_counter() - t0:.0f}s")
        return self._cache[key]

    def _run_dir(self, name: str, seed: int, flags: dict):
        if self.out_dir is None:
            return None
        tag = "_".join(k for k, v in sorted(flags.items()) if v) or "full"
        return self.out_dir / f"{name}_{tag}_s{seed}"

    def dataset(self, seed: int) -> gw.Dataset:
        return self._memo(("data", seed, ()), lambda: gw.sample_dataset(seed, self.budget.data_count))

    def pretrain(self, seed: int, **flags) -> tr.PhaseResult:
        flags = _pretrain_flags(flags)
        cfg = self.budget.train_config(seed, **flags)
        return self._memo(("pretrain", seed, tuple(sorted(flags.items()))),
                          lambda: tr.pretrain(cfg, self.dataset(seed), run_dir=self._run_dir("pretrain", seed, flags)))

    def sft(self, seed: int, **flags) -> tr.PhaseResult:
        cfg = self.budget.train_config(seed, **flags)
        return self._memo(("sft", seed, tuple(sorted(flags.items()))), lambda: tr.sft_phase(
            cfg, self.pretrain(seed, **flags).checkpoint, self.dataset(seed), run_dir=self._run_dir("sft", seed, flags)))

    def sft_continued(self, seed: int) -> tr.PhaseResult:
        """SFT for ``rsft_steps`` more steps from the SFT checkpoint: the RSFT run with the RL term removed."""
        cfg = self.budget.train_config(seed)
        return self._memo(("sft_cont", seed, ()), lambda: tr.sft_phase(
            cfg, self.sft(seed).checkpoint, self.dataset(seed), steps=self.budget.rsft_steps,
            run_dir=self._run_dir("sftcont", seed, {})))

    def rsft(self, seed: int) -> tr.PhaseResult:
        cfg = self.budget.train_config(seed)
        return self._memo(("rsft", seed, ()), lambda: tr.rsft_phase(
            cfg, self.sft(seed).checkpoint, self.dataset(seed), run_dir=self._run_dir("rsft", seed, {})))

    def rl_only(self, seed: int) -> tr.PhaseResult:
        """Policy gradient only, straight from pretraining, for the SFT + RSFT step budget."""
        cfg = self.budget.train_config(seed, rl_only=True)
        steps = self.budget.sft_steps + self.budget.rsft_steps
        return self._memo(("rl_only", seed, ()), lambda: tr.rsft_phase(
            cfg, self.pretrain(seed).checkpoint, self.dataset(seed), steps=steps,
            run_dir=self._run_dir("rlonly", seed, {})))

    def evaluate(self, ckpt: ck.Checkpoint, seed: int) -> dict:
        """Closed-loop SR/LA on held-out episodes plus teacher-forced token accuracies."""
        key = ("eval", seed, (("ckpt", hashlib.sha256(ck.to_bytes(ckpt)).hexdigest()[:12]),))

        def run():
            ds = self.dataset(seed)
            model = tr.model_from_checkpoint(ckpt)
            no_gen = ckpt.header["train_config"].get("no_gen", False)
            episodes = ds.test_episodes()
            n = min(self.budget.episodes, len(episodes))
            summary, _ = eb.evaluate(eb.ModelPlanner(model, with_image=not no_gen), episodes, n,
                                     seed=seed, horizon=self.budget.horizon)
            held = eb.heldout_accuracy(model, sorted(ds.test, key=lambda t: (t.episode, t.step)))
            return {"SR": summary["SR"]["mean"], "LA": summary["LA"]["mean"], "n_episodes": n, **held}

        return self._memo(key, run)


def release_memory() -> None:
    """Collect garbage and hand freed heap pages back to the OS.

    Long sessions churn large tensors; glibc keeps the freed heap, which grew
    past 4 GB over a full experiment run without it.
    """
    gc.collect()
    name = ctypes.util.find_library("c")
    if name:
        libc = ctypes.CDLL(name)
        if hasattr(libc, "malloc_trim"):
            libc.malloc_trim(0)


def _pretrain_flags(flags: dict) -> dict:
    # rl_only shares the full model's pretraining
    return {k: v for k, v in flags.items() if k != "rl_only" and v}


def final_test_reward(result: tr.PhaseResult) -> float:
    return next(r["test_reward"] for r in reversed(result.metrics) if r.get("test_reward") is not None)


# --------------------------------------------------------------------------
# experiments


def pretrain_competence(lab: Lab, seed: int = 0) -> dict:
    res = lab.pretrain(seed)
    acc = _heldout(lab, res.checkpoint, seed)
    return {"seed": seed, "inverse_action_acc": acc["inverse_action_acc"], "forward_image_acc": acc["forward_image_acc"]}


def _heldout(lab: Lab, ckpt: ck.Checkpoint, seed: int) -> dict:
    ds = lab.dataset(seed)
    return eb.heldout_accuracy(tr.model_from_checkpoint(ckpt), sorted(ds.test, key=lambda t: (t.episode, t.step)))


def rsft_vs_sft(lab: Lab, seeds=(0, 1, 2)) -> list[dict]:
    rows = []
    for s in seeds:
        r, b = lab.rsft(s), lab.sft_continued(s)
        rows.append({
            "seed": s,
            "rsft_test_reward": final_test_reward(r),
            "sft_test_reward": final_test_reward(b),
            "rsft_curve": [(m["step"], m["test_reward"]) for m in r.metrics if m.get("test_reward") is not None],
            "sft_curve": [(m["step"], m["test_reward"]) for m in b.metrics if m.get("test_reward") is not None],
        })
    return rows


def rl_only_collapse(lab: Lab, seeds=(0, 1, 2)) -> list[dict]:
    rows = []
    for s in seeds:
        row = {"seed": s}
        for name, res in (("sft", lab.sft_continued(s)), ("rsft", lab.rsft(s)), ("rl_only", lab.rl_only(s))):
            ev = lab.evaluate(res.checkpoint, s)
            row[name] = {"SR": ev["SR"], "LA": ev["LA"], "plan_action_acc": ev["plan_action_acc"]}
        rows.append(row)
    return rows


def ablations(lab: Lab, seed: int = 0) -> dict:
    out = {}
    for name in ("full",) + ABLATIONS + ("no_gen",):
        flags = {} if name == "full" else {name: True}
        out[name] = lab.evaluate(lab.sft(seed, **flags).checkpoint, seed)
    full = out["full"]["SR"]
    out["sr_drop"] = {a: full - out[a]["SR"] for a in ABLATIONS}
    return out


def write_json(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, Budget):
        return asdict(x)
    raise TypeError(f"cannot serialise {type(x).__name__}")
