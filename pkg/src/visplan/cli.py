"""Command-line entry point.

Subcommands: gen-data, pretrain, sft, rsft, eval, bench, score, render, plot.
Run directories live under ``$VISPLAN_RUNS`` (default ``./runs``) unless
``--run-dir`` is given. Config fields are overridable by dotted flags such
as ``--train.lr 3e-4``.
"""
from __future__ import annotations

import argparse
import json
import sys
import dataclasses
from pathlib import Path

from . import checkpoint as ck
from . import config as cfgmod
from . import dynreward as dr
from . import evalbench as eb
from . import genmodel as gm
from . import gridworld as gw
from . import trainer as tr


class CliError(Exception):
    pass


def _dataset(data_dir) -> gw.Dataset:
    d = Path(data_dir)
    paths = d / "train.jsonl", d / "test.jsonl"
    for p in paths:
        if not p.exists():
            raise CliError(f"missing dataset file {p}")
    return gw.Dataset(gw.read_jsonl(paths[0]), gw.read_jsonl(paths[1]))


def _run_cfg(args, extra) -> cfgmod.RunConfig:
    overrides = cfgmod.parse_overrides(extra)
    for key, attr in (("seed", "seed"), ("train.lam", "lam"), ("data.dir", "data")):
        if getattr(args, attr, None) is not None:
            overrides[key] = getattr(args, attr)
    if getattr(args, "rl_only", False):
        overrides["train.rl_only"] = True
    return cfgmod.load(args.config, overrides)


def _run_dir(args, rc: cfgmod.RunConfig, default: str) -> Path:
    if getattr(args, "run_dir", None):
        return Path(args.run_dir)
    if rc.run_dir:
        return Path(rc.run_dir)
    return tr.run_root() / default


def _echo(run_dir: Path, rc: cfgmod.RunConfig) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(cfgmod.dump(rc))


def _source(args, phase: str) -> ck.Checkpoint | None:
    path = args.resume or getattr(args, "init", None)
    if path is None:
        return None
    src = ck.load(path)
    if args.resume and src.header["phase"] != phase:
        raise CliError(f"--resume expects a {phase} checkpoint, got {src.header['phase']!r}")
    return src


def _summarise(result: tr.PhaseResult, run_dir: Path) -> None:
    last = result.metrics[-1] if result.metrics else {}
    print(json.dumps({
        "run_dir": str(run_dir),
        "phase": result.checkpoint.header["phase"],
        "step": result.checkpoint.header["phase_step"],
        "loss_total": last.get("loss_total"),
        "test_reward": next((r["test_reward"] for r in reversed(result.metrics) if r.get("test_reward") is not None), None),
    }))


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, extra) -> int:
    rc = _run_cfg(args, extra)
    count = args.count if args.count is not None else rc.data.count
    out = Path(args.out or rc.data.dir)
    ds = gw.sample_dataset(rc.seed, count, size=rc.data.size, test_fraction=rc.data.test_fraction)
    out.mkdir(parents=True, exist_ok=True)
    gw.write_jsonl(out / "train.jsonl", ds.train)
    gw.write_jsonl(out / "test.jsonl", ds.test)
    n_ep = lambda ts: len({t.episode for t in ts})  # noqa: E731
    print(json.dumps({"train": len(ds.train), "test": len(ds.test),
                      "train_episodes": n_ep(ds.train), "test_episodes": n_ep(ds.test), "dir": str(out)}))
    return 0


def cmd_pretrain(args, extra) -> int:
    rc = _run_cfg(args, extra)
    run_dir = _run_dir(args, rc, f"pretrain_s{rc.seed}")
    ds = _dataset(rc.data.dir)
    _echo(run_dir, rc)
    src = _source(args, "pretrain")
    result = tr.pretrain(rc.train, ds, source=src, model_cfg=rc.model, run_dir=run_dir)
    _summarise(result, run_dir)
    return 0


def cmd_sft(args, extra) -> int:
    rc = _run_cfg(args, extra)
    run_dir = _run_dir(args, rc, f"sft_s{rc.seed}")
    ds = _dataset(rc.data.dir)
    src = _source(args, "sft")
    if src is None:
        raise CliError("sft needs --init (a pretrained checkpoint) or --resume")
    _echo(run_dir, rc)
    result = tr.sft_phase(rc.train, src, ds, run_dir=run_dir)
    _summarise(result, run_dir)
    return 0


def cmd_rsft(args, extra) -> int:
    rc = _run_cfg(args, extra)
    run_dir = _run_dir(args, rc, f"{'rlonly' if rc.train.rl_only else 'rsft'}_s{rc.seed}")
    ds = _dataset(rc.data.dir)
    src = _source(args, "rsft")
    if src is None:
        raise CliError("rsft needs --init (an SFT checkpoint, or a pretrained one with --rl-only) or --resume")
    _echo(run_dir, rc)
    reward_fn = dr.TransitionScorer(rc.reward) if rc.train.reward == "dynamic" else tr.make_reward_fn(rc.train)
    result = tr.rsft_phase(rc.train, src, ds, reward_fn=reward_fn, run_dir=run_dir)
    _summarise(result, run_dir)
    return 0


def _planner(ckpt: ck.Checkpoint) -> eb.ModelPlanner:
    model = tr.model_from_checkpoint(ckpt)
    no_gen = ckpt.header.get("train_config", {}).get("no_gen", False)
    return eb.ModelPlanner(model, with_image=not no_gen)


def cmd_eval(args, extra) -> int:
    if args.episodes < eb.MIN_EPISODES:
        raise CliError(f"--episodes must be at least {eb.MIN_EPISODES}")
    rc = _run_cfg(args, extra)
    ds = _dataset(rc.data.dir)
    ckpt = ck.load(args.ckpt)
    summary, results = eb.evaluate(_planner(ckpt), ds.test_episodes(), args.episodes, seed=rc.seed, horizon=args.horizon)
    held = eb.heldout_accuracy(tr.model_from_checkpoint(ckpt), sorted(ds.test, key=lambda t: (t.episode, t.step)))
    summary["heldout"] = held
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "episodes.csv").write_text(eb.episodes_csv(results))
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_bench(args, extra) -> int:
    rc = _run_cfg(args, extra)
    if args.ckpt:
        one = tr.model_from_checkpoint(ck.load(args.ckpt))
    else:
        one = gm.init_params(rc.model, rc.seed)
    if args.ar_ckpt:
        ar = tr.model_from_checkpoint(ck.load(args.ar_ckpt))
    else:
        ar = gm.init_params(dataclasses.replace(one.cfg, variant=gm.Variant.AR.value), rc.seed)
    contexts = gw.sample_dataset(rc.seed, max(args.trials, 1) * 4).all
    rec_one, rec_ar, report = eb.bench_sampling(one, ar, contexts, args.k, args.trials, rc.seed)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(report)
    print(report, end="")
    print(json.dumps({"one_step": rec_one.to_json(), "autoregressive": rec_ar.to_json()}))
    return 0


def cmd_score(args, extra) -> int:
    rc = _run_cfg(args, extra)
    x_t, x_gen, x_real = (gw.read_ppm(p) for p in (args.x_t, args.x_gen, args.x_real))
    detail = dr.dynamic_reward_detail(x_t, x_gen, x_real, rc.reward)
    print(json.dumps(detail.to_json()))
    return 0


def cmd_render(args, extra) -> int:
    transitions = gw.read_jsonl(args.data)
    if not 0 <= args.index < len(transitions):
        raise CliError(f"index {args.index} out of range for {len(transitions)} transitions")
    t = transitions[args.index]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gw.write_ppm(out / "x_t.ppm", gw.render(t.x_t))
    gw.write_ppm(out / "x_t1.ppm", gw.render(t.x_t1))
    print(json.dumps({"instruction": t.task.instruction, "action": t.action.text, "dir": str(out)}))
    return 0


def cmd_plot(args, extra) -> int:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "visplan"

    rows = tr.read_metrics(args.metrics)
    out = Path(args.out) if args.out else Path(args.metrics).parent / "plots"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for col in tr.METRIC_COLUMNS[2:]:
        series = {}
        for r in rows:
            if r[col] != "":
                series.setdefault(r["phase"], ([], []))
                series[r["phase"]][0].append(int(r["step"]))
                series[r["phase"]][1].append(float(r[col]))
        if not series:
            continue
        fig, ax = plt.subplots(figsize=(5, 3))
        for phase, (xs, ys) in sorted(series.items()):
            ax.plot(xs, ys, label=phase, marker="o" if len(xs) < 50 else None, markersize=3)
        ax.set_xlabel("step")
        ax.set_ylabel(col)
        ax.legend()
        fig.tight_layout()
        path = out / f"{col}.svg"
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(str(path))
    print(json.dumps({"plots": written}))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="visplan", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--seed", type=int)
        if data:
            sp.add_argument("--data", help="dataset directory with train.jsonl / test.jsonl")
        return sp

    sp = common(sub.add_parser("gen-data", help="generate expert transitions"), data=False)
    sp.add_argument("--count", type=int, help="number of transitions")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_gen_data)

    for name, func, help_ in (("pretrain", cmd_pretrain, "joint inverse/forward dynamics pretraining"),
                              ("sft", cmd_sft, "supervised fine-tuning"),
                              ("rsft", cmd_rsft, "reinforced supervised fine-tuning")):
        sp = common(sub.add_parser(name, help=help_))
        sp.add_argument("--run-dir")
        sp.add_argument("--resume", help="unfinished checkpoint of this phase")
        if name != "pretrain":
            sp.add_argument("--init", help="checkpoint to start from")
        if name == "rsft":
            sp.add_argument("--lambda", dest="lam", type=float, help="RL loss weight")
            sp.add_argument("--rl-only", action="store_true", help="drop the likelihood term")
        sp.set_defaults(func=func)

    sp = common(sub.add_parser("eval", help="closed-loop evaluation"))
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--episodes", type=int, default=eb.MIN_EPISODES)
    sp.add_argument("--horizon", type=int, default=eb.HORIZON)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("bench", help="one-step vs autoregressive sampling benchmark"), data=False)
    sp.add_argument("--ckpt", help="one-step checkpoint (default: freshly initialised model)")
    sp.add_argument("--ar-ckpt", help="autoregressive checkpoint (default: freshly initialised)")
    sp.add_argument("--k", type=int, default=8)
    sp.add_argument("--trials", type=int, default=1)
    sp.add_argument("--out", help="write the markdown report here")
    sp.set_defaults(func=cmd_bench)

    sp = common(sub.add_parser("score", help="dynamic reward of three PPM images"), data=False)
    sp.add_argument("x_t")
    sp.add_argument("x_gen")
    sp.add_argument("x_real")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("render", help="render one dataset transition to PPM files")
    sp.add_argument("data", help="JSONL dataset file")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("plot", help="one SVG per metric series")
    sp.add_argument("metrics", help="metrics.csv")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.func in (cmd_render, cmd_plot):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        return args.func(args, extra)
    except (CliError, cfgmod.ConfigError, eb.TooFewEpisodes, ck.CorruptCheckpoint, OSError, ValueError,
            tr.NonFiniteLoss) as exc:
        print(f"visplan {args.command}: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
