"""Forward-call counts and wall clock of one-step vs autoregressive image sampling."""
from __future__ import annotations

import argparse
import dataclasses
from pathlib import Path

from visplan import evalbench as eb
from visplan import genmodel as gm
from visplan import gridworld as gw

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results/bench.md")
    args = p.parse_args()
    one = gm.init_params(gm.ModelConfig(), args.seed)
    ar = gm.init_params(dataclasses.replace(one.cfg, variant=gm.Variant.AR.value), args.seed)
    contexts = gw.sample_dataset(args.seed, 4 * args.trials).all
    _, _, report = eb.bench_sampling(one, ar, contexts, args.k, args.trials, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report)
    print(report, end="")
