"""Shared argument handling for the experiment scripts."""
from __future__ import annotations

import argparse
import dataclasses

from visplan.experiments import Budget, Lab


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    for f in dataclasses.fields(Budget):
        p.add_argument(f"--{f.name.replace('_', '-')}", type=int, default=f.default)
    p.add_argument("--out", default="results", help="directory for JSON results and run directories")
    p.add_argument("--keep-runs", action="store_true", help="write metrics/checkpoints for every phase")
    return p


def lab_from(args) -> Lab:
    budget = Budget(**{f.name: getattr(args, f.name) for f in dataclasses.fields(Budget)})
    return Lab(budget, out_dir=f"{args.out}/runs" if args.keep_runs else None)
