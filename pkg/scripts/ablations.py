"""Closed-loop SR / LA of the full model and the single-component ablations."""
from __future__ import annotations

from _common import lab_from, parser
from visplan.experiments import ABLATIONS, ablations, write_json

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    lab = lab_from(args)
    out = ablations(lab, args.seed)
    write_json(f"{args.out}/ablations.json", {"budget": lab.budget, "seed": args.seed, **out})
    for name in ("full",) + ABLATIONS + ("no_gen",):
        print(f"{name:8s} SR {out[name]['SR']:.3f}  LA {out[name]['LA']:.3f}")
