"""SR / LA of RL-only training against SFT and RSFT."""
from __future__ import annotations

from _common import lab_from, parser
from visplan.experiments import rl_only_collapse, write_json

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    lab = lab_from(args)
    rows = rl_only_collapse(lab, args.seeds)
    write_json(f"{args.out}/rl_only_collapse.json", {"budget": lab.budget, "rows": rows})
    for r in rows:
        print(f"seed {r['seed']}: " + "  ".join(
            f"{k} SR {r[k]['SR']:.3f} LA {r[k]['LA']:.3f}" for k in ("sft", "rsft", "rl_only")))
