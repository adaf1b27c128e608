"""Every directional experiment with one shared set of trained models."""
from __future__ import annotations

import json

from _common import lab_from, parser
from visplan.experiments import ablations, pretrain_competence, rl_only_collapse, rsft_vs_sft, write_json

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    lab = lab_from(args)
    results = {"budget": lab.budget}
    results["pretrain_competence"] = [pretrain_competence(lab, s) for s in args.seeds]
    print(json.dumps(results["pretrain_competence"]), flush=True)
    results["rsft_vs_sft"] = rsft_vs_sft(lab, args.seeds)
    print(json.dumps([{k: r[k] for k in ("seed", "rsft_test_reward", "sft_test_reward")} for r in results["rsft_vs_sft"]]), flush=True)
    results["rl_only_collapse"] = rl_only_collapse(lab, args.seeds)
    print(json.dumps(results["rl_only_collapse"]), flush=True)
    results["ablations"] = ablations(lab, args.seeds[0])
    print(json.dumps(results["ablations"]), flush=True)
    write_json(f"{args.out}/all.json", results)
