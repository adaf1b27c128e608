"""Final test-set dynamic reward of RSFT against SFT with the same seeds and step budget."""
from __future__ import annotations

from _common import lab_from, parser
from visplan.experiments import rsft_vs_sft, write_json

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    lab = lab_from(args)
    rows = rsft_vs_sft(lab, args.seeds)
    write_json(f"{args.out}/rsft_vs_sft.json", {"budget": lab.budget, "rows": rows})
    for r in rows:
        print(f"seed {r['seed']}: rsft {r['rsft_test_reward']:.4f}  sft {r['sft_test_reward']:.4f}")
