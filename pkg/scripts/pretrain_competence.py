"""Held-out inverse/forward dynamics accuracy after joint pretraining."""
from __future__ import annotations

import json

from _common import lab_from, parser
from visplan.experiments import pretrain_competence, write_json

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = p.parse_args()
    lab = lab_from(args)
    rows = [pretrain_competence(lab, s) for s in args.seeds]
    write_json(f"{args.out}/pretrain_competence.json", {"budget": lab.budget, "rows": rows})
    print(json.dumps(rows, indent=2))
