"""
Pass@k from rollout counts
==========================

Given n sampled solutions per problem of which c are correct, estimate the
chance that k random picks contain at least one correct solution.
"""

import itertools
import json
import tempfile
from fractions import Fraction
from pathlib import Path

from shadowgraft import load_records, pass_at_k, summarize

# 10 rollouts, 3 correct, 4 picks: 1 - C(7,4)/C(10,4) = 5/6
print(pass_at_k(10, 3, 4))

# the same number by brute force over every 4-subset
subsets = list(itertools.combinations(range(10), 4))
print(Fraction(sum(any(i < 3 for i in s) for s in subsets), len(subsets)))

# many problems at once, from newline-delimited JSON
path = Path(tempfile.mkdtemp()) / "rollouts.ndjson"
path.write_text("\n".join(json.dumps({"problem_id": f"p{i}", "n": 16, "c": c})
                          for i, c in enumerate([0, 1, 2, 5, 16])) + "\n")
summary = summarize(load_records(path), [1, 2, 4, 8, 16])
for k in summary.k_values:
    print(f"pass@{k:<2d} {summary.estimates[k]:.4f}")
