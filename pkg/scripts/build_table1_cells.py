"""Build a 2023Q2 cells file whose contact counts equal the published Table 1.

The published matrix only fixes pairwise overlaps, so we solve a small
integer program for how many city pairs each carrier subset serves, then
lay the subsets out on synthetic airport codes. Fares and passengers are
seeded draws within the ingest bounds.

    python scripts/build_table1_cells.py src/mmc_lab/fixtures/cells_2023q2.csv
"""

import itertools
import string
import sys

import numpy as np
import pandas as pd
from scipy.optimize import Bounds, LinearConstraint, milp

from mmc_lab.mmc import table1_ek


def subset_counts(ek: pd.DataFrame) -> dict[tuple[int, ...], int]:
    n = len(ek)
    subsets = [s for r in range(1, n + 1) for s in itertools.combinations(range(n), r)]
    rows, rhs = [], []
    for h in range(n):
        for k in range(h, n):
            rows.append([1.0 if (h in s and k in s) else 0.0 for s in subsets])
            rhs.append(float(ek.iat[h, k]))
    a = np.array(rows)
    b = np.array(rhs)
    res = milp(np.ones(len(subsets)), constraints=LinearConstraint(a, b, b),
               integrality=np.ones(len(subsets)), bounds=Bounds(0, np.inf))
    if res.status != 0:
        raise RuntimeError(res.message)
    x = np.round(res.x).astype(int)
    return {s: int(c) for s, c in zip(subsets, x) if c > 0}


def city_pairs(n: int) -> list[tuple[str, str]]:
    letters = string.ascii_uppercase
    airports = ["".join(t) for t in itertools.product(letters, repeat=3)][:200]
    pairs = [(o, d) for o in airports for d in airports if o != d]
    if n > len(pairs):
        raise ValueError("not enough synthetic airports")
    return pairs[:n]


def build(seed: int = 2023) -> pd.DataFrame:
    ek = table1_ek()
    carriers = list(ek.index)
    counts = subset_counts(ek)
    rng = np.random.default_rng(seed)
    total = sum(counts.values())
    pairs = iter(city_pairs(total))
    rows = []
    for subset in sorted(counts):
        for _ in range(counts[subset]):
            origin, dest = next(pairs)
            for i in subset:
                markets = [bool(rng.integers(2))]
                if rng.random() < 0.1:
                    markets = [False, True]
                for nonstop in markets:
                    rows.append((2023, 2, origin, dest, int(nonstop), carriers[i],
                                 round(float(rng.uniform(60, 600)), 2), int(rng.integers(30, 500))))
    cells = pd.DataFrame(rows, columns=["year", "quarter", "origin", "dest", "nonstop", "carrier",
                                        "mean_fare", "passengers"])
    return cells.sort_values(["year", "quarter", "origin", "dest", "nonstop", "carrier"]).reset_index(drop=True)


if __name__ == "__main__":
    out = sys.argv[1] if len(sys.argv) > 1 else "cells_2023q2.csv"
    build().to_csv(out, index=False, lineterminator="\n")
