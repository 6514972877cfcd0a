"""Synthetic raw CD4 and injection records for pipeline tests."""
from __future__ import annotations

import csv

import numpy as np


def write_raw_records(directory, n_subjects=120, seed=0):
    """Write cd4.csv, injections.csv and baseline.csv; return their paths."""
    rng = np.random.default_rng(seed)
    cd4_rows, inj_rows, base_rows = [], [], []
    for i in range(n_subjects):
        sid = f"P{i:03d}"
        sex = int(rng.random() < 0.6)
        age = float(rng.integers(20, 65))
        base_rows.append((sid, sex, age))
        day, level = 0.0, float(rng.uniform(300, 540))
        boost = 0.0
        for visit in range(6):
            if visit > 0:
                day += float(rng.integers(80, 100))
                level = max(60.0, level + boost + rng.normal(0, 25))
                boost *= 0.3
            cd4_rows.append((sid, day, round(level, 1)))
            if visit < 5 and level < 550 and rng.random() < 0.45:
                k = int(rng.integers(1, 4))
                inj_rows.append((sid, day, k))
                boost = rng.uniform(10, 40) * k * (1.5 if sex else 1.0)
    paths = {name: directory / f"{name}.csv" for name in ("cd4", "injections", "baseline")}
    for name, header, rows in (("cd4", ("subject_id", "day", "cd4"), cd4_rows),
                               ("injections", ("subject_id", "day", "n_injections"), inj_rows),
                               ("baseline", ("subject_id", "Sex", "Age"), base_rows)):
        with open(paths[name], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    return paths
