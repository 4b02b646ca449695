#!/usr/bin/env python3
"""Recount acceptance lengths from per-round event logs and compare them with
acceptance.csv. Exits 1 on any mismatch."""

import argparse
import csv
import json
import pathlib
import sys
from collections import defaultdict


def recount(seed_dir):
    accepted = defaultdict(list)
    for path in sorted((seed_dir / "events").glob("*.jsonl")):
        with open(path) as f:
            for line in f:
                ev = json.loads(line)
                accepted[(ev["variant"], ev["condition"])].append(ev["accepted"])
    return accepted


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("seed_dirs", nargs="+", type=pathlib.Path)
    ap.add_argument("--tol", type=float, default=1e-9)
    args = ap.parse_args()

    failures = 0
    checked = 0
    for d in args.seed_dirs:
        counts = recount(d)
        with open(d / "acceptance.csv") as f:
            rows = list(csv.DictReader(f))
        if len(rows) != len(counts):
            print(f"{d}: {len(rows)} table rows but {len(counts)} event streams")
            failures += 1
        for row in rows:
            key = (row["variant"], row["condition"])
            acc = counts.get(key, [])
            k = int(row["k"])
            if len(acc) != int(row["rounds"]):
                print(f"{d} {key}: rounds {row['rounds']} vs {len(acc)} events")
                failures += 1
                continue
            tau = sum(acc) / len(acc) if acc else 0.0
            if abs(tau - float(row["tau_excl"])) > args.tol or abs(tau + 1 - float(row["tau_incl"])) > args.tol:
                print(f"{d} {key}: tau {row['tau_excl']} vs recount {tau}")
                failures += 1
            for j in range(1, k + 1):
                reached = sum(a >= j - 1 for a in acc)
                passed = sum(a >= j for a in acc)
                cell = row[f"c{j}"]
                if reached == 0:
                    ok = cell == ""
                else:
                    ok = cell != "" and abs(float(cell) - passed / reached) <= args.tol
                if not ok:
                    print(f"{d} {key}: c{j} {cell!r} vs recount {passed}/{reached}")
                    failures += 1
            checked += 1
    print(f"recount: {checked} cells checked, {failures} mismatches")
    return 1 if failures or checked == 0 else 0


if __name__ == "__main__":
    sys.exit(main())
