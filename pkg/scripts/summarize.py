"""Print seed-averaged means per cell for every ablation CSV under a run directory."""

import argparse
import csv
from collections import defaultdict
from pathlib import Path
from statistics import mean, pstdev


def summarize(path: Path) -> list[str]:
    groups = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        extra = [c for c in reader.fieldnames if c not in ("fingerprint", "seed", "cell", "metric", "value")]
        for row in reader:
            key = (row["cell"], *(row[c] for c in extra))
            groups[key].append(float(row["value"]))
    lines = []
    for key, vals in groups.items():
        label = " ".join(f"{c}={v}" for c, v in zip(extra, key[1:]))
        lines.append(f"  {key[0]:<28} {label:<28} {mean(vals):.4f} +/- {pstdev(vals):.4f} (n={len(vals)})")
    return lines


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("root", nargs="?", default="runs")
    args = ap.parse_args()
    for path in sorted(Path(args.root).glob("*/*.csv")):
        print(path)
        print("\n".join(summarize(path)))


if __name__ == "__main__":
    main()
