"""Quick sanity check: read the figure series and print their growth ratios.

Run: python scripts/sanity_check.py [output_dir]
"""
import sys
from pathlib import Path

import pandas as pd

ROOT = Path(__file__).resolve().parents[1]


def ratio(series: pd.DataFrame, late: int, early: int) -> float:
    return series["median"].iloc[late] / max(series["median"].iloc[early], 1e-300)


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else ROOT / "outputs"
    fig1 = sorted((out / "figure1").glob("series_*.csv"))
    fig2 = sorted((out / "figure2").glob("series_*.csv"))
    if not fig1 and not fig2:
        print(f"Error: no series found under {out}; run the figure1/figure2 steps first")
        raise SystemExit(1)

    print(f"\n{'='*80}")
    print("FIGURE 1: median |X_t| by system")
    print(f"{'='*80}")
    for path in fig1:
        s = pd.read_csv(path)
        horizon = len(s) - 1
        print(f"  {path.stem[7:]:<14} final median {s['median'].iloc[-1]:9.3f}   "
              f"p90 {s['p90'].iloc[-1]:9.3f}   late/mid {ratio(s, horizon, horizon // 2):6.3f}")

    print(f"\n{'='*80}")
    print("FIGURE 2: median |X_t| by initial state")
    print(f"{'='*80}")
    finals = {}
    for path in fig2:
        s = pd.read_csv(path)
        finals[path.stem[7:]] = s["median"].iloc[-1]
        print(f"  {path.stem[7:]:<14} start {s['median'].iloc[0]:8.3f}   final {finals[path.stem[7:]]:8.3f}")
    if finals:
        spread = max(finals.values()) / max(min(finals.values()), 1e-300)
        print(f"\n  final median spread (max/min): {spread:.3f}")


if __name__ == "__main__":
    main()
