"""Fill the EM result cache used by the end-to-end acceptance tests.

    python demos/run_em_cells.py            # all cells, skipping current ones
    python demos/run_em_cells.py --list     # show cache status

Each cell takes several minutes on one core; the full set is 45 runs.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

import em_cells  # noqa: E402


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--list", action="store_true")
    args = p.parse_args()
    cells = em_cells.all_cells()
    for c in cells:
        rec = em_cells.load_cell(*c)
        if args.list:
            print(em_cells.cell_key(*c), "-" if rec is None else rec["wrmse"])
            continue
        if rec is not None:
            continue
        t = time.time()
        rec = em_cells.get_cell(*c)
        print(em_cells.cell_key(*c), rec["wrmse"], rec["n_failed"], f"{time.time() - t:.0f}s", flush=True)


if __name__ == "__main__":
    main()
