"""Print the latency / users / energy table across partition points.

Run:  python3 demos/perf_table.py
"""
import tempfile

from privatar.cli import main

with tempfile.TemporaryDirectory() as out:
    main(["--out", out, "perf"])
    print(open(f"{out}/perf.csv").read())
