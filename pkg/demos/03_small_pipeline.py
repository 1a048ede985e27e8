"""End-to-end run at toy scale: layouts, data, five DT variants, evaluation, report.

Takes a few minutes on one core. The same stages are available from the shell:

    cfdt run --config configs/smoke.cfg --out runs/smoke
"""
import sys
import tempfile
from pathlib import Path

from cfdt import experiment as ex

root = Path(__file__).resolve().parents[1]
cfg = ex.load_config(root / "configs" / "smoke.cfg")
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="cfdt-"))

report = ex.run_all(cfg, out)
print(f"run directory: {out}")
for row in report["agents"]:
    print(f"{row['agent']:<11} goal rate {row['goal_rate']:.2f}  mean return {row['mean_return']:+.3f}")
for check in report["checks"]:
    print(("pass" if check["passed"] else "fail"), check["name"])
