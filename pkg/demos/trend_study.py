"""Run the toy-scale topology/tap/landmark/fusion comparison.

    python3 demos/trend_study.py            # five seeds, about 17 minutes
    python3 demos/trend_study.py 0 1        # chosen seeds only
"""
import logging
import sys

from mtaffect.study import StudyConfig, run_study

logging.basicConfig(level=logging.INFO, format="%(message)s")
logging.getLogger("mtaffect.geometry").setLevel(logging.ERROR)

seeds = tuple(int(s) for s in sys.argv[1:]) or StudyConfig().seeds
per_seed, findings = run_study(StudyConfig(seeds=seeds))

variants = sorted(per_seed[0])
print(f"\n{'variant':<16}" + "".join(f"seed {s:<5}" for s in seeds))
for v in variants:
    print(f"{v:<16}" + "".join(f"{r[v]['mean']:<10.3f}" for r in per_seed))
print()
for f in findings:
    print(f.line())
