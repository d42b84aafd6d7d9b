"""Run the two-task forgetting chain under every strategy and print the RMSE table.

    python scripts/run_forgetting_chain.py --out results/forgetting.json
    python scripts/run_forgetting_chain.py --config my_chain.yaml --groups 100
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import yaml

from trajreplay.config import from_dict
from trajreplay.experiments import ForgettingChainSpec, run_forgetting_chain


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="YAML mapping of ForgettingChainSpec fields")
    ap.add_argument("--groups", type=int, help="vehicle groups per training task")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="write the full JSON result here")
    args = ap.parse_args()
    d = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    for key in ("groups", "seed"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    spec = from_dict(ForgettingChainSpec, d)
    result = run_forgetting_chain(spec)
    s = result["summary"]
    if not s["complete"]:
        print("chain incomplete; see the JSON reports")
    else:
        jt = s["task_a_after_b"]["JT"]
        print(f"{'strategy':8s} {'A after A':>10s} {'A after B':>10s} {'vs JT':>7s} {'single':>8s}")
        for name in spec.strategies:
            after_b = s["task_a_after_b"][name]
            print(f"{name:8s} {s['task_a_after_a'][name]:10.3f} {after_b:10.3f} {after_b / jt:7.2f} "
                  f"{s['single_task'][name]:8.3f}")
    print(f"{result['seconds']:.0f} s")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
