"""Steer a synthetic model toward a marker byte and report the per-prompt logit shift.

    python3 scripts/marker_experiment.py --lambda-plus 4 --prompts 10
"""
import argparse

import numpy as np

from latentbank import BankSpec, ModelConfig, SteeringPlan, synth_model
from latentbank.harness import MarkerTask, build_marker_bank, run_marker_experiment
from latentbank.routing import RoutingGains


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seed", type=int, default=5)
    p.add_argument("--prompts", type=int, default=10)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--marker", default="Z")
    p.add_argument("--lambda-plus", type=float, default=4.0)
    p.add_argument("--layer", type=int, default=None, help="steered layer (default: last)")
    p.add_argument("--mode", default="mixture", choices=("mixture", "augmented", "sidebank"))
    args = p.parse_args()

    cfg = ModelConfig(n_layers=4, d_model=64, n_q_heads=8, n_kv_heads=2, head_dim=8)
    model = synth_model(cfg, args.seed)
    rng = np.random.default_rng(args.seed + 4)
    prompts = tuple(tuple(int(x) for x in rng.integers(32, 127, size=int(rng.integers(4, 12))))
                    for _ in range(args.prompts))
    task = MarkerTask(ord(args.marker), BankSpec("marker", "target", f"Always answer with {args.marker}."),
                      prompts, args.steps)
    layer = cfg.n_layers - 1 if args.layer is None else args.layer
    units = tuple(range(cfg.n_kv_heads))
    bank = build_marker_bank(model, task, [(layer, u) for u in units])
    plan = SteeringPlan({layer: units}, (bank,), RoutingGains(lambda_plus=args.lambda_plus), args.mode)
    res = run_marker_experiment(model, plan, task)

    for i, d in enumerate(res.mean_deltas):
        print(f"prompt {i:2d}  mean marker-logit delta {d:+.4f}")
    positive = sum(d > 0 for d in res.mean_deltas)
    print(f"positive on {positive}/{len(prompts)} prompts, mean {res.mean_delta:+.4f}")
    print("mean masses: " + ", ".join(f"{k}={v:.3f}" for k, v in res.mean_masses.items()))
    print(f"locality {'ok' if res.locality_ok else 'VIOLATED'}, {res.runtime:.2f}s")


if __name__ == "__main__":
    main()
