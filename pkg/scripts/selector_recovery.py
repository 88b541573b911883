"""Plant one aligned kv unit per seed and check that calibration selects it."""
import argparse

from latentbank import BankSpec, ModelConfig, SelectorConfig, build_bank, calibrate, synth_model
from latentbank.harness import plant_aligned_unit

PROMPTS = [list(b"hello there"), list(b"a b c"), list(b"steer")]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--strength", type=float, default=3.0)
    p.add_argument("--steps", type=int, default=4)
    args = p.parse_args()

    cfg = ModelConfig(n_layers=4, d_model=64, n_q_heads=8, n_kv_heads=4, head_dim=8)
    sites = [(l, u) for l in range(cfg.n_layers) for u in range(cfg.n_kv_heads)]
    spec = BankSpec("t", "target", "be kind and brief")
    hits = 0
    for seed in range(args.seeds):
        planted = (seed % cfg.n_layers, (seed * 3 + 1) % cfg.n_kv_heads)
        model = plant_aligned_unit(synth_model(cfg, seed), *planted, strength=args.strength, seed=seed)
        art = calibrate(model, PROMPTS, build_bank(model, spec, sites), None,
                        SelectorConfig(k=1, m=1, steps=args.steps))
        got = [(l, u) for l in art.layers for u in art.units[l]]
        ranked = sorted(art.unit_scores.values(), reverse=True)
        hits += got == [planted]
        print(f"seed {seed:2d} planted {planted} selected {got} score gap {ranked[0] - ranked[1]:.3f}")
    print(f"recovered {hits}/{args.seeds}")


if __name__ == "__main__":
    main()
