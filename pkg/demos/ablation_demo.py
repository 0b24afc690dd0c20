"""Held-out quality as a function of how many views feed the seed cloud.

    python demos/ablation_demo.py [--seed 42] [--budgets 4,8,all] [--steps 1000]

Every seed cloud is trained with the same final schedule on all training
views, so only the initialization differs between rows.
"""

import argparse

from splatseed.evaluate import PipelineSettings, init_strength_experiment, reports_to_csv
from splatseed.frequency_sfm import SfmConfig
from splatseed.splat import TrainConfig
from splatseed.synth import generate_scene, standard_spec


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--budgets", default="4,8,all")
    ap.add_argument("--steps", type=int, default=1000)
    args = ap.parse_args()

    budgets = [b if b == "all" else int(b) for b in args.budgets.split(",")]
    scene = generate_scene(standard_spec(), seed=args.seed)
    s = PipelineSettings(
        sfm=SfmConfig(max_corners=150),
        light=TrainConfig(seed=args.seed),
        final=TrainConfig(max_steps=args.steps, downsample_factor=2, plateau_window=10**9, seed=args.seed),
    )
    rows = init_strength_experiment(scene, budgets, s)
    print(reports_to_csv(rows, [f"seed {args.seed}", f"final steps {args.steps}"]), end="")


if __name__ == "__main__":
    main()
