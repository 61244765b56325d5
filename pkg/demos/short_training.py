"""A few minutes of meta-training on RBF tasks, then out-of-range evaluation.

Both the bayes model and the ConvCNP baseline are trained on tasks drawn on
[0, 4] and scored on tasks drawn on [4, 8]. Pass a task count to make the
run longer or shorter.

    python3 demos/short_training.py 200
"""

import sys

import numpy as np

from stationary_np.model import ModelConfig, init_params
from stationary_np.taskgen import OOR_RANGE, generate_tasks
from stationary_np.training import TrainConfig, evaluate_tasks, train


def main(n_tasks=200):
    tasks = generate_tasks("rbf", n_tasks, 1000)
    held_out = generate_tasks("rbf", 64, 5000, x_range=OOR_RANGE, nc=5, nt=50)
    for variant in ("bayes", "convcnp"):
        cfg = ModelConfig(variant=variant)
        params = init_params(cfg, np.random.default_rng(0))
        _, history = train(cfg, TrainConfig(epochs=3), params, tasks,
                           log=lambda rec: print(f"  {variant} epoch {rec.epoch}: loss {rec.loss:.3f}"))
        row = evaluate_tasks(cfg, params, {5: held_out}, np.random.default_rng(1)).row(5)
        print(f"{variant}: out-of-range LL per point {row.mean_ll:.3f} +- {row.stderr:.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 200)
