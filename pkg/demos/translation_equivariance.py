"""Shifting a context set shifts the predictions.

An untrained ConvCNP-style model is evaluated on a context set and on the
same set moved by a whole number of grid cells. The predictive means agree
on interior targets, while the latent categorical of the bayes variant
ignores arbitrary real shifts.

    python3 demos/translation_equivariance.py
"""

import numpy as np

from stationary_np.latent import pnn_forward
from stationary_np.model import ModelConfig, bank_from_params, init_params, predict


def main():
    rng = np.random.default_rng(1)
    xc = rng.uniform(0.0, 2.0, 8)
    yc = np.sin(3.0 * xc)
    xt = np.linspace(0.5, 1.5, 5)

    cfg = ModelConfig(variant="convcnp", points_per_unit=32)
    params = init_params(cfg, rng)
    shift = 40 / cfg.points_per_unit
    a = predict(cfg, params, xc, yc, xt, rng).mu[0].data[0]
    b = predict(cfg, params, xc + shift, yc, xt + shift, rng).mu[0].data[0]
    print("convcnp mean at targets:        ", np.round(a, 6))
    print("same after shifting by", shift, ":", np.round(b, 6))

    bayes = ModelConfig()
    bp = init_params(bayes, rng)
    bank = bank_from_params(bayes, bp)
    p0 = pnn_forward(bayes.pnn_config(), bp, [(xc, yc)], bank).data
    p1 = pnn_forward(bayes.pnn_config(), bp, [(xc + 1.7, yc)], bank).data
    print("p_nn probabilities:", np.round(p0[0], 4), "max change after shift 1.7:",
          f"{np.abs(p0 - p1).max():.1e}")


if __name__ == "__main__":
    main()
