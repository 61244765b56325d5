"""Path-wise posterior draws against the exact GP posterior.

A handful of context points is conditioned on with the expected kernel of a
four-kernel bank. Two thousand path-wise draws are summarized and compared
with the Cholesky posterior on a query grid.

    python3 demos/pathwise_posterior.py
"""

import numpy as np

from stationary_np.kernels import make_kernel_bank, mixture_kernel_eval
from stationary_np.rff import empirical_posterior_stats, exact_gp_posterior, sample_posterior_functions


def main():
    rng = np.random.default_rng(0)
    bank = make_kernel_bank(4, 4.0)
    probs = np.array([0.1, 0.2, 0.3, 0.4])
    xc = rng.uniform(0.0, 2.0, 6)
    yc = np.sin(3.0 * xc)
    xq = np.linspace(0.0, 2.0, 9)

    draws = sample_posterior_functions(xc, yc, bank, probs, 2000, 10, rng, xq)
    mean, var = empirical_posterior_stats(draws)
    exact_mean, cov = exact_gp_posterior(xc, yc, lambda t: mixture_kernel_eval(bank, probs, t),
                                         bank.sigma_eps, xq)

    print(f"{'x':>6} {'mean':>9} {'exact':>9} {'var':>9} {'exact':>9}")
    for row in zip(xq, mean, exact_mean, var, np.diag(cov)):
        print("{:6.2f} {:9.4f} {:9.4f} {:9.4f} {:9.4f}".format(*row))


if __name__ == "__main__":
    main()
