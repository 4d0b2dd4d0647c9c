"""Certify a small ReLU classifier against l-inf perturbations of growing radius.

For each radius the script prints the smallest certified margin lower bound
next to the smallest margin found by searching the ball. The certified value
never exceeds the searched one; once it drops below zero the verdict flips.
"""

import numpy as np

from splitverify import Affine, LpBall, Network, ReLU, SolverConfig
from splitverify.driver import RobustnessQuery, certify_robustness, empirical_upper_bound, margin_objectives


def make_classifier(rng, dims=(4, 16, 16, 3)):
    layers = []
    for i in range(len(dims) - 1):
        W = rng.standard_normal((dims[i + 1], dims[i])) / np.sqrt(dims[i])
        layers.append(Affine(W, 0.1 * rng.standard_normal(dims[i + 1])))
        if i < len(dims) - 2:
            layers.append(ReLU((dims[i + 1],)))
    return Network(layers)


def main():
    rng = np.random.default_rng(0)
    net = make_classifier(rng)
    x = rng.standard_normal(4)
    true = int(np.argmax(net.propagate(x)[-1]))
    cfg = SolverConfig(eps_abs=1e-5, eps_rel=1e-4)
    C, _ = margin_objectives(net.output_dim, true)
    print(f"nominal class {true}; logits {np.round(net.propagate(x)[-1], 3)}")
    print(f"{'radius':>8} {'certified':>12} {'searched':>12} {'iters':>7}  verdict")
    for eps in (0.01, 0.05, 0.1, 0.2, 0.4):
        X = LpBall(x, eps)
        rep = certify_robustness(RobustnessQuery(net, x, true, X, cfg))
        searched = min(empirical_upper_bound(net, X, C[:, j], samples=2000) for j in range(C.shape[1]))
        print(f"{eps:8.2f} {rep.lower_bounds.min():12.5f} {searched:12.5f} {max(rep.iters):7d}  {rep.verdict}")


if __name__ == "__main__":
    main()
