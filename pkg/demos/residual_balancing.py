"""Effect of adaptive penalty updates on iteration counts.

The same LP relaxation is solved from several initial penalties, once with
a fixed penalty and once with residual balancing. The optimum does not
depend on the penalty, so only the iteration counts differ. Balancing is
not uniformly faster: from a small penalty the fixed run can win, but a
badly chosen large penalty is recovered from within a few updates.
"""

import numpy as np

from splitverify import Affine, LpBall, Network, ReLU, SolverConfig, linear_bound_propagate, solve


def main():
    rng = np.random.default_rng(0)
    net = Network([
        Affine(rng.standard_normal((4, 5)) / np.sqrt(5), 0.1 * rng.standard_normal(4)),
        ReLU((4,)),
        Affine(rng.standard_normal((3, 4)) / 2.0, 0.1 * rng.standard_normal(3)),
    ])
    X = LpBall(rng.standard_normal(5), 0.2)
    bounds = linear_bound_propagate(net, X)
    c = rng.standard_normal(3)
    print(f"{'rho0':>6} {'fixed iters':>12} {'balanced iters':>15} {'objective':>12}")
    for rho0 in (0.01, 0.1, 1.0, 10.0, 100.0):
        base = SolverConfig(rho0=rho0, eps_abs=1e-6, eps_rel=1e-5, max_iter=50_000)
        fixed = solve(net, X, bounds, c, base.replace(balancing=False))
        bal = solve(net, X, bounds, c, base)
        print(f"{rho0:6g} {fixed.iters[0]:12d} {bal.iters[0]:15d} {bal.lower_bound[0]:12.6f}")
        changes = ", ".join(f"{it}:{r:g}" for it, r in bal.rho_trace[0][1:6])
        print(f"{'':6} penalty changes (iteration:rho) {changes or 'none'}")


if __name__ == "__main__":
    main()
