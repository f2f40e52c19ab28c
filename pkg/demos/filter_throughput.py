"""Lattice filter accuracy and throughput against the exact Gaussian transform.

The E step's cost is one Gaussian convolution of the observation cloud
evaluated at the model points. Exact evaluation is quadratic in cloud size;
the permutohedral lattice splats, blurs, and slices in roughly linear time at
a small approximation cost. This sweep prints both sides of that trade.

Run:  python3 demos/filter_throughput.py
"""

from twistreg.bench import filter_accuracy


def main():
    print(f"{'N=M':>7} {'mass err':>9} {'target err':>11} "
          f"{'lattice':>9} {'brute':>9} {'speedup':>8}")
    for n in (500, 1000, 2000, 5000, 10000):
        r = filter_accuracy(n_model=n, n_obs=n, clouds=5)
        print(f"{n:7d} {r['median_mass_rel_err']:8.2%} "
              f"{r['p95_target_err_sigmas']:11.4f} "
              f"{r['lattice_s'] * 1e3:7.1f}ms {r['bruteforce_s'] * 1e3:7.1f}ms "
              f"{r['speedup']:7.1f}x")
    print("\nmass err: median relative error of the kernel mass column")
    print("target err: p95 pull-target displacement in kernel widths")


if __name__ == "__main__":
    main()
