"""Partial-distilled sweep on the fixture: how much drift routing energy is
removed at each dominance quantile, and how far each ablated model sits from
the source and the target."""
import argparse

import numpy as np

from casa import CasaConfig
from casa.ablation import partial_distilled
from casa.fixtures import make_fixture


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--q", type=float, nargs="+", default=[0.0, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    args = p.parse_args()

    fx = make_fixture(seed=args.seed)
    cfg = CasaConfig()
    print(f"{'q':>5s} {'removed':>9s} {'||W_q - W_s||':>14s} {'||W_q - W_t||':>14s}")
    for q in args.q:
        rows = []
        W_q = partial_distilled(fx.source, fx.target, cfg, q, report=rows)
        removed = sum(r["removed_energy"] for r in rows) / sum(r["total_energy"] for r in rows)
        to_s = np.sqrt(sum(np.sum((W_q[k] - fx.source[k]) ** 2) for k in fx.keys))
        to_t = np.sqrt(sum(np.sum((W_q[k] - fx.target[k]) ** 2) for k in fx.keys))
        print(f"{q:5.2f} {removed:9.4f} {to_s:14.6e} {to_t:14.6e}")


if __name__ == "__main__":
    main()
