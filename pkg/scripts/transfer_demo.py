"""Transfer the fixture LoRA onto the fine-tuned fixture and summarize each layer.

Columns: cluster count, region counts, the worst routing-space restoration
error on non-dominant entries (before factorization), the rank truncation
error of the output adapter with its tail-energy bound, and how much of the
drift routing energy the dominant region keeps.
"""
import argparse

import numpy as np

from casa import CasaConfig, transfer_model
from casa.arbitration import RESTORE
from casa.fixtures import make_fixture


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--q-dom", type=float, default=0.5)
    p.add_argument("--q-act", type=float, default=0.95)
    args = p.parse_args()

    fx = make_fixture(seed=args.seed)
    cfg = CasaConfig(q_dom=args.q_dom, q_act=args.q_act)
    _, report = transfer_model(fx.source, fx.target, fx.adapter, cfg, keep_routing=True)

    print(f"{'layer':24s} {'M':>2s} {'restore':>7s} {'preserve':>8s} {'arb':>3s} "
          f"{'restore err':>11s} {'fact err':>9s} {'tail bound':>10s} {'drift kept':>10s}")
    for layer in report.layers:
        ro = layer.routing
        r = ro.labels.region == RESTORE
        err = np.abs(ro.C_fft[r] + ro.C_casa[r] - ro.C_lora[r]).max()
        kept = np.sum(ro.C_fft[ro.labels.D] ** 2) / np.sum(ro.C_fft**2)
        c = layer.counts
        print(f"{layer.key:24s} {layer.M:2d} {c['restore']:7d} {c['preserve']:8d} {c['arbitrate']:3d} "
              f"{err:11.2e} {layer.factorization_error:9.3e} {layer.tail_bound:10.3e} {kept:10.4f}")


if __name__ == "__main__":
    main()
