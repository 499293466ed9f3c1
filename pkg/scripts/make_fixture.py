"""Write the seeded synthetic source / fine-tuned / LoRA triple plus a manifest."""
import argparse

from casa.fixtures import make_fixture


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out", help="directory to write into")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--drift", type=float, default=0.002, help="drift size relative to ||S|| (0 gives target == source)")
    p.add_argument("--dtype", default="F64", choices=["F64", "F32", "F16", "BF16"])
    args = p.parse_args()
    fx = make_fixture(seed=args.seed, n_layers=args.layers, drift_rigidity=args.drift, dtype=args.dtype)
    for name, path in fx.write(args.out).items():
        print(f"{name:9s} {path}")


if __name__ == "__main__":
    main()
