"""Print the routed patch size and token count for a range of signal lengths."""

import argparse

import numpy as np

from timeomni.encoder import MAX_TOKENS, route_patch_size


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--min", type=float, default=1)
    ap.add_argument("--max", type=float, default=1.3e7)
    ap.add_argument("--n", type=int, default=25)
    args = ap.parse_args()
    lengths = sorted(set(np.geomspace(args.min, args.max, args.n).astype(int).tolist()))
    print(f"{'T':>10} {'patch':>7} {'tokens':>7}")
    for T in lengths:
        p = route_patch_size(T)
        print(f"{T:>10} {p:>7} {-(-T // p):>7}")
    print(f"(token count never exceeds {MAX_TOKENS})")


if __name__ == "__main__":
    main()
