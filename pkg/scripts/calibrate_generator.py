"""Background-fraction and part-size statistics of the scene generator over many seeds."""
import argparse

import numpy as np

from snt.data import GenConfig, generate_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=1000)
    ap.add_argument("--figures", type=int, nargs=2, default=None, metavar=("MIN", "MAX"))
    args = ap.parse_args()
    cfg = GenConfig() if args.figures is None else GenConfig(figures=tuple(args.figures))
    counts = np.zeros((args.seeds, 7))
    for s in range(args.seeds):
        counts[s] = np.bincount(generate_scene(s, cfg).labels.ravel(), minlength=7)[:7]
    frac = counts / counts.sum(axis=1, keepdims=True)
    print(f"background fraction min {frac[:, 0].min():.3f} mean {frac[:, 0].mean():.3f} max {frac[:, 0].max():.3f}")
    names = ["background", "head", "torso", "left_arm", "right_arm", "left_leg", "right_leg"]
    for k, n in enumerate(names):
        print(f"{n:11s} mean pixels {counts[:, k].mean():7.1f}  min {counts[:, k].min():5.0f}")


if __name__ == "__main__":
    main()
