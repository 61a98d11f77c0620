"""Train the micro encoder-decoder on one flow/mask pair until it memorises it.

This is the usual sanity check for a from-scratch network: a single noisy
flow field with a moving block should be fitted to near-zero loss. The loss
curve is printed every 50 steps.
"""
import argparse
import logging

import numpy as np

from mopflow import segnet_micro as sn
from mopflow.evaluation import iou


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iterations", type=int, default=500)
    ap.add_argument("--size", type=int, default=32, help="multiple of 8")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    rng = np.random.default_rng(args.seed)
    n = args.size
    flow = 0.1 * rng.normal(size=(n, n, 2))
    mask = np.zeros((n, n), dtype=bool)
    mask[n // 3 : n // 3 + n // 3, n // 4 : n // 4 + n // 3] = True
    flow[mask] += (3.0, 1.0)

    net, losses = sn.train(
        [(flow, mask)], sn.TrainConfig(iterations=args.iterations), seed=args.seed,
        log_every=50, logger=logging.getLogger("overfit"),
    )
    print(f"loss {losses[0]:.4f} -> {losses[-1]:.4f} (ln 2 = {np.log(2):.4f})")
    print(f"IoU of the predicted mask {iou(sn.predict_mask(net, flow), mask):.3f}")


if __name__ == "__main__":
    main()
