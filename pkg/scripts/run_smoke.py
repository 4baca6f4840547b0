"""Train the desk-scale model on a synthetic 6x8 dataset and report closed- and open-world metrics.

    python scripts/run_smoke.py --out runs/smoke
"""

import argparse
import logging
import time
from pathlib import Path

import numpy as np

from owczsl.backbone import BackboneConfig
from owczsl.data import generate_dataset, save_dataset, synthetic_embeddings
from owczsl.evaluate import evaluate, write_curve
from owczsl.feasibility import build_mask, calibrate_threshold, closed_world_mask, score_table, validation_unseen_pairs, write_mask
from owczsl.model import Model
from owczsl.train import TrainConfig, train, write_metrics


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="runs/smoke", help="output directory")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--keep-frac", type=float, default=0.5, help="fraction of validation unseen pairs kept by the open mask")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    space, samples = generate_dataset(6, 8, 0.2, 40, image_size=16, seed=args.seed)
    save_dataset(out / "data", space, samples)

    model = Model(space, BackboneConfig(image_size=16, patch_size=4, d_model=64, n_heads=4, depth=4, k=3), seed=args.seed, dtype=np.float32)
    config = TrainConfig(epochs=args.epochs, base_lr=1e-3, layer_decay=0.9, seed=args.seed)
    start = time.perf_counter()
    logs = train(model, samples, config)
    print(f"trained {model.n_parameters()} parameters in {time.perf_counter() - start:.0f}s")
    model.save(out / "model.ckpt")
    write_metrics(out / "model.ckpt.metrics.tsv", logs)

    words = list(space.attrs) + list(space.objs)
    scores = score_table(space, synthetic_embeddings(words, 16, args.seed), synthetic_embeddings(words, 16, args.seed + 1))
    threshold = calibrate_threshold(scores, space, args.keep_frac, validation_unseen_pairs(space, samples))
    open_mask = build_mask(scores, threshold, space)
    write_mask(out / "open.mask", open_mask, space)

    test = [s for s in samples if s.split == "test"]
    for world, mask in (("closed", closed_world_mask(space)), ("open-all", None), ("open-masked", open_mask.mask)):
        curve = evaluate(model, test, mask, "closed" if world == "closed" else "open")
        write_curve(out / f"{world}.curve.tsv", curve)
        print(f"{world:12s} feasible={space.n_pairs if mask is None else int(mask.sum()):3d}  {curve.summary()}")


if __name__ == "__main__":
    main()
