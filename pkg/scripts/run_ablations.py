"""TopK and compositor-head ablations on a synthetic dataset.

    python scripts/run_ablations.py --out runs/ablations
"""

import argparse
from pathlib import Path

from owczsl.ablation import ablate_head, ablate_topk, write_report
from owczsl.backbone import BackboneConfig
from owczsl.data import generate_dataset
from owczsl.train import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="runs/ablations", help="output directory")
    ap.add_argument("--attrs", type=int, default=6)
    ap.add_argument("--objs", type=int, default=8)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    space, samples = generate_dataset(args.attrs, args.objs, 0.2, 20, image_size=16, seed=args.seed)
    backbone = BackboneConfig(image_size=16, patch_size=4, d_model=32, n_heads=4, depth=2, k=3)
    config = TrainConfig(epochs=args.epochs, base_lr=1e-3, layer_decay=0.9, seed=args.seed)

    full = min(space.n_attrs, space.n_objs)
    topk = ablate_topk(space, samples, backbone, config, sorted({1, 3, full}))
    write_report(out / "topk.tsv", topk, ("k",))
    head = ablate_head(space, samples, backbone, config)
    write_report(out / "head.tsv", head, ("params", "ratio"))
    for path in ("topk.tsv", "head.tsv"):
        print((out / path).read_text())


if __name__ == "__main__":
    main()
