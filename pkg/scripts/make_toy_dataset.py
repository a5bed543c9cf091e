"""Write a synthetic toy dataset in the ISTD layout plus a matching config.

    python scripts/make_toy_dataset.py --root runs/toy
    unshadow train --config runs/toy/toy.yaml
"""
import argparse
from pathlib import Path

import yaml

from unshadow.synthetic import make_toy_split, write_split

HERE = Path(__file__).resolve().parent


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--root", type=Path, default=Path("runs/toy"))
    p.add_argument("--train", type=int, default=8, help="training triplets")
    p.add_argument("--test", type=int, default=8, help="test triplets")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    data = args.root / "data"
    write_split(make_toy_split(args.train, args.size, seed=args.seed), data, "train")
    write_split(make_toy_split(args.test, args.size, seed=args.seed + 1), data, "test")

    cfg = yaml.safe_load((HERE / "configs" / "toy.yaml").read_text())
    cfg["dataset"]["root"] = str(data.resolve())
    cfg["paths"]["checkpoint_dir"] = str((args.root / "checkpoints").resolve())
    cfg["paths"]["log_dir"] = str((args.root / "logs").resolve())
    (args.root / "toy.yaml").write_text(yaml.safe_dump(cfg, sort_keys=False))
    print(args.root / "toy.yaml")


if __name__ == "__main__":
    main()
