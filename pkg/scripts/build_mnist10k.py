"""Convert the 10,000 MNIST digits shipped in the npm package ``mnist`` (1.1.0) to IDX files.

The package stores each digit as 784 pixel values divided by 255 and rounded
to three decimals; rounding back after multiplying by 255 recovers the
original bytes exactly (checked below).

    npm pack mnist@1.1.0
    python scripts/build_mnist10k.py mnist-1.1.0.tgz data/mnist10k
"""

import argparse
import json
import tarfile
from pathlib import Path

import numpy as np

from ssbandit.env import write_idx


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("tarball")
    parser.add_argument("out_dir")
    args = parser.parse_args()

    images, labels = [], []
    with tarfile.open(args.tarball) as tar:
        for digit in range(10):
            raw = json.load(tar.extractfile(f"package/src/digits/{digit}.json"))["data"]
            values = np.asarray(raw, dtype=np.float64).reshape(-1, 28, 28)
            pixels = np.rint(values * 255.0)
            if np.abs(np.round(pixels / 255.0, 3) - values).max() != 0.0:
                raise SystemExit(f"digit {digit}: pixel values do not round-trip to bytes")
            images.append(pixels.astype(np.uint8))
            labels.append(np.full(len(pixels), digit, dtype=np.uint8))

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "images-idx3-ubyte.gz", np.concatenate(images))
    write_idx(out / "labels-idx1-ubyte.gz", np.concatenate(labels))
    print(f"wrote {sum(len(l) for l in labels)} examples to {out}")


if __name__ == "__main__":
    main()
