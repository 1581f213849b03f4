"""Build a small MNIST subset in IDX format from the `mnist` npm package.

The npm package ships 28x28 digits as JSON arrays of intensities in [0, 1]
rounded to three decimals; that resolution is finer than 1/255, so rounding
back to bytes recovers the original pixel values.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/make_mnist_subset.py package/src/digits data/mnist-subset 200
"""

import json
import random
import struct
import sys
from pathlib import Path

SIDE = 28


def main() -> None:
    digits_dir = Path(sys.argv[1])
    out_dir = Path(sys.argv[2])
    per_class = int(sys.argv[3]) if len(sys.argv) > 3 else 200
    seed = int(sys.argv[4]) if len(sys.argv) > 4 else 20200101

    examples = []
    for label in range(10):
        raw = json.loads((digits_dir / f"{label}.json").read_text())["data"]
        count = len(raw) // (SIDE * SIDE)
        if count < per_class:
            raise SystemExit(f"digit {label}: only {count} examples")
        for k in range(per_class):
            pixels = raw[k * SIDE * SIDE:(k + 1) * SIDE * SIDE]
            examples.append((label, bytes(round(v * 255) for v in pixels)))

    random.Random(seed).shuffle(examples)

    out_dir.mkdir(parents=True, exist_ok=True)
    n = len(examples)
    with open(out_dir / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, SIDE, SIDE))
        for _, px in examples:
            f.write(px)
    with open(out_dir / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for label, _ in examples))
    print(f"wrote {n} examples to {out_dir}")


if __name__ == "__main__":
    main()
