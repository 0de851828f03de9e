#!/usr/bin/env python3
"""Build a small MNIST subset in IDX format from the `mnist` npm package.

The npm package (https://www.npmjs.com/package/mnist) ships about 10000
MNIST digits as JSON arrays of pixel intensities rounded to three decimals.
Every value maps back to an exact u8 pixel via round(v * 255).

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python3 tools/make_desk_mnist.py package/src/digits data/mnist-desk

Writes train-images-idx3-ubyte / train-labels-idx1-ubyte (500 per class)
and t10k-images-idx3-ubyte / t10k-labels-idx1-ubyte (100 per class),
each shuffled with a fixed seed.
"""
import json
import random
import struct
import sys
from pathlib import Path

PIXELS = 28 * 28
TRAIN_PER_CLASS = 500
TEST_PER_CLASS = 100


def load_digit(path):
    data = json.loads(path.read_text())["data"]
    assert len(data) % PIXELS == 0
    out = []
    for k in range(len(data) // PIXELS):
        chunk = data[k * PIXELS:(k + 1) * PIXELS]
        pixels = bytes(int(round(v * 255)) for v in chunk)
        out.append(pixels)
    return out


def write_idx(prefix, samples):
    images = bytearray(struct.pack(">IIII", 0x00000803, len(samples), 28, 28))
    labels = bytearray(struct.pack(">II", 0x00000801, len(samples)))
    for pixels, label in samples:
        images += pixels
        labels.append(label)
    Path(prefix + "-images-idx3-ubyte").write_bytes(bytes(images))
    Path(prefix + "-labels-idx1-ubyte").write_bytes(bytes(labels))


def main():
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    dst.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        images = load_digit(src / f"{digit}.json")
        train += [(img, digit) for img in images[:TRAIN_PER_CLASS]]
        test += [(img, digit) for img in images[TRAIN_PER_CLASS:TRAIN_PER_CLASS + TEST_PER_CLASS]]
    rng = random.Random(20190501)
    rng.shuffle(train)
    rng.shuffle(test)
    write_idx(str(dst / "train"), train)
    write_idx(str(dst / "t10k"), test)
    print(f"train={len(train)} test={len(test)} first_train_label={train[0][1]}")


if __name__ == "__main__":
    main()
