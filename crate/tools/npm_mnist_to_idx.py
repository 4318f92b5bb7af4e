"""Convert the digit JSON files of the `mnist` npm package into gzipped IDX
files: a stratified subset of 200 training and 100 test images per digit.

usage: python3 npm_mnist_to_idx.py <package>/src/digits <out_dir>
"""
import gzip
import json
import struct
import sys
from pathlib import Path

TRAIN_PER_CLASS, TEST_PER_CLASS, PIXELS = 200, 100, 784


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + bytes(payload))


def main(src, out):
    src, out = Path(src), Path(out)
    splits = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        images = [data[i : i + PIXELS] for i in range(0, len(data), PIXELS)]
        chosen = {"train": images[:TRAIN_PER_CLASS],
                  "t10k": images[TRAIN_PER_CLASS : TRAIN_PER_CLASS + TEST_PER_CLASS]}
        for name, imgs in chosen.items():
            for img in imgs:
                splits[name][0].extend(min(255, max(0, round(v * 255))) for v in img)
                splits[name][1].append(digit)
    for name, (pixels, labels) in splits.items():
        n = len(labels)
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 2051, [n, 28, 28], pixels)
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 2049, [n], labels)
        print(name, n)


if __name__ == "__main__":
    main(*sys.argv[1:3])
