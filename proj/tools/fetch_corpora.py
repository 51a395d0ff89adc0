#!/usr/bin/env python3
"""Build the small IDX corpora used by the desk-scale experiments.

Pulls the `mnist` and `fashion-mnist` npm packages (which ship the images as
JSON), keeps the first N images of every class and writes them out as
standard IDX files:

    data/digits-images.idx   data/digits-labels.idx
    data/garments-images.idx data/garments-labels.idx
"""
import argparse
import json
import pathlib
import struct
import subprocess
import tarfile
import tempfile

PACKAGES = {
    "digits": ("mnist", "package/src/digits/{}.json"),
    "garments": ("fashion-mnist", "package/src/clothes/{}.json"),
}


def npm_pack(name, workdir):
    out = subprocess.run(["npm", "pack", name], cwd=workdir, check=True,
                         capture_output=True, text=True).stdout.strip().splitlines()
    return pathlib.Path(workdir) / out[-1]


def to_bytes(sample):
    # mnist ships floats in [0,1], fashion-mnist ships 0..255 ints
    if max(sample) <= 1.0:
        return bytes(min(255, int(round(v * 255))) for v in sample)
    return bytes(int(v) for v in sample)


def load_family(tarball, pattern, per_class):
    images, labels = [], []
    with tarfile.open(tarball) as tar:
        for cls in range(10):
            raw = json.load(tar.extractfile(pattern.format(cls)))["data"]
            if raw and isinstance(raw[0], list):
                samples = raw[:per_class]
            else:
                samples = [raw[i * 784:(i + 1) * 784] for i in range(min(per_class, len(raw) // 784))]
            if len(samples) < per_class:
                raise SystemExit(f"class {cls} has only {len(samples)} images")
            images.extend(to_bytes(s) for s in samples)
            labels.extend([cls] * len(samples))
    return images, labels


def write_idx(prefix, images, labels):
    with open(f"{prefix}-images.idx", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(img)
    with open(f"{prefix}-labels.idx", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data")
    ap.add_argument("--per-class", type=int, default=300)
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        for family, (pkg, pattern) in PACKAGES.items():
            images, labels = load_family(npm_pack(pkg, tmp), pattern, args.per_class)
            write_idx(out / family, images, labels)
            print(f"{family}: {len(images)} images")


if __name__ == "__main__":
    main()
