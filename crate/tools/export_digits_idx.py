#!/usr/bin/env python3
"""Export the scikit-learn 8x8 handwritten-digit set as IDX files.

Writes big-endian IDX image/label files (magics 2051/2049):
  * digits8x8-*   — the original 8x8 images; pixel bytes are
    round(v * 255 / 16), so loaders dividing by 255 recover the
    17-level intensities on a [0, 1] scale.
  * digits28x28-* — the same images bilinearly upsampled to the
    conventional 28x28 handwriting geometry, for experiments whose
    hyperparameters are calibrated to that scale.
"""

import pathlib
import struct

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits

OUT = pathlib.Path(__file__).resolve().parent.parent / "crates" / "xae" / "tests" / "data"


def write_idx(stem: str, images: np.ndarray, labels: np.ndarray) -> None:
    n, h, w = images.shape
    img_path = OUT / f"{stem}-images-idx3-ubyte"
    with open(img_path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, n, h, w))
        f.write(images.tobytes())
    lbl_path = OUT / f"{stem}-labels-idx1-ubyte"
    with open(lbl_path, "wb") as f:
        f.write(struct.pack(">II", 2049, n))
        f.write(labels.tobytes())
    print(f"wrote {img_path} ({n} images, {h}x{w})")
    print(f"wrote {lbl_path}")


def main() -> None:
    digits = load_digits()
    labels = digits.target.astype(np.uint8)
    OUT.mkdir(parents=True, exist_ok=True)

    small = np.rint(digits.images * 255.0 / 16.0).astype(np.uint8)
    write_idx("digits8x8", small, labels)

    big = zoom(digits.images, (1.0, 3.5, 3.5), order=1)  # bilinear, 8->28
    big = np.rint(np.clip(big, 0.0, 16.0) * 255.0 / 16.0).astype(np.uint8)
    write_idx("digits28x28", big, labels)

    counts = np.bincount(labels, minlength=10)
    print("per-digit counts:", counts.tolist())


if __name__ == "__main__":
    main()
