"""Export scikit-learn's bundled 8x8 handwritten digits to IDX files.

Pixel intensities 0..16 are mapped to 0..255 by x * 255 // 16.
"""
import struct
import sys
from pathlib import Path

from sklearn.datasets import load_digits


def main(out_dir: str) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    images = (digits.images.astype(int) * 255 // 16).astype("uint8")
    labels = digits.target.astype("uint8")
    n, rows, cols = images.shape
    with open(out / "images.idx", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, rows, cols))
        f.write(images.tobytes())
    with open(out / "labels.idx", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.tobytes())


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/digits8x8")
