"""Regenerate the committed 8x8 digits IDX fixture.

Source: scikit-learn's bundled digits set (1797 real 8x8 grayscale digit
scans, intensities 0..16). Pixels are rescaled to the 0..255 byte grid
and written as a standard IDX pair plus a checksum manifest, so the desk
experiments and the offline test suite run without any network access.

Run from the repository root:  python3 tools/make_digits_fixture.py
"""

import os

import numpy as np
from sklearn.datasets import load_digits

from hessreg.data import Dataset, load_idx, write_idx, write_manifest

OUT_DIR = os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures")


def main():
    os.makedirs(OUT_DIR, exist_ok=True)
    raw = load_digits()
    images = np.rint(raw.images / 16.0 * 255.0) / 255.0  # snap to byte grid
    ds = Dataset(X=images, y=raw.target, name="digits8x8", K=10)
    images_path = os.path.join(OUT_DIR, "digits-images-idx3-ubyte")
    labels_path = os.path.join(OUT_DIR, "digits-labels-idx1-ubyte")
    write_idx(images_path, labels_path, ds)
    write_manifest(
        os.path.join(OUT_DIR, "digits.json"),
        "digits8x8",
        images_path,
        labels_path,
        K=10,
    )
    back = load_idx(images_path, labels_path, name="digits8x8", K=10)
    assert np.array_equal(back.y, ds.y)
    assert np.allclose(back.X, ds.X)
    print(f"wrote {len(ds)} samples of shape {ds.input_shape} to {OUT_DIR}")


if __name__ == "__main__":
    main()
