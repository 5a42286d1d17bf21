"""Regenerate the golden blur fixture with a direct 2-D convolution.

The oracle never uses the library's separable blur: it sums the full
outer-product kernel over mirrored neighbours, one output pixel at a time.
Run from the repository root: python tests/data/make_golden.py
"""
import math
from pathlib import Path

import numpy as np

from crystal.ppm import read_ppm, to_bytes, write_ppm
from crystal.taskgen import make_sample

HERE = Path(__file__).parent


def reflect_index(i, n):
    period = 2 * (n - 1)
    i = abs(i) % period
    return period - i if i > n - 1 else i


def dense_blur(image, sigma):
    r = math.ceil(3 * sigma)
    k1 = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k2 = np.outer(k1, k1) / k1.sum() ** 2
    H, W, _ = image.shape
    out = np.zeros_like(image)
    for y in range(H):
        rows = [reflect_index(y + dy, H) for dy in range(-r, r + 1)]
        for x in range(W):
            cols = [reflect_index(x + dx, W) for dx in range(-r, r + 1)]
            out[y, x] = np.einsum("ij,ijc->c", k2, image[np.ix_(rows, cols)])
    return out


def main():
    sample = make_sample(3, "count")
    cy, cx = sample.scene.objects[0].center
    top, left = min(max(cy - 12, 0), 40), min(max(cx - 12, 0), 40)
    crop = sample.image[top : top + 24, left : left + 24]
    write_ppm(HERE / "golden_in.ppm", crop)
    img = read_ppm(HERE / "golden_in.ppm")  # quantized, exactly what the CLI will read
    (HERE / "golden_blur10.ppm").write_bytes(to_bytes(dense_blur(img, 10.0)))


if __name__ == "__main__":
    main()
