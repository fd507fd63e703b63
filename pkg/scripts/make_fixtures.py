"""Regenerate the frozen natural-image test fixture (needs scikit-image, not a package dependency).

The fixture is a 64x64 area-averaged crop of scikit-image's public-domain
astronaut photograph, stored as binary PPM under tests/data.
"""

import argparse
from pathlib import Path

import numpy as np
from skimage import data

from advdip.classifier import write_ppm


def natural64() -> np.ndarray:
    img = data.astronaut()[:384, 64:448].astype(np.float64) / 255  # head and shoulders, 384x384
    small = img.reshape(64, 6, 64, 6, 3).mean(axis=(1, 3))
    return small.transpose(2, 0, 1)


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "data" / "natural64.ppm"))
    args = p.parse_args()
    write_ppm(args.out, natural64())
    print(args.out)


if __name__ == "__main__":
    main()
