"""Train one 25%-area sticker per attack class and measure success against area.

For each class the sticker is resized to every area fraction and pasted at
random spots on held-out images of the other classes; the control pastes a
rendered exemplar of the attack class instead. Results go to --out as
patch_curve_c<k>.csv/.svg plus the patch artifacts.
"""

import argparse
from pathlib import Path

import numpy as np

from advdip import classifier as C
from advdip import generator as G
from advdip import harness as H


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--model", default="classifier.advm")
    p.add_argument("--classes", default="3")
    p.add_argument("--areas", default="0,0.1,0.25,0.4")
    p.add_argument("--iters", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results/patches")
    args = p.parse_args()

    f = C.load_model(args.model)
    train, test = C.shapes_split(5000, 1000, seed=0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    areas = [float(a) for a in args.areas.split(",")]
    for c in (int(v) for v in args.classes.split(",")):
        keep = train.subset(np.flatnonzero(train.labels != c))
        spec = G.PatchSpec.from_area(0.25, tuple(train.images.shape[-2:]))
        res = G.dip_patch_train(keep, f, c, spec, iters=args.iters, seed=args.seed)
        res.save(out / f"patch_c{c}")
        rows = H.patch_success_curve(H.scaled_patches(res.render, areas, test.images.shape[-2:]),
                                     f, test, c, seed=args.seed)
        H.emit_report(rows, out / f"patch_curve_c{c}.csv", out / f"patch_curve_c{c}.svg")
        print(f"class {c} ({C.CLASS_NAMES[c]}):")
        print(H.curve_csv(rows), end="")


if __name__ == "__main__":
    main()
