"""Command line entry point: ``advdip <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import classifier as C
from . import generator as G
from . import harness as H
from . import nn
from . import tensor as T
from .transforms import parse_transform, standard_transforms

log = logging.getLogger("advdip")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4
ATTACK_METHODS = ("fgsm", "fgsm-iter", "mifgsm", "lbfgs", "cw", "smm", "deepfool", "dip")


class ConfigError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object keyed by method or command name")
    return cfg


def _attack_config(args) -> dict:
    cfg = _load_config(args.config)
    if args.deepfool_logits:
        cfg.setdefault("deepfool", {})["use_logits"] = True
    return cfg


def _read_image(path) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".ppm":
        return C.read_ppm(p)
    x = T.load_tensor(p).data
    return x[0] if x.ndim == 4 else x


def _write_image(path, x: np.ndarray) -> None:
    p = Path(path)
    if p.suffix == ".ppm":
        C.write_ppm(p, x)
    else:
        T.save_tensor(T.Tensor(x), p)


def _dataset(args, split: str) -> C.Dataset:
    if getattr(args, "data_dir", None):
        return C.load_dataset_dir(args.data_dir)
    train, test = C.shapes_split(args.train_size, args.test_size, seed=args.data_seed)
    return train if split == "train" else test


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from e


# subcommands ---------------------------------------------------------------------

def cmd_train(args) -> int:
    opts = _load_config(args.config).get("train", {})
    data = _dataset(args, "train")
    model, history = C.train_classifier(
        data, epochs=opts.get("epochs", args.epochs), batch=opts.get("batch", args.batch),
        seed=args.seed, lr=opts.get("lr", args.lr))
    C.save_model(model, args.model)
    test_acc = C.accuracy(model, _dataset(args, "test")) if not args.data_dir else float("nan")
    print(f"train_accuracy={history[-1] if history else C.accuracy(model, data):.4f} "
          f"test_accuracy={test_acc:.4f} model={args.model}")
    return 0


def cmd_attack(args) -> int:
    f = C.load_model(args.model)
    x = _read_image(args.image)
    label = args.label if args.label is not None else C.classify(f, x)[0]
    target = args.target_class
    if target is None:
        if args.method != "deepfool":
            raise ConfigError(f"--target-class is required for {args.method}")
        target = -1
    elif not 0 <= target < f.num_classes:
        raise ConfigError(f"target class {target} outside [0, {f.num_classes})")
    res = H.run_method(args.method, f, x, target, label, _attack_config(args), seed=args.seed)
    _write_image(args.out, res.x_adv[0])
    l2, linf, ps = H.perceptibility_metrics(x[None], res.x_adv)
    print(f"method={args.method} success={int(res.success)} predicted={res.predicted} "
          f"target={res.target} iterations={res.iterations} l2={l2:.6f} linf={linf:.6f} psnr={ps:.3f}")
    return 0


def cmd_robustness(args) -> int:
    f = C.load_model(args.model)
    methods = [m for m in args.methods.split(",") if m]
    for m in methods:
        if m not in H.METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(H.METHODS)}")
    transforms = ([parse_transform(t) for t in args.transforms.split(",") if t]
                  if args.transforms else standard_transforms())
    if not any(t.kind == "none" for t in transforms):
        transforms.insert(0, parse_transform("none"))
    seeds = [args.seed + k for k in range(args.seeds)]
    report = H.evaluate_robustness(f, methods, _dataset(args, "test"), transforms, args.trials,
                                   config=_attack_config(args), n=args.n, seeds=seeds)
    out = Path(args.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    H.emit_report(report, out / "robustness.csv", out / "robustness.svg")
    (out / "timing.csv").write_text(H.timing_csv(report), encoding="utf-8", newline="\n")
    print(H.report_csv(report), end="")
    return 0


def cmd_patch(args) -> int:
    f = C.load_model(args.model)
    opts = _load_config(args.config).get("patch", {})
    train = _dataset(args, "train")
    train = train.subset(np.flatnonzero(train.labels != args.attack_class))
    spec = G.PatchSpec.from_area(args.area, tuple(train.images.shape[-2:]))
    res = G.dip_patch_train(train, f, args.attack_class, spec, iters=opts.get("iters", args.iters),
                            batch=opts.get("batch", args.batch), seed=args.seed,
                            lr=opts.get("lr", G.DipAttackConfig.lr), loss=opts.get("loss", "ce"))
    prefix = args.out or f"patch-c{args.attack_class}-a{args.area:g}"
    res.save(prefix)
    print(f"patch={prefix} side={spec.side} area_fraction={spec.area_fraction:.4f} "
          f"final_loss={res.loss_trace[-1] if res.loss_trace else float('nan'):.6f}")
    return 0


def _load_patch(prefix):
    meta = G.read_patch_meta(f"{prefix}.meta")
    return C.read_ppm(f"{prefix}.ppm"), meta


def cmd_patch_eval(args) -> int:
    f = C.load_model(args.model)
    test = _dataset(args, "test")
    patches, attack_class = {}, None
    for prefix in args.patch:
        render, meta = _load_patch(prefix)
        c = int(meta["attack_class"])
        if attack_class is not None and c != attack_class:
            raise ConfigError("all patches must share one attack class")
        attack_class = c
        patches[float(meta["area_fraction"])] = render
    if args.areas:
        first = _load_patch(args.patch[0])[0]
        patches = H.scaled_patches(first, _floats(args.areas), test.images.shape[-2:])
    rows = H.patch_success_curve(patches, f, test, attack_class, seed=args.seed)
    out = Path(args.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "patch_curve.json").write_text(json.dumps(rows, indent=1), encoding="utf-8")
    H.emit_report(rows, out / "patch_curve.csv", out / "patch_curve.svg")
    print(H.curve_csv(rows), end="")
    return 0


def cmd_report(args) -> int:
    raw = json.loads(Path(args.input).read_text(encoding="utf-8"))
    report = raw if isinstance(raw, list) else H.RobustnessReport(**raw)
    H.emit_report(report, args.csv, args.svg)
    return 0


# parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="advdip", description="Deep-image-prior adversarial images and baselines")
    p.add_argument("--model", default="classifier.advm", help="classifier ADVM path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="JSON file of per-method/command overrides")
    p.add_argument("--deepfool-logits", action="store_true", help="linearize logits instead of probabilities")
    p.add_argument("--data-dir", default=None, help="PPM directory with labels.csv instead of synthetic shapes")
    p.add_argument("--train-size", type=int, default=5000)
    p.add_argument("--test-size", type=int, default=1000)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train the shapes classifier")
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--batch", type=int, default=32)
    s.add_argument("--lr", type=float, default=3e-3)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("attack", help="attack one image")
    s.add_argument("--method", required=True, choices=ATTACK_METHODS)
    s.add_argument("--image", required=True, help=".ppm or ATSR tensor")
    s.add_argument("--target-class", type=int, default=None)
    s.add_argument("--label", type=int, default=None, help="true class (default: prediction)")
    s.add_argument("--out", required=True, help="output .ppm or ATSR path")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("robustness", help="success rates under transforms")
    s.add_argument("--methods", default="dip,cw,lbfgs,deepfool,smm")
    s.add_argument("--transforms", default=None,
                   help="comma list of names (rot-S, jpeg, ...) or kind:magnitude[:fixed]")
    s.add_argument("--n", type=int, default=100, help="images per seed")
    s.add_argument("--trials", type=int, default=1)
    s.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds from --seed")
    s.add_argument("--report-dir", default="report")
    s.set_defaults(func=cmd_robustness)

    s = sub.add_parser("patch", help="train an adversarial patch")
    s.add_argument("--attack-class", type=int, required=True)
    s.add_argument("--area", type=float, default=0.25)
    s.add_argument("--iters", type=int, default=400)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--out", default=None, help="output prefix (.advm/.ppm/.meta)")
    s.set_defaults(func=cmd_patch)

    s = sub.add_parser("patch-eval", help="success curve of trained patches")
    s.add_argument("--patch", nargs="+", required=True, help="patch prefixes")
    s.add_argument("--areas", default=None, help="resize the first patch to these area fractions")
    s.add_argument("--report-dir", default="report")
    s.set_defaults(func=cmd_patch_eval)

    s = sub.add_parser("report", help="re-emit CSV/SVG from a saved JSON report")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--csv", required=True)
    s.add_argument("--svg", default=None)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, T.FormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (nn.NumericError, FloatingPointError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
