"""Command-line entry point: synthetic data generation, training,
evaluation, prediction, gradient checking, and the branch-count ablation.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure.
"""

import argparse
import hashlib
import os
import sys

import numpy as np

from . import autodiff as ad
from . import data as D
from . import metrics as M
from . import training as T
from .model import (BranchConfig, ModelConfig, init_model, model_forward,
                    named_parameters, param_count)

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- run config

_SCHEMA = {
    # model
    "image_size": (int, 64),
    "in_channels": (int, 1),
    "embed_dim": (int, 16),
    "window": (int, 4),
    "depths": (str, "2,2,2,2"),
    "branches": (str, "4,8"),
    "mlp_ratio": (int, 4),
    "aff_ratio": (int, 4),
    "model_seed": (int, 0),
    # training
    "lr0": (float, 2e-4),
    "momentum": (float, 0.9),
    "weight_decay": (float, 2e-4),
    "batch_size": (int, 4),
    "epochs": (int, 100),
    "decay_every": (int, 20),
    "decay_factor": (float, 0.2),
    "seed": (int, 0),
    # paths
    "train_manifest": (str, ""),
    "val_manifest": (str, ""),
    "test_manifest": (str, ""),
    "out_dir": (str, "runs"),
}


def default_run_config():
    return {k: v for k, (_, v) in _SCHEMA.items()}


def parse_run_config(path):
    """Flat key=value file, '#' comments; unknown keys rejected."""
    cfg = default_run_config()
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SCHEMA:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        typ = _SCHEMA[key][0]
        try:
            cfg[key] = typ(value)
        except ValueError:
            raise UsageError(
                f"{path}:{lineno}: bad {typ.__name__} value for {key}: {value!r}"
            ) from None
    return cfg


def model_config_from_run(cfg, branches=None):
    sizes = branches if branches is not None else [
        int(s) for s in str(cfg["branches"]).split(",") if s]
    depths = tuple(int(d) for d in cfg["depths"].split(","))
    return ModelConfig(
        branches=[BranchConfig(patch_size=s, embed_dim=cfg["embed_dim"],
                               depths=depths, window=cfg["window"])
                  for s in sizes],
        in_channels=cfg["in_channels"],
        mlp_ratio=cfg["mlp_ratio"],
        aff_ratio=cfg["aff_ratio"],
    )


def train_config_from_run(cfg, **overrides):
    kw = dict(lr0=cfg["lr0"], momentum=cfg["momentum"],
              weight_decay=cfg["weight_decay"], batch_size=cfg["batch_size"],
              epochs=cfg["epochs"], decay_every=cfg["decay_every"],
              decay_factor=cfg["decay_factor"], seed=cfg["seed"])
    kw.update(overrides)
    return T.TrainConfig(**kw)


def config_kv(cfg):
    return {k: repr(v) if isinstance(v, float) else str(v)
            for k, v in cfg.items()}


def run_config_from_kv(kv):
    cfg = default_run_config()
    for k, v in kv.items():
        if k in _SCHEMA:
            typ = _SCHEMA[k][0]
            cfg[k] = typ(v)
    return cfg


# ---------------------------------------------------------------- commands

def _load_manifest(path, what):
    if not path:
        raise UsageError(f"config is missing a {what} manifest path")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return D.load_manifest(path)


def cmd_synth(args):
    samples = [D.generate_synthetic(
        D.SyntheticRoadConfig(size=args.size, seed=(args.seed, i)))
        for i in range(args.count)]
    manifest = D.write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {manifest}")
    return 0


def _sample_order_digest(samples, cfg):
    h = hashlib.sha256()
    for epoch in range(cfg.epochs):
        h.update(T._epoch_rng(cfg.seed, epoch).permutation(len(samples)).tobytes())
    return h.hexdigest()[:16]


def cmd_train(args):
    cfg = parse_run_config(args.config)
    model_cfg = model_config_from_run(cfg)
    tcfg = train_config_from_run(cfg)
    train_set = _load_manifest(cfg["train_manifest"], "train")
    val_set = D.load_manifest(cfg["val_manifest"]) if cfg["val_manifest"] else None

    params = init_model(model_cfg, seed=cfg["model_seed"])
    buffers = {}
    start_epoch = 0
    if args.resume:
        epoch, kv, tensors, bufs, _ = T.load_checkpoint(args.resume)
        T.restore_params(params, tensors)
        buffers = {k: v.copy() for k, v in bufs.items()}
        start_epoch = epoch

    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    T.train(params, train_set, tcfg, val_samples=val_set,
            checkpoint_dir=out_dir, log_path=os.path.join(out_dir, "train_log.csv"),
            start_epoch=start_epoch, buffers=buffers, config_kv=config_kv(cfg))
    print(f"training complete; artifacts in {out_dir}")
    return 0


def _restore_from_checkpoint(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    epoch, kv, tensors, buffers, _ = T.load_checkpoint(path)
    cfg = run_config_from_kv(kv)
    params = init_model(model_config_from_run(cfg), seed=cfg["model_seed"])
    T.restore_params(params, tensors)
    return params, cfg


def cmd_eval(args):
    params, _ = _restore_from_checkpoint(args.checkpoint)
    if not os.path.exists(args.data):
        raise FileNotFoundError(args.data)
    samples = D.load_manifest(args.data)
    counts = T.evaluate(params, samples, threshold=args.threshold)
    print(M.REPORT_HEADER)
    print(M.report_row(counts))
    return 0


def cmd_predict(args):
    params, _ = _restore_from_checkpoint(args.checkpoint)
    if not os.path.exists(args.image):
        raise FileNotFoundError(args.image)
    image = D.load_image(args.image).astype(np.float64) / 255.0
    with ad.no_grad():
        logits = model_forward(image, params)
    pred = (logits.data >= 0.0).astype(np.uint8)  # sigmoid(x) >= .5 <=> x >= 0
    D.save_mask(pred, args.out)
    print(f"wrote {args.out} ({pred.shape[0]}x{pred.shape[1]})")
    return 0


def gradcheck_model(model_cfg, tolerance, n_params=20, seed=0, h=1e-5,
                    image_size=32):
    """Central-difference check of d(loss)/d(theta) for randomly sampled
    parameter elements of a freshly initialized model."""
    rng = np.random.default_rng(seed)
    params = init_model(model_cfg, seed=seed)
    image = rng.uniform(0, 1, size=(model_cfg.in_channels, image_size, image_size))
    mask = (rng.uniform(size=(image_size, image_size)) < 0.3).astype(np.float64)

    def loss_value():
        with ad.no_grad():
            logits = model_forward(image, params)
            return T.bce_with_logits(logits, mask).item()

    named = list(named_parameters(params))
    for _, p in named:
        p.zero_grad()
    loss = T.bce_with_logits(model_forward(image, params), mask)
    ad.backward(loss)

    worst = 0.0
    for _ in range(n_params):
        name, p = named[rng.integers(len(named))]
        flat = p.data.reshape(-1)
        j = int(rng.integers(flat.size))
        orig = flat[j]
        flat[j] = orig + h
        up = loss_value()
        flat[j] = orig - h
        down = loss_value()
        flat[j] = orig
        numeric = (up - down) / (2 * h)
        analytic = p.grad.reshape(-1)[j] if p.grad is not None else 0.0
        rel = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-8)
        worst = max(worst, rel)
    return worst


def cmd_gradcheck(args):
    cfg = parse_run_config(args.config) if args.config else default_run_config()
    if not args.config:
        cfg["image_size"] = 32
        cfg["embed_dim"] = 8
    model_cfg = model_config_from_run(cfg)
    worst = gradcheck_model(model_cfg, args.tolerance, n_params=args.samples,
                            seed=cfg["model_seed"],
                            image_size=min(cfg["image_size"], 32))
    ok = worst <= args.tolerance
    print(f"gradcheck max rel-err {worst:.3e} "
          f"({'<=' if ok else '>'} tolerance {args.tolerance:g})")
    return 0 if ok else EXIT_NUMERIC


ARCH_NAMES = {1: "single-branch", 2: "dual-branch", 3: "triple-branch"}


def cmd_ablate(args):
    cfg = parse_run_config(args.config)
    train_set = _load_manifest(cfg["train_manifest"], "train")
    val_set = D.load_manifest(cfg["val_manifest"]) if cfg["val_manifest"] else None
    test_set = _load_manifest(cfg["test_manifest"], "test")
    tcfg = train_config_from_run(cfg)
    digest = _sample_order_digest(train_set, tcfg)

    rows = []
    for group in args.branches.split("|"):
        sizes = [int(s) for s in group.split(",") if s]
        model_cfg = model_config_from_run(cfg, branches=sizes)
        params = init_model(model_cfg, seed=cfg["model_seed"])
        T.train(params, train_set, tcfg, val_samples=val_set)
        counts = T.evaluate(params, test_set)
        rows.append({
            "architecture": ARCH_NAMES[len(sizes)],
            "patch_sizes": " ".join(str(s) for s in sizes),
            "precision": 100 * M.precision(counts),
            "recall": 100 * M.recall(counts),
            "f1": 100 * M.f1(counts),
            "iou": 100 * M.iou(counts),
            "param_count": param_count(model_cfg),
        })
        print(f"[ablate] {rows[-1]['architecture']} s={rows[-1]['patch_sizes']}: "
              f"iou {rows[-1]['iou']:.2f} (data order {digest})")

    with open(args.out, "w") as f:
        f.write("architecture,patch_sizes,precision,recall,f1,iou,param_count\n")
        for r in rows:
            f.write("{architecture},{patch_sizes},{precision:.2f},{recall:.2f},"
                    "{f1:.2f},{iou:.2f},{param_count}\n".format(**r))
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------- dispatch

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="dbswin",
                description="Dual-branch windowed-transformer road segmentation "
                            "toolkit. Config files are flat key=value lines; "
                            "known keys: " + ", ".join(sorted(_SCHEMA)))
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic road dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="train a model from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--resume", default=None)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("predict", help="write a 0/255 mask PGM for one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("gradcheck",
                        help="finite-difference gradient verification")
    sp.add_argument("--config", default=None)
    sp.add_argument("--tolerance", type=float, default=1e-3)
    sp.add_argument("--samples", type=int, default=20)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train/evaluate several branch configs")
    sp.add_argument("--config", required=True)
    sp.add_argument("--branches", default="4|4,8|4,8,12")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
        return EXIT_DATA
    except (D.PgmError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except T.NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
