"""Command-line entry point: prepare / train / sr / eval / selftest.

Exit statuses: 0 success, 1 usage, 2 data or format error, 3 check failure.
Flags may also come from a flat key=value config file (--config); explicit
command-line flags win because they are parsed after the file entries.
"""

import argparse
import os
import sys
import time

import numpy as np

from . import data, metrics, selfcheck
from . import model as model_mod
from . import train as train_mod

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_CHECK = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def default_lr_patch(scale):
    # large scales need smaller LR patches to keep HR patches tractable
    return 16 if scale == 8 else 32


def build_parser():
    parser = _Parser(prog="drfn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="flat key=value file supplying flag defaults")
        p.add_argument("--threads", type=int, default=0, help="0 = auto")
        p.add_argument("--deterministic", action="store_true",
                       help="force sequential, bit-reproducible execution")

    p = sub.add_parser("prepare", help="build a patch archive from HR images")
    p.add_argument("hr_dir")
    p.add_argument("out_archive")
    p.add_argument("--scale", type=int, default=4, choices=model_mod.VALID_SCALES)
    p.add_argument("--lr-patch", type=int, default=0, help="0 = per-scale default")
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--augment", action="store_true", help="eightfold orientation augmentation")
    common(p)

    p = sub.add_parser("train", help="train a model on a patch archive")
    p.add_argument("archive")
    p.add_argument("out_checkpoint")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--cycles", type=int, default=10)
    p.add_argument("--levels", type=int, default=3, choices=(1, 2, 3))
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--lr-decay", type=float, default=0.1)
    p.add_argument("--lr-step", type=int, default=10)
    p.add_argument("--clip-a", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--epoch-checkpoints", action="store_true",
                   help="also write a checkpoint after every epoch")
    common(p)

    p = sub.add_parser("sr", help="super-resolve one image")
    p.add_argument("checkpoint")
    p.add_argument("in_image")
    p.add_argument("out_image")
    common(p)

    p = sub.add_parser("eval", help="PSNR/SSIM report over matching directories")
    p.add_argument("sr_dir")
    p.add_argument("gt_dir")
    p.add_argument("--scale", type=int, default=4, choices=model_mod.VALID_SCALES)
    p.add_argument("--csv", help="also write the report as CSV to this path")
    common(p)

    p = sub.add_parser("selftest", help="gradient oracles and structural identities")
    common(p)
    return parser


def read_config_file(path):
    entries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"bad config line (expected key=value): {line!r}")
            key, value = line.split("=", 1)
            flag = "--" + key.strip().replace("_", "-")
            value = value.strip()
            if value.lower() in ("true", "1") and key.strip() in ("augment", "deterministic",
                                                                  "epoch-checkpoints"):
                entries.append(flag)
            else:
                entries.append(f"{flag}={value}")
    return entries


def expand_config(argv):
    """Splice config-file entries right after the subcommand so explicit
    command-line flags, parsed later, override them."""
    path = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif tok.startswith("--config="):
            path = tok.split("=", 1)[1]
    if path is None:
        return argv
    entries = read_config_file(path)
    for i, tok in enumerate(argv):
        if not tok.startswith("-"):
            return argv[: i + 1] + entries + argv[i + 1 :]
    return argv + entries


def print_resolved(ns):
    print("resolved config:")
    for key in sorted(vars(ns)):
        print(f"  {key} = {getattr(ns, key)}")


def cmd_prepare(ns):
    paths = data.list_images(ns.hr_dir)
    if not paths:
        print(f"error: no images found in {ns.hr_dir}", file=sys.stderr)
        return EXIT_DATA
    lr_patch = ns.lr_patch or default_lr_patch(ns.scale)
    pairs = []
    decoded = 0
    for path in paths:
        try:
            img = data.load_image_y(path)
        except Exception as e:
            print(f"warning: skipping undecodable {path}: {e}", file=sys.stderr)
            continue
        decoded += 1
        variants = data.augment_eightfold(img) if ns.augment else [img]
        for v in variants:
            pairs.extend(data.extract_patch_pairs(v, ns.scale, lr_patch, ns.stride))
    if decoded == 0:
        print(f"error: no decodable images in {ns.hr_dir}", file=sys.stderr)
        return EXIT_DATA
    data.save_archive(ns.out_archive, pairs, ns.scale, lr_patch)
    print(f"wrote {len(pairs)} patch pairs to {ns.out_archive}")
    return EXIT_OK


def cmd_train(ns):
    pairs, scale, _ = data.load_archive(ns.archive)
    cfg = model_mod.ModelConfig(scale=scale, channels=ns.channels, cycles=ns.cycles,
                                levels=ns.levels)
    m = model_mod.build_drfn(cfg, seed=ns.seed)
    tcfg = train_mod.TrainConfig(
        batch=ns.batch,
        momentum=ns.momentum,
        weight_decay=ns.weight_decay,
        lr_initial=ns.lr,
        lr_decay=ns.lr_decay,
        lr_step_epochs=ns.lr_step,
        clip_A=ns.clip_a,
        epochs=ns.epochs,
        seed=ns.seed,
    )
    stem, ext = os.path.splitext(ns.out_checkpoint)

    def epoch_sink(epoch):
        if ns.epoch_checkpoints:
            model_mod.save_checkpoint(m, f"{stem}.epoch{epoch}{ext}")

    t0 = time.time()
    _, history = train_mod.train_loop(m, pairs, tcfg, epoch_sink=epoch_sink)
    model_mod.save_checkpoint(m, ns.out_checkpoint)
    with open(ns.out_checkpoint + ".log", "w") as f:
        f.write(train_mod.format_log(history))
    if history:
        print(f"trained {len(history)} iterations in {time.time() - t0:.1f}s; "
              f"first loss {history[0][3]:.6g}, last loss {history[-1][3]:.6g}")
    else:
        print("epochs=0: checkpoint contains the freshly initialized model")
    print(f"checkpoint: {ns.out_checkpoint}")
    return EXIT_OK


def super_resolve_y(m, y_img):
    x = y_img.astype(np.float32)[None, None]
    hr, _ = model_mod.forward(m, x)
    return np.clip(hr[0, 0].astype(np.float64), 0.0, 1.0)


def cmd_sr(ns):
    m = model_mod.load_checkpoint(ns.checkpoint)
    scale = m.cfg.scale
    from PIL import Image

    with Image.open(ns.in_image) as im:
        color = im.mode not in ("L", "1", "I;16", "I")
        rgb = np.asarray(im.convert("RGB")) if color else None
        gray = np.asarray(im.convert("L"), dtype=np.float64) / 255.0 if not color else None
    if color:
        y, cb, cr = data.rgb_to_ycbcr(rgb)
        sr_y = super_resolve_y(m, y / 255.0) * 255.0
        out_h, out_w = sr_y.shape
        # chroma carries little structure; bicubic upscaling is standard
        cb_up = data.bicubic_resize(cb / 255.0, out_h, out_w) * 255.0
        cr_up = data.bicubic_resize(cr / 255.0, out_h, out_w) * 255.0
        data.save_image_rgb(ns.out_image, data.ycbcr_to_rgb(sr_y, cb_up, cr_up))
    else:
        sr_y = super_resolve_y(m, gray)
        data.save_image_y(ns.out_image, sr_y)
    print(f"super-resolved x{scale}: {ns.in_image} -> {ns.out_image} "
          f"({sr_y.shape[1]}x{sr_y.shape[0]})")
    return EXIT_OK


def cmd_eval(ns):
    report = metrics.evaluate_dataset(ns.sr_dir, ns.gt_dir, ns.scale)
    sys.stdout.write(report.to_text())
    if ns.csv:
        with open(ns.csv, "w") as f:
            f.write(report.to_csv())
    return EXIT_OK if report.clean else EXIT_DATA


def cmd_selftest(ns):
    results = selfcheck.run_all()
    failed = 0
    for name, ok, detail in results:
        status = "ok  " if ok else "FAIL"
        print(f"{status} {name:<32} {detail}")
        failed += 0 if ok else 1
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_CHECK


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = expand_config(argv)
        ns = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error reading config file: {e}", file=sys.stderr)
        return EXIT_USAGE
    print_resolved(ns)
    handler = {
        "prepare": cmd_prepare,
        "train": cmd_train,
        "sr": cmd_sr,
        "eval": cmd_eval,
        "selftest": cmd_selftest,
    }[ns.command]
    try:
        return handler(ns)
    except (model_mod.FormatError, data.ArchiveFormatError, train_mod.TrainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
