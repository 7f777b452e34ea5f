"""Command-line interface.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 model error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .errors import CompatibilityError, ConfigError, DecodeError, FormatError, NumericError, TruncatedError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3
CHECKPOINT_ENV = "VVMIC_CHECKPOINT_DIR"
DEFAULT_CHECKPOINT = "default.ckpt"

log = logging.getLogger("vvmic")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class ModelError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(args, payload: dict, text: Optional[str] = None):
    if args.json:
        print(json.dumps(payload, indent=2, default=float))
    elif text is not None:
        print(text)


def resolve_checkpoint(name: Optional[str]) -> Path:
    env = os.environ.get(CHECKPOINT_ENV)
    if name is None:
        if not env:
            raise UsageError(f"--checkpoint is required when {CHECKPOINT_ENV} is not set")
        name = DEFAULT_CHECKPOINT
    path = Path(name)
    if not path.exists() and env and not path.is_absolute():
        path = Path(env) / name
    if not path.exists():
        raise ModelError(f"checkpoint not found: {name}")
    return path


def _load_model(name):
    from .model import load_checkpoint

    path = resolve_checkpoint(name)
    try:
        model, meta = load_checkpoint(path)
    except (CompatibilityError, ConfigError) as exc:
        raise ModelError(str(exc)) from exc
    return model, path


def _load_volume(path):
    from .volume_io import load_vvol

    if not Path(path).exists():
        raise DataError(f"input not found: {path}")
    return load_vvol(path)


def _read_container(path):
    from .codec import read_container

    if not Path(path).exists():
        raise DataError(f"input not found: {path}")
    return read_container(path)


def cmd_encode(args) -> int:
    from .analytics.metrics import psnr
    from .codec import decode_volume, encode_volume, write_container

    volume = _load_volume(args.input)
    model, _ = _load_model(args.checkpoint)
    container, stats = encode_volume(volume, model, args.gop, return_stats=True)
    write_container(container, args.output)
    summary = {"output": str(args.output), "bpp": container.bpp(), "slices": [s.as_dict() for s in stats]}
    if args.verify:
        rec = decode_volume(container, model).volume
        summary["psnr"] = psnr(rec.samples, volume.samples, volume.max_value)
    lines = ["slice  z_bytes  y_bytes     bpp"]
    lines += [f"{s.index:5d}  {s.z_bits // 8:7d}  {s.y_bits // 8:7d}  {s.bpp:6.4f}" for s in stats]
    lines.append(f"total bpp {container.bpp():.4f}" + (f"  psnr {summary['psnr']:.2f} dB" if args.verify else ""))
    _emit(args, summary, "\n".join(lines))
    return EXIT_OK


def write_feature_dump(features, indices, out_dir: Path, digest: str):
    """One ``slice_NNNN.f32`` (float32 LE, channel-major) plus JSON sidecar per slice."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for f, i in zip(features, indices):
        arr = np.ascontiguousarray(f, dtype="<f4")
        (out_dir / f"slice_{i:04d}.f32").write_bytes(arr.tobytes())
        meta = {
            "slice": i,
            "channels": arr.shape[0],
            "height": arr.shape[1],
            "width": arr.shape[2],
            "dtype": "float32-le",
            "layout": "channel-major",
            "checkpoint_digest": digest,
        }
        (out_dir / f"slice_{i:04d}.json").write_text(json.dumps(meta, indent=2))


def read_feature_dump(in_dir) -> List[np.ndarray]:
    in_dir = Path(in_dir)
    metas = sorted(in_dir.glob("slice_*.json"))
    if not metas:
        raise DataError(f"no feature files in {in_dir}")
    out = []
    for m in metas:
        meta = json.loads(m.read_text())
        raw = np.fromfile(m.with_suffix(".f32"), dtype="<f4")
        shape = (meta["channels"], meta["height"], meta["width"])
        if raw.size != np.prod(shape):
            raise DataError(f"{m.with_suffix('.f32')}: size does not match sidecar")
        out.append(raw.reshape(shape))
    return out


def cmd_decode(args) -> int:
    from .codec import decode_volume
    from .model import state_digest
    from .volume_io import save_vvol

    if args.output is None and args.features is None:
        raise UsageError("give --output and/or --features")
    container = _read_container(args.input)
    model, _ = _load_model(args.checkpoint)
    try:
        from .codec import check_compatible

        check_compatible(container, model)
    except CompatibilityError as exc:
        raise ModelError(str(exc)) from exc
    result = decode_volume(container, model, emit_features=args.features is not None, pixels=args.output is not None)
    summary = {"slices": len(result.slice_indices)}
    if args.output is not None:
        save_vvol(result.volume, args.output)
        summary["output"] = str(args.output)
    if args.features is not None:
        write_feature_dump(result.features, result.slice_indices, Path(args.features), state_digest(model))
        summary["features"] = str(args.features)
    _emit(args, summary, f"decoded {summary['slices']} slices")
    return EXIT_OK


def cmd_info(args) -> int:
    from .codec import read_header

    if not Path(args.input).exists():
        raise DataError(f"input not found: {args.input}")
    h = read_header(args.input)
    payload = {
        "width": h.width, "height": h.height, "depth": h.depth, "bit_depth": h.bit_depth,
        "gop_stride": h.gop_stride, "model_id": h.model_id.hex(), "bpp": h.bpp,
    }
    _emit(args, payload, "\n".join(f"{k}: {v}" for k, v in payload.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, finetune, train

    if not Path(args.config).exists():
        raise DataError(f"config not found: {args.config}")
    config = TrainConfig.from_json(args.config)
    for p in config.train_paths + ([config.eval_path] if config.eval_path else []):
        if not Path(p).exists():
            raise DataError(f"training volume not found: {p}")
    if args.finetune:
        try:
            best = finetune(resolve_checkpoint(args.finetune), config)
        except CompatibilityError as exc:
            raise ModelError(str(exc)) from exc
    else:
        best = train(config)
    _emit(args, {"checkpoint": str(best), "output_dir": config.output_dir}, f"best checkpoint: {best}")
    return EXIT_OK


def _read_curve(path) -> List[tuple]:
    if not Path(path).exists():
        raise DataError(f"curve file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [(float(r["bpp"]), float(r["psnr"])) for r in rows]
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: expected numeric bpp,psnr columns") from exc


def rd_point(orig_path, decoded_path, bitstream_path):
    from .analytics.metrics import psnr
    from .codec import MAGIC, read_header

    orig = _load_volume(orig_path)
    dec = _load_volume(decoded_path)
    if not Path(bitstream_path).exists():
        raise DataError(f"bitstream not found: {bitstream_path}")
    with open(bitstream_path, "rb") as fh:
        is_vvmc = fh.read(4) == MAGIC
    pixels = orig.width * orig.height * orig.depth
    bpp = read_header(bitstream_path).bpp if is_vvmc else Path(bitstream_path).stat().st_size * 8 / pixels
    return bpp, psnr(orig.samples, dec.samples, orig.max_value)


def cmd_eval_rd(args) -> int:
    from .analytics.bd import RdCurve, bd_psnr, bd_rate

    points = []
    for item in args.pairs or []:
        parts = item.split(":")
        if len(parts) != 3:
            raise UsageError(f"--pairs entries are ORIG:DECODED:BITSTREAM, got {item!r}")
        points.append(rd_point(*parts))
    if args.test:
        points += _read_curve(args.test)
    if not points:
        raise UsageError("give --pairs or --test")
    anchor = _read_curve(args.anchor)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bpp", "psnr"])
        w.writerows(sorted(points))
    try:
        a, t = RdCurve(anchor), RdCurve(points)
        rows = [("anchor", 0.0, 0.0), (args.name, bd_rate(a, t, args.interp), bd_psnr(a, t, args.interp))]
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    bd_path = Path(args.bd_output) if args.bd_output else out.with_name(out.stem + "_bd.csv")
    with open(bd_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["curve", "bd_rate", "bd_psnr"])
        w.writerows(rows)
    payload = {"rd_csv": str(out), "bd_csv": str(bd_path), "bd": [{"curve": r[0], "bd_rate": r[1], "bd_psnr": r[2]} for r in rows]}
    _emit(args, payload, "\n".join(f"{r[0]:>10s}  BD-Rate {r[1]:8.3f} %  BD-PSNR {r[2]:7.3f} dB" for r in rows))
    return EXIT_OK


def _seg_inputs(args):
    if (args.features is None) == (args.pixels is None):
        raise UsageError("give exactly one of --features or --pixels")
    if args.features is not None:
        if not Path(args.features).is_dir():
            raise DataError(f"feature directory not found: {args.features}")
        return read_feature_dump(args.features)
    return _load_volume(args.pixels)


def cmd_eval_seg(args) -> int:
    from .analytics.segmentation import ReferenceSegHead, evaluate_segmentation

    x = _seg_inputs(args)
    labels = _load_volume(args.labels).samples
    if not Path(args.head).exists():
        raise ModelError(f"head not found: {args.head}")
    head = ReferenceSegHead.load(args.head)
    spacing = tuple(args.spacing) if args.spacing else None
    try:
        report = evaluate_segmentation(x, head, labels, spacing=spacing)
    except ConfigError as exc:
        raise ModelError(str(exc)) from exc
    payload = report.as_dict()
    if args.output:
        out = Path(args.output)
        out.write_text(json.dumps(payload, indent=2))
        with open(out.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "dice", "hd95"])
            for c in report.dice:
                w.writerow([c, report.dice[c], report.hd95[c]])
    text = "\n".join(f"class {c}: DICE {report.dice[c]:.4f}  HD95 {report.hd95[c]:.3f}" for c in report.dice)
    _emit(args, payload, text + f"\nmean DICE {report.mean_dice:.4f}")
    return EXIT_OK


def cmd_train_seg(args) -> int:
    from .analytics.segmentation import train_segmentation_head

    x = _seg_inputs(args)
    labels = _load_volume(args.labels).samples
    head = train_segmentation_head([x], [labels], args.classes, steps=args.steps, seed=args.seed)
    head.save(args.out)
    _emit(args, {"head": str(args.out)}, f"wrote {args.out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    curves = [(Path(p).stem, _read_curve(p)) for p in args.curves]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, pts in curves:
        pts = sorted(pts)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("bpp")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    data_path = out.with_suffix(".csv")
    with open(data_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["curve", "bpp", "psnr"])
        for name, pts in curves:
            w.writerows((name, b, q) for b, q in sorted(pts))
    _emit(args, {"figure": str(out), "data": str(data_path)}, f"wrote {out} and {data_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vvmic", description="Volumetric learned image codec with latent-feature analytics.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        sp.set_defaults(func=func)
        return sp

    sp = add("encode", cmd_encode, "compress a VVOL volume")
    sp.add_argument("--input", required=True)
    sp.add_argument("--checkpoint", default=None, help=f"default: ${CHECKPOINT_ENV}/{DEFAULT_CHECKPOINT}")
    sp.add_argument("--output", required=True)
    sp.add_argument("--gop", type=int, default=16)
    sp.add_argument("--verify", action="store_true", help="decode again and report PSNR")

    sp = add("decode", cmd_decode, "decode pixels and/or latent features")
    sp.add_argument("--input", required=True)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--output", default=None, help="decoded VVOL volume")
    sp.add_argument("--features", default=None, help="directory for per-slice M_x dumps")

    sp = add("info", cmd_info, "print a container header")
    sp.add_argument("--input", required=True)

    sp = add("train", cmd_train, "train a codec from a JSON config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--finetune", default=None, help="start from this checkpoint")

    sp = add("eval-rd", cmd_eval_rd, "RD points and BD metrics against an anchor")
    sp.add_argument("--pairs", nargs="*", default=None, metavar="ORIG:DECODED:BITSTREAM")
    sp.add_argument("--test", default=None, help="test curve CSV (bpp,psnr)")
    sp.add_argument("--anchor", required=True, help="anchor curve CSV (bpp,psnr)")
    sp.add_argument("--output", required=True, help="RD CSV to write")
    sp.add_argument("--bd-output", default=None)
    sp.add_argument("--name", default="test")
    sp.add_argument("--interp", choices=("cubic", "pchip"), default="cubic")

    for name, func, help in (
        ("eval-seg", cmd_eval_seg, "DICE/HD95 of a segmentation head"),
        ("train-seg", cmd_train_seg, "fit the reference segmentation head"),
    ):
        sp = add(name, func, help)
        sp.add_argument("--features", default=None)
        sp.add_argument("--pixels", default=None)
        sp.add_argument("--labels", required=True, help="VVOL volume of class labels")
        if name == "eval-seg":
            sp.add_argument("--head", required=True)
            sp.add_argument("--spacing", type=float, nargs=3, default=None)
            sp.add_argument("--output", default=None, help="JSON report (CSV written alongside)")
        else:
            sp.add_argument("--out", required=True)
            sp.add_argument("--classes", type=int, required=True)
            sp.add_argument("--steps", type=int, default=300)
            sp.add_argument("--seed", type=int, default=0)

    sp = add("plot", cmd_plot, "plot RD curves")
    sp.add_argument("--curves", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, TruncatedError, DecodeError, NumericError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ModelError, CompatibilityError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL


if __name__ == "__main__":
    sys.exit(main())
