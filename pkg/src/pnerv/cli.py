"""``pnerv`` command line: train, eval, compress, decompress, analyze, budget, gradcheck.

Every command prints one JSON document (sorted keys) to stdout. Usage
errors exit with 2, pipeline failures with 1 and a JSON error on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

__all__ = ["main", "build_parser", "load_config"]

log = logging.getLogger("pnerv")


class PipelineError(Exception):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, allow_nan=True) + "\n")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("need at least one value")
    return vals


def load_config(path) -> tuple[dict, dict]:
    """Split a JSON config into (model fields, train fields).

    Accepts ``{"model": {...}, "train": {...}}`` or one flat object whose keys
    are routed by field name.
    """
    from dataclasses import fields

    from .model import PNeRVConfig
    from .trainer import TrainConfig

    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise PipelineError("config must be a JSON object")
    if set(raw) <= {"model", "train"}:
        return dict(raw.get("model", {})), dict(raw.get("train", {}))
    model_keys = {f.name for f in fields(PNeRVConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - model_keys - train_keys
    if unknown:
        raise PipelineError(f"unknown config keys: {sorted(unknown)}")
    # "seed" exists on both sides; a flat config sets both
    model = {k: v for k, v in raw.items() if k in model_keys}
    train = {k: v for k, v in raw.items() if k in train_keys}
    return model, train


# ---------------------------------------------------------------- commands

def cmd_train(args) -> dict:
    from .model import PNeRVConfig, build_model, save_checkpoint
    from .trainer import TrainConfig, log_to_csv, train
    from .video import load_video

    model_d, train_d = load_config(args.config)
    for key, val in (("epochs", args.epochs), ("lr_max", args.lr), ("mode", args.mode), ("seed", args.seed)):
        if val is not None:
            train_d[key] = val
    if args.seed is not None:
        model_d["seed"] = args.seed
    cfg = PNeRVConfig.from_dict(model_d)
    tcfg = TrainConfig.from_dict(train_d)
    clip = load_video(args.video)
    result = train(build_model(cfg), clip.frames, tcfg,
                   on_epoch=lambda e: log.info("epoch %d loss %.6g psnr %.2f", e.epoch, e.loss, e.psnr))
    meta = {"train": tcfg.to_dict(), "mode": tcfg.mode, "frames": clip.T,
            "train_frames": result.train_frames, "eval_frames": result.eval_frames}
    save_checkpoint(result.model, args.out, meta)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".csv")
    log_path.write_text(log_to_csv(result.log))
    return {"checkpoint": str(args.out), "log": str(log_path), "epochs": tcfg.epochs,
            "initial_loss": result.log[0].loss, "final_loss": result.final_loss,
            "final_psnr": result.log[-1].psnr}


def _eval_indices(meta: dict, n: int) -> list[int]:
    from .trainer import split_frames

    mode = meta.get("mode", "regression")
    train_idx, held_out = split_frames(n, mode)
    return held_out if mode == "interpolation" else train_idx


def cmd_eval(args) -> dict:
    from .metrics import quality_report
    from .model import load_checkpoint
    from .trainer import reconstruct
    from .video import load_video

    model, meta = load_checkpoint(args.model)
    clip = load_video(args.video)
    idx = _eval_indices(meta, clip.T)
    preds = reconstruct(model, clip.frames, idx)
    out = quality_report(preds, clip.frames[idx], idx).as_dict()
    out["mode"] = meta.get("mode", "regression")
    return out


def cmd_compress(args) -> dict:
    from .codec import compress
    from .model import embed_all, load_checkpoint
    from .video import load_video

    model, meta = load_checkpoint(args.model)
    frames = load_video(args.video).frames if args.video else None
    rate = compress(model, embed_all(model, frames), args.out, meta)
    return {"out": str(args.out), **rate.as_dict()}


def cmd_decompress(args) -> dict:
    from .codec import decompress
    from .metrics import bpp
    from .model import save_checkpoint

    model, emb, meta = decompress(args.inp)
    save_checkpoint(model, args.out, meta)
    h, w = model.cfg.output_hw
    bits = 8 * Path(args.inp).stat().st_size
    return {"out": str(args.out), "frames": emb.T, "height": h, "width": w, "total_bits": bits,
            "bpp": bpp(bits, 0, emb.T, h, w)}


def cmd_analyze(args) -> dict:
    from .uat import BoundQuery, dual_modulus, dynamics_profile, param_bound
    from .video import load_video

    clip = load_video(args.video)
    prof = dynamics_profile(clip.frames)
    d_out = 3 * clip.H * clip.W
    diam = clip.T - 1
    per_eps = {}
    for eps in args.eps:
        inv = dual_modulus(prof, eps)
        bound = param_bound(BoundQuery(1, d_out, diam, inv)) if diam > 0 else None
        per_eps[repr(eps)] = {"omega_inv": inv,
                              "param_bound": None if bound is None or bound == float("inf") else bound}
    out = {"T": clip.T, "H": clip.H, "W": clip.W, "norm": prof.norm, "d_in": 1, "d_out": d_out, "diam": diam,
           "omega": {str(d): w for d, w in prof.table().items()}, "eps": per_eps}
    if args.model:
        from .model import count_params, load_checkpoint

        model, _ = load_checkpoint(args.model)
        out["model_decoder_params"] = count_params(model).decoder
    return out


def _budget_rows(c, in_hw, out_hw, k):
    from .kfc import operator_flops

    row = {"in_shape": [c, *in_hw], "out_shape": [c, *out_hw], "kernel": k, "operators": {}}
    for kind in ("kfc", "pixelshuffle", "deconv", "bilinear"):
        try:
            row["operators"][kind] = operator_flops(kind, c, *in_hw, *out_hw, k).as_dict()
        except ValueError as exc:
            row["operators"][kind] = {"error": str(exc)}
    ops = row["operators"]
    if "params" in ops["kfc"] and "params" in ops["pixelshuffle"]:
        row["kfc_to_pixelshuffle"] = ops["kfc"]["params"] / ops["pixelshuffle"]["params"]
    return row


def cmd_budget(args) -> dict:
    if args.config:
        from .model import SHORTCUT_LAYERS, PNeRVConfig

        cfg = PNeRVConfig.from_dict(load_config(args.config)[0])
        c, h, w = cfg.embed_temporal_shape
        rows = [dict(_budget_rows(c, (h, w), cfg.layer_hw(l), args.kernel), layer=l) for l in SHORTCUT_LAYERS]
        return {"rows": rows}
    if args.in_shape is None or args.out_shape is None:
        raise PipelineError("budget needs --config or both --in-shape and --out-shape")
    if len(args.in_shape) != 3 or len(args.out_shape) not in (2, 3):
        raise PipelineError("--in-shape is C,H,W and --out-shape is H,W or C,H,W")
    c = args.in_shape[0]
    out_hw = args.out_shape[-2:]
    if len(args.out_shape) == 3 and args.out_shape[0] != c:
        raise PipelineError("upscalers keep the channel count; in and out channels differ")
    return {"rows": [_budget_rows(c, args.in_shape[1:], out_hw, args.kernel)]}


def cmd_gradcheck(args) -> dict:
    from .gradcheck import run_suite

    results = run_suite(args.seed, verbose=lambda line: log.info(line))
    out = {"seed": args.seed, "passed": all(r.passed for _, r in results),
           "cases": {name: {"max_rel_error": r.max_error, "passed": r.passed} for name, r in results}}
    if not out["passed"]:
        _emit(out)
        raise PipelineError("gradient check failed: " + ", ".join(n for n, r in results if not r.passed))
    return out


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pnerv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="overfit a model to a clip")
    s.add_argument("--video", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("regression", "interpolation"))
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--log", help="CSV log path (default: <out>.csv)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="quality report of a checkpoint on a clip")
    s.add_argument("--video", required=True)
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compress", help="8-bit quantize a checkpoint into a bitstream")
    s.add_argument("--model", required=True)
    s.add_argument("--video", help="clip to embed (not needed if the checkpoint stores embeddings)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compress)

    s = sub.add_parser("decompress", help="bitstream back to a checkpoint")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decompress)

    s = sub.add_parser("analyze", help="rate-of-dynamics profile of a clip")
    s.add_argument("--video", required=True)
    s.add_argument("--eps", type=_floats, required=True, help="comma-separated tolerances")
    s.add_argument("--model", help="checkpoint to report decoder size for")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("budget", help="parameter and FLOP table for the four upscalers")
    s.add_argument("--config")
    s.add_argument("--in-shape", type=_ints, help="C,H,W")
    s.add_argument("--out-shape", type=_ints, help="H,W or C,H,W")
    s.add_argument("--kernel", type=int, default=1, help="PixelShuffle conv kernel size")
    s.set_defaults(func=cmd_budget)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s")
    try:
        _emit(args.func(args))
    except (PipelineError, ValueError, TypeError, OSError, KeyError, IndexError) as exc:
        sys.stderr.write(json.dumps({"command": args.command, "error": type(exc).__name__,
                                     "message": str(exc)}, sort_keys=True) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
