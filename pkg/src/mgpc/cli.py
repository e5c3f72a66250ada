"""Command-line front door: encode, decode, train, eval and rd-sweep.

stdout carries machine-readable key=value summaries; stderr carries human
diagnostics. Exit codes: 0 success, 1 generic failure, 2 bad input,
3 checkpoint mismatch, 4 I/O error, 5 corrupt stream.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import codec as codec_mod
from .autograd import Parameter, load_checkpoint, save_checkpoint
from .codec import BitstreamContainer, decode, encode
from .config import (RATE_POINTS, STAGE1_LAMBDA_A, ModelConfig, TrainConfig,
                     apply_config, parse_config_file)
from .errors import (CodecError, ConfigError, ContractError, DecodeError,
                     RangeError)
from .metrics import (RD_REPORT_COLUMNS, d1_psnr, d2_psnr,
                      rd_report_rows_to_csv, y_psnr, yuv_psnr)
from .model import CodecModel
from .ply import read_ply, write_ply
from .sparse import SparseVoxelTensor, voxelize
from .training import run_stage, stage2_model, synth_dataset

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_BAD_INPUT = 2
EXIT_MODEL_MISMATCH = 3
EXIT_IO = 4
EXIT_CORRUPT = 5

_META_PREFIX = "meta/"


def num_threads() -> int:
    """Worker-parallelism bound from MGPC_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("MGPC_THREADS", "1")))
    except ValueError:
        return 1


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(key: str, value) -> None:
    print(f"{key}={value}")


# ---------------------------------------------------------------------------
# checkpoint plumbing: model weights plus meta/ scalars for validation

def save_model(path, model: CodecModel) -> None:
    cfg = model.config
    meta = [
        Parameter(_META_PREFIX + "model_id", float(cfg.model_id)),
        Parameter(_META_PREFIX + "channels", np.asarray(cfg.channels, dtype=np.float64)),
        Parameter(_META_PREFIX + "state_dim", float(cfg.state_dim)),
        Parameter(_META_PREFIX + "group_sizes", np.asarray(cfg.group_sizes, dtype=np.float64)),
        Parameter(_META_PREFIX + "mem_group_size", float(cfg.mem_group_size)),
        Parameter(_META_PREFIX + "mem_width", float(cfg.mem_width)),
    ]
    save_checkpoint(path, model.parameters() + meta)


def load_model(path) -> CodecModel:
    state = load_checkpoint(path)

    def meta(key, default=None):
        arr = state.get(_META_PREFIX + key)
        if arr is None:
            if default is None:
                raise ConfigError(f"checkpoint lacks {_META_PREFIX}{key}")
            return default
        return arr

    cfg = ModelConfig(
        channels=tuple(int(v) for v in np.atleast_1d(meta("channels"))),
        state_dim=int(meta("state_dim")),
        group_sizes=tuple(int(v) for v in np.atleast_1d(meta("group_sizes"))),
        mem_group_size=int(meta("mem_group_size")),
        mem_width=int(meta("mem_width")),
        model_id=int(meta("model_id")),
    )
    model = CodecModel(cfg, seed=0)
    model.load_state(state)
    return model


def _load_cloud(path, bit_depth: int) -> SparseVoxelTensor:
    pts = read_ply(path)
    if pts.shape[0] == 0:
        raise ContractError(f"{path}: empty point cloud")
    return voxelize(pts, bit_depth)


def _recon_tensor(path, bit_depth: int) -> SparseVoxelTensor:
    """Interpret a PLY as an already-voxelized cloud (coords kept verbatim)."""
    pts = read_ply(path)
    coords = np.rint(pts[:, :3]).astype(np.int64)
    return SparseVoxelTensor(coords, pts[:, 3:6] / 255.0, bit_depth, validate=False)


# ---------------------------------------------------------------------------
# commands

def cmd_encode(args) -> int:
    if not Path(args.input).is_file():
        _log(f"input file not found: {args.input}")
        return EXIT_BAD_INPUT
    if not Path(args.model).is_file():
        _log(f"model checkpoint not found: {args.model}")
        return EXIT_MODEL_MISMATCH
    try:
        model = load_model(args.model)
    except (ConfigError, ContractError) as e:
        _log(f"checkpoint mismatch: {e}")
        return EXIT_MODEL_MISMATCH
    try:
        pc = _load_cloud(args.input, args.bit_depth)
    except (CodecError, ValueError) as e:
        _log(f"bad input: {e}")
        return EXIT_BAD_INPUT
    try:
        container, stats = encode(pc, model, model.config.model_id)
        with open(args.output, "wb") as f:
            f.write(container.pack())
    except OSError as e:
        _log(f"I/O error: {e}")
        return EXIT_IO
    except ContractError as e:
        _log(f"bad input: {e}")
        return EXIT_BAD_INPUT
    _emit("bpp_total", f"{stats.bpp_total:.6f}")
    _emit("bpp_geometry", f"{stats.bpp_geometry:.6f}")
    _emit("bpp_attribute", f"{stats.bpp_attribute:.6f}")
    _emit("num_points", stats.num_points)
    _emit("seconds_encode", f"{stats.seconds:.3f}")
    _log(f"encoded {args.input} -> {args.output} "
         f"({stats.total_bits / 8:.0f} bytes, {stats.bpp_total:.3f} bpp)")
    return EXIT_OK


def cmd_decode(args) -> int:
    if not Path(args.input).is_file():
        _log(f"input file not found: {args.input}")
        return EXIT_BAD_INPUT
    if not Path(args.model).is_file():
        _log(f"model checkpoint not found: {args.model}")
        return EXIT_MODEL_MISMATCH
    try:
        model = load_model(args.model)
    except (ConfigError, ContractError) as e:
        _log(f"checkpoint mismatch: {e}")
        return EXIT_MODEL_MISMATCH
    try:
        with open(args.input, "rb") as f:
            blob = f.read()
    except OSError as e:
        _log(f"I/O error: {e}")
        return EXIT_IO
    t0 = time.perf_counter()
    try:
        container = BitstreamContainer.parse(blob)
        if container.model_id != model.config.model_id:
            _log(f"bitstream wants model_id {container.model_id}, "
                 f"checkpoint is model_id {model.config.model_id}")
            return EXIT_MODEL_MISMATCH
        recon = decode(container, model)
    except DecodeError as e:
        _log(f"corrupt stream: {e}")
        return EXIT_CORRUPT
    try:
        write_ply(args.output, np.hstack([
            recon.coords.astype(np.float64),
            recon.feat_array() * 255.0,
        ]))
    except OSError as e:
        _log(f"I/O error: {e}")
        return EXIT_IO
    _emit("num_points", recon.num_points)
    _emit("seconds_decode", f"{time.perf_counter() - t0:.3f}")
    _log(f"decoded {args.input} -> {args.output} ({recon.num_points} points)")
    return EXIT_OK


def _eval_row(original: SparseVoxelTensor, recon: SparseVoxelTensor,
              sequence: str, model_id, stats=None) -> dict:
    row = {
        "sequence": sequence,
        "model_id": model_id,
        "d1_psnr": d1_psnr(recon, original, original.bit_depth),
        "d2_psnr": d2_psnr(recon, original, original.bit_depth),
        "y_psnr": y_psnr(recon, original),
        "yuv_psnr": yuv_psnr(recon, original),
    }
    if stats is not None:
        row["bpp_total"] = stats.bpp_total
        row["bpp_geometry"] = stats.bpp_geometry
        row["bpp_attribute"] = stats.bpp_attribute
    return row


def cmd_eval(args) -> int:
    for path in (args.input, args.recon):
        if not Path(path).is_file():
            _log(f"file not found: {path}")
            return EXIT_BAD_INPUT
    try:
        original = _load_cloud(args.input, args.bit_depth)
        recon = _recon_tensor(args.recon, args.bit_depth)
    except (CodecError, ValueError) as e:
        _log(f"bad input: {e}")
        return EXIT_BAD_INPUT
    row = _eval_row(original, recon, Path(args.input).stem, args.model_id)
    if args.bitstream:
        try:
            nbytes = Path(args.bitstream).stat().st_size
        except OSError as e:
            _log(f"I/O error: {e}")
            return EXIT_IO
        row["bpp_total"] = 8.0 * nbytes / original.num_points
    for key in ("d1_psnr", "d2_psnr", "y_psnr", "yuv_psnr", "bpp_total"):
        if key in row:
            _emit(key, f"{row[key]:.6f}")
    if args.report:
        with open(args.report, "w") as f:
            f.write(rd_report_rows_to_csv([row]))
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = parse_config_file(args.config) if args.config else {}
    model_keys = {"channels", "state_dim", "group_sizes", "mem_group_size", "mem_width"}
    mcfg = ModelConfig(model_id=args.model_id)
    apply_config(mcfg, {k: v for k, v in overrides.items() if k in model_keys})
    tcfg = TrainConfig(seed=args.seed)
    apply_config(tcfg, {k: v for k, v in overrides.items()
                        if k not in model_keys and k not in ("n_clouds", "points_lo", "points_hi")})
    lam_a, lam_g = RATE_POINTS[args.model_id]

    if args.input and Path(args.input).is_dir():
        dataset = [_load_cloud(p, args.bit_depth)
                   for p in sorted(Path(args.input).glob("*.ply"))]
        if not dataset:
            _log(f"no .ply files under {args.input}")
            return EXIT_BAD_INPUT
    else:
        n_clouds = int(overrides.get("n_clouds", 200))
        dataset = synth_dataset(args.seed, n_clouds, args.bit_depth)

    try:
        if args.stage == 1:
            tcfg.stage = "attribute_only"
            if "lambda_a" not in overrides:
                tcfg.lambda_a = STAGE1_LAMBDA_A
            model = CodecModel(mcfg, seed=args.seed)
            result = run_stage(model, dataset, tcfg)
        else:
            tcfg.stage = "joint"
            if "lambda_a" not in overrides:
                tcfg.lambda_a = lam_a
            if "lambda_g" not in overrides:
                tcfg.lambda_g = lam_g
            if not args.init or not Path(args.init).is_file():
                raise ConfigError("stage 2 requires --init with the stage-1 checkpoint")
            model = stage2_model(mcfg, load_checkpoint(args.init), seed=args.seed + 1)
            result = run_stage(model, dataset, tcfg)
    except ConfigError as e:
        _log(f"configuration error: {e}")
        return EXIT_BAD_INPUT
    save_model(args.output, model)
    if args.report:
        with open(args.report, "w") as f:
            f.write(result.log_csv())
    _emit("final_loss", f"{result.log[-1]['L']:.6f}")
    _emit("steps", len(result.log))
    _log(f"stage {args.stage} finished: {len(result.log)} steps, "
         f"checkpoint {args.output}")
    return EXIT_OK


def _sweep_cell(seq_path, model_path, bit_depth, workdir):
    model = load_model(model_path)
    original = _load_cloud(seq_path, bit_depth)
    container, stats = encode(original, model, model.config.model_id)
    recon = decode(container, model)
    return _eval_row(original, recon, Path(seq_path).stem,
                     model.config.model_id, stats)


def cmd_rd_sweep(args) -> int:
    seqs = sorted(Path(args.input).glob("*.ply"))
    models = sorted(Path(args.model).glob("*.mgwt"))
    if not seqs:
        _log(f"no .ply sequences under {args.input}")
        return EXIT_BAD_INPUT
    if len(models) < 4:
        _log(f"rd-sweep needs >= 4 checkpoints for BD-rate validity, found {len(models)}")
        return EXIT_BAD_INPUT
    cells = [(s, m) for s in seqs for m in models]
    rows = []
    failures = 0
    workers = num_threads()

    def run(cell):
        s, m = cell
        try:
            return _sweep_cell(s, m, args.bit_depth, None)
        except Exception as e:  # cell failures recorded, sweep continues
            return {"sequence": Path(s).stem, "model_id": Path(m).stem,
                    "error": str(e)}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]
    for res in results:
        if "error" in res:
            failures += 1
            _log(f"cell failed: {res['sequence']} x {res['model_id']}: {res['error']}")
        rows.append(res)
    with open(args.report, "w") as f:
        f.write(rd_report_rows_to_csv(rows))
    _emit("cells", len(cells))
    _emit("failures", failures)
    return EXIT_OK if failures == 0 else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mgpc", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, model=True, report=True):
        p.add_argument("--input", required=True)
        p.add_argument("--bit-depth", dest="bit_depth", type=int, default=6)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config")
        if report:
            p.add_argument("--report")
        if model:
            p.add_argument("--model", required=True)

    p = sub.add_parser("encode", help="compress a PLY into a bitstream")
    common(p)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("decode", help="reconstruct a PLY from a bitstream")
    common(p)
    p.add_argument("--output", required=True)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("eval", help="compute quality metrics for a reconstruction")
    common(p, model=False)
    p.add_argument("--recon", required=True)
    p.add_argument("--bitstream")
    p.add_argument("--model-id", dest="model_id", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("train", help="train one stage on a dataset dir or synthetic data")
    p.add_argument("--input", default="")
    p.add_argument("--output", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--init", help="stage-1 checkpoint (required for stage 2)")
    p.add_argument("--model-id", dest="model_id", type=int, default=0)
    p.add_argument("--bit-depth", dest="bit_depth", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--report")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("rd-sweep", help="encode/decode/eval matrix over a dataset")
    common(p, report=False)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_rd_sweep)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except OSError as e:
        _log(f"I/O error: {e}")
        return EXIT_IO
    except DecodeError as e:
        _log(f"corrupt stream: {e}")
        return EXIT_CORRUPT
    except CodecError as e:
        _log(f"error: {e}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
