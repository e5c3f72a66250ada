"""Two-stage training: attribute-only warm start, then joint optimization of
rate, attribute distortion and geometry occupancy. Includes the bidirectional
attribute distortion and the synthetic desk-scale dataset."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .autograd import (Adam, Context, DiffTensor, Tape, gather_rows, linear,
                       softplus, straight_through_round, tmean, tsum)
from .codec import ground_truth_pyramid
from .color import rgb_to_yuv
from .config import ModelConfig, TrainConfig
from .entropy import quantize
from .errors import ConfigError, ContractError, NumericError
from .model import CodecModel, top_k_indices
from .sparse import SparseVoxelTensor, morton_encode, sort_by_morton, voxelize

_PEAK_SQ = 255.0 * 255.0


# ---------------------------------------------------------------------------
# losses

def loss_attribute(rate_bits_per_point, d_a, lambda_a: float):
    """Stage-1 objective: R + lambda_A * D_A (D_A in squared 8-bit YUV units)."""
    return rate_bits_per_point + lambda_a * d_a


def loss_unified(rate_bits_per_point, d_a, d_g, lambda_a: float, lambda_g: float):
    """Joint objective: R + lambda_A * D_A + lambda_G * D_G."""
    return rate_bits_per_point + lambda_a * d_a + lambda_g * d_g


def bce_with_logits(logits: DiffTensor, targets: np.ndarray) -> DiffTensor:
    """Mean binary cross-entropy; softplus(z) - z*y form."""
    t = DiffTensor(np.asarray(targets, dtype=np.float64).reshape(logits.data.shape))
    return tmean(softplus(logits) - logits * t)


# ---------------------------------------------------------------------------
# nearest-neighbor matching with deterministic Morton tie-breaking

def nearest_indices(query_xyz: np.ndarray, ref_xyz: np.ndarray,
                    ref_codes: np.ndarray) -> np.ndarray:
    """Index of the nearest reference point for every query point; exact ties
    in Euclidean distance resolve to the smallest reference Morton code."""
    n = ref_xyz.shape[0]
    if n == 0:
        raise ContractError("nearest_indices: empty reference cloud")
    tree = cKDTree(ref_xyz)
    k = min(8, n)
    while True:
        d, idx = tree.query(query_xyz, k=k)
        if k == 1:
            d, idx = d[:, None], idx[:, None]
        tol = d[:, :1] * 1e-12 + 1e-9
        tie = d <= d[:, :1] + tol
        if k >= n or not tie[:, -1].any():
            break
        k = min(n, k * 4)
    codes = ref_codes[idx]
    codes = np.where(tie, codes, np.iinfo(np.int64).max)
    col = np.argmin(codes, axis=1)
    return idx[np.arange(query_xyz.shape[0]), col]


def match_clouds(coords_a: np.ndarray, coords_b: np.ndarray, bit_depth: int):
    """(a->b indices, b->a indices) under the Morton tie rule."""
    codes_a = morton_encode(coords_a, bit_depth)
    codes_b = morton_encode(coords_b, bit_depth)
    ab = nearest_indices(coords_a.astype(np.float64), coords_b.astype(np.float64), codes_b)
    ba = nearest_indices(coords_b.astype(np.float64), coords_a.astype(np.float64), codes_a)
    return ab, ba


def bidirectional_mse(coords_a, yuv_a, coords_b, yuv_b, bit_depth: int) -> float:
    """Symmetric nearest-neighbor YUV MSE between two attributed clouds,
    in squared 8-bit YUV units."""
    coords_a = np.asarray(coords_a)
    coords_b = np.asarray(coords_b)
    if coords_a.shape[0] == 0 or coords_b.shape[0] == 0:
        raise ContractError("bidirectional_mse: empty cloud")
    ab, ba = match_clouds(coords_a, coords_b, bit_depth)
    d_ab = np.mean((np.asarray(yuv_a) - np.asarray(yuv_b)[ab]) ** 2) * _PEAK_SQ
    d_ba = np.mean((np.asarray(yuv_b) - np.asarray(yuv_a)[ba]) ** 2) * _PEAK_SQ
    return 0.5 * (d_ab + d_ba)


def bidirectional_mse_graph(ctx: Context, recon_coords: np.ndarray,
                            recon_yuv: DiffTensor, ref_coords: np.ndarray,
                            ref_yuv: np.ndarray, bit_depth: int) -> DiffTensor:
    """Differentiable bidirectional YUV distortion (gradients reach the
    reconstruction's attributes; the matching itself is fixed)."""
    ab, ba = match_clouds(recon_coords, ref_coords, bit_depth)
    ref_t = ctx.const(ref_yuv)
    e_ab = recon_yuv - ctx.const(ref_yuv[ab])
    e_ba = gather_rows(recon_yuv, ba) - ref_t
    d_ab = tmean(e_ab * e_ab)
    d_ba = tmean(e_ba * e_ba)
    return (d_ab + d_ba) * (0.5 * _PEAK_SQ)


# ---------------------------------------------------------------------------
# per-cloud training graph

@dataclass
class StepOutputs:
    loss: DiffTensor
    rate: float
    d_a: float
    d_g: Optional[float]


def _membership(cand_codes: np.ndarray, gt_codes: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(gt_codes, cand_codes)
    pos = np.clip(pos, 0, gt_codes.size - 1)
    return (gt_codes[pos] == cand_codes).astype(np.float64)


def _rows_of(cand_codes: np.ndarray, wanted_codes: np.ndarray) -> np.ndarray:
    rows = np.searchsorted(cand_codes, wanted_codes)
    if rows.max(initial=-1) >= cand_codes.size or not np.array_equal(cand_codes[rows], wanted_codes):
        raise ContractError("ground-truth voxels missing from candidate set")
    return rows


def training_graph(model: CodecModel, pc: SparseVoxelTensor, stage: str,
                   lambda_a: float, lambda_g: float, rng: np.random.Generator,
                   use_decoded_geometry: bool = False,
                   relax_distortion: bool = False,
                   ctx_out: Optional[list] = None) -> StepOutputs:
    """Build the full loss graph for one cloud.

    stage "attribute_only": rate + attribute distortion on ground-truth
    geometry; the geometry decoder is never touched. stage "joint": adds the
    occupancy BCE over all three decoder scales, and optionally conditions
    the attribute decoder on decoded (rolled-out) geometry.

    The rate term always uses the additive-noise relaxation. The distortion
    path consumes straight-through-rounded symbols, or (relax_distortion) the
    same noisy latents, which makes the whole objective differentiable for
    finite-difference checks.
    """
    tape = Tape()
    ctx = Context(tape)
    if ctx_out is not None:
        ctx_out.append(ctx)
    st = sort_by_morton(pc)
    n0 = st.num_points
    gt_coords = ground_truth_pyramid(st)  # full, half, quarter, latent
    gt_yuv = rgb_to_yuv(st.feat_array())

    coords_pyr, latent = model.encode_latent(ctx, st)
    latent_depth = st.bit_depth - 3

    noisy = quantize(latent, "noise", rng)
    rate_bits = model.mem.rate_bits(ctx, noisy)
    rate = rate_bits * (1.0 / n0)

    ste_latent = noisy if relax_distortion else straight_through_round(latent)

    d_g_term = None
    geo_feats: Optional[List[Optional[DiffTensor]]] = None
    target_pyramid = [gt_coords[2], gt_coords[1], gt_coords[0]]

    if stage == "joint":
        depth = latent_depth
        parent_coords = gt_coords[3]
        feats = ste_latent
        bce_terms = []
        rollout_pyramid = []
        geo_feats = []
        for s in range(3):
            gt_next = gt_coords[2 - s]
            cand, cand_feats, logits = model.geometry_stage(
                ctx, parent_coords, feats, depth, s)
            cand_codes = morton_encode(cand, depth + 1)
            gt_next_codes = morton_encode(gt_next, depth + 1)
            labels = _membership(cand_codes, gt_next_codes)
            bce_terms.append(bce_with_logits(logits, labels))
            if use_decoded_geometry:
                keep = top_k_indices(logits.data[:, 0], gt_next.shape[0])
            else:
                keep = _rows_of(cand_codes, gt_next_codes)
            parent_coords = cand[keep]
            feats = gather_rows(cand_feats, keep)
            depth += 1
            rollout_pyramid.append(parent_coords)
            geo_feats.append(feats)
        d_g_term = (bce_terms[0] + bce_terms[1] + bce_terms[2]) * (1.0 / 3.0)
        if use_decoded_geometry:
            target_pyramid = rollout_pyramid

    yuv_pred = model.decode_attributes(ctx, gt_coords[3], ste_latent, latent_depth,
                                       target_pyramid, geo_feats)

    if stage == "joint" and use_decoded_geometry:
        d_a_term = bidirectional_mse_graph(ctx, target_pyramid[2], yuv_pred,
                                           gt_coords[0], gt_yuv, st.bit_depth)
    else:
        err = yuv_pred - ctx.const(gt_yuv)
        d_a_term = tmean(err * err) * _PEAK_SQ

    if stage == "attribute_only":
        loss = loss_attribute(rate, d_a_term, lambda_a)
        d_g_val = None
    else:
        loss = loss_unified(rate, d_a_term, d_g_term, lambda_a, lambda_g)
        d_g_val = float(d_g_term.data)
    return StepOutputs(loss=loss, rate=float(rate.data),
                       d_a=float(d_a_term.data), d_g=d_g_val)


# ---------------------------------------------------------------------------
# training loops

@dataclass
class StageResult:
    log: List[Dict[str, float]] = field(default_factory=list)
    touched_params: set = field(default_factory=set)
    geometry_modes: List[str] = field(default_factory=list)

    def log_csv(self) -> str:
        lines = ["epoch,step,R,D_A,D_G,L,lr"]
        for row in self.log:
            d_g = "" if row["D_G"] is None else f"{row['D_G']:.6f}"
            lines.append(f"{row['epoch']},{row['step']},{row['R']:.6f},"
                         f"{row['D_A']:.6f},{d_g},{row['L']:.6f},{row['lr']:.3e}")
        return "\n".join(lines) + "\n"


def _clip_grads(grads: Dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = grads[k] * scale


def run_stage(model: CodecModel, dataset: Sequence[SparseVoxelTensor],
              cfg: TrainConfig, trainable=None) -> StageResult:
    """Optimize one stage; deterministic for a fixed seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = trainable if trainable is not None else model.parameters()
    opt = Adam(params, lr=cfg.lr_initial)
    result = StageResult()
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        use_decoded = cfg.stage == "joint" and epoch >= cfg.gt_geometry_epochs
        result.geometry_modes.append("decoded" if use_decoded else "gt")
        order = rng.permutation(len(dataset))
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            acc: Dict[str, np.ndarray] = {}
            tot = {"R": 0.0, "D_A": 0.0, "D_G": 0.0, "L": 0.0, "has_g": False}
            for ci in batch:
                ctx_box: list = []
                out = training_graph(model, dataset[ci], cfg.stage,
                                     cfg.lambda_a, cfg.lambda_g, rng,
                                     use_decoded_geometry=use_decoded,
                                     ctx_out=ctx_box)
                ctx = ctx_box[0]
                result.touched_params |= ctx.touched
                lval = float(out.loss.data)
                if not math.isfinite(lval):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {step}: "
                        f"R={out.rate} D_A={out.d_a} D_G={out.d_g}")
                grads = ctx.param_grads(ctx.tape.backward(out.loss))
                for name, g in grads.items():
                    acc[name] = acc.get(name, 0.0) + g / len(batch)
                tot["R"] += out.rate / len(batch)
                tot["D_A"] += out.d_a / len(batch)
                tot["L"] += lval / len(batch)
                if out.d_g is not None:
                    tot["D_G"] += out.d_g / len(batch)
                    tot["has_g"] = True
            _clip_grads(acc, cfg.max_grad_norm)
            opt.step(acc, lr=lr)
            result.log.append({
                "epoch": epoch, "step": step, "R": tot["R"], "D_A": tot["D_A"],
                "D_G": tot["D_G"] if tot["has_g"] else None,
                "L": tot["L"], "lr": lr,
            })
            step += 1
    return result


def stage2_model(model_cfg: ModelConfig, stage1_state: Dict[str, np.ndarray],
                 seed: int = 1) -> CodecModel:
    """Fresh model for joint training: encoder, attribute decoder and entropy
    model initialized from the stage-1 checkpoint, geometry decoder random."""
    if stage1_state is None:
        raise ConfigError("joint stage requires a stage-1 checkpoint")
    model = CodecModel(model_cfg, seed=seed)
    model.load_state(stage1_state, prefixes=("enc/", "adec/", "mem/"))
    return model


@dataclass
class TwoStageResult:
    model: CodecModel
    stage1: StageResult
    stage2: StageResult
    stage1_state: Dict[str, np.ndarray]
    stage2_state: Dict[str, np.ndarray]


def train_two_stage(model_cfg: ModelConfig, stage1_cfg: TrainConfig,
                    stage2_cfg: TrainConfig,
                    dataset: Sequence[SparseVoxelTensor],
                    seed: int = 0) -> TwoStageResult:
    stage1_cfg.stage = "attribute_only"
    stage2_cfg.stage = "joint"
    model = CodecModel(model_cfg, seed=seed)
    res1 = run_stage(model, dataset, stage1_cfg)
    state1 = {k: v.copy() for k, v in model.state_dict().items()}
    model2 = stage2_model(model_cfg, state1, seed=seed + 1)
    res2 = run_stage(model2, dataset, stage2_cfg)
    state2 = {k: v.copy() for k, v in model2.state_dict().items()}
    return TwoStageResult(model=model2, stage1=res1, stage2=res2,
                          stage1_state=state1, stage2_state=state2)


def smoothed(values: Sequence[float], window: int = 20) -> List[float]:
    """Trailing moving average used by the loss-trend checks."""
    out = []
    acc = 0.0
    vals = list(values)
    for i, v in enumerate(vals):
        acc += v
        if i >= window:
            acc -= vals[i - window]
        out.append(acc / min(i + 1, window))
    return out


# ---------------------------------------------------------------------------
# synthetic data

def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def synth_dataset(seed: int, n_clouds: int, bit_depth: int,
                  points_per_cloud: Tuple[int, int] = (260, 520)) -> List[SparseVoxelTensor]:
    """Colored primitives (planes, spheres, boxes) with smooth color
    gradients plus noise; deterministic per seed.

    Surfaces are rasterized densely (the primitive's size, not the sampling
    density, sets the voxel count) so downsampling behaves like it does on
    real scanned surfaces."""
    if bit_depth > 8:
        raise ContractError(f"synthetic clouds support bit_depth <= 8, got {bit_depth}")
    rng = np.random.default_rng(seed)
    side = 1 << bit_depth
    out = []
    for i in range(n_clouds):
        kind = ("plane", "sphere", "box")[i % 3]
        target = float(rng.integers(points_per_cloud[0], points_per_cloud[1] + 1))
        n = int(target * 25)  # oversample so every intersected voxel fills
        center = rng.uniform(0.4 * side, 0.6 * side, size=3)
        if kind == "plane":
            u = _unit(rng)
            w = _unit(rng)
            w -= u * (u @ w)
            w /= np.linalg.norm(w)
            half = 0.5 * np.sqrt(target)
            a = rng.uniform(-half, half, size=(n, 1))
            b = rng.uniform(-half, half, size=(n, 1))
            xyz = center + a * u + b * w
        elif kind == "sphere":
            radius = np.sqrt(target / (4.0 * np.pi)) * 1.1
            dirs = rng.normal(size=(n, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            xyz = center + radius * dirs
        else:
            half = np.sqrt(target / 6.0) * 0.55 * rng.uniform(0.8, 1.2, size=3)
            face = rng.integers(0, 6, size=n)
            xyz = rng.uniform(-1.0, 1.0, size=(n, 3))
            axis = face // 2
            sign = np.where(face % 2 == 0, -1.0, 1.0)
            xyz[np.arange(n), axis] = sign
            xyz = center + xyz * half
        xyz = np.clip(xyz, 0, side - 1)

        base = rng.uniform(50, 205, size=3)
        grad = rng.uniform(-1.0, 1.0, size=(3, 3)) * rng.uniform(2.0, 6.0)
        rgb = base + (xyz - center) @ grad.T + rng.normal(0.0, 3.0, size=(n, 3))
        rgb = np.clip(rgb, 0, 255)
        out.append(voxelize(np.hstack([xyz, rgb]), bit_depth))
    return out
