"""Objective quality metrics (D1/D2-PSNR, Y/YUV-PSNR) and Bjontegaard-delta
rate computation for rate-distortion reporting."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .color import rgb_to_yuv
from .errors import ContractError
from .sparse import SparseVoxelTensor, morton_encode
from .training import nearest_indices

PSNR_CAP = 999.0
NORMAL_NEIGHBORS = 12


@dataclass
class RdPoint:
    bits_per_point: float
    quality: float
    label: str = ""

    def __post_init__(self):
        if self.bits_per_point <= 0:
            raise ContractError("bits_per_point must be positive")


def _psnr(mse: float, peak: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP
    return float(10.0 * np.log10(peak / mse))


def _coords(cloud) -> np.ndarray:
    if isinstance(cloud, SparseVoxelTensor):
        return cloud.coords.astype(np.float64)
    return np.asarray(cloud, dtype=np.float64)[:, :3]


def _directional_sq_dists(src: np.ndarray, dst: np.ndarray, dst_codes) -> np.ndarray:
    idx = nearest_indices(src, dst, dst_codes)
    diff = src - dst[idx]
    return (diff * diff).sum(axis=1)


def d1_psnr(recon, reference, bit_depth: int) -> float:
    """Symmetric point-to-point PSNR: 10 log10(3 p^2 / MSE) with
    p = 2^bit_depth - 1 and MSE the max of the two directional means."""
    a, b = _coords(recon), _coords(reference)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("d1_psnr: empty cloud")
    codes_a = morton_encode(a.astype(np.int64), bit_depth)
    codes_b = morton_encode(b.astype(np.int64), bit_depth)
    d_ab = _directional_sq_dists(a, b, codes_b)
    d_ba = _directional_sq_dists(b, a, codes_a)
    mse = max(d_ab.mean(), d_ba.mean())
    p = float((1 << bit_depth) - 1)
    return _psnr(mse, 3.0 * p * p)


def estimate_normals(xyz: np.ndarray, k: int = NORMAL_NEIGHBORS) -> Tuple[np.ndarray, np.ndarray]:
    """Per-point unit normals from a local plane fit over k nearest
    neighbors. Returns (normals, valid) where valid is False for degenerate
    (rank < 2) neighborhoods."""
    n = xyz.shape[0]
    kk = min(k + 1, n)
    tree = cKDTree(xyz)
    _, idx = tree.query(xyz, k=kk)
    if kk == 1:
        idx = idx[:, None]
    nbrs = xyz[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / kk
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    valid = w[:, 1] > 1e-9 * np.maximum(w[:, 2], 1e-30)
    return normals, valid


def d2_psnr(recon, reference, bit_depth: int) -> float:
    """Symmetric point-to-plane PSNR; each direction projects the error onto
    the matched target point's normal, falling back to the point-to-point
    distance on degenerate neighborhoods."""
    a, b = _coords(recon), _coords(reference)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ContractError("d2_psnr: empty cloud")

    def directional(src, dst, dst_codes):
        idx = nearest_indices(src, dst, dst_codes)
        diff = src - dst[idx]
        normals, valid = estimate_normals(dst)
        proj = np.einsum("ij,ij->i", diff, normals[idx])
        sq = np.where(valid[idx], proj * proj, (diff * diff).sum(axis=1))
        return sq.mean()

    codes_a = morton_encode(a.astype(np.int64), bit_depth)
    codes_b = morton_encode(b.astype(np.int64), bit_depth)
    mse = max(directional(a, b, codes_b), directional(b, a, codes_a))
    p = float((1 << bit_depth) - 1)
    return _psnr(mse, 3.0 * p * p)


def _attribute_mses(recon: SparseVoxelTensor, reference: SparseVoxelTensor) -> np.ndarray:
    """Bidirectional per-component YUV MSE on the 0..255 scale.

    Attributes are RGB on the [0, 1] scale (the library-wide convention)."""
    fa = recon.feat_array()
    fb = reference.feat_array()
    if fa.shape[1] < 3 or fb.shape[1] < 3:
        raise ContractError("attribute metrics require RGB attributes")
    ya = rgb_to_yuv(fa[:, :3]) * 255.0
    yb = rgb_to_yuv(fb[:, :3]) * 255.0
    codes_a = morton_encode(recon.coords, recon.bit_depth)
    codes_b = morton_encode(reference.coords, reference.bit_depth)
    xa = recon.coords.astype(np.float64)
    xb = reference.coords.astype(np.float64)
    ab = nearest_indices(xa, xb, codes_b)
    ba = nearest_indices(xb, xa, codes_a)
    m_ab = ((ya - yb[ab]) ** 2).mean(axis=0)
    m_ba = ((yb - ya[ba]) ** 2).mean(axis=0)
    return 0.5 * (m_ab + m_ba)


def y_psnr(recon: SparseVoxelTensor, reference: SparseVoxelTensor) -> float:
    mses = _attribute_mses(recon, reference)
    return _psnr(float(mses[0]), 255.0 * 255.0)


def yuv_psnr(recon: SparseVoxelTensor, reference: SparseVoxelTensor) -> float:
    """(6 PSNR_Y + PSNR_U + PSNR_V) / 8 with peak 255."""
    mses = _attribute_mses(recon, reference)
    py, pu, pv = (_psnr(float(m), 255.0 * 255.0) for m in mses)
    return (6.0 * py + pu + pv) / 8.0


# ---------------------------------------------------------------------------
# Bjontegaard delta rate

def _check_curve(curve: Sequence[RdPoint], name: str) -> Tuple[np.ndarray, np.ndarray]:
    if len(curve) < 4:
        raise ContractError(f"{name}: BD-rate needs at least 4 points")
    pts = sorted(curve, key=lambda p: p.bits_per_point)
    rate = np.array([p.bits_per_point for p in pts])
    qual = np.array([p.quality for p in pts])
    if np.any(np.diff(qual) < 0):
        raise ContractError(f"{name}: quality must be monotone in rate")
    return rate, qual


def bd_rate(curve_a: Sequence[RdPoint], curve_b: Sequence[RdPoint]) -> float:
    """Average percent rate difference of curve_b against curve_a over the
    overlapping quality interval, from cubic fits of log-rate vs quality."""
    rate_a, qual_a = _check_curve(curve_a, "curve_a")
    rate_b, qual_b = _check_curve(curve_b, "curve_b")
    poly_a = np.polyfit(qual_a, np.log(rate_a), 3)
    poly_b = np.polyfit(qual_b, np.log(rate_b), 3)
    lo = max(qual_a.min(), qual_b.min())
    hi = min(qual_a.max(), qual_b.max())
    if hi <= lo:
        raise ContractError("BD-rate undefined: quality ranges do not overlap")
    int_a = np.polyval(np.polyint(poly_a), [lo, hi])
    int_b = np.polyval(np.polyint(poly_b), [lo, hi])
    avg_diff = ((int_b[1] - int_b[0]) - (int_a[1] - int_a[0])) / (hi - lo)
    return float((np.exp(avg_diff) - 1.0) * 100.0)


RD_REPORT_COLUMNS = ["sequence", "model_id", "bpp_total", "bpp_geometry",
                     "bpp_attribute", "d1_psnr", "d2_psnr", "y_psnr", "yuv_psnr"]


def rd_report_rows_to_csv(rows: List[dict]) -> str:
    lines = [",".join(RD_REPORT_COLUMNS)]
    for row in rows:
        cells = []
        for col in RD_REPORT_COLUMNS:
            v = row.get(col, "")
            if isinstance(v, float):
                cells.append(f"{v:.6f}")
            else:
                cells.append(str(v))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
