"""The unified encoder and the geometry/attribute decoders.

Encoder: three stages of stride-2 sparse convolution followed by a grouped
tri-directional scan block, shrinking the grid by 8x overall and producing
the shared latent (skeleton coordinates + feature tensor). Geometry decodes
first, coarse to fine, keeping the k highest-probability children per scale;
the decoded coordinates then guide the attribute decoder.
"""
from __future__ import annotations

import math
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autograd import (Context, DiffTensor, Parameter, concat_cols,
                       gather_rows, linear, silu)
from .config import ModelConfig
from .entropy import MemModel
from .errors import ConfigError, ContractError, DecodeError
from .sparse import (SparseVoxelTensor, child_candidates, downsample_coords,
                     morton_encode, serialize, sort_by_morton, sparse_conv)
from .ssm import TriMambaBlock, tri_mamba_grouped

INPUT_CHANNELS = 3  # RGB in [0, 1]


def _kernel(prefix: str, k: int, c_in: int, c_out: int, rng) -> Parameter:
    scale = 1.0 / math.sqrt(k ** 3 * c_in)
    return Parameter(prefix, rng.normal(0.0, scale, (k ** 3, c_in, c_out)))


def _linear_pair(prefix: str, c_in: int, c_out: int, rng) -> Tuple[Parameter, Parameter]:
    w = Parameter(f"{prefix}/w", rng.normal(0.0, 1.0 / math.sqrt(c_in), (c_in, c_out)))
    b = Parameter(f"{prefix}/b", np.zeros(c_out))
    return w, b


class CodecModel:
    """All learnable parameters of the codec, keyed by stable names."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config.validate()
        rng = np.random.default_rng(seed)
        c1, c2, c3 = config.channels
        h = config.state_dim

        # unified encoder; the latent-producing conv starts with extra gain so
        # initial symbols are not all rounded to zero (which stalls training)
        self.enc_conv = [
            _kernel("enc/conv0", 2, INPUT_CHANNELS, c1, rng),
            _kernel("enc/conv1", 2, c1, c2, rng),
            _kernel("enc/conv2", 2, c2, c3, rng),
        ]
        self.enc_conv[2].data *= 4.0
        self.enc_blocks = [
            TriMambaBlock("enc/block0", c1, h, rng),
            TriMambaBlock("enc/block1", c2, h, rng),
            TriMambaBlock("enc/block2", c3, h, rng),
        ]

        # geometry decoder: latent -> half -> full resolution; upsampled
        # features are fused with the (known) candidate coordinates
        nc = 3 if config.coord_features else 0
        gwidths = [c3, c2, c1, c1]
        self.gdec_conv = [
            _kernel(f"gdec/conv{i}", 2, gwidths[i], gwidths[i + 1], rng)
            for i in range(3)
        ]
        self.gdec_fuse = [
            _linear_pair(f"gdec/fuse{i}", gwidths[i + 1] + nc, gwidths[i + 1], rng)
            for i in range(3)
        ]
        self.gdec_blocks = [
            TriMambaBlock(f"gdec/block{i}", gwidths[i + 1], h, rng) for i in range(3)
        ]
        self.gdec_heads = [
            _linear_pair(f"gdec/head{i}", gwidths[i + 1], 1, rng) for i in range(3)
        ]

        # attribute decoder mirrors the geometry decoder's upsampling and
        # fuses the geometry features exposed at each scale
        awidths = [c3, c2, c1, c1]
        self.adec_conv = [
            _kernel(f"adec/conv{i}", 2, awidths[i], awidths[i + 1], rng)
            for i in range(3)
        ]
        self.adec_fuse = [
            _linear_pair(f"adec/fuse{i}",
                         awidths[i + 1] + gwidths[i + 1] + nc, awidths[i + 1], rng)
            for i in range(3)
        ]
        self.adec_blocks = [
            TriMambaBlock(f"adec/block{i}", awidths[i + 1], h, rng) for i in range(3)
        ]
        self.adec_head = _linear_pair("adec/head", awidths[3], 3, rng)

        self.mem = MemModel("mem", latent_channels=c3, width=config.mem_width,
                            state=h, group_size=config.mem_group_size, rng=rng)
        self._gwidths = gwidths
        self._awidths = awidths

    # -- parameter plumbing ---------------------------------------------------

    def parameters(self) -> List[Parameter]:
        out: List[Parameter] = []
        out += self.enc_conv
        for b in self.enc_blocks:
            out += b.parameters()
        out += self.gdec_conv
        for w, b in self.gdec_fuse:
            out += [w, b]
        for b in self.gdec_blocks:
            out += b.parameters()
        for w, b in self.gdec_heads:
            out += [w, b]
        out += self.adec_conv
        for w, b in self.adec_fuse:
            out += [w, b]
        for b in self.adec_blocks:
            out += b.parameters()
        out += list(self.adec_head)
        out += self.mem.parameters()
        return out

    def encoder_parameters(self) -> List[Parameter]:
        out: List[Parameter] = list(self.enc_conv)
        for b in self.enc_blocks:
            out += b.parameters()
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state(self, state: Dict[str, np.ndarray], prefixes: Optional[Tuple[str, ...]] = None):
        for p in self.parameters():
            if prefixes is not None and not p.name.startswith(prefixes):
                continue
            if p.name not in state:
                raise ConfigError(f"checkpoint is missing parameter {p.name!r}")
            arr = np.asarray(state[p.name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ConfigError(
                    f"checkpoint parameter {p.name!r} has shape {list(arr.shape)}, "
                    f"model expects {list(p.data.shape)}")
            p.data = arr.copy()
        return self

    # -- encoder ---------------------------------------------------------------

    def _grouped_block(self, ctx: Context, st: SparseVoxelTensor,
                       block: TriMambaBlock, group_size: int) -> SparseVoxelTensor:
        seq = serialize(st, group_size)
        feats = st.feats if isinstance(st.feats, DiffTensor) else DiffTensor(st.feats)
        out = tri_mamba_grouped(ctx, feats, block, seq.group_slices())
        return SparseVoxelTensor(st.coords, out, st.bit_depth, validate=False)

    def encode_latent(self, ctx: Context, pc: SparseVoxelTensor):
        """Run the unified encoder.

        Returns (coord pyramid [full, half, quarter, latent], latent features).
        Rows stay Morton-sorted at every scale.
        """
        if pc.num_points == 0:
            raise ContractError("cannot encode an empty cloud")
        if pc.bit_depth < 4:
            raise ContractError(
                f"bit_depth {pc.bit_depth} too small for three downsamplings")
        st = sort_by_morton(pc)
        coords_pyramid = [st.coords]
        for i in range(3):
            st = sparse_conv(st, ctx.p(self.enc_conv[i]), stride=2)
            st = self._grouped_block(ctx, st, self.enc_blocks[i],
                                     self.config.group_sizes[i])
            coords_pyramid.append(st.coords)
        return coords_pyramid, st.feats

    # -- geometry decoder --------------------------------------------------------

    def _decoder_group_size(self, stage: int) -> int:
        # latent->quarter uses M3's neighbor scale M2, then M1, then M1 at full
        m = self.config.group_sizes
        return (m[1], m[0], m[0])[stage]

    def _coord_channels(self, ctx: Context, coords: np.ndarray, bit_depth: int):
        if not self.config.coord_features:
            return None
        return ctx.const(coords.astype(np.float64) / float(1 << bit_depth))

    def geometry_stage(self, ctx: Context, coords: np.ndarray, feats: DiffTensor,
                       bit_depth: int, stage: int):
        """One upsampling stage: candidates, features and occupancy logits."""
        cand = child_candidates(coords, bit_depth)
        st = SparseVoxelTensor(coords, feats, bit_depth, validate=False)
        up = sparse_conv(st, ctx.p(self.gdec_conv[stage]), stride=2,
                         transposed=True, target_coords=cand)
        parts = [up.feats]
        cc = self._coord_channels(ctx, cand, bit_depth + 1)
        if cc is not None:
            parts.append(cc)
        w, b = self.gdec_fuse[stage]
        fused = silu(linear(concat_cols(parts) if len(parts) > 1 else parts[0],
                            ctx.p(w), ctx.p(b)))
        up = SparseVoxelTensor(cand, fused, bit_depth + 1, validate=False)
        up = self._grouped_block(ctx, up, self.gdec_blocks[stage],
                                 self._decoder_group_size(stage))
        w, b = self.gdec_heads[stage]
        logits = linear(up.feats, ctx.p(w), ctx.p(b))
        return cand, up.feats, logits

    def decode_geometry(self, ctx: Context, latent_coords: np.ndarray,
                        latent_feats: DiffTensor, latent_depth: int,
                        counts: List[int]):
        """Coarse-to-fine geometry decoding with exact per-scale counts.

        counts: occupied-point counts at [quarter, half, full] resolution.
        Returns (coords pyramid from latent to full, features per scale).
        """
        coords = latent_coords
        feats = latent_feats
        depth = latent_depth
        pyramid = [coords]
        feat_pyramid = []
        for stage in range(3):
            cand, cand_feats, logits = self.geometry_stage(ctx, coords, feats, depth, stage)
            k = int(counts[stage])
            if k > cand.shape[0]:
                raise DecodeError(
                    f"header count {k} exceeds {cand.shape[0]} candidates at stage {stage}")
            keep = top_k_indices(logits.data[:, 0], k)
            coords = cand[keep]
            feats = gather_rows(cand_feats, keep)
            depth += 1
            pyramid.append(coords)
            feat_pyramid.append((cand, logits, keep, feats))
        return pyramid, feat_pyramid

    # -- attribute decoder ---------------------------------------------------------

    def decode_attributes(self, ctx: Context, latent_coords: np.ndarray,
                          latent_feats: DiffTensor, latent_depth: int,
                          coord_pyramid: List[np.ndarray],
                          geo_feats: Optional[List[Optional[DiffTensor]]] = None) -> DiffTensor:
        """Place attribute features on the decoded coordinates at each scale
        and emit YUV in [0, 1] at the finest scale.

        coord_pyramid: target coordinates per stage (quarter, half, full).
        geo_feats: per-stage geometry-decoder features aligned with those
        coordinates, or None (attribute-only training) for a zero context.
        """
        st = SparseVoxelTensor(latent_coords, latent_feats, latent_depth, validate=False)
        for stage in range(3):
            target = coord_pyramid[stage]
            up = sparse_conv(st, ctx.p(self.adec_conv[stage]), stride=2,
                             transposed=True, target_coords=target)
            gf = None if geo_feats is None else geo_feats[stage]
            if gf is None:
                gdata = ctx.const(np.zeros((target.shape[0], self._gwidths[stage + 1])))
            else:
                gdata = gf
            parts = [up.feats, gdata]
            cc = self._coord_channels(ctx, target, up.bit_depth)
            if cc is not None:
                parts.append(cc)
            fused = concat_cols(parts)
            w, b = self.adec_fuse[stage]
            fused = silu(linear(fused, ctx.p(w), ctx.p(b)))
            st = SparseVoxelTensor(target, fused, up.bit_depth, validate=False)
            st = self._grouped_block(ctx, st, self.adec_blocks[stage],
                                     self._decoder_group_size(stage))
        w, b = self.adec_head
        yuv = linear(st.feats, ctx.p(w), ctx.p(b))
        return yuv


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties broken by ascending row index
    (rows are Morton-ordered), result sorted ascending."""
    if k < 0 or k > scores.shape[0]:
        raise ContractError(f"top-k of {k} from {scores.shape[0]} candidates")
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])
