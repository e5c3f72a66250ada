"""Self-contained lossless octree occupancy coder for the latent skeleton.

Masks are coded bit by bit with adaptive binary contexts keyed on
(child index, count of already-coded occupied siblings) through the range
coder; decode is exact.
"""
from __future__ import annotations

import struct
from typing import List

import numpy as np

from .entropy import AdaptiveBitModel, RangeDecoder, RangeEncoder
from .errors import ContractError, DecodeError
from .sparse import morton_decode, morton_encode

_NUM_CONTEXTS = 64  # 8 child slots x up to 8 already-set siblings


def octree_build(coords: np.ndarray, bit_depth: int) -> List[np.ndarray]:
    """Breadth-first occupancy masks, one uint8 array per level, root first.

    Level i holds one mask per occupied node at depth i, ordered by Morton
    code; children are indexed by octant (Morton low bits of the child).
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if coords.shape[0] == 0:
        raise ContractError("octree_build: empty coordinate set")
    codes = np.sort(morton_encode(coords, bit_depth))
    if np.unique(codes).size != codes.size:
        raise ContractError("octree_build: duplicate coordinates")
    levels: List[np.ndarray] = []
    for _ in range(bit_depth):
        parents = codes >> 3
        uniq, start = np.unique(parents, return_index=True)
        bits = (np.int64(1) << (codes & 7)).astype(np.int64)
        masks = np.bitwise_or.reduceat(bits, start).astype(np.uint8)
        levels.append(masks)
        codes = uniq
    levels.reverse()
    return levels


def octree_leaves(levels: List[np.ndarray], bit_depth: int) -> np.ndarray:
    """Rebuild the Morton-sorted leaf coordinates from occupancy masks."""
    codes = np.zeros(1, dtype=np.int64)
    octants = np.arange(8, dtype=np.int64)
    for masks in levels:
        masks = np.asarray(masks, dtype=np.int64)
        present = (masks[:, None] >> octants[None, :]) & 1
        kids = (codes[:, None] << 3) | octants[None, :]
        codes = kids[present.astype(bool)]
    return morton_decode(codes, bit_depth)


def _skeleton_model() -> AdaptiveBitModel:
    model = AdaptiveBitModel(_NUM_CONTEXTS)
    model.c0[:] = 3  # occupancy masks are sparse; bias contexts toward zero
    return model


def _code_mask(mask: int, coder, model: AdaptiveBitModel, decode: bool) -> int:
    out = 0
    seen = 0
    for pos in range(8):
        if pos == 7 and seen == 0:
            # masks are never empty, so a trailing lone bit is implied
            bit = 1
        else:
            ctx = pos * 8 + seen
            if decode:
                bit = coder.decode_bit(model.f0(ctx))
            else:
                bit = (mask >> pos) & 1
                coder.encode_bit(bit, model.f0(ctx))
            model.update(ctx, bit)
        if bit:
            out |= 1 << pos
            seen += 1
    return out


def skeleton_encode(levels: List[np.ndarray]) -> bytes:
    """Serialize octree levels: depth u8, root-level node count u16, then
    adaptively range-coded mask bits."""
    depth = len(levels)
    if depth < 1 or depth > 255:
        raise ContractError(f"skeleton depth {depth} out of range")
    root_count = len(levels[0])
    header = struct.pack("<BH", depth, root_count)
    model = _skeleton_model()
    enc = RangeEncoder()
    for masks in levels:
        for mask in masks:
            _code_mask(int(mask), enc, model, decode=False)
    return header + enc.finish()


def skeleton_decode(data: bytes, bit_depth: int) -> np.ndarray:
    """Decode a skeleton substream back to Morton-sorted coordinates."""
    if len(data) < 3:
        raise DecodeError("skeleton substream shorter than its header")
    depth, root_count = struct.unpack_from("<BH", data, 0)
    if depth != bit_depth:
        raise DecodeError(
            f"skeleton depth {depth} does not match expected bit depth {bit_depth}")
    model = _skeleton_model()
    dec = RangeDecoder(data[3:])
    levels = []
    count = root_count
    for _ in range(depth):
        masks = np.empty(count, dtype=np.uint8)
        for i in range(count):
            mask = _code_mask(0, dec, model, decode=True)
            if mask == 0:
                raise DecodeError("decoded an empty occupancy mask")
            masks[i] = mask
        levels.append(masks)
        count = int(np.unpackbits(masks).sum())
    return octree_leaves(levels, depth)


def encoder_context_trace(levels: List[np.ndarray]):
    """Context-state snapshots after every coded mask (paired-simulation aid)."""
    model = _skeleton_model()
    enc = RangeEncoder()
    trace = []
    for masks in levels:
        for mask in masks:
            _code_mask(int(mask), enc, model, decode=False)
            trace.append(model.state())
    return trace, enc.finish()


def decoder_context_trace(payload: bytes, depth: int):
    """Decoder-side counterpart of encoder_context_trace."""
    model = _skeleton_model()
    dec = RangeDecoder(payload)
    trace = []
    count = 1
    for _ in range(depth):
        masks = []
        for _ in range(count):
            masks.append(_code_mask(0, dec, model, decode=True))
            trace.append(model.state())
        count = int(np.unpackbits(np.array(masks, dtype=np.uint8)).sum())
    return trace
