"""Bitstream container plus the full encode / decode pipelines.

Layout (all integers little-endian): magic "MGPC", version u8, bit_depth u8,
num_scales u8 (= 3), per-scale occupied-point counts u32[3] ordered full,
half, quarter resolution, model_id u8, then the length-prefixed skeleton and
feature substreams. The feature substream starts with one u32 length per
token group followed by the group payloads in group order.
"""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .autograd import Context, DiffTensor
from .color import yuv_to_rgb
from .entropy import clamp_symbols, quantize
from .errors import ContractError, DecodeError
from .model import CodecModel
from .octree import octree_build, skeleton_decode, skeleton_encode
from .sparse import SparseVoxelTensor, downsample_coords, sort_by_morton

MAGIC = b"MGPC"
VERSION = 1
NUM_SCALES = 3


@dataclass
class BitstreamContainer:
    bit_depth: int
    counts: Tuple[int, int, int]  # occupied points at full, half, quarter res
    model_id: int
    skeleton: bytes
    features: bytes
    version: int = VERSION

    def pack(self) -> bytes:
        head = MAGIC + struct.pack(
            "<BBB3IB", self.version, self.bit_depth, NUM_SCALES,
            self.counts[0], self.counts[1], self.counts[2], self.model_id)
        return (head
                + struct.pack("<I", len(self.skeleton)) + self.skeleton
                + struct.pack("<I", len(self.features)) + self.features)

    @classmethod
    def parse(cls, blob: bytes) -> "BitstreamContainer":
        if len(blob) < 4 or blob[:4] != MAGIC:
            raise DecodeError(f"bad container magic {blob[:4]!r}")
        if len(blob) < 20:
            raise DecodeError(f"container truncated at byte {len(blob)} (header needs 20)")
        version, bit_depth, scales, c0, c1, c2, model_id = struct.unpack_from("<BBB3IB", blob, 4)
        if version != VERSION:
            raise DecodeError(f"unknown container version {version}")
        if scales != NUM_SCALES:
            raise DecodeError(f"container declares {scales} scales, expected {NUM_SCALES}")
        pos = 20
        subs = []
        for name in ("skeleton", "feature"):
            if pos + 4 > len(blob):
                raise DecodeError(f"container truncated at byte {pos} ({name} length)")
            (ln,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if pos + ln > len(blob):
                raise DecodeError(f"container truncated at byte {len(blob)} "
                                  f"({name} payload wants {ln} bytes at {pos})")
            subs.append(blob[pos:pos + ln])
            pos += ln
        if pos != len(blob):
            raise DecodeError(f"{len(blob) - pos} trailing bytes after payload")
        return cls(bit_depth=bit_depth, counts=(c0, c1, c2), model_id=model_id,
                   skeleton=subs[0], features=subs[1], version=version)


def _pack_groups(payloads: List[bytes]) -> bytes:
    out = bytearray()
    for p in payloads:
        out += struct.pack("<I", len(p))
    for p in payloads:
        out += p
    return bytes(out)


def _unpack_groups(blob: bytes, num_groups: int) -> List[bytes]:
    need = 4 * num_groups
    if len(blob) < need:
        raise DecodeError(f"feature substream truncated at byte {len(blob)}")
    lengths = struct.unpack_from(f"<{num_groups}I", blob, 0)
    pos = need
    out = []
    for ln in lengths:
        if pos + ln > len(blob):
            raise DecodeError(f"feature substream truncated at byte {len(blob)}")
        out.append(blob[pos:pos + ln])
        pos += ln
    if pos != len(blob):
        raise DecodeError("feature substream has trailing bytes")
    return out


@dataclass
class EncodeStats:
    num_points: int
    skeleton_bits: int
    feature_bits: int
    header_bits: int
    estimated_feature_bits: float
    seconds: float

    @property
    def total_bits(self) -> int:
        return self.skeleton_bits + self.feature_bits + self.header_bits

    @property
    def bpp_total(self) -> float:
        return self.total_bits / self.num_points

    @property
    def bpp_geometry(self) -> float:
        return self.skeleton_bits / self.num_points

    @property
    def bpp_attribute(self) -> float:
        return self.feature_bits / self.num_points


def encode(pc: SparseVoxelTensor, model: CodecModel,
           model_id: int = 0) -> Tuple[BitstreamContainer, EncodeStats]:
    """Compress a voxelized cloud into a container."""
    t0 = time.perf_counter()
    if pc.num_points == 0:
        raise ContractError("cannot encode an empty cloud")
    if pc.bit_depth < 4 or pc.bit_depth > 12:
        raise ContractError(f"bit_depth {pc.bit_depth} outside [4, 12]")
    ctx = Context(None)
    pyramid, latent_feats = model.encode_latent(ctx, pc)
    latent_depth = pc.bit_depth - 3

    symbols = clamp_symbols(quantize(latent_feats, "round").symbols)
    skeleton = skeleton_encode(octree_build(pyramid[3], latent_depth))
    payloads, est_bits = model.mem.encode_features(symbols)
    features = _pack_groups(payloads)

    counts = (pyramid[0].shape[0], pyramid[1].shape[0], pyramid[2].shape[0])
    container = BitstreamContainer(bit_depth=pc.bit_depth, counts=counts,
                                   model_id=model_id, skeleton=skeleton,
                                   features=features)
    stats = EncodeStats(
        num_points=pc.num_points,
        skeleton_bits=8 * len(skeleton),
        feature_bits=8 * len(features),
        header_bits=8 * (len(container.pack()) - len(skeleton) - len(features)),
        estimated_feature_bits=est_bits,
        seconds=time.perf_counter() - t0,
    )
    return container, stats


def decode(container: BitstreamContainer, model: CodecModel) -> SparseVoxelTensor:
    """Reconstruct coordinates and colors from a container.

    Geometry decodes first; its coordinate pyramid then guides the attribute
    decoder, whose output coordinates equal the geometry decoder's final set.
    """
    latent_depth = container.bit_depth - 3
    if latent_depth < 1:
        raise DecodeError(f"container bit_depth {container.bit_depth} too small")
    latent_coords = skeleton_decode(container.skeleton, latent_depth)

    n_latent = latent_coords.shape[0]
    num_groups = (n_latent + model.mem.group_size - 1) // model.mem.group_size
    payloads = _unpack_groups(container.features, num_groups)
    symbols = model.mem.decode_features(payloads, n_latent)
    latent_feats = DiffTensor(symbols.astype(np.float64))

    ctx = Context(None)
    counts = (container.counts[2], container.counts[1], container.counts[0])
    pyramid, stages = model.decode_geometry(ctx, latent_coords, latent_feats,
                                            latent_depth, counts)
    geo_feats = [kept for (_, _, _, kept) in stages]
    target_pyramid = [pyramid[1], pyramid[2], pyramid[3]]
    yuv = model.decode_attributes(ctx, latent_coords, latent_feats, latent_depth,
                                  target_pyramid, geo_feats)
    rgb = np.clip(yuv_to_rgb(yuv.data) * 255.0, 0.0, 255.0) / 255.0
    final_coords = pyramid[3]
    for scale, expected in zip((3, 2, 1), container.counts):
        if pyramid[scale].shape[0] != expected:
            raise DecodeError(
                f"decoded {pyramid[scale].shape[0]} points at scale {scale}, "
                f"header says {expected}")
    return SparseVoxelTensor(final_coords, rgb, container.bit_depth, validate=False)


def encode_to_file(pc, model, path, model_id: int = 0) -> EncodeStats:
    container, stats = encode(pc, model, model_id)
    with open(path, "wb") as f:
        f.write(container.pack())
    return stats


def decode_from_file(path, model) -> SparseVoxelTensor:
    with open(path, "rb") as f:
        blob = f.read()
    return decode(BitstreamContainer.parse(blob), model)


def ground_truth_pyramid(pc: SparseVoxelTensor) -> List[np.ndarray]:
    """Morton-sorted coordinates at full, half, quarter and latent scale."""
    st = sort_by_morton(pc)
    coords = [st.coords]
    depth = pc.bit_depth
    for _ in range(3):
        coords.append(downsample_coords(coords[-1], depth))
        depth -= 1
    return coords
