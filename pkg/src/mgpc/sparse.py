"""Sparse voxel tensors: voxelization, Morton-order serialization and
generalized sparse convolution with stride-2 down/upsampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np

from .autograd import DiffTensor, _from_op, _lift
from .errors import ContractError, DimensionError, RangeError

Feats = Union[np.ndarray, DiffTensor]


def _feat_data(feats: Feats) -> np.ndarray:
    return feats.data if isinstance(feats, DiffTensor) else feats


class SparseVoxelTensor:
    """Unique integer coordinates over a [0, 2^bit_depth)^3 grid plus an
    aligned N x C feature matrix (a DiffTensor while training)."""

    def __init__(self, coords: np.ndarray, feats: Feats, bit_depth: int, validate: bool = True):
        self.coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        self.feats = feats
        self.bit_depth = int(bit_depth)
        if validate:
            self._validate()

    def _validate(self):
        n = self.coords.shape[0]
        fd = _feat_data(self.feats)
        if fd.ndim != 2 or fd.shape[0] != n:
            raise DimensionError(
                f"feats {list(fd.shape)} do not align with {n} coordinates")
        if n:
            if self.coords.min() < 0 or self.coords.max() >= (1 << self.bit_depth):
                raise RangeError(
                    f"coordinates outside [0, 2^{self.bit_depth}) grid")
            codes = morton_encode(self.coords, self.bit_depth)
            if np.unique(codes).size != n:
                raise ContractError("duplicate voxel coordinates")

    @property
    def num_points(self) -> int:
        return self.coords.shape[0]

    @property
    def num_channels(self) -> int:
        return _feat_data(self.feats).shape[1]

    def feat_array(self) -> np.ndarray:
        return _feat_data(self.feats)

    def __repr__(self):
        return (f"SparseVoxelTensor(points={self.num_points}, "
                f"channels={self.num_channels}, bit_depth={self.bit_depth})")


# ---------------------------------------------------------------------------
# Morton (z-order) codes: x in the least-significant slot of each bit triple

def _spread3(v: np.ndarray, bit_depth: int) -> np.ndarray:
    out = np.zeros_like(v, dtype=np.uint64)
    v = v.astype(np.uint64)
    for i in range(bit_depth):
        out |= ((v >> np.uint64(i)) & np.uint64(1)) << np.uint64(3 * i)
    return out


def morton_encode(coords, bit_depth: int):
    """Interleave coordinate bits, z,y,x per level with x least significant."""
    if not 1 <= bit_depth or 3 * bit_depth > 63:
        raise RangeError(f"bit_depth {bit_depth} outside supported range")
    arr = np.asarray(coords, dtype=np.int64)
    scalar = arr.ndim == 1
    arr = arr.reshape(-1, 3)
    if arr.size and (arr.min() < 0 or arr.max() >= (1 << bit_depth)):
        raise RangeError(
            f"coordinate outside [0, 2^{bit_depth}) for Morton encoding")
    code = (_spread3(arr[:, 0], bit_depth)
            | (_spread3(arr[:, 1], bit_depth) << np.uint64(1))
            | (_spread3(arr[:, 2], bit_depth) << np.uint64(2)))
    code = code.astype(np.int64)
    return int(code[0]) if scalar else code


def _compact3(code: np.ndarray, bit_depth: int) -> np.ndarray:
    out = np.zeros_like(code, dtype=np.uint64)
    for i in range(bit_depth):
        out |= ((code >> np.uint64(3 * i)) & np.uint64(1)) << np.uint64(i)
    return out


def morton_decode(codes, bit_depth: int):
    """Inverse of morton_encode."""
    if not 1 <= bit_depth or 3 * bit_depth > 63:
        raise RangeError(f"bit_depth {bit_depth} outside supported range")
    arr = np.asarray(codes, dtype=np.int64)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    if arr.size and (arr.min() < 0 or arr.max() >= (1 << (3 * bit_depth))):
        raise RangeError("Morton code outside grid for given bit_depth")
    u = arr.astype(np.uint64)
    xyz = np.stack([
        _compact3(u, bit_depth),
        _compact3(u >> np.uint64(1), bit_depth),
        _compact3(u >> np.uint64(2), bit_depth),
    ], axis=1).astype(np.int64)
    return xyz[0] if scalar else xyz


# ---------------------------------------------------------------------------
# voxelization

def voxelize(points, bit_depth: int) -> SparseVoxelTensor:
    """Floor float coordinates to the grid, clamp, merge duplicate voxels by
    arithmetic-mean attributes and scale attributes to [0, 1] (assumed 8-bit)."""
    if not 1 <= bit_depth <= 12:
        raise RangeError(f"bit_depth must be in [1, 12], got {bit_depth}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 6)
    if pts.shape[0] == 0:
        raise ContractError("cannot voxelize an empty point list")
    side = 1 << bit_depth
    ijk = np.clip(np.floor(pts[:, :3]).astype(np.int64), 0, side - 1)
    codes = morton_encode(ijk, bit_depth)
    order = np.argsort(codes, kind="stable")
    codes = codes[order]
    rgb = pts[order, 3:6]
    uniq, start = np.unique(codes, return_index=True)
    sums = np.add.reduceat(rgb, start, axis=0)
    counts = np.diff(np.append(start, codes.size))
    feats = (sums / counts[:, None]) / 255.0
    coords = morton_decode(uniq, bit_depth)
    return SparseVoxelTensor(coords, feats, bit_depth, validate=False)


# ---------------------------------------------------------------------------
# serialization

@dataclass
class SerializedSequence:
    """Permutation sorting points by Morton code plus contiguous groups."""

    order: np.ndarray
    group_size: int
    num_points: int

    def group_slices(self) -> List[slice]:
        m = self.group_size
        return [slice(i, min(i + m, self.num_points))
                for i in range(0, self.num_points, m)]

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(self.order.size)
        return inv


def serialize(st: SparseVoxelTensor, group_size: int) -> SerializedSequence:
    if group_size < 1:
        raise ContractError(f"group_size must be >= 1, got {group_size}")
    codes = morton_encode(st.coords, st.bit_depth)
    order = np.argsort(codes, kind="stable")
    return SerializedSequence(order=order, group_size=int(group_size),
                              num_points=st.num_points)


def sort_by_morton(st: SparseVoxelTensor) -> SparseVoxelTensor:
    """Return the tensor with rows in ascending Morton order."""
    codes = morton_encode(st.coords, st.bit_depth)
    order = np.argsort(codes, kind="stable")
    if np.array_equal(order, np.arange(st.num_points)):
        return st
    feats = st.feats
    if isinstance(feats, DiffTensor):
        from .autograd import gather_rows
        feats = gather_rows(feats, order)
    else:
        feats = feats[order]
    return SparseVoxelTensor(st.coords[order], feats, st.bit_depth, validate=False)


# ---------------------------------------------------------------------------
# sparse convolution

def _offsets_stride1(k: int) -> np.ndarray:
    r = (k - 1) // 2
    g = np.arange(-r, r + 1)
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)


def _offsets_corner(k: int) -> np.ndarray:
    g = np.arange(k)
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)


def _lookup(codes_sorted: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Indices of query codes inside codes_sorted, -1 where absent."""
    pos = np.searchsorted(codes_sorted, query)
    pos = np.clip(pos, 0, codes_sorted.size - 1)
    hit = codes_sorted[pos] == query
    return np.where(hit, pos, -1)


def _conv_apply(x: DiffTensor, w: DiffTensor, maps, n_out: int) -> DiffTensor:
    """Shared gather-matmul-scatter primitive on the tape.

    maps: list of (offset_index, in_rows, out_rows) with valid rows only.
    """
    x, w = _lift(x), _lift(w)
    xd, wd = x.data, w.data
    c_out = wd.shape[2]
    y = np.zeros((n_out, c_out))
    for oi, rin, rout in maps:
        y[rout] += xd[rin] @ wd[oi]

    def back(g):
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wd)
        for oi, rin, rout in maps:
            go = g[rout]
            np.add.at(gx, rin, go @ wd[oi].T)
            gw[oi] += xd[rin].T @ go
        return gx, gw

    return _from_op((x, w), y, back)


def sparse_conv(st: SparseVoxelTensor, kernel: Feats, stride: int = 1,
                transposed: bool = False,
                target_coords: Optional[np.ndarray] = None) -> SparseVoxelTensor:
    """Generalized sparse convolution.

    kernel: [K^3, C_in, C_out], offsets enumerated x-major ((dx*K+dy)*K+dz).
    stride 1 (K odd): outputs on the input coordinate set.
    stride 2 forward (K=2): halves the grid; outputs at unique(coords >> 1).
    stride 2 transposed (K=2): doubles the grid onto `target_coords`.
    """
    kern = kernel if isinstance(kernel, DiffTensor) else DiffTensor(kernel)
    kd = kern.data
    if kd.ndim != 3:
        raise DimensionError(f"kernel must be [K^3, C_in, C_out], got {list(kd.shape)}")
    k = round(kd.shape[0] ** (1.0 / 3.0))
    if k ** 3 != kd.shape[0]:
        raise DimensionError(f"kernel first dim {kd.shape[0]} is not a cube")
    if kd.shape[1] != st.num_channels:
        raise DimensionError(
            f"kernel C_in {kd.shape[1]} != input channels {st.num_channels}")
    if stride not in (1, 2):
        raise ContractError(f"stride must be 1 or 2, got {stride}")

    feats = st.feats if isinstance(st.feats, DiffTensor) else DiffTensor(st.feats)
    in_codes = morton_encode(st.coords, st.bit_depth)
    order = np.argsort(in_codes, kind="stable")
    sorted_codes = in_codes[order]

    if stride == 1:
        if transposed:
            raise ContractError("transposed convolution requires stride 2")
        if k % 2 == 0:
            raise ContractError(f"stride-1 convolution requires odd K, got {k}")
        out_coords = st.coords
        out_depth = st.bit_depth
        offsets = _offsets_stride1(k)
        side = 1 << st.bit_depth
        maps = []
        for oi, off in enumerate(offsets):
            nb = out_coords + off
            ok = np.all((nb >= 0) & (nb < side), axis=1)
            if not ok.any():
                continue
            rows_out = np.nonzero(ok)[0]
            q = morton_encode(nb[ok], st.bit_depth)
            hit = _lookup(sorted_codes, q)
            valid = hit >= 0
            if not valid.any():
                continue
            maps.append((oi, order[hit[valid]], rows_out[valid]))
    elif not transposed:
        if k != 2:
            raise ContractError(f"stride-2 convolution requires K=2, got {k}")
        if st.bit_depth < 2:
            raise ContractError("cannot downsample a grid of bit_depth < 2")
        out_depth = st.bit_depth - 1
        parent_codes = np.unique(sorted_codes >> 3)
        out_coords = morton_decode(parent_codes, out_depth)
        offsets = _offsets_corner(2)
        maps = []
        for oi, off in enumerate(offsets):
            child = out_coords * 2 + off
            q = morton_encode(child, st.bit_depth)
            hit = _lookup(sorted_codes, q)
            valid = hit >= 0
            if not valid.any():
                continue
            maps.append((oi, order[hit[valid]], np.nonzero(valid)[0]))
    else:
        if k != 2:
            raise ContractError(f"transposed stride-2 convolution requires K=2, got {k}")
        if target_coords is None:
            raise ContractError("transposed convolution needs target coordinates")
        out_depth = st.bit_depth + 1
        out_coords = np.asarray(target_coords, dtype=np.int64).reshape(-1, 3)
        parents = out_coords >> 1
        rem = out_coords & 1
        oct_idx = rem[:, 0] * 4 + rem[:, 1] * 2 + rem[:, 2]
        pq = morton_encode(parents, st.bit_depth)
        hit = _lookup(sorted_codes, pq)
        maps = []
        for oi in range(8):
            sel = (oct_idx == oi) & (hit >= 0)
            if not sel.any():
                continue
            rows_out = np.nonzero(sel)[0]
            maps.append((oi, order[hit[sel]], rows_out))

    out_feats = _conv_apply(feats, kern, maps, out_coords.shape[0])
    return SparseVoxelTensor(out_coords, out_feats, out_depth, validate=False)


def child_candidates(coords: np.ndarray, bit_depth: int) -> np.ndarray:
    """All 8 octant children of each coordinate, in ascending Morton order
    (parents must already be Morton-sorted)."""
    codes = morton_encode(coords, bit_depth)
    kids = (codes[:, None] << 3 | np.arange(8)[None, :]).reshape(-1)
    return morton_decode(kids, bit_depth + 1)


def downsample_coords(coords: np.ndarray, bit_depth: int) -> np.ndarray:
    """Unique parent coordinates one level up, Morton-sorted."""
    codes = morton_encode(coords, bit_depth)
    return morton_decode(np.unique(codes >> 3), bit_depth - 1)
