import numpy as np
import pytest

from mgpc.autograd import DiffTensor, pointwise, tsum
from mgpc.errors import ContractError, RangeError
from mgpc.ply import read_ply, write_ply
from mgpc.sparse import (SparseVoxelTensor, child_candidates,
                         downsample_coords, morton_decode, morton_encode,
                         serialize, sort_by_morton, sparse_conv, voxelize)
from tests.conftest import central_diff_check


def random_tensor(rng, bit_depth=3, n=12, channels=2):
    side = 1 << bit_depth
    coords = np.unique(rng.integers(0, side, size=(n, 3)), axis=0)
    feats = rng.normal(size=(coords.shape[0], channels))
    return SparseVoxelTensor(coords, feats, bit_depth, validate=False)


class TestVoxelize:
    def test_duplicate_mean(self):
        pts = [(1.2, 1.2, 1.2, 100, 0, 0), (1.8, 1.9, 1.7, 200, 0, 0)]
        st = voxelize(pts, 4)
        assert st.num_points == 1
        assert st.feats[0, 0] == pytest.approx(150.0 / 255.0)

    def test_floor(self):
        st = voxelize([(0.4, 0.4, 0.4, 10, 20, 30)], 4)
        assert np.array_equal(st.coords, [[0, 0, 0]])

    def test_attributes_scaled_unit(self):
        st = voxelize([(1, 2, 3, 255, 0, 127.5)], 4)
        assert np.allclose(st.feats[0], [1.0, 0.0, 0.5])

    def test_clamps_to_grid(self):
        st = voxelize([(-3.0, 99.0, 2.0, 0, 0, 0)], 4)
        assert np.array_equal(st.coords, [[0, 15, 2]])

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            voxelize(np.zeros((0, 6)), 4)

    def test_matches_hash_set_dedupe(self, rng):
        pts = np.hstack([rng.uniform(0, 16, size=(300, 3)),
                         rng.uniform(0, 255, size=(300, 3))])
        st = voxelize(pts, 4)
        expect = {tuple(np.floor(p[:3]).astype(int)) for p in pts}
        got = {tuple(c) for c in st.coords}
        assert got == expect


class TestMorton:
    def test_origin(self):
        assert morton_encode((0, 0, 0), 5) == 0

    def test_all_low_bits(self):
        assert morton_encode((1, 1, 1), 5) == 7

    def test_x_lowest_convention(self):
        assert morton_encode((1, 0, 0), 5) == 1
        assert morton_encode((0, 1, 0), 5) == 2
        assert morton_encode((0, 0, 1), 5) == 4

    def test_exhaustive_round_trip_5bit(self):
        side = 32
        g = np.arange(side)
        coords = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
        codes = morton_encode(coords, 5)
        assert np.unique(codes).size == coords.shape[0]
        back = morton_decode(codes, 5)
        assert np.array_equal(back, coords)

    def test_out_of_range_rejected(self):
        with pytest.raises(RangeError):
            morton_encode((32, 0, 0), 5)
        with pytest.raises(RangeError):
            morton_decode(1 << 15, 5)

    def test_octant_refinement_monotonicity(self, rng):
        # children of octant o all lie in [8*code(o), 8*code(o)+7]
        coords = rng.integers(0, 16, size=(50, 3))
        parent_codes = morton_encode(coords, 4)
        for oct_idx in range(8):
            child = coords * 2 + np.array([oct_idx & 1, (oct_idx >> 1) & 1, (oct_idx >> 2) & 1])
            ccodes = morton_encode(child, 5)
            assert np.all(ccodes >= 8 * parent_codes)
            assert np.all(ccodes <= 8 * parent_codes + 7)


class TestSerialize:
    def test_group_sizes(self, rng):
        st = random_tensor(rng, n=8)
        while st.num_points != 5:
            st = random_tensor(rng, n=8)
        seq = serialize(st, 2)
        sizes = [s.stop - s.start for s in seq.group_slices()]
        assert sizes == [2, 2, 1]

    def test_sorted_input_identity(self, rng):
        st = sort_by_morton(random_tensor(rng, n=20))
        seq = serialize(st, 4)
        assert np.array_equal(seq.order, np.arange(st.num_points))

    def test_matches_bit_string_sort(self, rng):
        for trial in range(20):
            st = random_tensor(rng, bit_depth=5, n=40)
            seq = serialize(st, 7)

            def bit_string(c):
                return "".join(
                    f"{(c[2] >> i) & 1}{(c[1] >> i) & 1}{(c[0] >> i) & 1}"
                    for i in range(4, -1, -1))

            oracle = sorted(range(st.num_points),
                            key=lambda i: bit_string(st.coords[i]))
            assert np.array_equal(seq.order, oracle)

    def test_inverse_restores_order(self, rng):
        st = random_tensor(rng, bit_depth=5, n=30)
        seq = serialize(st, 4)
        permuted = st.coords[seq.order]
        assert np.array_equal(permuted[seq.inverse()], st.coords)

    def test_bad_group_size(self, rng):
        with pytest.raises(ContractError):
            serialize(random_tensor(rng), 0)


def dense_conv_oracle(st, kernel, stride=1):
    """Densify -> dense convolution -> sparsify, stride-1 odd kernels."""
    k = round(kernel.shape[0] ** (1 / 3))
    r = (k - 1) // 2
    side = 1 << st.bit_depth
    c_in, c_out = kernel.shape[1], kernel.shape[2]
    dense = np.zeros((side, side, side, c_in))
    for c, f in zip(st.coords, st.feat_array()):
        dense[tuple(c)] = f
    out = np.zeros((side, side, side, c_out))
    oi = 0
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            for dz in range(-r, r + 1):
                shifted = np.zeros_like(dense)
                xs = slice(max(0, -dx), side - max(0, dx))
                xd = slice(max(0, dx), side - max(0, -dx))
                ys = slice(max(0, -dy), side - max(0, dy))
                yd = slice(max(0, dy), side - max(0, -dy))
                zs = slice(max(0, -dz), side - max(0, dz))
                zd = slice(max(0, dz), side - max(0, -dz))
                shifted[xs, ys, zs] = dense[xd, yd, zd]
                out += shifted @ kernel[oi]
                oi += 1
    return np.stack([out[tuple(c)] for c in st.coords])


class TestSparseConv:
    def test_identity_kernel(self, rng):
        st = random_tensor(rng, channels=3)
        kernel = np.eye(3)[None, :, :]
        out = sparse_conv(st, kernel, stride=1)
        assert np.array_equal(out.coords, st.coords)
        assert np.allclose(out.feat_array(), st.feat_array())

    def test_single_voxel_only_self_contribution(self):
        st = SparseVoxelTensor(np.array([[3, 3, 3]]), np.array([[2.0]]), 3, validate=False)
        kernel = np.ones((27, 1, 1))
        out = sparse_conv(st, kernel, stride=1)
        assert out.num_points == 1
        assert out.feat_array()[0, 0] == pytest.approx(2.0)

    def test_matches_dense_oracle(self, rng):
        for trial in range(5):
            st = random_tensor(rng, bit_depth=3, n=20, channels=2)
            kernel = rng.normal(size=(27, 2, 3))
            out = sparse_conv(st, kernel, stride=1)
            oracle = dense_conv_oracle(st, kernel)
            assert np.max(np.abs(out.feat_array() - oracle)) < 1e-10

    def test_stride2_halves_grid_and_counts(self, rng):
        st = random_tensor(rng, bit_depth=4, n=40, channels=2)
        kernel = rng.normal(size=(8, 2, 3))
        out = sparse_conv(st, kernel, stride=2)
        assert out.bit_depth == 3
        assert out.num_points <= st.num_points
        expect = {tuple(c // 2) for c in st.coords}
        assert {tuple(c) for c in out.coords} == expect

    def test_stride2_feature_sum(self):
        # two children of one parent: output = sum of per-octant kernel rows
        coords = np.array([[0, 0, 0], [1, 1, 1]])
        feats = np.array([[1.0], [2.0]])
        st = SparseVoxelTensor(coords, feats, 2, validate=False)
        kernel = np.arange(8, dtype=np.float64).reshape(8, 1, 1) + 1.0
        out = sparse_conv(st, kernel, stride=2)
        assert out.num_points == 1
        assert out.feat_array()[0, 0] == pytest.approx(1.0 * 1.0 + 2.0 * 8.0)

    def test_transposed_requires_targets(self, rng):
        st = random_tensor(rng, channels=2)
        with pytest.raises(ContractError):
            sparse_conv(st, rng.normal(size=(8, 2, 2)), stride=2, transposed=True)

    def test_transposed_places_children(self, rng):
        parents = np.array([[0, 0, 0], [1, 1, 1]])
        feats = np.array([[1.0], [10.0]])
        st = SparseVoxelTensor(parents, feats, 2, validate=False)
        kernel = np.arange(8, dtype=np.float64).reshape(8, 1, 1) + 1.0
        target = child_candidates(parents, 2)
        out = sparse_conv(st, kernel, stride=2, transposed=True, target_coords=target)
        assert out.bit_depth == 3
        assert out.num_points == 16
        for c, f in zip(out.coords, out.feat_array()):
            parent = tuple(c // 2)
            oct_idx = (c[0] & 1) * 4 + (c[1] & 1) * 2 + (c[2] & 1)
            src = 1.0 if parent == (0, 0, 0) else 10.0
            assert f[0] == pytest.approx(src * (oct_idx + 1))

    def test_gradients(self, rng):
        for i in range(20):
            st = random_tensor(rng, bit_depth=3, n=10, channels=2)
            coords = st.coords
            feats0 = st.feat_array()
            kernel0 = rng.normal(size=(27, 2, 2))

            def loss(L):
                stl = SparseVoxelTensor(coords, L[0], 3, validate=False)
                out = sparse_conv(stl, L[1], stride=1)
                return tsum(pointwise(out.feats, "silu"))

            central_diff_check(loss, [feats0.copy(), kernel0.copy()], n_probe=3, seed=i)

    def test_even_kernel_stride1_rejected(self, rng):
        st = random_tensor(rng, channels=2)
        with pytest.raises(ContractError):
            sparse_conv(st, rng.normal(size=(8, 2, 2)), stride=1)


class TestHelpers:
    def test_child_candidates_sorted_and_complete(self, rng):
        coords = sort_by_morton(random_tensor(rng, bit_depth=3, n=15)).coords
        kids = child_candidates(coords, 3)
        assert kids.shape[0] == 8 * coords.shape[0]
        codes = morton_encode(kids, 4)
        assert np.all(np.diff(codes) > 0)
        assert {tuple(k // 2) for k in kids} == {tuple(c) for c in coords}

    def test_downsample_unique_sorted(self, rng):
        coords = random_tensor(rng, bit_depth=4, n=50).coords
        down = downsample_coords(coords, 4)
        codes = morton_encode(down, 3)
        assert np.all(np.diff(codes) > 0)
        assert {tuple(d) for d in down} == {tuple(c // 2) for c in coords}


class TestPly:
    def test_binary_round_trip(self, tmp_path, rng):
        pts = np.hstack([rng.uniform(0, 100, (20, 3)),
                         rng.integers(0, 256, (20, 3)).astype(float)])
        path = tmp_path / "a.ply"
        write_ply(path, pts, binary=True)
        back = read_ply(path)
        assert np.allclose(back[:, :3], pts[:, :3], atol=1e-4)
        assert np.array_equal(back[:, 3:], pts[:, 3:])

    def test_ascii_round_trip(self, tmp_path, rng):
        pts = np.hstack([rng.uniform(0, 100, (7, 3)),
                         rng.integers(0, 256, (7, 3)).astype(float)])
        path = tmp_path / "a.ply"
        write_ply(path, pts, binary=False)
        back = read_ply(path)
        assert np.allclose(back[:, :3], pts[:, :3], atol=1e-4)
        assert np.array_equal(back[:, 3:], pts[:, 3:])

    def test_unknown_properties_ignored(self, tmp_path):
        body = "\n".join([
            "ply", "format ascii 1.0", "element vertex 2",
            "property float x", "property float y", "property float z",
            "property float intensity",
            "property uchar red", "property uchar green", "property uchar blue",
            "end_header",
            "1 2 3 0.5 10 20 30",
            "4 5 6 0.7 40 50 60",
        ])
        path = tmp_path / "u.ply"
        path.write_text(body + "\n")
        pts = read_ply(path)
        assert np.array_equal(pts, [[1, 2, 3, 10, 20, 30], [4, 5, 6, 40, 50, 60]])

    def test_binary_unknown_properties_skipped(self, tmp_path):
        import struct
        header = "\n".join([
            "ply", "format binary_little_endian 1.0", "element vertex 1",
            "property float x", "property float y", "property float z",
            "property double extra",
            "property uchar red", "property uchar green", "property uchar blue",
            "end_header",
        ]) + "\n"
        payload = struct.pack("<3f d 3B", 1.0, 2.0, 3.0, 9.9, 7, 8, 9)
        path = tmp_path / "b.ply"
        path.write_bytes(header.encode() + payload)
        pts = read_ply(path)
        assert np.allclose(pts, [[1, 2, 3, 7, 8, 9]])
