import math

import numpy as np
import pytest
from scipy.special import ndtr

from mgpc.autograd import Context, DiffTensor
from mgpc.entropy import (ALPHABET, SYM_MAX, SYM_MIN, TOTAL, AdaptiveBitModel,
                          FactorizedPrior, MemModel, QuantizedLatent,
                          RangeDecoder, RangeEncoder, clamp_symbols,
                          discretized_gaussian_pmf, factorized_codelength,
                          gaussian_freq_table, quantize, quantize_pmf,
                          range_decode, range_encode)
from mgpc.errors import ContractError, DecodeError, NumericError


class TestQuantize:
    def test_round_nearest(self):
        q = quantize(np.array([2.4]), "round")
        assert isinstance(q, QuantizedLatent)
        assert q.symbols[0] == 2

    def test_ties_to_even(self):
        q = quantize(np.array([2.5, 3.5, -0.5]), "round")
        assert q.symbols.tolist() == [2, 4, -0]

    def test_dequantize_within_half_step(self, rng):
        x = rng.normal(size=200) * 5
        q = quantize(x, "round")
        assert np.max(np.abs(q.dequantize() - x)) <= 0.5

    def test_noise_bounded(self, rng):
        x = rng.normal(size=500)
        out = quantize(x, "noise", rng)
        assert np.max(np.abs(out - x)) < 0.5

    def test_noise_needs_rng(self):
        with pytest.raises(ContractError):
            quantize(np.zeros(3), "noise")

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError):
            quantize(np.array([np.inf]), "round")

    def test_noise_keeps_gradient(self, rng):
        from mgpc.autograd import Tape, tsum
        tape = Tape()
        x = tape.leaf(np.ones(4))
        out = quantize(x, "noise", rng)
        grads = tape.backward(tsum(out))
        assert np.array_equal(grads[x.node_id], np.ones(4))


class TestDiscretizedGaussian:
    def test_central_bin_standard_normal(self):
        pmf = discretized_gaussian_pmf(0.0, 1.0)
        center = pmf[0 - SYM_MIN]
        assert center == pytest.approx(ndtr(0.5) - ndtr(-0.5), abs=1e-12)
        assert center == pytest.approx(0.382925, abs=5e-7)

    def test_symmetry_about_zero_mean(self):
        pmf = discretized_gaussian_pmf(0.0, 2.5)
        for k in range(1, 100):
            assert pmf[k - SYM_MIN] == pytest.approx(pmf[-k - SYM_MIN], abs=1e-15)

    def test_tail_folding_full_mass(self, rng):
        for _ in range(30):
            mu = float(rng.uniform(-100, 100))
            sigma = float(rng.uniform(1e-3, 50))
            pmf = discretized_gaussian_pmf(mu, sigma)
            assert abs(pmf.sum() - 1.0) < 1e-12
            # the coding table is exact: sums to 2^16 with every bin >= 1
            freqs = quantize_pmf(pmf)
            assert freqs.sum() == TOTAL
            assert freqs.min() >= 1

    def test_sigma_floor_applied(self):
        sharp = discretized_gaussian_pmf(0.0, 0.0)
        assert np.isfinite(sharp).all()
        assert sharp[0 - SYM_MIN] == pytest.approx(1.0, abs=1e-9)


class TestRangeCoder:
    def test_uniform_four_symbols(self):
        freqs = np.full(4, TOTAL // 4)
        tables = [freqs] * 4
        payload = range_encode([0, 1, 2, 3], tables)
        assert range_decode(payload, tables) == [0, 1, 2, 3]
        # 8 bits of content, ~1 byte plus bounded termination
        assert len(payload) <= 1 + 32

    def test_single_symbol_alphabet_near_zero_payload(self):
        tables = [np.array([TOTAL])] * 1000
        payload = range_encode([0] * 1000, tables)
        assert range_decode(payload, tables) == [0] * 1000
        assert len(payload) <= 32

    def test_random_round_trip_with_codelength_bound(self, rng):
        n = 20000
        sizes = rng.integers(2, 40, size=n)
        tables = []
        syms = []
        ideal = 0.0
        for s in sizes:
            cuts = np.sort(rng.integers(0, TOTAL - s + 1, size=s - 1))
            freqs = np.diff(np.concatenate(([0], cuts, [TOTAL - s]))) + 1
            k = int(rng.integers(s))
            tables.append(freqs)
            syms.append(k)
            ideal += -math.log2(freqs[k] / TOTAL)
        payload = range_encode(syms, tables)
        assert range_decode(payload, tables) == syms
        assert len(payload) <= ideal / 8 * 1.001 + 32

    def test_truncated_stream_detected(self):
        freqs = np.full(4, TOTAL // 4)
        tables = [freqs] * 64
        payload = range_encode(list(range(4)) * 16, tables)
        with pytest.raises(DecodeError, match="byte"):
            range_decode(payload[: len(payload) // 2], tables)

    def test_bit_interface_round_trip(self, rng):
        enc = RangeEncoder()
        model = AdaptiveBitModel(4)
        bits = rng.integers(0, 2, size=500)
        ctxs = rng.integers(0, 4, size=500)
        for b, c in zip(bits, ctxs):
            enc.encode_bit(int(b), model.f0(int(c)))
            model.update(int(c), int(b))
        payload = enc.finish()
        dec = RangeDecoder(payload)
        model2 = AdaptiveBitModel(4)
        out = []
        for c in ctxs:
            b = dec.decode_bit(model2.f0(int(c)))
            model2.update(int(c), b)
            out.append(b)
        assert out == bits.tolist()
        assert model.state() == model2.state()

    def test_bad_table_total_rejected(self):
        with pytest.raises(ContractError):
            range_encode([0], [np.array([1, 2, 3])])


class TestFactorizedPrior:
    def test_deterministic_channel_near_zero_bits(self):
        pmf = np.full((1, ALPHABET), 1e-12)
        pmf[0, 0 - SYM_MIN] = 1.0
        symbols = np.zeros((500, 1), dtype=np.int64)
        bits = factorized_codelength(symbols, pmf / pmf.sum(axis=1, keepdims=True))
        assert bits / 500 < 0.01

    def test_uniform_pmf_eight_bits(self):
        pmf = np.full((1, ALPHABET), 1.0 / ALPHABET)
        symbols = np.arange(256, dtype=np.int64).reshape(-1, 1) + SYM_MIN
        bits = factorized_codelength(symbols, pmf)
        assert bits / 256 == pytest.approx(8.0, abs=1e-9)

    def test_coded_size_tracks_codelength(self, rng):
        prior = FactorizedPrior("fp", channels=3)
        prior.loc.data = rng.normal(size=3) * 3
        prior.scale_raw.data = rng.normal(size=3)
        freqs = prior.freq_tables()
        n = 400
        symbols = np.stack([
            rng.choice(np.arange(SYM_MIN, SYM_MAX + 1), p=f / f.sum(), size=n)
            for f in freqs], axis=1)
        payload = prior.encode(symbols)
        assert np.array_equal(prior.decode(payload, n), symbols)
        table_bits = -np.log2(
            np.stack([freqs[c][symbols[:, c] - SYM_MIN] for c in range(3)]) / TOTAL).sum()
        assert len(payload) * 8 <= table_bits * 1.005 + 32 * 8
        assert len(payload) * 8 >= table_bits * 0.995


def make_mem(rng, channels=3, width=6, state=4, group=5):
    return MemModel("mem", latent_channels=channels, width=width, state=state,
                    group_size=group, rng=rng)


class TestMem:
    def test_first_token_pure_function_of_start(self, rng):
        mem = make_mem(rng)
        outs = []
        for _ in range(3):
            tokens = DiffTensor(rng.normal(size=(5, 3)))
            mu, sigma = mem.predict(Context(None), tokens)
            outs.append((mu.data[0].copy(), sigma.data[0].copy()))
        for mu0, sig0 in outs[1:]:
            assert np.array_equal(mu0, outs[0][0])
            assert np.array_equal(sig0, outs[0][1])

    def test_sigma_floor(self, rng):
        mem = make_mem(rng)
        _, sigma = mem.predict(Context(None), DiffTensor(rng.normal(size=(4, 3)) * 50))
        assert np.all(sigma.data >= 1e-3)

    def test_causality_perturbation(self, rng):
        mem = make_mem(rng)
        tokens = rng.normal(size=(5, 3))
        ctx = Context(None)
        mu0, sig0 = mem.predict(ctx, DiffTensor(tokens))
        for j in range(5):
            t2 = tokens.copy()
            t2[j] += rng.normal(size=3)
            mu1, sig1 = mem.predict(Context(None), DiffTensor(t2))
            # predictions at positions <= j are bit-identical
            assert np.array_equal(mu1.data[: j + 1], mu0.data[: j + 1])
            assert np.array_equal(sig1.data[: j + 1], sig0.data[: j + 1])

    def test_group_independence(self, rng):
        mem = make_mem(rng, group=4)
        symbols = rng.integers(-5, 6, size=(11, 3))
        payload0, _ = mem.encode_features(symbols)
        s2 = symbols.copy()
        s2[5] += 1  # group 1
        payload1, _ = mem.encode_features(s2)
        assert payload0[0] == payload1[0]
        assert payload0[2] == payload1[2]
        assert payload0[1] != payload1[1]

    def test_context_length_contract(self, rng):
        mem = make_mem(rng, group=4)
        with pytest.raises(ContractError):
            mem.mem_predict(np.zeros((4, 3)), 4)

    def test_round_trip(self, rng):
        mem = make_mem(rng, group=4)
        for trial in range(5):
            n = int(rng.integers(1, 14))
            symbols = rng.integers(-8, 9, size=(n, 3))
            payloads, est = mem.encode_features(symbols)
            out = mem.decode_features(payloads, n)
            assert np.array_equal(out, symbols)
            total_bits = 8 * sum(len(p) for p in payloads)
            assert total_bits <= est * 1.02 + 16 * len(payloads)

    def test_decoder_never_sees_original(self, rng):
        # decode_features reconstructs context solely from decoded symbols
        mem = make_mem(rng, group=6)
        symbols = rng.integers(-4, 5, size=(9, 3))
        payloads, _ = mem.encode_features(symbols)
        out = mem.decode_features([bytes(p) for p in payloads], 9)
        assert np.array_equal(out, clamp_symbols(symbols))

    def test_rate_bits_matches_direct_likelihood(self, rng):
        mem = make_mem(rng, group=4)
        lat = rng.normal(size=(6, 3)) * 2
        ctx = Context(None)
        bits = float(mem.rate_bits(ctx, DiffTensor(lat)).data)
        # direct evaluation per group
        expect = 0.0
        for lo, hi in ((0, 4), (4, 6)):
            mu, sigma = mem.predict(Context(None), DiffTensor(lat[lo:hi]))
            p = ndtr((lat[lo:hi] - mu.data + 0.5) / sigma.data) - \
                ndtr((lat[lo:hi] - mu.data - 0.5) / sigma.data)
            expect += -np.log2(np.maximum(p, 1e-12)).sum()
        assert bits == pytest.approx(expect, rel=1e-12)
