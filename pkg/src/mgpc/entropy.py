"""Quantization, bit-exact range coding, the factorized baseline prior and
the grouped causal entropy model over latent tokens."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import ndtr as _ndtr_np

from .autograd import (Context, DiffTensor, Parameter, concat_rows, linear,
                       lower_bound, ndtr, reshape, softplus)
from .errors import ContractError, DecodeError, DimensionError, NumericError
from .ssm import ChannelScanParams, SsmParams, channel_scan, selective_scan

SYM_MIN = -127
SYM_MAX = 128
ALPHABET = SYM_MAX - SYM_MIN + 1  # 256
SIGMA_MIN = 1e-3

TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS

_MASK64 = (1 << 64) - 1
_TOP = 1 << 56


# ---------------------------------------------------------------------------
# quantization

@dataclass
class QuantizedLatent:
    """Rounded latent symbols plus dequantization metadata."""

    symbols: np.ndarray  # int64 [N, C]
    offset: float = 0.0
    scale: float = 1.0

    def dequantize(self) -> np.ndarray:
        return self.symbols.astype(np.float64) * self.scale + self.offset


def quantize(x, mode: str = "round", rng: Optional[np.random.Generator] = None):
    """Round-to-nearest (ties to even) or additive uniform noise on [-0.5, 0.5).

    Round mode returns a QuantizedLatent; noise mode (training only) returns
    the perturbed tensor with gradients intact.
    """
    if mode not in ("round", "noise"):
        raise ContractError(f"quantize mode must be 'round' or 'noise', got {mode!r}")
    data = x.data if isinstance(x, DiffTensor) else np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericError("quantize: non-finite input")
    if mode == "round":
        return QuantizedLatent(symbols=np.rint(data).astype(np.int64))
    if rng is None:
        raise ContractError("quantize noise mode needs an rng")
    noise = rng.uniform(-0.5, 0.5, size=data.shape)
    if isinstance(x, DiffTensor):
        return x + DiffTensor(noise)
    return data + noise


def clamp_symbols(symbols: np.ndarray) -> np.ndarray:
    return np.clip(symbols, SYM_MIN, SYM_MAX)


# ---------------------------------------------------------------------------
# discretized Gaussian

def discretized_gaussian_pmf(mu: float, sigma: float) -> np.ndarray:
    """Bin masses of a Gaussian over the integer alphabet, tails folded into
    the edge bins. The float pmf telescopes to 1; the coding table built from
    it sums to exactly 2^16 with every symbol >= 1 count."""
    sigma = max(float(sigma), SIGMA_MIN)
    edges = (np.arange(SYM_MIN, SYM_MAX, dtype=np.float64) + 0.5 - mu) / sigma
    cdf = _ndtr_np(edges)
    pmf = np.empty(ALPHABET)
    pmf[0] = cdf[0]
    pmf[1:-1] = np.diff(cdf)
    pmf[-1] = 1.0 - cdf[-1]
    return pmf


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """16-bit frequency table: sums to exactly TOTAL, every entry >= 1."""
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.size
    if n < 1 or n > TOTAL:
        raise ContractError(f"pmf size {n} unusable with {TOTAL_BITS}-bit totals")
    budget = TOTAL - n
    scaled = pmf / pmf.sum() * budget
    base = np.floor(scaled).astype(np.int64)
    rem = budget - int(base.sum())
    if rem:
        frac = scaled - base
        take = np.argsort(-frac, kind="stable")[:rem]
        base[take] += 1
    return base + 1


def gaussian_freq_table(mu: float, sigma: float) -> np.ndarray:
    return quantize_pmf(discretized_gaussian_pmf(mu, sigma))


# ---------------------------------------------------------------------------
# 64-bit range coder, 16-bit frequencies, byte renormalization

class RangeEncoder:
    """Carry-propagating range coder; decode is its exact inverse given the
    same frequency tables.

    Termination rounds `low` up to the next multiple of 2^56 (always inside
    the final interval since the range is at least 2^56 after renormalization)
    so a single flush byte suffices; the decoder zero-pads the short tail.
    """

    def __init__(self):
        self.low = 0
        self.rng = _MASK64
        self.buf = bytearray()

    def _carry(self) -> None:
        i = len(self.buf) - 1
        while self.buf[i] == 0xFF:
            self.buf[i] = 0
            i -= 1
        self.buf[i] += 1

    def encode(self, cum: int, freq: int) -> None:
        r = self.rng >> TOTAL_BITS
        self.low += r * cum
        self.rng = r * freq
        if self.low > _MASK64:
            self.low &= _MASK64
            self._carry()
        while self.rng < _TOP:
            self.buf.append((self.low >> 56) & 0xFF)
            self.low = (self.low << 8) & _MASK64
            self.rng <<= 8

    def encode_symbol(self, sym: int, cumfreq: np.ndarray) -> None:
        """cumfreq: int array of length alphabet+1, cumfreq[-1] == TOTAL."""
        self.encode(int(cumfreq[sym]), int(cumfreq[sym + 1] - cumfreq[sym]))

    def encode_bit(self, bit: int, f0: int) -> None:
        if bit:
            self.encode(f0, TOTAL - f0)
        else:
            self.encode(0, f0)

    def finish(self) -> bytes:
        value = (self.low + _TOP - 1) >> 56 << 56
        if value > _MASK64:
            value &= _MASK64
            self._carry()
        self.buf.append((value >> 56) & 0xFF)
        return bytes(self.buf)


class RangeDecoder:
    _PAD_BUDGET = 7  # the encoder emits exactly 7 fewer bytes than it reads

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.pads = 0
        self.rng = _MASK64
        self.code = 0
        for _ in range(8):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
            self.pos += 1
            return b
        if self.pads < self._PAD_BUDGET:
            self.pads += 1
            return 0
        raise DecodeError(f"range decoder ran past end of stream at byte {self.pos}")

    def decode_cum(self) -> int:
        r = self.rng >> TOTAL_BITS
        dv = self.code // r
        return min(dv, TOTAL - 1)

    def consume(self, cum: int, freq: int) -> None:
        r = self.rng >> TOTAL_BITS
        self.code -= r * cum
        self.rng = r * freq
        while self.rng < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK64
            self.rng <<= 8

    def decode_symbol(self, cumfreq: np.ndarray) -> int:
        target = self.decode_cum()
        sym = int(np.searchsorted(cumfreq, target, side="right")) - 1
        self.consume(int(cumfreq[sym]), int(cumfreq[sym + 1] - cumfreq[sym]))
        return sym

    def decode_bit(self, f0: int) -> int:
        bit = 1 if self.decode_cum() >= f0 else 0
        if bit:
            self.consume(f0, TOTAL - f0)
        else:
            self.consume(0, f0)
        return bit


def range_encode(symbols: Sequence[int], freq_tables) -> bytes:
    """Encode symbols under per-symbol 16-bit frequency tables."""
    enc = RangeEncoder()
    for sym, freqs in zip(symbols, freq_tables):
        cum = np.concatenate(([0], np.cumsum(freqs)))
        if cum[-1] != TOTAL:
            raise ContractError("frequency table does not sum to 2^16")
        enc.encode_symbol(int(sym), cum)
    return enc.finish()


def range_decode(data: bytes, freq_tables) -> List[int]:
    dec = RangeDecoder(data)
    out = []
    for freqs in freq_tables:
        cum = np.concatenate(([0], np.cumsum(freqs)))
        if cum[-1] != TOTAL:
            raise ContractError("frequency table does not sum to 2^16")
        out.append(dec.decode_symbol(cum))
    return out


class AdaptiveBitModel:
    """Adaptive binary contexts (count pairs) shared by encoder and decoder;
    both sides update identically after every coded bit."""

    def __init__(self, contexts: int, rescale_at: int = 1 << 12):
        self.c0 = np.ones(contexts, dtype=np.int64)
        self.c1 = np.ones(contexts, dtype=np.int64)
        self.rescale_at = rescale_at

    def f0(self, ctx: int) -> int:
        c0, c1 = int(self.c0[ctx]), int(self.c1[ctx])
        f = c0 * TOTAL // (c0 + c1)
        return min(max(f, 1), TOTAL - 1)

    def update(self, ctx: int, bit: int) -> None:
        if bit:
            self.c1[ctx] += 1
        else:
            self.c0[ctx] += 1
        if self.c0[ctx] + self.c1[ctx] >= self.rescale_at:
            self.c0[ctx] = max(1, self.c0[ctx] >> 1)
            self.c1[ctx] = max(1, self.c1[ctx] >> 1)

    def state(self) -> Tuple[bytes, bytes]:
        return self.c0.tobytes(), self.c1.tobytes()


# ---------------------------------------------------------------------------
# factorized baseline prior

def factorized_codelength(symbols: np.ndarray, pmf_tables: np.ndarray) -> float:
    """Ideal codelength in bits of symbols [N, C] under per-channel static
    pmfs [C, ALPHABET] (floats, each row summing to ~1)."""
    symbols = np.asarray(symbols, dtype=np.int64)
    idx = symbols - SYM_MIN
    if idx.min() < 0 or idx.max() >= pmf_tables.shape[1]:
        raise ContractError("symbol outside the coded alphabet")
    cols = np.arange(symbols.shape[1])
    p = pmf_tables[cols[None, :], idx]
    return float(-np.log2(np.maximum(p, 1e-300)).sum())


class FactorizedPrior:
    """Learned per-channel location/scale prior; the ablation baseline that
    ignores spatial and channel context."""

    def __init__(self, prefix: str, channels: int):
        self.channels = channels
        self.loc = Parameter(f"{prefix}/loc", np.zeros(channels))
        self.scale_raw = Parameter(f"{prefix}/scale_raw", np.zeros(channels))

    def parameters(self) -> List[Parameter]:
        return [self.loc, self.scale_raw]

    def pmf_tables(self) -> np.ndarray:
        sig = np.logaddexp(0.0, self.scale_raw.data) + SIGMA_MIN
        return np.stack([discretized_gaussian_pmf(m, s)
                         for m, s in zip(self.loc.data, sig)])

    def freq_tables(self) -> np.ndarray:
        return np.stack([quantize_pmf(p) for p in self.pmf_tables()])

    def encode(self, symbols: np.ndarray) -> bytes:
        freqs = self.freq_tables()
        cums = np.concatenate([np.zeros((self.channels, 1), dtype=np.int64),
                               np.cumsum(freqs, axis=1)], axis=1)
        enc = RangeEncoder()
        for row in np.asarray(symbols, dtype=np.int64) - SYM_MIN:
            for c, s in enumerate(row):
                enc.encode_symbol(int(s), cums[c])
        return enc.finish()

    def decode(self, data: bytes, n: int) -> np.ndarray:
        freqs = self.freq_tables()
        cums = np.concatenate([np.zeros((self.channels, 1), dtype=np.int64),
                               np.cumsum(freqs, axis=1)], axis=1)
        dec = RangeDecoder(data)
        out = np.empty((n, self.channels), dtype=np.int64)
        for i in range(n):
            for c in range(self.channels):
                out[i, c] = dec.decode_symbol(cums[c]) + SYM_MIN
        return out


# ---------------------------------------------------------------------------
# Mamba-based entropy model: grouped, token-causal conditional Gaussians

def gaussian_bin_likelihood(values: DiffTensor, mu: DiffTensor, sigma: DiffTensor) -> DiffTensor:
    """P(value falls in its unit bin) under N(mu, sigma); differentiable.

    The floor keeps log-likelihoods finite; its gradient still passes when
    the optimizer is pushing the probability back up."""
    upper = ndtr((values - mu + 0.5) / sigma)
    lower = ndtr((values - mu - 0.5) / sigma)
    return lower_bound(upper - lower, 1e-12)


class MemModel:
    """Grouped causal conditional model over latent tokens.

    Groups of length at most J are coded independently. Within a group the
    token sequence is shifted right by one (a learned start token leads), a
    causal forward scan runs over positions and a channel-flip scan runs over
    the transposed view; both outputs are summed and projected to per-channel
    (mu, sigma). The prediction for token j therefore depends only on tokens
    strictly before j.
    """

    def __init__(self, prefix: str, latent_channels: int, width: int, state: int,
                 group_size: int, rng: np.random.Generator):
        self.latent_channels = latent_channels
        self.width = width
        self.group_size = group_size
        scale = 1.0 / math.sqrt(latent_channels)
        wscale = 1.0 / math.sqrt(width)
        self.start = Parameter(f"{prefix}/start", np.zeros(latent_channels))
        self.w_in = Parameter(f"{prefix}/w_in", rng.normal(0.0, scale, (latent_channels, width)))
        self.b_in = Parameter(f"{prefix}/b_in", np.zeros(width))
        self.fwd = SsmParams(f"{prefix}/fwd", width, state, rng)
        self.chan = ChannelScanParams(f"{prefix}/chan", width, state, rng)
        self.w_mu = Parameter(f"{prefix}/w_mu", rng.normal(0.0, wscale, (width, latent_channels)))
        self.b_mu = Parameter(f"{prefix}/b_mu", np.zeros(latent_channels))
        self.w_sig = Parameter(f"{prefix}/w_sig", rng.normal(0.0, wscale, (width, latent_channels)))
        self.b_sig = Parameter(f"{prefix}/b_sig", np.full(latent_channels, 0.25))

    def parameters(self) -> List[Parameter]:
        out = [self.start, self.w_in, self.b_in, self.w_mu, self.b_mu,
               self.w_sig, self.b_sig]
        out += self.fwd.parameters() + self.chan.parameters()
        return out

    def predict(self, ctx: Context, tokens: DiffTensor) -> Tuple[DiffTensor, DiffTensor]:
        """(mu, sigma) for every position of one group, each [L, C_latent]."""
        L = tokens.data.shape[0]
        if L < 1:
            raise ContractError("mem_predict: empty group")
        if L > self.group_size:
            raise ContractError(
                f"mem_predict: group of {L} tokens exceeds group size {self.group_size}")
        start = reshape(ctx.p(self.start), (1, self.latent_channels))
        if L == 1:
            shifted = start
        else:
            from .autograd import gather_rows
            shifted = concat_rows([start, gather_rows(tokens, np.arange(L - 1))])
        e = linear(shifted, ctx.p(self.w_in), ctx.p(self.b_in))
        yf = selective_scan(ctx, e, self.fwd)
        yc = channel_scan(ctx, e, self.chan)
        h = yf + yc
        mu = linear(h, ctx.p(self.w_mu), ctx.p(self.b_mu))
        sigma = softplus(linear(h, ctx.p(self.w_sig), ctx.p(self.b_sig))) + SIGMA_MIN
        return mu, sigma

    def mem_predict(self, decoded_context: np.ndarray, group_len: int) -> Tuple[np.ndarray, np.ndarray]:
        """(mu, sigma) for token j = len(decoded_context) of a group.

        Pads the partial group to `group_len` rows so the arithmetic matches
        the encoder's full-group pass bit for bit.
        """
        j = decoded_context.shape[0] if decoded_context.size else 0
        if j >= group_len:
            raise ContractError("context length must be below the group length")
        padded = np.zeros((group_len, self.latent_channels))
        if j:
            padded[:j] = decoded_context
        ctx = Context(None)
        mu, sigma = self.predict(ctx, DiffTensor(padded))
        return mu.data[j], sigma.data[j]

    # -- coding -------------------------------------------------------------

    def _group_spans(self, n: int) -> List[Tuple[int, int]]:
        j = self.group_size
        return [(i, min(i + j, n)) for i in range(0, n, j)]

    def encode_features(self, symbols: np.ndarray) -> Tuple[List[bytes], float]:
        """Range-code latent symbols [N, C] group by group (Morton order rows,
        channels ascending). Returns per-group payloads and the table-exact
        codelength estimate in bits."""
        symbols = clamp_symbols(np.asarray(symbols, dtype=np.int64))
        n = symbols.shape[0]
        payloads = []
        est_bits = 0.0
        for lo, hi in self._group_spans(n):
            grp = symbols[lo:hi]
            ctx = Context(None)
            mu, sigma = self.predict(ctx, DiffTensor(grp.astype(np.float64)))
            enc = RangeEncoder()
            for j in range(hi - lo):
                for c in range(symbols.shape[1]):
                    freqs = gaussian_freq_table(mu.data[j, c], sigma.data[j, c])
                    cum = np.concatenate(([0], np.cumsum(freqs)))
                    s = int(grp[j, c]) - SYM_MIN
                    enc.encode_symbol(s, cum)
                    est_bits += -math.log2(freqs[s] / TOTAL)
            payloads.append(enc.finish())
        return payloads, est_bits

    def decode_features(self, payloads: List[bytes], n: int) -> np.ndarray:
        """Exact inverse of encode_features."""
        spans = self._group_spans(n)
        if len(payloads) != len(spans):
            raise DecodeError(
                f"feature substream has {len(payloads)} groups, expected {len(spans)}")
        out = np.empty((n, self.latent_channels), dtype=np.int64)
        for payload, (lo, hi) in zip(payloads, spans):
            glen = hi - lo
            dec = RangeDecoder(payload)
            grp = np.zeros((glen, self.latent_channels))
            for j in range(glen):
                ctx = Context(None)
                mu, sigma = self.predict(ctx, DiffTensor(grp))
                for c in range(self.latent_channels):
                    freqs = gaussian_freq_table(mu.data[j, c], sigma.data[j, c])
                    cum = np.concatenate(([0], np.cumsum(freqs)))
                    out[lo + j, c] = dec.decode_symbol(cum) + SYM_MIN
                grp[j] = out[lo + j].astype(np.float64)
        return out

    def rate_bits(self, ctx: Context, latents: DiffTensor) -> DiffTensor:
        """Differentiable total codelength estimate -sum log2 p over all
        groups of a (noise-relaxed or rounded) latent tensor [N, C]."""
        n = latents.data.shape[0]
        from .autograd import gather_rows, log, tsum
        total = None
        for lo, hi in self._group_spans(n):
            grp = gather_rows(latents, np.arange(lo, hi))
            mu, sigma = self.predict(ctx, grp)
            p = gaussian_bin_likelihood(grp, mu, sigma)
            bits = tsum(log(p)) * (-1.0 / math.log(2.0))
            total = bits if total is None else total + bits
        return total
