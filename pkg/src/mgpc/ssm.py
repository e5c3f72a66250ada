"""ZOH-discretized selective state-space scans and the tri-directional
scan block used throughout the encoder and both decoders."""
from __future__ import annotations

import math
from typing import List, Optional

import numpy as np

from .autograd import (Context, DiffTensor, Parameter, concat_rows, exp,
                       flip_rows, gather_rows, linear, mul, neg, pointwise,
                       rms_norm_rows, scan_tokens, silu, softplus, transpose,
                       zoh_factors)
from .errors import ContractError, DimensionError


def zoh_discretize(a, b, delta):
    """Discretize the scalar (or elementwise) system h' = a h + b x.

    abar = exp(delta a); bbar = ((exp(delta a) - 1) / a) * b, switching to the
    series limit bbar = delta * b * (1 + delta a / 2) when |delta a| < 1e-6.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ContractError("zoh_discretize requires delta > 0")
    u = delta * a
    abar = np.exp(u)
    small = np.abs(u) < 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = (abar - 1.0) / a * b
    bbar = np.where(small, delta * b * (1.0 + 0.5 * u), exact)
    if abar.ndim == 0:
        return float(abar), float(bbar)
    return abar, bbar


def _softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


class SsmParams:
    """Input-selective scan parameters: diagonal A (kept negative through an
    exponential parametrization) plus per-token B, C and step-size projections."""

    def __init__(self, prefix: str, channels: int, state: int, rng: np.random.Generator):
        self.channels = channels
        self.state = state
        scale = 1.0 / math.sqrt(channels)
        self.a_log = Parameter(f"{prefix}/a_log", np.log(np.arange(1, state + 1, dtype=np.float64)))
        self.w_delta = Parameter(f"{prefix}/w_delta", rng.normal(0.0, scale, (channels, 1)))
        self.b_delta = Parameter(f"{prefix}/b_delta", np.full(1, _softplus_inv(0.5)))
        self.w_b = Parameter(f"{prefix}/w_b", rng.normal(0.0, scale, (channels, state)))
        self.b_b = Parameter(f"{prefix}/b_b", np.zeros(state))
        self.w_c = Parameter(f"{prefix}/w_c", rng.normal(0.0, scale, (channels, state)))
        self.b_c = Parameter(f"{prefix}/b_c", np.zeros(state))

    def parameters(self) -> List[Parameter]:
        return [self.a_log, self.w_delta, self.b_delta,
                self.w_b, self.b_b, self.w_c, self.b_c]


def selective_scan(ctx: Context, x: DiffTensor, params: SsmParams) -> DiffTensor:
    """Token-selective causal scan over axis 0 of x [L, C]."""
    if x.data.ndim != 2 or x.data.shape[1] != params.channels:
        raise DimensionError(
            f"selective_scan: x {list(x.data.shape)} vs {params.channels} channels")
    if x.data.shape[0] < 1:
        raise ContractError("selective_scan: empty sequence")
    delta = softplus(linear(x, ctx.p(params.w_delta), ctx.p(params.b_delta)))
    a = neg(exp(ctx.p(params.a_log)))
    abar, phi = zoh_factors(a, delta)
    bmat = linear(x, ctx.p(params.w_b), ctx.p(params.b_b))
    cmat = linear(x, ctx.p(params.w_c), ctx.p(params.b_c))
    bbar = mul(phi, bmat)
    return scan_tokens(x, abar, bbar, cmat)


class ChannelScanParams:
    """Per-position (channel-index) learned scan parameters for scanning the
    channel-transposed view; token lanes stay independent."""

    def __init__(self, prefix: str, positions: int, state: int, rng: np.random.Generator):
        self.positions = positions
        self.state = state
        self.a_log = Parameter(f"{prefix}/a_log", np.log(np.arange(1, state + 1, dtype=np.float64)))
        self.delta_raw = Parameter(f"{prefix}/delta_raw",
                                   np.full(positions, _softplus_inv(0.5)))
        self.b = Parameter(f"{prefix}/b", rng.normal(0.0, 1.0 / math.sqrt(state), (positions, state)))
        self.c = Parameter(f"{prefix}/c", rng.normal(0.0, 1.0 / math.sqrt(state), (positions, state)))

    def parameters(self) -> List[Parameter]:
        return [self.a_log, self.delta_raw, self.b, self.c]


def channel_scan(ctx: Context, x: DiffTensor, params: ChannelScanParams) -> DiffTensor:
    """Causal scan across the channel axis of x [L, C]; each token is an
    independent lane, so position t of the output depends only on x[t, :c]."""
    if x.data.shape[1] != params.positions:
        raise DimensionError(
            f"channel_scan: {x.data.shape[1]} channels vs {params.positions} positions")
    delta = softplus(ctx.p(params.delta_raw))
    a = neg(exp(ctx.p(params.a_log)))
    abar, phi = zoh_factors(a, delta)
    bbar = mul(phi, ctx.p(params.b))
    y = scan_tokens(transpose(x), abar, bbar, ctx.p(params.c))
    return transpose(y)


class TriMambaBlock:
    """Residual block fusing forward, backward and channel-flip scans.

    The input projection path starts with a per-token RMS rescale (pre-norm;
    keeps the residual stack stable). The three branch outputs are aggregated
    by summation, gated with a SiLU gate, projected and added back to the
    input; output shape equals input shape."""

    def __init__(self, prefix: str, channels: int, state: int, rng: np.random.Generator):
        self.channels = channels
        scale = 1.0 / math.sqrt(channels)
        self.w_in = Parameter(f"{prefix}/w_in", rng.normal(0.0, scale, (channels, channels)))
        self.b_in = Parameter(f"{prefix}/b_in", np.zeros(channels))
        self.w_gate = Parameter(f"{prefix}/w_gate", rng.normal(0.0, scale, (channels, channels)))
        self.b_gate = Parameter(f"{prefix}/b_gate", np.zeros(channels))
        self.w_out = Parameter(f"{prefix}/w_out", rng.normal(0.0, scale, (channels, channels)))
        self.b_out = Parameter(f"{prefix}/b_out", np.zeros(channels))
        self.fwd = SsmParams(f"{prefix}/fwd", channels, state, rng)
        self.bwd = SsmParams(f"{prefix}/bwd", channels, state, rng)
        self.chan = ChannelScanParams(f"{prefix}/chan", channels, state, rng)

    def parameters(self) -> List[Parameter]:
        out = [self.w_in, self.b_in, self.w_gate, self.b_gate, self.w_out, self.b_out]
        out += self.fwd.parameters() + self.bwd.parameters() + self.chan.parameters()
        return out

    def branch_outputs(self, ctx: Context, seq: DiffTensor):
        """Pre-aggregation branch outputs (forward, backward, channel)."""
        if seq.data.shape[0] < 1:
            raise ContractError("tri_mamba: empty group")
        u = linear(rms_norm_rows(seq), ctx.p(self.w_in), ctx.p(self.b_in))
        yf = selective_scan(ctx, u, self.fwd)
        yb = flip_rows(selective_scan(ctx, flip_rows(u), self.bwd))
        yc = channel_scan(ctx, u, self.chan)
        return yf, yb, yc

    def __call__(self, ctx: Context, seq: DiffTensor) -> DiffTensor:
        yf, yb, yc = self.branch_outputs(ctx, seq)
        g = silu(linear(rms_norm_rows(seq), ctx.p(self.w_gate), ctx.p(self.b_gate)))
        fused = mul(yf + yb + yc, g)
        return linear(fused, ctx.p(self.w_out), ctx.p(self.b_out)) + seq


def tri_mamba(ctx: Context, seq: DiffTensor, block: TriMambaBlock) -> DiffTensor:
    """Apply a TriMambaBlock to one serialized group."""
    return block(ctx, seq)


def tri_mamba_grouped(ctx: Context, feats: DiffTensor, block: TriMambaBlock,
                      group_slices) -> DiffTensor:
    """Apply the block independently to each contiguous group of rows."""
    slices = list(group_slices)
    if len(slices) == 1 and slices[0].start == 0 and slices[0].stop == feats.data.shape[0]:
        return block(ctx, feats)
    parts = [block(ctx, gather_rows(feats, np.arange(s.start, s.stop)))
             for s in slices]
    return concat_rows(parts)
