"""Speaker attention module: multi-scale encoder, speaker encoder, TCN mask
extractor and per-scale decoders.

The module turns an observed signal ``y`` and a reference ``x`` of the target
speaker into masked encoder coefficients (consumed by the R embedding scheme)
and three reconstructed waveforms (the first feeds the T/F/FA schemes).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

PREFIX = "attention"


@dataclass
class AttentionConfig:
    n_filters: int = 256
    kernels: tuple[int, int, int] = (20, 80, 160)
    extractor_channels: int = 256
    tcn_channels: int = 512
    tcn_kernel: int = 3
    tcn_blocks: int = 8
    tcn_stacks: int = 4
    resnet_blocks: int = 3
    resnet_channels: int = 256
    speaker_dim: int = 256
    n_speakers: int = 101

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)

    @property
    def stride(self) -> int:
        return self.kernels[0] // 2

    def validate(self) -> None:
        l1, l2, l3 = self.kernels
        if not l1 < l2 < l3:
            raise ValueError(f"kernel lengths must increase, got {self.kernels}")
        if l1 % 2 or l1 % self.stride:
            raise ValueError("the shortest kernel must be even so its half divides it")
        for name in ("n_filters", "extractor_channels", "tcn_channels", "tcn_kernel",
                     "tcn_blocks", "tcn_stacks", "resnet_blocks", "resnet_channels",
                     "speaker_dim", "n_speakers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttentionOutput:
    scaled: list[Tensor]          # masked coefficients, one N×K per scale
    coefficients: Tensor          # their 3N×K concatenation
    signals: list[Tensor]         # reconstructed waveforms, length T1 each
    masks: list[Tensor]
    speaker_vector: Tensor        # D×1
    logits: Tensor                # n_speakers
    encoded: list[Tensor] = field(default_factory=list)


class AttentionParams(nn.ParamSet):
    def __init__(self, config: AttentionConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        n3 = 3 * c.n_filters
        nn.add_encoder(self, f"{PREFIX}.encoder", c.n_filters, c.kernels, rng)

        sp = f"{PREFIX}.speaker"
        nn.add_trunk(self, sp, n3, c.resnet_channels, c.speaker_dim, c.resnet_blocks, rng)
        nn.add_conv1x1(self, f"{sp}.head", c.n_speakers, c.speaker_dim, rng)

        ex = f"{PREFIX}.extractor"
        nn.add_norm(self, f"{ex}.cln", n3)
        nn.add_conv1x1(self, f"{ex}.conv_in", c.extractor_channels, n3, rng)
        for s in range(c.tcn_stacks):
            for i in range(c.tcn_blocks):
                in_ch = c.extractor_channels + (c.speaker_dim if i == 0 else 0)
                nn.add_tcn_block(self, f"{ex}.stack{s}.block{i}", in_ch, c.extractor_channels,
                                 c.tcn_channels, c.tcn_kernel, rng)
        for i in range(1, 4):
            nn.add_conv1x1(self, f"{ex}.mask{i}", c.n_filters, c.extractor_channels, rng)

        for i, width in enumerate(c.kernels, 1):
            self.new(f"{PREFIX}.decoder.V{i}", (c.n_filters, width), rng, fan_in=c.n_filters)


def _as_signal(w) -> Tensor:
    if isinstance(w, Tensor):
        return ad.reshape(w, (-1,))
    return Tensor(np.asarray(getattr(w, "samples", w), dtype=np.float64).reshape(-1))


def speech_encode_scales(w, params: AttentionParams) -> list[Tensor]:
    c = params.config
    return nn.encode_scales(_as_signal(w), params, f"{PREFIX}.encoder", c.kernels, c.stride)


def speech_encode(w, params: AttentionParams) -> Tensor:
    """Non-negative 3N×K coefficients; K = (T - L1) // (L1/2) + 1."""
    return ad.concat(speech_encode_scales(w, params), axis=0)


def speaker_encode(X, params: AttentionParams) -> tuple[Tensor, Tensor]:
    c = params.config
    sp = f"{PREFIX}.speaker"
    if X.shape[1] < nn.min_trunk_frames(c.resnet_blocks):
        raise ValueError(f"reference too short: {X.shape[1]} frames, "
                         f"need {nn.min_trunk_frames(c.resnet_blocks)}")
    v = ad.pool(nn.trunk(X, params, sp, c.resnet_blocks), "mean")
    logits = ad.affine(ad.reshape(v, (-1,)), params[f"{sp}.head.W"], params[f"{sp}.head.b"])
    return v, logits


def extract(Y, v, params: AttentionParams) -> list[Tensor]:
    c = params.config
    ex = f"{PREFIX}.extractor"
    if v.shape != (c.speaker_dim, 1):
        raise ValueError(f"speaker vector shape {v.shape}, expected ({c.speaker_dim}, 1)")
    if Y.shape[0] != 3 * c.n_filters:
        raise ValueError(f"expected {3 * c.n_filters} coefficient channels, got {Y.shape[0]}")
    h = nn.conv1x1(nn.cln(Y, params, f"{ex}.cln"), params, f"{ex}.conv_in")
    cond = ad.repeat_time(v, Y.shape[1])
    for s in range(c.tcn_stacks):
        for i in range(c.tcn_blocks):
            h = nn.tcn_block(h, params, f"{ex}.stack{s}.block{i}", 2 ** i,
                             cond=cond if i == 0 else None)
    return [ad.relu(nn.conv1x1(h, params, f"{ex}.mask{i}")) for i in range(1, 4)]


def decode(S_i, scale: int, params: AttentionParams, target_len: int) -> Tensor:
    """Transposed convolution with basis V_scale, then trimmed or zero-padded to ``target_len``."""
    if scale not in (1, 2, 3):
        raise ValueError(f"scale must be 1, 2 or 3, got {scale}")
    basis = params[f"{PREFIX}.decoder.V{scale}"]
    if S_i.shape[0] != basis.shape[0]:
        raise ValueError(f"{S_i.shape[0]} channels for a {basis.shape[0]}-row basis")
    raw = ad.conv_transpose1d(S_i, basis, params.config.stride)
    return ad.reshape(ad.pad_right(raw, target_len), (-1,))


def forward_attention(y, x, params: AttentionParams, masks_override=None) -> AttentionOutput:
    """Extract the speaker of reference ``x`` from observed ``y``.

    ``masks_override`` replaces the estimated masks (used by diagnostics).
    """
    y_sig = _as_signal(y)
    target_len = y_sig.shape[0]
    Ys = speech_encode_scales(y_sig, params)
    X = speech_encode(x, params)
    v, logits = speaker_encode(X, params)
    masks = extract(ad.concat(Ys, axis=0), v, params) if masks_override is None else masks_override
    scaled = [m * Yi for m, Yi in zip(masks, Ys)]
    signals = [decode(S, i, params, target_len) for i, S in enumerate(scaled, 1)]
    return AttentionOutput(scaled=scaled, coefficients=ad.concat(scaled, axis=0), signals=signals,
                           masks=masks, speaker_vector=v, logits=logits, encoded=Ys)
