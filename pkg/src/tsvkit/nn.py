"""Parameter collections and the blocks shared by both trainable modules."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ParamSet(dict):
    """Ordered ``name -> Tensor`` mapping; every tensor carries its own name."""

    def new(self, name: str, shape: tuple[int, ...], rng: np.random.Generator | None = None,
            fan_in: int | None = None, fill: float | None = None) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        if fill is not None:
            data = np.full(shape, float(fill))
        else:
            bound = np.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        t = Tensor(data, requires_grad=True, name=name)
        self[name] = t
        return t

    def tensors(self) -> list[Tensor]:
        return list(self.values())

    def set_trainable(self, flag: bool) -> None:
        for t in self.values():
            t.requires_grad = flag

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self) - set(state)
        extra = set(state) - set(self)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in self.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def num_elements(self) -> int:
        return sum(t.data.size for t in self.values())

    def with_prefix(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        return ((k, t) for k, t in self.items() if k.startswith(prefix))


def add_conv1x1(p: ParamSet, name: str, c_out: int, c_in: int, rng) -> None:
    p.new(f"{name}.W", (c_out, c_in), rng, fan_in=c_in)
    p.new(f"{name}.b", (c_out,), rng, fan_in=c_in)


def add_norm(p: ParamSet, name: str, channels: int) -> None:
    p.new(f"{name}.gain", (channels,), fill=1.0)
    p.new(f"{name}.bias", (channels,), fill=0.0)


def conv1x1(x, p: ParamSet, name: str) -> Tensor:
    return ad.conv1x1(x, p[f"{name}.W"], p[f"{name}.b"])


def cln(x, p: ParamSet, name: str) -> Tensor:
    return ad.channel_layer_norm(x, p[f"{name}.gain"], p[f"{name}.bias"])


def gln(x, p: ParamSet, name: str) -> Tensor:
    return ad.global_layer_norm(x, p[f"{name}.gain"], p[f"{name}.bias"])


# ------------------------------------------------------------ multi-scale encoder

def add_encoder(p: ParamSet, name: str, n_filters: int, kernels: Sequence[int], rng) -> None:
    for i, width in enumerate(kernels, 1):
        p.new(f"{name}.U{i}", (n_filters, 1, width), rng, fan_in=width)


def n_frames(length: int, shortest: int, stride: int) -> int:
    if length < shortest:
        raise ValueError(f"waveform of {length} samples is shorter than the {shortest}-sample kernel")
    return (length - shortest) // stride + 1


def encode_scales(w, p: ParamSet, name: str, kernels: Sequence[int], stride: int) -> list[Tensor]:
    """ReLU(conv) at each kernel length; the input is right-padded so all scales give K frames."""
    w = ad.reshape(ad.as_tensor(w), (1, -1))
    k = n_frames(w.shape[1], kernels[0], stride)
    out = []
    for i, width in enumerate(kernels, 1):
        need = (k - 1) * stride + width
        xi = ad.pad_right(w, need)
        out.append(ad.relu(ad.conv1d(xi, p[f"{name}.U{i}"], stride)))
    return out


# --------------------------------------------------------------- residual trunk

def add_resnet_block(p: ParamSet, name: str, channels: int, rng) -> None:
    add_conv1x1(p, f"{name}.conv1", channels, channels, rng)
    add_norm(p, f"{name}.norm1", channels)
    add_conv1x1(p, f"{name}.conv2", channels, channels, rng)
    add_norm(p, f"{name}.norm2", channels)


def resnet_block(x, p: ParamSet, name: str) -> Tensor:
    h = ad.relu(gln(conv1x1(x, p, f"{name}.conv1"), p, f"{name}.norm1"))
    h = gln(conv1x1(h, p, f"{name}.conv2"), p, f"{name}.norm2")
    return ad.pool(x + h, "max3")


def add_trunk(p: ParamSet, name: str, in_dim: int, channels: int, out_dim: int,
              n_blocks: int, rng) -> None:
    add_norm(p, f"{name}.cln", in_dim)
    add_conv1x1(p, f"{name}.conv_in", channels, in_dim, rng)
    for b in range(n_blocks):
        add_resnet_block(p, f"{name}.res{b}", channels, rng)
    add_conv1x1(p, f"{name}.conv_out", out_dim, channels, rng)


def min_trunk_frames(n_blocks: int) -> int:
    return 3 ** n_blocks


def trunk(x, p: ParamSet, name: str, n_blocks: int) -> Tensor:
    """cLN -> 1x1 conv -> residual blocks (each ending in max3) -> 1x1 conv."""
    if x.shape[1] < min_trunk_frames(n_blocks):
        raise ValueError(f"{x.shape[1]} frames cannot survive {n_blocks} max3 poolings")
    h = conv1x1(cln(x, p, f"{name}.cln"), p, f"{name}.conv_in")
    for b in range(n_blocks):
        h = resnet_block(h, p, f"{name}.res{b}")
    return conv1x1(h, p, f"{name}.conv_out")


# ------------------------------------------------------------------ TCN blocks

def add_tcn_block(p: ParamSet, name: str, in_ch: int, out_ch: int, hidden: int,
                  taps: int, rng) -> None:
    add_conv1x1(p, f"{name}.conv_in", hidden, in_ch, rng)
    add_norm(p, f"{name}.norm1", hidden)
    p.new(f"{name}.dconv", (hidden, taps), rng, fan_in=taps)
    add_norm(p, f"{name}.norm2", hidden)
    add_conv1x1(p, f"{name}.conv_out", out_ch, hidden, rng)


def tcn_block(x, p: ParamSet, name: str, dilation: int, cond=None) -> Tensor:
    """Dilated depthwise-separable block; ``cond`` is concatenated onto the input only."""
    inp = x if cond is None else ad.concat([x, cond], axis=0)
    h = gln(ad.relu(conv1x1(inp, p, f"{name}.conv_in")), p, f"{name}.norm1")
    h = gln(ad.relu(ad.depthwise_conv1d(h, p[f"{name}.dconv"], dilation)), p, f"{name}.norm2")
    return x + conv1x1(h, p, f"{name}.conv_out")


# ------------------------------------------------------------ attentive pooling

def add_attentive_pool(p: ParamSet, name: str, channels: int, hidden: int, rng) -> None:
    add_conv1x1(p, f"{name}.fc1", hidden, channels, rng)
    add_conv1x1(p, f"{name}.fc2", 1, hidden, rng)


def attentive_stat_pool(h, p: ParamSet, name: str, return_weights: bool = False):
    """Softmax-weighted mean and standard deviation over frames, concatenated."""
    h = ad.as_tensor(h)
    score = conv1x1(ad.relu(conv1x1(h, p, f"{name}.fc1")), p, f"{name}.fc2")
    weights = ad.softmax(score, axis=1)  # 1 × T
    wt = ad.transpose(weights)
    # moments about the first frame: same values, and identical frames give exactly zero spread
    shift = ad.getitem(h, (slice(None), slice(0, 1)))
    hs = h - shift
    mu_s = ad.matmul(hs, wt)
    var = ad.maximum(ad.matmul(hs * hs, wt) - mu_s * mu_s, 0.0)
    out = ad.reshape(ad.concat([shift + mu_s, ad.sqrt(var)], axis=0), (-1,))
    return (out, weights) if return_weights else out
