"""Speaker representation module: four ways to turn attention output into a
target-speaker embedding.

=======  ===========================  ==================================  =====
scheme   input                        front end                           dim
=======  ===========================  ==================================  =====
R        masked coefficients (3N×K)   none                                E
T        first reconstructed signal   trainable 3-scale conv encoder      E
F        first reconstructed signal   STFT magnitude                      E
FA       first reconstructed signal   STFT magnitude + deltas, attentive  2E
=======  ===========================  ==================================  =====
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import dsp, nn
from .autodiff import Tensor

PREFIX = "representation"
SCHEMES = ("R", "T", "F", "FA")


@dataclass
class RepresentationConfig:
    scheme: str = "FA"
    n_filters: int = 256
    kernels: tuple[int, int, int] = (20, 80, 160)
    resnet_channels: int = 256
    resnet_blocks: int = 3
    embed_dim: int = 256
    attention_hidden: int = 500
    n_speakers: int = 101

    def __post_init__(self):
        self.scheme = self.scheme.upper()
        self.kernels = tuple(int(k) for k in self.kernels)

    def validate(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        for name in ("n_filters", "resnet_channels", "resnet_blocks", "embed_dim",
                     "attention_hidden", "n_speakers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def stride(self) -> int:
        return self.kernels[0] // 2

    @property
    def input_dim(self) -> int:
        return {"R": 3 * self.n_filters, "T": 3 * self.n_filters,
                "F": dsp.N_BINS, "FA": 3 * dsp.N_BINS}[self.scheme]

    @property
    def output_dim(self) -> int:
        return 2 * self.embed_dim if self.scheme == "FA" else self.embed_dim

    @property
    def uses_waveform(self) -> bool:
        return self.scheme != "R"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Embedding:
    values: np.ndarray
    scheme: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)


class RepresentationParams(nn.ParamSet):
    def __init__(self, config: RepresentationConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        if c.scheme == "T":
            nn.add_encoder(self, f"{PREFIX}.encoder", c.n_filters, c.kernels, rng)
        nn.add_trunk(self, f"{PREFIX}.trunk", c.input_dim, c.resnet_channels, c.embed_dim,
                     c.resnet_blocks, rng)
        if c.scheme == "FA":
            nn.add_attentive_pool(self, f"{PREFIX}.pool", c.embed_dim, c.attention_hidden, rng)
        nn.add_conv1x1(self, f"{PREFIX}.head", c.n_speakers, c.output_dim, rng)


def _signal(w) -> Tensor:
    if isinstance(w, Tensor):
        return ad.reshape(w, (-1,))
    return Tensor(np.asarray(getattr(w, "samples", w), dtype=np.float64).reshape(-1))


def _require(params: RepresentationParams, scheme: str) -> None:
    if params.config.scheme != scheme:
        raise ValueError(f"parameters were built for scheme {params.config.scheme}, not {scheme}")


def _mean_trunk(features: Tensor, params: RepresentationParams) -> Tensor:
    h = nn.trunk(features, params, f"{PREFIX}.trunk", params.config.resnet_blocks)
    return ad.reshape(ad.pool(h, "mean"), (-1,))


def embed_R(S_hat, params: RepresentationParams) -> Tensor:
    _require(params, "R")
    return _mean_trunk(ad.as_tensor(S_hat), params)


def embed_T(s1, params: RepresentationParams) -> Tensor:
    _require(params, "T")
    c = params.config
    scales = nn.encode_scales(_signal(s1), params, f"{PREFIX}.encoder", c.kernels, c.stride)
    return _mean_trunk(ad.concat(scales, axis=0), params)


def embed_F(s1, params: RepresentationParams) -> Tensor:
    _require(params, "F")
    return _mean_trunk(dsp.stft_magnitude_tensor(_signal(s1)), params)


def attentive_stat_pool(H, params: RepresentationParams, return_weights: bool = False):
    return nn.attentive_stat_pool(H, params, f"{PREFIX}.pool", return_weights)


def embed_FA(s1, params: RepresentationParams) -> Tensor:
    _require(params, "FA")
    feats = dsp.add_deltas_tensor(dsp.stft_magnitude_tensor(_signal(s1)))
    h = nn.trunk(feats, params, f"{PREFIX}.trunk", params.config.resnet_blocks)
    return attentive_stat_pool(h, params)


_EMBEDDERS = {"R": embed_R, "T": embed_T, "F": embed_F, "FA": embed_FA}


def embed(inp, params: RepresentationParams) -> Tensor:
    """Dispatch on the scheme the parameters were built for."""
    return _EMBEDDERS[params.config.scheme](inp, params)


def embedding(inp, params: RepresentationParams) -> Embedding:
    return Embedding(embed(inp, params).data.copy(), params.config.scheme)


def classify(e, params: RepresentationParams) -> Tensor:
    values = e.values if isinstance(e, Embedding) else e
    if isinstance(e, Embedding) and e.scheme != params.config.scheme:
        raise ValueError(f"embedding from scheme {e.scheme} given to a {params.config.scheme} head")
    values = ad.as_tensor(values)
    if values.shape != (params.config.output_dim,):
        raise ValueError(f"embedding dimension {values.shape} != {params.config.output_dim}")
    return ad.affine(values, params[f"{PREFIX}.head.W"], params[f"{PREFIX}.head.b"])
