"""The occupancy network: 5-block 3D CNN encoder, multi-scale feature
queries, and single- or multi-head pointwise decoders.

Block k doubles channels and (between blocks) halves resolution; the
pyramid keeps every block's pre-pool output, optionally prefixed by the raw
input volume as scale 0. A query point gathers trilinear features from all
scales at the same normalized coordinate; the concatenated vector feeds a
3-layer pointwise decoder producing occupancy logits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BNState, Tensor
from .errors import ConfigError, InvalidArgument, LabelConflict
from .volume import VolumeGrid


@dataclass(frozen=True)
class EncoderConfig:
    base_channels: int = 8
    blocks: int = 5
    include_raw_input_scale: bool = True

    def channels(self, block: int) -> int:
        """Output channels of block k (1-based): base * 2^(k-1)."""
        return self.base_channels * (2 ** (block - 1))


@dataclass(frozen=True)
class DecoderConfig:
    variant: str = "multi"  # "single" (c+1 classes) or "multi" (one head per organ)
    organs: int = 1
    hidden_dim: int | None = None  # None -> 512 single-organ, 256 multi-organ
    layers: int = 3

    def __post_init__(self):
        if self.variant not in ("single", "multi"):
            raise InvalidArgument(f"decoder variant must be 'single' or 'multi', got {self.variant!r}")
        if self.organs < 1:
            raise InvalidArgument("need at least one organ")

    @property
    def hidden(self) -> int:
        if self.hidden_dim is not None:
            return self.hidden_dim
        return 512 if self.organs == 1 else 256


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    @property
    def feature_dim(self) -> int:
        f = sum(self.encoder.channels(k) for k in range(1, self.encoder.blocks + 1))
        if self.encoder.include_raw_input_scale:
            f += 1
        return f

    def to_dict(self) -> dict:
        return {
            "encoder": {
                "base_channels": self.encoder.base_channels,
                "blocks": self.encoder.blocks,
                "include_raw_input_scale": self.encoder.include_raw_input_scale,
            },
            "decoder": {
                "variant": self.decoder.variant,
                "organs": self.decoder.organs,
                "hidden_dim": self.decoder.hidden,
                "layers": self.decoder.layers,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            EncoderConfig(**d["encoder"]),
            DecoderConfig(**d["decoder"]),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FeaturePyramid:
    """Per-scale feature grids; scale 0 may be the raw input volume."""

    scales: list[Tensor]

    @property
    def resolutions(self) -> list[int]:
        return [s.shape[2] for s in self.scales]

    @property
    def channel_counts(self) -> list[int]:
        return [s.shape[1] for s in self.scales]


@dataclass
class ModelParams:
    """All trainable tensors plus batch-norm and optimizer state."""

    config: ModelConfig
    tensors: dict[str, Tensor]
    bn_states: dict[str, BNState]
    adam: ad.AdamState
    seed: int
    step: int = 0

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        dup = ModelParams(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.tensors.items()},
            {k: s.copy() for k, s in self.bn_states.items()},
            ad.AdamState(self.adam.step, [m.copy() for m in self.adam.m], [v.copy() for v in self.adam.v]),
            self.seed,
            self.step,
        )
        return dup


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """He-initialized parameters with a deterministic name order."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0DE)))
    tensors: dict[str, Tensor] = {}
    bn_states: dict[str, BNState] = {}

    def param(name, shape, std):
        data = (rng.standard_normal(shape) * std).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True)

    def zeros(name, shape):
        tensors[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(name, shape):
        tensors[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    enc = config.encoder
    c_in = 1
    for k in range(1, enc.blocks + 1):
        c_out = enc.channels(k)
        for conv_i, ci in (("conv1", c_in), ("conv2", c_out)):
            param(f"enc.b{k}.{conv_i}.w", (c_out, ci, 3, 3, 3), np.sqrt(2.0 / (27 * ci)))
            zeros(f"enc.b{k}.{conv_i}.b", (c_out,))
            bn_name = f"enc.b{k}.bn{conv_i[-1]}"
            ones(f"{bn_name}.gamma", (c_out,))
            zeros(f"{bn_name}.beta", (c_out,))
            bn_states[bn_name] = BNState.initial(c_out, dtype)
        c_in = c_out

    dec = config.decoder
    F = config.feature_dim
    hidden = dec.hidden
    heads = dec.organs if dec.variant == "multi" else 1
    out_dim = 1 if dec.variant == "multi" else dec.organs + 1
    for h in range(heads):
        dims = [(hidden, F), (hidden, hidden), (out_dim, hidden)]
        for li, (g, f) in enumerate(dims, start=1):
            std = np.sqrt(2.0 / f) if li < len(dims) else 1.0 / np.sqrt(f)
            param(f"dec{h}.l{li}.w", (g, f), std)
            zeros(f"dec{h}.l{li}.b", (g,))

    params = ModelParams(config, tensors, bn_states, ad.AdamState.initial([]), seed)
    params.adam = ad.AdamState.initial(params.parameters())
    return params


def volumes_to_batch(volumes: list[VolumeGrid], dtype=np.float32) -> Tensor:
    """Stack volumes into an (N, 1, D, H, W) input tensor."""
    data = np.stack([v.values for v in volumes]).astype(dtype)[:, None]
    return Tensor(data)


def encode(x: Tensor, params: ModelParams, mode: str) -> FeaturePyramid:
    """Run the 5-block encoder; returns each block's pre-pool features.

    Input spatial dims must be divisible by 2^(blocks-1) so every pooling
    stage halves cleanly.
    """
    enc = params.config.encoder
    div = 2 ** (enc.blocks - 1)
    if any(d % div for d in x.shape[2:]):
        raise InvalidArgument(f"input dims {x.shape[2:]} not divisible by {div}")
    scales: list[Tensor] = []
    if enc.include_raw_input_scale:
        scales.append(x)
    h = x
    for k in range(1, enc.blocks + 1):
        for conv_i in ("conv1", "conv2"):
            w = params.tensors[f"enc.b{k}.{conv_i}.w"]
            b = params.tensors[f"enc.b{k}.{conv_i}.b"]
            bn_name = f"enc.b{k}.bn{conv_i[-1]}"
            gamma = params.tensors[f"{bn_name}.gamma"]
            beta = params.tensors[f"{bn_name}.beta"]
            h = ad.conv3d(h, w, b)
            h = ad.batchnorm3d(h, gamma, beta, params.bn_states[bn_name], mode)
            h = ad.relu(h)
        scales.append(h)
        if k < enc.blocks:
            h = ad.maxpool3d(h)
    return FeaturePyramid(scales)


def encode_volume(v: VolumeGrid, params: ModelParams, mode: str) -> FeaturePyramid:
    return encode(volumes_to_batch([v], params.parameters()[0].dtype), params, mode)


def query_features(pyr: FeaturePyramid, points: np.ndarray) -> Tensor:
    """Trilinear features from every scale at the same normalized points,
    concatenated along the channel axis: (N, F, P)."""
    return ad.concat_channels([ad.trilinear_sample(s, points) for s in pyr.scales])


def decode(features: Tensor, params: ModelParams) -> Tensor:
    """Pointwise decoder stack(s) -> logits (N, c, P) or (N, c+1, P)."""
    dec = params.config.decoder
    if features.shape[1] != params.config.feature_dim:
        raise InvalidArgument(
            f"feature dim {features.shape[1]} does not match config {params.config.feature_dim}"
        )
    heads = dec.organs if dec.variant == "multi" else 1
    outs = []
    for h in range(heads):
        t = features
        for li in range(1, dec.layers + 1):
            w = params.tensors[f"dec{h}.l{li}.w"]
            b = params.tensors[f"dec{h}.l{li}.b"]
            act = "relu" if li < dec.layers else "none"
            t = ad.pointwise_layer(t, w, b, act)
        outs.append(t)
    return outs[0] if len(outs) == 1 else ad.concat_channels(outs)


def labels_to_class_ids(labels: np.ndarray) -> np.ndarray:
    """(N, c, P) one-per-organ labels -> class ids (N, P), background = 0."""
    if (labels.sum(axis=1) > 1).any():
        raise LabelConflict("a point is labeled inside more than one organ")
    c = labels.shape[1]
    ids = (labels * np.arange(1, c + 1)[None, :, None]).sum(axis=1)
    return ids.astype(np.int64)


def loss(logits: Tensor, labels: np.ndarray, config: ModelConfig) -> Tensor:
    """Training loss: summed per-organ BCE (multi) or softmax CE (single).

    The multi-head sum of per-organ means equals c times the mean over all
    organ channels, which is how it is computed here.
    """
    c = config.decoder.organs
    if config.decoder.variant == "multi":
        if logits.shape[1] != c or labels.shape != logits.shape:
            raise InvalidArgument(f"multi loss expects logits/labels (N,{c},P), got {logits.shape}, {labels.shape}")
        return ad.scale(ad.bce_with_logits(logits, labels.astype(logits.dtype)), float(c))
    if logits.shape[1] != c + 1:
        raise InvalidArgument(f"single-decoder logits must have {c + 1} channels, got {logits.shape[1]}")
    return ad.cross_entropy(logits, labels_to_class_ids(labels))


def forward(
    v: VolumeGrid | Tensor,
    points: np.ndarray,
    params: ModelParams,
    mode: str = "eval",
) -> np.ndarray:
    """End-to-end occupancy probabilities per organ: (N, c, P) in [0, 1]."""
    x = v if isinstance(v, Tensor) else volumes_to_batch([v], params.parameters()[0].dtype)
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    with ad.no_grad():
        pyr = encode(x, params, mode)
        feats = query_features(pyr, pts)
        logits = decode(feats, params)
    if params.config.decoder.variant == "multi":
        return ad.sigmoid(logits.data)
    soft = ad.softmax(logits.data, axis=1)
    return soft[:, 1:, :]


def check_fingerprint(params: ModelParams, expected: str) -> None:
    if params.fingerprint != expected:
        raise ConfigError(f"checkpoint fingerprint {expected} does not match config {params.fingerprint}")
