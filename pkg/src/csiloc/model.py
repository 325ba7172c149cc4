"""DN baseline and attention-enhanced ADN regression networks, plus checkpoints.

Pipeline for one CSI matrix H (M antennas x K subcarriers):

1. subcarrier tokens: per subcarrier, [Re H[:, k], Im H[:, k]] -> MLP(2M, 64, d_sub)
2. ADN only: self-attention over the K subcarrier tokens, residual add
3. per-subcarrier projection d_sub -> 2, added to every antenna's raw
   [Re H[m, :], Im H[m, :]] row, then MLP(2K, 64, d_ant) -> antenna tokens
4. ADN only: self-attention over the M antenna tokens, residual add
5. mean over antenna tokens -> dense head -> (x, y) meters
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .core import Dataset, Normalizer

HIDDEN = 64
CHECKPOINT_MAGIC = b"CSIM"


@dataclass(frozen=True)
class ModelConfig:
    M: int
    K: int
    d_sub: int = 32
    d_ant: int = 32
    head_widths: tuple[int, ...] = (128, 64)
    with_subcarrier_attention: bool = False
    with_antenna_attention: bool = False
    input_repr: str = "real_imag"
    init_seed: int = 0
    dtype: str = "float32"
    attention_residual: bool = True

    def __post_init__(self):
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if min(self.M, self.K, self.d_sub, self.d_ant, *self.head_widths, 1) < 1:
            raise ValueError("all dimensions and widths must be >= 1")
        if self.with_subcarrier_attention != self.with_antenna_attention:
            raise ValueError("attention flags must both be on (ADN) or both off (DN)")
        if self.input_repr != "real_imag":
            raise ValueError(f"unsupported input_repr {self.input_repr!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def kind(self) -> str:
        return "adn" if self.with_antenna_attention else "dn"

    @classmethod
    def for_kind(cls, kind: str, M: int, K: int, **kw) -> "ModelConfig":
        kind = kind.lower()
        if kind not in ("dn", "adn"):
            raise ValueError(f"unknown model kind {kind!r}")
        flag = kind == "adn"
        return cls(M=M, K=K, with_subcarrier_attention=flag, with_antenna_attention=flag, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_widths"] = list(self.head_widths)
        return d


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Declared parameter order; also the checkpoint blob order."""
    shapes = OrderedDict()
    shapes["sub.w1"] = (2 * cfg.M, HIDDEN)
    shapes["sub.b1"] = (HIDDEN,)
    shapes["sub.w2"] = (HIDDEN, cfg.d_sub)
    shapes["sub.b2"] = (cfg.d_sub,)
    if cfg.with_subcarrier_attention:
        for name in ("wq", "wk", "wv"):
            shapes[f"sub_attn.{name}"] = (cfg.d_sub, cfg.d_sub)
    shapes["proj.w"] = (cfg.d_sub, 2)
    shapes["proj.b"] = (2,)
    shapes["ant.w1"] = (2 * cfg.K, HIDDEN)
    shapes["ant.b1"] = (HIDDEN,)
    shapes["ant.w2"] = (HIDDEN, cfg.d_ant)
    shapes["ant.b2"] = (cfg.d_ant,)
    if cfg.with_antenna_attention:
        for name in ("wq", "wk", "wv"):
            shapes[f"ant_attn.{name}"] = (cfg.d_ant, cfg.d_ant)
    width = cfg.d_ant
    for i, w in enumerate(cfg.head_widths):
        shapes[f"head.w{i}"] = (width, w)
        shapes[f"head.b{i}"] = (w,)
        width = w
    shapes["out.w"] = (width, 2)
    shapes["out.b"] = (2,)
    return shapes


def init_parameters(cfg: ModelConfig) -> "OrderedDict[str, ad.Tensor]":
    """Glorot-uniform weights, zero biases.

    Each parameter draws from its own substream keyed by (seed, name), so DN
    and ADN built from one seed agree on every shared parameter.
    """
    params = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        if len(shape) == 1:
            value = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            rng = np.random.default_rng([cfg.init_seed, zlib.crc32(name.encode())])
            value = rng.uniform(-limit, limit, size=shape)
        params[name] = ad.parameter(value.astype(cfg.dtype))
    return params


@dataclass
class TrainedModel:
    config: ModelConfig
    params: "OrderedDict[str, ad.Tensor]"
    normalizer: Normalizer | None = None
    position_offset: tuple[float, float] = (0.0, 0.0)
    metadata: dict = field(default_factory=dict)

    @property
    def has_antenna_attention(self) -> bool:
        return self.config.with_antenna_attention

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def parameter_list(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def copy(self) -> "TrainedModel":
        params = OrderedDict((k, ad.parameter(v.data.copy())) for k, v in self.params.items())
        return TrainedModel(self.config, params, self.normalizer, tuple(self.position_offset),
                            dict(self.metadata))


def build_model(cfg: ModelConfig, normalizer: Normalizer | None = None,
                position_offset=(0.0, 0.0)) -> TrainedModel:
    return TrainedModel(cfg, init_parameters(cfg), normalizer, tuple(float(v) for v in position_offset))


def attention(q, k, v, return_weights: bool = False):
    """softmax(q k^T / sqrt(d)) v over the token axis (second to last)."""
    q, k, v = (ad._as_tensor(t) for t in (q, k, v))
    if q.shape != k.shape or q.shape[-2] != v.shape[-2] or q.shape[:-2] != v.shape[:-2]:
        raise ValueError(f"attention shape mismatch: Q {q.shape}, K {k.shape}, V {v.shape}")
    d = q.shape[-1]
    if d < 1:
        raise ValueError("attention width must be >= 1")
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d))
    weights = ad.softmax_rows(scores)
    out = ad.matmul(weights, v)
    return (out, weights) if return_weights else out


def _dense(x, w, b):
    return ad.add_bias(ad.matmul(x, w), b)


def _self_attention_block(e, params, prefix, residual=True):
    q = ad.matmul(e, params[f"{prefix}.wq"])
    k = ad.matmul(e, params[f"{prefix}.wk"])
    v = ad.matmul(e, params[f"{prefix}.wv"])
    out, weights = attention(q, k, v, return_weights=True)
    return (ad.add(e, out) if residual else out), weights


def input_features(h: np.ndarray, dtype="float32"):
    """Split complex CSI (B, M, K) into subcarrier-major and antenna-major real views."""
    re = h.real.astype(dtype)
    im = h.imag.astype(dtype)
    per_antenna = np.concatenate([re, im], axis=-1)                   # (B, M, 2K)
    per_subcarrier = np.concatenate([re, im], axis=-2).swapaxes(-1, -2)  # (B, K, 2M)
    return np.ascontiguousarray(per_subcarrier), np.ascontiguousarray(per_antenna)


def forward_graph(params, cfg: ModelConfig, h: np.ndarray):
    """Build the graph for a batch of normalized CSI (B, M, K).

    Returns the raw (B, 2) output node, before the position offset, and a dict of
    attention weight nodes.
    """
    if h.ndim == 2:
        h = h[None]
    if h.shape[1:] != (cfg.M, cfg.K):
        raise ValueError(
            f"CSI dims (M={h.shape[1]}, K={h.shape[2]}) do not match model (M={cfg.M}, K={cfg.K})"
        )
    B = h.shape[0]
    x_sub, x_ant = input_features(h, cfg.dtype)
    diag = {}

    e = _dense(ad.relu(_dense(ad.constant(x_sub), params["sub.w1"], params["sub.b1"])),
               params["sub.w2"], params["sub.b2"])
    if cfg.with_subcarrier_attention:
        e, diag["subcarrier"] = _self_attention_block(e, params, "sub_attn", cfg.attention_residual)

    p = _dense(e, params["proj.w"], params["proj.b"])                 # (B, K, 2)
    p = ad.reshape(ad.transpose(p), (B, 1, 2 * cfg.K))                # re slots then im slots
    z = ad.add(ad.constant(x_ant), p)
    a = _dense(ad.relu(_dense(z, params["ant.w1"], params["ant.b1"])), params["ant.w2"], params["ant.b2"])
    if cfg.with_antenna_attention:
        a, diag["antenna"] = _self_attention_block(a, params, "ant_attn", cfg.attention_residual)

    y = ad.mean_rows(a)
    for i in range(len(cfg.head_widths)):
        y = ad.relu(_dense(y, params[f"head.w{i}"], params[f"head.b{i}"]))
    y = _dense(y, params["out.w"], params["out.b"])
    return y, diag


def _frozen(params):
    return OrderedDict((k, ad.constant(v.data)) for k, v in params.items())


def forward(model: TrainedModel, h: np.ndarray, return_attention: bool = False):
    """Predict positions (meters) for normalized CSI of shape (M, K) or (B, M, K)."""
    single = np.asarray(h).ndim == 2
    out, diag = forward_graph(_frozen(model.params), model.config, np.asarray(h))
    pos = out.data.astype(np.float64) + np.asarray(model.position_offset)
    attn = {k: v.data for k, v in diag.items()}
    if single:
        pos = pos[0]
        attn = {k: v[0] for k, v in attn.items()}
    return (pos, attn) if return_attention else pos


def _normalized_csi(model: TrainedModel, ds: Dataset) -> np.ndarray:
    if ds.geometry.shape != (model.config.M, model.config.K):
        raise ValueError(
            f"dataset dims (M={ds.geometry.num_antennas}, K={ds.geometry.num_subcarriers}) do not "
            f"match model (M={model.config.M}, K={model.config.K})"
        )
    h = ds.csi()
    return model.normalizer.apply(h) if model.normalizer is not None else h


def predict(model: TrainedModel, ds: Dataset, batch_size: int = 256) -> np.ndarray:
    """Normalize with the model's stored normalizer and predict every sample, (N, 2) meters."""
    h = _normalized_csi(model, ds)
    return np.concatenate([forward(model, h[i:i + batch_size]) for i in range(0, len(h), batch_size)])


def antenna_weights_from_matrix(attn: np.ndarray) -> np.ndarray:
    """Column means of a row-stochastic (..., M, M) matrix: attention received per antenna."""
    return np.asarray(attn).mean(axis=-2)


def extract_antenna_attention(model: TrainedModel, h: np.ndarray) -> np.ndarray:
    if not model.has_antenna_attention:
        raise ValueError("model has no antenna attention")
    _, attn = forward(model, h, return_attention=True)
    return antenna_weights_from_matrix(attn["antenna"])


def antenna_attention_for_dataset(model: TrainedModel, ds: Dataset, batch_size: int = 256) -> np.ndarray:
    """(N, M) per-sample antenna weights, dataset order."""
    if not model.has_antenna_attention:
        raise ValueError("model has no antenna attention")
    h = _normalized_csi(model, ds)
    return np.concatenate([extract_antenna_attention(model, h[i:i + batch_size])
                           for i in range(0, len(h), batch_size)])


def save_checkpoint(model: TrainedModel, path) -> None:
    """Checkpoint layout: b"CSIM" | u32 header length | JSON header | little-endian f32 blob."""
    header = {
        "config": model.config.to_dict(),
        "normalizer": None if model.normalizer is None else model.normalizer.scale,
        "position_offset": list(model.position_offset),
        "metadata": model.metadata,
        "parameters": [[name, list(p.shape)] for name, p in model.params.items()],
    }
    head = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in model.params.values())
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + blob)


def load_checkpoint(path) -> TrainedModel:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    (n,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8:8 + n])
    cfg = ModelConfig(**header["config"])
    expected = parameter_shapes(cfg)
    params = OrderedDict()
    off = 8 + n
    for name, shape in header["parameters"]:
        if expected.get(name) != tuple(shape):
            raise ValueError(f"checkpoint parameter {name} {shape} inconsistent with config")
        count = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape)
        params[name] = ad.parameter(arr.astype(cfg.dtype))
        off += 4 * count
    if off != len(buf):
        raise ValueError("checkpoint size mismatch")
    if list(params) != list(expected):
        raise ValueError("checkpoint is missing parameters")
    norm = header["normalizer"]
    return TrainedModel(cfg, params, None if norm is None else Normalizer(norm),
                        tuple(header["position_offset"]), header["metadata"])
