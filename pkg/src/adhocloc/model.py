"""The localization network.

Per node, a one-hot area code and per-frame STFT features are embedded by two
shared MLP encoders and concatenated. Two spatial layers attend across nodes
within each frame, a fusion layer pools the nodes with a learned query, a
temporal layer attends across frames, and an MLP head gives per-frame class
probabilities over the M areas.

Public layer functions take and return the ``T x D x N`` layout; internally
everything runs on ``(..., T, N, D)`` with tokens on the second-to-last axis.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, ShapeError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    m_total: int
    n_features: int = 512
    d_embed: int = 256
    n_heads: int = 4
    n_spatial_layers: int = 2
    pos_hidden: int = 512
    node_hidden: tuple[int, ...] = (1024, 512)
    ffn_width: int = 512
    head_widths: tuple[int, ...] = (1024, 1024)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "node_hidden", tuple(int(w) for w in self.node_hidden))
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        if self.m_total < 1:
            raise ValueError(f"m_total must be positive, got {self.m_total}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def d_model(self) -> int:
        return 2 * self.d_embed

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def save(self, path):
        cp = configparser.ConfigParser()
        cp["model"] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            cp["model"][f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        with open(path, "w") as fh:
            cp.write(fh)

    @classmethod
    def from_mapping(cls, m) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in m:
                continue
            raw = m[f.name]
            if f.name in ("node_hidden", "head_widths"):
                kw[f.name] = tuple(int(x) for x in str(raw).split(",") if x.strip())
            elif f.name == "activation":
                kw[f.name] = str(raw).strip()
            else:
                kw[f.name] = int(raw)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(f"model config {path} not found")
        return cls.from_mapping(cp["model"])


def config_path_for(checkpoint) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.name + ".cfg")


@dataclass
class NodeInput:
    one_hot: np.ndarray  # (M,)
    features: np.ndarray  # (2F, T)


@dataclass
class Prediction:
    frame_probs: np.ndarray  # (T, M)
    pooled: np.ndarray  # (M,)
    decided: int  # 1-based area index

    def top(self, k: int = 5) -> list[tuple[int, float]]:
        order = np.argsort(-self.pooled, kind="stable")[:k]
        return [(int(i) + 1, float(self.pooled[i])) for i in order]


# -- parameters ---------------------------------------------------------------

def _glorot(rng, fan_in, fan_out, dtype):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def _mlp_params(store, rng, prefix, widths):
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        store.add(f"{prefix}.{i}.w", _glorot(rng, a, b, store.dtype))
        store.add(f"{prefix}.{i}.b", np.zeros(b, dtype=store.dtype))


def _block_params(store, rng, prefix, cfg, fusion=False):
    d = cfg.d_model
    if fusion:
        store.add(f"{prefix}.query", _glorot(rng, d, 1, store.dtype)[:, 0])
    else:
        store.add(f"{prefix}.attn.wq", _glorot(rng, d, d, store.dtype))
    for name in ("wk", "wv", "wo"):
        store.add(f"{prefix}.attn.{name}", _glorot(rng, d, d, store.dtype))
    store.add(f"{prefix}.ln1.g", np.ones(d, dtype=store.dtype))
    store.add(f"{prefix}.ln1.b", np.zeros(d, dtype=store.dtype))
    _mlp_params(store, rng, f"{prefix}.ffn", (d, cfg.ffn_width, d))
    store.add(f"{prefix}.ln2.g", np.ones(d, dtype=store.dtype))
    store.add(f"{prefix}.ln2.b", np.zeros(d, dtype=store.dtype))


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    _mlp_params(store, rng, "pos", (cfg.m_total, cfg.pos_hidden, cfg.d_embed))
    _mlp_params(store, rng, "node", (cfg.n_features, *cfg.node_hidden, cfg.d_embed))
    for i in range(cfg.n_spatial_layers):
        _block_params(store, rng, f"spatial.{i}", cfg)
    _block_params(store, rng, "fusion", cfg, fusion=True)
    _block_params(store, rng, "temporal", cfg)
    _mlp_params(store, rng, "head", (cfg.d_model, *cfg.head_widths, cfg.m_total))
    return store


# -- building blocks ----------------------------------------------------------

def _act(cfg):
    return ad.relu if cfg.activation == "relu" else ad.identity


def _mlp(x, params, prefix, n_layers, act, last_act):
    for i in range(n_layers):
        x = ad.linear(x, params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"])
        if i < n_layers - 1 or last_act:
            x = act(x)
    return x


def _split_heads(x, h):
    # (..., S, D) -> (..., H, S, D/H)
    *lead, s, d = x.shape
    x = ad.reshape(x, (*lead, s, h, d // h))
    n = x.ndim
    return ad.transpose(x, (*range(n - 3), n - 2, n - 3, n - 1))


def _merge_heads(x):
    # (..., H, S, D/H) -> (..., S, D)
    n = x.ndim
    x = ad.transpose(x, (*range(n - 3), n - 2, n - 3, n - 1))
    *lead, s, h, dh = x.shape
    return ad.reshape(x, (*lead, s, h * dh))


def _swap_last(x):
    n = x.ndim
    return ad.transpose(x, (*range(n - 2), n - 1, n - 2))


def _attention(x, params, prefix, cfg):
    """Multi-head self-attention over the token axis (second to last)."""
    h = cfg.n_heads
    q = _split_heads(ad.linear(x, params[f"{prefix}.attn.wq"]), h)
    k = _split_heads(ad.linear(x, params[f"{prefix}.attn.wk"]), h)
    v = _split_heads(ad.linear(x, params[f"{prefix}.attn.wv"]), h)
    scores = ad.scale(ad.matmul(q, _swap_last(k)), 1.0 / math.sqrt(cfg.d_head))
    o = ad.matmul(ad.softmax(scores, axis=-1), v)
    return ad.linear(_merge_heads(o), params[f"{prefix}.attn.wo"])


def _fusion_attention(x, params, prefix, cfg):
    """Attention with one learned query per head; pools the token axis away."""
    h, dh = cfg.n_heads, cfg.d_head
    q = ad.reshape(params[f"{prefix}.query"], (h, 1, dh))
    k = _split_heads(ad.linear(x, params[f"{prefix}.attn.wk"]), h)
    v = _split_heads(ad.linear(x, params[f"{prefix}.attn.wv"]), h)
    scores = ad.scale(ad.matmul(q, _swap_last(k)), 1.0 / math.sqrt(dh))  # (..., H, 1, S)
    o = _merge_heads(ad.matmul(ad.softmax(scores, axis=-1), v))  # (..., 1, D)
    o = ad.reshape(o, o.shape[:-2] + (cfg.d_model,))
    return ad.linear(o, params[f"{prefix}.attn.wo"])


def _feed_forward_block(x, params, prefix, cfg):
    y = _mlp(x, params, f"{prefix}.ffn", 2, _act(cfg), last_act=False)
    return ad.layer_norm(ad.add(x, y), params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])


def _self_attention_block(x, params, prefix, cfg):
    x = ad.layer_norm(ad.add(x, _attention(x, params, prefix, cfg)),
                      params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    return _feed_forward_block(x, params, prefix, cfg)


def _fusion_block(x, params, prefix, cfg):
    # residual against the node mean, since the attention output has no node axis
    r = ad.add(ad.mean(x, axis=-2), _fusion_attention(x, params, prefix, cfg))
    r = ad.layer_norm(r, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    return _feed_forward_block(r, params, prefix, cfg)


def _position(onehots, params, cfg):
    return _mlp(onehots, params, "pos", 2, _act(cfg), last_act=True)


def _node(feats, params, cfg):
    return _mlp(feats, params, "node", len(cfg.node_hidden) + 1, _act(cfg), last_act=True)


def _assemble(onehots, feats, params, cfg):
    """``onehots`` (..., N, M) and ``feats`` (..., N, 2F, T) -> (..., T, N, D)."""
    u = _position(ad._as_tensor(onehots), params, cfg)  # (..., N, E)
    f = ad._as_tensor(feats)
    n = f.ndim
    s = _node(ad.transpose(f, (*range(n - 3), n - 1, n - 3, n - 2)), params, cfg)  # (..., T, N, E)
    u = ad.expand(ad.reshape(u, u.shape[:-2] + (1,) + u.shape[-2:]), s.shape)
    return ad.concat([u, s], axis=-1)


def _check_inputs(onehots, feats, cfg):
    if onehots.shape[-1] != cfg.m_total:
        raise ShapeError(f"one-hot width {onehots.shape[-1]} does not match M={cfg.m_total}")
    if feats.shape[-2] != cfg.n_features:
        raise ShapeError(f"feature width {feats.shape[-2]} does not match the node encoder "
                         f"input {cfg.n_features}")
    if onehots.shape[:-1] != feats.shape[:-2]:
        raise ShapeError(f"node axes differ: one-hot {onehots.shape}, features {feats.shape}")
    if onehots.shape[-2] < 1:
        raise ShapeError("at least one node is required")


def forward_probs(onehots, feats, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Per-frame class probabilities ``(..., T, M)`` as a graph node."""
    onehots = np.asarray(onehots, dtype=params.dtype)
    feats = np.asarray(feats, dtype=params.dtype)
    _check_inputs(onehots, feats, cfg)
    x = _assemble(onehots, feats, params, cfg)
    for i in range(cfg.n_spatial_layers):
        x = _self_attention_block(x, params, f"spatial.{i}", cfg)
    x = _fusion_block(x, params, "fusion", cfg)  # (..., T, D)
    x = _self_attention_block(x, params, "temporal", cfg)
    logits = _mlp(x, params, "head", len(cfg.head_widths) + 1, _act(cfg), last_act=False)
    return ad.softmax(logits, axis=-1)


# -- public per-sample API (T x D x N layout) --------------------------------

def _stack_nodes(nodes: list[NodeInput]):
    if not nodes:
        raise ShapeError("at least one node is required")
    frames = {np.shape(n.features)[-1] for n in nodes}
    if len(frames) != 1:
        raise ShapeError(f"nodes disagree on the frame count: {sorted(frames)}")
    return (np.stack([np.asarray(n.one_hot) for n in nodes]),
            np.stack([np.asarray(n.features) for n in nodes]))


def position_encode(u, params: ParamStore, cfg: ModelConfig) -> Tensor:
    u = np.asarray(u, dtype=params.dtype)
    if u.shape[-1] != cfg.m_total:
        raise ShapeError(f"one-hot width {u.shape[-1]} does not match M={cfg.m_total}")
    return _position(u, params, cfg)


def node_encode(s, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Acoustic embedding of feature vectors with the feature axis last: (..., 2F) -> (..., E)."""
    s = np.asarray(s, dtype=params.dtype)
    if s.shape[-1] != cfg.n_features:
        raise ShapeError(f"feature width {s.shape[-1]} does not match {cfg.n_features}")
    return _node(s, params, cfg)


def _to_tnd(e):
    return ad.transpose(ad._as_tensor(e), (0, 2, 1))


def assemble(nodes: list[NodeInput], params: ParamStore, cfg: ModelConfig) -> Tensor:
    onehots, feats = _stack_nodes(nodes)
    onehots = onehots.astype(params.dtype)
    feats = feats.astype(params.dtype)
    _check_inputs(onehots, feats, cfg)
    return _to_tnd(_assemble(onehots, feats, params, cfg))


def _check_width(e, cfg):
    if e.shape[1] != cfg.d_model:
        raise ShapeError(f"feature axis {e.shape[1]} does not match D={cfg.d_model}")


def spatial_layer(e, params: ParamStore, cfg: ModelConfig, index: int = 0) -> Tensor:
    """``T x D x N`` -> ``T x D x N``: attention across nodes within each frame."""
    e = ad._as_tensor(e)
    _check_width(e, cfg)
    return _to_tnd(_self_attention_block(_to_tnd(e), params, f"spatial.{index}", cfg))


def fusion_layer(e, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """``T x D x N`` -> ``T x D``."""
    e = ad._as_tensor(e)
    _check_width(e, cfg)
    return _fusion_block(_to_tnd(e), params, "fusion", cfg)


def temporal_layer(e, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """``T x D`` -> ``T x D``: attention across frames."""
    e = ad._as_tensor(e)
    if e.shape[-1] != cfg.d_model:
        raise ShapeError(f"feature axis {e.shape[-1]} does not match D={cfg.d_model}")
    return _self_attention_block(e, params, "temporal", cfg)


def predict_from_probs(frame_probs: np.ndarray) -> Prediction:
    pooled = frame_probs.mean(axis=-2)
    return Prediction(frame_probs, pooled, int(np.argmax(pooled)) + 1)


def forward(nodes: list[NodeInput], params: ParamStore, cfg: ModelConfig) -> Prediction:
    onehots, feats = _stack_nodes(nodes)
    return predict_from_probs(forward_probs(onehots, feats, params, cfg).data)


def parameter_count(cfg: ModelConfig) -> int:
    """Number of scalar parameters, from the layer widths alone."""
    d = cfg.d_model

    def mlp(widths):
        return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))

    block = 3 * d * d + 4 * d + mlp((d, cfg.ffn_width, d))
    return (mlp((cfg.m_total, cfg.pos_hidden, cfg.d_embed))
            + mlp((cfg.n_features, *cfg.node_hidden, cfg.d_embed))
            + cfg.n_spatial_layers * (block + d * d)
            + block + d
            + block + d * d
            + mlp((d, *cfg.head_widths, cfg.m_total)))


def to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
