"""Popularity ranker: projection, positional encoding, encoder stack, MLP head.

Activations are token-major, ``(batch, L, d_model)``. Linear weights are
stored ``(in, out)`` and applied as ``x @ W``; the input projection keeps the
``(d_model, N_c)`` orientation of ``V = W_p X + b_p``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numcore as nc
from .datapipe import normalize_batch
from .numcore import Tensor
from .scan import scan_chunked, selective_scan

__all__ = [
    "ModelConfig",
    "MODEL_VERSIONS",
    "version_config",
    "param_shapes",
    "count_parameters",
    "init_parameters",
    "positional_encoding",
    "input_projection",
    "mamba_block",
    "transformer_block",
    "model_forward",
    "model_probs",
    "cross_entropy",
]

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "mamba"
    n_layers: int = 1
    d_model: int = 64
    d_state: int = 16
    d_head: int = 8
    d_fc: int = 128
    n_files: int = 149
    lookback: int = 200
    k: int = 10
    expand: int = 2
    d_conv: int = 4
    pe_variant: str = "standard"
    residual: bool = False
    causal: bool = False
    normalization: str = "sample"
    dt_min: float = 1e-3
    dt_max: float = 1e-1

    def __post_init__(self):
        if self.encoder not in ("mamba", "transformer"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        for name in ("n_layers", "d_model", "d_state", "d_head", "d_fc", "n_files", "lookback",
                     "k", "expand", "d_conv"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.encoder == "transformer" and self.d_model % self.d_head:
            raise ValueError(f"d_model={self.d_model} not divisible by d_head={self.d_head}")
        if self.pe_variant not in ("standard", "transposed"):
            raise ValueError(f"unknown positional encoding variant {self.pe_variant!r}")
        if self.normalization not in ("row", "sample"):
            raise ValueError(f"unknown normalization {self.normalization!r}")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def dt_rank(self) -> int:
        return math.ceil(self.d_model / 16)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, val in d.items():
            if key not in kinds:
                continue
            if kinds[key] == "bool":
                val = val if isinstance(val, bool) else str(val) == "True"
            elif kinds[key] == "int":
                val = int(val)
            elif kinds[key] == "float":
                val = float(val)
            out[key] = val
        return cls(**out)


# (n_layers, d_model, d_state) for mamba, (n_layers, d_model, d_head) for transformer
MODEL_VERSIONS = {
    "mamba": {0: (1, 64, 16), 1: (1, 64, 32), 2: (2, 64, 16)},
    "transformer": {0: (1, 64, 8), 1: (1, 64, 4), 2: (2, 64, 8)},
}


def version_config(encoder: str, version: int, n_files: int = 149, lookback: int = 200, **overrides) -> ModelConfig:
    """Preset size for ``encoder`` / ``version`` (0, 1 or 2)."""
    try:
        n_layers, d_model, third = MODEL_VERSIONS[encoder][version]
    except KeyError:
        raise ValueError(f"no configuration for {encoder!r} version {version!r}") from None
    kw = dict(encoder=encoder, n_layers=n_layers, d_model=d_model, n_files=n_files, lookback=lookback)
    kw["d_state" if encoder == "mamba" else "d_head"] = third
    kw.update(overrides)
    return ModelConfig(**kw)


# ----------------------------------------------------------------- parameters


def _block_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, di, n, r = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.dt_rank
    if cfg.encoder == "mamba":
        return {
            "in_proj.weight": (d, 2 * di),
            "conv.weight": (di, cfg.d_conv),
            "conv.bias": (di,),
            "x_proj.weight": (di, r + 2 * n),
            "dt_proj.weight": (r, di),
            "dt_proj.bias": (di,),
            "A_log": (di, n),
            "D": (di,),
            "out_proj.weight": (di, d),
        }
    return {
        "attn.q.weight": (d, d), "attn.q.bias": (d,),
        "attn.k.weight": (d, d), "attn.k.bias": (d,),
        "attn.v.weight": (d, d), "attn.v.bias": (d,),
        "attn.out.weight": (d, d), "attn.out.bias": (d,),
        "norm1.scale": (d,), "norm1.shift": (d,),
        "ffn.fc1.weight": (d, 4 * d), "ffn.fc1.bias": (4 * d,),
        "ffn.fc2.weight": (4 * d, d), "ffn.fc2.bias": (d,),
        "norm2.scale": (d,), "norm2.shift": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every named tensor of the model with its shape, in canonical order."""
    d, nf = cfg.d_model, cfg.n_files
    shapes = {"input_proj.weight": (d, nf), "input_proj.bias": (d,)}
    for i in range(cfg.n_layers):
        for name, shape in _block_shapes(cfg).items():
            shapes[f"blocks.{i}.{name}"] = shape
    shapes.update({
        "final_norm.scale": (d,),
        "final_norm.shift": (d,),
        "head.fc1.weight": (d, cfg.d_fc),
        "head.fc1.bias": (cfg.d_fc,),
        "head.fc2.weight": (cfg.d_fc, nf),
        "head.fc2.bias": (nf,),
    })
    return shapes


def count_parameters(cfg: ModelConfig) -> tuple[int, dict[str, int]]:
    """Total trainable scalars and a per-component breakdown."""
    breakdown: dict[str, int] = {}
    for name, shape in param_shapes(cfg).items():
        parts = name.split(".")
        component = ".".join(parts[:2]) if parts[0] == "blocks" else parts[0]
        breakdown[component] = breakdown.get(component, 0) + int(np.prod(shape))
    return sum(breakdown.values()), breakdown


def init_parameters(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = nc.seeded_rng(seed)
    params: dict[str, Tensor] = {}
    dt_min, dt_max = cfg.dt_min, cfg.dt_max
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "input_proj.weight":
            value = rng.uniform(-1, 1, shape) / math.sqrt(shape[1])
        elif leaf == "weight" and name.endswith("conv.weight"):
            value = rng.uniform(-1, 1, shape) / math.sqrt(shape[1])
        elif leaf == "weight":
            value = rng.uniform(-1, 1, shape) / math.sqrt(shape[0])
        elif leaf == "A_log":
            value = np.broadcast_to(np.log(np.arange(1, shape[1] + 1, dtype=np.float64)), shape).copy()
        elif leaf == "D" or leaf == "scale":
            value = np.ones(shape)
        elif name.endswith("dt_proj.bias"):
            # softplus(bias) log-uniform in [dt_min, dt_max]
            dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), shape))
            value = dt + np.log(-np.expm1(-dt))
        else:
            value = np.zeros(shape)
        params[name] = nc.parameter(value)
    return params


# -------------------------------------------------------------------- layers


def positional_encoding(d_model: int, L: int, variant: str = "standard") -> np.ndarray:
    """Sinusoidal table of shape ``(d_model, L)``.

    ``standard``: PE[2i, p] = sin(p / 10000^(2i/d)), PE[2i+1, p] = cos(...).
    ``transposed``: swapped indexing, where the frequency follows
    the sequence position and the angle follows the feature index:
    PE[f, 2l] = sin(f / 10000^(2l/d)), PE[f, 2l+1] = cos(f / 10000^(2l/d)).
    """
    if d_model % 2:
        raise ValueError(f"positional encoding needs an even d_model, got {d_model}")
    if variant == "standard":
        pos = np.arange(L, dtype=np.float64)[None, :]
        freq = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
        pe = np.empty((d_model, L))
        pe[0::2] = np.sin(pos / freq[:, None])
        pe[1::2] = np.cos(pos / freq[:, None])
        return pe
    if variant == "transposed":
        feat = np.arange(d_model, dtype=np.float64)[:, None]
        pair = np.arange(L) // 2
        angle = feat / 10000.0 ** (2.0 * pair[None, :] / d_model)
        return np.where(np.arange(L)[None, :] % 2 == 0, np.sin(angle), np.cos(angle))
    raise ValueError(f"unknown positional encoding variant {variant!r}")


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    return y + b if b is not None else y


def input_projection(x_norm, w_p: Tensor, b_p: Tensor) -> Tensor:
    """``W_p X + b_p`` returned token-major: ``(..., N_c, L) -> (..., L, d_model)``."""
    x_norm = x_norm if isinstance(x_norm, Tensor) else nc.tensor(x_norm)
    if x_norm.shape[-2] != w_p.shape[1]:
        raise nc.ShapeError(f"input_projection: incompatible shapes {x_norm.shape}, {w_p.shape}")
    return nc.transpose(x_norm) @ nc.transpose(w_p) + b_p


def mamba_block(q: Tensor, p: dict[str, Tensor], cfg: ModelConfig, prefix: str = "") -> Tensor:
    di, n, r = cfg.d_inner, cfg.d_state, cfg.dt_rank
    xz = q @ p[prefix + "in_proj.weight"]
    x, z = xz[..., :di], xz[..., di:]
    x = nc.silu(nc.causal_depthwise_conv1d(x, p[prefix + "conv.weight"], p[prefix + "conv.bias"]))
    dbc = x @ p[prefix + "x_proj.weight"]
    dt_in, b_sel, c_sel = dbc[..., :r], dbc[..., r:r + n], dbc[..., r + n:]
    delta = nc.softplus(_linear(dt_in, p[prefix + "dt_proj.weight"], p[prefix + "dt_proj.bias"]))
    a = -nc.exp(p[prefix + "A_log"])
    if any(t.requires_grad for t in (x, delta, a, b_sel, c_sel)):
        y = selective_scan(x, delta, a, b_sel, c_sel, p[prefix + "D"])
    else:
        y = nc.tensor(scan_chunked(x.data, delta.data, a.data, b_sel.data, c_sel.data, p[prefix + "D"].data))
    return (y * nc.silu(z)) @ p[prefix + "out_proj.weight"]


def _attention_weights(q: Tensor, k: Tensor, causal: bool) -> Tensor:
    scores = (q @ nc.transpose(k)) * (1.0 / math.sqrt(q.shape[-1]))
    if causal:
        L = q.shape[-2]
        scores = scores + np.triu(np.full((L, L), -1e30), k=1)
    return nc.softmax(scores, axis=-1)


def transformer_block(q: Tensor, p: dict[str, Tensor], cfg: ModelConfig, prefix: str = "",
                      return_attention: bool = False):
    """Post-norm encoder layer: LN(x + MHA(x)) then LN(x + FFN(x))."""
    *lead, L, d = q.shape
    h = cfg.d_head
    dh = d // h

    def heads(t: Tensor) -> Tensor:
        t = nc.reshape(t, (*lead, L, h, dh))
        return nc.transpose(t, tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2))

    qh = heads(_linear(q, p[prefix + "attn.q.weight"], p[prefix + "attn.q.bias"]))
    kh = heads(_linear(q, p[prefix + "attn.k.weight"], p[prefix + "attn.k.bias"]))
    vh = heads(_linear(q, p[prefix + "attn.v.weight"], p[prefix + "attn.v.bias"]))
    att = _attention_weights(qh, kh, cfg.causal)
    ctx = att @ vh
    nl = len(lead)
    ctx = nc.reshape(nc.transpose(ctx, tuple(range(nl)) + (nl + 1, nl, nl + 2)), (*lead, L, d))
    attn_out = _linear(ctx, p[prefix + "attn.out.weight"], p[prefix + "attn.out.bias"])
    x = nc.layer_norm(q + attn_out, p[prefix + "norm1.scale"], p[prefix + "norm1.shift"])
    ff = _linear(nc.relu(_linear(x, p[prefix + "ffn.fc1.weight"], p[prefix + "ffn.fc1.bias"])),
                 p[prefix + "ffn.fc2.weight"], p[prefix + "ffn.fc2.bias"])
    out = nc.layer_norm(x + ff, p[prefix + "norm2.scale"], p[prefix + "norm2.shift"])
    if return_attention:
        return out, att
    return out


def model_forward(X, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Predicted simplex over files for raw count windows.

    ``X`` is ``(N_c, L)`` or ``(batch, N_c, L)``; returns ``(N_c,)`` or
    ``(batch, N_c)`` probabilities.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.shape[1:] != (cfg.n_files, cfg.lookback):
        raise nc.ShapeError(
            f"model_forward: input {X.shape[1:]} does not match config ({cfg.n_files}, {cfg.lookback})")
    xn = normalize_batch(X, mode=cfg.normalization)
    h = input_projection(xn, params["input_proj.weight"], params["input_proj.bias"])
    h = h + positional_encoding(cfg.d_model, cfg.lookback, cfg.pe_variant).T
    block = mamba_block if cfg.encoder == "mamba" else transformer_block
    for i in range(cfg.n_layers):
        out = block(h, params, cfg, prefix=f"blocks.{i}.")
        h = h + out if cfg.residual and cfg.encoder == "mamba" else out
    h = nc.layer_norm(h, params["final_norm.scale"], params["final_norm.shift"])
    last = h[:, -1, :]
    hidden = nc.relu(_linear(last, params["head.fc1.weight"], params["head.fc1.bias"]))
    probs = nc.softmax(_linear(hidden, params["head.fc2.weight"], params["head.fc2.bias"]), axis=-1)
    return probs[0] if single else probs


def model_probs(X, params: dict[str, Tensor], cfg: ModelConfig, batch_size: int = 64) -> np.ndarray:
    """Inference-only forward over many windows, returned as numpy."""
    X = np.asarray(X)
    frozen = {k: nc.tensor(v.data) for k, v in params.items()}
    out = [model_forward(X[i:i + batch_size], frozen, cfg).data for i in range(0, len(X), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.n_files))


def cross_entropy(y, y_hat: Tensor) -> Tensor:
    """``-sum_batch sum_c y[c] log(y_hat[c])`` with y_hat clamped at 1e-12."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if np.isnan(y).any() or np.isnan(y_hat.data).any():
        raise FloatingPointError("cross_entropy: NaN input")
    if y.shape != y_hat.shape:
        raise nc.ShapeError(f"cross_entropy: incompatible shapes {y.shape}, {y_hat.shape}")
    return -nc.sum(nc.mul(y, nc.log(nc.clamp_min(y_hat, LOG_CLAMP))))
