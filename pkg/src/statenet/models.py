"""Model zoo: the spatial-temporal detector plus GRU and TCN baselines.

The main architecture runs a channel-shared stack of causal dilated
convolutions over each channel independently, mean-pools time into one
vector per channel, fuses channels with dot-product attention layers over
the fully connected channel graph, mean-pools channels, and classifies
with a three-layer MLP. Because every stage is channel-shared or
channel-symmetric, one parameter set accepts any channel count and is
invariant to channel order.

The baselines intentionally are not: they treat channels as a fixed
feature dimension and raise ShapeMismatchError on a different montage.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .checkpoint import load_params, save_params
from .errors import ShapeMismatchError


@dataclass(frozen=True)
class StateNetConfig:
    tcn_layers: int = 5
    kernel_size: int = 3
    hidden_dim: int = 32
    gat_layers: int = 2
    mlp_hidden: int = 16
    # fixed input gain: set to ~1/RMS of the signal units so first-layer
    # activations and attention scores start O(1) instead of saturating
    input_scale: float = 1.0

    def __post_init__(self):
        for name in ("tcn_layers", "kernel_size", "hidden_dim", "gat_layers",
                     "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.input_scale <= 0:
            raise ValueError("input_scale must be positive")

    @property
    def receptive_field(self) -> int:
        """Samples seen by one output position of the temporal stack."""
        span = sum(2 ** (l - 1) for l in range(1, self.tcn_layers + 1))
        return 1 + (self.kernel_size - 1) * span


@dataclass(frozen=True)
class GruClassifierConfig:
    hidden_dim: int = 16
    input_scale: float = 1.0

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.input_scale <= 0:
            raise ValueError("input_scale must be positive")


@dataclass(frozen=True)
class TcnClassifierConfig:
    tcn_layers: int = 5
    kernel_size: int = 3
    hidden_dim: int = 32
    residual: bool = False
    input_scale: float = 1.0

    def __post_init__(self):
        for name in ("tcn_layers", "kernel_size", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.input_scale <= 0:
            raise ValueError("input_scale must be positive")


def _as_batch(x) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected (channels, length) or (batch, channels, length), "
                         f"got shape {arr.shape}")
    if arr.shape[1] < 1:
        raise ValueError("input needs at least one channel")
    return arr


def params_dtype(params: ParamSet) -> np.dtype:
    for _, t in params.items():
        return t.dtype
    raise ValueError("empty parameter set")


# -- shared-filter temporal encoder + attention fusion ----------------------------


def init_statenet_params(cfg: StateNetConfig, rng: np.random.Generator,
                         dtype=np.float64) -> ParamSet:
    params = ParamSet()
    d, k = cfg.hidden_dim, cfg.kernel_size
    f_in = 1
    for layer in range(1, cfg.tcn_layers + 1):
        params.add(f"tcn.{layer}.w",
                   ad.glorot_uniform(rng, (d, f_in, k), f_in * k, d * k, dtype))
        params.add(f"tcn.{layer}.b", np.zeros(d, dtype=dtype))
        f_in = d
    for layer in range(1, cfg.gat_layers + 1):
        params.add(f"gat.{layer}.W", ad.glorot_uniform(rng, (d, d), d, d, dtype))
    dims = [d, cfg.mlp_hidden, cfg.mlp_hidden, 1]
    for i in range(3):
        params.add(f"mlp.{i + 1}.W",
                   ad.glorot_uniform(rng, (dims[i + 1], dims[i]), dims[i],
                                     dims[i + 1], dtype))
        # hidden biases start slightly positive: the pooled features live in a
        # narrow cone, and an all-dead ReLU layer at init cannot recover
        bias0 = 0.01 if i < 2 else 0.0
        params.add(f"mlp.{i + 1}.b", np.full(dims[i + 1], bias0, dtype=dtype))
    return params


def temporal_encode(x, params: ParamSet, cfg: StateNetConfig) -> Tensor:
    """Shared per-channel temporal features: (batch, channels, hidden_dim)."""
    arr = _as_batch(x)
    n, c, length = arr.shape
    dt = params_dtype(params)
    flat = np.ascontiguousarray(arr.reshape(n * c, length)[None], dtype=dt)
    if cfg.input_scale != 1.0:
        flat = flat * np.asarray(cfg.input_scale, dtype=dt)
    h = Tensor(flat)
    for layer in range(1, cfg.tcn_layers + 1):
        h = ad.relu(ad.conv1d(h, params[f"tcn.{layer}.w"], params[f"tcn.{layer}.b"],
                              dilation=2 ** (layer - 1)))
    pooled = h.mean(axis=2)                    # (hidden, batch*channels)
    return ad.reshape(ad.transpose_last2(pooled), (n, c, cfg.hidden_dim))


def gat_layer(m: Tensor, w: Tensor) -> Tensor:
    """One attention round over the fully connected channel graph.

    Scores are dot products of the projected rows; each output row is the
    softmax-weighted sum of projected rows.
    """
    if m.data.shape[-1] != w.data.shape[-1]:
        raise ValueError(f"feature dim mismatch: {m.data.shape} vs {w.data.shape}")
    wm = ad.matmul(m, ad.transpose_last2(w))
    scores = ad.matmul(wm, ad.transpose_last2(wm))
    alpha = ad.softmax(scores)
    return ad.matmul(alpha, wm)


def gat_attention(m, w) -> np.ndarray:
    """Attention matrix of one layer, for inspection (rows sum to 1)."""
    with ad.no_grad():
        m_t = m if isinstance(m, Tensor) else Tensor(np.asarray(m))
        wm = ad.matmul(m_t, ad.transpose_last2(w if isinstance(w, Tensor) else Tensor(w)))
        return ad.softmax(ad.matmul(wm, ad.transpose_last2(wm))).data


def spatial_fuse(h, params: ParamSet, cfg: StateNetConfig) -> Tensor:
    """Attention fusion + channel mean + 3-layer MLP head -> probability."""
    if not isinstance(h, Tensor):
        h = Tensor(np.asarray(h, dtype=params_dtype(params)))
    if h.data.ndim == 2:
        h = ad.reshape(h, (1,) + h.data.shape)
    if h.data.shape[1] < 1:
        raise ValueError("input needs at least one channel")
    n = h.data.shape[0]
    for layer in range(1, cfg.gat_layers + 1):
        h = gat_layer(h, params[f"gat.{layer}.W"])
    z = h.mean(axis=1)
    z = ad.relu(ad.dense(z, params["mlp.1.W"], params["mlp.1.b"]))
    z = ad.relu(ad.dense(z, params["mlp.2.W"], params["mlp.2.b"]))
    p = ad.sigmoid(ad.dense(z, params["mlp.3.W"], params["mlp.3.b"]))
    return ad.reshape(p, (n,))


def statenet_forward(x, params: ParamSet, cfg: StateNetConfig) -> Tensor:
    """Full forward pass; accepts any channel count with the same parameters."""
    return spatial_fuse(temporal_encode(x, params, cfg), params, cfg)


# -- GRU baseline ------------------------------------------------------------------


_GRU_GATES = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")


def init_gru_gates(params: ParamSet, prefix: str, input_dim: int, hidden: int,
                   rng: np.random.Generator, dtype=np.float64) -> None:
    for gate in ("z", "r", "h"):
        params.add(f"{prefix}.W{gate}",
                   ad.glorot_uniform(rng, (hidden, input_dim), input_dim, hidden, dtype))
        params.add(f"{prefix}.U{gate}",
                   ad.glorot_uniform(rng, (hidden, hidden), hidden, hidden, dtype))
        params.add(f"{prefix}.b{gate}", np.zeros(hidden, dtype=dtype))


def init_gru_classifier_params(cfg: GruClassifierConfig, n_channels: int,
                               rng: np.random.Generator, dtype=np.float64) -> ParamSet:
    params = ParamSet()
    init_gru_gates(params, "gru", n_channels, cfg.hidden_dim, rng, dtype)
    params.add("readout.W",
               ad.glorot_uniform(rng, (1, cfg.hidden_dim), cfg.hidden_dim, 1, dtype))
    params.add("readout.b", np.zeros(1, dtype=dtype))
    return params


def _run_gru(steps: np.ndarray, params: ParamSet, prefix: str) -> Tensor:
    tensors = [params[f"{prefix}.{g}"] for g in _GRU_GATES]
    return ad.gru(steps, *tensors)


def gru_classifier_forward(x, params: ParamSet, cfg: GruClassifierConfig) -> Tensor:
    arr = _as_batch(x)
    n, c, _ = arr.shape
    trained_c = params["gru.Wz"].data.shape[1]
    if c != trained_c:
        raise ShapeMismatchError(
            f"gru classifier was trained with {trained_c} channels, got {c}")
    dt = params_dtype(params)
    steps = np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=dt)
    if cfg.input_scale != 1.0:
        steps = steps * np.asarray(cfg.input_scale, dtype=dt)
    h = _run_gru(steps, params, "gru")
    p = ad.sigmoid(ad.dense(h, params["readout.W"], params["readout.b"]))
    return ad.reshape(p, (n,))


# -- TCN baseline ------------------------------------------------------------------


def init_tcn_classifier_params(cfg: TcnClassifierConfig, n_channels: int,
                               rng: np.random.Generator, dtype=np.float64) -> ParamSet:
    params = ParamSet()
    d, k = cfg.hidden_dim, cfg.kernel_size
    f_in = n_channels
    for layer in range(1, cfg.tcn_layers + 1):
        params.add(f"tcn.{layer}.w",
                   ad.glorot_uniform(rng, (d, f_in, k), f_in * k, d * k, dtype))
        params.add(f"tcn.{layer}.b", np.zeros(d, dtype=dtype))
        f_in = d
    params.add("readout.W", ad.glorot_uniform(rng, (1, d), d, 1, dtype))
    params.add("readout.b", np.zeros(1, dtype=dtype))
    return params


def tcn_classifier_forward(x, params: ParamSet, cfg: TcnClassifierConfig) -> Tensor:
    arr = _as_batch(x)
    n, c, _ = arr.shape
    trained_c = params["tcn.1.w"].data.shape[1]
    if c != trained_c:
        raise ShapeMismatchError(
            f"tcn classifier was trained with {trained_c} channels, got {c}")
    dt = params_dtype(params)
    planes = np.ascontiguousarray(arr.transpose(1, 0, 2), dtype=dt)
    if cfg.input_scale != 1.0:
        planes = planes * np.asarray(cfg.input_scale, dtype=dt)
    h = Tensor(planes)
    for layer in range(1, cfg.tcn_layers + 1):
        pre = ad.conv1d(h, params[f"tcn.{layer}.w"], params[f"tcn.{layer}.b"],
                        dilation=2 ** (layer - 1))
        if cfg.residual and pre.data.shape == h.data.shape:
            pre = ad.add(pre, h)
        h = ad.relu(pre)
    z = ad.transpose_last2(h.mean(axis=2))     # (batch, hidden)
    p = ad.sigmoid(ad.dense(z, params["readout.W"], params["readout.b"]))
    return ad.reshape(p, (n,))


# -- registry / model handle -------------------------------------------------------


@dataclass(frozen=True)
class ArchSpec:
    name: str
    montage_agnostic: bool
    config_cls: type
    init_fn: object
    forward_fn: object
    needs_channels: bool


ARCHITECTURES: dict[str, ArchSpec] = {
    "statenet": ArchSpec("statenet", True, StateNetConfig,
                         init_statenet_params, statenet_forward, False),
    "gru": ArchSpec("gru", False, GruClassifierConfig,
                    init_gru_classifier_params, gru_classifier_forward, True),
    "tcn": ArchSpec("tcn", False, TcnClassifierConfig,
                    init_tcn_classifier_params, tcn_classifier_forward, True),
}


def arch_spec(name: str) -> ArchSpec:
    if name not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}; "
                         f"choose from {sorted(ARCHITECTURES)}")
    return ARCHITECTURES[name]


def config_from_dict(arch: str, d: dict):
    return arch_spec(arch).config_cls(**d)


@dataclass
class Model:
    """A ready-to-run classifier: architecture tag, parameters, config."""

    arch: str
    params: ParamSet
    config: object
    channels: tuple[str, ...] | None = None
    montage_name: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def montage_agnostic(self) -> bool:
        return arch_spec(self.arch).montage_agnostic

    def forward(self, x) -> Tensor:
        return arch_spec(self.arch).forward_fn(x, self.params, self.config)

    def predict(self, x, batch_size: int = 64) -> np.ndarray:
        """Probabilities for an (N, C, L) array, (C, L) array, or windows."""
        arr = _stack_inputs(x)
        out = np.empty(arr.shape[0], dtype=np.float64)
        with ad.no_grad():
            for lo in range(0, arr.shape[0], batch_size):
                chunk = arr[lo:lo + batch_size]
                out[lo:lo + chunk.shape[0]] = self.forward(chunk).data
        return out


def _stack_inputs(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return _as_batch(x)
    if isinstance(x, Iterable):
        items = list(x)
        if items and hasattr(items[0], "x"):
            return np.stack([w.x for w in items])
        return _as_batch(np.asarray(items))
    raise TypeError(f"cannot build a batch from {type(x)!r}")


def new_model(arch: str, config=None, n_channels: int | None = None,
              rng: np.random.Generator | None = None, dtype=np.float64,
              channels: tuple[str, ...] | None = None,
              montage_name: str | None = None) -> Model:
    spec = arch_spec(arch)
    cfg = config if config is not None else spec.config_cls()
    if rng is None:
        rng = np.random.default_rng(0)
    if spec.needs_channels:
        if n_channels is None:
            raise ValueError(f"{arch} needs the training channel count")
        params = spec.init_fn(cfg, n_channels, rng, dtype)
    else:
        params = spec.init_fn(cfg, rng, dtype)
    return Model(arch, params, cfg, channels=channels, montage_name=montage_name)


def save_model(path, model: Model, extra_meta: dict | None = None) -> None:
    meta = {
        "architecture": model.arch,
        "config": asdict(model.config),
        "channels": list(model.channels) if model.channels else None,
        "montage_name": model.montage_name,
        "dtype": str(params_dtype(model.params)),
    }
    meta.update(extra_meta or {})
    save_params(path, model.params, meta)


def load_model(path) -> Model:
    params, meta = load_params(path)
    arch = meta["architecture"]
    cfg = config_from_dict(arch, meta["config"])
    channels = tuple(meta["channels"]) if meta.get("channels") else None
    return Model(arch, params, cfg, channels=channels,
                 montage_name=meta.get("montage_name"), meta=meta)
