"""The multi-scale graph wavelet temporal convolution network.

Data layout is channels-last throughout: ``(batch, time, node, channel)``.
A forward pass lifts the input channels to ``hidden_channels``, runs
``num_layers`` layers of gated dilated temporal convolution followed by a
multi-scale wavelet spatial block, and feeds the accumulated skip
connections at the last time step through a two-layer head.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ChecksumMismatch, ConfigError, ShapeError, VersionMismatch
from .graph import LAPLACIAN_KINDS, NORMALIZED, Graph, _from_indices
from .spectral import DEFAULT_SPARSIFY_THRESHOLD, WaveletBasis, build_bases

AGGREGATIONS = ("sum", "concat_linear")


@dataclass
class ModelConfig:
    num_layers: int = 8
    dilation_cycle: tuple[int, ...] = (1, 2)
    temporal_kernel_width: int = 2
    hidden_channels: int = 32
    scales: tuple[float, ...] = (0.85, 3.85, 5.85)
    chebyshev_order: int = 3
    exact_wavelets: bool = False
    sparsify_threshold: float = DEFAULT_SPARSIFY_THRESHOLD
    laplacian_kind: str = NORMALIZED
    dropout_p: float = 0.5
    aggregation: str = "sum"
    history: int = 12
    horizon: int = 1
    channels: int = 1

    def __post_init__(self):
        self.dilation_cycle = tuple(int(d) for d in self.dilation_cycle)
        self.scales = tuple(float(s) for s in self.scales)
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if not self.scales:
            raise ConfigError("at least one wavelet scale is required")
        if any(not math.isfinite(s) or s <= 0 for s in self.scales):
            raise ConfigError(f"scales must be positive, got {self.scales}")
        if not self.dilation_cycle or min(self.dilation_cycle) < 1:
            raise ConfigError(f"dilations must be >= 1, got {self.dilation_cycle}")
        for name in ("temporal_kernel_width", "hidden_channels", "history", "horizon", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.chebyshev_order < 0:
            raise ConfigError(f"chebyshev_order must be >= 0, got {self.chebyshev_order}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.laplacian_kind not in LAPLACIAN_KINDS:
            raise ConfigError(f"laplacian_kind must be one of {LAPLACIAN_KINDS}")
        if self.receptive_field < self.history:
            warnings.warn(
                f"receptive field {self.receptive_field} is shorter than history {self.history}; "
                "the earliest inputs cannot reach the prediction",
                stacklevel=3,
            )

    @property
    def dilations(self) -> list[int]:
        cyc = self.dilation_cycle
        return [cyc[i % len(cyc)] for i in range(self.num_layers)]

    @property
    def receptive_field(self) -> int:
        return 1 + (self.temporal_kernel_width - 1) * sum(self.dilations)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilation_cycle"] = list(self.dilation_cycle)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear:
    """Affine map over the trailing axis; weight stored as ``(in, out)``."""

    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int):
        self.weight = _uniform(rng, (n_in, n_out), n_in)
        self.bias = _uniform(rng, (n_out,), n_in)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class GatedTcnBlock:
    """``tanh(W1 * x) . sigmoid(W2 * x)`` with dilated causal convolutions
    along time, weights shared across nodes."""

    def __init__(self, rng: np.random.Generator, channels: int, width: int, dilation: int):
        self.dilation = dilation
        self.filter = _uniform(rng, (channels, channels, width), channels * width)
        self.gate = _uniform(rng, (channels, channels, width), channels * width)

    def forward(self, x: Tensor, keep_last: int | None = None) -> Tensor:
        return ad.gated_temporal_conv(x, self.filter, self.gate, self.dilation, keep_last)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.filter", self.filter
        yield f"{prefix}.gate", self.gate


class MsSpatialBlock:
    """Aggregated per-scale wavelet convolutions ``psi_s diag(gamma_s) psi_s^-1``
    along the node axis, followed by ReLU and dropout."""

    def __init__(
        self,
        rng: np.random.Generator,
        bases: Sequence[WaveletBasis],
        channels: int,
        aggregation: str,
        dropout_p: float,
    ):
        self.bases = list(bases)
        self._psi = [Tensor(b.psi) for b in self.bases]
        self._psi_inv = [Tensor(b.psi_inv) for b in self.bases]
        n = self.bases[0].n
        self.gammas = [
            Tensor(1.0 + rng.uniform(-0.01, 0.01, size=n), requires_grad=True) for _ in self.bases
        ]
        self.aggregation = aggregation
        self.dropout_p = dropout_p
        self.agg = Linear(rng, channels * len(self.bases), channels) if aggregation == "concat_linear" else None

    def scale_matrix(self, j: int) -> Tensor:
        return ad.matmul(self._psi[j], ad.scale_rows(self._psi_inv[j], self.gammas[j]))

    def forward(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if x.shape[-2] != self.bases[0].n:
            raise ShapeError(f"spatial block expects {self.bases[0].n} nodes, got input {x.shape}")
        if self.agg is None:
            w = self.scale_matrix(0)
            for j in range(1, len(self.bases)):
                w = ad.add(w, self.scale_matrix(j))
            h = ad.matmul(w, x)
        else:
            parts = [ad.matmul(self.scale_matrix(j), x) for j in range(len(self.bases))]
            h = self.agg(ad.concat(parts, axis=-1))
        return ad.dropout(ad.relu(h), self.dropout_p, training, rng)

    def named_parameters(self, prefix: str):
        for j, g in enumerate(self.gammas):
            yield f"{prefix}.gamma.{j}", g
        if self.agg is not None:
            yield from self.agg.named_parameters(f"{prefix}.agg")


class Layer:
    def __init__(self, rng, cfg: ModelConfig, bases, dilation: int):
        f = cfg.hidden_channels
        self.tcn = GatedTcnBlock(rng, f, cfg.temporal_kernel_width, dilation)
        self.spatial = MsSpatialBlock(rng, bases, f, cfg.aggregation, cfg.dropout_p)
        self.residual = Linear(rng, f, f)
        self.skip = Linear(rng, f, f)

    def named_parameters(self, prefix: str):
        yield from self.tcn.named_parameters(f"{prefix}.tcn")
        yield from self.spatial.named_parameters(f"{prefix}.spatial")
        yield from self.residual.named_parameters(f"{prefix}.residual")
        yield from self.skip.named_parameters(f"{prefix}.skip")


class Model:
    def __init__(self, cfg: ModelConfig, graph: Graph, bases: Sequence[WaveletBasis], rng: np.random.Generator):
        self.cfg = cfg
        self.graph = graph
        self.bases = list(bases)
        f = cfg.hidden_channels
        self.input = Linear(rng, cfg.channels, f)
        self.layers = [Layer(rng, cfg, self.bases, d) for d in cfg.dilations]
        self.head_hidden = Linear(rng, f, f)
        self.head_out = Linear(rng, f, cfg.horizon * cfg.channels)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.input.named_parameters("input"))
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(f"layers.{i}"))
        out.extend(self.head_hidden.named_parameters("head.0"))
        out.extend(self.head_out.named_parameters("head.1"))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def _slot_plan(self, n_time: int) -> list[int]:
        # time steps each layer must produce so that the last step of the
        # final skip sum is exact; everything earlier is never read
        width = self.cfg.temporal_kernel_width
        keep = [0] * len(self.layers)
        need = 1
        for i in reversed(range(len(self.layers))):
            keep[i] = min(n_time, need)
            need = min(n_time, keep[i] + self.layers[i].tcn.dilation * (width - 1))
        return keep

    def forward(
        self,
        x,
        training: bool = False,
        rng: np.random.Generator | None = None,
        all_slots: bool = False,
    ) -> Tensor:
        """Predict ``(B, horizon, N, C)`` from history ``(B, P, N, C)``.

        With ``all_slots`` every time step is carried through the network and
        the head is applied at each of them, giving ``(B, P, horizon, N, C)``:
        the forecast that would be issued after observing steps ``0..t``.
        """
        cfg = self.cfg
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1:] != (cfg.history, self.graph.n, cfg.channels):
            raise ShapeError(
                f"expected input (B, {cfg.history}, {self.graph.n}, {cfg.channels}), got {x.shape}"
            )
        n_time = x.shape[1]
        keep = [n_time] * len(self.layers) if all_slots else self._slot_plan(n_time)
        h = self.input(x)
        skip = None
        for i, layer in enumerate(self.layers):
            u = layer.tcn.forward(h, keep[i])
            v = layer.spatial.forward(u, training, rng)
            s = layer.skip(v if all_slots else ad.select(v, -1, axis=1))
            skip = s if skip is None else ad.add(skip, s)
            if i < len(self.layers) - 1:
                if h.shape[1] != keep[i]:
                    h = ad.slice_axis(h, h.shape[1] - keep[i], None, axis=1)
                h = ad.add(h, layer.residual(v))
        y = self.head_out(ad.relu(self.head_hidden(ad.relu(skip))))
        t, c = cfg.horizon, cfg.channels
        if all_slots:
            b, p, n, _ = y.shape
            return ad.transpose(ad.reshape(y, (b, p, n, t, c)), (0, 1, 3, 2, 4))
        b, n, _ = y.shape
        return ad.transpose(ad.reshape(y, (b, n, t, c)), (0, 2, 1, 3))

    __call__ = forward

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Evaluation-mode forward over a large array, in batches."""
        outs = [self.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        if not outs:
            return np.zeros((0, self.cfg.horizon, self.graph.n, self.cfg.channels))
        return np.concatenate(outs, axis=0)

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ShapeError(f"parameter {name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


def expected_param_count(cfg: ModelConfig, n_nodes: int) -> int:
    f, w, c, k, s = cfg.hidden_channels, cfg.temporal_kernel_width, cfg.channels, cfg.num_layers, len(cfg.scales)
    per_layer = 2 * f * f * w + s * n_nodes + 2 * (f * f + f)
    if cfg.aggregation == "concat_linear":
        per_layer += s * f * f + f
    return (c * f + f) + k * per_layer + (f * f + f) + (f * cfg.horizon * c + cfg.horizon * c)


def new_model(cfg: ModelConfig, graph: Graph, rng_seed: int = 0) -> Model:
    """Build wavelet bases for ``graph`` and randomly initialize a model.

    Bases are computed once and shared by every layer; repeated scales
    share a basis.
    """
    method = "exact" if cfg.exact_wavelets else "chebyshev"
    bases = build_bases(
        graph, cfg.scales, method=method, order=cfg.chebyshev_order,
        kind=cfg.laplacian_kind, sparsify_threshold=cfg.sparsify_threshold,
    )
    rng = np.random.default_rng(rng_seed)
    return Model(cfg, graph, bases, rng)


# checkpoints

MAGIC = b"MSGWTCN1"
FORMAT_VERSION = 1


def save_checkpoint(model: Model, path: str | Path, extra: dict | None = None) -> None:
    """Write parameters, config and graph to a self-checking binary file.

    Layout: magic, little-endian u64 header length, UTF-8 JSON header,
    little-endian float64 payload, CRC-32 (u32) of all preceding bytes.
    """
    manifest, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        buf = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "node_ids": list(model.graph.node_ids),
        "edges": [list(e) for e in model.graph.directed_edges],
        "params": manifest,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint_header(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise VersionMismatch(f"{path}: not a checkpoint of format {MAGIC!r} (found {raw[:8]!r})")
    if len(raw) < 8 + 8 + 4:
        raise ChecksumMismatch(f"{path}: file truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch(f"{path}: CRC-32 mismatch; file is corrupt or truncated")
    (hlen,) = struct.unpack("<Q", body[8:16])
    header = json.loads(body[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {header.get('format_version')} unsupported")
    return header, body[16 + hlen:]


def load_checkpoint(path: str | Path, graph: Graph | None = None) -> tuple[Model, dict]:
    """Restore a model saved by :func:`save_checkpoint`.

    If ``graph`` is given it must match the stored node ids; otherwise the
    graph is rebuilt from the stored edges. Returns ``(model, extra)``.
    """
    header, payload = read_checkpoint_header(path)
    node_ids = tuple(header["node_ids"])
    if graph is None:
        graph = _from_indices(node_ids, [tuple(e) for e in header["edges"]])
    elif graph.n != len(node_ids) or tuple(graph.node_ids) != node_ids:
        raise ShapeError(
            f"checkpoint was trained on {len(node_ids)} nodes; given graph has {graph.n} "
            "(or different node ids)"
        )
    cfg = ModelConfig.from_dict(header["config"])
    model = new_model(cfg, graph, 0)
    state = {}
    for entry in header["params"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        state[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    names = {n for n, _ in model.named_parameters()}
    if names != set(state):
        raise ShapeError(f"checkpoint parameters do not match the configured model: {sorted(names ^ set(state))}")
    model.load_state(state)
    return model, header.get("extra", {})
