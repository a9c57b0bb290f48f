"""Speed series ingestion, normalization, windowing and synthetic data."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    ConstantNode,
    FractionError,
    MalformedCsv,
    NonUniformSpacing,
    TooShort,
    UnknownNode,
)
from .graph import NORMALIZED, Graph, build_graph, laplacian

log = logging.getLogger(__name__)

MAX_INTERPOLATED_GAP = 3
STEP_MINUTES = 5
CLIP_RANGE = (-0.5, 1.5)


@dataclass
class SpeedSeries:
    """Speeds (miles/hour) on a uniform time grid.

    ``values`` has shape ``(time, N)``. Rows that could not be repaired are
    NaN; :meth:`segments` yields the contiguous complete stretches.
    """

    timestamps: list[str]
    node_ids: tuple[str, ...]
    values: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return 1

    def segments(self) -> list[tuple[int, int]]:
        """Half-open ``(start, stop)`` row ranges without missing values."""
        ok = np.isfinite(self.values).all(axis=1)
        out, start = [], None
        for i, good in enumerate(ok):
            if good and start is None:
                start = i
            elif not good and start is not None:
                out.append((start, i))
                start = None
        if start is not None:
            out.append((start, len(ok)))
        return out

    def select_nodes(self, node_ids: Sequence[str]) -> "SpeedSeries":
        index = {nid: i for i, nid in enumerate(self.node_ids)}
        try:
            cols = [index[n] for n in node_ids]
        except KeyError as e:
            raise UnknownNode(f"node {e.args[0]!r} not in speed series") from None
        return SpeedSeries(list(self.timestamps), tuple(node_ids), self.values[:, cols].copy())


# CSV ingestion


def _parse_time(text: str, path, lineno: int) -> datetime:
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError:
        raise MalformedCsv(f"{path}:{lineno}: bad ISO-8601 timestamp {text!r}") from None


def _interpolate_short_gaps(values: np.ndarray, max_gap: int) -> np.ndarray:
    out = values.copy()
    n_t = out.shape[0]
    for j in range(out.shape[1]):
        col = out[:, j]
        missing = np.isnan(col)
        if not missing.any():
            continue
        i = 0
        while i < n_t:
            if not missing[i]:
                i += 1
                continue
            k = i
            while k < n_t and missing[k]:
                k += 1
            # run is [i, k); needs valid neighbours on both sides
            if i > 0 and k < n_t and k - i <= max_gap:
                lo, hi = col[i - 1], col[k]
                frac = np.arange(1, k - i + 1) / (k - i + 1)
                col[i:k] = lo + (hi - lo) * frac
            i = k
    return out


def load_speed_csv(path: str | Path, graph: Graph | None = None, tolerance_s: float = 1.0) -> SpeedSeries:
    """Load ``timestamp,<node_id_1>,...`` rows.

    Rows are sorted by time and placed on a uniform grid (step = smallest
    positive spacing); absent rows and empty cells become gaps. Gaps of at
    most three steps between valid readings are linearly interpolated;
    longer ones are left missing and split the series into segments.
    When ``graph`` is given, columns are reordered to the graph's nodes.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "timestamp" or len(header) < 2:
            raise MalformedCsv(f"{path}: header must be 'timestamp,<node ids...>', got {header!r}")
        node_ids = [h.strip() for h in header[1:]]
        if len(set(node_ids)) != len(node_ids):
            raise MalformedCsv(f"{path}: duplicate node columns")
        times, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise MalformedCsv(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            times.append(_parse_time(row[0], path, lineno))
            vals = []
            for cell in row[1:]:
                cell = cell.strip()
                if not cell:
                    vals.append(np.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise MalformedCsv(f"{path}:{lineno}: non-numeric cell {cell!r}") from None
                if not math.isfinite(v) or v < 0:
                    raise MalformedCsv(f"{path}:{lineno}: speed must be finite and >= 0, got {cell!r}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise MalformedCsv(f"{path}: no data rows")

    order = sorted(range(len(times)), key=times.__getitem__)
    times = [times[i] for i in order]
    raw = np.array([rows[i] for i in order], dtype=float)
    secs = np.array([(t - times[0]).total_seconds() for t in times])
    if len(secs) > 1:
        diffs = np.diff(secs)
        if (diffs <= tolerance_s).any():
            raise NonUniformSpacing(f"{path}: duplicate timestamps")
        step = float(diffs.min())
    else:
        step = STEP_MINUTES * 60.0
    pos = secs / step
    slots = np.rint(pos).astype(int)
    if (np.abs(pos - slots) * step > tolerance_s).any():
        raise NonUniformSpacing(f"{path}: timestamps are not on a {step:.0f}s grid")
    grid = np.full((slots[-1] + 1, raw.shape[1]), np.nan)
    grid[slots] = raw
    values = _interpolate_short_gaps(grid, MAX_INTERPOLATED_GAP)
    stamps = [(times[0] + timedelta(seconds=step * i)).isoformat() for i in range(grid.shape[0])]
    series = SpeedSeries(stamps, tuple(node_ids), values)
    if graph is not None:
        extra = sorted(set(node_ids) - set(graph.node_ids))
        missing = sorted(set(graph.node_ids) - set(node_ids))
        if extra or missing:
            raise UnknownNode(
                f"{path}: speed columns do not match the graph (unknown: {extra[:5]}, absent: {missing[:5]})"
            )
        series = series.select_nodes(graph.node_ids)
    return series


def write_speed_csv(series: SpeedSeries, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *series.node_ids])
        for ts, row in zip(series.timestamps, series.values):
            w.writerow([ts, *("" if math.isnan(v) else f"{v:.17g}" for v in row)])


# normalization


@dataclass
class Normalizer:
    """Min-max scaling fitted on training rows, per node or global."""

    minimum: np.ndarray
    maximum: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray, node_ids: Sequence[str] | None = None, per_node: bool = True) -> "Normalizer":
        values = np.asarray(values, dtype=float)
        if per_node:
            lo, hi = np.nanmin(values, axis=0), np.nanmax(values, axis=0)
        else:
            lo = np.full(values.shape[1], np.nanmin(values))
            hi = np.full(values.shape[1], np.nanmax(values))
        flat = np.flatnonzero(~(hi > lo))
        if flat.size:
            j = int(flat[0])
            name = node_ids[j] if node_ids is not None else f"#{j}"
            raise ConstantNode(f"node {name} is constant ({lo[j]}) over the training range; cannot normalize")
        return cls(lo, hi)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Scale to ``[0, 1]`` over the fitted range, clipped to ``[-0.5, 1.5]``."""
        return np.clip((np.asarray(v, dtype=float) - self.minimum) / (self.maximum - self.minimum), *CLIP_RANGE)

    def invert(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float) * (self.maximum - self.minimum) + self.minimum

    def to_dict(self) -> dict:
        return {"minimum": self.minimum.tolist(), "maximum": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["minimum"], dtype=float), np.array(d["maximum"], dtype=float))


def fit_normalizer(series: SpeedSeries, train_range: tuple[int, int], per_node: bool = True) -> Normalizer:
    lo, hi = train_range
    return Normalizer.fit(series.values[lo:hi], series.node_ids, per_node)


# windowing


@dataclass
class SampleSet:
    """Supervised windows: ``inputs (S, P, N, C)`` and ``targets (S, T, N, C)``.

    ``target_index`` holds the series row of each sample's first target.
    After normalization ``raw_inputs``/``raw_targets`` keep the original
    (unclipped) speeds for metrics and baselines.
    """

    inputs: np.ndarray
    targets: np.ndarray
    target_index: np.ndarray
    split: str = "all"
    raw_inputs: np.ndarray | None = None
    raw_targets: np.ndarray | None = None

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx, split: str | None = None) -> "SampleSet":
        def take(a):
            return None if a is None else a[idx]

        return SampleSet(self.inputs[idx], self.targets[idx], self.target_index[idx], split or self.split,
                         take(self.raw_inputs), take(self.raw_targets))

    def map(self, fn) -> "SampleSet":
        """Apply ``fn`` to the values of inputs and targets, keeping the originals as raw."""
        raw_x = self.inputs if self.raw_inputs is None else self.raw_inputs
        raw_y = self.targets if self.raw_targets is None else self.raw_targets
        return SampleSet(fn(self.inputs[..., 0])[..., None], fn(self.targets[..., 0])[..., None],
                         self.target_index, self.split, raw_x, raw_y)

    @property
    def observed(self) -> np.ndarray:
        """Targets in original units."""
        return self.targets if self.raw_targets is None else self.raw_targets

    @property
    def observed_inputs(self) -> np.ndarray:
        return self.inputs if self.raw_inputs is None else self.raw_inputs


def window(series: SpeedSeries, history: int, horizon: int) -> SampleSet:
    """Stride-1 windows inside each complete segment.

    Segments shorter than ``history + horizon`` contribute nothing.
    """
    span = history + horizon
    xs, ys, idx = [], [], []
    vals = series.values
    for start, stop in series.segments():
        count = stop - start - span + 1
        if count <= 0:
            log.warning("segment rows %d-%d shorter than %d steps; skipped", start, stop, span)
            continue
        seg = vals[start:stop]
        windows = np.lib.stride_tricks.sliding_window_view(seg, span, axis=0)  # (count, N, span)
        windows = np.moveaxis(windows, -1, 1)
        xs.append(windows[:, :history])
        ys.append(windows[:, history:])
        idx.append(np.arange(start + history, start + history + count))
    if not xs:
        raise TooShort(f"no segment is at least history+horizon={span} steps long")
    inputs = np.concatenate(xs)[..., None].astype(float)
    targets = np.concatenate(ys)[..., None].astype(float)
    return SampleSet(inputs, targets, np.concatenate(idx))


def chronological_split(samples: SampleSet, fractions: Sequence[float] = (0.7, 0.1, 0.2)):
    """Contiguous train/val/test split.

    Train and validation sizes are floored; the remainder goes to test.
    """
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise FractionError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(samples)
    n_train = int(math.floor(fr[0] * n + 1e-9))
    n_val = int(math.floor(fr[1] * n + 1e-9))
    if n_train == 0 or n_val == 0 or n - n_train - n_val == 0:
        raise FractionError(f"{n} samples are too few for split {fractions}")
    return (
        samples.subset(slice(0, n_train), "train"),
        samples.subset(slice(n_train, n_train + n_val), "val"),
        samples.subset(slice(n_train + n_val, n), "test"),
    )


@dataclass
class PreparedData:
    """Normalized train/val/test windows plus the fitted normalizer."""

    train: SampleSet
    val: SampleSet
    test: SampleSet
    normalizer: Normalizer
    node_ids: tuple[str, ...]
    timestamps: list[str] = field(default_factory=list)


def prepare(
    series: SpeedSeries,
    history: int = 12,
    horizon: int = 1,
    fractions: Sequence[float] = (0.7, 0.1, 0.2),
    per_node: bool = True,
) -> PreparedData:
    """Window, split chronologically, then normalize with statistics from
    the rows the training windows cover."""
    raw = window(series, history, horizon)
    train, val, test = chronological_split(raw, fractions)
    last_train_row = int(train.target_index[-1]) + horizon
    norm = fit_normalizer(series, (0, last_train_row), per_node)
    return PreparedData(
        train.map(norm.apply), val.map(norm.apply), test.map(norm.apply), norm,
        series.node_ids, list(series.timestamps),
    )


# synthetic traffic


@dataclass
class SynthParams:
    alpha: float = 0.3  # diffusion rate
    beta: float = 0.05  # congestion decay
    p: float = 0.01  # per node, per step injection probability
    m: float = 20.0  # injection magnitude
    a: float = 3.0  # daily sinusoid amplitude
    period: int = 288  # steps per day at 5-minute resolution


def grid_edges(width: int, height: int, prefix: str = "g") -> list[tuple[str, str]]:
    def name(r, c):
        return f"{prefix}{r:03d}_{c:03d}"

    edges = []
    for r in range(height):
        for c in range(width):
            if c + 1 < width:
                edges.append((name(r, c), name(r, c + 1)))
            if r + 1 < height:
                edges.append((name(r, c), name(r + 1, c)))
    return edges


def _two_community_edges(n1: int, n2: int, bridges: int, rng: np.random.Generator):
    def community(prefix, n):
        names = [f"{prefix}{i:03d}" for i in range(n)]
        edges = [(names[i], names[(i + 1) % n]) for i in range(n if n > 2 else n - 1)]
        for i in range(n):
            for j in range(i + 2, n):
                if rng.random() < 0.3:
                    edges.append((names[i], names[j]))
        return names, edges

    a, ea = community("a", n1)
    b, eb = community("b", n2)
    links = [(a[int(rng.integers(n1))], b[int(rng.integers(n2))]) for _ in range(max(1, bridges))]
    return ea + eb + links


def _hybrid_edges(width: int, height: int, highway_len: int):
    edges = grid_edges(width, height)
    hw = [f"h{i:03d}" for i in range(highway_len)]
    edges += [(hw[i], hw[i + 1]) for i in range(highway_len - 1)]
    # ramps: highway ends and midpoint join the grid's corners/centre
    edges.append((hw[0], f"g{0:03d}_{0:03d}"))
    edges.append((hw[-1], f"g{height - 1:03d}_{width - 1:03d}"))
    edges.append((hw[highway_len // 2], f"g{height // 2:03d}_{width // 2:03d}"))
    return edges, set(hw)


def congestion_operator(graph: Graph, alpha: float, beta: float) -> np.ndarray:
    """``(1 - beta) (I - alpha L_norm)``, the one-step congestion map."""
    return (1.0 - beta) * (np.eye(graph.n) - alpha * laplacian(graph, NORMALIZED))


def spectral_radius(m: np.ndarray) -> float:
    from .spectral import eig_sym

    return float(np.abs(eig_sym(m).eigenvalues).max())


def synth_generate(
    topology: str,
    steps: int,
    seed: int,
    params: SynthParams | None = None,
    **shape,
) -> tuple[Graph, SpeedSeries]:
    """Simulate congestion diffusing over a road graph.

    Congestion evolves as ``c[t+1] = (1-beta)(I - alpha L) c[t] + injections``
    with random injections of size ``m`` (probability ``p`` per node and
    step); speed is ``clip(v_free - c + a sin(2 pi t / period), 0, v_free)``.

    Topologies: ``grid`` (``width``, ``height``), ``two_community``
    (``n1``, ``n2``, ``bridges``) and ``hybrid_highway_grid`` (``width``,
    ``height``, ``highway_len``). Highway nodes get higher free-flow speeds.
    """
    params = params or SynthParams()
    if steps < 500:
        raise ConfigError(f"synthetic series needs at least 500 steps, got {steps}")
    rng = np.random.default_rng(seed)
    highway: set[str] = set()
    if topology == "grid":
        edges = grid_edges(int(shape.get("width", 6)), int(shape.get("height", 8)))
    elif topology == "two_community":
        edges = _two_community_edges(int(shape.get("n1", 20)), int(shape.get("n2", 20)),
                                     int(shape.get("bridges", 3)), rng)
    elif topology == "hybrid_highway_grid":
        edges, highway = _hybrid_edges(int(shape.get("width", 5)), int(shape.get("height", 5)),
                                       int(shape.get("highway_len", 10)))
    else:
        raise ConfigError(f"unknown topology {topology!r}")
    graph = build_graph(edges)

    op = congestion_operator(graph, params.alpha, params.beta)
    radius = spectral_radius(op)
    if radius > 1.0 + 1e-12:
        raise ConfigError(
            f"unstable dynamics: spectral radius of (1-beta)(I-alpha*L) is {radius:.4f} > 1 "
            f"(alpha={params.alpha}, beta={params.beta}); need alpha*lambda_max <= 2 - (1-beta)^-1 margin"
        )

    is_hw = np.array([nid in highway for nid in graph.node_ids])
    v_free = np.where(is_hw, rng.uniform(55, 70, graph.n), rng.uniform(45, 65, graph.n))
    c = np.zeros(graph.n)
    speeds = np.empty((steps, graph.n))
    t = np.arange(steps)
    daily = params.a * np.sin(2 * np.pi * t / params.period)
    for k in range(steps):
        speeds[k] = np.clip(v_free - c + daily[k], 0.0, v_free)
        inj = params.m * (rng.random(graph.n) < params.p)
        c = op @ c + inj
    start = datetime(2020, 1, 1)
    stamps = [(start + timedelta(minutes=STEP_MINUTES * k)).isoformat() for k in range(steps)]
    return graph, SpeedSeries(stamps, graph.node_ids, speeds)
