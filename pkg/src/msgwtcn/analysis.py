"""Metrics, wavelet weight-matrix analysis, scale scans and ablations."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PreparedData, SampleSet, SpeedSeries, prepare
from .errors import EmptyInput, NonSquare, ShapeError
from .graph import Graph, subgraph
from .model import Model, ModelConfig, new_model
from .seeding import derive_seed
from .training import TrainConfig, evaluate, train


def _pair(pred, obs) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=float).ravel()
    o = np.asarray(obs, dtype=float).ravel()
    if p.shape != o.shape:
        raise ShapeError(f"prediction and observation sizes differ: {p.size} vs {o.size}")
    if p.size == 0:
        raise EmptyInput("metrics need at least one value")
    return p, o


def mae(pred, obs) -> float:
    p, o = _pair(pred, obs)
    return float(np.mean(np.abs(o - p)))


def rmse(pred, obs) -> float:
    p, o = _pair(pred, obs)
    return float(np.sqrt(np.mean((o - p) ** 2)))


def persistence_baseline(split: SampleSet) -> np.ndarray:
    """Repeat the last observed value over the horizon: ``Y(t+h) = X(t)``."""
    last = split.observed_inputs[:, -1:]
    return np.repeat(last, split.targets.shape[1], axis=1)


def persistence_mae(split: SampleSet) -> float:
    return mae(persistence_baseline(split), split.observed)


# weight matrices


@dataclass
class WaveletWeightMatrix:
    layer: int  # 1-based
    scale_index: int
    scale: float
    matrix: np.ndarray


def extract_weight_matrices(model: Model) -> list[WaveletWeightMatrix]:
    """``psi_s diag(gamma) psi_s^-1`` for every layer and scale, layer-major."""
    out = []
    for i, layer in enumerate(model.layers, start=1):
        block = layer.spatial
        for j, basis in enumerate(block.bases):
            w = basis.psi @ (block.gammas[j].data[:, None] * basis.psi_inv)
            out.append(WaveletWeightMatrix(i, j, basis.scale, w))
    return out


def _square(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise NonSquare(f"expected a square matrix, got shape {w.shape}")
    return w


def frobenius_sq(w) -> float:
    """Squared Frobenius norm, the sum of squared entries."""
    w = _square(w)
    return float(np.sum(w * w))


def zero_diagonal(w) -> np.ndarray:
    w = _square(w).copy()
    np.fill_diagonal(w, 0.0)
    return w


@dataclass
class DiagonalRow:
    layer: int
    scale_index: int
    scale: float
    norm_before: float
    norm_after: float

    @property
    def drop(self) -> float:
        """Fraction of the squared norm held by the diagonal."""
        if self.norm_before == 0:
            return 0.0
        return (self.norm_before - self.norm_after) / self.norm_before


def diagonal_contribution_report(model: Model) -> list[DiagonalRow]:
    rows = []
    for wm in extract_weight_matrices(model):
        rows.append(DiagonalRow(wm.layer, wm.scale_index, wm.scale,
                                frobenius_sq(wm.matrix), frobenius_sq(zero_diagonal(wm.matrix))))
    return rows


def median_drop_by_scale(rows: Sequence[DiagonalRow]) -> dict[int, float]:
    """Median relative drop across layers, per scale index."""
    by: dict[int, list[float]] = {}
    for r in rows:
        by.setdefault(r.scale_index, []).append(r.drop)
    return {j: float(np.median(v)) for j, v in sorted(by.items())}


@dataclass
class LinkScore:
    node_id: str
    scale_index: int
    scale: float
    score: float
    rank: int  # 1 = highest score
    top: bool


def link_importance(model: Model, percentile: float = 5.0) -> list[LinkScore]:
    """Row-wise squared norms of the weight matrices summed over layers.

    Scored separately per scale. The top ``ceil(N * percentile / 100)``
    nodes are flagged; equal scores rank in node-id order. Scores are
    compared at 12 significant digits so rounding noise from
    ``psi @ psi_inv`` does not break ties.
    """
    if not 0.0 < percentile < 100.0:
        raise ValueError(f"percentile must be in (0, 100), got {percentile}")
    n = model.graph.n
    n_scales = len(model.cfg.scales)
    scores = np.zeros((n_scales, n))
    for wm in extract_weight_matrices(model):
        scores[wm.scale_index] += np.sum(wm.matrix ** 2, axis=1)
    n_top = math.ceil(n * percentile / 100.0)
    ids = model.graph.node_ids  # already sorted, so index order is id order
    out = []
    for j in range(n_scales):
        key = [float(f"{v:.12g}") for v in scores[j]]
        order = sorted(range(n), key=lambda i: (-key[i], ids[i]))
        for rank, i in enumerate(order, start=1):
            out.append(LinkScore(ids[i], j, model.cfg.scales[j], float(scores[j, i]), rank, rank <= n_top))
    return out


def write_link_scores(rows: Sequence[LinkScore], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "scale", "score", "rank", "top_flag"])
        for r in rows:
            w.writerow([r.node_id, f"{r.scale:.17g}", f"{r.score:.17g}", r.rank, int(r.top)])


def write_diagonal_report(rows: Sequence[DiagonalRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "scale_index", "scale", "norm_before", "norm_after", "relative_drop"])
        for r in rows:
            w.writerow([r.layer, r.scale_index, f"{r.scale:.17g}", f"{r.norm_before:.17g}",
                        f"{r.norm_after:.17g}", f"{r.drop:.17g}"])


# experiments


@dataclass
class RunResult:
    seed: int
    val_mae: float
    test_mae: float
    model: Model


def fit_and_score(
    graph: Graph,
    data: PreparedData,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seed: int,
    checkpoint_path: str | Path | None = None,
    history_path: str | Path | None = None,
) -> RunResult:
    """Initialize from ``seed``, train, and score on validation and test."""
    model = new_model(model_cfg, graph, derive_seed(seed, "init"))
    tcfg = replace(train_cfg, seed=seed)
    hist = train(model, data, tcfg, history_path=history_path, checkpoint_path=checkpoint_path)
    test = evaluate(model, data.test, data.normalizer)
    return RunResult(seed, hist.best_val_mae, test["mae"], model)


def scale_scan(
    graph: Graph,
    data: PreparedData,
    scale_grid: Sequence[float],
    base_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
) -> list[tuple[float, float]]:
    """Median validation MAE of a single-scale model at each grid point."""
    rows = []
    for s in scale_grid:
        if not 0.0 < s <= 6.0:
            raise ValueError(f"scan scales must lie in (0, 6], got {s}")
        cfg = replace(base_cfg, scales=(float(s),))
        maes = [fit_and_score(graph, data, cfg, train_cfg, seed).val_mae for seed in seeds]
        rows.append((float(s), float(np.median(maes))))
    return rows


def ablation_run(
    graph: Graph,
    series: SpeedSeries,
    node_subsets: dict[str, Sequence[str]],
    scale_sets: Sequence[Sequence[float]],
    base_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    split: Sequence[float] = (0.7, 0.1, 0.2),
) -> dict:
    """Median test MAE for every (scale set, node subset) pair.

    Returns ``{"scale_sets": [...], "subsets": [...], "mae": rows x columns}``.
    """
    names = list(node_subsets)
    table = np.zeros((len(scale_sets), len(names)))
    for c, name in enumerate(names):
        sub, _ = subgraph(graph, node_subsets[name])
        sub_series = series.select_nodes(sub.node_ids)
        data = prepare(sub_series, base_cfg.history, base_cfg.horizon, split)
        for r, scales in enumerate(scale_sets):
            cfg = replace(base_cfg, scales=tuple(float(s) for s in scales))
            maes = [fit_and_score(sub, data, cfg, train_cfg, seed).test_mae for seed in seeds]
            table[r, c] = float(np.median(maes))
    return {"scale_sets": [list(map(float, s)) for s in scale_sets], "subsets": names, "mae": table}


def write_ablation_table(result: dict, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scales", *result["subsets"]])
        for scales, row in zip(result["scale_sets"], result["mae"]):
            w.writerow(["|".join(f"{s:g}" for s in scales), *(f"{v:.17g}" for v in row)])


def write_scan_table(rows: Sequence[tuple[float, float]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scale", "val_mae"])
        for s, v in rows:
            w.writerow([f"{s:.17g}", f"{v:.17g}"])
