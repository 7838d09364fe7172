"""Ranking metrics, cache-hit evaluation, placement baselines and FLOP accounting."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .datapipe import DatasetSplit, Sample
from .numcore import seeded_rng, tensor
from .seqmodel import ModelConfig, model_probs

__all__ = [
    "RankingResult",
    "MetricsReport",
    "FlopsReport",
    "rank_files",
    "top_k_select",
    "oracle_relevant",
    "cache_hit_rate",
    "average_precision",
    "map_at_k",
    "ndcg_at_k",
    "evaluate",
    "evaluate_probs",
    "simulate_policy",
    "POLICIES",
    "estimate_flops",
]


def rank_files(scores) -> np.ndarray:
    """File ids by descending score, ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def top_k_select(probs, k: int) -> np.ndarray:
    probs = np.asarray(probs)
    if not 1 <= k <= len(probs):
        raise ValueError(f"k={k} outside [1, {len(probs)}]")
    return rank_files(probs)[:k]


@dataclass
class RankingResult:
    order: np.ndarray
    probs: np.ndarray
    target_counts: np.ndarray

    @classmethod
    def from_probs(cls, probs, target_counts) -> "RankingResult":
        return cls(rank_files(probs), np.asarray(probs), np.asarray(target_counts))


def cache_hit_rate(selected, target_counts) -> float:
    """Share of the window's requests served by ``selected``; NaN for an empty window."""
    counts = np.asarray(target_counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        return math.nan
    return float(counts[np.asarray(list(selected), dtype=np.int64)].sum() / total)


def oracle_relevant(target_counts, k: int) -> set[int]:
    """The true top-k files among those requested at least once."""
    counts = np.asarray(target_counts)
    return {int(i) for i in rank_files(counts)[:k] if counts[i] > 0}


def average_precision(order, relevant: set[int], k: int) -> float:
    if not relevant:
        return 0.0
    hits, score = 0, 0.0
    for i, f in enumerate(order[:k], start=1):
        if int(f) in relevant:
            hits += 1
            score += hits / i
    return score / min(k, len(relevant))


def map_at_k(ranking, target_counts, k: int) -> float:
    """AP@k of one ranking against the oracle top-k; average it over samples for MAP."""
    order = ranking.order if isinstance(ranking, RankingResult) else np.asarray(ranking)
    return average_precision(order, oracle_relevant(target_counts, k), k)


def ndcg_at_k(ranking, target_counts, k: int) -> float:
    """NDCG@k with the raw target counts as linear gains."""
    order = ranking.order if isinstance(ranking, RankingResult) else np.asarray(ranking)
    gains = np.asarray(target_counts, dtype=np.float64)
    discount = 1.0 / np.log2(np.arange(2, k + 2))
    ideal = np.sort(gains)[::-1][:k]
    idcg = float((ideal * discount[:len(ideal)]).sum())
    if idcg == 0:
        return 0.0
    dcg = float((gains[order[:k]] * discount[:min(k, len(order))]).sum())
    return dcg / idcg


@dataclass
class MetricsReport:
    map_at_k: float
    ndcg_at_k: float
    cache_hit_rate: float
    k: int
    n_samples: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_probs(probs, target_counts, k: int) -> MetricsReport:
    """Aggregate the three metrics as unweighted means over non-empty windows."""
    maps, ndcgs, hits = [], [], []
    for p, c in zip(probs, target_counts):
        if np.sum(c) == 0:
            continue
        r = RankingResult.from_probs(p, c)
        maps.append(map_at_k(r, c, k))
        ndcgs.append(ndcg_at_k(r, c, k))
        hits.append(cache_hit_rate(r.order[:k], c))
    n = len(hits)
    mean = (lambda xs: math.fsum(xs) / n) if n else (lambda xs: math.nan)
    return MetricsReport(mean(maps), mean(ndcgs), mean(hits), k, n)


def evaluate(checkpoint, test: list[Sample], k: int) -> MetricsReport:
    cfg: ModelConfig = checkpoint.config
    n_files, lookback = test[0].X.shape
    if (cfg.n_files, cfg.lookback) != (n_files, lookback):
        raise ValueError(f"checkpoint expects (N_c, L)=({cfg.n_files}, {cfg.lookback}), "
                         f"dataset has ({n_files}, {lookback})")
    if not 1 <= k <= n_files:
        raise ValueError(f"k={k} outside [1, {n_files}]")
    probs = model_probs(np.stack([s.X for s in test]), {n: tensor(v) for n, v in checkpoint.params.items()}, cfg)
    return evaluate_probs(probs, [s.target_counts for s in test], k)


# ------------------------------------------------------------------ policies

POLICIES = ("predicted", "oracle", "persistence", "lfu_cumulative", "random")


def simulate_policy(dataset: DatasetSplit, policy: str, k: int, checkpoint=None, seed: int = 0):
    """Per-window hit rates of a placement policy over the test windows.

    Returns ``(target_indices, hit_rates, mean)``; windows without requests
    get NaN and are left out of the mean.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; choose from {POLICIES}")
    test = dataset.test
    if not test:
        raise ValueError("no test windows")
    n_files = test[0].X.shape[0]
    if not 1 <= k <= n_files:
        raise ValueError(f"k={k} outside [1, {n_files}]")
    if policy == "predicted":
        if checkpoint is None:
            raise ValueError("the predicted policy needs a checkpoint")
        probs = model_probs(np.stack([s.X for s in test]),
                            {n: tensor(v) for n, v in checkpoint.params.items()}, checkpoint.config)
        picks = [top_k_select(p, k) for p in probs]
    elif policy == "oracle":
        picks = [top_k_select(s.target_counts, k) for s in test]
    elif policy == "persistence":
        picks = [top_k_select(s.X[:, -1], k) for s in test]
    elif policy == "lfu_cumulative":
        picks = [top_k_select(c, k) for c in _cumulative_before(dataset)]
    else:
        rng = seeded_rng(seed)
        picks = [rng.choice(n_files, size=k, replace=False) for _ in test]
    rates = np.array([cache_hit_rate(sel, s.target_counts) for sel, s in zip(picks, test)])
    valid = rates[~np.isnan(rates)]
    mean = math.fsum(valid) / len(valid) if len(valid) else math.nan
    return np.array([s.target_index for s in test]), rates, mean


def _cumulative_before(dataset: DatasetSplit) -> list[np.ndarray]:
    """Total counts over windows ``[0, t_u)`` for every test sample."""
    samples = dataset.all_samples()
    first = samples[0]
    running = first.X.astype(np.int64).sum(axis=1)
    out = {}
    for s in samples:
        out[s.target_index] = running.copy()
        running = running + s.target_counts
    return [out[s.target_index] for s in dataset.test]


# --------------------------------------------------------------------- FLOPs

TRANSCENDENTAL = 4


@dataclass
class FlopsReport:
    components: dict[str, int] = field(default_factory=dict)
    lookback: int = 0

    @property
    def total(self) -> int:
        return sum(self.components.values())


def _linear_flops(m: int, n: int, tokens: int, bias: bool) -> int:
    return 2 * m * n * tokens + (n * tokens if bias else 0)


def _layer_norm_flops(d: int, tokens: int) -> int:
    # mean d, centre d, variance 2d, scale by inverse std d + sqrt, affine 2d
    return (7 * d + TRANSCENDENTAL) * tokens


def estimate_flops(cfg: ModelConfig, L: int | None = None) -> FlopsReport:
    """Analytic forward-pass FLOPs for one sample of look-back ``L``.

    Conventions: a multiply-add is 2 FLOPs; add, multiply, compare are 1;
    exp, log, sqrt, softplus, sigmoid and silu are 4 per element. The head
    runs on the last token only.
    """
    L = cfg.lookback if L is None else L
    d, nf = cfg.d_model, cfg.n_files
    c: dict[str, int] = {}
    # z-score: mean, centre, variance (2), divide, plus one sqrt per statistic
    n_stats = nf if cfg.normalization == "row" else 1
    c["normalize"] = 5 * nf * L + TRANSCENDENTAL * n_stats
    c["input_projection"] = _linear_flops(nf, d, L, bias=True)
    c["positional_encoding"] = d * L
    for i in range(cfg.n_layers):
        key = f"blocks.{i}"
        if cfg.encoder == "mamba":
            di, n, r, kc = cfg.d_inner, cfg.d_state, cfg.dt_rank, cfg.d_conv
            c[f"{key}.in_proj"] = _linear_flops(d, 2 * di, L, bias=False)
            c[f"{key}.conv"] = 2 * kc * di * L + di * L
            c[f"{key}.conv_silu"] = TRANSCENDENTAL * di * L
            c[f"{key}.x_proj"] = _linear_flops(di, r + 2 * n, L, bias=False)
            c[f"{key}.dt_proj"] = _linear_flops(r, di, L, bias=True) + TRANSCENDENTAL * di * L
            c[f"{key}.A"] = (TRANSCENDENTAL + 1) * di * n
            # per step and channel: decay 2n, injection 2n, readout 2n, exp 4n, skip term 3
            c[f"{key}.scan"] = (6 * n + TRANSCENDENTAL * n + 3) * di * L
            c[f"{key}.gate"] = TRANSCENDENTAL * di * L + di * L
            c[f"{key}.out_proj"] = _linear_flops(di, d, L, bias=False)
            if cfg.residual:
                c[f"{key}.residual"] = d * L
        else:
            h = cfg.d_head
            c[f"{key}.qkv"] = 3 * _linear_flops(d, d, L, bias=True)
            c[f"{key}.scores"] = 2 * d * L * L + h * L * L
            c[f"{key}.softmax"] = 5 * h * L * L
            c[f"{key}.weighted_sum"] = 2 * d * L * L
            c[f"{key}.attn_out"] = _linear_flops(d, d, L, bias=True)
            c[f"{key}.residuals"] = 2 * d * L
            c[f"{key}.norms"] = 2 * _layer_norm_flops(d, L)
            c[f"{key}.ffn"] = (_linear_flops(d, 4 * d, L, bias=True) + 4 * d * L
                               + _linear_flops(4 * d, d, L, bias=True))
    c["final_norm"] = _layer_norm_flops(d, L)
    c["head"] = (_linear_flops(d, cfg.d_fc, 1, bias=True) + cfg.d_fc
                 + _linear_flops(cfg.d_fc, nf, 1, bias=True) + (TRANSCENDENTAL + 3) * nf)
    return FlopsReport(c, L)
