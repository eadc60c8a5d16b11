"""Class-incremental training protocol, anomaly scoring, and metrics.

One persistent parameter record is trained task by task on normal samples
only; after each task the cumulative test set is scored and per-category
AUROC, its mean, and a forgetting measure (drop from each category's best
historical AUROC) are recorded. Training data access goes through the
auditor so the no-revisiting contract is checkable, not just assumed.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .advisor import kaa_update
from .config import RunConfig
from .errors import TrainingAbort, UndefinedMetricError
from .model import (
    ModelParams,
    TokenBatch,
    embed_groups,
    forward,
    init_params,
)
from .pointcloud import (
    GroupedCloud,
    LABEL_ANOMALOUS,
    PointCloud,
    adaptive_radius,
    fps_sample,
    group_points,
    normalize_cloud,
)
from .rpp import PerturbationConfig, param_gradients
from .taskstream import AccessAuditor, AuditedSamples, Sample, TaskStream

log = logging.getLogger("cloudad.continual")

_SEED_FPS = 31
_SEED_SHUFFLE = 41
_SEED_RPP = 51


def auroc(scored: Sequence[tuple[float, bool]]) -> float:
    """Rank-based (Mann-Whitney) area under the ROC curve.

    `scored` pairs an anomaly score with an is-anomalous flag; ties between
    a normal and an anomalous score contribute one half. Raises
    UndefinedMetricError unless both classes are present.
    """
    scores = np.array([s for s, _ in scored], dtype=np.float64)
    flags = np.array([bool(a) for _, a in scored])
    n_pos = int(flags.sum())
    n_neg = flags.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC needs both classes; got {n_pos} anomalous / {n_neg} normal"
        )
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    ranks = rankdata(scores)
    return float((ranks[flags].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _fps_seed(base_seed: int, uid: str) -> int:
    return int(
        np.random.SeedSequence(
            [int(base_seed), _SEED_FPS, zlib.crc32(uid.encode())]
        ).generate_state(1, np.uint64)[0]
    )


def prepare_geometry(cloud: PointCloud, cfg: RunConfig, uid: str) -> GroupedCloud:
    """normalize -> fps -> adaptive radius -> fixed-size groups."""
    norm = normalize_cloud(cloud)
    centers = fps_sample(norm, cfg.n_groups, _fps_seed(cfg.seed, uid))
    radii = adaptive_radius(centers, cfg.eta, cfg.radius_mode)
    return group_points(norm, centers, radii, cfg.group_size)


def score_sample(
    cloud: PointCloud,
    params: ModelParams,
    cfg: RunConfig,
    uid: str = "sample",
    grouped: Optional[GroupedCloud] = None,
) -> tuple[float, np.ndarray]:
    """Object score and per-token scores for one cloud.

    Token score is the squared distance between a feature token and its
    reconstruction; the object score is the mean of the top-k token scores
    with k = max(1, n_groups // top_k_divisor).
    """
    if grouped is None:
        grouped = prepare_geometry(cloud, cfg, uid)
    tb = embed_groups(grouped, params)
    out = forward(tb, params, mode="eval").tokens
    diff = tb.tokens.astype(np.float64) - out.tokens.astype(np.float64)
    token_scores = (diff * diff).sum(axis=1)
    k = max(1, cfg.n_groups // cfg.top_k_divisor)
    top = np.sort(token_scores)[-k:]
    return float(top.mean()), token_scores


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer over an array dict."""

    def __init__(self, arrays, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.arrays = arrays
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, arr in self.arrays.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * (g * g)
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            arr -= (lr * (update + self.weight_decay * arr)).astype(arr.dtype)


@dataclass
class EpochMetrics:
    task_id: int
    epoch: int
    recon_loss: float
    rpp_loss: float
    lr: float


def train_task(
    params: ModelParams,
    samples: Sequence[Sample],
    cfg: RunConfig,
    task_id: int,
    metrics: Optional[list[EpochMetrics]] = None,
    geometry_cache: Optional[dict] = None,
) -> ModelParams:
    """Train in place on one task's normal clouds.

    Per step: composite forward/backward, optimizer step, then the advisor
    update with that step's (phi(K), V). A non-finite loss rolls parameters
    back to the end of the last completed epoch and raises TrainingAbort.
    """
    for i in range(len(samples)):
        if samples[i].cloud.label != "normal":
            raise ValueError("train_task accepts normal-labeled clouds only")

    geoms = []
    for i in range(len(samples)):
        s = samples[i]
        grouped = None if geometry_cache is None else geometry_cache.get(s.uid)
        if grouped is None:
            grouped = prepare_geometry(s.cloud, cfg, s.uid)
            if geometry_cache is not None:
                geometry_cache[s.uid] = grouped
        dt = params.config.np_dtype
        geoms.append((grouped.groups.astype(dt), grouped.centers.astype(dt)))
    if not geoms:
        raise ValueError("task has no training samples")

    opt = AdamW(params.arrays, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SEED_SHUFFLE, task_id]))
    drop_at = int(np.ceil(cfg.lr_drop_fraction * cfg.epochs))
    update_advisors = params.config.attention == "kaa"

    snapshot = (params.copy_arrays(), [replace(a) for a in params.advisors])
    last_good = -1
    for epoch in range(cfg.epochs):
        lr = cfg.lr * (cfg.lr_drop_factor if epoch >= drop_at else 1.0)
        order = rng.permutation(len(geoms))
        rec_sum = rpp_sum = 0.0
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            groups = np.stack([geoms[j][0] for j in chunk])
            centers = np.stack([geoms[j][1] for j in chunk])
            pcfg = PerturbationConfig(
                epsilon=cfg.epsilon,
                ascent_steps=cfg.ascent_steps,
                step_size=cfg.ascent_step_size,
                lambda_rpp=cfg.lambda_rpp,
                seed=int(
                    np.random.SeedSequence(
                        [cfg.seed, _SEED_RPP, task_id, epoch, steps]
                    ).generate_state(1, np.uint64)[0]
                ),
            )
            res = param_gradients(params, groups, centers, pcfg, collect_kv=update_advisors)
            if not np.isfinite(res.total):
                params.arrays.clear()
                params.arrays.update(snapshot[0])
                params.advisors[:] = snapshot[1]
                raise TrainingAbort(
                    f"non-finite loss at task {task_id} epoch {epoch}", epoch=last_good
                )
            opt.step(res.grads, lr)
            if update_advisors and res.layer_kv:
                for li, (pk, v) in enumerate(res.layer_kv):
                    params.advisors[li] = kaa_update(params.advisors[li], pk, v)
            rec_sum += res.recon
            rpp_sum += res.rpp
            steps += 1
        if metrics is not None:
            metrics.append(
                EpochMetrics(task_id, epoch, rec_sum / steps, rpp_sum / steps, lr)
            )
        snapshot = (params.copy_arrays(), [replace(a) for a in params.advisors])
        last_good = epoch
    return params


@dataclass
class SampleScore:
    uid: str
    category: str
    origin_task: int
    label: str
    score: float
    token_scores: list[float] = field(repr=False)


@dataclass
class EvalRound:
    trained_through: int
    per_category_auroc: dict[str, float]
    mean_auroc_categories: float
    mean_auroc_samples: float
    forgetting: dict[str, float]
    samples: list[SampleScore] = field(repr=False)


@dataclass
class AnomalyReport:
    label: str
    rounds: list[EvalRound]
    foreign_train_reads: int
    final_mean_auroc: float
    final_forgetting: dict[str, float]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)

    def task_means(self) -> list[float]:
        return [r.mean_auroc_categories for r in self.rounds]


def evaluate_round(
    params: ModelParams,
    test_samples: Sequence[Sample],
    cfg: RunConfig,
    trained_through: int,
    history: dict[str, list[float]],
    geometry_cache: Optional[dict] = None,
) -> EvalRound:
    """Score one cumulative test set and compute its AUROC breakdown."""

    def one(s: Sample):
        grouped = None if geometry_cache is None else geometry_cache.get(s.uid)
        if grouped is None:
            grouped = prepare_geometry(s.cloud, cfg, s.uid)
            if geometry_cache is not None:
                geometry_cache[s.uid] = grouped
        score, token_scores = score_sample(s.cloud, params, cfg, s.uid, grouped=grouped)
        return SampleScore(
            uid=s.uid,
            category=s.category,
            origin_task=s.origin_task,
            label=s.cloud.label,
            score=score,
            token_scores=[float(t) for t in token_scores],
        )

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            scored = list(pool.map(one, test_samples))
    else:
        scored = [one(s) for s in test_samples]

    categories = sorted({s.category for s in scored})
    per_cat: dict[str, float] = {}
    for cat in categories:
        pairs = [
            (s.score, s.label == LABEL_ANOMALOUS) for s in scored if s.category == cat
        ]
        per_cat[cat] = auroc(pairs)
    mean_cat = float(np.mean(list(per_cat.values())))
    mean_samples = auroc([(s.score, s.label == LABEL_ANOMALOUS) for s in scored])

    forgetting: dict[str, float] = {}
    for cat, value in per_cat.items():
        earlier = history.setdefault(cat, [])
        forgetting[cat] = max([h - value for h in earlier], default=0.0)
        earlier.append(value)

    return EvalRound(
        trained_through=trained_through,
        per_category_auroc=per_cat,
        mean_auroc_categories=mean_cat,
        mean_auroc_samples=mean_samples,
        forgetting=forgetting,
        samples=scored,
    )


def run_protocol(
    stream: TaskStream,
    cfg: RunConfig,
    label: str = "default",
    params: Optional[ModelParams] = None,
    metrics: Optional[list[EpochMetrics]] = None,
) -> tuple[ModelParams, AnomalyReport]:
    """Sequential train/eval over the stream from one persistent record."""
    if params is None:
        params = init_params(cfg.model_config(), cfg.seed)
    auditor = AccessAuditor()
    geometry_cache: dict = {}
    history: dict[str, list[float]] = {}
    rounds: list[EvalRound] = []
    for task in stream.tasks:
        audited = AuditedSamples(task.train, auditor)
        auditor.begin_task(task.task_id)
        train_task(params, audited, cfg, task.task_id, metrics=metrics,
                   geometry_cache=geometry_cache)
        auditor.end_task()
        rounds.append(
            evaluate_round(
                params, task.test, cfg, task.task_id, history, geometry_cache
            )
        )
    report = AnomalyReport(
        label=label,
        rounds=rounds,
        foreign_train_reads=len(auditor.foreign_reads()),
        final_mean_auroc=rounds[-1].mean_auroc_categories,
        final_forgetting=dict(rounds[-1].forgetting),
    )
    return params, report
