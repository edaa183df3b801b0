"""Training, evaluation and baselines for correspondence inlier classification."""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError
from .geometry import (
    INLIER_THRESHOLD_M,
    CorrespondenceSet,
    DegenerateError,
    RigidTransform,
    correspondence_residuals,
    procrustes_batch,
    rotation_error,
    translation_error,
    weighted_procrustes,
)
from .gmf import GmfConfig, GmfParams, forward_graph, gmf_forward, init_params
from .synthdata import KIND_PLAIN, make_rng

RE_THRESHOLD_DEG = 15.0
TE_THRESHOLD_CM = 30.0
PROB_CUTOFF = 0.5

_STREAM_SHUFFLE = 3


# --- losses and counting rules ---------------------------------------------------


def bce_loss(probs, labels) -> float:
    """Mean binary cross-entropy of probabilities, evaluated through logits."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ContractError(f"{p.size} probabilities for {y.size} labels")
    z = np.log(p) - np.log1p(-p)
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def f1_score(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def confusion(mask, labels) -> tuple[int, int, int]:
    mask = np.asarray(mask, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    return int((mask & labels).sum()), int((mask & ~labels).sum()), int((~mask & labels).sum())


@dataclass
class SceneResult:
    index: int
    seed: int
    success: bool
    degenerate: bool
    re_deg: float
    te_cm: float
    tp: int
    fp: int
    fn: int
    n_pred: int
    n_pred_true: int
    f1: float
    ir: float
    f1_ambiguous: float


def registration_recall(results: Sequence[SceneResult], re_deg: float = RE_THRESHOLD_DEG, te_cm: float = TE_THRESHOLD_CM) -> float:
    if not results:
        return 0.0
    return sum(_passes(r, re_deg, te_cm) for r in results) / len(results)


def _passes(r: SceneResult, re_deg: float, te_cm: float) -> bool:
    return (not r.degenerate) and r.re_deg < re_deg and r.te_cm < te_cm


# --- evaluation ------------------------------------------------------------------


@dataclass
class MetricsReport:
    method: str
    RR: float
    RE: float
    TE: float
    F1: float
    IR: float
    F1_ambiguous: float
    scenes: list[SceneResult] = field(default_factory=list)

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in ("method", "RR", "RE", "TE", "F1", "IR", "F1_ambiguous")}

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary(), "scenes": [asdict(s) for s in self.scenes]}, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = list(SceneResult.__dataclass_fields__)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", *fields])
        for s in self.scenes:
            row = asdict(s)
            writer.writerow([self.method, *(_fmt(row[f]) for f in fields)])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _threads() -> int:
    try:
        return max(0, int(os.environ.get("GMF_THREADS", "0")))
    except ValueError:
        return 0


def score_scene(index: int, scene, probs, re_deg: float, te_cm: float, prob_cutoff: float) -> SceneResult:
    corrs = scene.corrs
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    if probs.shape != (len(corrs),):
        raise ContractError(f"{probs.size} scores for {len(corrs)} correspondences")
    labels = np.asarray(corrs.labels, dtype=bool)
    mask = probs >= prob_cutoff
    tp, fp, fn = confusion(mask, labels)
    residual = correspondence_residuals(corrs, scene.gt_transform)
    n_pred = int(mask.sum())
    n_pred_true = int((mask & (residual < INLIER_THRESHOLD_M)).sum())
    if corrs.kinds is not None:
        sl = np.asarray(corrs.kinds) != KIND_PLAIN
        f1_amb = f1_score(*confusion(mask[sl], labels[sl]))
    else:
        f1_amb = f1_score(tp, fp, fn)
    try:
        T = weighted_procrustes(corrs, probs)
        re = rotation_error(T.R, scene.gt_transform.R)
        te = 100.0 * translation_error(T.t, scene.gt_transform.t)
        degenerate = False
    except DegenerateError:
        re, te, degenerate = float("nan"), float("nan"), True
    res = SceneResult(
        index=index,
        seed=int(getattr(scene, "seed", index)),
        success=False,
        degenerate=degenerate,
        re_deg=float(re),
        te_cm=float(te),
        tp=tp,
        fp=fp,
        fn=fn,
        n_pred=n_pred,
        n_pred_true=n_pred_true,
        f1=f1_score(tp, fp, fn),
        ir=n_pred_true / n_pred if n_pred else 0.0,
        f1_ambiguous=f1_amb,
    )
    res.success = _passes(res, re_deg, te_cm)
    return res


def evaluate(
    predictor: Callable,
    dataset: Sequence,
    re_deg: float = RE_THRESHOLD_DEG,
    te_cm: float = TE_THRESHOLD_CM,
    prob_cutoff: float = PROB_CUTOFF,
    method: str = "model",
) -> MetricsReport:
    """Score every scene: mask = prob >= cutoff for F1/IR, probabilities as
    Procrustes weights for the transform.  Summary F1, IR and the ambiguous
    slice F1 are per-scene means; RE/TE average only successful scenes."""

    def one(i):
        scene = dataset[i]
        return score_scene(i, scene, predictor(scene), re_deg, te_cm, prob_cutoff)

    n = _threads()
    idx = range(len(dataset))
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(one, idx))
    else:
        results = [one(i) for i in idx]
    ok = [r for r in results if r.success]
    mean = lambda xs: float(np.mean(xs)) if len(xs) else 0.0
    return MetricsReport(
        method=method,
        RR=registration_recall(results, re_deg, te_cm),
        RE=mean([r.re_deg for r in ok]),
        TE=mean([r.te_cm for r in ok]),
        F1=mean([r.f1 for r in results]),
        IR=mean([r.ir for r in results]),
        F1_ambiguous=mean([r.f1_ambiguous for r in results]),
        scenes=results,
    )


def model_predictor(params: GmfParams) -> Callable:
    return lambda scene: gmf_forward(scene, scene.corrs, params)[0]


def oracle_predictor(scene) -> np.ndarray:
    return np.asarray(scene.corrs.labels, dtype=np.float64)


def ransac_predictor(iters: int = 1000, tol_m: float = 0.05, seed: int = 0) -> Callable:
    def predict(scene):
        mask, _ = ransac_baseline(scene.corrs, iters, tol_m, seed + int(getattr(scene, "seed", 0)))
        return mask.astype(np.float64)

    return predict


# --- baselines -------------------------------------------------------------------


def _distinct_triples(rng: np.random.Generator, n: int, iters: int) -> np.ndarray:
    """``iters`` index triples without repeats inside a triple.  Drawn row by
    row from one stream, so a shorter run sees a prefix of a longer one."""
    raw = rng.integers(0, [n, n - 1, n - 2], size=(iters, 3))
    a, b, c = raw[:, 0], raw[:, 1].copy(), raw[:, 2].copy()
    b += b >= a
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    c += c >= lo
    c += c >= hi
    return np.stack([a, b, c], axis=1)


def ransac_consensus(corrs: CorrespondenceSet, iters: int, tol_m: float, seed: int):
    """Per-hypothesis consensus counts and the best hypothesis' inlier mask."""
    n = len(corrs)
    if n < 3:
        raise ContractError("RANSAC needs at least three correspondences")
    p = np.asarray(corrs.p, dtype=np.float64)
    q = np.asarray(corrs.q, dtype=np.float64)
    tri = _distinct_triples(make_rng(seed, 0), n, iters)
    R, t, ok = procrustes_batch(p[tri], q[tri])
    counts = np.zeros(iters, dtype=np.int64)
    best_mask = np.zeros(n, dtype=bool)
    best = -1
    for start in range(0, iters, 256):
        sl = slice(start, min(iters, start + 256))
        pred = np.einsum("bij,nj->bni", R[sl], p) + t[sl, None, :]
        inl = np.linalg.norm(pred - q[None], axis=2) < tol_m
        c = np.where(ok[sl], inl.sum(axis=1), -1)
        counts[sl] = c
        j = int(np.argmax(c))
        if c[j] > best:
            best = int(c[j])
            best_mask = inl[j]
    return counts, best_mask, best


def ransac_baseline(corrs: CorrespondenceSet, iters: int = 1000, tol_m: float = 0.05, seed: int = 0):
    """Three-point RANSAC with an unweighted Procrustes solver.  Returns the
    consensus mask of the best hypothesis and the transform refit on it, or
    an all-false mask and ``None`` when every sample is degenerate."""
    if iters < 1 or tol_m <= 0:
        raise ContractError("iters must be >= 1 and tol_m > 0")
    _, mask, best = ransac_consensus(corrs, iters, tol_m, seed)
    if best < 3:
        return np.zeros(len(corrs), dtype=bool), None
    try:
        T = weighted_procrustes(corrs, mask.astype(np.float64))
    except DegenerateError:
        return np.zeros(len(corrs), dtype=bool), None
    return mask, T


def concat_baseline(scene, corrs, params: GmfParams) -> np.ndarray:
    """Inlier probabilities from 12-D ``xyz, rgb`` tokens of both frames and
    the structure encoder + head, without any fusion layer."""
    if params.config.mode != "concat":
        raise ContractError("concat_baseline needs parameters built with mode='concat'")
    return gmf_forward(scene, corrs, params)[0]


# --- training --------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    no_fusion1: bool = False
    no_fusion2: bool = False
    no_lcpe: bool = False
    structure_only: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or not self.eps > 0:
            raise ContractError("lr and eps must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("Adam betas must lie in (0, 1)")


def model_config_for(model_cfg: GmfConfig, train_cfg: TrainConfig) -> GmfConfig:
    """Fold the ablation flags into the network config.  Dropping the
    texture-structure block leaves no path from the images to the output,
    so ``no_fusion2`` is the structure-only network."""
    d = asdict(model_cfg)
    if train_cfg.structure_only or train_cfg.no_fusion2:
        d["mode"] = "structure"
    d["no_fusion1"] = d["no_fusion1"] or train_cfg.no_fusion1
    d["no_lcpe"] = d["no_lcpe"] or train_cfg.no_lcpe
    return GmfConfig(**d)


def scene_loss_and_grads(params: GmfParams, scene) -> tuple[float, dict[str, np.ndarray]]:
    tape = dc.Tape(np.float32)
    L = params.bind(tape)
    trace = forward_graph(tape, L, params.config, scene, scene.corrs)
    y = tape.const(np.asarray(scene.corrs.labels, dtype=np.float32)[:, None])
    loss = dc.bce_with_logits(trace.logits, y)
    g = dc.backward(tape, loss)
    return float(loss.value.item()), {k: g[n.id] for k, n in L.items()}


class Adam:
    def __init__(self, params: GmfParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params: GmfParams, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        b1, b2 = np.float32(c.beta1), np.float32(c.beta2)
        corr1 = np.float32(1 - c.beta1**self.t)
        corr2 = np.float32(1 - c.beta2**self.t)
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            m_hat = self.m[k] / corr1
            v_hat = self.v[k] / corr2
            params.arrays[k] = (params.arrays[k] - np.float32(c.lr) * m_hat / (np.sqrt(v_hat) + np.float32(c.eps))).astype(np.float32)


@dataclass
class TrainResult:
    params: GmfParams
    losses: list[float]


def train(
    dataset: Sequence,
    model_cfg: GmfConfig | None = None,
    train_cfg: TrainConfig | None = None,
    log: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Adam on mean BCE; scenes are visited in a seeded shuffled order and
    each step averages the gradients of ``batch_size`` scenes."""
    if len(dataset) == 0:
        raise ContractError("training set is empty")
    train_cfg = train_cfg or TrainConfig()
    cfg = model_config_for(model_cfg or GmfConfig(), train_cfg)
    params = init_params(cfg)
    opt = Adam(params, train_cfg)
    rng = make_rng(train_cfg.seed, _STREAM_SHUFFLE)
    losses = []
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            acc = None
            for i in batch:
                loss, g = scene_loss_and_grads(params, dataset[i])
                total += loss
                acc = g if acc is None else {k: acc[k] + g[k] for k in acc}
            opt.step(params, {k: v / np.float32(len(batch)) for k, v in acc.items()})
        losses.append(total / len(dataset))
        if log is not None:
            log(epoch, losses[-1])
    return TrainResult(params, losses)
