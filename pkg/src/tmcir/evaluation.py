"""Exhaustive retrieval evaluation: candidate index, ranking, Recall@K,
subset recall, and the four ablation runners.

Ranking is brute force over the whole candidate set; candidate sets stay
small enough that exactness is cheap.  Subsets are the query's true target
plus its hardest distractors (candidates at minimal cell-difference from the
target), so subset recall mirrors the curated-subset protocol at toy scale.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import Tape
from .encoders import ModelSpec, encode_text, encode_visual, pooled_visual_batch
from .errors import EvaluationError, TmcirError
from .fusion import FusionConfig, compose_query, compose_query_no_fusion
from .training import (
    Checkpoint,
    TrainConfig,
    train_alignment,
    train_fusion,
    verify_store_shapes,
)
from .params import ParameterStore
from .world import AttributeGrid, Dataset

DEFAULT_KS = (1, 5, 10, 50)
DEFAULT_SUBSET_KS = (1, 2, 3)
DEFAULT_SUBSET_SIZE = 6

ABLATION_KINDS = ("threshold_sweep", "no_fusion", "pseudo_vs_real",
                  "pretrained_vs_finetuned")
SWEEP_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


@dataclass
class CandidateIndex:
    embeddings: np.ndarray               # (n, d), unit rows
    ids: list[int]                       # position -> candidate id
    key_to_id: dict[tuple, int]          # grid cells -> candidate id
    grids: list[AttributeGrid]


@dataclass
class EvalReport:
    config: dict
    seed: int
    recall_at: dict[int, float]
    subset_recall_at: dict[int, float]
    wall_ms: float

    def to_dict(self) -> dict:
        return {"config": self.config, "seed": self.seed,
                "recall": {str(k): v for k, v in sorted(self.recall_at.items())},
                "subset_recall": {str(k): v for k, v
                                  in sorted(self.subset_recall_at.items())},
                "wall_ms": self.wall_ms}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


def build_index(dataset: Dataset, store: ParameterStore,
                spec: ModelSpec) -> CandidateIndex:
    """Embed every candidate grid (deduplicated) as a pooled, unit-norm row."""
    verify_store_shapes(store, spec)
    grids: list[AttributeGrid] = []
    ids: list[int] = []
    key_to_id: dict[tuple, int] = {}
    for cid, grid in enumerate(dataset.candidates):
        if grid.cells in key_to_id:
            continue
        key_to_id[grid.cells] = cid
        ids.append(cid)
        grids.append(grid)
    tape = Tape()
    tracked = store.tracked(tape)
    emb = pooled_visual_batch(grids, tracked, spec).data.copy()
    return CandidateIndex(embeddings=emb, ids=ids, key_to_id=key_to_id, grids=grids)


def embed_query(reference: AttributeGrid, token_ids, store: ParameterStore,
                spec: ModelSpec, fusion_cfg: FusionConfig,
                use_fusion: bool = True) -> np.ndarray:
    tape = Tape()
    tracked = store.tracked(tape)
    projection = None
    if "projection.w" in store:
        projection = (tracked["projection.w"], tracked["projection.b"])
    V = encode_visual(reference, tracked, spec)
    T = encode_text(token_ids, tracked, spec)
    if use_fusion:
        q = compose_query(V, T, fusion_cfg, projection)
    else:
        q = compose_query_no_fusion(V, T, projection)
    return q.data[0].copy()


def rank_candidates(query_embedding: np.ndarray, index: CandidateIndex) -> list[int]:
    """Candidate ids by descending cosine; ties broken by ascending id."""
    sims = index.embeddings @ query_embedding
    order = np.argsort(-sims, kind="stable")   # ids are ascending per position
    return [index.ids[i] for i in order]


def recall_at_k(rankings: list[list[int]], truths: list[int], k: int) -> float:
    if k < 1:
        raise EvaluationError(f"K must be >= 1, got {k}")
    if len(rankings) != len(truths):
        raise EvaluationError("one truth per query required")
    hits = 0
    for qi, (ranking, truth) in enumerate(zip(rankings, truths)):
        if truth not in ranking:
            raise EvaluationError(f"query {qi}: truth {truth} missing from candidates")
        if truth in ranking[:k]:
            hits += 1
    return hits / len(rankings) if rankings else 0.0


def subset_recall_at_k(rankings: list[list[int]], subsets: list[set[int]],
                       truths: list[int], k: int) -> float:
    """Recall@K after restricting each ranking to the query's subset."""
    if k < 1:
        raise EvaluationError(f"K must be >= 1, got {k}")
    hits = 0
    for qi, (ranking, subset, truth) in enumerate(zip(rankings, subsets, truths)):
        if truth not in subset:
            raise EvaluationError(f"query {qi}: truth {truth} not in its subset")
        restricted = [cid for cid in ranking if cid in subset]
        if truth in restricted[:k]:
            hits += 1
    return hits / len(rankings) if rankings else 0.0


def _hardest_subset(truth_id: int, index: CandidateIndex, size: int,
                    rng: np.random.Generator) -> set[int]:
    """Truth plus its nearest distractors by cell-difference count."""
    truth = index.grids[index.ids.index(truth_id)]
    dists = []
    jitter = rng.random(len(index.ids))
    for pos, grid in enumerate(index.grids):
        cid = index.ids[pos]
        if cid == truth_id:
            continue
        diff = sum(1 for a, b in zip(truth.cells, grid.cells) if a != b)
        dists.append((diff, jitter[pos], cid))
    dists.sort()
    return {truth_id} | {cid for _, _, cid in dists[:size - 1]}


def evaluate(dataset: Dataset, store: ParameterStore, spec: ModelSpec,
             fusion_cfg: FusionConfig, *, use_fusion: bool = True,
             ks=DEFAULT_KS, subset_ks=DEFAULT_SUBSET_KS,
             subset_size: int = DEFAULT_SUBSET_SIZE, seed: int = 0,
             split: str = "test", config_echo: dict | None = None) -> EvalReport:
    """Rank every query of a split against the full candidate index."""
    t0 = time.perf_counter()
    index = build_index(dataset, store, spec)
    queries = dataset.split(split)
    rankings: list[list[int]] = []
    truths: list[int] = []
    subsets: list[set[int]] = []
    for s in queries:
        if s.target.cells not in index.key_to_id:
            raise EvaluationError(f"query {s.id}: target grid not in candidate set")
        truth_id = index.key_to_id[s.target.cells]
        q = embed_query(s.reference, s.token_ids, store, spec, fusion_cfg,
                        use_fusion=use_fusion)
        rankings.append(rank_candidates(q, index))
        truths.append(truth_id)
        subsets.append(_hardest_subset(truth_id, index, subset_size,
                                       np.random.default_rng([seed, s.id])))
    recall = {k: recall_at_k(rankings, truths, k) for k in ks}
    subset_recall = {k: subset_recall_at_k(rankings, subsets, truths, k)
                     for k in subset_ks}
    wall_ms = (time.perf_counter() - t0) * 1000.0
    echo = dict(config_echo or {})
    echo.setdefault("world", dataset.config.to_dict())
    echo.setdefault("fusion", {"threshold": fusion_cfg.threshold,
                               "epsilon": fusion_cfg.epsilon})
    echo.setdefault("use_fusion", use_fusion)
    echo.setdefault("split", split)
    echo.setdefault("subset_size", subset_size)
    return EvalReport(config=echo, seed=seed, recall_at=recall,
                      subset_recall_at=subset_recall, wall_ms=wall_ms)


# -- ablation runners --


@dataclass
class VariantResult:
    variant: str
    tau: float | None
    report: EvalReport | None
    error: str | None = None


@dataclass
class AblationSettings:
    spec: ModelSpec
    align: TrainConfig
    fuse: TrainConfig
    ks: tuple = DEFAULT_KS
    subset_ks: tuple = DEFAULT_SUBSET_KS
    subset_size: int = DEFAULT_SUBSET_SIZE
    eval_seed: int = 0


def _train_and_eval(dataset: Dataset, st: AblationSettings, *,
                    align_cfg: TrainConfig | None, fuse_cfg: TrainConfig,
                    variant: str, tau: float | None) -> VariantResult:
    init: Checkpoint | None = None
    if align_cfg is not None:
        init, _ = train_alignment(dataset, align_cfg, st.spec)
    ckpt, _ = train_fusion(dataset, fuse_cfg, st.spec, init=init)
    report = evaluate(dataset, ckpt.store, st.spec, fuse_cfg.fusion,
                      use_fusion=fuse_cfg.use_fusion, ks=st.ks,
                      subset_ks=st.subset_ks, subset_size=st.subset_size,
                      seed=st.eval_seed,
                      config_echo={"variant": variant, "train": fuse_cfg.to_dict()})
    return VariantResult(variant=variant, tau=tau, report=report)


def run_ablation(kind: str, dataset: Dataset, st: AblationSettings) -> list[VariantResult]:
    """Train and evaluate the variant set for one ablation; failures are
    isolated per variant."""
    if kind not in ABLATION_KINDS:
        raise EvaluationError(f"unknown ablation kind {kind!r}")
    plans: list[tuple[str, float | None, TrainConfig | None, TrainConfig]] = []
    if kind == "threshold_sweep":
        for tau in SWEEP_THRESHOLDS:
            fuse = TrainConfig(**{**_cfg_kw(st.fuse),
                                  "fusion": FusionConfig(threshold=tau,
                                                         epsilon=st.fuse.fusion.epsilon,
                                                         d=st.fuse.fusion.d)})
            plans.append((f"tau-{tau}", tau, st.align, fuse))
    elif kind == "no_fusion":
        plans.append(("full", st.fuse.fusion.threshold, st.align, st.fuse))
        no_fuse = TrainConfig(**{**_cfg_kw(st.fuse), "use_fusion": False})
        plans.append(("no_fusion", None, st.align, no_fuse))
    elif kind == "pseudo_vs_real":
        align_pseudo = TrainConfig(**{**_cfg_kw(st.align), "supervision": "pseudo"})
        align_real = TrainConfig(**{**_cfg_kw(st.align), "supervision": "real"})
        plans.append(("pseudo", st.fuse.fusion.threshold, align_pseudo, st.fuse))
        plans.append(("real", st.fuse.fusion.threshold, align_real, st.fuse))
    else:  # pretrained_vs_finetuned
        plans.append(("finetuned", st.fuse.fusion.threshold, st.align, st.fuse))
        plans.append(("from_scratch", st.fuse.fusion.threshold, None, st.fuse))

    results = []
    for variant, tau, align_cfg, fuse_cfg in plans:
        try:
            results.append(_train_and_eval(dataset, st, align_cfg=align_cfg,
                                           fuse_cfg=fuse_cfg, variant=variant,
                                           tau=tau))
        except TmcirError as exc:
            results.append(VariantResult(variant=variant, tau=tau, report=None,
                                         error=str(exc)))
    return results


def _cfg_kw(cfg: TrainConfig) -> dict:
    return {"batch_size": cfg.batch_size, "epochs": cfg.epochs,
            "base_lr": cfg.base_lr, "weight_decay": cfg.weight_decay,
            "seed": cfg.seed, "supervision": cfg.supervision,
            "train_encoders": cfg.train_encoders, "use_fusion": cfg.use_fusion,
            "loss": cfg.loss, "fusion": cfg.fusion}


CSV_COLUMNS = ["variant", "tau", "R@1", "R@5", "R@10", "R@50",
               "Rs@1", "Rs@2", "Rs@3"]


def write_ablation_csv(path, results: list[VariantResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in results:
            if r.report is None:
                writer.writerow([r.variant, "" if r.tau is None else r.tau]
                                + ["error"] * 7)
                continue
            row = [r.variant, "" if r.tau is None else r.tau]
            for k in (1, 5, 10, 50):
                row.append(r.report.recall_at.get(k, ""))
            for k in (1, 2, 3):
                row.append(r.report.subset_recall_at.get(k, ""))
            writer.writerow(row)
