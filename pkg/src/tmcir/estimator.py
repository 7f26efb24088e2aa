"""Scikit-learn style facade over the two-stage pipeline.

``ComposedRetriever`` exposes the whole train/retrieve cycle through the
familiar ``fit`` / ``predict`` / ``score`` surface (with ``get_params`` /
``set_params`` from ``BaseEstimator``) so the model composes with grid
searches and pipelines operating on triplet datasets.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .encoders import ModelSpec
from .errors import ConfigError
from .evaluation import build_index, embed_query, rank_candidates
from .fusion import FusionConfig
from .losses import DEFAULT_TEMPERATURE, LossConfig
from .training import TrainConfig, train_alignment, train_fusion
from .world import Dataset, TripletSample, Vocabulary


class ComposedRetriever(BaseEstimator):
    """Retrieves edited grids from (reference grid, instruction) queries.

    ``fit`` runs stage-1 alignment (unless ``skip_alignment``) followed by
    stage-2 fusion training on the dataset's train split; ``predict`` returns
    the top-ranked candidate id per query sample.
    """

    def __init__(self, d=32, threshold=0.7, epsilon=1e-8,
                 temperature=DEFAULT_TEMPERATURE,
                 align_epochs=6, fuse_epochs=300, batch_size=32,
                 align_lr=3e-3, fuse_lr=1e-3, weight_decay=0.05,
                 supervision="pseudo", use_fusion=True, skip_alignment=False,
                 random_state=0):
        self.d = d
        self.threshold = threshold
        self.epsilon = epsilon
        self.temperature = temperature
        self.align_epochs = align_epochs
        self.fuse_epochs = fuse_epochs
        self.batch_size = batch_size
        self.align_lr = align_lr
        self.fuse_lr = fuse_lr
        self.weight_decay = weight_decay
        self.supervision = supervision
        self.use_fusion = use_fusion
        self.skip_alignment = skip_alignment
        self.random_state = random_state

    def _configs(self) -> tuple[FusionConfig, TrainConfig, TrainConfig]:
        fusion = FusionConfig(threshold=self.threshold, epsilon=self.epsilon,
                              d=self.d)
        align = TrainConfig(batch_size=self.batch_size, epochs=self.align_epochs,
                            base_lr=self.align_lr, weight_decay=self.weight_decay,
                            seed=self.random_state, supervision=self.supervision,
                            loss=LossConfig(temperature=self.temperature,
                                            learnable=True),
                            fusion=fusion)
        fuse = TrainConfig(batch_size=self.batch_size, epochs=self.fuse_epochs,
                           base_lr=self.fuse_lr, weight_decay=self.weight_decay,
                           seed=self.random_state, use_fusion=self.use_fusion,
                           loss=LossConfig(temperature=self.temperature),
                           fusion=fusion)
        return fusion, align, fuse

    def fit(self, dataset: Dataset, y=None):
        fusion, align_cfg, fuse_cfg = self._configs()
        vocab = Vocabulary(dataset.config)
        spec = ModelSpec(n_shapes=dataset.config.n_shapes,
                         n_colors=dataset.config.n_colors,
                         vocab_size=vocab.size, d=self.d)
        init = None
        if not self.skip_alignment:
            init, _ = train_alignment(dataset, align_cfg, spec)
        ckpt, log = train_fusion(dataset, fuse_cfg, spec, init=init)
        self.spec_ = spec
        self.fusion_ = fusion
        self.store_ = ckpt.store
        self.index_ = build_index(dataset, ckpt.store, spec)
        self.train_loss_ = log[-1].loss if log else float("nan")
        return self

    def _check_fitted(self):
        if not hasattr(self, "store_"):
            raise ConfigError("estimator is not fitted; call fit first")

    def rank(self, sample: TripletSample) -> list[int]:
        """All candidate ids ordered best-first for one query."""
        self._check_fitted()
        q = embed_query(sample.reference, sample.token_ids, self.store_,
                        self.spec_, self.fusion_, use_fusion=self.use_fusion)
        return rank_candidates(q, self.index_)

    def predict(self, samples) -> np.ndarray:
        """Top-1 candidate id per query sample."""
        return np.array([self.rank(s)[0] for s in samples])

    def score(self, samples, y=None) -> float:
        """Recall@1 over the given query samples."""
        self._check_fitted()
        hits = 0
        for s in samples:
            truth = self.index_.key_to_id.get(s.target.cells)
            if truth is None:
                raise ConfigError(f"query {s.id}: target not among fitted candidates")
            hits += int(self.rank(s)[0] == truth)
        return hits / len(samples) if len(samples) else 0.0
