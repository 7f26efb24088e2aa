"""Run configuration: flat JSON with nested sections, strict key checking.

Sections: ``world``, ``align``, ``fuse``, ``fusion``, ``loss``, ``eval``,
plus two named seeds (``data_seed``, ``train_seed``).  Unknown keys are
errors so sweep-script typos fail loudly.  The resolved config is echoed
verbatim into every output artifact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .encoders import ModelSpec
from .errors import ConfigError
from .evaluation import DEFAULT_KS, DEFAULT_SUBSET_KS, DEFAULT_SUBSET_SIZE
from .fusion import FusionConfig
from .losses import DEFAULT_TEMPERATURE, LossConfig
from .training import TrainConfig
from .world import Vocabulary, WorldConfig

_TOP_KEYS = {"world", "align", "fuse", "fusion", "loss", "eval",
             "data_seed", "train_seed"}
_WORLD_KEYS = {"height", "width", "n_shapes", "n_colors", "n_triplets",
               "n_candidates", "p_noise"}
_STAGE_KEYS = {"batch_size", "epochs", "base_lr", "weight_decay",
               "supervision", "train_encoders", "use_fusion"}
_FUSION_KEYS = {"threshold", "epsilon", "d"}
_LOSS_KEYS = {"temperature"}
_EVAL_KEYS = {"ks", "subset_ks", "subset_size"}

# Desk-scale defaults; production-scale rates (1e-5 / 2e-5) undertrain
# models this small but remain reachable through the config file.
DEFAULT_ALIGN = {"batch_size": 32, "epochs": 6, "base_lr": 3e-3,
                 "weight_decay": 0.05}
DEFAULT_FUSE = {"batch_size": 32, "epochs": 300, "base_lr": 1e-3,
                "weight_decay": 0.05}


@dataclass
class EvalSettings:
    ks: tuple = DEFAULT_KS
    subset_ks: tuple = DEFAULT_SUBSET_KS
    subset_size: int = DEFAULT_SUBSET_SIZE


@dataclass
class RunConfig:
    world: WorldConfig
    align: TrainConfig
    fuse: TrainConfig
    fusion: FusionConfig
    loss: LossConfig
    eval: EvalSettings
    data_seed: int
    train_seed: int

    @property
    def spec(self) -> ModelSpec:
        vocab = Vocabulary(self.world)
        return ModelSpec(n_shapes=self.world.n_shapes,
                         n_colors=self.world.n_colors,
                         vocab_size=vocab.size, d=self.fusion.d)

    def to_dict(self) -> dict:
        return {"world": self.world.to_dict(),
                "align": self.align.to_dict(), "fuse": self.fuse.to_dict(),
                "fusion": {"threshold": self.fusion.threshold,
                           "epsilon": self.fusion.epsilon, "d": self.fusion.d},
                "loss": {"temperature": self.loss.temperature},
                "eval": {"ks": list(self.eval.ks),
                         "subset_ks": list(self.eval.subset_ks),
                         "subset_size": self.eval.subset_size},
                "data_seed": self.data_seed, "train_seed": self.train_seed}


def _check_keys(section: str, obj: dict, allowed: set[str]) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(
            f"config: unknown key(s) in {section!r}: {sorted(unknown)}")


def parse_run_config(raw: dict) -> RunConfig:
    _check_keys("<top level>", raw, _TOP_KEYS)
    world_raw = dict(raw.get("world", {}))
    _check_keys("world", world_raw, _WORLD_KEYS)
    try:
        world = WorldConfig(**world_raw)
    except TypeError as exc:
        raise ConfigError(f"config: bad world section: {exc}") from exc

    fusion_raw = dict(raw.get("fusion", {}))
    _check_keys("fusion", fusion_raw, _FUSION_KEYS)
    fusion = FusionConfig(**fusion_raw)

    loss_raw = dict(raw.get("loss", {}))
    _check_keys("loss", loss_raw, _LOSS_KEYS)
    temperature = float(loss_raw.get("temperature", DEFAULT_TEMPERATURE))

    train_seed = int(raw.get("train_seed", 0))
    data_seed = int(raw.get("data_seed", 0))

    def stage(section: str, defaults: dict, learnable_temp: bool) -> TrainConfig:
        stage_raw = dict(raw.get(section, {}))
        _check_keys(section, stage_raw, _STAGE_KEYS)
        merged = {**defaults, **stage_raw}
        return TrainConfig(seed=train_seed,
                           loss=LossConfig(temperature=temperature,
                                           learnable=learnable_temp),
                           fusion=fusion, **merged)

    align = stage("align", DEFAULT_ALIGN, learnable_temp=True)
    fuse = stage("fuse", DEFAULT_FUSE, learnable_temp=False)

    eval_raw = dict(raw.get("eval", {}))
    _check_keys("eval", eval_raw, _EVAL_KEYS)
    ev = EvalSettings(
        ks=tuple(int(k) for k in eval_raw.get("ks", DEFAULT_KS)),
        subset_ks=tuple(int(k) for k in eval_raw.get("subset_ks", DEFAULT_SUBSET_KS)),
        subset_size=int(eval_raw.get("subset_size", DEFAULT_SUBSET_SIZE)))
    if any(k < 1 for k in ev.ks + ev.subset_ks) or ev.subset_size < 1:
        raise ConfigError("config: eval Ks and subset_size must be >= 1")

    return RunConfig(world=world, align=align, fuse=fuse, fusion=fusion,
                     loss=LossConfig(temperature=temperature), eval=ev,
                     data_seed=data_seed, train_seed=train_seed)


def load_run_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config: {path}: top level must be an object")
    return parse_run_config(raw)
