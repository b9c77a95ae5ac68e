"""Helpers that train and score a named synthetic scenario in one call."""
from __future__ import annotations

from dataclasses import replace
from typing import Optional

from .eums import EumsConfig, run_eums
from .evaluation import MiouReport, evaluate
from .synth import Scenario, make_scenario
from .trainer import TrainConfig, TrainResult, train


def scenario_config(scenario: Scenario, seed: int = 0, **overrides) -> TrainConfig:
    """Default config with the scenario's overrides, then the caller's."""
    return TrainConfig(**dict(scenario.train_overrides, seed=seed, **overrides))


def run_scenario(scenario: Scenario, seed: int = 0, **overrides):
    """Train on the scenario and evaluate on its validation scenes."""
    cfg = scenario_config(scenario, seed, **overrides)
    res = train(cfg, scenario.train, scenario.task)
    report = evaluate(res.params, res.net_cfg, [c for c, _ in scenario.val], scenario.task,
                      voxel_size=cfg.voxel_size)
    return res, report


def run_eums_scenario(scenario: Scenario, seed: int = 0, ecfg: Optional[EumsConfig] = None,
                      **overrides) -> MiouReport:
    cfg = scenario_config(scenario, seed, **overrides)
    if ecfg is None:
        ecfg = EumsConfig(pretrain_epochs=max(1, cfg.epochs // 2), finetune_epochs=cfg.epochs, seed=seed)
    out = run_eums(scenario.train, scenario.task, cfg, ecfg, [c for c, _ in scenario.val])
    return out.report
