"""Toy-scale comparison of head topologies, tap choices, landmark input and fusion levels.

Every seed generates its own synthetic dataset, trains each variant with the
same budget and scores utterance-level CCC on the validation split. Findings
are judged by the sign of the mean paired difference across seeds; a one-sided
paired t-test is reported alongside.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .data import SyntheticSpec, align_dataset, synthesize
from .fusion import FusionEnsemble, FusionError
from .trainer import TrainConfig, calibrate_ensemble, evaluate, train
from .zoo import HeadSpec, ModelGraph, toy_backbone

logger = logging.getLogger(__name__)

LOW_TAPS = ("pool1", "pool3", "fc")
HIGH_TAPS = ("conv6", "pool3", "fc")


@dataclass
class StudyConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    data: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(n_videos=24, landmark_noise=4.0))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-4, batch_size=8, epochs=8,
                                                                   eval_train=False))
    fusion_warmup_epochs: int = 1  # head-only epochs with members frozen
    fusion_epochs: int = 3
    rnn_units: int = 32
    fc_units: int = 64
    split: str = "validation"


# (comparison name, better variant, worse variant, score key)
FINDINGS = (
    ("multi-tap CNN-3RNN > single-tap CNN-RNN", "cnn-3rnn", "cnn-rnn", "mean", True),
    ("parallel 3RNN >= concatenated 1RNN", "cnn-3rnn", "cnn-1rnn", "mean", False),
    ("model fusion +RNN >= +FC", "fusion-rnn", "fusion-fc", "mean", False),
    ("model fusion +FC >= decision fusion", "fusion-fc", "fusion-decision", "mean", False),
    ("low-level tap raises arousal over high-only taps", "cnn-3rnn", "cnn-3rnn-high", "arousal", True),
    ("landmarks on > off", "cnn-3rnn", "cnn-3rnn-nolm", "mean", True),
)


def _copy(model: ModelGraph) -> ModelGraph:
    clone = ModelGraph.from_config(model.config())
    clone.load_state_dict(model.state_dict())
    return clone


def _scores(ev) -> dict:
    s = ev.raw
    return {"valence": s.ccc_v, "arousal": s.ccc_a, "mean": s.mean_ccc}


def run_seed(seed: int, cfg: StudyConfig) -> dict[str, dict]:
    """Train every variant on one seed's dataset; returns validation scores per variant."""
    ds = align_dataset(synthesize(replace(cfg.data, seed=seed)))
    bb = toy_backbone(ds.extent, ds.channels)
    tcfg = replace(cfg.train, seed=seed)
    head = dict(rnn_units=cfg.rnn_units, fc_units=cfg.fc_units)

    def build(topology, taps, use_landmarks=True):
        return ModelGraph(bb, HeadSpec(topology, **head), list(taps), tcfg.seq_len, seed, use_landmarks)

    variants = {
        "cnn-rnn": build("single-rnn", ["fc"]),
        "cnn-3rnn": build("parallel-krnn", LOW_TAPS),
        "cnn-1rnn": build("concat-1rnn", LOW_TAPS),
        "cnn-3rnn-high": build("parallel-krnn", HIGH_TAPS),
        "cnn-3rnn-nolm": build("parallel-krnn", LOW_TAPS, use_landmarks=False),
    }
    out = {}
    for name, model in variants.items():
        t0 = time.perf_counter()
        train(model, ds, tcfg)
        out[name] = _scores(evaluate(model, ds, cfg.split, mode="off"))
        logger.info("seed %d %-14s %s (%.1fs)", seed, name, out[name], time.perf_counter() - t0)

    members = [variants["cnn-1rnn"], variants["cnn-3rnn"]]
    decision = FusionEnsemble([_copy(m) for m in members], "none")
    calibrate_ensemble(decision, ds, cfg.split)
    try:
        out["fusion-decision"] = _scores(evaluate(decision, ds, cfg.split, mode="off"))
    except FusionError as exc:
        # every member anti-correlated on some dimension: no score, which fails the comparison
        logger.warning("seed %d decision fusion: %s", seed, exc)
        out["fusion-decision"] = {"valence": np.nan, "arousal": np.nan, "mean": np.nan}
    fcfg = replace(tcfg, epochs=cfg.fusion_epochs)
    for kind in ("rnn", "fc"):
        t0 = time.perf_counter()
        ens = FusionEnsemble([_copy(m) for m in members], kind, units=cfg.rnn_units if kind == "rnn" else cfg.fc_units,
                             seed=seed)
        if cfg.fusion_warmup_epochs:
            ens.freeze_members = True
            train(ens, ds, replace(tcfg, epochs=cfg.fusion_warmup_epochs))
            ens.freeze_members = False
        train(ens, ds, fcfg)
        out[f"fusion-{kind}"] = _scores(evaluate(ens, ds, cfg.split, mode="off"))
        logger.info("seed %d fusion-%-7s %s (%.1fs)", seed, kind, out[f"fusion-{kind}"], time.perf_counter() - t0)
    return out


@dataclass
class FindingResult:
    name: str
    differences: list[float]
    strict: bool
    p_value: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.differences))

    @property
    def passed(self) -> bool:
        return self.mean > 0 if self.strict else self.mean >= 0

    def line(self) -> str:
        op = ">" if self.strict else ">="
        return (f"{'PASS' if self.passed else 'FAIL'} {self.name}: mean diff {self.mean:+.4f} {op} 0 "
                f"over {len(self.differences)} seeds (one-sided paired t-test p={self.p_value:.3f})")


def judge(per_seed: list[dict[str, dict]]) -> list[FindingResult]:
    results = []
    for name, better, worse, key, strict in FINDINGS:
        a = np.array([r[better][key] for r in per_seed])
        b = np.array([r[worse][key] for r in per_seed])
        diff = a - b
        if len(diff) > 1 and np.std(diff) > 0:
            p = float(stats.ttest_rel(a, b, alternative="greater").pvalue)
        else:
            p = float("nan")
        results.append(FindingResult(name, diff.tolist(), strict, p))
    return results


def run_study(cfg: StudyConfig | None = None) -> tuple[list[dict], list[FindingResult]]:
    cfg = cfg or StudyConfig()
    per_seed = [run_seed(s, cfg) for s in cfg.seeds]
    return per_seed, judge(per_seed)
