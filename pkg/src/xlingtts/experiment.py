"""End-to-end desk experiment: Baseline vs +MTL vs +MTL+Joint, plus new-speaker extension."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch

from .corpus import Corpus, CorpusConfig, build_corpus, new_speaker
from .evalharness import EvalPlan, SimilarityReport, run_eval
from .spkembed import XVectorConfig, XVectorModel
from .trainer import StageReport, TrainConfig, extend_speaker, train_stage
from .ttsmodel import TtsModel, model_preset

log = logging.getLogger(__name__)

SYSTEMS = ("Baseline", "+MTL", "+MTL+Joint")


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model_preset: str = "desk"
    tts: TrainConfig = field(default_factory=lambda: TrainConfig(steps=1500, w_guide=1.0, decay_steps=600))
    xvec: TrainConfig = field(default_factory=lambda: TrainConfig(steps=400))
    # one cross-lingual draw per batch item on joint steps; a single draw is too noisy at this scale
    joint: TrainConfig = field(default_factory=lambda: TrainConfig(steps=400, w_guide=1.0, decay_start=0,
                                                                   decay_steps=600, lr=5e-4, cross_batch=16))
    extend: TrainConfig = field(default_factory=lambda: TrainConfig(steps=300, w_guide=1.0, decay_start=0,
                                                                    decay_steps=600, lr=5e-4, cross_batch=16))
    eval_utts: int = 8
    eval_max_frames: int = 120
    # utterances for the unseen speaker in the extension experiment
    new_speaker_utts: int = 1
    new_speaker_lang: int = 0
    scorer_seed_offset: int = 1000


def make_tts(corpus: Corpus, preset: str, seed: int) -> TtsModel:
    torch.manual_seed(seed)
    cfg = model_preset(preset, n_phones=corpus.n_phones, n_speakers=len(corpus.speakers),
                       n_languages=len(corpus.languages), n_mels=corpus.config.n_mels)
    return TtsModel(cfg)


def make_xvec(corpus: Corpus, seed: int, n_speakers: Optional[int] = None) -> XVectorModel:
    torch.manual_seed(seed)
    return XVectorModel(XVectorConfig(n_mels=corpus.config.n_mels,
                                      n_speakers=n_speakers or len(corpus.speakers)))


@dataclass
class SeedResult:
    seed: int
    reports: Dict[str, SimilarityReport]
    stage_reports: Dict[str, StageReport]
    models: Dict[str, object]
    corpus: Corpus
    extension: Dict[str, SimilarityReport] = field(default_factory=dict)
    extension_before: Dict[str, SimilarityReport] = field(default_factory=dict)
    new_speaker_id: Optional[int] = None
    seconds: float = 0.0


def train_systems(cfg: ExperimentConfig, seed: int, corpus: Optional[Corpus] = None):
    corpus = corpus or build_corpus(cfg.corpus, seed)
    train = corpus.by_split("train")
    stages: Dict[str, StageReport] = {}

    baseline = make_tts(corpus, cfg.model_preset, seed)
    stages["baseline"] = train_stage(baseline, None, train, cfg.tts.replace(seed=seed), "baseline")

    mtl = make_tts(corpus, cfg.model_preset, seed)
    stages["mtl"] = train_stage(mtl, None, train, cfg.tts.replace(seed=seed), "mtl")

    xvec = make_xvec(corpus, seed)
    stages["spk_classifier"] = train_stage(None, xvec, train, cfg.xvec.replace(seed=seed), "spk_classifier")

    joint = copy.deepcopy(mtl)
    joint_xvec = copy.deepcopy(xvec)
    stages["joint"] = train_stage(joint, joint_xvec, train, cfg.joint.replace(seed=seed), "joint")

    scorer = make_xvec(corpus, seed + cfg.scorer_seed_offset)
    train_stage(None, scorer, train, cfg.xvec.replace(seed=seed + cfg.scorer_seed_offset), "spk_classifier")
    models = {"Baseline": baseline, "+MTL": mtl, "+MTL+Joint": joint, "xvec": xvec,
              "joint_xvec": joint_xvec, "scorer": scorer}
    return corpus, models, stages


def eval_plan(corpus: Corpus, cfg: ExperimentConfig, seed: int, scorers=("oracle", "xvector"),
              speakers=None) -> EvalPlan:
    speakers = speakers if speakers is not None else [s.speaker_id for s in corpus.speakers]
    return EvalPlan.all_pairs(speakers, [l.lang_id for l in corpus.languages], utts_per_pair=cfg.eval_utts,
                              scorers=scorers, seed=seed, max_frames=cfg.eval_max_frames)


def run_seed(cfg: ExperimentConfig, seed: int, extension: bool = True) -> SeedResult:
    t0 = time.perf_counter()
    corpus, models, stages = train_systems(cfg, seed)
    plan = eval_plan(corpus, cfg, seed)
    reports = {name: run_eval(models[name], corpus, plan, name, xvec_scorer=models["scorer"]) for name in SYSTEMS}
    result = SeedResult(seed, reports, stages, models, corpus)
    if extension:
        run_extension(cfg, result)
    result.seconds = time.perf_counter() - t0
    return result


def run_extension(cfg: ExperimentConfig, result: SeedResult) -> None:
    """Extend Baseline and +MTL+Joint with an unseen speaker holding very little data."""
    corpus, seed = result.corpus, result.seed
    spk, utts = new_speaker(corpus, cfg.new_speaker_lang, cfg.new_speaker_utts, seed)
    train = corpus.by_split("train")
    result.new_speaker_id = spk.speaker_id
    existing = [s.speaker_id for s in corpus.speakers]
    plan_old = eval_plan(corpus, cfg, seed, scorers=("oracle",), speakers=existing)
    plan_all = eval_plan(corpus, cfg, seed, scorers=("oracle",), speakers=existing + [spk.speaker_id])
    refs = {spk.speaker_id: utts}
    natives = {spk.speaker_id: spk.native_lang}
    ext_cfg = cfg.extend.replace(seed=seed)
    for name, stage in (("Baseline", "baseline"), ("+MTL+Joint", "joint")):
        model = copy.deepcopy(result.models[name])
        xvec = copy.deepcopy(result.models["joint_xvec"]) if stage == "joint" else None
        result.extension_before[name] = run_eval(result.models[name], corpus, plan_old, name)
        result.stage_reports[f"extend:{name}"] = extend_speaker(model, xvec, utts, train, ext_cfg, stage)
        result.extension[name] = run_eval(model, corpus, plan_all, name, references=refs, native=natives)
        result.models[f"ext:{name}"] = model
