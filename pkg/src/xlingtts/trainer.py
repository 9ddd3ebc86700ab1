"""Losses, samplers and staged training (baseline, mtl, spk_classifier, joint)."""

from __future__ import annotations

import contextlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Corpus, Utterance
from .spkembed import XVectorModel, l2_distance, pad_mels
from .ttsmodel import TtsModel, length_mask, shift_right

log = logging.getLogger(__name__)

STAGES = ("baseline", "mtl", "spk_classifier", "joint")
TTS_STAGES = ("baseline", "mtl")


class StageError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    steps: int = 1500
    lr: float = 1e-3
    min_lr: float = 1e-5
    # None: decay after 40% of the stage's steps
    decay_start: Optional[int] = None
    decay_factor: float = 0.5
    decay_steps: int = 300
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 1.0
    w_mel: float = 1.0
    w_stop: float = 1.0
    w_spk_mtl: float = 1.0
    w_lang_mtl: float = 1.0
    w_cross: float = 0.1
    w_xvec: float = 1.0
    # diagonal prior on decoder cross-attention; speeds up alignment learning
    w_guide: float = 0.0
    guide_sigma: float = 0.2
    stop_pos_weight: float = 5.0
    joint_period: int = 20
    # cross-lingual draws per joint step; 1 is the single (s, l, l') approximation
    cross_batch: int = 1
    # keep training the x-vector classifier on real mels during the joint stage
    joint_train_xvec: bool = True
    # probability of drawing the new speaker within its language during extension
    p_new: float = 0.5
    # optional plateau stop: evaluate dev loss every eval_every steps, stop after patience steps
    patience: int = 0
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.joint_period < 1:
            raise ValueError("joint_period must be >= 1")
        if self.min_lr <= 0 or self.lr < self.min_lr:
            raise ValueError("need 0 < min_lr <= lr")
        for k, v in asdict(self).items():
            if k.startswith("w_") and v < 0:
                raise ValueError(f"{k} must be >= 0")

    def decay_start_for(self) -> int:
        return self.decay_start if self.decay_start is not None else int(0.4 * self.steps)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Constant until the decay start, then exponential decay floored at min_lr."""
    start = cfg.decay_start_for()
    if step <= start:
        return cfg.lr
    return max(cfg.min_lr, cfg.lr * cfg.decay_factor ** ((step - start) / cfg.decay_steps))


# ------------------------------------------------------------------ losses

def tts_loss(mel_pred, stop_logits, target, mask=None, pos_weight: float = 1.0) -> Dict[str, torch.Tensor]:
    """Mel MSE over valid frames/bins and per-frame stop BCE (positive on the last frame)."""
    if mel_pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(mel_pred.shape)} vs {tuple(target.shape)}")
    if mel_pred.dim() == 2:
        mel_pred, stop_logits, target = mel_pred[None], stop_logits[None], target[None]
        mask = None if mask is None else mask[None]
    B, T, M = target.shape
    if mask is None:
        mask = torch.ones(B, T, dtype=torch.bool, device=target.device)
    w = mask.to(target.dtype)
    mel = (((mel_pred - target) ** 2) * w[..., None]).sum() / (w.sum() * M)
    lengths = mask.sum(1)
    stop_target = torch.zeros_like(w)
    stop_target[torch.arange(B), lengths - 1] = 1.0
    bce = F.binary_cross_entropy_with_logits(
        stop_logits, stop_target, reduction="none",
        pos_weight=torch.tensor(pos_weight, dtype=target.dtype, device=target.device))
    stop = (bce * w).sum() / w.sum()
    return {"mel": mel, "stop": stop}


def mtl_loss(speaker_logits, language_logits, speaker_ids, lang_ids) -> Dict[str, torch.Tensor]:
    return {"spk_ce": F.cross_entropy(speaker_logits, speaker_ids),
            "lang_ce": F.cross_entropy(language_logits, lang_ids)}


WEIGHTS = {"mel": "w_mel", "stop": "w_stop", "spk_ce": "w_spk_mtl", "lang_ce": "w_lang_mtl",
           "guide": "w_guide", "l_cross": "w_cross"}


def guided_attention_loss(maps, phone_mask, mel_mask, sigma: float = 0.2) -> torch.Tensor:
    """Penalty on attention mass far from the (frame/T, phone/N) diagonal."""
    N = phone_mask.sum(1).to(maps[0].dtype)
    T = mel_mask.sum(1).to(maps[0].dtype)
    n = torch.arange(phone_mask.shape[1], dtype=N.dtype)[None, None, :] / N[:, None, None]
    t = torch.arange(mel_mask.shape[1], dtype=N.dtype)[None, :, None] / T[:, None, None]
    penalty = 1.0 - torch.exp(-((n - t) ** 2) / (2 * sigma ** 2))
    valid = (mel_mask[:, :, None] & phone_mask[:, None, :]).to(N.dtype)
    total = 0.0
    for a in maps:
        total = total + (a.mean(1) * penalty * valid).sum() / valid.sum()
    return total / len(maps)


def total_loss(components: Dict[str, torch.Tensor], cfg: TrainConfig) -> torch.Tensor:
    """Sum of weighted components; every key must have a configured weight."""
    total = 0.0
    for name, value in components.items():
        total = total + getattr(cfg, WEIGHTS[name]) * value
    return total


# ------------------------------------------------------------------ sampling

class LanguageBalancedSampler:
    """Uniform language, then uniform utterance within it.

    With ``boost=(utts, p)``, draws landing in the boosted utterances' language
    come from ``utts`` with probability ``p``.
    """

    def __init__(self, utterances: Sequence[Utterance], seed: int,
                 boost: Optional[Tuple[Sequence[Utterance], float]] = None):
        groups: Dict[int, List[Utterance]] = {}
        for u in utterances:
            groups.setdefault(u.lang_id, []).append(u)
        if not groups:
            raise ValueError("no utterances to sample")
        self.langs = sorted(groups)
        self.groups = groups
        for lang in self.langs:
            if not groups[lang]:
                raise ValueError(f"language {lang} has no utterances")
        self.boost = None
        if boost is not None and boost[0]:
            utts, p = boost
            self.boost = (list(utts), float(p), utts[0].lang_id)
            if self.boost[2] not in groups:
                self.langs = sorted(self.langs + [self.boost[2]])
                groups[self.boost[2]] = []
        self.rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))

    def draw(self) -> Utterance:
        lang = self.langs[int(self.rng.integers(len(self.langs)))]
        if self.boost is not None and lang == self.boost[2]:
            if self.rng.random() < self.boost[1] or not self.groups[lang]:
                pool = self.boost[0]
                return pool[int(self.rng.integers(len(pool)))]
        pool = self.groups[lang]
        return pool[int(self.rng.integers(len(pool)))]

    def batch(self, n: int) -> List[Utterance]:
        return [self.draw() for _ in range(n)]

    def __iter__(self) -> Iterator[Utterance]:
        while True:
            yield self.draw()


def language_balanced_sampler(utterances, seed, boost=None) -> Iterator[Utterance]:
    return iter(LanguageBalancedSampler(utterances, seed, boost))


@dataclass
class Batch:
    phones: torch.Tensor
    phone_mask: torch.Tensor
    mel: torch.Tensor
    mel_mask: torch.Tensor
    lengths: torch.Tensor
    speakers: torch.Tensor
    langs: torch.Tensor

    @property
    def mel_inputs(self):
        return shift_right(self.mel)


def collate(utts: Sequence[Utterance], dtype=torch.float32) -> Batch:
    L = max(len(u.phones) for u in utts)
    phones = torch.zeros(len(utts), L, dtype=torch.long)
    for i, u in enumerate(utts):
        phones[i, : len(u.phones)] = torch.tensor(u.phones)
    mel, lengths = pad_mels([u.mel for u in utts])
    return Batch(phones, phones != 0, mel.to(dtype), length_mask(lengths, mel.shape[1]), lengths,
                 torch.tensor([u.speaker_id for u in utts]), torch.tensor([u.lang_id for u in utts]))


# ------------------------------------------------------------------ cross-lingual loss

@contextlib.contextmanager
def frozen(module: torch.nn.Module):
    """Disable gradients and dropout for ``module`` inside the block."""
    flags = [p.requires_grad for p in module.parameters()]
    was_training = module.training
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)
        module.train(was_training)


@dataclass
class CrossDraw:
    speaker_id: int
    lang_id: int          # native language l
    target_lang: int      # l'
    phones: Tuple[int, ...]
    mel: Optional[torch.Tensor] = None  # generated mel', frozen
    hit_max: bool = False


def phone_pool(utts: Sequence[Utterance]) -> Dict[int, List[Tuple[int, ...]]]:
    pool: Dict[int, List[Tuple[int, ...]]] = {}
    for u in utts:
        pool.setdefault(u.lang_id, []).append(u.phones)
    return pool


def draw_cross_target(lang_id: int, languages: Sequence[int], pool, rng) -> Tuple[int, Tuple[int, ...]]:
    """Pick l' uniformly from the other languages and a phone sequence of l'."""
    others = [l for l in languages if l != lang_id]
    if not others:
        raise ValueError("cross-lingual generation needs at least two languages")
    target = others[int(rng.integers(len(others)))]
    seqs = pool[target]
    return target, seqs[int(rng.integers(len(seqs)))]


def generate_cross_lingual(model: TtsModel, speakers: Sequence[int], langs: Sequence[int], pool,
                           rng, max_frames: Optional[int] = None) -> List[CrossDraw]:
    """Free-run the model (no gradient) for each speaker in a randomly chosen other language."""
    languages = sorted(pool)
    draws = []
    for s, l in zip(speakers, langs):
        target, phones = draw_cross_target(int(l), languages, pool, rng)
        draws.append(CrossDraw(int(s), int(l), target, tuple(phones)))
    was_training = model.training
    model.eval()
    results = model.infer_batch([d.phones for d in draws], [d.speaker_id for d in draws],
                                [d.target_lang for d in draws], max_frames)
    model.train(was_training)
    for d, r in zip(draws, results):
        d.mel, d.hit_max = r.mel.detach(), r.hit_max
    return draws


def cross_lingual_distance(xvec: XVectorModel, ref_mels, ref_lengths, syn_mels, syn_lengths) -> torch.Tensor:
    """Mean L2 distance between x-vectors of references and synthesized mels.

    Gradients reach ``syn_mels`` only; x-vector parameters are frozen.
    """
    with frozen(xvec):
        with torch.no_grad():
            ref = xvec.embed(ref_mels, ref_lengths)
        syn = xvec.embed(syn_mels, syn_lengths)
    return l2_distance(ref, syn).mean()


def cross_lingual_loss(model: TtsModel, xvec: XVectorModel, refs: Sequence[Utterance],
                       draws: Sequence[CrossDraw]) -> Optional[torch.Tensor]:
    """Teacher-forced pass on generated mels (with gradient) scored against real references.

    Draws shorter than the x-vector receptive field are skipped; returns None
    if nothing is left.
    """
    keep = [(r, d) for r, d in zip(refs, draws)
            if d.mel.shape[0] >= xvec.min_frames and r.n_frames >= xvec.min_frames]
    if len(keep) < len(draws):
        log.warning("skipping %d cross-lingual draws (generated or reference) shorter than %d frames",
                    len(draws) - len(keep), xvec.min_frames)
    if not keep:
        return None
    dtype = model.mel_out.weight.dtype
    refs, draws = zip(*keep)
    gen, gen_len = pad_mels([d.mel for d in draws])
    gen = gen.to(dtype)
    L = max(len(d.phones) for d in draws)
    phones = torch.zeros(len(draws), L, dtype=torch.long)
    for i, d in enumerate(draws):
        phones[i, : len(d.phones)] = torch.tensor(d.phones)
    out = model(phones, shift_right(gen), torch.tensor([d.speaker_id for d in draws]),
                torch.tensor([d.target_lang for d in draws]))
    ref_mel, ref_len = pad_mels([r.mel for r in refs])
    return cross_lingual_distance(xvec, ref_mel.to(dtype), ref_len, out["mel_pred"], gen_len)


# ------------------------------------------------------------------ stage driver

@dataclass
class StageReport:
    stage: str
    records: List[Dict] = field(default_factory=list)
    timings: List[float] = field(default_factory=list)
    stopped_early: bool = False
    checkpoint: Optional[str] = None

    def trace(self, key: str) -> List[Optional[float]]:
        return [r.get(key) for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_jsonl())
        return path

    @classmethod
    def load(cls, path, stage: str = "") -> "StageReport":
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line]
        return cls(stage or (records[0].get("stage", "") if records else ""), records)


def history(module) -> List[str]:
    if not hasattr(module, "stage_history"):
        module.stage_history = []
    return module.stage_history


def _check_prerequisites(stage, model, xvec):
    if stage not in STAGES:
        raise StageError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if stage in TTS_STAGES + ("joint",) and model is None:
        raise StageError(f"stage {stage} needs a TTS model")
    if stage in ("spk_classifier", "joint") and xvec is None:
        raise StageError(f"stage {stage} needs an x-vector model")
    if stage == "joint":
        if not any(s in history(model) for s in ("baseline", "mtl", "joint")):
            raise StageError("joint stage needs a converged TTS model (run baseline or mtl first)")
        if "spk_classifier" not in history(xvec):
            raise StageError("joint stage needs a converged x-vector model (run spk_classifier first)")


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)


def _stage_weights(stage: str, cfg: TrainConfig) -> TrainConfig:
    if stage == "baseline":
        return cfg.replace(w_spk_mtl=0.0, w_lang_mtl=0.0)
    return cfg


def tts_components(model: TtsModel, batch: Batch, cfg: TrainConfig, with_mtl: bool) -> Dict[str, torch.Tensor]:
    out = model(batch.phones, batch.mel_inputs, batch.speakers, batch.langs, batch.phone_mask)
    comps = tts_loss(out["mel_pred"], out["stop_logits"], batch.mel, batch.mel_mask, cfg.stop_pos_weight)
    if cfg.w_guide > 0:
        comps["guide"] = guided_attention_loss(model.cross_attention_maps(), batch.phone_mask,
                                               batch.mel_mask, cfg.guide_sigma)
    if with_mtl:
        comps.update(mtl_loss(out["spk_logits"], out["lang_logits"], batch.speakers, batch.langs))
    return comps


def xvec_step_loss(xvec: XVectorModel, batch: Batch) -> Optional[torch.Tensor]:
    """Speaker CE on the batch items long enough for the x-vector; None if there are none."""
    keep = batch.lengths >= xvec.min_frames
    if not bool(keep.any()):
        return None
    T = int(batch.lengths[keep].max())
    logits, _ = xvec(batch.mel[keep, :T], batch.lengths[keep])
    return F.cross_entropy(logits, batch.speakers[keep])


@torch.no_grad()
def dev_loss(model, xvec, stage, utts, cfg) -> float:
    if not utts:
        return float("nan")
    mods = [m for m in (model, xvec) if m is not None]
    modes = [m.training for m in mods]
    for m in mods:
        m.eval()
    try:
        batch = collate(utts, _dtype(model if stage != "spk_classifier" else xvec))
        if stage == "spk_classifier":
            loss = xvec_step_loss(xvec, batch)
            return float("nan") if loss is None else float(loss)
        comps = tts_components(model, batch, cfg, with_mtl=False)
        return float(comps["mel"])
    finally:
        for m, t in zip(mods, modes):
            m.train(t)


def _dtype(module) -> torch.dtype:
    return next(module.parameters()).dtype


def train_stage(model: Optional[TtsModel], xvec: Optional[XVectorModel], utterances: Sequence[Utterance],
                cfg: TrainConfig, stage: str, *, dev: Sequence[Utterance] = (),
                boost: Optional[Tuple[Sequence[Utterance], float]] = None,
                cross_focus: Optional[set] = None, max_gen_frames: Optional[int] = None) -> StageReport:
    """Run one training stage in place and return its per-step report.

    ``cross_focus``: speaker ids preferred as cross-lingual references (used
    when extending to a new speaker).
    """
    _check_prerequisites(stage, model, xvec)
    cfg = _stage_weights(stage, cfg)
    torch.manual_seed(cfg.seed)
    sampler = LanguageBalancedSampler(utterances, cfg.seed, boost)
    cross_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(12,)))
    pool = phone_pool(utterances)
    if max_gen_frames is None:
        max_gen_frames = 2 * max(u.n_frames for u in utterances)

    train_tts = stage != "spk_classifier"
    train_xvec = stage == "spk_classifier" or (stage == "joint" and cfg.joint_train_xvec)
    opt = _adam(model.parameters(), cfg) if train_tts else None
    xopt = _adam(xvec.parameters(), cfg) if train_xvec else None
    with_mtl = stage in ("mtl", "joint") and (cfg.w_spk_mtl > 0 or cfg.w_lang_mtl > 0)
    dtype = _dtype(model if train_tts else xvec)

    report = StageReport(stage)
    best, since_best = float("inf"), 0
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        lr = learning_rate(cfg, step)
        batch_utts = sampler.batch(cfg.batch_size)
        batch = collate(batch_utts, dtype)
        rec: Dict = {"step": step, "lr": lr}

        if train_tts:
            model.train()
            opt.zero_grad()
            comps = tts_components(model, batch, cfg, with_mtl)
            if stage == "joint" and step % cfg.joint_period == 0:
                refs = _cross_refs(batch_utts, cfg.cross_batch, cross_focus)
                draws = generate_cross_lingual(model, [u.speaker_id for u in refs], [u.lang_id for u in refs],
                                               pool, cross_rng, max_gen_frames)
                lc = cross_lingual_loss(model, xvec, refs, draws)
                if lc is not None:
                    comps["l_cross"] = lc
                    rec["l_prime"] = [d.target_lang for d in draws]
            loss = total_loss(comps, cfg)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.step()
            rec.update({k: float(v.detach()) for k, v in comps.items()})
            rec["total"] = float(loss.detach())

        if train_xvec:
            xvec.train()
            xopt.zero_grad()
            xl = xvec_step_loss(xvec, batch)
            if xl is not None:
                (cfg.w_xvec * xl).backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(xvec.parameters(), cfg.grad_clip)
                for g in xopt.param_groups:
                    g["lr"] = lr
                xopt.step()
                rec["xvec_ce"] = float(xl.detach())
                if not train_tts:
                    rec["total"] = float(xl.detach())

        report.records.append(rec)
        report.timings.append(time.perf_counter() - t0)

        if cfg.patience and dev and step % cfg.eval_every == 0:
            val = dev_loss(model, xvec, stage, dev, cfg)
            rec["dev"] = val
            if val < best - 1e-6:
                best, since_best = val, 0
            else:
                since_best += cfg.eval_every
                if since_best >= cfg.patience:
                    report.stopped_early = True
                    break

    for m in ((model,) if train_tts else ()) + ((xvec,) if train_xvec else ()):
        history(m).append(stage)
        m.eval()
    return report


def _cross_refs(batch_utts, n, focus):
    utts = list(batch_utts)
    if focus:
        utts.sort(key=lambda u: u.speaker_id not in focus)
    return utts[:n]


def extend_speaker(model: TtsModel, xvec: Optional[XVectorModel], new_utts: Sequence[Utterance],
                   utterances: Sequence[Utterance], cfg: TrainConfig, stage: str = "joint") -> StageReport:
    """Add an unseen speaker and refine the whole model on existing + new data.

    ``new_utts`` must all belong to one speaker and one language, and carry the
    id the new table row will get (``model.config.n_speakers``).
    """
    if not new_utts:
        raise ValueError("new speaker needs at least one utterance")
    spk = {u.speaker_id for u in new_utts}
    langs = {u.lang_id for u in new_utts}
    if len(spk) != 1 or len(langs) != 1:
        raise ValueError("new speaker data must come from exactly one speaker in one language")
    sid = spk.pop()
    if sid < model.config.n_speakers:
        raise ValueError(f"speaker id {sid} already exists in the model")
    if sid != model.config.n_speakers:
        raise ValueError(f"new speaker id must be {model.config.n_speakers}, got {sid}")
    model.add_speaker()
    if xvec is not None:
        xvec.add_speaker()
    if stage == "joint" and xvec is not None:
        # refine the x-vector classifier on the new row alongside the TTS model
        cfg = cfg.replace(joint_train_xvec=True)
    report = train_stage(model, xvec, list(utterances), cfg, stage,
                         boost=(list(new_utts), cfg.p_new), cross_focus={sid})
    report.stage = f"extend:{stage}"
    return report
