"""Objective speaker-similarity evaluation: intra- and cross-lingual cosine distances."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .corpus import Corpus, CorpusError, Utterance, oracle_for
from .spkembed import XVectorModel, cosine_distance

SCORERS = ("oracle", "xvector")


class OracleScorer:
    """Analytic speaker vector from the corpus generator's known factors."""

    name = "oracle"

    def __init__(self, corpus: Corpus):
        self.corpus = corpus

    def embed(self, mel, phones, lang_id) -> Optional[np.ndarray]:
        try:
            return oracle_for(self.corpus, np.asarray(mel), phones, lang_id)
        except CorpusError:
            return None


class XVectorScorer:
    """Independently trained x-vector embedder used as an external scorer."""

    name = "xvector"

    def __init__(self, xvec: XVectorModel):
        self.xvec = xvec.eval()

    @torch.no_grad()
    def embed(self, mel, phones=None, lang_id=None) -> Optional[np.ndarray]:
        mel = torch.as_tensor(np.asarray(mel), dtype=next(self.xvec.parameters()).dtype)
        if mel.shape[0] < self.xvec.min_frames:
            return None
        return self.xvec.embed(mel).numpy().astype(np.float64)


def score_pair(reference_embeddings: Sequence[np.ndarray], synthesized: Optional[np.ndarray]) -> Optional[float]:
    """Cosine distance between the mean reference embedding and one synthesized embedding.

    None marks a missing score (synthesis too short for the scorer).
    """
    if synthesized is None:
        return None
    ref = np.mean(np.asarray(reference_embeddings, dtype=np.float64), axis=0)
    return cosine_distance(ref, synthesized)


@dataclass
class EvalPlan:
    pairs: List[Tuple[int, int]]
    utts_per_pair: int = 20
    scorers: Tuple[str, ...] = ("oracle",)
    seed: int = 0
    max_frames: int = 120

    def __post_init__(self):
        if self.utts_per_pair < 1:
            raise ValueError("utts_per_pair must be >= 1")
        bad = [s for s in self.scorers if s not in SCORERS]
        if bad:
            raise ValueError(f"unknown scorers {bad}; choose from {SCORERS}")
        self.pairs = [tuple(int(x) for x in p) for p in self.pairs]
        self.scorers = tuple(self.scorers)

    @classmethod
    def all_pairs(cls, speakers: Sequence[int], languages: Sequence[int], **kw) -> "EvalPlan":
        return cls([(s, l) for s in speakers for l in languages], **kw)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]

    def validate(self, corpus: Corpus, extra_speakers: Sequence[int] = ()) -> None:
        langs = {l.lang_id for l in corpus.languages}
        known = {s.speaker_id for s in corpus.speakers} | set(extra_speakers)
        for s, l in self.pairs:
            if l not in langs:
                raise ValueError(f"plan targets unknown language {l}")
            if s not in known:
                raise ValueError(f"plan targets unknown speaker {s}")


def eval_texts(corpus: Corpus, lang_id: int, n: int, seed: int) -> List[Tuple[int, ...]]:
    """Fresh random phone sequences for ``lang_id`` (same for every speaker)."""
    cfg = corpus.config
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(21, lang_id)))
    phones = corpus.languages[lang_id].phone_ids
    return [tuple(int(p) for p in rng.choice(phones, size=int(rng.integers(cfg.min_phones, cfg.max_phones + 1))))
            for _ in range(n)]


@dataclass
class SimilarityReport:
    system: str
    plan_id: str
    seed: int
    # one row per (scorer, speaker, lang)
    cells: List[Dict] = field(default_factory=list)

    def cell_values(self, scorer: str = "oracle", kind: Optional[str] = None,
                    speakers: Optional[Sequence[int]] = None) -> List[float]:
        return [c["distance"] for c in self.cells
                if c["scorer"] == scorer and (kind is None or c["kind"] == kind)
                and (speakers is None or c["speaker"] in speakers) and c["distance"] is not None]

    def mean(self, kind: str, scorer: str = "oracle", speakers=None) -> float:
        vals = self.cell_values(scorer, kind, speakers)
        return float(np.mean(vals)) if vals else float("nan")

    def aggregates(self, scorer: str = "oracle") -> Dict[Tuple[str, int], float]:
        """Mean distance per (intra|cross, target language)."""
        groups: Dict[Tuple[str, int], List[float]] = {}
        for c in self.cells:
            if c["scorer"] == scorer and c["distance"] is not None:
                groups.setdefault((c["kind"], c["lang"]), []).append(c["distance"])
        return {k: float(np.mean(v)) for k, v in sorted(groups.items())}

    def to_tsv(self) -> str:
        cols = ["system", "scorer", "speaker", "native", "lang", "kind", "distance", "n", "missing", "hit_max"]
        lines = ["\t".join(cols)]
        for c in self.cells:
            d = "NA" if c["distance"] is None else f"{c['distance']:.6f}"
            lines.append("\t".join([self.system, c["scorer"], str(c["speaker"]), str(c["native"]), str(c["lang"]),
                                    c["kind"], d, str(c["n"]), str(c["missing"]), str(c["hit_max"])]))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SimilarityReport":
        return cls(**json.loads(text))

    def to_table(self, scorer: str = "oracle") -> str:
        return compare_systems([self], scorer=scorer).to_text()


def run_eval(model, corpus: Corpus, plan: EvalPlan, system: str = "system", *,
             xvec_scorer: Optional[XVectorModel] = None,
             references: Optional[Dict[int, Sequence[Utterance]]] = None,
             native: Optional[Dict[int, int]] = None) -> SimilarityReport:
    """Synthesize every plan entry and score it against the speaker's real recordings.

    ``references``/``native`` supply data for speakers that are not in the corpus
    (e.g. a newly added speaker).
    """
    plan.validate(corpus, extra_speakers=list(references or {}))
    scorers = []
    for name in plan.scorers:
        if name == "oracle":
            scorers.append(OracleScorer(corpus))
        else:
            if xvec_scorer is None:
                raise ValueError("plan asks for the x-vector scorer but none was given")
            scorers.append(XVectorScorer(xvec_scorer))
    refs: Dict[int, List[Utterance]] = {}
    natives = {s.speaker_id: s.native_lang for s in corpus.speakers}
    natives.update(native or {})
    for u in corpus.utterances:
        refs.setdefault(u.speaker_id, []).append(u)
    refs.update({k: list(v) for k, v in (references or {}).items()})

    model.eval()
    report = SimilarityReport(system, plan.fingerprint(), plan.seed)
    ref_cache: Dict[Tuple[str, int], List[np.ndarray]] = {}
    for spk, lang in plan.pairs:
        texts = eval_texts(corpus, lang, plan.utts_per_pair, plan.seed)
        results = model.infer_batch(texts, [spk] * len(texts), [lang] * len(texts), plan.max_frames)
        for sc in scorers:
            key = (sc.name, spk)
            if key not in ref_cache:
                embs = [sc.embed(u.mel, u.phones, u.lang_id) for u in refs[spk]]
                ref_cache[key] = [e for e in embs if e is not None]
            dists = [score_pair(ref_cache[key], sc.embed(r.mel.numpy(), t, lang)) for t, r in zip(texts, results)]
            ok = [d for d in dists if d is not None]
            report.cells.append({
                "scorer": sc.name, "speaker": spk, "native": natives[spk], "lang": lang,
                "kind": "intra" if natives[spk] == lang else "cross",
                "distance": float(np.mean(ok)) if ok else None,
                "n": len(ok), "missing": len(dists) - len(ok),
                "hit_max": sum(r.hit_max for r in results),
            })
    return report


@dataclass
class Comparison:
    systems: List[str]
    rows: List[Tuple[str, int]]
    values: Dict[Tuple[str, int], List[float]]
    scorer: str

    def deltas(self) -> Dict[Tuple[str, int], List[float]]:
        """Per-cell difference from the first system."""
        return {r: [v - vals[0] for v in vals] for r, vals in self.values.items()}

    def best(self) -> Dict[Tuple[str, int], int]:
        return {r: int(np.nanargmin(vals)) for r, vals in self.values.items()}

    def to_text(self, markdown: bool = False) -> str:
        best = self.best()
        head = ["kind", "lang"] + self.systems
        body = []
        for r in self.rows:
            cells = [f"{v:.3f}" + ("*" if i == best[r] and len(self.systems) > 1 else "")
                     for i, v in enumerate(self.values[r])]
            body.append([r[0], str(r[1])] + cells)
        if markdown:
            out = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
            out += ["| " + " | ".join(f"**{c[:-1]}**" if c.endswith("*") else c for c in b) + " |"
                    for b in body]
            return "\n".join(out) + "\n"
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        fmt = lambda row: "  ".join(x.rjust(w) for x, w in zip(row, widths))  # noqa: E731
        return "\n".join([fmt(head)] + [fmt(b) for b in body]) + "\n"

    def to_tsv(self) -> str:
        lines = ["\t".join(["kind", "lang"] + self.systems + [f"delta_{s}" for s in self.systems[1:]])]
        deltas = self.deltas()
        for r in self.rows:
            vals = [f"{v:.6f}" for v in self.values[r]] + [f"{d:.6f}" for d in deltas[r][1:]]
            lines.append("\t".join([r[0], str(r[1])] + vals))
        return "\n".join(lines) + "\n"


def compare_systems(reports: Sequence[SimilarityReport], scorer: str = "oracle") -> Comparison:
    if not reports:
        raise ValueError("nothing to compare")
    plans = {r.plan_id for r in reports}
    if len(plans) > 1:
        raise ValueError(f"reports come from different eval plans: {sorted(plans)}")
    aggs = [r.aggregates(scorer) for r in reports]
    rows = sorted(set().union(*aggs), key=lambda k: (k[0] != "intra", k[1]))
    values = {k: [a.get(k, float("nan")) for a in aggs] for k in rows}
    return Comparison([r.system for r in reports], rows, values, scorer)
