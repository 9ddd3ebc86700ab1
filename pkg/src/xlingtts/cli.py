"""Command-line entry point: corpus, train, extend, synth, eval, report.

Relative output paths are resolved under ``$XLINGTTS_OUT`` when it is set.
Values given as flags override config files, which override built-in defaults.
Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import __version__
from . import checkpoint as ckpt
from .corpus import (CorpusConfig, CorpusError, build_corpus, load_corpus, new_speaker, parse_kv,
                     save_corpus)
from .evalharness import EvalPlan, SimilarityReport, compare_systems, eval_texts, run_eval
from .experiment import make_tts, make_xvec
from .trainer import STAGES, StageError, TrainConfig, extend_speaker, train_stage

log = logging.getLogger("xlingtts")

OUT_ENV = "XLINGTTS_OUT"
PROVENANCE = "provenance.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _out_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_provenance(out: Path, command: str, args: argparse.Namespace, extra: Dict) -> None:
    outputs = {p.name: _sha(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != PROVENANCE}
    record = {
        "command": command,
        "args": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "versions": {"xlingtts": __version__, "torch": torch.__version__, "numpy": np.__version__},
        "outputs": outputs,
        **extra,
    }
    (out / PROVENANCE).write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _overrides(pairs: Optional[List[str]]) -> str:
    return "\n".join(pairs or [])


def _train_config(args, **defaults) -> TrainConfig:
    text = Path(args.config).read_text() if getattr(args, "config", None) else ""
    text += "\n" + _overrides(args.set)
    kw = {**defaults, **parse_kv(text, TrainConfig)}
    if args.steps is not None:
        kw["steps"] = args.steps
    if args.seed is not None:
        kw["seed"] = args.seed
    return TrainConfig(**kw)


# ------------------------------------------------------------------ subcommands

def cmd_corpus(args) -> int:
    text = Path(args.config).read_text() if args.config else ""
    config = CorpusConfig(**parse_kv(text + "\n" + _overrides(args.set), CorpusConfig))
    corpus = build_corpus(config, args.seed)
    out = _out_dir(args.out)
    save_corpus(corpus, out)
    _write_provenance(out, "corpus", args, {"seed": args.seed, "fingerprint": corpus.fingerprint(),
                                            "language_counts": corpus.language_counts()})
    print(f"corpus: {len(corpus.utterances)} utterances, counts {corpus.language_counts()} -> {out}")
    return 0


DESK_TTS = dict(steps=1500, w_guide=1.0, decay_steps=600)
DESK_JOINT = dict(steps=400, w_guide=1.0, decay_start=0, decay_steps=600, lr=5e-4, cross_batch=16)


def cmd_train(args) -> int:
    corpus = load_corpus(args.corpus)
    train = corpus.by_split("train")
    out = _out_dir(args.out)
    stage = args.stage
    seed = args.seed if args.seed is not None else 0
    if stage == "spk_classifier":
        cfg = _train_config(args, steps=400)
        xvec = ckpt.load_xvec(args.xvec) if args.xvec else make_xvec(corpus, seed)
        report = train_stage(None, xvec, train, cfg, stage)
        ckpt.save_xvec(out / "xvec.ckpt", xvec, {"seed": cfg.seed})
    else:
        cfg = _train_config(args, **(DESK_JOINT if stage == "joint" else DESK_TTS))
        model = ckpt.load_tts(args.model) if args.model else make_tts(corpus, args.preset, seed)
        xvec = None
        if stage == "joint":
            if not args.xvec:
                raise StageError("joint stage needs --xvec pointing at a converged spk_classifier checkpoint")
            xvec = ckpt.load_xvec(args.xvec)
        report = train_stage(model, xvec, train, cfg, stage)
        ckpt.save_tts(out / "model.ckpt", model, {"seed": cfg.seed})
        if xvec is not None:
            ckpt.save_xvec(out / "xvec.ckpt", xvec, {"seed": cfg.seed})
    report.save(out / "trace.jsonl")
    _write_provenance(out, "train", args, {"train_config": asdict(cfg), "corpus": str(args.corpus)})
    last = report.records[-1] if report.records else {}
    print(f"train[{stage}]: {len(report.records)} steps, last total {last.get('total', float('nan')):.4f} -> {out}")
    return 0


def cmd_extend(args) -> int:
    corpus = load_corpus(args.corpus)
    model = ckpt.load_tts(args.model)
    xvec = ckpt.load_xvec(args.xvec) if args.xvec else None
    stage = args.stage
    if stage == "joint" and xvec is None:
        raise StageError("extending with the joint stage needs --xvec")
    cfg = _train_config(args, **{**DESK_JOINT, "steps": 300})
    spk, utts = new_speaker(corpus, args.lang, args.utts, args.new_seed)
    if spk.speaker_id != model.config.n_speakers:
        raise StageError(f"model has {model.config.n_speakers} speakers; new speaker id would be {spk.speaker_id}")
    report = extend_speaker(model, xvec, utts, corpus.by_split("train"), cfg, stage)
    out = _out_dir(args.out)
    ckpt.save_tts(out / "model.ckpt", model, {"new_speaker": {"id": spk.speaker_id, "lang": spk.native_lang,
                                                              "seed": args.new_seed, "utts": args.utts}})
    if xvec is not None:
        ckpt.save_xvec(out / "xvec.ckpt", xvec)
    report.save(out / "trace.jsonl")
    _write_provenance(out, "extend", args, {"train_config": asdict(cfg), "new_speaker": spk.speaker_id})
    print(f"extend[{stage}]: added speaker {spk.speaker_id} ({len(utts)} utts, lang {args.lang}) -> {out}")
    return 0


def cmd_synth(args) -> int:
    model = ckpt.load_tts(args.model)
    out = _out_dir(args.out)
    if args.phones:
        texts = [tuple(int(p) for p in args.phones.split(","))]
    else:
        if not args.corpus:
            raise UsageError("synth needs --phones or --corpus")
        texts = eval_texts(load_corpus(args.corpus), args.lang, args.n, args.seed or 0)
    results = model.infer_batch(texts, [args.speaker] * len(texts), [args.lang] * len(texts), args.max_frames)
    lines = []
    for i, (t, r) in enumerate(zip(texts, results)):
        name = f"s{args.speaker}_l{args.lang}_{i:03d}.npy"
        np.save(out / name, r.mel.numpy().astype(np.float32))
        lines.append(f"{name}\t{','.join(map(str, t))}\t{r.mel.shape[0]}\t{int(r.hit_max)}")
    (out / "synth.tsv").write_text("file\tphones\tn_frames\thit_max\n" + "\n".join(lines) + "\n")
    _write_provenance(out, "synth", args, {})
    print(f"synth: {len(results)} mels -> {out}")
    return 0


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus)
    model = ckpt.load_tts(args.model)
    scorer = ckpt.load_xvec(args.scorer) if args.scorer else None
    scorers = ("oracle", "xvector") if scorer is not None else ("oracle",)
    references, natives = {}, {}
    new = getattr(model, "meta", {}).get("new_speaker")
    if new:
        spk, utts = new_speaker(corpus, new["lang"], new["utts"], new["seed"])
        references[spk.speaker_id], natives[spk.speaker_id] = utts, spk.native_lang
    speakers = [s.speaker_id for s in corpus.speakers] + list(references)
    plan = EvalPlan.all_pairs(speakers, [l.lang_id for l in corpus.languages], utts_per_pair=args.utts,
                              scorers=scorers, seed=args.seed or 0, max_frames=args.max_frames)
    report = run_eval(model, corpus, plan, args.label, xvec_scorer=scorer, references=references, native=natives)
    out = _out_dir(args.out)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.tsv").write_text(report.to_tsv())
    tables = "".join(f"[{s}]\n{report.to_table(s)}\n" for s in scorers)
    (out / "report.txt").write_text(tables)
    _write_provenance(out, "eval", args, {"plan": asdict(plan)})
    print(tables, end="")
    return 0


def cmd_report(args) -> int:
    reports = [SimilarityReport.from_json(Path(p).read_text()) for p in args.reports]
    cmp = compare_systems(reports, scorer=args.scorer)
    text = cmp.to_text(markdown=args.markdown)
    if args.out:
        out = _out_dir(args.out)
        (out / ("comparison.md" if args.markdown else "comparison.txt")).write_text(text)
        (out / "comparison.tsv").write_text(cmp.to_tsv())
        _write_provenance(out, "report", args, {})
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xlingtts", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def train_opts(sp):
        sp.add_argument("--config", help="TrainConfig key=value file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a TrainConfig field")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("corpus", help="generate the synthetic corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="CorpusConfig key=value file")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_corpus)

    sp = sub.add_parser("train", help="run one training stage")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--stage", required=True, choices=STAGES)
    sp.add_argument("--out", required=True)
    sp.add_argument("--model", help="TTS checkpoint to continue from")
    sp.add_argument("--xvec", help="x-vector checkpoint (required for joint)")
    sp.add_argument("--preset", default="desk", choices=("desk", "full"))
    train_opts(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("extend", help="add an unseen speaker and refine the model")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--xvec")
    sp.add_argument("--stage", default="joint", choices=("baseline", "mtl", "joint"))
    sp.add_argument("--lang", type=int, default=0)
    sp.add_argument("--utts", type=int, default=1)
    sp.add_argument("--new-seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    train_opts(sp)
    sp.set_defaults(func=cmd_extend)

    sp = sub.add_parser("synth", help="synthesize mels for a speaker/language")
    sp.add_argument("--model", required=True)
    sp.add_argument("--speaker", type=int, required=True)
    sp.add_argument("--lang", type=int, required=True)
    sp.add_argument("--phones", help="comma-separated phone ids")
    sp.add_argument("--corpus", help="draw --n random texts from this corpus's language")
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--max-frames", type=int, default=120)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("eval", help="objective similarity evaluation")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--scorer", help="independent x-vector checkpoint")
    sp.add_argument("--label", default="system")
    sp.add_argument("--utts", type=int, default=20)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--max-frames", type=int, default=120)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="compare eval reports side by side")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--scorer", default="oracle")
    sp.add_argument("--markdown", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"xlingtts: error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, CorpusError, StageError, ckpt.CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"xlingtts: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"xlingtts: runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
