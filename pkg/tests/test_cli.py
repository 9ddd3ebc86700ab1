import json
import subprocess
import sys

import pytest

from xlingtts.cli import main

SMALL = ["--set", "n_languages=3", "--set", "speakers_per_language=2", "--set", "phones_per_language=4",
         "--set", "n_mels=6", "--set", "max_utts_per_language=12", "--set", "imbalance_ratio=2",
         "--set", "min_phones=3", "--set", "max_phones=4", "--set", "min_duration=2", "--set", "max_duration=3"]


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("XLINGTTS_OUT", str(tmp_path))
    return tmp_path


def _hashes(d):
    return json.loads((d / "provenance.json").read_text())["outputs"]


def test_pipeline_end_to_end(out, capsys):
    assert main(["corpus", "--out", "corpus", "--seed", "3"] + SMALL) == 0
    assert {"manifest.tsv", "mels.bin", "corpus.cfg", "provenance.json"} <= {p.name for p in (out / "corpus").iterdir()}
    c = str(out / "corpus")
    assert main(["train", "--corpus", c, "--stage", "baseline", "--out", "base", "--steps", "3",
                 "--set", "batch_size=4"]) == 0
    assert main(["train", "--corpus", c, "--stage", "spk_classifier", "--out", "xv", "--steps", "3"]) == 0
    assert main(["train", "--corpus", c, "--stage", "joint", "--out", "joint", "--steps", "2",
                 "--model", str(out / "base" / "model.ckpt"), "--xvec", str(out / "xv" / "xvec.ckpt"),
                 "--set", "batch_size=4", "--set", "joint_period=1", "--set", "w_guide=0"]) == 0
    trace = [json.loads(line) for line in (out / "joint" / "trace.jsonl").read_text().splitlines()]
    assert [r["step"] for r in trace] == [1, 2]
    assert main(["extend", "--corpus", c, "--model", str(out / "joint" / "model.ckpt"),
                 "--xvec", str(out / "joint" / "xvec.ckpt"), "--lang", "1", "--out", "ext", "--steps", "2",
                 "--set", "batch_size=4"]) == 0
    assert main(["synth", "--model", str(out / "ext" / "model.ckpt"), "--speaker", "6", "--lang", "2",
                 "--phones", "9,10", "--max-frames", "5", "--out", "syn"]) == 0
    assert (out / "syn" / "synth.tsv").read_text().count("\n") == 2
    for name, model in (("eval_base", "base"), ("eval_ext", "ext")):
        assert main(["eval", "--corpus", c, "--model", str(out / model / "model.ckpt"), "--label", model,
                     "--scorer", str(out / "xv" / "xvec.ckpt"), "--utts", "1", "--max-frames", "12",
                     "--out", name]) == 0
    ext = json.loads((out / "eval_ext" / "report.json").read_text())
    assert 6 in {c["speaker"] for c in ext["cells"]}
    assert main(["eval", "--corpus", c, "--model", str(out / "joint" / "model.ckpt"), "--label", "joint",
                 "--scorer", str(out / "xv" / "xvec.ckpt"), "--utts", "1", "--max-frames", "12",
                 "--out", "eval_joint"]) == 0
    capsys.readouterr()
    assert main(["report", str(out / "eval_base" / "report.json"), str(out / "eval_joint" / "report.json"),
                 "--markdown", "--out", "cmp"]) == 0
    assert "| kind | lang | base | joint |" in capsys.readouterr().out
    # extended model was evaluated on a different plan (extra speaker)
    assert main(["report", str(out / "eval_base" / "report.json"), str(out / "eval_ext" / "report.json")]) == 1


def test_joint_without_xvec_is_prerequisite_error(out, capsys):
    main(["corpus", "--out", "c"] + SMALL)
    assert main(["train", "--corpus", str(out / "c"), "--stage", "baseline", "--out", "b", "--steps", "1"]) == 0
    code = main(["train", "--corpus", str(out / "c"), "--stage", "joint", "--out", "j",
                 "--model", str(out / "b" / "model.ckpt"), "--steps", "1"])
    assert code == 1 and "spk_classifier" in capsys.readouterr().err


def test_joint_with_untrained_xvec_history_rejected(out, capsys):
    main(["corpus", "--out", "c"] + SMALL)
    main(["train", "--corpus", str(out / "c"), "--stage", "spk_classifier", "--out", "x", "--steps", "1"])
    code = main(["train", "--corpus", str(out / "c"), "--stage", "joint", "--out", "j",
                 "--xvec", str(out / "x" / "xvec.ckpt"), "--steps", "1"])
    assert code == 1 and "TTS" in capsys.readouterr().err


def test_usage_errors_exit_1(out, capsys):
    assert main([]) == 1
    assert main(["train", "--stage", "nope", "--corpus", "x", "--out", "y"]) == 1
    assert main(["corpus", "--out", "c", "--set", "bogus=1"]) == 1
    assert main(["corpus", "--out", "c", "--set", "n_languages=1"]) == 1
    assert main(["eval", "--corpus", str(out / "missing"), "--model", "m", "--out", "e"]) == 1
    assert main(["--help"]) == 0


def test_reruns_are_hash_identical(out):
    for run in ("a", "b"):
        assert main(["corpus", "--out", f"{run}/c", "--seed", "5"] + SMALL) == 0
        c = str(out / run / "c")
        assert main(["train", "--corpus", c, "--stage", "mtl", "--out", f"{run}/m", "--steps", "3",
                     "--seed", "2", "--set", "batch_size=4"]) == 0
        assert main(["eval", "--corpus", c, "--model", str(out / run / "m" / "model.ckpt"), "--utts", "1",
                     "--max-frames", "10", "--out", f"{run}/e"]) == 0
    for sub in ("c", "m", "e"):
        assert _hashes(out / "a" / sub) == _hashes(out / "b" / sub)
    prov = json.loads((out / "a" / "m" / "provenance.json").read_text())
    assert prov["train_config"]["seed"] == 2 and "torch" in prov["versions"]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "xlingtts", "corpus", "--out", str(tmp_path / "c")] + SMALL,
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "utterances" in res.stdout
