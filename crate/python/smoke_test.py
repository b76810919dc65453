"""Smoke test for the Python bindings.

Build the module first, either with `maturin develop -m crates/python/Cargo.toml`
or with `cargo build -p lowres-tts-python --release --features extension-module`
(this script then loads the shared library from target/release).
"""

import importlib.util
import json
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        import lowres_tts_py

        return lowres_tts_py
    except ImportError:
        pass
    built = ROOT / "target" / "release" / "liblowres_tts_py.so"
    if not built.exists():
        sys.exit(f"module not installed and {built} not found; build it first")
    dest = Path(tempfile.mkdtemp()) / "lowres_tts_py.so"
    shutil.copy(built, dest)
    spec = importlib.util.spec_from_file_location("lowres_tts_py", dest)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    lt = load_module()
    work = Path(tempfile.mkdtemp())

    assert lt.syllable_to_letters("zhong1") == ["z", "h", "o", "n", "g", "<t1>"]

    n = lt.gen_toycorpus(str(work / "corpus"), n_utts=4, seed=1, shdia_fraction=0.5)
    assert n == 4
    manifest = work / "corpus" / "manifest.jsonl"
    vocab = lt.Vocabulary.from_manifests([str(manifest)])
    first = json.loads(manifest.read_text().splitlines()[0])
    syllables = first["syllables"].split()
    ids = vocab.encode(syllables, first["lang"])
    assert vocab.decode(ids, first["lang"]) == syllables
    assert vocab.tokens()[0].endswith("PAD")

    wav = next((work / "corpus").rglob("*.wav"))
    audio = lt.load_wav(str(wav))
    mel = lt.mel_spectrogram(audio)
    assert len(mel[0]) == 80
    assert lt.mcd(mel, mel) == 0.0

    scores = lt.alignment_scores([[1.0, 0.0], [0.0, 1.0]])
    assert scores == (1.0, 1.0)

    total = sum(math.exp(lt.mol_log_prob(-1 + 2 * k / 65535, [0.0], [0.1], [-3.0])) for k in range(0, lt.GRID_POINTS))
    assert abs(total - 1.0) < 1e-6, total

    voc = lt.WaveNet(seed=3, tiny=True)
    assert voc.receptive_field == 9
    out = voc.generate(mel[:2], seed=5)
    assert len(out) == 400 and all(-1.0 <= x <= 1.0 for x in out)
    assert out == voc.generate(mel[:2], seed=5)

    wd = work / "cli"
    code = lt.run_cli(["--workdir", str(wd), "prep", "--manifest", str(manifest)])
    assert code == 0 and (wd / "prep" / "manifest.jsonl").exists()
    assert lt.run_cli(["no-such-command"]) == 1

    try:
        lt.syllable_to_letters("BAD")
    except ValueError:
        pass
    else:
        raise AssertionError("malformed syllable accepted")

    print("python smoke test: ok")


if __name__ == "__main__":
    os.environ.setdefault("RUST_LOG", "warn")
    main()
