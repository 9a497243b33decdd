"""
Building a two-speaker extraction set
=====================================

A toy corpus of harmonic voices stands in for read speech.  Each example
pairs a 3 s mixture at 8 kHz with the clean target and a 2 s enrollment
clip of the same speaker at 16 kHz.
"""

import tempfile
from pathlib import Path

import numpy as np

from tsextract import synthetic
from tsextract.audio import read_wav
from tsextract.dataset import build_example, log_mel_waveform, read_manifest, synth_dataset

work = Path(tempfile.mkdtemp(prefix="tsextract-demo-"))

# Five speakers, three utterances each, written as spkNNN/uttNNN.wav at 16 kHz.
voices = synthetic.write_corpus(work / "corpus", n_speakers=5, utts_per_speaker=3, seconds=6.0, seed=0)
for name, v in voices.items():
    print(f"{name}: f0 {v.f0:5.1f} Hz, tract scale {v.tract_scale:.2f}")

# Mix into a manifest.  The layout of every example depends only on (seed, index),
# so rerunning with more workers produces the same files.
synth_dataset(work / "corpus", work / "data", n_examples=6, rng_seed=1, workers=2)
records = read_manifest(work / "data" / "manifest.tsv")

for rec in records:
    ex = rec.load()
    print(f"{rec.example_id}: target {rec.target_id} vs {rec.interferer_id}, gain {rec.gain_db:+.2f} dB, "
          f"mixture {ex.mixture.samples.size} @ {ex.mixture.sample_rate} Hz, "
          f"reference {ex.reference.samples.size} @ {ex.reference.sample_rate} Hz")

# The reference comes from a different stretch of the target utterance than the mixture does.
utts = sorted((work / "corpus" / "spk000").glob("*.wav"))
other = sorted((work / "corpus" / "spk001").glob("*.wav"))
ex = build_example(read_wav(utts[0]), read_wav(other[0]), rng_seed=3, target_id="spk000", interferer_id="spk001")
print("target region", ex.target_region, "reference region", ex.reference_region, "(16 kHz samples)")

# What the speaker encoder sees: 40 log-mel bands, 25 ms windows every 10 ms.
mel = log_mel_waveform(ex.reference)
print("log-mel", mel.shape, "range", np.round([mel.min(), mel.max()], 2))
print("files in", work)
