"""
A short toy training run
========================

Trains the toy-scale system on eight mixtures for a handful of steps,
then evaluates and extracts with the saved checkpoint.  Raise ``STEPS``
to a couple of thousand to watch the model overfit (a few hours on one
CPU core).
"""

import json
import logging
import tempfile
from pathlib import Path

from tsextract import synthetic
from tsextract.dataset import read_manifest, synth_dataset
from tsextract.evaluation import evaluate, extract_file, render_table
from tsextract.trainer import TrainConfig, fit

STEPS = 20
logging.basicConfig(level=logging.INFO, format="%(message)s")

work = Path(tempfile.mkdtemp(prefix="tsextract-train-"))
synthetic.write_corpus(work / "corpus", n_speakers=6, utts_per_speaker=2, seconds=6.0, seed=1)
synth_dataset(work / "corpus", work / "data", n_examples=8, rng_seed=7)
manifest = work / "data" / "manifest.tsv"

# Full objective at toy scale: reconstruction, embedding distance, round trip and adversarial terms.
config = TrainConfig(toy=True, max_steps=STEPS, epochs=10**6, val_every=5, seed=0)
best = fit(config, manifest, manifest, work / "run")

for line in (work / "run" / "metrics.jsonl").read_text().splitlines()[-3:]:
    print(json.loads(line))

report = evaluate(manifest, best, out=work / "run" / "report.json")
print(render_table(report))

rec = read_manifest(manifest)[0]
est = extract_file(rec.mixture_path, rec.reference_path, best, work / "estimate.wav")
print(f"wrote {est.samples.size} samples to {work / 'estimate.wav'}")
