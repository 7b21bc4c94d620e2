"""Heatmap OOD detection end to end through the library API, at toy size.

Trains a small classifier on 8x8 colour patches, builds nearest-neighbour
heatmap targets for stripe images, fits the decoder and compares the
heatmap score with MSP and energy on checkerboard OOD images. Takes about
half a minute on one core.

At this size the decoder sees only 90 OOD targets and MSP can still win;
the default 16x16 experiment (``heatood all``) is where the heatmap score
pulls ahead.

    python3 demos/library_walkthrough.py
"""

import numpy as np

from heatood.classifier import ClassifierConfig, accuracy, extract_feature_bank, train_classifier
from heatood.data import SynthSpec, synth_dataset
from heatood.decoder import DecoderConfig, decoder_forward, decoder_inputs, train_decoder
from heatood.metrics import evaluate, format_table
from heatood.scoring import energy_scores, heatmap_scores, msp_scores
from heatood.targets import build_target_sets

SEED = 7

spec = SynthSpec(num_classes=3, image_size=8)
data = {split: synth_dataset(spec, SEED, split, count=n)
        for split, n in (("in_train", 450), ("in_test", 120), ("out_train", 90), ("out_test", 120))}

clf_cfg = ClassifierConfig(width=8, height=8, num_classes=3, conv_blocks=((8, 3, 2), (16, 3, 2)),
                           feature_dim=24, epochs=8, batch_size=30, seed=SEED)
clf = train_classifier(data["in_train"], clf_cfg)
print(f"classifier test accuracy {accuracy(clf, data['in_test']):.3f}")

# the bank and its per-dimension range come from the full training split
bank = extract_feature_bank(clf, data["in_train"])
targets = build_target_sets(clf, bank, data["in_train"], data["out_train"])
print(f"targets: {len(targets.h_in)} zero maps, {len(targets.h_out)} difference maps, "
      f"mean |h_out| {np.abs(targets.out_heatmaps).mean():.4f}")

dec_cfg = DecoderConfig(epochs=200, batch_size=60, proj_channels=16, block_channels=(16, 8, 8), seed=SEED)
decoder = train_decoder(targets, clf, bank, data["in_train"], data["out_train"], dec_cfg)
print(f"decoder loss {decoder.epoch_losses[0]:.4f} -> {decoder.epoch_losses[-1]:.4f}")

scores = {}
for split in ("in_test", "out_test"):
    x, logits, probs = decoder_inputs(clf, bank, data[split].images)
    scores[split] = {
        "heatmap": heatmap_scores(decoder_forward(decoder, x)),
        "msp": msp_scores(probs),
        "energy": energy_scores(logits),
    }

reports = [evaluate(scores["in_test"][m], scores["out_test"][m], m) for m in ("heatmap", "msp", "energy")]
print(format_table(reports))
