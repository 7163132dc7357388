"""
Attribution map of a held-out painting
======================================

Fit per-artist height densities on two paintings of each artist, then tint
every patch of the third with the winning artist's colour.  Opacity grows
from zero at the 4-class chance level to full at certainty.
"""

from pathlib import Path

import numpy as np

from brushforge.experiments import (fit_mle, painting_probabilities, prepare_paintings,
                                    render_attribution_map, ExperimentConfig)
from brushforge.patching import choose_test_paintings
from brushforge.synth import CanvasSpec, make_corpus, preset_profiles

out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)

corpus = make_corpus(preset_profiles("separable"), CanvasSpec(width_px=300, height_px=360),
                     seed=3)
paintings = prepare_paintings(corpus)
held_out = choose_test_paintings(paintings, seed=0)
models = fit_mle(paintings, held_out)

#---#

for p in paintings:
    if p.painting_id != held_out[p.artist_id]:
        continue
    probs, coords = painting_probabilities(p, models, 60, ExperimentConfig())
    wins = np.bincount(np.argmax(probs, axis=1), minlength=4)
    print(p.painting_id, "patch votes per artist:", wins.tolist())
    render_attribution_map(p.normalized, probs, coords, 60, out / f"04_{p.painting_id}_map.png")
print("maps written to", out)
