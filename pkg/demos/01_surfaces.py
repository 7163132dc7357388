"""
Synthetic paint surfaces, detrending and normalization
======================================================

Four synthetic artists, one painting each, from the ``separable`` preset.
The raw maps sit on a domed canvas; a disk mean filter removes the dome
and leaves the paint texture.
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from brushforge.surface_io import DetrendParams, detrend, normalize
from brushforge.synth import CanvasSpec, make_corpus, preset_profiles

out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)

canvas = CanvasSpec(width_px=300, height_px=360)
corpus = make_corpus(preset_profiles("separable"), canvas, paintings_per_artist=1, seed=0)

#---#
# the dome shows up as a large corner-to-centre height difference

raw = corpus.paintings[0].heightmap
rel = detrend(raw, DetrendParams(100))
for name, z in (("raw", raw.heights), ("detrended", rel.heights)):
    print("%-10s centre - corner %6.1f um" % (name, z[180, 150] - z[0, 0]))

#---#
# side by side: detrended and normalized maps, one per artist

fig, axes = plt.subplots(2, 4, figsize=(10, 5.5))
for ax_top, ax_bot, p in zip(axes[0], axes[1], corpus.paintings):
    r = detrend(p.heightmap, DetrendParams(100))
    ax_top.imshow(r.heights, cmap="gray")
    ax_top.set_title(f"artist {p.artist_id}")
    ax_bot.hist(r.heights.ravel(), bins=80, color="k")
    ax_bot.set_xlabel("height (um)")
    print(p.painting_id, "normalized mean %.3f" % normalize(r).values.mean())
for ax in axes[0]:
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "01_surfaces.png", dpi=100)
print("wrote", out / "01_surfaces.png")
