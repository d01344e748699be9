# %% [markdown]
# # Training on a synthetic corpus, then searching it
#
# The synthetic corpus ties each speech clip and image to a shared Gaussian
# latent through fixed random projections plus noise. A short run is enough
# for the towers to line the two modalities up.
#
# The full desk-scale settings live in `demos/desk.cfg`; this script uses
# fewer steps so it finishes in under a minute.

# %%
import os
import tempfile

import numpy as np

from dualenc import (EmbeddingIndex, TrainConfig, apply_overrides, embed_split, evaluate_split,
                     gen_synthetic, load_config, load_split, read_manifest, top_k, train)

here = os.path.dirname(os.path.abspath(__file__))
work = tempfile.mkdtemp(prefix="dualenc-demo-")
gen_synthetic(os.path.join(work, "corpus"), n_pairs=256, dev_pairs=64, latent_dim=16,
              speech_T=64, speech_D=32, image_D=32, noise_sigma=0.1, seed=7)
manifest_path = os.path.join(work, "corpus", "manifest.tsv")

config = apply_overrides(load_config(os.path.join(here, "desk.cfg")),
                         {"data.manifest": manifest_path, "max_steps": "400",
                          "eval_interval": "100"})

# %%
model, loss = train(config, os.path.join(work, "run"), echo=lambda line:
                    print(line) if line.startswith("eval") else None)
print("final loss", loss)

# %% [markdown]
# Recall on the train and dev splits, both directions.

# %%
manifest = read_manifest(manifest_path)
for split in ("train", "dev"):
    report = evaluate_split(model, manifest, split, [1, 5], config.target_frames)
    print(split, {k: round(v, 3) for k, v in report.items()})

# %% [markdown]
# Build an image index from the dev split and query it with one spoken clip.

# %%
dev = load_split(manifest, "dev", config.target_frames)
speech, image = embed_split(model, dev)
index = EmbeddingIndex(image, dev.ids)
hit = top_k(index, speech[5], 3, query_id=dev.ids[5])
print("query", hit.query_id)
for rank, (doc, score) in enumerate(hit, 1):
    print(f"  {rank}. {doc}  {score:.3f}")
