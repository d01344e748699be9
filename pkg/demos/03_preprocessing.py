# %% [markdown]
# # Getting data into shape
#
# Speech arrives as frame matrices at 100 frames per second. Each corpus preset
# fixes a target length, so short clips are zero padded and long ones cropped.
# Utterances longer than the encoder window are split into chunks.

# %%
import numpy as np

from dualenc import (AugmentParams, FrameMatrix, augment_image, chunk_frames, fmat_read,
                     fmat_write, pad_or_crop)
from dualenc.datapipe import PRESET_SECONDS, seconds_to_frames

for name, seconds in PRESET_SECONDS.items():
    print(f"{name:8s} {seconds:3d} s -> {seconds_to_frames(seconds)} frames")

# %%
rng = np.random.default_rng(0)
clip = FrameMatrix(rng.normal(size=(530, 16)))
short = pad_or_crop(clip, 800)
long = pad_or_crop(clip, 400, mode="center")
print("padded:", short.frames.shape, "valid", short.valid_frames)
print("cropped:", long.frames.shape, "valid", long.valid_frames)

# %% [markdown]
# Chunking keeps every frame; the last window is zero padded and remembers how
# many of its frames are real.

# %%
chunks = chunk_frames(FrameMatrix(rng.normal(size=(4500, 16))), 2000)
print([c.valid_frames for c in chunks])

# %% [markdown]
# Image augmentation takes a random crop that keeps at least 67% of the area,
# rescales it bilinearly, then jitters brightness and saturation.

# %%
params = AugmentParams(target_resolution=(64, 64))
picture = rng.uniform(size=(120, 90, 3))
views = [augment_image(picture, params, np.random.default_rng(s)) for s in range(4)]
print([v.shape for v in views], [round(float(v.mean()), 3) for v in views])

# %% [markdown]
# Everything on disk is FMAT: a 16 byte header then float32 values, row major.

# %%
blob = fmat_write(np.arange(6, dtype=np.float32).reshape(2, 3))
print(len(blob), blob[:4], fmat_read(blob))
