"""Speech and image towers and the dual encoder that pairs them.

A tower is a fixed stack: masked 1-D convolution blocks over frames, masked mean
pooling over time, then a linear projection into the shared embedding space.
``projection-only`` towers skip the convolutions.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError
from .tensor import (
    Conv1d,
    Dense,
    MaskedMeanPool,
    ReLU,
    conv1d_valid_frames,
    frame_mask,
    residual_add,
    resolve_dtype,
)

KINDS = ("shallow-cnn", "residual-cnn", "projection-only")
DEFAULT_EMBED_DIM = 2056
DEFAULT_CHUNK_FRAMES = 2000  # 20 s of 10 ms frames


@dataclass
class EncoderConfig:
    kind: str = "shallow-cnn"
    widths: list = field(default_factory=lambda: [256, 512, 1024])
    # roughly phone / syllable / word spans at a 10 ms frame rate
    kernels: list = field(default_factory=lambda: [5, 11, 25])
    strides: list = field(default_factory=lambda: [1, 1, 1])
    embed_dim: int = DEFAULT_EMBED_DIM
    input_dim: int = 1024
    padding: str = "same"

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"encoder kind must be one of {KINDS}, got {self.kind!r}")
        if self.embed_dim <= 0 or self.input_dim <= 0:
            raise ConfigError("embed_dim and input_dim must be positive")
        if self.kind == "projection-only":
            return self
        if not (len(self.widths) == len(self.kernels) == len(self.strides)):
            raise ConfigError(
                f"widths/kernels/strides lengths disagree: "
                f"{len(self.widths)}/{len(self.kernels)}/{len(self.strides)}")
        if self.kind == "shallow-cnn" and len(self.widths) != 3:
            raise ConfigError("shallow-cnn has exactly 3 convolution layers")
        if not self.widths:
            raise ConfigError(f"{self.kind} needs at least one convolution layer")
        if min(self.widths) <= 0 or min(self.kernels) <= 0 or min(self.strides) <= 0:
            raise ConfigError("widths, kernels and strides must be positive")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        return self

    def layer_shapes(self):
        """(name, weight shape, bias shape) for every parameter tensor, in order."""
        self.validate()
        shapes = []
        d = self.input_dim
        if self.kind != "projection-only":
            for i, (w, k) in enumerate(zip(self.widths, self.kernels)):
                shapes.append((f"block{i}.conv", (k, d, w), (w,)))
                d = w
        shapes.append(("proj", (d, self.embed_dim), (self.embed_dim,)))
        return shapes

    def num_parameters(self):
        return sum(int(np.prod(w)) + int(np.prod(b)) for _, w, b in self.layer_shapes())


class ConvBlock:
    """mask -> conv -> (+ skip) -> relu, keeping padded frames at zero on entry."""

    def __init__(self, d_in, d_out, kernel, stride, padding, residual, rng, dtype):
        self.conv = Conv1d(d_in, d_out, kernel, stride, padding, rng=rng, dtype=dtype)
        self.relu = ReLU()
        self.residual = residual
        self._mask = None

    def forward(self, x, valid):
        mask = frame_mask(valid, x.shape[1])[:, :, None]
        xm = np.where(mask, x, 0).astype(x.dtype, copy=False)
        h = self.conv.forward(xm)
        valid_out = conv1d_valid_frames(valid, self.conv.stride, self.conv.padding, h.shape[1])
        if self.residual:
            h = residual_add(h, xm)
        self._mask = mask
        return self.relu.forward(h), valid_out

    def backward(self, grad_out):
        gh = self.relu.backward(grad_out)
        gx = self.conv.backward(gh)
        if self.residual:
            gx = gx + gh
        return np.where(self._mask, gx, 0).astype(gx.dtype, copy=False)


class Tower:
    def __init__(self, config, rng, dtype=np.float32, projection_init="glorot"):
        self.config = config.validate()
        self.dtype = resolve_dtype(dtype)
        self.blocks = []
        d = config.input_dim
        if config.kind != "projection-only":
            for i, (w, k, s) in enumerate(zip(config.widths, config.kernels, config.strides)):
                residual = config.kind == "residual-cnn" and i > 0 and w == d and s == 1 \
                    and config.padding == "same"
                self.blocks.append(ConvBlock(d, w, k, s, config.padding, residual, rng, self.dtype))
                d = w
        self.pool = MaskedMeanPool()
        self.proj = Dense(d, config.embed_dim, rng=rng, dtype=self.dtype, init=projection_init)
        self._pooled = False
        self._in_shape = None

    def named_params(self):
        out = {}
        for i, block in enumerate(self.blocks):
            out[f"block{i}.conv"] = block.conv.p
        out["proj"] = self.proj.p
        return out

    def _as_sequence(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 4:  # (B, h, w, c) images: rows become frames
            x = x.reshape(x.shape[0], x.shape[1], -1)
        return x

    def forward(self, x, valid=None):
        x = self._as_sequence(x)
        self._in_shape = x.shape
        if x.ndim == 2:
            if self.blocks:
                raise ConfigError(f"{self.config.kind} tower needs (B, T, D) input, got {x.shape}")
            self._pooled = False
            h = x
        elif x.ndim == 3:
            if valid is None:
                valid = np.full(x.shape[0], x.shape[1])
            valid = np.asarray(valid)
            for block in self.blocks:
                x, valid = block.forward(x, valid)
            h = self.pool.forward(x, valid)
            self._pooled = True
        else:
            raise DimensionError(f"tower input must be 2-, 3- or 4-D, got shape {x.shape}")
        if h.shape[1] != self.proj.p.weights.shape[0]:
            raise ConfigError(
                f"feature dim {h.shape[1]} does not match configured {self.proj.p.weights.shape[0]}")
        return self.proj.forward(h)

    def backward(self, grad_out):
        g = self.proj.backward(grad_out)
        if self._pooled:
            g = self.pool.backward(g)
            for block in reversed(self.blocks):
                g = block.backward(g)
        return g.reshape(self._in_shape)


def l2_normalize(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError("cannot normalize a zero embedding")
    return x / norms, norms


def l2_normalize_backward(y, norms, grad_out):
    return (grad_out - y * np.sum(y * grad_out, axis=1, keepdims=True)) / norms


def _chunk_plan(valid, n_frames, window):
    """Per example: how many windows its real frames span (at least one)."""
    valid = np.asarray(valid)
    if np.any(valid <= 0):
        raise DegenerateInputError("utterance with zero frames")
    if n_frames <= window:
        return None
    return -(-valid // window)


class DualEncoder:
    """Speech tower + image tower emitting vectors in one shared space."""

    def __init__(self, speech_config, image_config, seed=0, precision="float32",
                 normalize=False, projection_init="glorot"):
        if speech_config.embed_dim != image_config.embed_dim:
            raise ConfigError(
                f"towers disagree on embed_dim: {speech_config.embed_dim} vs {image_config.embed_dim}")
        self.speech_config = speech_config
        self.image_config = image_config
        self.seed = seed
        self.dtype = resolve_dtype(precision)
        self.normalize = normalize
        rng = np.random.default_rng(seed)
        self.speech_tower = Tower(speech_config, rng, self.dtype, projection_init)
        self.image_tower = Tower(image_config, rng, self.dtype, projection_init)
        self._speech_cache = None
        self._image_cache = None

    @property
    def embed_dim(self):
        return self.speech_config.embed_dim

    def named_params(self):
        out = {}
        for prefix, tower in (("speech", self.speech_tower), ("image", self.image_tower)):
            for name, p in tower.named_params().items():
                out[f"{prefix}.{name}"] = p
        return out

    def param_arrays(self):
        """Flat name -> array mapping (``.weight`` / ``.bias``) used by the optimizer."""
        out = {}
        for name, p in self.named_params().items():
            out[f"{name}.weight"] = p.weights
            out[f"{name}.bias"] = p.bias
        return out

    def grad_arrays(self):
        out = {}
        for name, p in self.named_params().items():
            out[f"{name}.weight"] = p.grad_weights
            out[f"{name}.bias"] = p.grad_bias
        return out

    def num_parameters(self):
        return sum(a.size for a in self.param_arrays().values())

    def zero_grad(self):
        for p in self.named_params().values():
            p.zero_grad()

    def load_arrays(self, arrays):
        own = self.param_arrays()
        if set(own) != set(arrays):
            raise ConfigError(f"parameter names differ: {sorted(set(own) ^ set(arrays))}")
        for name, dst in own.items():
            src = np.asarray(arrays[name])
            if src.shape != dst.shape:
                raise DimensionError(f"{name}: shape {src.shape} vs expected {dst.shape}")
            dst[...] = src

    def replicate(self):
        """A copy with identical parameters and its own activations and gradients."""
        twin = DualEncoder(self.speech_config, self.image_config, self.seed,
                           self.dtype, self.normalize)
        twin.load_arrays(self.param_arrays())
        return twin

    # -- forward / backward ---------------------------------------------------

    def forward_speech(self, frames, valid=None, window=None):
        frames = np.asarray(frames, dtype=self.dtype)
        if frames.ndim != 3:
            raise DimensionError(f"speech batch must be (B, T, D), got {frames.shape}")
        if frames.shape[2] != self.speech_config.input_dim:
            raise ConfigError(
                f"speech feature dim {frames.shape[2]} != configured {self.speech_config.input_dim}")
        b, t, _ = frames.shape
        valid = np.full(b, t) if valid is None else np.asarray(valid)
        counts = None if window is None else _chunk_plan(valid, t, window)
        if counts is None:
            emb = self.speech_tower.forward(frames, valid)
        else:
            chunks, chunk_valid = [], []
            for i in range(b):
                for c in range(counts[i]):
                    piece = frames[i, c * window:(c + 1) * window]
                    n_real = min(window, valid[i] - c * window)
                    padded = np.zeros((window, frames.shape[2]), dtype=self.dtype)
                    padded[:n_real] = piece[:n_real]
                    chunks.append(padded)
                    chunk_valid.append(n_real)
            chunk_emb = self.speech_tower.forward(np.stack(chunks), np.array(chunk_valid))
            starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
            emb = np.add.reduceat(chunk_emb, starts, axis=0) / counts[:, None].astype(self.dtype)
        norms = None
        if self.normalize:
            emb, norms = l2_normalize(emb)
        self._speech_cache = (counts, emb, norms)
        return emb

    def forward_image(self, feats):
        feats = np.asarray(feats, dtype=self.dtype)
        emb = self.image_tower.forward(feats)
        norms = None
        if self.normalize:
            emb, norms = l2_normalize(emb)
        self._image_cache = (emb, norms)
        return emb

    def backward_speech(self, grad_emb):
        counts, emb, norms = self._speech_cache
        if norms is not None:
            grad_emb = l2_normalize_backward(emb, norms, grad_emb)
        if counts is not None:
            grad_emb = np.repeat(grad_emb / counts[:, None].astype(grad_emb.dtype), counts, axis=0)
        self.speech_tower.backward(grad_emb)

    def backward_image(self, grad_emb):
        emb, norms = self._image_cache
        if norms is not None:
            grad_emb = l2_normalize_backward(emb, norms, grad_emb)
        self.image_tower.backward(grad_emb)


def encode_speech(model, frames, valid=None, window=None):
    return model.forward_speech(frames, valid, window)


def encode_image(model, feats):
    return model.forward_image(feats)


def encode_long_utterance(model, frames, window_frames=DEFAULT_CHUNK_FRAMES):
    """Embed one utterance of any length as the mean of its fixed-window chunk embeddings."""
    valid = getattr(frames, "valid_frames", None)
    frames = np.asarray(getattr(frames, "frames", frames))
    if frames.shape[0] == 0:
        raise DegenerateInputError("utterance with zero frames")
    if valid is None:
        valid = frames.shape[0]
    if frames.shape[0] < window_frames:
        padded = np.zeros((window_frames, frames.shape[1]), dtype=frames.dtype)
        padded[:frames.shape[0]] = frames
        frames = padded
    if frames.shape[0] == window_frames:
        return model.forward_speech(frames[None], [valid])[0]
    return model.forward_speech(frames[None], [valid], window=window_frames)[0]
