"""Feature files, manifests, speech length contracts, image augmentation, synthetic corpora.

FMAT layout (all little-endian)::

    offset 0   4 bytes   b"FMAT"
    offset 4   u32       version (1)
    offset 8   u32       rows
    offset 12  u32       cols
    offset 16  f32[rows*cols], row-major
"""

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, FormatError, NumericError

FMAT_MAGIC = b"FMAT"
FMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")

FRAME_PERIOD_MS = 10
FRAMES_PER_SECOND = 1000 // FRAME_PERIOD_MS
# per-dataset utterance lengths in seconds
PRESET_SECONDS = {"facc": 8, "csc": 8, "places": 20, "locnarr": 40}
SPLITS = ("train", "dev", "test")


def seconds_to_frames(seconds):
    return int(round(seconds * FRAMES_PER_SECOND))


# -- FMAT ----------------------------------------------------------------------

def fmat_write(matrix):
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FormatError(f"FMAT holds 2-D matrices, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("FMAT payload must be finite")
    rows, cols = m.shape
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    return _HEADER.pack(FMAT_MAGIC, FMAT_VERSION, rows, cols) + payload


def fmat_read(data):
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise FormatError(f"truncated header: {len(data)} of {_HEADER.size} bytes", len(data))
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != FMAT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = _HEADER.size + 4 * rows * cols
    if len(data) < expected:
        raise FormatError(f"truncated payload: {rows}x{cols} needs {expected} bytes, "
                          f"have {len(data)}", len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after payload", expected)
    out = np.frombuffer(data, dtype="<f4", offset=_HEADER.size, count=rows * cols)
    return out.astype(np.float32).reshape(rows, cols)


def write_fmat(path, matrix):
    with open(path, "wb") as f:
        f.write(fmat_write(matrix))


def read_fmat(path):
    with open(path, "rb") as f:
        data = f.read()
    try:
        return fmat_read(data)
    except FormatError as e:
        raise FormatError(f"{path}: {e}") from None


# -- speech frames ---------------------------------------------------------------

@dataclass
class FrameMatrix:
    frames: np.ndarray
    valid_frames: int = None
    frame_period_ms: int = FRAME_PERIOD_MS

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be T x D, got shape {self.frames.shape}")
        if self.valid_frames is None:
            self.valid_frames = self.frames.shape[0]
        if not 0 <= self.valid_frames <= self.frames.shape[0]:
            raise ValueError(f"valid_frames {self.valid_frames} outside [0, {self.frames.shape[0]}]")
        if np.any(self.frames[self.valid_frames:] != 0):
            raise ValueError("padded frames must be exactly zero")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


def _as_frame_matrix(frames):
    return frames if isinstance(frames, FrameMatrix) else FrameMatrix(frames)


def pad_or_crop(frames, target_frames, mode="head", rng=None):
    """Exactly ``target_frames`` rows: zero-pad short inputs, crop long ones.

    ``mode`` picks the kept window of an over-length input: head, center or random.
    """
    fm = _as_frame_matrix(frames)
    if target_frames < 1:
        raise ValueError("target_frames must be >= 1")
    t = fm.n_frames
    if t == target_frames:
        return FrameMatrix(fm.frames.copy(), fm.valid_frames, fm.frame_period_ms)
    if t < target_frames:
        out = np.zeros((target_frames, fm.dim), dtype=fm.frames.dtype)
        out[:t] = fm.frames
        return FrameMatrix(out, fm.valid_frames, fm.frame_period_ms)
    if mode == "head":
        start = 0
    elif mode == "center":
        start = (t - target_frames) // 2
    elif mode == "random":
        if rng is None:
            raise ValueError("random crop needs an rng")
        start = int(rng.integers(0, t - target_frames + 1))
    else:
        raise ValueError(f"crop mode must be head, center or random, got {mode!r}")
    out = fm.frames[start:start + target_frames].copy()
    valid = int(np.clip(fm.valid_frames - start, 0, target_frames))
    return FrameMatrix(out, valid, fm.frame_period_ms)


def chunk_frames(frames, window_frames):
    """Split into ceil(T / window) windows; the last is zero-padded to full width."""
    fm = _as_frame_matrix(frames)
    if window_frames < 1:
        raise ValueError("window_frames must be >= 1")
    t = fm.n_frames
    if t == 0:
        raise DegenerateInputError("cannot chunk an utterance with zero frames")
    chunks = []
    for start in range(0, t, window_frames):
        piece = fm.frames[start:start + window_frames]
        valid = int(np.clip(fm.valid_frames - start, 0, len(piece)))
        if len(piece) < window_frames:
            padded = np.zeros((window_frames, fm.dim), dtype=fm.frames.dtype)
            padded[:len(piece)] = piece
            piece = padded
        else:
            piece = piece.copy()
        chunks.append(FrameMatrix(piece, valid, fm.frame_period_ms))
    return chunks


# -- image augmentation ------------------------------------------------------------

@dataclass
class AugmentParams:
    min_area_fraction: float = 0.67
    brightness_delta: float = 0.125        # additive, fraction of the [0, 1] range
    saturation_range: tuple = (0.5, 1.5)
    target_resolution: tuple = (380, 380)
    jitter: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.min_area_fraction <= 1:
            raise ValueError(f"min_area_fraction must be in (0, 1], got {self.min_area_fraction}")


def sample_crop(height, width, min_area_fraction, rng):
    """(top, left, crop_h, crop_w) covering at least ``min_area_fraction`` of the image."""
    floor = min_area_fraction * height * width
    min_h = max(1, int(np.ceil(min_area_fraction * height)))
    crop_h = int(rng.integers(min_h, height + 1))
    min_w = min(width, max(1, int(np.ceil(floor / crop_h))))
    crop_w = int(rng.integers(min_w, width + 1))
    top = int(rng.integers(0, height - crop_h + 1))
    left = int(rng.integers(0, width - crop_w + 1))
    return top, left, crop_h, crop_w


def resize_bilinear(image, size):
    h, w = image.shape[:2]
    th, tw = size
    factors = (th / h, tw / w) + (1,) * (image.ndim - 2)
    out = ndimage.zoom(image, factors, order=1, grid_mode=True, mode="nearest")
    assert out.shape[:2] == (th, tw), out.shape
    return out


def adjust_saturation(image, factor):
    if image.ndim < 3 or image.shape[2] == 1:
        return image
    gray = image.mean(axis=2, keepdims=True)
    return gray + factor * (image - gray)


def augment_image(image, params=None, rng=None):
    """Random area-floored crop, bilinear rescale, brightness and saturation jitter.

    ``image`` is (h, w) or (h, w, c) with values in [0, 1].
    """
    params = params or AugmentParams()
    if rng is None:
        rng = np.random.default_rng(params.seed)
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    top, left, ch, cw = sample_crop(h, w, params.min_area_fraction, rng)
    out = resize_bilinear(image[top:top + ch, left:left + cw], params.target_resolution)
    if params.jitter:
        out = out + rng.uniform(-params.brightness_delta, params.brightness_delta)
        out = adjust_saturation(out, rng.uniform(*params.saturation_range))
    return np.clip(out, 0.0, 1.0)


def record_rng(seed, record_id, epoch=0):
    """Independent stream per (seed, record, epoch) so results do not depend on scheduling."""
    return np.random.default_rng([seed, zlib.crc32(record_id.encode("utf-8")), epoch])


# -- manifests ----------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    id: str
    speech_path: str
    image_path: str
    split: str


@dataclass
class DatasetManifest:
    records: list
    root: str = "."
    target_seconds: dict = field(default_factory=lambda: dict(PRESET_SECONDS))

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate record ids: {dup[:5]}")
        for r in self.records:
            if r.split not in SPLITS:
                raise ValueError(f"record {r.id}: split {r.split!r} not in {SPLITS}")

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    def check_paths(self):
        for r in self.records:
            for p in (r.speech_path, r.image_path):
                if not os.path.exists(self.resolve(p)):
                    raise FileNotFoundError(f"record {r.id}: missing file {self.resolve(p)}")


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(f"{r.id}\t{r.speech_path}\t{r.image_path}\t{r.split}\n")


def read_manifest(path, check_paths=True):
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            records.append(ManifestRecord(*parts))
    manifest = DatasetManifest(records, root=os.path.dirname(os.path.abspath(path)))
    if check_paths:
        manifest.check_paths()
    return manifest


@dataclass
class SplitData:
    ids: list
    frames: np.ndarray     # (B, T, D), zero past valid
    valid: np.ndarray      # (B,)
    images: np.ndarray     # (B, Di)


def load_split(manifest, split, target_frames, crop_mode="head", seed=0):
    records = manifest.split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    frames, valid, images = [], [], []
    for r in records:
        rng = record_rng(seed, r.id) if crop_mode == "random" else None
        fm = pad_or_crop(read_fmat(manifest.resolve(r.speech_path)), target_frames, crop_mode, rng)
        frames.append(fm.frames)
        valid.append(fm.valid_frames)
        images.append(read_fmat(manifest.resolve(r.image_path)).reshape(-1))
    return SplitData([r.id for r in records], np.stack(frames), np.array(valid), np.stack(images))


# -- synthetic corpus -----------------------------------------------------------------

def gen_synthetic(out_dir, n_pairs=256, latent_dim=16, speech_T=64, speech_D=32, image_D=32,
                  noise_sigma=0.1, seed=0, dev_pairs=0, test_pairs=0,
                  identity_projections=False):
    """Write a paired corpus driven by shared Gaussian latents; returns its manifest.

    Speech frames repeat ``A_s z`` over time plus per-frame noise; image features are
    ``A_i z`` plus noise. ``n_pairs`` train pairs come first, then dev and test pairs.
    """
    for name, value in (("n_pairs", n_pairs), ("latent_dim", latent_dim), ("speech_T", speech_T),
                        ("speech_D", speech_D), ("image_D", image_D)):
        if value < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    if identity_projections:
        if speech_D != latent_dim or image_D != latent_dim:
            raise ValueError("identity projections need speech_D == image_D == latent_dim")
        a_s = np.eye(latent_dim)
        a_i = np.eye(latent_dim)
    else:
        a_s = rng.standard_normal((speech_D, latent_dim)) / np.sqrt(latent_dim)
        a_i = rng.standard_normal((image_D, latent_dim)) / np.sqrt(latent_dim)

    os.makedirs(os.path.join(out_dir, "speech"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "image"), exist_ok=True)
    splits = ["train"] * n_pairs + ["dev"] * dev_pairs + ["test"] * test_pairs
    records = []
    latents = []
    for i, split in enumerate(splits):
        z = rng.standard_normal(latent_dim)
        speech = np.broadcast_to(a_s @ z, (speech_T, speech_D))
        speech = speech + noise_sigma * rng.standard_normal((speech_T, speech_D))
        image = a_i @ z + noise_sigma * rng.standard_normal(image_D)
        rid = f"pair-{i:05d}"
        sp, ip = f"speech/{rid}.fmat", f"image/{rid}.fmat"
        try:
            write_fmat(os.path.join(out_dir, sp), speech)
            write_fmat(os.path.join(out_dir, ip), image[None, :])
        except OSError as e:
            raise OSError(f"failed writing synthetic pair {rid} under {out_dir}: {e}") from e
        records.append(ManifestRecord(rid, sp, ip, split))
        latents.append(z)
    write_manifest(os.path.join(out_dir, "manifest.tsv"), records)
    write_fmat(os.path.join(out_dir, "latents.fmat"), np.array(latents).reshape(len(splits), latent_dim))
    return DatasetManifest(records, root=os.path.abspath(out_dir))
