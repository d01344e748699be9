"""Exact top-k inner product search and Recall@K evaluation."""

import os
from dataclasses import dataclass

import numpy as np

from .datapipe import load_split, read_fmat, write_fmat
from .errors import DegenerateInputError, DimensionError, StateError

DIRECTIONS = ("speech_to_image", "image_to_speech")


class EmbeddingIndex:
    """Corpus embeddings with aligned ids, scanned exactly in fixed-size blocks."""

    def __init__(self, matrix, ids=None, scoring="dot", block_size=4096):
        matrix = np.asarray(matrix)
        if matrix.ndim != 2:
            raise DimensionError(f"index matrix must be 2-D, got {matrix.shape}")
        if ids is None:
            ids = [str(i) for i in range(len(matrix))]
        ids = list(ids)
        if len(ids) != len(matrix):
            raise DimensionError(f"{len(ids)} ids for {len(matrix)} rows")
        if scoring not in ("dot", "cosine"):
            raise ValueError(f"scoring must be 'dot' or 'cosine', got {scoring!r}")
        if not np.all(np.isfinite(matrix)):
            raise DegenerateInputError("index rows must be finite")
        if scoring == "cosine":
            matrix = _unit_rows(matrix, "index")
        self.matrix = matrix
        self.ids = ids
        self.scoring = scoring
        self.block_size = block_size

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.matrix.shape[1]

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        write_fmat(os.path.join(directory, "index.fmat"), self.matrix)
        with open(os.path.join(directory, "ids.txt"), "w", encoding="utf-8", newline="\n") as f:
            f.writelines(f"{i}\n" for i in self.ids)

    @classmethod
    def load(cls, directory, scoring="dot"):
        matrix = read_fmat(os.path.join(directory, "index.fmat"))
        with open(os.path.join(directory, "ids.txt"), encoding="utf-8") as f:
            ids = [line.rstrip("\n") for line in f]
        return cls(matrix, ids, scoring)


@dataclass
class RetrievalResult:
    query_id: str
    ids: list
    scores: list

    def __iter__(self):
        return iter(zip(self.ids, self.scores))


def _unit_rows(x, what):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError(f"cosine scoring needs nonzero {what} rows")
    return x / norms


def _best(scores, rows, k):
    """Per query row: the k best (score desc, row asc) among candidates."""
    order = np.lexsort((rows, -scores), axis=-1)[:, :k]
    return np.take_along_axis(scores, order, 1), np.take_along_axis(rows, order, 1)


def rank(scores, k):
    """Column indices of the k largest entries per row, ties to the lower index."""
    scores = np.atleast_2d(scores)
    rows = np.broadcast_to(np.arange(scores.shape[1]), scores.shape)
    return _best(scores, rows, k)[1]


def search(index, queries, k):
    """Top-k rows for every query: returns (row indices (Q, k), scores (Q, k))."""
    if len(index) == 0:
        raise StateError("search on an empty index")
    if not 1 <= k <= len(index):
        raise ValueError(f"k must be in [1, {len(index)}], got {k}")
    queries = np.atleast_2d(np.asarray(queries, dtype=index.matrix.dtype))
    if queries.shape[1] != index.dim:
        raise DimensionError(f"query dim {queries.shape[1]} != index dim {index.dim}")
    if not np.all(np.isfinite(queries)):
        raise DegenerateInputError("queries must be finite")
    if index.scoring == "cosine":
        queries = _unit_rows(queries, "query")
    cand_scores, cand_rows = [], []
    for start in range(0, len(index), index.block_size):
        block = index.matrix[start:start + index.block_size]
        scores = queries @ block.T
        rows = np.broadcast_to(np.arange(start, start + len(block)), scores.shape)
        s, r = _best(scores, rows, min(k, len(block)))
        cand_scores.append(s)
        cand_rows.append(r)
    scores, rows = _best(np.concatenate(cand_scores, 1), np.concatenate(cand_rows, 1), k)
    return rows, scores


def top_k(index, query, k, query_id=None):
    rows, scores = search(index, np.asarray(query)[None, :], k)
    return RetrievalResult(query_id, [index.ids[r] for r in rows[0]], scores[0].tolist())


def recall_at_k(speech, image, k, direction="speech_to_image", scoring="dot"):
    """Fraction of queries whose aligned counterpart lands in the top k."""
    speech = np.asarray(speech)
    image = np.asarray(image)
    if speech.ndim != 2 or speech.shape != image.shape:
        raise DimensionError(f"misaligned embeddings: speech {speech.shape} vs image {image.shape}")
    if direction == "speech_to_image":
        queries, corpus = speech, image
    elif direction == "image_to_speech":
        queries, corpus = image, speech
    else:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    rows, _ = search(EmbeddingIndex(corpus, scoring=scoring), queries, k)
    hits = (rows == np.arange(len(queries))[:, None]).any(axis=1)
    return float(hits.mean())


def embed_split(model, data, window_frames=None, batch_size=256):
    """Speech and image embeddings for a loaded split, batch by batch."""
    speech, image = [], []
    for start in range(0, len(data.ids), batch_size):
        rows = slice(start, start + batch_size)
        speech.append(model.forward_speech(data.frames[rows], data.valid[rows], window_frames))
        image.append(model.forward_image(data.images[rows]))
    return np.concatenate(speech), np.concatenate(image)


def recall_report(speech, image, k_list=(1, 5, 10), scoring="dot"):
    report = {}
    for k in k_list:
        for direction in DIRECTIONS:
            report[f"r_at_{k}.{direction}"] = recall_at_k(speech, image, k, direction, scoring)
    return report


def evaluate_split(model, manifest, split, k_list=(1, 5, 10), target_frames=800,
                   window_frames=None, crop_mode="head", scoring="dot"):
    """R@K in both directions over one manifest split."""
    if not manifest.split(split):
        raise ValueError(f"split {split!r} is empty")
    data = load_split(manifest, split, target_frames, crop_mode)
    speech, image = embed_split(model, data, window_frames)
    report = recall_report(speech, image, k_list, scoring)
    report["n_queries"] = len(data.ids)
    return report


def format_report(report):
    return "".join(f"{key}={value!r}\n" for key, value in report.items())


def write_report(path, report):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_report(report))


def read_report(path):
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                key, value = line.rstrip("\n").split("=", 1)
                out[key] = float(value) if "." in value or "e" in value else int(value)
    return out
