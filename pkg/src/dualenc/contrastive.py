"""Bidirectional in-batch softmax loss and simulated cross-replica negative pooling."""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, LayoutError, StateError
from .tensor import check_finite


def similarity(speech, image):
    """S[i, j] = <speech_i, image_j>."""
    speech = np.asarray(speech)
    image = np.asarray(image)
    if speech.ndim != 2 or speech.shape != image.shape:
        raise DimensionError(f"similarity: speech {speech.shape} vs image {image.shape}")
    return speech @ image.T


def _log_softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _check_square(S):
    S = np.asarray(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 1:
        raise DimensionError(f"similarity matrix must be square and non-empty, got {S.shape}")
    return S


def loss_and_gradient(S, temperature=1.0):
    """Loss and dL/dS in one pass.

    L = -(1/2B) * sum_i [log rowsoftmax(S/t)[i, i] + log colsoftmax(S/t)[i, i]]
    """
    S = _check_square(S)
    b = S.shape[0]
    z = np.ascontiguousarray(S / temperature if temperature != 1.0 else S)
    # both directions reduce along contiguous rows so loss(S) == loss(S.T) bit for bit
    log_row = _log_softmax(z, axis=1)
    log_col = _log_softmax(np.ascontiguousarray(z.T), axis=1).T
    diag = np.arange(b)
    loss = -(log_row[diag, diag].sum() + log_col[diag, diag].sum()) / (2 * b)
    grad = np.exp(log_row) + np.exp(log_col)
    grad[diag, diag] -= 2
    grad /= 2 * b
    if temperature != 1.0:
        grad /= temperature
    return float(loss), check_finite(grad, "loss gradient")


def bidirectional_softmax_loss(S, temperature=1.0):
    return loss_and_gradient(S, temperature)[0]


def loss_gradient(S, temperature=1.0):
    return loss_and_gradient(S, temperature)[1]


@dataclass
class PairBatch:
    """Aligned speech/image examples; row i of each side is a positive pair."""

    frames: np.ndarray          # (B, T, D)
    valid: np.ndarray           # (B,) real frame counts
    images: np.ndarray          # (B, Di) features or (B, h, w, c) pixels
    window: int = None          # chunk window for utterances longer than the tower input

    def __len__(self):
        return len(self.frames)

    def subset(self, rows):
        return PairBatch(self.frames[rows], self.valid[rows], self.images[rows], self.window)

    def split(self, n_replicas):
        if len(self) % n_replicas:
            raise LayoutError(f"batch of {len(self)} does not split over {n_replicas} replicas")
        k = len(self) // n_replicas
        return [self.subset(slice(r * k, (r + 1) * k)) for r in range(n_replicas)]


@dataclass(frozen=True)
class ReplicaLayout:
    n_replicas: int
    per_replica: int

    def __post_init__(self):
        if self.n_replicas < 1 or self.per_replica < 1:
            raise LayoutError(f"invalid replica layout N={self.n_replicas} K={self.per_replica}")

    @property
    def global_batch(self):
        return self.n_replicas * self.per_replica

    def owner(self, index):
        return index // self.per_replica

    def rows(self, replica):
        return slice(replica * self.per_replica, (replica + 1) * self.per_replica)


def _embed(model, batch):
    return model.forward_speech(batch.frames, batch.valid, batch.window), model.forward_image(batch.images)


def compute_gradients(model, batch, temperature=1.0):
    """Single-replica forward/backward; leaves dL/dparams in the model's accumulators."""
    model.zero_grad()
    es, ei = _embed(model, batch)
    loss, dS = loss_and_gradient(similarity(es, ei), temperature)
    model.backward_speech(dS @ ei)
    model.backward_image(dS.T @ es)
    return loss


def training_step(model, batch, optimizer, temperature=1.0):
    loss = compute_gradients(model, batch, temperature)
    optimizer.step(model.param_arrays(), model.grad_arrays())
    return loss


def check_replicas_in_sync(model, replicas):
    reference = model.param_arrays()
    for r, replica in enumerate(replicas):
        for name, arr in replica.param_arrays().items():
            if not np.array_equal(arr, reference[name]):
                raise StateError(f"replica {r} diverged from the shared parameters at {name}")


def pooled_gradients(model, replica_batches, temperature=1.0, replicas=None):
    """Encode per replica, pool every embedding into one global batch, backprop per owner.

    Parameter gradients are summed over replicas into ``model``'s accumulators, in
    replica order. Returns the global loss.
    """
    sizes = {len(b) for b in replica_batches}
    if not replica_batches or len(sizes) != 1:
        raise LayoutError(f"replicas need equal local batch sizes, got {[len(b) for b in replica_batches]}")
    layout = ReplicaLayout(len(replica_batches), sizes.pop())
    if replicas is None:
        replicas = [model.replicate() for _ in range(layout.n_replicas)]
    elif len(replicas) != layout.n_replicas:
        raise LayoutError(f"{len(replicas)} replicas for {layout.n_replicas} local batches")
    check_replicas_in_sync(model, replicas)

    local = []
    for replica, batch in zip(replicas, replica_batches):
        replica.zero_grad()
        local.append(_embed(replica, batch))
    # all-gather: every replica sees the same concatenation, in replica order
    speech = np.concatenate([es for es, _ in local])
    image = np.concatenate([ei for _, ei in local])
    loss, dS = loss_and_gradient(similarity(speech, image), temperature)
    grad_speech = dS @ image
    grad_image = dS.T @ speech

    for r, replica in enumerate(replicas):
        rows = layout.rows(r)
        replica.backward_speech(grad_speech[rows])
        replica.backward_image(grad_image[rows])

    # all-reduce: sum parameter gradients
    master = model.grad_arrays()
    for r, replica in enumerate(replicas):
        for name, g in replica.grad_arrays().items():
            if r == 0:
                master[name][...] = g
            else:
                master[name] += g
    return loss


def pooled_training_step(model, replica_batches, optimizer, temperature=1.0, replicas=None):
    loss = pooled_gradients(model, replica_batches, temperature, replicas)
    optimizer.step(model.param_arrays(), model.grad_arrays())
    if replicas is not None:
        for replica in replicas:
            replica.load_arrays(model.param_arrays())
    return loss


class ReplicaGroup:
    """Persistent simulated replicas of one model, kept in sync after every step."""

    def __init__(self, model, n_replicas):
        self.model = model
        self.replicas = [model.replicate() for _ in range(n_replicas)]

    def gradients(self, replica_batches, temperature=1.0):
        return pooled_gradients(self.model, replica_batches, temperature, self.replicas)

    def step(self, replica_batches, optimizer, temperature=1.0):
        return pooled_training_step(self.model, replica_batches, optimizer, temperature,
                                    self.replicas)
