"""Checkpoints and the deterministic training loop."""

import os

import numpy as np

from .config import TrainConfig, apply_overrides, dump_config, parse_lines, to_flat
from .contrastive import PairBatch, ReplicaGroup
from .datapipe import load_split, read_fmat, read_manifest, write_fmat
from .encoders import DualEncoder
from .errors import ConfigError, NumericError
from .optim import Adam
from .retrieval import embed_split, recall_report

CHECKPOINT_MANIFEST = "checkpoint.txt"


def build_model(config):
    config.validate()
    return DualEncoder(config.speech_config(), config.image_config(), seed=config.seed,
                       precision=config.model.precision,
                       normalize=config.model.scoring == "cosine")


# -- checkpoints -------------------------------------------------------------------

def _as_matrix(arr):
    if arr.ndim == 1:
        return arr[None, :]
    return arr.reshape(arr.shape[0], -1)


def save_checkpoint(directory, model, optimizer, step, config):
    """One FMAT file per tensor plus a key=value manifest of shapes, step and config."""
    os.makedirs(directory, exist_ok=True)
    lines = [f"step={step}", f"optim.t={optimizer.t}"]
    groups = (("param", model.param_arrays()), ("adam", optimizer.state_arrays()))
    for kind, arrays in groups:
        for name, arr in arrays.items():
            write_fmat(os.path.join(directory, f"{kind}.{name}.fmat"), _as_matrix(arr))
            lines.append(f"{kind}.{name}={','.join(str(d) for d in arr.shape)}")
    lines.extend(f"config.{k}={v}" for k, v in to_flat(config).items())
    with open(os.path.join(directory, CHECKPOINT_MANIFEST), "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_checkpoint(directory):
    """Returns (config, step, params, optimizer t, optimizer arrays)."""
    path = os.path.join(directory, CHECKPOINT_MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    with open(path, encoding="utf-8") as f:
        entries = parse_lines(f.read(), path)
    config = apply_overrides(TrainConfig(), {k[len("config."):]: v for k, v in entries.items()
                                             if k.startswith("config.")})
    params, adam = {}, {}
    for key, value in entries.items():
        kind, _, name = key.partition(".")
        if kind not in ("param", "adam"):
            continue
        shape = tuple(int(d) for d in value.split(","))
        arr = read_fmat(os.path.join(directory, f"{key}.fmat")).reshape(shape)
        (params if kind == "param" else adam)[name] = arr
    return config, int(entries["step"]), params, int(entries["optim.t"]), adam


def load_model(directory, overrides=None):
    config, step, params, _, _ = read_checkpoint(directory)
    if overrides:
        config = apply_overrides(config, overrides)
    model = build_model(config)
    model.load_arrays(params)
    return model, config, step


# -- batching ------------------------------------------------------------------------

def batch_indices(seed, step, n_examples, batch_size):
    """Rows for one global batch: a stream of per-epoch permutations, cut into batches.

    Stateless in ``step`` so resuming from a checkpoint replays the same data order.
    """
    positions = np.arange(step * batch_size, (step + 1) * batch_size)
    epochs = positions // n_examples
    out = np.empty(batch_size, dtype=np.int64)
    for epoch in np.unique(epochs):
        perm = np.random.default_rng([seed, int(epoch)]).permutation(n_examples)
        sel = epochs == epoch
        out[sel] = perm[positions[sel] % n_examples]
    return out


def _kv(pairs):
    return " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in pairs) + "\n"


def _evaluate(model, data, config):
    if data is None:
        return {}
    k_list = [k for k in config.k_list if k <= len(data.ids)]
    speech, image = embed_split(model, data, config.chunk_window)
    return recall_report(speech, image, k_list, config.model.scoring)


def train(config, run_dir, resume=None, overrides=None, echo=None):
    """Run (or resume) training; returns the trained model and the final loss.

    Writes ``train.log`` (one ``key=value`` line per step and per evaluation),
    ``config.txt`` (the resolved configuration) and ``ckpt-NNNNNN`` directories.
    """
    config.validate()
    if not config.data.manifest:
        raise ConfigError("data.manifest is not set")
    os.makedirs(run_dir, exist_ok=True)
    ckpt_root = config.checkpoint_dir or run_dir
    manifest = read_manifest(config.data.manifest)
    target = config.target_frames
    train_data = load_split(manifest, "train", target, config.data.crop_mode, config.seed)
    dev_data = None
    if manifest.split(config.data.eval_split):
        dev_data = load_split(manifest, config.data.eval_split, target, config.data.crop_mode,
                              config.seed)

    model = build_model(config)
    optimizer = Adam(config.optim)
    start = 0
    if resume is not None:
        _, start, params, t, adam = read_checkpoint(resume)
        model.load_arrays(params)
        optimizer.load_state(t, adam)

    with open(os.path.join(run_dir, "config.txt"), "w", encoding="utf-8", newline="\n") as f:
        f.write(dump_config(config))
    log = open(os.path.join(run_dir, "train.log"), "a" if resume else "w",
               encoding="utf-8", newline="\n")

    def emit(line):
        log.write(line)
        log.flush()
        if echo:
            echo(line.rstrip("\n"))

    try:
        if resume is None:
            for key, value in (overrides or {}).items():
                emit(f"override.{key}={value}\n")
            save_checkpoint(os.path.join(ckpt_root, f"ckpt-{0:06d}"), model, optimizer, 0, config)
        layout = config.replicas
        group = ReplicaGroup(model, layout.n_replicas)
        n_train = len(train_data.ids)
        loss = float("nan")
        for step in range(start, config.max_steps):
            rows = batch_indices(config.seed, step, n_train, layout.global_batch)
            batch = PairBatch(train_data.frames[rows], train_data.valid[rows],
                              train_data.images[rows], config.chunk_window)
            lr = optimizer.lr()
            loss = group.step(batch.split(layout.n_replicas), optimizer, config.model.temperature)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step}")
            emit(_kv([("step", step), ("lr", lr), ("loss", loss)]))
            done = step + 1
            if done % config.eval_interval == 0 or done == config.max_steps:
                report = _evaluate(model, dev_data, config)
                emit(_kv([("eval_step", done)] +
                         [(f"{config.data.eval_split}.{k}", v) for k, v in report.items()]))
                save_checkpoint(os.path.join(ckpt_root, f"ckpt-{done:06d}"), model, optimizer,
                                done, config)
    finally:
        log.close()
    return model, loss


def read_log(path):
    """Parse ``train.log`` into (step records, eval records) as dicts."""
    steps, evals = [], []
    with open(path, encoding="utf-8") as f:
        for line in f:
            entry = {}
            for token in line.split():
                key, value = token.split("=", 1)
                try:
                    entry[key] = int(value)
                except ValueError:
                    try:
                        entry[key] = float(value)
                    except ValueError:
                        entry[key] = value
            if "step" in entry:
                steps.append(entry)
            elif "eval_step" in entry:
                evals.append(entry)
    return steps, evals
