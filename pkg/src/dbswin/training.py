"""Loss, SGD-with-momentum optimizer, step-decay schedule, the training
and evaluation loops, and binary checkpoint serialization."""

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import metrics as M
from .data import to_model_input
from .model import model_forward, named_parameters

CHECKPOINT_MAGIC = b"DBSW"
CHECKPOINT_VERSION = 1
LOG_HEADER = "epoch,lr,train_loss,val_precision,val_recall,val_f1,val_iou"


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 2e-4
    momentum: float = 0.9
    weight_decay: float = 2e-4
    batch_size: int = 4
    epochs: int = 100
    decay_every: int = 20
    decay_factor: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if min(self.lr0, self.batch_size, self.epochs, self.decay_every) <= 0:
            raise ValueError("training hyperparameters must be positive")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay_factor must lie in (0,1)")


def lr_at(epoch, cfg: TrainConfig):
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


bce_with_logits = ad.bce_with_logits


def _decayed(name):
    # weight matrices only; biases, LN affine, and the position-bias table
    # are excluded from weight decay
    return name.rsplit(".", 1)[-1].startswith("w")


def sgd_step(named_params, buffers, lr, momentum, weight_decay):
    """buf = momentum*buf + (grad + wd*param); param -= lr*buf."""
    for name, p in named_params:
        if p.grad is None:
            continue
        g = p.grad
        if weight_decay and _decayed(name):
            g = g + weight_decay * p.data
        buf = buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p.data)
            buffers[name] = buf
        buf *= momentum
        buf += g
        p.data -= lr * buf


def evaluate(params, samples, threshold=0.5):
    """Micro-averaged metrics: confusion counts pooled over all samples."""
    counts = M.ConfusionCounts()
    with ad.no_grad():
        for s in samples:
            logits = model_forward(to_model_input(s), params)
            counts = counts + M.confusion(logits.data, s.mask, threshold)
    return counts


def _epoch_rng(seed, epoch):
    return np.random.default_rng((0x5EED, seed, epoch))


def train(params, train_samples, cfg: TrainConfig, val_samples=None,
          checkpoint_dir=None, log_path=None, start_epoch=0, buffers=None,
          config_kv=None, epoch_callback=None):
    """Run epochs [start_epoch, cfg.epochs); returns (log_rows, buffers).

    Deterministic under cfg.seed: the sample order of epoch e depends only
    on (seed, e), so resuming from a checkpoint replays the identical
    stream. NaN losses abort with the offending epoch/batch identified.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    if buffers is None:
        buffers = {}
    named = list(named_parameters(params))
    rows = []
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = _epoch_rng(cfg.seed, epoch).permutation(len(train_samples))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_samples[i] for i in order[lo : lo + cfg.batch_size]]
            for _, p in named:
                p.zero_grad()
            total = None
            for s in batch:
                logits = model_forward(to_model_input(s), params)
                loss = bce_with_logits(logits, s.mask.astype(np.float64))
                total = loss if total is None else ad.add(total, loss)
            total = ad.mul(total, 1.0 / len(batch))
            if not np.isfinite(total.item()):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch offset {lo} "
                    f"(seed {cfg.seed})")
            ad.backward(total)
            sgd_step(named, buffers, lr, cfg.momentum, cfg.weight_decay)
            losses.append(total.item())

        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses))}
        if val_samples:
            counts = evaluate(params, val_samples)
            row.update(val_precision=M.precision(counts),
                       val_recall=M.recall(counts),
                       val_f1=M.f1(counts), val_iou=M.iou(counts))
        else:
            row.update(val_precision=float("nan"), val_recall=float("nan"),
                       val_f1=float("nan"), val_iou=float("nan"))
        rows.append(row)
        if log_path:
            _append_log(log_path, row, header=(epoch == 0))
        if checkpoint_dir:
            save_checkpoint(
                os.path.join(checkpoint_dir, f"epoch_{epoch:04d}.ckpt"),
                epoch + 1, config_kv or {}, params, buffers, cfg)
        if epoch_callback:
            epoch_callback(epoch, row)
    return rows, buffers


def _append_log(path, row, header):
    mode = "w" if header and not os.path.exists(path) else "a"
    with open(path, mode) as f:
        if mode == "w":
            f.write(LOG_HEADER + "\n")
        f.write("{epoch},{lr:.10g},{train_loss:.10g},{val_precision:.6f},"
                "{val_recall:.6f},{val_f1:.6f},{val_iou:.6f}\n".format(**row))


# ---------------------------------------------------------------- checkpoint

def _write_blob(f, blob):
    f.write(struct.pack("<I", len(blob)))
    f.write(blob)


def _read_exact(f, n):
    blob = f.read(n)
    if len(blob) != n:
        raise ValueError(f"checkpoint truncated: wanted {n} bytes, got {len(blob)}")
    return blob


def _read_blob(f):
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n)


def _write_tensors(f, items):
    f.write(struct.pack("<I", len(items)))
    for name, arr in items:
        _write_blob(f, name.encode())
        f.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<Q", d))
        f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_tensors(f):
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    out = {}
    for _ in range(count):
        name = _read_blob(f).decode()
        (rank,) = struct.unpack("<I", _read_exact(f, 4))
        dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(_read_exact(f, 8 * n), dtype="<f8").reshape(dims)
        out[name] = arr.astype(np.float64)
    return out


def rng_state_words(cfg: TrainConfig, next_epoch):
    # the training RNG is re-derived from (seed, epoch) each epoch, so
    # (seed, next_epoch) captures the full stream position
    return (cfg.seed & 0xFFFFFFFFFFFFFFFF, next_epoch, 0, 0)


def save_checkpoint(path, epoch, config_kv, params, buffers, cfg: TrainConfig):
    named = list(named_parameters(params))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", epoch))
        lines = "".join(f"{k}={v}\n" for k, v in sorted(config_kv.items()))
        _write_blob(f, lines.encode())
        _write_tensors(f, [(n, p.data) for n, p in named])
        _write_tensors(f, sorted(buffers.items()))
        for wrd in rng_state_words(cfg, epoch):
            f.write(struct.pack("<Q", wrd))


def load_checkpoint(path):
    """Returns (epoch, config_kv, param_arrays, momentum_arrays, rng_words)."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (epoch,) = struct.unpack("<Q", _read_exact(f, 8))
        kv = {}
        for line in _read_blob(f).decode().splitlines():
            if line:
                k, _, v = line.partition("=")
                kv[k] = v
        tensors = _read_tensors(f)
        buffers = _read_tensors(f)
        rng_words = struct.unpack("<4Q", _read_exact(f, 32))
    return epoch, kv, tensors, buffers, rng_words


def restore_params(params, tensor_dict):
    for name, p in named_parameters(params):
        if name not in tensor_dict:
            raise ValueError(f"checkpoint missing tensor {name}")
        arr = tensor_dict[name]
        if arr.shape != p.data.shape:
            raise ValueError(
                f"checkpoint tensor {name} shape {arr.shape} != {p.data.shape}")
        p.data = np.ascontiguousarray(arr)
