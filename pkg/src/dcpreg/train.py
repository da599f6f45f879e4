"""Optimization loop, metric aggregation, and checkpointing.

Training is fully deterministic given (config, seed): initialization, data
order, and gradient accumulation order are all derived from the seed, so
identical runs produce bitwise-identical checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dcpnet
from . import geometry as geo
from .errors import CheckpointError, NumericalError, ShapeError

CHECKPOINT_MAGIC = b"DCPK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {"<f4": 1, "<f8": 2, "<i8": 3, "|u1": 4}
_CODE_DTYPES = {v: np.dtype(k) for k, v in _DTYPE_CODES.items()}


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> OptimizerState:
    """One Adam update over all parameters, in fixed dictionary order.

    Decoupled weight decay shrinks each parameter before its moment update;
    bias-corrected moments drive the step. NaN gradients abort loudly.
    """
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        if state.weight_decay:
            p.data = p.data - (state.lr * state.weight_decay) * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / c1
        v_hat = v / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def lr_schedule(
    epoch: int,
    base_lr: float = 1e-3,
    milestones: tuple[int, ...] = (75, 150, 200),
    factor: float = 0.1,
) -> float:
    """Piecewise-constant decay: divide by 1/factor at each milestone epoch."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    drops = sum(1 for m in milestones if epoch >= m)
    return base_lr * factor**drops


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    """Pooled per-axis rotation (degrees) and per-component translation errors."""

    mse_r: float
    rmse_r: float
    mae_r: float
    mse_t: float
    rmse_t: float
    mae_t: float
    n_pairs: int = 0

    COLUMNS = ("mse_r", "rmse_r", "mae_r", "mse_t", "rmse_t", "mae_t")

    def row(self) -> list[float]:
        return [self.mse_r, self.rmse_r, self.mae_r, self.mse_t, self.rmse_t, self.mae_t]


def pool_metrics(errors: list[geo.TransformErrors]) -> Metrics:
    """Aggregate per-pair errors over all axes/components and samples."""
    if not errors:
        raise ValueError("cannot pool an empty error list")
    rot_sq = np.concatenate([e.rot_sq_deg for e in errors])
    rot_abs = np.concatenate([e.rot_abs_deg for e in errors])
    trans_sq = np.concatenate([e.trans_sq for e in errors])
    trans_abs = np.concatenate([e.trans_abs for e in errors])
    mse_r = float(rot_sq.mean())
    mse_t = float(trans_sq.mean())
    return Metrics(
        mse_r=mse_r,
        rmse_r=float(np.sqrt(mse_r)),
        mae_r=float(rot_abs.mean()),
        mse_t=mse_t,
        rmse_t=float(np.sqrt(mse_t)),
        mae_t=float(trans_abs.mean()),
        n_pairs=len(errors),
    )


def evaluate(model: dcpnet.ModelParams, pairs) -> Metrics:
    """Run inference over pairs and pool the errors against ground truth."""
    errors = []
    for pair in pairs:
        pred = dcpnet.dcp_predict(pair.source, pair.target, model)
        errors.append(geo.rotation_metrics(pred, pair.ground_truth))
    return pool_metrics(errors)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    base_lr: float = 1e-3
    lr_milestones: tuple[int, ...] = (15, 30, 40)
    lr_factor: float = 0.1
    weight_decay: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.1
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    out_dir: str | None = None

    @staticmethod
    def paper_schedule(**overrides) -> "TrainConfig":
        """Full-scale preset: 250 epochs with drops at 75/150/200."""
        base = dict(epochs=250, lr_milestones=(75, 150, 200))
        base.update(overrides)
        return TrainConfig(**base)


LOG_COLUMNS = ("epoch", "lr", "train_loss") + Metrics.COLUMNS


def _format_row(values) -> str:
    return ",".join(f"{v:.10g}" if isinstance(v, float) else str(v) for v in values)


def write_training_log(rows: list[dict], path) -> None:
    lines = [",".join(LOG_COLUMNS)]
    for row in rows:
        lines.append(_format_row([row[c] for c in LOG_COLUMNS]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def train(
    model_cfg: dcpnet.ModelConfig,
    train_pairs,
    val_pairs=None,
    cfg: TrainConfig = TrainConfig(),
) -> tuple[dcpnet.ModelParams, list[dict]]:
    """Train a registration model; returns final parameters and the log.

    The log holds one row per epoch: learning rate, mean training loss, and
    validation metrics. A non-finite loss aborts with the most recent
    checkpoint left on disk.
    """
    train_pairs = list(train_pairs)
    if not train_pairs:
        raise ValueError("training set is empty")
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    init_seed = int(seeds[0].generate_state(1)[0])
    shuffle_rng = np.random.default_rng(seeds[1])

    if val_pairs is None:
        n_val = max(1, int(round(cfg.val_fraction * len(train_pairs)))) if len(train_pairs) > 1 else 0
        val_pairs = train_pairs[len(train_pairs) - n_val :]
        train_pairs = train_pairs[: len(train_pairs) - n_val] or val_pairs

    model = dcpnet.ModelParams.initialize(model_cfg, seed=init_seed)
    state = OptimizerState(lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    log: list[dict] = []
    for epoch in range(cfg.epochs):
        state.lr = lr_schedule(epoch, cfg.base_lr, cfg.lr_milestones, cfg.lr_factor)
        order = shuffle_rng.permutation(len(train_pairs))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            model.zero_grad()
            batch_loss = 0.0
            for idx in batch:
                pair = train_pairs[idx]
                with ad.Tape() as tape:
                    out = dcpnet.dcp_forward(pair.source, pair.target, model, training=True)
                    loss = dcpnet.dcp_loss(out.rotation, out.translation, pair.ground_truth)
                if not np.isfinite(loss.data):
                    raise NumericalError(
                        f"non-finite training loss at epoch {epoch}; last checkpoint retained"
                    )
                ad.backward(tape, loss)
                batch_loss += loss.item()
            epoch_loss += batch_loss
            scale = 1.0 / len(batch)
            grads = {
                name: (p.grad * scale).astype(p.dtype) if p.grad is not None else None
                for name, p in model.params.items()
            }
            adam_step(model.params, grads, state)

        row = {"epoch": epoch, "lr": state.lr, "train_loss": epoch_loss / len(train_pairs)}
        if val_pairs:
            metrics = evaluate(model, val_pairs)
            row.update({c: getattr(metrics, c) for c in Metrics.COLUMNS})
        else:
            row.update({c: float("nan") for c in Metrics.COLUMNS})
        log.append(row)

        if out_dir:
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, out_dir / "checkpoints" / f"epoch_{epoch:04d}.dcpk")
            save_checkpoint(model, out_dir / "checkpoints" / "model_final.dcpk")
            write_training_log(log, out_dir / "training_log.csv")

    return model, log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _encode_record(name: str, arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr)
    key = data.dtype.newbyteorder("<").str if data.dtype.kind == "f" or data.dtype.kind == "i" else "|u1"
    if data.dtype == np.float32:
        data, key = data.astype("<f4"), "<f4"
    elif data.dtype == np.float64:
        data, key = data.astype("<f8"), "<f8"
    elif data.dtype == np.int64:
        data, key = data.astype("<i8"), "<i8"
    elif data.dtype == np.uint8:
        key = "|u1"
    else:
        raise CheckpointError(f"unsupported array dtype {data.dtype} for record {name!r}")
    name_bytes = name.encode("utf-8")
    head = struct.pack("<I", len(name_bytes)) + name_bytes
    head += struct.pack("<BB", _DTYPE_CODES[key], data.ndim)
    head += struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b""
    return head + data.tobytes()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk


def _decode_record(reader: _Reader) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", reader.take(4))
    name = reader.take(name_len).decode("utf-8")
    code, rank = struct.unpack("<BB", reader.take(2))
    if code not in _CODE_DTYPES:
        raise CheckpointError(f"unknown dtype code {code} in record {name!r}")
    shape = struct.unpack(f"<{rank}Q", reader.take(8 * rank)) if rank else ()
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(reader.take(count * dtype.itemsize), dtype=dtype).reshape(shape)
    return name, arr.copy()


def save_checkpoint(model: dcpnet.ModelParams, path) -> None:
    """Write the binary container: magic, version, count-prefixed records."""
    records = []
    cfg_json = json.dumps(dataclasses.asdict(model.config), sort_keys=True).encode("utf-8")
    records.append(_encode_record("__config__", np.frombuffer(cfg_json, dtype=np.uint8)))
    for name, tensorv in model.params.items():
        records.append(_encode_record(f"param/{name}", tensorv.data))
    for name, st in model.bn_states.items():
        records.append(_encode_record(f"bnstate/{name}/mean", st.running_mean))
        records.append(_encode_record(f"bnstate/{name}/var", st.running_var))
    blob = CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + struct.pack("<I", len(records))
    Path(path).write_bytes(blob + b"".join(records))


def _config_from_dict(raw: dict) -> dcpnet.ModelConfig:
    tupled = dict(raw)
    for key in ("widths", "mlp_head_widths"):
        if tupled.get(key) is not None:
            tupled[key] = tuple(tupled[key])
    return dcpnet.ModelConfig(**tupled)


def load_checkpoint(path, expected_dtype: str | None = None) -> dcpnet.ModelParams:
    """Read a checkpoint back into model parameters.

    ``expected_dtype`` guards against silently loading weights saved at a
    different precision than the caller's configuration.
    """
    blob = Path(path).read_bytes()
    reader = _Reader(blob)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint file")
    (version,) = struct.unpack("<I", reader.take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", reader.take(4))
    records = dict(_decode_record(reader) for _ in range(count))
    if "__config__" not in records:
        raise CheckpointError(f"{path}: missing model configuration record")
    config = _config_from_dict(json.loads(records.pop("__config__").tobytes().decode("utf-8")))
    if expected_dtype is not None and config.dtype != expected_dtype:
        raise CheckpointError(
            f"{path}: checkpoint dtype {config.dtype} does not match requested {expected_dtype}"
        )
    params: dict[str, ad.Tensor] = {}
    bn_arrays: dict[str, dict[str, np.ndarray]] = {}
    for name, arr in records.items():
        if name.startswith("param/"):
            if arr.dtype != config.np_dtype:
                raise CheckpointError(f"{path}: record {name!r} dtype {arr.dtype} != {config.dtype}")
            params[name[len("param/") :]] = ad.tensor(arr, requires_grad=True)
        elif name.startswith("bnstate/"):
            _, bn_name, kind = name.split("/", 2)
            bn_arrays.setdefault(bn_name, {})[kind] = arr
        else:
            raise CheckpointError(f"{path}: unexpected record {name!r}")
    bn_states = {}
    for bn_name, parts in bn_arrays.items():
        if set(parts) != {"mean", "var"}:
            raise CheckpointError(f"{path}: incomplete normalization state for {bn_name!r}")
        bn_states[bn_name] = ad.BatchNormState(running_mean=parts["mean"], running_var=parts["var"])
    return dcpnet.ModelParams(config, params, bn_states)
