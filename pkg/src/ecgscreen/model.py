"""Residual 1D convolutional multi-label ECG classifier.

Topology: stem conv -> BN -> ReLU, then four residual blocks (conv ->
BN -> ReLU -> dropout -> strided conv, added to a max-pooled and, when
widths change, 1x1-projected skip), then flatten -> dense -> ReLU,
concatenation of normalized age and sex, and a final dense layer per
label. Training operates on logits; sigmoid is applied at prediction
time only. All convolutions use odd kernels with same-padding, so a
stride-s layer maps length T to ceil(T/s), matching the ceil-mode pool
on the skip path.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadMagic,
    ConfigInvalid,
    EmptyTrainingSet,
    LabelWidthMismatch,
    TensorShapeMismatch,
    TruncatedFile,
    VersionMismatch,
)
from .nn import ops
from .nn.optim import AdamState, adam_step
from .nn.tensor import Graph, Tensor
from .signals import N_LEADS, NormalizationStats

_STREAM_INIT = 1
_STREAM_SHUFFLE = 2


@dataclass(frozen=True)
class BlockSpec:
    channels: int
    kernel: int
    subsample: int

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigInvalid(f"block channels must be >= 1, got {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigInvalid(f"block kernel must be odd, got {self.kernel}")
        if self.subsample < 1:
            raise ConfigInvalid(f"subsample must be >= 1, got {self.subsample}")


@dataclass(frozen=True)
class ModelConfig:
    input_len: int
    n_labels: int
    stem: tuple[int, int] = (16, 17)
    blocks: tuple[BlockSpec, BlockSpec, BlockSpec, BlockSpec] = (
        BlockSpec(16, 9, 4),
        BlockSpec(32, 9, 4),
        BlockSpec(48, 9, 4),
        BlockSpec(64, 9, 4),
    )
    dropout_rate: float = 0.2
    embed_dim: int = 32
    input_leads: int = N_LEADS

    def __post_init__(self):
        if self.input_len < 1 or self.n_labels < 1 or self.embed_dim < 1:
            raise ConfigInvalid("input_len, n_labels, embed_dim must be >= 1")
        if self.input_leads < 1:
            raise ConfigInvalid("input_leads must be >= 1")
        if len(self.blocks) != 4:
            raise ConfigInvalid(f"exactly 4 residual blocks required, got {len(self.blocks)}")
        if self.stem[0] < 1 or self.stem[1] < 1 or self.stem[1] % 2 == 0:
            raise ConfigInvalid(f"stem (channels, kernel) invalid: {self.stem}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigInvalid(f"dropout_rate must be in [0,1), got {self.dropout_rate}")

    def block_lengths(self) -> list[int]:
        """Temporal length entering each block and the final length."""
        lengths = [self.input_len]
        for b in self.blocks:
            lengths.append(-(-lengths[-1] // b.subsample))
        return lengths

    @property
    def flat_features(self) -> int:
        return self.blocks[-1].channels * self.block_lengths()[-1]

    def to_json(self) -> dict:
        return {
            "input_len": self.input_len,
            "n_labels": self.n_labels,
            "stem": list(self.stem),
            "blocks": [[b.channels, b.kernel, b.subsample] for b in self.blocks],
            "dropout_rate": self.dropout_rate,
            "embed_dim": self.embed_dim,
            "input_leads": self.input_leads,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(
            input_len=int(obj["input_len"]),
            n_labels=int(obj["n_labels"]),
            stem=tuple(obj["stem"]),
            blocks=tuple(BlockSpec(*spec) for spec in obj["blocks"]),
            dropout_rate=float(obj["dropout_rate"]),
            embed_dim=int(obj["embed_dim"]),
            input_leads=int(obj["input_leads"]),
        )


class EcgResNet:
    """Parameter container plus the forward pass. Single-owner, not thread-safe."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(np.random.SeedSequence((seed, _STREAM_INIT)))

        def conv(name, c_out, c_in, k):
            bound = np.sqrt(6.0 / (c_in * k))
            self.params[f"{name}.w"] = Tensor(
                rng.uniform(-bound, bound, (c_out, c_in, k)).astype(np.float32),
                requires_grad=True,
            )
            self.params[f"{name}.b"] = Tensor(np.zeros(c_out, np.float32), requires_grad=True)

        def bn(name, c):
            self.params[f"{name}.gamma"] = Tensor(np.ones(c, np.float32), requires_grad=True)
            self.params[f"{name}.beta"] = Tensor(np.zeros(c, np.float32), requires_grad=True)
            self.buffers[f"{name}.running_mean"] = np.zeros(c, np.float32)
            self.buffers[f"{name}.running_var"] = np.ones(c, np.float32)

        def dense(name, f_in, f_out):
            bound = np.sqrt(6.0 / f_in)
            self.params[f"{name}.w"] = Tensor(
                rng.uniform(-bound, bound, (f_in, f_out)).astype(np.float32),
                requires_grad=True,
            )
            self.params[f"{name}.b"] = Tensor(np.zeros(f_out, np.float32), requires_grad=True)

        conv("stem.conv", cfg.stem[0], cfg.input_leads, cfg.stem[1])
        bn("stem.bn", cfg.stem[0])
        c_in = cfg.stem[0]
        for i, b in enumerate(cfg.blocks, start=1):
            conv(f"block{i}.conv1", b.channels, c_in, b.kernel)
            bn(f"block{i}.bn1", b.channels)
            conv(f"block{i}.conv2", b.channels, b.channels, b.kernel)
            if b.channels != c_in:
                conv(f"block{i}.proj", b.channels, c_in, 1)
            bn(f"block{i}.bn2", b.channels)
            c_in = b.channels
        dense("embed", cfg.flat_features, cfg.embed_dim)
        dense("head", cfg.embed_dim + 2, cfg.n_labels)

    # -- parameter plumbing ------------------------------------------------

    def parameter_list(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def state_snapshot(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.params.items()}
        out.update({name: buf.copy() for name, buf in self.buffers.items()})
        return out

    def load_snapshot(self, snapshot: dict[str, np.ndarray]):
        for name, p in self.params.items():
            if snapshot[name].shape != p.data.shape:
                raise TensorShapeMismatch(
                    f"{name}: snapshot {snapshot[name].shape} vs model {p.data.shape}"
                )
            p.data[...] = snapshot[name]
        for name, buf in self.buffers.items():
            buf[...] = snapshot[name]

    # -- forward -----------------------------------------------------------

    def _bn(self, x, name, train):
        return ops.batchnorm1d(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            train=train,
        )

    def forward(self, signal: Tensor, demo: Tensor, train: bool, step: int = 0) -> Tensor:
        """Logits (N, L) from signal (N, leads, T) and demo (N, 2)."""
        cfg = self.cfg
        h = ops.conv1d(signal, self.params["stem.conv.w"], self.params["stem.conv.b"],
                       stride=1, pad=cfg.stem[1] // 2)
        h = ops.relu(self._bn(h, "stem.bn", train))
        layer_id = 0
        for i, b in enumerate(cfg.blocks, start=1):
            p = ops.conv1d(h, self.params[f"block{i}.conv1.w"],
                           self.params[f"block{i}.conv1.b"], stride=1, pad=b.kernel // 2)
            p = ops.relu(self._bn(p, f"block{i}.bn1", train))
            layer_id += 1
            p = ops.dropout(p, cfg.dropout_rate, train, seed=self.seed,
                            layer_id=layer_id, step=step)
            p = ops.conv1d(p, self.params[f"block{i}.conv2.w"],
                           self.params[f"block{i}.conv2.b"],
                           stride=b.subsample, pad=b.kernel // 2)
            skip = h
            if b.subsample > 1:
                skip = ops.maxpool1d(skip, k=b.subsample, stride=b.subsample, ceil_mode=True)
            if f"block{i}.proj.w" in self.params:
                skip = ops.conv1d(skip, self.params[f"block{i}.proj.w"],
                                  self.params[f"block{i}.proj.b"], stride=1, pad=0)
            h = ops.relu(self._bn(ops.add(p, skip), f"block{i}.bn2", train))
            layer_id += 1
            h = ops.dropout(h, cfg.dropout_rate, train, seed=self.seed,
                            layer_id=layer_id, step=step)
        h = ops.flatten(h)
        h = ops.relu(ops.dense(h, self.params["embed.w"], self.params["embed.b"]))
        h = ops.concat([h, demo], axis=1)
        return ops.dense(h, self.params["head.w"], self.params["head.b"])


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 512
    max_epochs: int = 40
    patience: int = 7
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigInvalid("batch_size must be >= 1")
        if self.max_epochs < 1 or self.patience < 0 or self.eval_every < 1:
            raise ConfigInvalid("max_epochs >= 1, patience >= 0, eval_every >= 1 required")

    def to_json(self) -> dict:
        return {
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        return cls(**{k: obj[k] for k in
                      ("lr", "batch_size", "max_epochs", "patience", "seed", "eval_every")})


@dataclass(frozen=True)
class TrainData:
    """Normalized model inputs with labels and row provenance, row-aligned."""

    signal: np.ndarray       # (N, leads, T) float32
    demo: np.ndarray         # (N, 2) float32: age z-score, sex bit
    labels: np.ndarray       # (N, L) float32 in {0,1}
    ecg_ids: tuple[int, ...]
    patient_ids: tuple[int, ...]

    def __post_init__(self):
        n = self.signal.shape[0]
        if not (self.demo.shape == (n, 2) and self.labels.shape[0] == n
                and len(self.ecg_ids) == n and len(self.patient_ids) == n):
            raise LabelWidthMismatch("row-aligned arrays disagree on row count")

    def __len__(self):
        return self.signal.shape[0]


def assemble_inputs(rows: Sequence[int], traces_by_id: dict, stats: NormalizationStats,
                    label_bits: np.ndarray) -> TrainData:
    """Stack normalized rows (in the given order) against their label rows."""
    signals = np.empty((len(rows), N_LEADS, next(iter(traces_by_id.values())).n_samples),
                       dtype=np.float32) if rows else np.empty((0, N_LEADS, 0), np.float32)
    demo = np.empty((len(rows), 2), dtype=np.float32)
    patient_ids = []
    for i, ecg_id in enumerate(rows):
        trace = traces_by_id[ecg_id]
        signals[i] = (trace.samples - stats.lead_mean[:, None]) / stats.lead_std[:, None]
        demo[i, 0] = (trace.meta.age_years - stats.age_mean) / stats.age_std
        demo[i, 1] = trace.meta.sex.bit
        patient_ids.append(trace.meta.patient_id)
    return TrainData(
        signal=signals,
        demo=demo,
        labels=np.asarray(label_bits, dtype=np.float32),
        ecg_ids=tuple(rows),
        patient_ids=tuple(patient_ids),
    )


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_loss: Optional[float]
    total_steps: int


def _mean_loss(model: EcgResNet, data: TrainData, batch_size: int) -> float:
    """Eval-mode loss over all rows, batch-weighted; no graph recorded."""
    total = 0.0
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        logits = model.forward(Tensor(data.signal[sl]), Tensor(data.demo[sl]), train=False)
        loss = ops.bce_with_logits(logits, data.labels[sl])
        total += loss.data.item() * logits.data.shape[0]
    return total / len(data)


def train(model: EcgResNet, train_data: TrainData, val_data: Optional[TrainData],
          tcfg: TrainConfig) -> TrainResult:
    """Adam on logit binary cross-entropy with best-validation early stopping.

    With val_data=None the loop runs exactly max_epochs and keeps the
    final parameters (used by the retraining stage, which inherits its
    epoch budget from a validated run).
    """
    if len(train_data) == 0:
        raise EmptyTrainingSet("no training rows")
    for name, data in (("train", train_data), ("val", val_data)):
        if data is not None and data.labels.shape[1] != model.cfg.n_labels:
            raise LabelWidthMismatch(
                f"{name} labels have {data.labels.shape[1]} columns, model expects "
                f"{model.cfg.n_labels}"
            )
    params = model.parameter_list()
    state = AdamState(params, lr=tcfg.lr)
    history: list[dict] = []
    best_val = None
    best_epoch = 0
    best_snapshot = None
    stale = 0
    step = 0
    n = len(train_data)
    for epoch in range(1, tcfg.max_epochs + 1):
        order = np.random.default_rng(
            np.random.SeedSequence((tcfg.seed, _STREAM_SHUFFLE, epoch))
        ).permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            xb = Tensor(np.ascontiguousarray(train_data.signal[idx]))
            db = Tensor(np.ascontiguousarray(train_data.demo[idx]))
            yb = train_data.labels[idx]
            model.zero_grads()
            with Graph() as g:
                logits = model.forward(xb, db, train=True, step=step)
                loss = ops.bce_with_logits(logits, yb)
            g.backward(loss)
            adam_step(state)
            epoch_loss += loss.data.item() * len(idx)
            step += 1
        entry = {"epoch": epoch, "train_loss": epoch_loss / n, "val_loss": None}
        if val_data is not None and (epoch % tcfg.eval_every == 0 or epoch == tcfg.max_epochs):
            val_loss = _mean_loss(model, val_data, tcfg.batch_size)
            entry["val_loss"] = val_loss
            if best_val is None or val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_snapshot = model.state_snapshot()
                stale = 0
            else:
                stale += 1
            history.append(entry)
            if stale >= tcfg.patience > 0:
                break
        else:
            history.append(entry)
    if val_data is None:
        best_epoch = history[-1]["epoch"]
    elif best_snapshot is not None:
        model.load_snapshot(best_snapshot)
    return TrainResult(history=history, best_epoch=best_epoch,
                       best_val_loss=best_val, total_steps=step)


def predict(model: EcgResNet, data: TrainData, batch_size: int = 512) -> np.ndarray:
    """(N, L) probabilities, eval mode, rows in input order."""
    out = np.empty((len(data), model.cfg.n_labels), dtype=np.float32)
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        logits = model.forward(Tensor(data.signal[sl]), Tensor(data.demo[sl]), train=False)
        out[sl] = ops.sigmoid(logits).data
    return out


# --- ECGN checkpoint format ----------------------------------------------

_CKPT_MAGIC = b"ECGN"
_CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sH")


def _write_record(f, name: str, arr: np.ndarray):
    encoded = name.encode("utf-8")
    data = np.ascontiguousarray(arr, dtype="<f4")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", data.ndim))
    for dim in data.shape:
        f.write(struct.pack("<I", dim))
    f.write(data.tobytes())


def save_checkpoint(model: EcgResNet, path, stats: Optional[NormalizationStats] = None,
                    metadata: Optional[dict] = None, adam: Optional[AdamState] = None):
    header = {
        "config": model.cfg.to_json(),
        "stats": stats.to_json() if stats is not None else None,
        "metadata": dict(metadata or {}),
        "seed": model.seed,
    }
    if adam is not None:
        header["adam"] = {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1,
                          "beta2": adam.beta2, "eps": adam.eps}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_HEADER.pack(_CKPT_MAGIC, _CKPT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name, p in model.params.items():
            _write_record(f, name, p.data)
        for name, buf in model.buffers.items():
            _write_record(f, name, buf)
        if adam is not None:
            names = list(model.params)
            for prefix, moments in (("adam.m", adam.m), ("adam.v", adam.v)):
                for name, moment in zip(names, moments):
                    _write_record(f, f"{prefix}.{name}", moment)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.raw):
            raise TruncatedFile(f"{self.path}: truncated at byte {self.offset}")
        chunk = self.raw[self.offset : self.offset + n]
        self.offset += n
        return chunk

    @property
    def exhausted(self) -> bool:
        return self.offset >= len(self.raw)


def load_checkpoint(path) -> tuple[EcgResNet, Optional[NormalizationStats], dict,
                                   Optional[AdamState]]:
    """Rebuild the model (and optional Adam state) from an ECGN file."""
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw, path)
    magic, version = _CKPT_HEADER.unpack(r.take(_CKPT_HEADER.size))
    if magic != _CKPT_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != _CKPT_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {_CKPT_VERSION}")
    (blob_len,) = struct.unpack("<I", r.take(4))
    header = json.loads(r.take(blob_len).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    while not r.exhausted:
        (name_len,) = struct.unpack("<H", r.take(2))
        name = r.take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", r.take(1))
        shape = tuple(struct.unpack("<I", r.take(4))[0] for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        tensors[name] = data.copy()

    cfg = ModelConfig.from_json(header["config"])
    model = EcgResNet(cfg, seed=int(header.get("seed", 0)))
    expected = dict(model.params)
    expected_buffers = dict(model.buffers)
    for name, p in expected.items():
        if name not in tensors:
            raise TensorShapeMismatch(f"{path}: missing parameter {name}")
        if tensors[name].shape != p.data.shape:
            raise TensorShapeMismatch(
                f"{path}: {name} has shape {tensors[name].shape}, expected {p.data.shape}"
            )
        p.data[...] = tensors[name]
    for name, buf in expected_buffers.items():
        if name not in tensors:
            raise TensorShapeMismatch(f"{path}: missing buffer {name}")
        buf[...] = tensors[name]

    stats = (NormalizationStats.from_json(header["stats"])
             if header.get("stats") is not None else None)
    adam = None
    if "adam" in header:
        spec = header["adam"]
        adam = AdamState(model.parameter_list(), lr=spec["lr"], beta1=spec["beta1"],
                         beta2=spec["beta2"], eps=spec["eps"])
        adam.t = int(spec["t"])
        names = list(model.params)
        adam.m = [tensors[f"adam.m.{name}"].copy() for name in names]
        adam.v = [tensors[f"adam.v.{name}"].copy() for name in names]
    return model, stats, dict(header.get("metadata", {})), adam
