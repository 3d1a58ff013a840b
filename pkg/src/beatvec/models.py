"""The seven embedding models and their training loops.

Every model shares one encoder: four valid convolutions followed by three
fully-connected layers ending in the 100-d embedding, each layer followed by
batch norm and ELU. Reconstruction models add a decoder that mirrors the
encoder through tied weights (transposed convolutions and transposed FC
maps over the encoder's own parameter objects). Classification models add a
softmax head on the embedding; the regularized model has both.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import io
from .dataset import Dataset, UnitRecord, dedup
from .nn import (
    ELU,
    SGD,
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    DivergedTraining,
    Linear,
    LinearTied,
    Reshape,
    Sequential,
    negsample_batch_loss,
    sample_negatives,
    softmax_cross_entropy,
)
from .pianoroll import TICKS_PER_BEAT, UNIT_SHAPE, UNIT_SIZE, PianoRollUnit, stack_units

log = logging.getLogger(__name__)

EMBED_DIM = io.EMBED_DIM
LOWER_OCTAVES_ROWS = 24  # rows 0..23, two octaves
AUX_HIDDEN = 50

# RNG stream offsets derived from the master seed
STREAM_INIT, STREAM_ORDER, STREAM_CORRUPT, STREAM_NEGATIVES, STREAM_EVAL = range(5)


class CorruptionKind(enum.Enum):
    NOTE_DROP = "note-drop"
    BEAT_DROP = "beat-drop"
    OCTAVE_SPLIT = "octave-split"


MODEL_KINDS = ("note-drop", "beat-drop", "octave-split", "forward", "context", "composer", "regularized")
RECONSTRUCTION_KINDS = ("note-drop", "beat-drop", "octave-split", "forward", "context", "regularized")
CLASSIFIER_KINDS = ("composer", "regularized")
SEQUENCE_KINDS = ("forward", "context", "regularized")


def stream(seed: int, offset: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), offset])


# --------------------------------------------------------------------------
# corruption
# --------------------------------------------------------------------------


def corrupt_dense(matrix: np.ndarray, kind: CorruptionKind, rng: np.random.Generator) -> np.ndarray:
    """Corrupted copy of a 60x96 onset matrix."""
    kind = CorruptionKind(kind)
    out = np.array(matrix, copy=True)
    if kind is CorruptionKind.NOTE_DROP:
        on = np.flatnonzero(out)
        drop = rng.choice(on.size, size=on.size // 2, replace=False)
        out.reshape(-1)[on[drop]] = 0
    elif kind is CorruptionKind.BEAT_DROP:
        beat = int(rng.integers(4))
        out[:, beat * TICKS_PER_BEAT : (beat + 1) * TICKS_PER_BEAT] = 0
    else:
        if rng.random() < 0.5:
            out[:LOWER_OCTAVES_ROWS] = 0
        else:
            out[LOWER_OCTAVES_ROWS:] = 0
    return out


def corrupt(unit: PianoRollUnit, kind: CorruptionKind, rng: np.random.Generator) -> PianoRollUnit:
    return PianoRollUnit.from_dense(corrupt_dense(unit.dense(), kind, rng))


# --------------------------------------------------------------------------
# architecture
# --------------------------------------------------------------------------


@dataclass
class ModelConfig:
    kind: str
    n_composers: int = 0
    conv_channels: tuple = (32, 64, 64, 64)
    conv_kernels: tuple = ((12, 6), (2, 4), (2, 2), (2, 2))
    conv_strides: tuple = ((12, 6), (1, 2), (1, 1), (1, 1))
    fc_sizes: tuple = (400, 200, EMBED_DIM)
    aux_hidden: int = AUX_HIDDEN
    seed: int = 0

    @classmethod
    def tiny(cls, kind: str, n_composers: int = 0, seed: int = 0) -> "ModelConfig":
        return cls(kind, n_composers, conv_channels=(8, 8, 8, 8), fc_sizes=(32, 16, EMBED_DIM), seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("conv_channels", "fc_sizes"):
            d[k] = list(d[k])
        for k in ("conv_kernels", "conv_strides"):
            d[k] = [list(v) for v in d[k]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        d["fc_sizes"] = tuple(d["fc_sizes"])
        d["conv_kernels"] = tuple(tuple(v) for v in d["conv_kernels"])
        d["conv_strides"] = tuple(tuple(v) for v in d["conv_strides"])
        return cls(**d)


class EmbeddingModel:
    """Encoder plus whichever decoder and/or composer head the kind needs."""

    def __init__(self, config: ModelConfig):
        if config.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {config.kind!r}")
        if config.kind in CLASSIFIER_KINDS and config.n_composers < 2:
            raise ValueError("composer classification needs at least 2 composers")
        self.config = config
        rng = stream(config.seed, STREAM_INIT)
        self.convs, self.fcs = [], []
        enc = []
        shape = (1,) + UNIT_SHAPE
        shapes = [shape]
        c_in = 1
        for i, (c, k, s) in enumerate(zip(config.conv_channels, config.conv_kernels, config.conv_strides), 1):
            conv = Conv2d(c_in, c, k, s, rng, bias=False, name=f"enc.conv{i}")
            self.convs.append(conv)
            enc += [conv, BatchNorm(c, name=f"enc.bn{i}"), ELU()]
            shape = conv.output_shape(shape)
            shapes.append(shape)
            c_in = c
        self.conv_out_shape = shape
        flat = int(np.prod(shape))
        enc.append(Reshape((flat,)))
        d_in = flat
        for j, d in enumerate(config.fc_sizes, len(self.convs) + 1):
            fc = Linear(d_in, d, rng, bias=False, name=f"enc.fc{j}")
            self.fcs.append(fc)
            enc += [fc, BatchNorm(d, name=f"enc.bn{j}"), ELU()]
            d_in = d
        if d_in != EMBED_DIM:
            raise ValueError(f"encoder must end in {EMBED_DIM} units")
        self.encoder = Sequential(enc)
        self.layer_shapes = shapes[1:] + [(d,) for d in config.fc_sizes]

        self.decoder = None
        if config.kind in RECONSTRUCTION_KINDS:
            dec = []
            fc_in = [flat] + list(config.fc_sizes[:-1])
            for j in reversed(range(len(self.fcs))):
                fc = self.fcs[j]
                dec += [LinearTied(fc, bias=False, name=f"dec.fc{j + 5}"), BatchNorm(fc_in[j], name=f"dec.bnfc{j + 5}"), ELU()]
            dec.append(Reshape(self.conv_out_shape))
            for i in reversed(range(len(self.convs))):
                conv = self.convs[i]
                target_hw = shapes[i][1:]
                if i > 0:
                    dec += [
                        ConvTranspose2d(conv, target_hw, bias=False, name=f"dec.conv{i + 1}"),
                        BatchNorm(shapes[i][0], name=f"dec.bnconv{i + 1}"),
                        ELU(),
                    ]
                else:
                    # linear reconstruction output with its own bias
                    dec.append(ConvTranspose2d(conv, target_hw, bias=True, name="dec.out"))
            self.decoder = Sequential(dec)

        self.head = None
        if config.kind == "composer":
            self.head = Sequential([Linear(EMBED_DIM, config.n_composers, rng, name="head.out")])
        elif config.kind == "regularized":
            self.head = Sequential(
                [
                    Linear(EMBED_DIM, config.aux_hidden, rng, name="head.hidden"),
                    ELU(),
                    Linear(config.aux_hidden, config.n_composers, rng, name="head.out"),
                ]
            )

    @property
    def kind(self) -> str:
        return self.config.kind

    def parts(self) -> list[Sequential]:
        return [p for p in (self.encoder, self.decoder, self.head) if p is not None]

    def parameters(self):
        seen, out = set(), []
        for part in self.parts():
            for p in part.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def batchnorms(self) -> list[BatchNorm]:
        return [bn for part in self.parts() for bn in part.batchnorms()]

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def encode_batch(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.encoder.forward(x, train)

    def encode(self, unit: PianoRollUnit) -> np.ndarray:
        """Embedding of one unit, eval mode (running batch-norm statistics)."""
        return self.encode_batch(stack_units([unit]))[0]

    def embed_units(self, units, batch_size: int = 256) -> np.ndarray:
        units = list(units)
        out = np.empty((len(units), EMBED_DIM))
        for s in range(0, len(units), batch_size):
            out[s : s + batch_size] = self.encode_batch(stack_units(units[s : s + batch_size]))
        return out

    # checkpoint state -------------------------------------------------

    def state(self) -> list[tuple[str, np.ndarray]]:
        tensors = [(p.name, p.data) for p in self.parameters()]
        for bn in self.batchnorms():
            name = bn.gamma.name.rsplit(".", 1)[0]
            tensors.append((f"{name}.running_mean", bn.running_mean))
            tensors.append((f"{name}.running_var", bn.running_var))
        return tensors

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data[...] = tensors[p.name]
        for bn in self.batchnorms():
            name = bn.gamma.name.rsplit(".", 1)[0]
            bn.running_mean[...] = tensors[f"{name}.running_mean"]
            bn.running_var[...] = tensors[f"{name}.running_var"]

    def save(self, path, extra: dict | None = None) -> None:
        cfg = {"model": self.config.to_dict()} | dict(extra or {})
        io.write_checkpoint(path, self.kind, cfg, self.state())

    @classmethod
    def load(cls, path) -> tuple["EmbeddingModel", dict]:
        kind, cfg, tensors = io.read_checkpoint(path)
        if kind not in MODEL_KINDS:
            raise ValueError(f"checkpoint holds a {kind!r} model, not an embedding model")
        model = cls(ModelConfig.from_dict(cfg["model"]))
        model.load_state(tensors)
        return model, cfg


# --------------------------------------------------------------------------
# training data
# --------------------------------------------------------------------------


@dataclass
class TaskData:
    """Dense uint8 inputs plus flattened targets and/or composer labels."""

    inputs: np.ndarray  # (N, 60, 96) uint8
    targets: np.ndarray | None = None  # (N, 5760) uint8, values 0..2
    labels: np.ndarray | None = None  # (N,) int

    def __len__(self):
        return len(self.inputs)


def _dense(units) -> np.ndarray:
    units = list(units)
    out = np.zeros((len(units),) + UNIT_SHAPE, dtype=np.uint8)
    for i, u in enumerate(units):
        if len(u):
            r, t = zip(*u.onsets)
            out[i, list(r), list(t)] = 1
    return out


def pool_task(records: list[UnitRecord], with_targets: bool = True) -> TaskData:
    x = _dense(r.unit for r in records)
    labels = np.array([r.composer_id for r in records], dtype=np.int64)
    return TaskData(x, x.reshape(len(x), UNIT_SIZE) if with_targets else None, labels)


def sequence_task(sequences: list[list[UnitRecord]], kind: str) -> TaskData:
    """(U_i -> U_{i+1}) pairs for ``forward``; (U_i -> U_{i-1} + U_{i+1}) otherwise."""
    centre, target, labels = [], [], []
    for seq in sequences:
        dense = _dense(r.unit for r in seq)
        if kind == "forward":
            rng_i = range(0, len(seq) - 1)
        else:
            rng_i = range(1, len(seq) - 1)
        for i in rng_i:
            centre.append(dense[i])
            if kind == "forward":
                target.append(dense[i + 1])
            else:
                target.append(dense[i - 1] + dense[i + 1])
            labels.append(seq[i].composer_id)
    if not centre:
        raise ValueError("no usable sequence positions")
    x = np.stack(centre)
    y = np.stack(target).reshape(len(x), UNIT_SIZE)
    return TaskData(x, y, np.array(labels, dtype=np.int64))


def task_for(dataset: Dataset, kind: str, split: str = "train") -> TaskData:
    if kind in SEQUENCE_KINDS:
        return sequence_task(dataset.sequences(split), kind)
    return pool_task(dataset.training_pool(split), with_targets=kind != "composer")


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class HParams:
    lr: float = 0.01
    epochs: int = 10
    batch: int = 100
    lam: float = 1.0
    clip: float = 5.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    initial_loss: float
    epoch_losses: list[float] = field(default_factory=list)
    epoch_parts: list[dict] = field(default_factory=list)


class Trainer:
    """Mini-batch SGD over a ``TaskData`` for one ``EmbeddingModel``."""

    def __init__(self, model: EmbeddingModel, hp: HParams):
        self.model = model
        self.hp = hp
        seed = model.config.seed
        self.order_rng = stream(seed, STREAM_ORDER)
        self.corrupt_rng = stream(seed, STREAM_CORRUPT)
        self.neg_rng = stream(seed, STREAM_NEGATIVES)
        self.opt = SGD(model.parameters(), lr=hp.lr, clip_norm=hp.clip)
        corruption = {k.value: k for k in CorruptionKind}
        self.corruption = corruption.get(model.kind)

    def _inputs(self, data: TaskData, idx, rng) -> np.ndarray:
        x = data.inputs[idx]
        if self.corruption is not None:
            x = np.stack([corrupt_dense(m, self.corruption, rng) for m in x])
        return x.astype(np.float64)[:, None]

    def loss_and_backward(self, x, targets, labels, neg_idx, train=True, backward=True):
        """Forward (and backward) one batch; returns (total, parts)."""
        m = self.model
        h = m.encoder.forward(x, train)
        total, parts = 0.0, {}
        dh = None
        if m.decoder is not None:
            r = m.decoder.forward(h, train)
            loss, dr = negsample_batch_loss(targets, r.reshape(len(r), -1), neg_idx)
            parts["reconstruction"] = loss
            total += loss
            if backward:
                dh = m.decoder.backward(dr.reshape(r.shape))
        if m.head is not None:
            weight = self.hp.lam if m.kind == "regularized" else 1.0
            logits = m.head.forward(h, train)
            loss, dl = softmax_cross_entropy(logits, labels)
            parts["composer"] = loss
            total += weight * loss
            if backward:
                dh_aux = m.head.backward(weight * dl)
                dh = dh_aux if dh is None else dh + dh_aux
        if backward:
            m.encoder.backward(dh)
        return total, parts

    def _batches(self, n, rng):
        perm = rng.permutation(n)
        for s in range(0, n, self.hp.batch):
            yield perm[s : s + self.hp.batch]

    def evaluate(self, data: TaskData) -> float:
        """Mean batch loss under batch statistics, leaving all state untouched."""
        bns = self.model.batchnorms()
        saved = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in bns]
        rng = stream(self.model.config.seed, STREAM_EVAL)
        losses, sizes = [], []
        for idx in self._batches(len(data), rng):
            x = self._inputs(data, idx, rng)
            t = data.targets[idx].astype(np.float64) if data.targets is not None else None
            y = data.labels[idx] if data.labels is not None else None
            neg = sample_negatives(rng, len(idx))
            loss, _ = self.loss_and_backward(x, t, y, neg, train=True, backward=False)
            losses.append(loss)
            sizes.append(len(idx))
        for bn, (mu, var) in zip(bns, saved):
            bn.running_mean[...] = mu
            bn.running_var[...] = var
        return float(np.average(losses, weights=sizes))

    def fit(self, data: TaskData, progress=None) -> TrainResult:
        if len(data) == 0:
            raise ValueError("empty training set")
        result = TrainResult(initial_loss=self.evaluate(data))
        for epoch in range(self.hp.epochs):
            losses, sizes, parts_acc = [], [], {}
            for idx in self._batches(len(data), self.order_rng):
                x = self._inputs(data, idx, self.corrupt_rng)
                t = data.targets[idx].astype(np.float64) if data.targets is not None else None
                y = data.labels[idx] if data.labels is not None else None
                neg = sample_negatives(self.neg_rng, len(idx))
                self.opt.zero_grad()
                loss, parts = self.loss_and_backward(x, t, y, neg)
                if not math.isfinite(loss):
                    raise DivergedTraining(f"loss became {loss} in epoch {epoch + 1}")
                self.opt.step()
                losses.append(loss)
                sizes.append(len(idx))
                for k, v in parts.items():
                    parts_acc.setdefault(k, []).append(v)
            mean = float(np.average(losses, weights=sizes))
            result.epoch_losses.append(mean)
            result.epoch_parts.append({k: float(np.average(v, weights=sizes)) for k, v in parts_acc.items()})
            if progress is not None:
                progress(epoch + 1, mean)
            log.info("%s epoch %d loss %.6f", self.model.kind, epoch + 1, mean)
        return result


def train_model(dataset: Dataset, kind: str, hp: HParams, seed: int = 0, config: ModelConfig | None = None, progress=None):
    """Build, train and return ``(model, result)`` for one of the seven kinds."""
    config = config or ModelConfig(kind, n_composers=dataset.n_composers, seed=seed)
    model = EmbeddingModel(config)
    data = task_for(dataset, kind)
    result = Trainer(model, hp).fit(data, progress)
    return model, result


def train_autoencoder(dataset, kind: CorruptionKind, hp: HParams, seed=0, **kw):
    return train_model(dataset, CorruptionKind(kind).value, hp, seed, **kw)


def train_forward(dataset, hp: HParams, seed=0, **kw):
    return train_model(dataset, "forward", hp, seed, **kw)


def train_context(dataset, hp: HParams, seed=0, **kw):
    return train_model(dataset, "context", hp, seed, **kw)


def train_composer(dataset, hp: HParams, seed=0, **kw):
    if len({r.composer_id for r in dedup(dataset.split_records("train"))}) < 2:
        raise ValueError("composer classification needs at least 2 composers in the training pool")
    return train_model(dataset, "composer", hp, seed, **kw)


def train_regularized(dataset, hp: HParams, seed=0, **kw):
    return train_model(dataset, "regularized", hp, seed, **kw)
