"""Stacked LSTM over unit embeddings, trained by backpropagation through time.

Given the embeddings of seven consecutive units it predicts the embedding of
the eighth. Training uses the same negative-sampling cosine softmax as the
embedding models: the prediction is the query, the true next embedding and
four other targets from the batch are the candidates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import io
from .dataset import Dataset, UnitRecord
from .nn import SGD, DivergedTraining, Parameter, negsample_batch_loss, sample_negatives
from .nn.layers import ShapeMismatch, glorot_uniform

log = logging.getLogger(__name__)

CONTEXT_UNITS = 7
WINDOW = CONTEXT_UNITS + 1


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class LstmConfig:
    input_dim: int = io.EMBED_DIM
    hidden: int = 64
    layers: int = 3
    output_dim: int = io.EMBED_DIM
    forget_bias: float = 1.0
    seed: int = 0


class LstmStack:
    """``layers`` LSTM cells of ``hidden`` units plus a linear read-out.

    Gate rows of each weight matrix are ordered input, forget, cell, output.
    """

    def __init__(self, config: LstmConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 7])
        h = config.hidden
        self.W, self.b = [], []
        d_in = config.input_dim
        for l in range(config.layers):
            self.W.append(Parameter(f"lstm{l}.W", glorot_uniform(rng, (4 * h, d_in + h), d_in + h, 4 * h)))
            b = np.zeros(4 * h)
            b[h : 2 * h] = config.forget_bias
            self.b.append(Parameter(f"lstm{l}.b", b))
            d_in = h
        self.P = Parameter("proj.W", glorot_uniform(rng, (config.output_dim, h), h, config.output_dim))
        self.bp = Parameter("proj.b", np.zeros(config.output_dim))
        self._cache = None

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b in zip(self.W, self.b):
            out += [w, b]
        return out + [self.P, self.bp]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """x: (N, T, input_dim) -> prediction (N, output_dim) after step T."""
        if x.ndim != 3 or x.shape[2] != self.config.input_dim:
            raise ShapeMismatch(f"LSTM input {x.shape}, expected (N, T, {self.config.input_dim})")
        n, steps, _ = x.shape
        hid = self.config.hidden
        layer_in = x
        cache = []
        for W, b in zip(self.W, self.b):
            h = np.zeros((n, hid))
            c = np.zeros((n, hid))
            hs, steps_cache = [], []
            for t in range(steps):
                xh = np.concatenate([layer_in[:, t], h], axis=1)
                z = xh @ W.data.T + b.data
                i = sigmoid(z[:, :hid])
                f = sigmoid(z[:, hid : 2 * hid])
                g = np.tanh(z[:, 2 * hid : 3 * hid])
                o = sigmoid(z[:, 3 * hid :])
                c_prev = c
                c = f * c_prev + i * g
                tc = np.tanh(c)
                h = o * tc
                hs.append(h)
                steps_cache.append((xh, i, f, g, o, c_prev, tc))
            cache.append(steps_cache)
            layer_in = np.stack(hs, axis=1)
        top = layer_in[:, -1]
        self._cache = (cache, top, x.shape)
        return top @ self.P.data.T + self.bp.data

    def backward(self, dy: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns d loss / d x."""
        cache, top, (n, steps, d_in) = self._cache
        hid = self.config.hidden
        self.P.grad += dy.T @ top
        self.bp.grad += dy.sum(axis=0)
        dh_out = np.zeros((n, steps, hid))
        dh_out[:, -1] = dy @ self.P.data
        for l in reversed(range(len(self.W))):
            W = self.W[l]
            width = W.data.shape[1] - hid
            dx = np.zeros((n, steps, width))
            dh_next = np.zeros((n, hid))
            dc_next = np.zeros((n, hid))
            for t in reversed(range(steps)):
                xh, i, f, g, o, c_prev, tc = cache[l][t]
                dh = dh_out[:, t] + dh_next
                do = dh * tc
                dc = dc_next + dh * o * (1.0 - tc**2)
                di = dc * g
                dg = dc * i
                df = dc * c_prev
                dc_next = dc * f
                dz = np.concatenate(
                    [di * i * (1 - i), df * f * (1 - f), dg * (1 - g**2), do * o * (1 - o)], axis=1
                )
                W.grad += dz.T @ xh
                self.b[l].grad += dz.sum(axis=0)
                dxh = dz @ W.data
                dx[:, t] = dxh[:, :width]
                dh_next = dxh[:, width:]
            dh_out = dx
        return dh_out

    def state(self):
        return [(p.name, p.data) for p in self.parameters()]

    def load_state(self, tensors):
        for p in self.parameters():
            p.data[...] = tensors[p.name]

    def save(self, path, extra: dict | None = None):
        io.write_checkpoint(path, "lstm", {"lstm": asdict(self.config)} | dict(extra or {}), self.state())

    @classmethod
    def load(cls, path):
        kind, cfg, tensors = io.read_checkpoint(path)
        if kind != "lstm":
            raise ValueError(f"checkpoint holds a {kind!r} model, not an LSTM")
        stack = cls(LstmConfig(**cfg["lstm"]))
        stack.load_state(tensors)
        return stack, cfg


def lstm_forward(stack: LstmStack, inputs: np.ndarray) -> np.ndarray:
    """Prediction for a single 7x100 context."""
    return stack.forward(np.asarray(inputs, dtype=np.float64)[None])[0]


# --------------------------------------------------------------------------
# sequence windows
# --------------------------------------------------------------------------


def record_key(r: UnitRecord) -> tuple:
    return (r.song_id, r.transposition, r.beat_offset)


def windows(dataset: Dataset, split: str, index_of: dict) -> np.ndarray:
    """(M, 8) record indices of every 8-unit run in the tiled sequences."""
    out = []
    for seq in dataset.sequences(split):
        ids = [index_of[record_key(r)] for r in seq]
        for s in range(len(ids) - WINDOW + 1):
            out.append(ids[s : s + WINDOW])
    return np.array(out, dtype=np.int64).reshape(-1, WINDOW)


def record_index(dataset: Dataset) -> dict:
    return {record_key(r): i for i, r in enumerate(dataset.records)}


@dataclass
class LstmHParams:
    lr: float = 0.1
    epochs: int = 20
    batch: int = 100
    clip: float = 5.0


@dataclass
class LstmResult:
    initial_loss: float
    epoch_losses: list[float] = field(default_factory=list)


def _loss(stack, emb, win, rng, backward):
    x = emb[win[:, :CONTEXT_UNITS]]
    target = emb[win[:, CONTEXT_UNITS]]
    pred = stack.forward(x)
    neg = sample_negatives(rng, len(win))
    loss, _, dpred = negsample_batch_loss(pred, target, neg, target_grad=True)
    if backward:
        stack.backward(dpred)
    return loss


def train_lstm(stack: LstmStack, embeddings: np.ndarray, train_windows: np.ndarray, hp: LstmHParams, progress=None) -> LstmResult:
    """``embeddings`` is indexed by record index; windows hold record indices."""
    if len(train_windows) == 0:
        raise ValueError("no training sequences of 8 consecutive units")
    seed = stack.config.seed
    order_rng = np.random.default_rng([seed, 1])
    neg_rng = np.random.default_rng([seed, 3])
    eval_rng = np.random.default_rng([seed, 4])
    opt = SGD(stack.parameters(), lr=hp.lr, clip_norm=hp.clip)

    def batches(rng):
        perm = rng.permutation(len(train_windows))
        for s in range(0, len(perm), hp.batch):
            yield train_windows[perm[s : s + hp.batch]]

    losses, sizes = [], []
    for win in batches(eval_rng):
        losses.append(_loss(stack, embeddings, win, eval_rng, backward=False))
        sizes.append(len(win))
    result = LstmResult(float(np.average(losses, weights=sizes)))
    for epoch in range(hp.epochs):
        losses, sizes = [], []
        for win in batches(order_rng):
            opt.zero_grad()
            loss = _loss(stack, embeddings, win, neg_rng, backward=True)
            if not math.isfinite(loss):
                raise DivergedTraining(f"LSTM loss became {loss}")
            opt.step()
            losses.append(loss)
            sizes.append(len(win))
        mean = float(np.average(losses, weights=sizes))
        result.epoch_losses.append(mean)
        if progress is not None:
            progress(epoch + 1, mean)
        log.info("lstm epoch %d loss %.6f", epoch + 1, mean)
    return result


def predict(stack: LstmStack, embeddings: np.ndarray, win: np.ndarray, batch: int = 512) -> np.ndarray:
    out = np.empty((len(win), stack.config.output_dim))
    for s in range(0, len(win), batch):
        out[s : s + batch] = stack.forward(embeddings[win[s : s + batch, :CONTEXT_UNITS]])
    return out
