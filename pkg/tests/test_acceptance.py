"""Acceptance suite: one test per criterion, each run at its stated tolerance.

A summary line per criterion is printed at the end of the pytest run (see
conftest.py). The toy-corpus learning checks share one set of trained models,
which takes about twenty minutes on a single core.
"""

import csv
import json
import math
import os
import subprocess
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
import scipy.stats as ss
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import f1_score

from beatvec.cli import classify_report, rank_report
from beatvec.dataset import dedup, ingest, read_dataset, write_dataset
from beatvec.errors import DataError
from beatvec.evalstats import ProbeHParams, f1_scores, levene_test, summarize_ranks, welch_t_test
from beatvec.lstm import LstmConfig, LstmHParams, LstmStack, record_index, train_lstm, windows
from beatvec.midi import read_song, write_smf
from beatvec.models import MODEL_KINDS, CorruptionKind, EmbeddingModel, HParams, ModelConfig, Trainer, corrupt, corrupt_dense, train_model
from beatvec.nn import (
    ELU,
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    Linear,
    LinearTied,
    Reshape,
    conv2d,
    conv2d_grad_input,
    grad_check,
    negsample_batch_loss,
    negsample_softmax_loss,
    sample_negatives,
)
from beatvec.nn.gradcheck import grad_check_input
from beatvec.pianoroll import UNIT_SHAPE, PianoRollUnit, fold_pitch, stack_units
from beatvec.toy import toy_dataset

# ---------------------------------------------------------------------------
# 1. gradient correctness


def _layer_error(layer, x, train=True, seed=0):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=layer.forward(x, train).shape)

    def loss_and_backward():
        for p in layer.parameters():
            p.zero_grad()
        y = layer.forward(x, train)
        layer.backward(c)
        return float((c * y).sum())

    worst = grad_check(loss_and_backward, layer.parameters(), max_per_param=30) if layer.parameters() else 0.0
    layer.forward(x, train)
    dx = layer.backward(c)
    return max(worst, grad_check_input(lambda z: float((c * layer.forward(z, train)).sum()), x, dx))


class _FrozenStats:
    """Batch norm whose running statistics survive finite-difference passes."""

    def __init__(self, bn):
        self.bn = bn

    def parameters(self):
        return self.bn.parameters()

    def forward(self, z, train=True):
        saved = self.bn.running_mean.copy(), self.bn.running_var.copy()
        y = self.bn.forward(z, train)
        self.bn.running_mean[:], self.bn.running_var[:] = saved
        return y

    def backward(self, g):
        return self.bn.backward(g)


def _layer_cases(rng):
    conv = Conv2d(2, 3, (3, 2), (2, 1), rng)
    conv.b.data[:] = rng.normal(size=3)
    yield "conv", conv, rng.normal(size=(2, 2, 7, 6)), True
    yield "conv-transpose", ConvTranspose2d(conv, (7, 6)), rng.normal(size=(2, 3, 3, 5)), True
    fc = Linear(7, 4, rng)
    yield "linear", fc, rng.normal(size=(5, 7)), True
    yield "linear-tied", LinearTied(fc), rng.normal(size=(5, 4)), True
    for train in (True, False):
        bn = BatchNorm(3)
        bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
        bn.beta.data[:] = rng.normal(size=3)
        bn.running_var[:] = rng.uniform(0.5, 2, 3)
        yield f"batchnorm-{'train' if train else 'eval'}", _FrozenStats(bn), rng.normal(size=(4, 3, 2, 3)) * 2 + 1, train
    yield "elu", ELU(), rng.normal(size=(4, 6)), True
    yield "reshape", Reshape((2, 3)), rng.normal(size=(4, 6)), True


def _model_error(kind):
    rng = np.random.default_rng(5)
    model = EmbeddingModel(ModelConfig.tiny(kind, n_composers=3, seed=2))
    trainer = Trainer(model, HParams(lam=0.7))
    x = (rng.random((6, 1) + UNIT_SHAPE) < 0.05).astype(float)
    t = (rng.random((6, 5760)) < 0.05).astype(float) * (2 if kind == "context" else 1)
    y = rng.integers(3, size=6)
    neg = sample_negatives(rng, 6)

    def loss_and_backward():
        for p in model.parameters():
            p.zero_grad()
        return trainer.loss_and_backward(x, t, y, neg)[0]

    return grad_check(loss_and_backward, model.parameters(), max_per_param=12, rng=np.random.default_rng(6))


def _lstm_error():
    rng = np.random.default_rng(3)
    stack = LstmStack(LstmConfig(input_dim=5, hidden=4, layers=3, output_dim=6, seed=3))
    x = rng.normal(size=(3, 7, 5))
    c = rng.normal(size=(3, 6))

    def loss_and_backward():
        for p in stack.parameters():
            p.zero_grad()
        y = stack.forward(x)
        stack.backward(c)
        return float((c * y).sum())

    worst = grad_check(loss_and_backward, stack.parameters(), max_per_param=30)
    stack.forward(x)
    dx = stack.backward(c)
    return max(worst, grad_check_input(lambda z: float((c * stack.forward(z)).sum()), x, dx))


def _adjoint_gap(kernel, stride, hw, rng):
    w = rng.normal(size=(3, 2) + kernel)
    x = rng.normal(size=(2, 2) + hw)
    y = rng.normal(size=conv2d(x, w, stride).shape)
    lhs = float(np.vdot(conv2d(x, w, stride), y))
    rhs = float(np.vdot(x, conv2d_grad_input(y, w, stride, hw)))
    return abs(lhs - rhs) / max(1.0, abs(lhs))


def test_criterion_1_gradient_correctness(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    errors = {name: _layer_error(layer, x, train) for name, layer, x, train in _layer_cases(rng)}
    errors |= {f"model:{k}": _model_error(k) for k in MODEL_KINDS}
    errors["lstm"] = _lstm_error()
    geometries = [((12, 6), (12, 6), (60, 96)), ((2, 4), (1, 2), (5, 16)), ((2, 2), (1, 1), (4, 7)), ((2, 2), (1, 1), (3, 6)), ((3, 2), (2, 3), (8, 9))]
    adjoint = max(_adjoint_gap(k, s, hw, rng) for k, s, hw in geometries)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    record_property("detail", f"worst grad rel err {errors[worst]:.1e} ({worst}), adjoint gap {adjoint:.1e}, {elapsed:.0f}s")
    assert all(e < 1e-4 for e in errors.values()), errors
    assert adjoint <= 1e-10
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 2. tied-weight contract


def test_criterion_2_tied_weight_contract(record_property):
    rng = np.random.default_rng(2)
    model = EmbeddingModel(ModelConfig.tiny("note-drop", seed=1))
    trainer = Trainer(model, HParams(lr=0.5))
    tied = [(layer, layer.tied) for layer in model.decoder.layers if isinstance(layer, (LinearTied, ConvTranspose2d))]
    before = [enc.W.data.copy() for _, enc in tied]
    for _ in range(100):
        x = (rng.random((8, 1) + UNIT_SHAPE) < 0.05).astype(float)
        trainer.opt.zero_grad()
        trainer.loss_and_backward(x, x.reshape(8, -1), None, sample_negatives(rng, 8))
        trainer.opt.step()
    moved = sum(not np.array_equal(b, enc.W.data) for b, (_, enc) in zip(before, tied))
    record_property("detail", f"{len(tied)} tied layers, {moved} moved by training")
    assert len(tied) == 7 and moved == len(tied)
    for dec, enc in tied:
        if isinstance(dec, LinearTied):
            assert np.array_equal(dec.weight_view(), enc.W.data.T)
            assert np.shares_memory(dec.weight_view(), enc.W.data)
        else:
            assert dec.W is enc.W


# ---------------------------------------------------------------------------
# 3. representation invariants

_units = st.sets(st.tuples(st.integers(0, 59), st.integers(0, 95)), max_size=150).map(PianoRollUnit)
_seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=300, deadline=None, database=None)
@given(_units, _seeds)
def _unit_and_corruption_invariants(u, seed):
    m = u.dense()
    assert m.shape == (60, 96) and m.dtype == np.uint8 and set(np.unique(m)) <= {0, 1}
    rng = np.random.default_rng(seed)
    kept = corrupt(u, CorruptionKind.NOTE_DROP, rng)
    assert len(kept) == len(u) - len(u) // 2 and set(kept.onsets) <= set(u.onsets)
    out = corrupt_dense(m, CorruptionKind.BEAT_DROP, rng)
    diff = [b for b in range(4) if not np.array_equal(out[:, 24 * b : 24 * b + 24], m[:, 24 * b : 24 * b + 24])]
    zeroed = [b for b in range(4) if not out[:, 24 * b : 24 * b + 24].any()]
    assert len(diff) <= 1 and set(diff) <= set(zeroed) and zeroed
    assert set(np.unique(out)) <= {0, 1}
    out = corrupt_dense(m, CorruptionKind.OCTAVE_SPLIT, rng)
    low_gone = not out[:24].any() and np.array_equal(out[24:], m[24:])
    high_gone = not out[24:].any() and np.array_equal(out[:24], m[:24])
    assert low_gone or high_gone


def test_criterion_3_representation_invariants(record_property):
    t0 = time.perf_counter()
    for p in range(128):
        row = fold_pitch(p)
        assert 0 <= row <= 59 and (row + 36 - p) % 12 == 0
        assert fold_pitch(row + 36) == row
        if 36 <= p <= 95:
            assert row == p - 36
    _unit_and_corruption_invariants()
    # both octave regions are reachable and have the stated sizes
    full = np.ones((60, 96), dtype=np.uint8)
    shapes = set()
    rng = np.random.default_rng(0)
    for _ in range(40):
        out = corrupt_dense(full, CorruptionKind.OCTAVE_SPLIT, rng)
        shapes.add(int((out == 0).sum()))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"128 pitches exhaustive, 300 random units, {elapsed:.0f}s")
    assert shapes == {24 * 96, 36 * 96}
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 4. MIDI round trip and parser fuzzing


def _expected_row(p):
    while p < 36:
        p += 12
    while p > 95:
        p -= 12
    return p - 36


def _expected_rolls(notes, division):
    grid = {(int(Fraction(t * 24, division) + Fraction(1, 2)), _expected_row(p)) for t, p in notes}
    n_beats = -(-(max(t for t, _ in grid) + 1) // 24)
    rolls = []
    for start in range(0, n_beats - 3, 4):
        m = np.zeros((60, 96), dtype=np.uint8)
        for t, r in grid:
            if 24 * start <= t < 24 * start + 96:
                m[r, t - 24 * start] = 1
        rolls.append(m)
    return rolls


def test_criterion_4_midi_round_trip_and_fuzz(tmp_path, record_property):
    rng = np.random.default_rng(4)
    expected, rows = {}, []
    for i in range(100):
        division = int(rng.choice([24, 96, 120, 192, 384, 480, 960]))
        n = int(rng.integers(1, 200))
        ticks = rng.integers(0, division * int(rng.integers(4, 40)), size=n)
        pitches = rng.integers(0, 128, size=n)
        notes = [(int(t), int(p)) for t, p in zip(ticks, pitches)]
        # guarantee at least one full unit
        notes.append((division * 4, int(rng.integers(36, 96))))
        name = f"f{i:03d}.mid"
        (tmp_path / name).write_bytes(write_smf(notes, division=division, n_tracks=int(rng.integers(1, 4))))
        rows.append({"path": name, "composer_name": f"c{i % 3}", "split": "train"})
        expected[name] = _expected_rolls(notes, division)
    with open(tmp_path / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["path", "composer_name", "split"])
        w.writeheader()
        w.writerows(rows)
    ds = ingest(tmp_path / "manifest.csv", tmp_path, augment_keys=False)
    write_dataset(ds, tmp_path / "rt.bvd")
    back = read_dataset(tmp_path / "rt.bvd")
    got = {}
    for r in back.records:
        got.setdefault(r.song_id, []).append(r.unit.dense())
    mismatched = [k for k in expected if len(got[k]) != len(expected[k]) or any(not np.array_equal(a, b) for a, b in zip(got[k], expected[k]))]

    # fuzz: pure noise, valid header with noisy tracks, and mutated real files
    t0 = time.perf_counter()
    seeds = [write_smf([(0, 60), (240, 64), (480, 67), (1000, 72)], division=d, n_tracks=k) for d, k in ((96, 1), (480, 2), (120, 3))]
    buf = rng.integers(0, 256, size=2**22, dtype=np.uint8).tobytes()
    lengths = rng.integers(0, 120, size=10**6)
    starts = rng.integers(0, len(buf) - 200, size=10**6)
    crashes, rejected = [], 0
    for i in range(10**6):
        noise = buf[starts[i] : starts[i] + lengths[i]]
        kind = i % 3
        if kind == 0:
            data = noise
        elif kind == 1:
            data = b"MThd\x00\x00\x00\x06\x00\x01\x00\x02\x00\x60MTrk" + noise[:4] + noise[4:]
        else:
            base = bytearray(seeds[i % len(seeds)])
            for j in range(0, min(len(noise), 12), 2):
                base[noise[j] * 7 % len(base)] = noise[j + 1] if j + 1 < len(noise) else 0
            data = bytes(base[: len(base) - (lengths[i] % 16)])
        try:
            read_song(data, "fuzz", 0)
        except DataError:
            rejected += 1
        except Exception as exc:  # any other exception is a crash
            crashes.append((i, repr(exc)))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"100 files bit-exact: {not mismatched}; 10^6 fuzz inputs, {rejected} rejected cleanly, {len(crashes)} crashes, {elapsed:.0f}s")
    assert not mismatched, mismatched[:5]
    assert not crashes, crashes[:5]


# ---------------------------------------------------------------------------
# 5. statistics oracle

_V1 = np.array([3, 17, 1, 45, 8, 2, 99, 5, 12, 7, 1, 33, 6, 4, 250, 9, 15, 2, 61, 11, 3, 8], dtype=float)
_V2 = np.array([12, 40, 7, 88, 23, 5, 150, 31, 9, 18, 66, 4, 27, 41, 13, 300, 2, 55, 19, 8, 75, 36, 14, 21, 6, 97, 44, 10, 3, 120, 28, 16, 49, 1, 11], dtype=float)
_V3 = np.array([5.5, 2.25, 9.0, 4.75, 3.0, 7.5, 1.0, 6.25, 8.0, 2.0, 5.0, 3.5, 4.0, 6.0, 10.5, 1.5, 7.0, 2.75, 3.25, 9.5, 4.5, 5.75, 8.5, 6.5], dtype=float)


def test_criterion_5_statistics_oracle(record_property):
    worst = {"moments": 0.0, "tests": 0.0, "f1": 0.0}
    for v in (_V1, _V2, _V3):
        s = summarize_ranks(v)
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        worst["moments"] = max(worst["moments"], abs(s.median - med), abs(s.spread - ss.iqr(v)), abs(s.skew - ss.skew(v, bias=False)), abs(s.q1 - q1), abs(s.q3 - q3))
    for a, b in ((_V1, _V2), (_V2, _V3), (_V1, _V3)):
        t, p = welch_t_test(a, b)
        ref = ss.ttest_ind(a, b, equal_var=False)
        worst["tests"] = max(worst["tests"], abs(t - ref.statistic), abs(p - ref.pvalue))
    for center in ("mean", "median"):
        w, p = levene_test([_V1, _V2, _V3], center=center)
        ref = ss.levene(_V1, _V2, _V3, center=center)
        worst["tests"] = max(worst["tests"], abs(w - ref.statistic), abs(p - ref.pvalue))
    rng = np.random.default_rng(5)
    for n, c in ((20, 3), (37, 4), (50, 5)):
        true = rng.integers(c, size=n)
        pred = np.where(rng.random(n) < 0.6, true, rng.integers(c, size=n))
        rep = f1_scores(pred, true, c)
        for avg, got in (("micro", rep.micro_f1), ("macro", rep.macro_f1), ("weighted", rep.weighted_f1)):
            ref = f1_score(true, pred, average=avg, labels=list(range(c)), zero_division=0)
            worst["f1"] = max(worst["f1"], abs(got - ref))
    # equal similarities: a constant reconstruction and target
    pos = np.ones(10)
    single, _, _ = negsample_softmax_loss(pos, pos, [pos] * 4)
    batch, _ = negsample_batch_loss(np.ones((6, 10)), np.ones((6, 10)), sample_negatives(rng, 6))
    log5_gap = max(abs(single - 1.6094379124341003), abs(batch - math.log(5)))
    record_property("detail", f"moments {worst['moments']:.1e}, tests {worst['tests']:.1e}, f1 {worst['f1']:.1e}, log5 {log5_gap:.1e}")
    assert worst["moments"] <= 1e-9
    assert worst["tests"] <= 1e-6
    assert worst["f1"] <= 1e-6
    assert log5_gap <= 1e-12


# ---------------------------------------------------------------------------
# 6 and 7. toy-corpus learning (shared trained models)

TOY_HP = HParams(lr=1.0, epochs=50)
TOY_SEED = 1
LSTM_HP = LstmHParams(lr=1.0, epochs=100)
RANK_POOL, RANK_SEED = 100, 5
AUTOENCODERS = ("note-drop", "beat-drop", "octave-split")


class ToyRuns:
    """Lazily trained toy models, shared by criteria 6 and 7."""

    def __init__(self):
        self.ds = toy_dataset(0)
        self.units = [r.unit for r in self.ds.records]
        self.train_windows = windows(self.ds, "train", record_index(self.ds))
        self.models, self.results, self.seconds = {}, {}, {}
        self._ranks, self._probes = {}, {}

    def model(self, name):
        if name not in self.models:
            t0 = time.perf_counter()
            if name == "untrained":
                self.models[name] = EmbeddingModel(ModelConfig("context", self.ds.n_composers, seed=TOY_SEED))
            else:
                kind, hp = name, TOY_HP
                if name.startswith("regularized-lam"):
                    kind = "regularized"
                    hp = HParams(lr=TOY_HP.lr, epochs=TOY_HP.epochs, lam=float(name.removeprefix("regularized-lam")))
                self.models[name], self.results[name] = train_model(self.ds, kind, hp, seed=TOY_SEED)
            self.seconds[name] = time.perf_counter() - t0
        return self.models[name]

    def median_rank(self, name):
        if name not in self._ranks:
            t0 = time.perf_counter()
            emb = self.model(name).embed_units(self.units)
            stack = LstmStack(LstmConfig(hidden=64, seed=3))
            train_lstm(stack, emb, self.train_windows, LSTM_HP)
            report = rank_report(self.ds, emb, stack, 10**9, RANK_POOL, RANK_SEED)
            self._ranks[name] = report["median_rank"]
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - t0
        return self._ranks[name]

    def probe_f1(self, name):
        if name not in self._probes:
            emb = self.model(name).embed_units(self.units)
            self._probes[name] = classify_report(self.ds, emb, emb, 0, ProbeHParams())["macro_f1"]
        return self._probes[name]

    def composer_head_f1(self):
        model = self.model("composer")
        test = dedup(self.ds.split_records("test"))
        logits = model.head.forward(model.encode_batch(stack_units([r.unit for r in test])), train=False)
        return f1_scores(logits.argmax(axis=1), [r.composer_id for r in test], self.ds.n_composers).macro_f1


@pytest.fixture(scope="module")
def toy():
    return ToyRuns()


def test_criterion_6_toy_corpus_learning(toy, record_property):
    counts = toy.ds.counts()
    head_f1 = toy.composer_head_f1()
    drops = {}
    for k in AUTOENCODERS:
        toy.model(k)
        res = toy.results[k]
        drops[k] = 1 - res.epoch_losses[-1] / res.initial_loss
    ranks = {k: toy.median_rank(k) for k in ("context", "untrained", "forward") + AUTOENCODERS}
    seconds = sum(toy.seconds[k] for k in ("composer", "context", "untrained", "forward") + AUTOENCODERS)
    checks = {
        "a": head_f1 >= 0.90,
        "b": all(d >= 0.30 for d in drops.values()),
        # an uninformed ranking of 1 true + 99 negatives has expected median 50.5
        "c": ranks["context"] <= 10 and abs(ranks["untrained"] - 50.5) <= 10,
        "d": ranks["context"] <= ranks["forward"] < min(ranks[k] for k in AUTOENCODERS),
        "runtime": seconds <= 30 * 60,
    }
    drop_txt = ", ".join(f"{k} {100 * d:.1f}%" for k, d in drops.items())
    rank_txt = ", ".join(f"{k} {v:g}" for k, v in ranks.items())
    record_property(
        "detail",
        f"{counts['total_units']} units; (a) composer F1 {head_f1:.3f}; (b) drops {drop_txt}; ranks {rank_txt}; {seconds / 60:.1f} min; "
        + " ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks.items()),
    )
    assert 1800 <= counts["total_units"] <= 2500
    assert all(checks.values()), checks


def test_criterion_7_regularization_consistency(toy, record_property):
    ctx, lam0 = toy.model("context"), toy.model("regularized-lam0")
    same_losses = toy.results["context"].epoch_losses == toy.results["regularized-lam0"].epoch_losses
    reg_state = [s for s in lam0.state() if not s[0].startswith("head.")]
    same_tensors = len(reg_state) == len(ctx.state()) and all(
        na == nb and a.tobytes() == b.tobytes() for (na, a), (nb, b) in zip(ctx.state(), reg_state)
    )
    f1_ctx, f1_reg = toy.probe_f1("context"), toy.probe_f1("regularized-lam1")
    record_property("detail", f"lambda=0 bit-identical: {same_losses and same_tensors}; probe macro-F1 regularized {f1_reg:.3f} vs context {f1_ctx:.3f}")
    assert same_losses and same_tensors
    assert f1_reg > f1_ctx


# ---------------------------------------------------------------------------
# 8. determinism across thread counts


def _pipeline(cwd: Path, threads: int):
    def run(*args):
        cmd = [sys.executable, "-m", "beatvec.cli", "--threads", str(threads), *map(str, args)]
        subprocess.run(cmd, cwd=cwd, check=True, capture_output=True, env=os.environ | {"BEATVEC_SEED": "1"})

    run("toy", "--out", "midi")
    run("ingest", "--manifest", "midi/manifest.csv", "--out", "toy.bvd")
    run("train", "--model", "regularized", "--data", "toy.bvd", "--lr", "1.0", "--epochs", "2", "--out", "reg.bvm")
    run("embed", "--ckpt", "reg.bvm", "--data", "toy.bvd", "--out", "reg.bve")
    run("train-lstm", "--embeddings", "reg.bve", "--data", "toy.bvd", "--epochs", "3", "--out", "lstm.bvm")
    run("eval-rank", "--lstm", "lstm.bvm", "--embeddings", "reg.bve", "--trials", "200", "--pool-size", "100", "--out", "rank.json")
    run("eval-classify", "--embeddings", "reg.bve", "--data", "toy.bvd", "--epochs", "20", "--out", "probe.json")
    return ["toy.bvd", "toy.bvd.manifest.json", "reg.bvm", "reg.bve", "reg.bve.config.json", "lstm.bvm", "rank.json", "probe.json"]


def test_criterion_8_determinism_across_threads(tmp_path, record_property):
    digests = {}
    for threads in (1, 4, 8):
        cwd = tmp_path / f"t{threads}"
        cwd.mkdir()
        names = _pipeline(cwd, threads)
        digests[threads] = {n: (cwd / n).read_bytes() for n in names}
    differing = sorted({n for t in (4, 8) for n in digests[1] if digests[t][n] != digests[1][n]})
    report = json.loads(digests[1]["rank.json"])
    record_property("detail", f"{len(digests[1])} files x 3 thread counts, differing: {differing or 'none'}; median rank {report['median_rank']:g}")
    assert not differing
