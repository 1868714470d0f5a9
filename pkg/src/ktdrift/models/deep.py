"""DKT (LSTM) and SAKT (causal self-attention) trained on the numcore tape."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import numcore as nc
from ..logstore import StudentSequence, Vocabulary

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hyperparams:
    num_steps: int
    batch_size: int
    d_model: int
    num_epochs: int
    dropout_rate: float
    learn_rate: float
    reg_lambda: float | None = None
    num_heads: int | None = None
    learn_decay_rate: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_HYPER = {
    "DKT": Hyperparams(40, 16, 96, 100, 0.278, 2e-3, reg_lambda=1.4e-5),
    "SAKT-E": Hyperparams(60, 64, 352, 23, 0.47, 1e-4, num_heads=8, learn_decay_rate=0.7),
    "SAKT-KC": Hyperparams(100, 48, 128, 25, 0.188, 1e-4, num_heads=16, learn_decay_rate=0.868),
}

UNIT = {"DKT": "KC", "SAKT-KC": "KC", "SAKT-E": "Exercise"}
OOV_SUBSTITUTION_RATE = 0.1


def ids_for(seq: StudentSequence, unit: str) -> np.ndarray:
    if unit == "KC":
        return seq.kc
    if unit == "Exercise":
        return seq.exercise
    raise ValueError(f"unknown unit {unit!r}")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    """Left-padded windows. ``prev_ids == -1`` marks the start token (and padding)."""

    prev_ids: np.ndarray
    prev_resp: np.ndarray
    target_ids: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    origin_seq: np.ndarray
    origin_step: np.ndarray

    @property
    def shape(self):
        return self.mask.shape


def _windows(sequences, num_steps: int, unit: str, id_arrays=None):
    for i, seq in enumerate(sequences):
        ids = ids_for(seq, unit) if id_arrays is None else id_arrays[i]
        n = len(seq)
        for a in range(0, n, num_steps):
            yield i, ids, seq.correct, a, min(a + num_steps, n)


def _pack(windows, num_steps: int) -> Batch:
    B, T = len(windows), num_steps
    prev_ids = np.full((B, T), -1, dtype=np.int64)
    prev_resp = np.zeros((B, T), dtype=np.int64)
    target = np.zeros((B, T), dtype=np.int64)
    labels = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    oseq = np.full((B, T), -1, dtype=np.int64)
    ostep = np.full((B, T), -1, dtype=np.int64)
    for r, (i, ids, correct, a, b) in enumerate(windows):
        off = T - (b - a)
        target[r, off:] = ids[a:b]
        labels[r, off:] = correct[a:b]
        mask[r, off:] = True
        oseq[r, off:] = i
        ostep[r, off:] = np.arange(a, b)
        if a > 0:
            prev_ids[r, off:] = ids[a - 1:b - 1]
            prev_resp[r, off:] = correct[a - 1:b - 1]
        else:
            prev_ids[r, off + 1:] = ids[a:b - 1]
            prev_resp[r, off + 1:] = correct[a:b - 1]
    return Batch(prev_ids, prev_resp, target, labels, mask, oseq, ostep)


def make_batches(sequences, num_steps: int, batch_size: int, unit: str = "KC",
                 seed: int | None = 0, shuffle: bool = True, id_arrays=None) -> list[Batch]:
    """Cut each sequence into non-overlapping windows and group them into batches.

    At window position ``t`` the input is interaction ``t-1`` (the start token
    at a student's first interaction) and the target is interaction ``t``.
    """
    windows = list(_windows(sequences, num_steps, unit, id_arrays))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(windows))
        windows = [windows[k] for k in order]
    return [_pack(windows[k:k + batch_size], num_steps) for k in range(0, len(windows), batch_size)]


# ---------------------------------------------------------------------------
# DKT
# ---------------------------------------------------------------------------

def init_dkt(n_ids: int, d: int, rng: np.random.Generator) -> dict:
    s = 1.0 / math.sqrt(d)
    b_x = rng.uniform(-s, s, 4 * d)
    b_x[d:2 * d] += 1.0  # forget gate
    return {
        "W_x": rng.uniform(-s, s, (2 * n_ids, 4 * d)),
        "b_x": b_x,
        "W_h": rng.uniform(-s, s, (d, 4 * d)),
        "b_h": rng.uniform(-s, s, 4 * d),
        "W_out": rng.uniform(-s, s, (d, n_ids)),
        "b_out": rng.uniform(-s, s, n_ids),
    }


def dkt_forward(params: dict, batch: Batch, dropout_rate: float = 0.0,
                rng: np.random.Generator | None = None) -> nc.Tensor:
    """Per-KC correctness probabilities, shape (B, T, K).

    Dropout is applied to the LSTM output only when ``rng`` is given.
    """
    W_x, W_h = nc.as_tensor(params["W_x"]), nc.as_tensor(params["W_h"])
    n_in, d = W_x.shape[0], W_h.shape[0]
    B, T = batch.shape
    started = batch.prev_ids >= 0
    idx = np.where(started, batch.prev_ids * 2 + batch.prev_resp, 0)
    if n_in > 4 * d:
        xp = nc.mul(nc.embedding(W_x, idx), started[..., None].astype(float))
    else:
        onehot = np.zeros((B, T, n_in))
        onehot[started, idx[started]] = 1.0
        xp = nc.matmul(onehot, W_x)
    xp = nc.add(nc.add(xp, params["b_x"]), params["b_h"])

    h = nc.Tensor(np.zeros((B, d)))
    c = nc.Tensor(np.zeros((B, d)))
    valid = batch.mask[..., None].astype(float)
    hs = []
    for t in range(T):
        z = nc.add(nc.getitem(xp, (slice(None), t)), nc.matmul(h, W_h))
        i = nc.sigmoid(z[:, :d])
        f = nc.sigmoid(z[:, d:2 * d])
        g = nc.tanh(z[:, 2 * d:3 * d])
        o = nc.sigmoid(z[:, 3 * d:])
        c = nc.mul(nc.add(nc.mul(f, c), nc.mul(i, g)), valid[:, t])
        h = nc.mul(nc.mul(o, nc.tanh(c)), valid[:, t])
        hs.append(h)
    H = nc.dropout(nc.stack(hs, axis=1), dropout_rate, rng)
    return nc.sigmoid(nc.add(nc.matmul(H, params["W_out"]), params["b_out"]))


def dkt_target_probs(params, batch, dropout_rate=0.0, rng=None) -> nc.Tensor:
    return nc.take_last(dkt_forward(params, batch, dropout_rate, rng), batch.target_ids)


# ---------------------------------------------------------------------------
# SAKT
# ---------------------------------------------------------------------------

def init_sakt(n_ids: int, d: int, num_steps: int, rng: np.random.Generator) -> dict:
    s = 1.0 / math.sqrt(d)

    def u(*shape):
        return rng.uniform(-s, s, shape)

    return {
        "E_int": u(2 * n_ids + 1, d),
        "R": u(2, d),
        "P": u(num_steps, d),
        "E_q": u(n_ids, d),
        "W_q": u(d, d),
        "W_k": u(d, d),
        "W_v": u(d, d),
        "W_o": u(d, d),
        "ln1_g": np.ones(d),
        "ln1_b": np.zeros(d),
        "W_1": u(d, d),
        "b_1": np.zeros(d),
        "W_2": u(d, d),
        "b_2": np.zeros(d),
        "ln2_g": np.ones(d),
        "ln2_b": np.zeros(d),
        "W_y": u(d, 1),
        "b_y": np.zeros(1),
    }


def attention_mask(batch: Batch) -> np.ndarray:
    """(B, 1, T, T) mask: query t sees keys j <= t that hold a real input, and itself."""
    T = batch.shape[1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    keys = batch.mask[:, None, :] | np.eye(T, dtype=bool)[None]
    return (causal[None] & keys)[:, None]


def sakt_forward(params: dict, batch: Batch, num_heads: int, dropout_rate: float = 0.0,
                 rng: np.random.Generator | None = None) -> nc.Tensor:
    """P(correct) at every window position, shape (B, T)."""
    E_int = nc.as_tensor(params["E_int"])
    d = E_int.shape[1]
    if d % num_heads:
        raise ValueError(f"d_model={d} is not divisible by num_heads={num_heads}")
    B, T = batch.shape
    dh = d // num_heads
    started = batch.prev_ids >= 0
    int_idx = np.where(started, 1 + 2 * batch.prev_ids + batch.prev_resp, 0)
    z = nc.add(nc.add(nc.embedding(E_int, int_idx), nc.embedding(params["R"], batch.prev_resp)),
               nc.getitem(params["P"], slice(0, T)))
    q_emb = nc.embedding(params["E_q"], batch.target_ids)

    def heads(x):
        return nc.transpose(nc.reshape(x, (B, T, num_heads, dh)), (0, 2, 1, 3))

    q = heads(nc.matmul(q_emb, params["W_q"]))
    k = heads(nc.matmul(z, params["W_k"]))
    v = heads(nc.matmul(z, params["W_v"]))
    scores = nc.mul(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    weights = nc.softmax_lastdim(scores, attention_mask(batch))
    ctx = nc.reshape(nc.transpose(nc.matmul(weights, v), (0, 2, 1, 3)), (B, T, d))
    attn = nc.dropout(nc.matmul(ctx, params["W_o"]), dropout_rate, rng)
    o = nc.layer_norm(nc.add(q_emb, attn), params["ln1_g"], params["ln1_b"])
    ff = nc.add(nc.matmul(nc.relu(nc.add(nc.matmul(o, params["W_1"]), params["b_1"])), params["W_2"]),
                params["b_2"])
    o = nc.layer_norm(nc.add(o, nc.dropout(ff, dropout_rate, rng)), params["ln2_g"], params["ln2_b"])
    logits = nc.add(nc.matmul(o, params["W_y"]), params["b_y"])
    return nc.sigmoid(nc.reshape(logits, (B, T)))


# ---------------------------------------------------------------------------
# fitted models
# ---------------------------------------------------------------------------

def target_probs(family: str, params, batch: Batch, hyper: Hyperparams,
                 rng: np.random.Generator | None = None) -> nc.Tensor:
    rate = hyper.dropout_rate if rng is not None else 0.0
    if family == "DKT":
        return dkt_target_probs(params, batch, rate, rng)
    return sakt_forward(params, batch, hyper.num_heads, rate, rng)


def batch_loss(family, params, batch, hyper, rng=None) -> nc.Tensor:
    return nc.bce_loss(target_probs(family, params, batch, hyper, rng), batch.labels, batch.mask)


def count_params_dkt(n_ids: int, d: int) -> int:
    # W_x, W_h, two bias vectors per gate block, dense head
    return 2 * n_ids * 4 * d + d * 4 * d + 8 * d + d * n_ids + n_ids


def count_params_sakt(n_ids: int, d: int, num_steps: int) -> int:
    return (3 * n_ids + num_steps + 10) * d + 6 * d * d + 1


@dataclass(frozen=True)
class DeepModel:
    family: str
    params: dict
    hyper: Hyperparams
    vocab: Vocabulary
    seed: int = 0
    curve: tuple = ()
    eval_batch_size: int = field(default=256, compare=False)

    @property
    def unit(self) -> str:
        return UNIT[self.family]

    @property
    def n_ids(self) -> int:
        return self.vocab.n_kcs if self.unit == "KC" else self.vocab.n_exercises

    def predict(self, sequences) -> list[np.ndarray]:
        """Deterministic per-interaction probabilities (dropout off)."""
        out = [np.empty(len(s)) for s in sequences]
        batches = make_batches(sequences, self.hyper.num_steps, self.eval_batch_size,
                               self.unit, shuffle=False)
        for batch in batches:
            probs = target_probs(self.family, self.params, batch, self.hyper).value
            for r, t in zip(*np.nonzero(batch.mask)):
                out[batch.origin_seq[r, t]][batch.origin_step[r, t]] = probs[r, t]
        return out

    def predict_sequence(self, sequence: StudentSequence) -> np.ndarray:
        return self.predict([sequence])[0]

    def count_params(self) -> int:
        return int(sum(np.prod(p.shape) for p in self.params.values()))

    def save(self, path) -> None:
        meta = {
            "family": self.family,
            "hyperparams": self.hyper.to_dict(),
            "seed": self.seed,
            "vocab": self.vocab.to_json(),
            "vocab_hash": vocab_hash(self.vocab),
            "training_curve": list(self.curve),
        }
        nc.save_archive(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "DeepModel":
        params, meta = nc.load_archive(path)
        vocab = Vocabulary.from_json(meta["vocab"])
        if vocab_hash(vocab) != meta["vocab_hash"]:
            raise ValueError(f"{path}: vocabulary hash mismatch")
        return cls(meta["family"], params, Hyperparams(**meta["hyperparams"]), vocab,
                   meta["seed"], tuple(meta["training_curve"]))


def vocab_hash(vocab: Vocabulary) -> str:
    return hashlib.sha256(json.dumps(vocab.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def _low_frequency(sequences, unit: str, n_ids: int) -> np.ndarray:
    counts = np.zeros(n_ids, dtype=np.int64)
    for s in sequences:
        np.add.at(counts, ids_for(s, unit), 1)
    return counts < 2


def fit_deep(family: str, sequences, vocab: Vocabulary, hyper: Hyperparams, seed: int = 0) -> DeepModel:
    """Train DKT, SAKT-KC or SAKT-E with Adam; returns the model and per-epoch mean loss."""
    if family not in UNIT:
        raise ValueError(f"not a deep family: {family!r}")
    sequences = [s for s in sequences if len(s)]
    if not sequences:
        raise ValueError("cannot train on an empty sample")
    if family != "DKT" and not hyper.num_heads:
        raise ValueError("SAKT needs num_heads")
    unit = UNIT[family]
    n_ids = vocab.n_kcs if unit == "KC" else vocab.n_exercises
    oov = n_ids - 1
    rng = np.random.default_rng(seed)
    if family == "DKT":
        params = init_dkt(n_ids, hyper.d_model, rng)
    else:
        params = init_sakt(n_ids, hyper.d_model, hyper.num_steps, rng)
    names = list(params)
    state = nc.AdamState.zeros_like([params[k] for k in names])
    weight_decay = hyper.reg_lambda if family == "DKT" and hyper.reg_lambda else 0.0
    rare = _low_frequency(sequences, unit, n_ids)

    curve = []
    for epoch in range(hyper.num_epochs):
        ep_rng = np.random.default_rng([seed, epoch])
        id_arrays = []
        for s in sequences:
            ids = ids_for(s, unit)
            swap = rare[ids] & (ep_rng.random(len(ids)) < OOV_SUBSTITUTION_RATE)
            id_arrays.append(np.where(swap, oov, ids) if swap.any() else ids)
        batches = make_batches(sequences, hyper.num_steps, hyper.batch_size, unit,
                               seed=int(ep_rng.integers(2**63)), id_arrays=id_arrays)
        lr = hyper.learn_rate * (hyper.learn_decay_rate ** epoch
                                 if family != "DKT" and hyper.learn_decay_rate else 1.0)
        losses = []
        for batch in batches:
            leaves = {k: nc.parameter(params[k]) for k in names}
            with nc.Tape() as tape:
                loss = batch_loss(family, leaves, batch, hyper, ep_rng)
            value = float(loss.value)
            if not math.isfinite(value):
                raise FloatingPointError(
                    f"{family}: non-finite loss {value} at epoch {epoch}, batch {len(losses)} "
                    f"(lr={lr:g}, positions={int(batch.mask.sum())})"
                )
            grads = nc.backward(tape, loss, [leaves[k] for k in names])
            new, state = nc.adam_step([params[k] for k in names], grads, state, lr, weight_decay)
            params = dict(zip(names, new))
            losses.append(value)
        curve.append(float(np.mean(losses)))
        log.info("%s epoch %d/%d: mean loss %.5f", family, epoch + 1, hyper.num_epochs, curve[-1])
    return DeepModel(family, params, hyper, vocab, seed, tuple(curve))
