"""Bayesian Knowledge Tracing with forgetting, and Performance Factors Analysis."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..logstore import StudentSequence, Vocabulary

log = logging.getLogger(__name__)

P_MIN = 1e-3
BKT_FIELDS = ("L0", "T", "G", "S", "F")


# ---------------------------------------------------------------------------
# BKT
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BktEntry:
    L0: float = 0.5
    T: float = 0.2
    G: float = 0.2
    S: float = 0.1
    F: float = 0.05

    def clamped(self) -> "BktEntry":
        return BktEntry(*(min(max(getattr(self, k), P_MIN), 1.0 - P_MIN) for k in BKT_FIELDS))

    def as_tuple(self):
        return tuple(getattr(self, k) for k in BKT_FIELDS)


@dataclass(frozen=True)
class BktFit:
    params: BktEntry
    log_likelihood: float
    iterations: int
    history: tuple = ()


@dataclass(frozen=True)
class BktParams:
    per_kc: dict  # kc index -> BktEntry
    fallback: BktEntry
    meta: dict = field(default_factory=dict)

    def entry(self, kc: int) -> BktEntry:
        return self.per_kc.get(kc, self.fallback)

    def to_json(self) -> str:
        return json.dumps({
            "per_kc": {str(k): asdict(v) for k, v in sorted(self.per_kc.items())},
            "fallback": asdict(self.fallback),
            "meta": self.meta,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "BktParams":
        d = json.loads(text)
        return cls({int(k): BktEntry(**v) for k, v in d["per_kc"].items()},
                   BktEntry(**d["fallback"]), d.get("meta", {}))


def _pad(sequences) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in sequences])
    obs = np.zeros((len(sequences), lengths.max(initial=0)), dtype=np.int64)
    valid = np.arange(obs.shape[1])[None, :] < lengths[:, None]
    for i, s in enumerate(sequences):
        obs[i, :len(s)] = s
    return obs, valid


def _estep(p: BktEntry, obs: np.ndarray, valid: np.ndarray):
    """Scaled forward-backward over right-padded sequences.

    Returns the log-likelihood and the expected sufficient statistics.
    State 0 is unmastered, state 1 mastered.
    """
    n, T = obs.shape
    A = np.array([[1.0 - p.T, p.T], [p.F, 1.0 - p.F]])
    # emission likelihoods, shape (n, T, 2); padded steps emit with probability 1
    em = np.empty((n, T, 2))
    em[..., 0] = np.where(obs == 1, p.G, 1.0 - p.G)
    em[..., 1] = np.where(obs == 1, 1.0 - p.S, p.S)
    em[~valid] = 1.0

    alpha = np.empty((n, T, 2))
    scale = np.ones((n, T))
    a = np.array([1.0 - p.L0, p.L0])[None, :] * em[:, 0]
    scale[:, 0] = a.sum(axis=1)
    alpha[:, 0] = a / scale[:, 0, None]
    for t in range(1, T):
        a = (alpha[:, t - 1] @ A) * em[:, t]
        scale[:, t] = a.sum(axis=1)
        alpha[:, t] = a / scale[:, t, None]
    ll = float(np.sum(np.log(scale[valid])))

    beta = np.ones((n, T, 2))
    for t in range(T - 2, -1, -1):
        nxt = valid[:, t + 1]
        b = (em[:, t + 1] * beta[:, t + 1]) @ A.T / scale[:, t + 1, None]
        beta[:, t] = np.where(nxt[:, None], b, 1.0)
    gamma = alpha * beta
    gamma /= gamma.sum(axis=2, keepdims=True)

    # expected transitions between consecutive valid steps
    has_next = valid[:, 1:]
    w = em[:, 1:] * beta[:, 1:] / scale[:, 1:, None]
    xi01 = alpha[:, :-1, 0] * A[0, 1] * w[..., 1]
    xi10 = alpha[:, :-1, 1] * A[1, 0] * w[..., 0]
    g_from = gamma[:, :-1]

    c = obs == 1
    g0, g1 = gamma[..., 0] * valid, gamma[..., 1] * valid
    stats = {
        "L0": gamma[:, 0, 1].mean(),
        "T": (xi01[has_next].sum(), g_from[..., 0][has_next].sum()),
        "F": (xi10[has_next].sum(), g_from[..., 1][has_next].sum()),
        "G": ((g0 * c).sum(), g0.sum()),
        "S": ((g1 * ~c).sum(), g1.sum()),
    }
    return ll, stats


def _mstep(stats, prev: BktEntry) -> BktEntry:
    def ratio(key):
        num, den = stats[key]
        return num / den if den > 0 else getattr(prev, key)
    return BktEntry(stats["L0"], ratio("T"), ratio("G"), ratio("S"), ratio("F")).clamped()


def bkt_log_likelihood(params: BktEntry, observations) -> float:
    obs, valid = _pad([np.asarray(o) for o in observations])
    return _estep(params, obs, valid)[0]


def bkt_fit_kc(observations, init: BktEntry | None = None, tol: float = 1e-4,
               max_iter: int = 100) -> BktFit:
    """Baum-Welch for one KC.

    A re-estimation step is accepted only while it raises the log-likelihood
    by at least ``tol``; the first step that gains less ends the fit and the
    current parameters are kept.
    """
    seqs = [np.asarray(o, dtype=np.int64) for o in observations if len(o)]
    if not seqs:
        raise ValueError("bkt_fit_kc needs at least one non-empty sequence")
    obs, valid = _pad(seqs)
    params = (init or BktEntry()).clamped()
    ll, stats = _estep(params, obs, valid)
    history = [ll]
    iterations = 0
    while iterations < max_iter:
        cand = _mstep(stats, params)
        cand_ll, cand_stats = _estep(cand, obs, valid)
        if not cand_ll - ll >= tol:
            break
        params, ll, stats = cand, cand_ll, cand_stats
        history.append(ll)
        iterations += 1
    return BktFit(params, ll, iterations, tuple(history))


def bkt_fallback(per_kc: dict) -> BktEntry:
    if not per_kc:
        raise ValueError("no fitted KCs to average")
    vals = np.array([e.as_tuple() for e in per_kc.values()])
    return BktEntry(*map(float, vals.mean(axis=0)))


def kc_subsequences(sequences) -> dict:
    """Split student sequences into per-KC response vectors.

    Returns ``{kc: [(sequence index, positions, responses), ...]}``.
    """
    out: dict[int, list] = {}
    for i, seq in enumerate(sequences):
        for kc in np.unique(seq.kc):
            pos = np.flatnonzero(seq.kc == kc)
            out.setdefault(int(kc), []).append((i, pos, seq.correct[pos]))
    return out


def bkt_fit(sequences, vocab: Vocabulary, init: BktEntry | None = None,
            tol: float = 1e-4, max_iter: int = 100) -> BktParams:
    per_kc, meta = {}, {}
    for kc, parts in sorted(kc_subsequences(sequences).items()):
        if kc == vocab.oov_kc:
            continue
        fit = bkt_fit_kc([p[2] for p in parts], init, tol, max_iter)
        per_kc[kc] = fit.params
        meta[str(kc)] = {"iterations": fit.iterations, "log_likelihood": fit.log_likelihood}
    return BktParams(per_kc, bkt_fallback(per_kc), {"kcs": meta})


def _bkt_filter(L0, T, G, S, F, obs) -> tuple[np.ndarray, np.ndarray]:
    """Forward recurrence for rows of ``obs``; parameters broadcast per row.

    Returns P(correct) before each response and P(mastered) before each response.
    """
    n, steps = obs.shape
    pred = np.empty((n, steps))
    mastery = np.empty((n, steps))
    L = np.broadcast_to(np.asarray(L0, dtype=float), (n,)).copy()
    for t in range(steps):
        mastery[:, t] = L
        p = L * (1.0 - S) + (1.0 - L) * G
        pred[:, t] = p
        post = np.where(obs[:, t] == 1, L * (1.0 - S) / np.maximum(p, 1e-300),
                        L * S / np.maximum(1.0 - p, 1e-300))
        L = post * (1.0 - F) + (1.0 - post) * T
    return pred, mastery


def bkt_predict(entry: BktEntry, sequence) -> np.ndarray:
    """P(correct) at each step, computed before that step's response is seen."""
    obs = np.asarray(sequence, dtype=np.int64)[None, :]
    return _bkt_filter(entry.L0, entry.T, entry.G, entry.S, entry.F, obs)[0][0]


def bkt_mastery(entry: BktEntry, sequence) -> np.ndarray:
    obs = np.asarray(sequence, dtype=np.int64)[None, :]
    return _bkt_filter(entry.L0, entry.T, entry.G, entry.S, entry.F, obs)[1][0]


@dataclass(frozen=True)
class BktModel:
    params: BktParams
    vocab: Vocabulary
    family: str = "BKT"

    def predict(self, sequences) -> list[np.ndarray]:
        out = [np.empty(len(s)) for s in sequences]
        parts = [(kc, p) for kc, ps in kc_subsequences(sequences).items() for p in ps]
        if not parts:
            return out
        obs, valid = _pad([p[2] for _, p in parts])
        entries = np.array([self.params.entry(kc).as_tuple() for kc, _ in parts])
        pred, _ = _bkt_filter(*entries.T, obs)
        for row, (_, (i, pos, _)) in enumerate(parts):
            out[i][pos] = pred[row, :len(pos)]
        return out

    def count_params(self) -> int:
        return 5 * len(self.params.per_kc) + 5


# ---------------------------------------------------------------------------
# PFA
# ---------------------------------------------------------------------------

COEF_CLAMP = 25.0


@dataclass(frozen=True)
class PfaFeatures:
    kc: np.ndarray
    wins: np.ndarray
    fails: np.ndarray

    def __len__(self):
        return len(self.kc)


@dataclass(frozen=True)
class PfaParams:
    per_kc: dict  # kc index -> (beta, gamma, rho)
    fallback: tuple
    warnings: tuple = ()
    iterations: int = 0

    def coef(self, kc: int):
        return self.per_kc.get(kc, self.fallback)

    def to_json(self) -> str:
        return json.dumps({
            "per_kc": {str(k): list(v) for k, v in sorted(self.per_kc.items())},
            "fallback": list(self.fallback),
            "meta": {"warnings": list(self.warnings), "iterations": self.iterations},
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PfaParams":
        d = json.loads(text)
        return cls({int(k): tuple(v) for k, v in d["per_kc"].items()}, tuple(d["fallback"]),
                   tuple(d["meta"]["warnings"]), d["meta"]["iterations"])


def pfa_featurize_one(seq: StudentSequence) -> PfaFeatures:
    wins = np.zeros(len(seq), dtype=np.int64)
    fails = np.zeros(len(seq), dtype=np.int64)
    counts: dict[int, list[int]] = {}
    for t, (kc, c) in enumerate(zip(seq.kc.tolist(), seq.correct.tolist())):
        sf = counts.setdefault(kc, [0, 0])
        wins[t], fails[t] = sf
        sf[0 if c else 1] += 1
    return PfaFeatures(seq.kc.copy(), wins, fails)


def pfa_featurize(sequences) -> tuple[PfaFeatures, np.ndarray]:
    feats = [pfa_featurize_one(s) for s in sequences]
    if not feats:
        empty = np.zeros(0, dtype=np.int64)
        return PfaFeatures(empty, empty, empty), empty
    return (
        PfaFeatures(*(np.concatenate([getattr(f, k) for f in feats]) for k in ("kc", "wins", "fails"))),
        np.concatenate([s.correct for s in sequences]),
    )


def _sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def irls_logistic(X, y, max_iter: int = 50, tol: float = 1e-8):
    """Newton-Raphson (IRLS) for logistic regression.

    Returns ``(coef, iterations, status)`` where status is ``"converged"``,
    ``"separation"`` (coefficients hit the clamp) or ``"max_iter"``.
    """
    w = np.zeros(X.shape[1])
    for it in range(max_iter):
        p = _sigmoid(X @ w)
        grad = X.T @ (y - p)
        hess = (X * (p * (1.0 - p))[:, None]).T @ X
        step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        w = w + step
        if np.any(np.abs(w) > COEF_CLAMP):
            return np.clip(w, -COEF_CLAMP, COEF_CLAMP), it + 1, "separation"
        if np.max(np.abs(step)) < tol:
            return w, it + 1, "converged"
    return w, max_iter, "max_iter" if max_iter else "converged"


def pfa_fit(features: PfaFeatures, labels, max_iter: int = 50, tol: float = 1e-8) -> PfaParams:
    labels = np.asarray(labels, dtype=float)
    if len(labels) == 0:
        raise ValueError("pfa_fit needs at least one example")
    X = np.column_stack([np.ones(len(labels)), features.wins, features.fails]).astype(float)
    warnings, per_kc, iters = [], {}, 0
    order = np.argsort(features.kc, kind="stable")
    kcs, starts = np.unique(features.kc[order], return_index=True)
    for kc, rows in zip(kcs, np.split(order, starts[1:])):
        coef, n_it, status = irls_logistic(X[rows], labels[rows], max_iter, tol)
        per_kc[int(kc)] = tuple(map(float, coef))
        iters = max(iters, n_it)
        if status != "converged":
            warnings.append(f"kc {int(kc)}: {status}")
    coef, n_it, status = irls_logistic(X, labels, max_iter, tol)
    if status != "converged":
        warnings.append(f"fallback: {status}")
    for w in warnings:
        log.warning("PFA fit: %s", w)
    return PfaParams(per_kc, tuple(map(float, coef)), tuple(warnings), max(iters, n_it))


def pfa_predict(params: PfaParams, kc: int, wins, fails):
    b, g, r = params.coef(kc)
    return _sigmoid(b + g * np.asarray(wins, dtype=float) + r * np.asarray(fails, dtype=float))


@dataclass(frozen=True)
class PfaModel:
    params: PfaParams
    vocab: Vocabulary
    family: str = "PFA"

    def predict(self, sequences) -> list[np.ndarray]:
        size = max([self.vocab.n_kcs] + [int(s.kc.max()) + 1 for s in sequences if len(s)])
        table = np.array([self.params.coef(k) for k in range(size)]).reshape(size, 3)
        out = []
        for seq in sequences:
            f = pfa_featurize_one(seq)
            c = table[f.kc]
            out.append(_sigmoid(c[:, 0] + c[:, 1] * f.wins + c[:, 2] * f.fails))
        return out

    def count_params(self) -> int:
        return 3 * len(self.params.per_kc) + 3


def fit_bkt_model(sequences, vocab: Vocabulary, **kwargs) -> BktModel:
    return BktModel(bkt_fit(sequences, vocab, **kwargs), vocab)


def fit_pfa_model(sequences, vocab: Vocabulary, **kwargs) -> PfaModel:
    feats, labels = pfa_featurize(sequences)
    return PfaModel(pfa_fit(feats, labels, **kwargs), vocab)

