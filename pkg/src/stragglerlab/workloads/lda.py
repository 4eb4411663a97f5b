"""Latent Dirichlet Allocation by collapsed Gibbs sampling.

Shared state on the parameter server is the word-topic count matrix (one
key per word) plus the topic totals (one extra key). Topic assignments and
document-topic counts stay with the documents.

Tokens are resampled in chunks. With ``chunk=1`` (the default) this is the
exact sequential collapsed Gibbs sampler, compiled with numba when it is
installed. Larger chunks resample the chunk's tokens jointly from the
counts at the start of the chunk (each token's own assignment excluded),
which is the usual approximation in data-parallel LDA and vectorizes in
numpy. Both routes consume one uniform per token in token order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..injector import ConfigurationError, keyed_rng
from .base import BlockUpdate, StateCorruptionError, Workload

try:
    from numba import njit
except ImportError:  # pragma: no cover - pure Python fallback, same arithmetic
    def njit(*args, **kwargs):
        return args[0] if args and callable(args[0]) else (lambda f: f)


class Corpus:
    def __init__(self, docs, vocab_size: int, num_topics: int):
        self.docs = [np.asarray(d, dtype=np.int64) for d in docs]
        self.vocab_size = int(vocab_size)
        self.num_topics = int(num_topics)
        if self.vocab_size < 1 or self.num_topics < 1:
            raise ValueError("vocab_size and num_topics must be positive")
        lengths = np.array([d.size for d in self.docs], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(lengths)])
        self.words = np.concatenate(self.docs) if self.docs else np.zeros(0, np.int64)
        self.doc_of = np.repeat(np.arange(len(self.docs)), lengths)
        if self.words.size and (self.words.min() < 0 or self.words.max() >= self.vocab_size):
            raise ValueError("word id outside vocabulary")

    def __len__(self) -> int:
        return len(self.docs)

    @property
    def num_tokens(self) -> int:
        return int(self.words.size)

    def token_range(self, lo: int, hi: int) -> tuple[int, int]:
        return int(self.offsets[lo]), int(self.offsets[hi])

    def block_index(self, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
        """Distinct words of documents [lo, hi) and each token's position among them (cached)."""
        cache = self.__dict__.setdefault("_block_cache", {})
        hit = cache.get((lo, hi))
        if hit is None:
            t0, t1 = self.token_range(lo, hi)
            hit = cache[(lo, hi)] = np.unique(self.words[t0:t1], return_inverse=True)
        return hit


@dataclass
class TopicState:
    assignment: np.ndarray  # topic per token
    doc_topic: np.ndarray  # docs x K
    word_topic: np.ndarray  # V x K
    topic_totals: np.ndarray  # K

    @classmethod
    def from_assignment(cls, corpus: Corpus, assignment) -> "TopicState":
        z = np.asarray(assignment, dtype=np.int64)
        K, V = corpus.num_topics, corpus.vocab_size
        dt = np.zeros((len(corpus), K))
        wt = np.zeros((V, K))
        np.add.at(dt, (corpus.doc_of, z), 1.0)
        np.add.at(wt, (corpus.words, z), 1.0)
        return cls(z.copy(), dt, wt, wt.sum(axis=0))

    @classmethod
    def random(cls, corpus: Corpus, seed: int) -> "TopicState":
        rng = np.random.default_rng(seed)
        return cls.from_assignment(corpus, rng.integers(0, corpus.num_topics, corpus.num_tokens))

    def consistent_with(self, corpus: Corpus) -> bool:
        ref = TopicState.from_assignment(corpus, self.assignment)
        return (
            np.array_equal(ref.doc_topic, self.doc_topic)
            and np.array_equal(ref.word_topic, self.word_topic)
            and np.array_equal(ref.topic_totals, self.topic_totals)
        )


@dataclass
class LDAUpdate:
    word_keys: np.ndarray
    word_deltas: np.ndarray  # len(word_keys) x K
    total_delta: np.ndarray  # K
    doc_lo: int
    doc_hi: int
    doc_topic: np.ndarray  # new rows for docs [doc_lo, doc_hi)
    token_lo: int
    assignment: np.ndarray  # new topics for the interval's tokens
    loglik: float
    clamped: int = 0


def gen_corpus(docs: int, doc_len: int, vocab: int, topics: int, seed: int,
               doc_alpha: float = 0.1, purity: float = 0.9) -> Corpus:
    """Corpus drawn from planted topics.

    Topic ``k`` puts ``purity`` of its mass uniformly on vocabulary slice
    ``k`` and the rest uniformly on the whole vocabulary. Document mixtures
    are Dirichlet(doc_alpha). ``corpus.planted_topics`` is the topic-word
    matrix and ``corpus.planted_assignment`` the generating topic per token.
    """
    if docs < 1 or doc_len < 1 or vocab < 1 or topics < 1:
        raise ConfigurationError("corpus dimensions must be positive")
    if vocab < topics:
        raise ConfigurationError("vocab must be at least the number of topics")
    rng = np.random.default_rng(seed)
    bounds = np.linspace(0, vocab, topics + 1).astype(int)
    phi = np.full((topics, vocab), (1.0 - purity) / vocab)
    for k in range(topics):
        phi[k, bounds[k]:bounds[k + 1]] += purity / (bounds[k + 1] - bounds[k])
    theta = rng.dirichlet(np.full(topics, doc_alpha), size=docs)
    doc_of = np.repeat(np.arange(docs), doc_len)
    cdf = np.cumsum(theta, axis=1)[doc_of]
    z = np.minimum((cdf < rng.random(doc_of.size)[:, None] * cdf[:, -1:]).sum(axis=1), topics - 1)
    width = bounds[z + 1] - bounds[z]
    focused = bounds[z] + np.minimum((rng.random(z.size) * width).astype(np.int64), width - 1)
    spread = rng.integers(0, vocab, z.size)
    words = np.where(rng.random(z.size) < purity, focused, spread)
    corpus = Corpus(np.split(words, docs), vocab, topics)
    corpus.planted_topics = phi
    corpus.planted_assignment = z
    return corpus


@njit(cache=True)
def _sequential_sweep(dt, wt, tot, docs, wloc, z, u, alpha, beta, vbeta):
    """In-place token-by-token resampling; returns the number of clamped reads."""
    K = tot.shape[0]
    cdf = np.empty(K)
    clamped = 0
    for i in range(z.shape[0]):
        d, w, k = docs[i], wloc[i], z[i]
        dt[d, k] -= 1.0
        wt[w, k] -= 1.0
        tot[k] -= 1.0
        acc = 0.0
        for j in range(K):
            a, b, c = dt[d, j], wt[w, j], tot[j]
            if a < 0.0 or b < 0.0 or c < 0.0:
                clamped += (a < 0.0) + (b < 0.0) + (c < 0.0)
                a, b, c = max(a, 0.0), max(b, 0.0), max(c, 0.0)
            acc += (a + alpha) * (b + beta) / (c + vbeta)
            cdf[j] = acc
        target = u[i] * acc
        new = 0
        while new < K - 1 and cdf[new] < target:
            new += 1
        dt[d, new] += 1.0
        wt[w, new] += 1.0
        tot[new] += 1.0
        z[i] = new
    return clamped


def _chunked_sweep(dt, wt, tot, docs, wloc, z, u, alpha_prior, beta_prior, vbeta, step):
    K = tot.size
    clamped = 0
    n = z.size
    for a in range(0, n, step):
        b = min(n, a + step)
        d, w, old = docs[a:b], wloc[a:b], z[a:b]
        r = np.arange(b - a)
        if min(dt.min(), wt.min(), tot.min()) < 0:
            clamped += int((dt < 0).sum() + (wt < 0).sum() + (tot < 0).sum())
        # weights with every count as is, then the current-topic column with
        # the token's own assignment taken out
        cdf = np.take(np.maximum(dt, 0) + alpha_prior, d, axis=0)
        cdf *= np.take((np.maximum(wt, 0) + beta_prior) / (np.maximum(tot, 0) + vbeta), w, axis=0)
        cdf = cdf.T.copy()
        own = np.stack([np.take(dt, d * K + old), np.take(wt, w * K + old), np.take(tot, old)]) - 1.0
        if own.min() < 0:
            clamped += int((own < 0).sum())
            np.maximum(own, 0, out=own)
        cdf[old, r] = (own[0] + alpha_prior) * (own[1] + beta_prior) / (own[2] + vbeta)
        for k in range(1, K):
            cdf[k] += cdf[k - 1]
        new = np.minimum(np.add.reduce(cdf < u[a:b] * cdf[-1], axis=0, dtype=np.intp), K - 1)
        moved = new != old
        if moved.any():
            dm, wm, om, nm = d[moved], w[moved], old[moved], new[moved]
            dt += (np.bincount(dm * K + nm, minlength=dt.size)
                   - np.bincount(dm * K + om, minlength=dt.size)).reshape(dt.shape)
            wt += (np.bincount(wm * K + nm, minlength=wt.size)
                   - np.bincount(wm * K + om, minlength=wt.size)).reshape(wt.shape)
            tot += np.bincount(nm, minlength=K) - np.bincount(om, minlength=K)
            z[a:b] = new
    return clamped


def lda_gibbs_iteration(
    state: TopicState,
    corpus: Corpus,
    interval: tuple[int, int],
    alpha_prior: float,
    beta_prior: float,
    rng: np.random.Generator,
    chunk: int = 1,
) -> LDAUpdate:
    """Resample the topics of every token in documents ``interval``.

    ``state`` is read, not modified; the returned update holds the count
    deltas for the shared tables and the new local assignments. Negative
    effective counts (possible when the shared counts are stale) are
    clamped at zero and counted in ``clamped``.
    """
    lo, hi = interval
    if not 0 <= lo <= hi <= len(corpus):
        raise ValueError(f"interval {interval} outside corpus")
    if alpha_prior <= 0 or beta_prior <= 0:
        raise ValueError("priors must be positive")
    K, V = corpus.num_topics, corpus.vocab_size
    t0, t1 = corpus.token_range(lo, hi)
    words = corpus.words[t0:t1]
    docs = corpus.doc_of[t0:t1] - lo
    z = state.assignment[t0:t1].copy()
    keys, wloc = corpus.block_index(lo, hi)
    dt = state.doc_topic[lo:hi].copy()
    wt = np.take(state.word_topic, keys, axis=0)
    tot = np.asarray(state.topic_totals, dtype=float).copy()
    wt0, tot0 = wt.copy(), tot.copy()
    vbeta = V * beta_prior
    n = words.size
    u = rng.random(n)
    if int(chunk) <= 1:
        clamped = int(_sequential_sweep(dt, wt, tot, docs, wloc, z, u,
                                        float(alpha_prior), float(beta_prior), float(vbeta)))
    else:
        clamped = _chunked_sweep(dt, wt, tot, docs, wloc, z, u, alpha_prior, beta_prior, vbeta, int(chunk))
    theta = (dt + alpha_prior) / (dt.sum(axis=1, keepdims=True) + K * alpha_prior)
    phi = (np.maximum(wt, 0) + beta_prior) / (np.maximum(tot, 0)[None, :] + vbeta)
    per_token = np.einsum("nk,nk->n", np.take(theta, docs, axis=0), np.take(phi, wloc, axis=0))
    loglik = float(np.log(per_token).sum()) if n else 0.0
    return LDAUpdate(keys, wt - wt0, tot - tot0, lo, hi, dt, t0, z, loglik, clamped)


def apply_lda_update(state: TopicState, update: LDAUpdate) -> None:
    """Apply an update in place; raises if any count would go negative."""
    wt = state.word_topic[update.word_keys] + update.word_deltas
    tot = state.topic_totals + update.total_delta
    if (wt < 0).any() or (tot < 0).any() or (update.doc_topic < 0).any():
        raise StateCorruptionError("negative topic count after update")
    state.word_topic[update.word_keys] = wt
    state.topic_totals = tot
    state.doc_topic[update.doc_lo:update.doc_hi] = update.doc_topic
    state.assignment[update.token_lo:update.token_lo + update.assignment.size] = update.assignment


def topic_concentration(corpus: Corpus, assignment: np.ndarray, word_slices) -> list[float]:
    """For each word slice, the share of its tokens held by its dominant topic."""
    out = []
    for lo, hi in word_slices:
        mask = (corpus.words >= lo) & (corpus.words < hi)
        counts = np.bincount(assignment[mask], minlength=corpus.num_topics)
        out.append(float(counts.max() / max(1, counts.sum())))
    return out


class LDAWorkload(Workload):
    """Keys [0, V) are word-topic rows, key V holds the topic totals."""

    name = "lda"

    def __init__(self, corpus: Corpus, alpha_prior: float = 0.1, beta_prior: float = 0.01,
                 seed: int = 0, chunk: int = 1):
        self.corpus = corpus
        self.alpha_prior = alpha_prior
        self.beta_prior = beta_prior
        self.seed = seed
        self.chunk = chunk
        self.size = len(corpus)
        self.capacity = corpus.vocab_size + 1
        self.dimension = corpus.num_topics
        init = TopicState.random(corpus, seed)
        self.assignment = init.assignment
        self.doc_topic = init.doc_topic
        self._initial = init
        self.clamped = 0

    def initial_values(self):
        vals = np.vstack([self._initial.word_topic, self._initial.topic_totals[None, :]])
        return np.arange(self.capacity), vals

    def _state(self, view) -> TopicState:
        V = self.corpus.vocab_size
        return TopicState(self.assignment, self.doc_topic, view[:V], view[V])

    def process(self, view, lo, hi, iteration) -> BlockUpdate:
        rng = keyed_rng(self.seed, 0x4C44, iteration, lo, hi)
        upd = lda_gibbs_iteration(self._state(view), self.corpus, (lo, hi), self.alpha_prior,
                                  self.beta_prior, rng, self.chunk)
        keys = np.append(upd.word_keys, self.corpus.vocab_size)
        deltas = np.vstack([upd.word_deltas, upd.total_delta[None, :]])
        return BlockUpdate(keys, deltas, -upd.loglik, local=upd)

    def commit_local(self, update: BlockUpdate) -> None:
        upd: LDAUpdate = update.local
        self.doc_topic[upd.doc_lo:upd.doc_hi] = upd.doc_topic
        self.assignment[upd.token_lo:upd.token_lo + upd.assignment.size] = upd.assignment
        self.clamped += upd.clamped

    def objective(self, table) -> float:
        V, K = self.corpus.vocab_size, self.corpus.num_topics
        wt, tot = np.maximum(table[:V], 0), np.maximum(table[V], 0)
        c = self.corpus
        theta = (self.doc_topic[c.doc_of] + self.alpha_prior) / (
            self.doc_topic[c.doc_of].sum(axis=1, keepdims=True) + K * self.alpha_prior)
        phi = (wt[c.words] + self.beta_prior) / (tot[None, :] + V * self.beta_prior)
        return float(-np.log(np.einsum("nk,nk->n", theta, phi)).mean())

    def check(self, table) -> None:
        V = self.corpus.vocab_size
        ref = TopicState.from_assignment(self.corpus, self.assignment)
        if (table < 0).any():
            raise StateCorruptionError("negative topic count in parameter table")
        if not (np.array_equal(ref.word_topic, table[:V]) and np.array_equal(ref.topic_totals, table[V])
                and np.array_equal(ref.doc_topic, self.doc_topic)):
            raise StateCorruptionError("topic count tables disagree with the assignment vector")


def dump_corpus(corpus: Corpus, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# vocab {corpus.vocab_size} topics {corpus.num_topics}\n")
        for d in corpus.docs:
            fh.write(" ".join(map(str, d.tolist())) + "\n")


def load_corpus(path, num_topics: int | None = None) -> Corpus:
    vocab = topics = None
    docs = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                parts = line[1:].split()
                meta = dict(zip(parts[::2], parts[1::2]))
                vocab = int(meta.get("vocab", 0)) or None
                topics = int(meta.get("topics", 0)) or None
                continue
            docs.append([int(t) for t in line.split()])
    if vocab is None:
        vocab = 1 + max((max(d) for d in docs if d), default=0)
    return Corpus(docs, vocab, num_topics or topics or 1)
