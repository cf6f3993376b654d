"""Contrastive training of a question/passage encoder pair.

Each question is scored against every positive passage in its batch plus
its own mined hard negatives; the loss is the negative log-likelihood of
the gold passage under a softmax over those scores. Parameters are updated
with Adam. All training math runs in float64 on working copies and the
result is cast back to the float32 storage layout at the end, so a frozen
tower comes back bit-identical.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from retrievalab import kernels
from retrievalab.adaptation import recall_at_k
from retrievalab.biencoder import EncoderParams, hash_texts
from retrievalab.corpus import passage_display_text
from retrievalab.dense import SearchResult
from retrievalab.errors import DataError
from retrievalab.text import tokenize

FREEZE_MODES = ("none", "question", "passage")
DEV_RECALL_K = 20
_SHUFFLE_STREAM = 2

DEFAULT_EPOCHS = 40
DEFAULT_BATCH_SIZE = 32
DEFAULT_LEARNING_RATE = 5e-3


class TrainingDiverged(RuntimeError):
    """Raised when a batch produces a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    freeze: str = "none"
    hard_negatives_per_question: int = 1

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(
                f"batch_size must be >= 2 for in-batch negatives, got {self.batch_size}"
            )
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("Adam eps must be > 0")
        if self.freeze not in FREEZE_MODES:
            raise ValueError(
                f"freeze must be one of {FREEZE_MODES}, got {self.freeze!r}"
            )
        if self.hard_negatives_per_question < 0:
            raise ValueError("hard_negatives_per_question must be >= 0")


@dataclass
class BatchLoss:
    value: float
    per_example: list


@dataclass
class TowerGrads:
    """Gradients for one tower. Embedding rows are kept sparse: emb_ids
    lists the touched bucket rows (sorted, unique) and emb_rows their
    gradient rows."""

    emb_ids: np.ndarray
    emb_rows: np.ndarray
    projection: np.ndarray
    proj_bias: np.ndarray

    def dense_embeddings(self, n_buckets):
        out = np.zeros((n_buckets, self.projection.shape[0]))
        out[self.emb_ids] = self.emb_rows
        return out


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    dev_recall_at_20: float | None
    wall_ms: float


@dataclass
class TrainResult:
    q_params: EncoderParams
    p_params: EncoderParams
    log: list


def nll_loss(score_pos, neg_scores):
    """Negative log-likelihood of the positive under a softmax over the
    positive score and the negative scores."""
    scores = np.concatenate(
        ([float(score_pos)], np.asarray(neg_scores, dtype=np.float64))
    )
    m = scores.max()
    return float(m + np.log(np.sum(np.exp(scores - m))) - score_pos)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns new params; state is
    updated in place."""
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), state


class _Tower:
    """Float64 working copy of one encoder's parameters."""

    def __init__(self, params):
        self.emb = np.ascontiguousarray(params.embeddings, dtype=np.float64)
        self.proj = params.projection.astype(np.float64)
        self.bias = params.proj_bias.astype(np.float64)

    def forward(self, flat_ids, offsets):
        pooled = kernels.mean_pool(self.emb, flat_ids, offsets)
        return pooled, pooled @ self.proj.T + self.bias


class _RowAdam:
    """Adam over an embedding table that only visits rows which have ever
    received a gradient. Rows with zero moment and zero gradient are left
    in place by the dense update too, so this matches dense Adam exactly."""

    def __init__(self, shape, lr, beta1, beta2, eps):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.active = np.zeros(shape[0], dtype=bool)
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, table, ids, rows):
        self.t += 1
        self.active[ids] = True
        act = np.flatnonzero(self.active)
        self.m[act] *= self.beta1
        self.v[act] *= self.beta2
        self.m[ids] += (1.0 - self.beta1) * rows
        self.v[ids] += (1.0 - self.beta2) * rows * rows
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        table[act] -= self.lr * (self.m[act] / c1) / (
            np.sqrt(self.v[act] / c2) + self.eps
        )


class _TowerOptimizer:
    def __init__(self, tower, cfg):
        self.rows = _RowAdam(
            tower.emb.shape, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
            cfg.adam_eps,
        )
        self.proj = AdamState(np.zeros_like(tower.proj), np.zeros_like(tower.proj))
        self.bias = AdamState(np.zeros_like(tower.bias), np.zeros_like(tower.bias))
        self.cfg = cfg

    def step(self, tower, grads):
        cfg = self.cfg
        self.rows.step(tower.emb, grads.emb_ids, grads.emb_rows)
        tower.proj, self.proj = adam_step(
            tower.proj, grads.projection, self.proj, cfg.learning_rate,
            cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
        )
        tower.bias, self.bias = adam_step(
            tower.bias, grads.proj_bias, self.bias, cfg.learning_rate,
            cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
        )


def _concat_ids(chunks):
    offsets = np.zeros(len(chunks) + 1, dtype=np.int64)
    for i, ids in enumerate(chunks):
        offsets[i + 1] = offsets[i] + len(ids)
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    return flat, offsets


def _segmented_scatter(flat_ids, offsets, d_pooled):
    """Turn per-text pooled gradients into per-bucket-row gradients: each
    token of text t contributes d_pooled[t] / token_count(t)."""
    counts = np.diff(offsets)
    if flat_ids.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, d_pooled.shape[1]))
    safe = np.maximum(counts, 1)
    per_token = np.repeat(d_pooled / safe[:, None], counts, axis=0)
    ids, inverse = np.unique(flat_ids, return_inverse=True)
    rows = np.zeros((ids.size, d_pooled.shape[1]))
    np.add.at(rows, inverse, per_token)
    return ids, rows


def _tower_grads(tower, flat_ids, offsets, pooled, d_out):
    d_proj = d_out.T @ pooled
    d_bias = d_out.sum(axis=0)
    d_pooled = d_out @ tower.proj
    ids, rows = _segmented_scatter(flat_ids, offsets, d_pooled)
    return TowerGrads(
        emb_ids=ids, emb_rows=rows, projection=d_proj, proj_bias=d_bias
    )


def _batch_columns(batch, n_hard):
    col_pids = [ex.positive for ex in batch]
    neg_slices = []
    for ex in batch:
        negs = ex.hard_negatives if n_hard is None else ex.hard_negatives[:n_hard]
        start = len(col_pids)
        col_pids.extend(negs)
        neg_slices.append((start, len(col_pids)))
    return col_pids, neg_slices


def _forward_backward(q_tower, p_tower, q_flat, q_offsets, col_pids,
                      neg_slices, passage_hashes):
    """Loss and gradients for one batch.

    col_pids lists the batch's passage columns: the positives in batch
    order, then each question's hard negatives; neg_slices[i] is the
    (start, stop) range of question i's negatives within col_pids. A
    passage appearing in several columns is encoded once but still
    contributes once per column to each softmax.
    """
    n = len(neg_slices)
    unique_pids, inv = np.unique(np.asarray(col_pids, dtype=np.int64),
                                 return_inverse=True)
    p_flat, p_offsets = _concat_ids([passage_hashes[int(pid)] for pid in unique_pids])
    q_pooled, q_out = q_tower.forward(q_flat, q_offsets)
    p_pooled, p_out = p_tower.forward(p_flat, p_offsets)

    scores = q_out @ p_out.T  # (questions, unique passages)
    d_scores = np.zeros_like(scores)
    per_example = []
    for i in range(n):
        start, stop = neg_slices[i]
        cand = np.concatenate((inv[:n], inv[start:stop]))
        s = scores[i, cand]
        m = s.max()
        exp_s = np.exp(s - m)
        z = exp_s.sum()
        per_example.append(float(m + np.log(z) - s[i]))
        g = exp_s / z
        g[i] -= 1.0
        np.add.at(d_scores[i], cand, g / n)

    loss = BatchLoss(value=float(np.mean(per_example)), per_example=per_example)
    d_q_out = d_scores @ p_out
    d_p_out = d_scores.T @ q_out
    q_grads = _tower_grads(q_tower, q_flat, q_offsets, q_pooled, d_q_out)
    p_grads = _tower_grads(p_tower, p_flat, p_offsets, p_pooled, d_p_out)
    return loss, q_grads, p_grads


def batch_forward_backward(q_params, p_params, batch, passages,
                           n_hard_negatives=None, use_title=False):
    """Loss and full gradients for one batch of mined examples.

    Negatives for question i are the other questions' positives plus up to
    n_hard_negatives of its own mined negatives (all of them when None).
    Returns (BatchLoss, question TowerGrads, passage TowerGrads).
    """
    if not batch:
        raise ValueError("batch must not be empty")
    for ex in batch:
        if ex.positive is None:
            raise DataError(
                f"example {ex.question!r} has no positive passage; mine first"
            )
    q_tower = _Tower(q_params)
    p_tower = _Tower(p_params)
    q_flat, q_offsets = hash_texts([ex.question for ex in batch],
                                   q_params.vocab_buckets)
    col_pids, neg_slices = _batch_columns(batch, n_hard_negatives)
    passage_hashes = {
        pid: kernels.hash_buckets(
            tokenize(passage_display_text(passages[pid], use_title)),
            p_params.vocab_buckets,
        )
        for pid in set(col_pids)
    }
    return _forward_backward(
        q_tower, p_tower, q_flat, q_offsets, col_pids, neg_slices, passage_hashes
    )


class _DevEvaluator:
    """Recall@20 on the dev split against the full corpus, computed from
    the current working parameters after each epoch."""

    def __init__(self, dataset, passages, q_init, p_init, use_title):
        self.examples = dataset.dev
        self.passages = passages
        texts = [passage_display_text(p, use_title) for p in passages]
        self.corpus_flat, self.corpus_offsets = hash_texts(
            texts, p_init.vocab_buckets
        )
        self.q_flat, self.q_offsets = hash_texts(
            [ex.question for ex in self.examples], q_init.vocab_buckets
        )

    def recall(self, q_tower, p_tower):
        _, queries = q_tower.forward(self.q_flat, self.q_offsets)
        _, vectors = p_tower.forward(self.corpus_flat, self.corpus_offsets)
        vectors32 = vectors.astype(np.float32)
        results = []
        for i in range(queries.shape[0]):
            ids, scores = kernels.topk_dot(vectors32, queries[i], DEV_RECALL_K)
            results.append(
                SearchResult(hits=[(int(a), float(s)) for a, s in zip(ids, scores)])
            )
        return recall_at_k(results, self.examples, self.passages, DEV_RECALL_K)


def train(cfg, dataset, passages, q_init, p_init, use_title=False, on_epoch=None):
    """Train a question/passage encoder pair on one domain's train split.

    Examples must already carry mined positives. Shuffling, batching, and
    every update are driven by cfg.seed, so two runs with the same inputs
    produce byte-identical encoders. A frozen tower is returned exactly as
    it came in, original domain label included. on_epoch, when given,
    receives each EpochStats as it is produced.
    """
    cfg.validate()
    examples = dataset.train
    if not examples:
        raise DataError(f"domain {dataset.domain!r} has no training examples")
    for i, ex in enumerate(examples):
        if ex.positive is None:
            raise DataError(
                f"training example {i} has no positive passage; mine first"
            )
    if q_init.dim != p_init.dim:
        raise DataError(
            f"question and passage encoders disagree on dimension: "
            f"{q_init.dim} vs {p_init.dim}"
        )

    q_tower = _Tower(q_init)
    p_tower = _Tower(p_init)
    q_opt = _TowerOptimizer(q_tower, cfg)
    p_opt = _TowerOptimizer(p_tower, cfg)

    # Hash every question and referenced passage once up front.
    q_hashes = [
        kernels.hash_buckets(tokenize(ex.question), q_init.vocab_buckets)
        for ex in examples
    ]
    needed = set()
    for ex in examples:
        needed.add(ex.positive)
        needed.update(ex.hard_negatives[:cfg.hard_negatives_per_question])
    corpus_hashes = {
        pid: kernels.hash_buckets(
            tokenize(passage_display_text(passages[pid], use_title)),
            p_init.vocab_buckets,
        )
        for pid in needed
    }

    dev_eval = (
        _DevEvaluator(dataset, passages, q_init, p_init, use_title)
        if dataset.dev else None
    )

    rng = np.random.default_rng([int(cfg.seed), _SHUFFLE_STREAM])
    log = []
    n = len(examples)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            batch = [examples[i] for i in idx]
            q_flat, q_offsets = _concat_ids([q_hashes[i] for i in idx])
            col_pids, neg_slices = _batch_columns(
                batch, cfg.hard_negatives_per_question
            )
            loss, q_grads, p_grads = _forward_backward(
                q_tower, p_tower, q_flat, q_offsets, col_pids, neg_slices,
                corpus_hashes,
            )
            if not np.isfinite(loss.value):
                raise TrainingDiverged(
                    f"non-finite loss {loss.value} in epoch {epoch} on batch "
                    f"positives {sorted(set(col_pids[:len(batch)]))}; "
                    f"question embedding norm "
                    f"{float(np.linalg.norm(q_tower.emb)):.3e}, "
                    f"passage embedding norm "
                    f"{float(np.linalg.norm(p_tower.emb)):.3e}"
                )
            losses.append(loss.value)
            if cfg.freeze != "question":
                q_opt.step(q_tower, q_grads)
            if cfg.freeze != "passage":
                p_opt.step(p_tower, p_grads)
        dev_recall = dev_eval.recall(q_tower, p_tower) if dev_eval else None
        stats = EpochStats(
            epoch=epoch,
            mean_loss=float(np.mean(losses)),
            dev_recall_at_20=dev_recall,
            wall_ms=(time.perf_counter() - t0) * 1000.0,
        )
        log.append(stats)
        if on_epoch is not None:
            on_epoch(stats)

    if cfg.freeze == "question":
        q_params = q_init
    else:
        q_params = _export(q_init, q_tower, dataset.domain)
    if cfg.freeze == "passage":
        p_params = p_init
    else:
        p_params = _export(p_init, p_tower, dataset.domain)
    return TrainResult(q_params=q_params, p_params=p_params, log=log)


def _export(init, tower, domain):
    return replace(
        init,
        domain=domain,
        embeddings=tower.emb.astype(np.float32),
        projection=tower.proj.astype(np.float32),
        proj_bias=tower.bias.astype(np.float32),
    )
