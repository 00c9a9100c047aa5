"""Hard sampling from the banks and the contrastive losses.

Sampling treats bank snapshots as constants; only the anchor embedding v
carries gradient. Hardness is cosine similarity to the anchor: positives are
the LOWEST-similarity same-class entries, hard negatives the HIGHEST-
similarity other-class entries, and random negatives are drawn without
replacement from the remaining other-class pool. Ties break toward older
entries, then lower class index.

The InfoNCE here is the multi-positive form in exp space,
    -(1/|P|) sum_{p in P} log[ e^{s_p/tau} / (e^{s_p/tau} + sum_n e^{s_n/tau}) ],
with a flag to sum instead of average over positives. The instance and
semantic terms are added to give the contrast loss; cross-entropy plus
lambda times that is the training objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import BadConfigError, EmptySetError, ZeroVectorError

POS_STRATEGIES = ("hard", "random")
NEG_STRATEGIES = ("random", "hard", "random+hard")

OP_COUNTS = {"sample": 0, "loss": 0}


def reset_op_counts():
    for key in OP_COUNTS:
        OP_COUNTS[key] = 0


@dataclass
class ContrastConfig:
    tau: float = 1.0
    alpha: float = 0.85
    k_hard_pos: int = 128
    k_hard_neg: int = 512
    k_rand_neg: int = 512
    lam: float = 1.0
    margin: float = 0.3
    loss_kind: str = "infonce"
    pos_strategy: str = "hard"
    neg_strategy: str = "random+hard"
    sum_positives: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise BadConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.alpha < 1.0:
            raise BadConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if min(self.k_hard_pos, self.k_hard_neg, self.k_rand_neg) < 0:
            raise BadConfigError("sampling counts must be >= 0")
        if self.loss_kind not in ("infonce", "triplet"):
            raise BadConfigError(f"unknown loss kind {self.loss_kind!r}")
        if self.pos_strategy not in POS_STRATEGIES:
            raise BadConfigError(f"unknown positive strategy {self.pos_strategy!r}")
        if self.neg_strategy not in NEG_STRATEGIES:
            raise BadConfigError(f"unknown negative strategy {self.neg_strategy!r}")


@dataclass
class SampledSets:
    inst_pos: np.ndarray   # (n_pos, C_g), all label == anchor's
    inst_neg: np.ndarray   # (n_neg, C_g), all label != anchor's
    sem_pos: np.ndarray    # (C_g,) or None when uninitialized
    sem_neg: np.ndarray    # (n_sem, C_g)


def cosine_sim(a, b) -> float:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        raise ZeroVectorError("cosine similarity of a (near-)zero vector")
    return float(a @ b / (na * nb))


def _anchor_unit(anchor) -> np.ndarray:
    arr = np.asarray(getattr(anchor, "data", anchor), dtype=np.float64)
    norm = np.linalg.norm(arr)
    if norm < 1e-12:
        raise ZeroVectorError("anchor embedding is (near-)zero")
    return arr / norm


def _unit_rows(rows) -> np.ndarray:
    """Row-normalize a constant (n, C_g) block so dots become cosines."""
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ZeroVectorError("a set contains a (near-)zero embedding")
    return rows / norms


def sample_sets(inst_snapshot, sem_snapshot, anchor, label: int,
                config: ContrastConfig, rng) -> SampledSets | None:
    """Build the positive/negative sets for one anchor, or None (skip signal)
    when class `label` has no instance entries and no semantic prototype."""
    OP_COUNTS["sample"] += 1
    vhat = _anchor_unit(anchor)
    dim = vhat.shape[0]

    same = inst_snapshot.embeddings[label]
    sem_ready = bool(sem_snapshot.initialized[label])
    if same.shape[0] == 0 and not sem_ready:
        return None  # EmptyClass: nothing known about this class yet

    # positives from the anchor's class
    if same.shape[0] > 0:
        want = min(config.k_hard_pos, same.shape[0])
        if config.pos_strategy == "hard":
            sims = same @ vhat
            order = np.lexsort((inst_snapshot.ages[label], sims))
            pick = order[:want]  # lowest similarity = hardest positives
        else:
            pick = rng.choice(same.shape[0], size=want, replace=False)
        inst_pos = same[pick]
    else:
        inst_pos = np.zeros((0, dim))

    # negatives pooled over every other class, canonical (class, age) order
    chunks, chunk_class = [], []
    for c in range(inst_snapshot.class_count):
        if c != label and inst_snapshot.embeddings[c].shape[0] > 0:
            chunks.append(inst_snapshot.embeddings[c])
            chunk_class.append(np.full(chunks[-1].shape[0], c))
    if chunks:
        pool = np.concatenate(chunks)
        pool_class = np.concatenate(chunk_class)
        pool_age = np.concatenate(
            [inst_snapshot.ages[c] for c in range(inst_snapshot.class_count)
             if c != label and inst_snapshot.ages[c].shape[0] > 0])
        sims = pool @ vhat
        if config.neg_strategy == "hard":
            order = np.lexsort((pool_class, pool_age, -sims))
            pick = order[: min(config.k_hard_neg + config.k_rand_neg, len(order))]
        elif config.neg_strategy == "random":
            want = min(config.k_hard_neg + config.k_rand_neg, pool.shape[0])
            pick = rng.choice(pool.shape[0], size=want, replace=False)
        else:  # random+hard: hardest K_H^-, then uniform from the remainder
            order = np.lexsort((pool_class, pool_age, -sims))
            hard = order[: min(config.k_hard_neg, len(order))]
            rest = np.setdiff1d(np.arange(pool.shape[0]), hard)
            want = min(config.k_rand_neg, rest.shape[0])
            rand = rng.choice(rest, size=want, replace=False) if want else rest[:0]
            pick = np.concatenate([hard, rand])
        inst_neg = pool[pick]
    else:
        inst_neg = np.zeros((0, dim))

    sem_pos = sem_snapshot.vectors[label].copy() if sem_ready else None
    others = [c for c in range(sem_snapshot.vectors.shape[0])
              if c != label and sem_snapshot.initialized[c]]
    sem_neg = sem_snapshot.vectors[others].copy() if others \
        else np.zeros((0, dim))
    return SampledSets(inst_pos, inst_neg, sem_pos, sem_neg)


def info_nce_multi(anchor, positives, negatives, tau: float,
                   sum_positives: bool = False) -> ad.Tensor:
    """Multi-positive InfoNCE; bank rows are constants, gradient reaches the
    anchor only. Empty negatives make every term -log(1) = 0."""
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.asarray(negatives, dtype=np.float64)
    if positives.shape[0] == 0 or positives.size == 0:
        raise EmptySetError("info_nce_multi needs at least one positive")
    if tau <= 0:
        raise BadConfigError("tau must be positive")
    OP_COUNTS["loss"] += 1
    if negatives.size == 0:
        return ad.as_tensor(0.0)

    vhat = ad.l2_normalize(ad.as_tensor(anchor))
    pos_ratio = ad.mul(ad.matmul(vhat, ad.as_tensor(_unit_rows(positives).T)),
                       1.0 / tau)
    neg_ratio = ad.mul(ad.matmul(vhat, ad.as_tensor(_unit_rows(negatives).T)),
                       1.0 / tau)
    neg_mass = ad.tensor_sum(ad.exp(neg_ratio))
    # -log( e^{s+} / (e^{s+} + S) ) = log(e^{s+} + S) - s+
    terms = ad.add(ad.log(ad.add(ad.exp(pos_ratio), neg_mass)),
                   ad.mul(pos_ratio, -1.0))
    return ad.tensor_sum(terms) if sum_positives else ad.tensor_mean(terms)


def triplet_loss(anchor, positives, negatives, margin: float) -> ad.Tensor:
    """Mean over all (positive, negative) pairs of the margin hinge."""
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if positives.size == 0 or negatives.size == 0:
        raise EmptySetError("triplet_loss needs positives and negatives")
    OP_COUNTS["loss"] += 1
    vhat = ad.l2_normalize(ad.as_tensor(anchor))
    sp = ad.matmul(vhat, ad.as_tensor(_unit_rows(positives).T))
    sn = ad.matmul(vhat, ad.as_tensor(_unit_rows(negatives).T))
    n_p, n_n = positives.shape[0], negatives.shape[0]
    gaps = ad.add(ad.reshape(ad.mul(sp, -1.0), (n_p, 1)),
                  ad.reshape(sn, (1, n_n)))
    return ad.tensor_mean(ad.relu(ad.add(gaps, ad.as_tensor(margin))))


def contrast_loss(anchor, sets: SampledSets | None,
                  config: ContrastConfig) -> ad.Tensor:
    """Instance-bank term + semantic-bank term; a term whose sets cannot
    support the configured loss contributes 0."""
    if sets is None:
        return ad.as_tensor(0.0)

    def term(positives, negatives):
        if positives is None or np.size(positives) == 0:
            return ad.as_tensor(0.0)
        if config.loss_kind == "triplet":
            if np.size(negatives) == 0:
                return ad.as_tensor(0.0)
            return triplet_loss(anchor, positives, negatives, config.margin)
        return info_nce_multi(anchor, positives, negatives, config.tau,
                              config.sum_positives)

    return ad.add(term(sets.inst_pos, sets.inst_neg),
                  term(sets.sem_pos, sets.sem_neg))


def total_loss(l_ce, l_nce, lam: float) -> ad.Tensor:
    return ad.add(ad.as_tensor(l_ce), ad.mul(ad.as_tensor(l_nce), float(lam)))
