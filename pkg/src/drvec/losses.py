"""Mini-batch construction, score-block assembly, and training losses.

A score block is an N x N matrix with same-speaker scores on the diagonal.
A mini-batch samples ``n_speakers`` speakers with ``utts_per_speaker``
utterances each; the first ``n_enroll`` embeddings per speaker are averaged
into enrollment models and the rest are scored individually against every
model, one block per test slot. The whole construction is repeated with the
enrollment/test roles swapped and the blocks stacked, e.g. 8 blocks of
16 x 16 forming a 128 x 16 matrix at the full-size preset.

Losses per block (y_ij = row i tested against model j):

* softmax: ``sum_i [logsumexp_j(y_ij) - y_ii]`` (per-row normalization)
* extended-set softmax: the denominator of every row pools *all*
  off-diagonal entries of the block, not just that row's
* equal-class-weight BCE: per-class means of sigmoid cross-entropy,
  classes weighted equally

All three are evaluated with log-sum-exp / softplus stabilization and are
differentiable through the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedder import enroll_average
from .errors import ConfigError, ContractError, DataError

FORWARD, SWAPPED = "forward", "swapped"
LOSS_KINDS = ("ge2e_softmax", "ge2e_xs", "ecw_bce")


@dataclass(frozen=True)
class MiniBatchSpec:
    n_speakers: int = 16
    utts_per_speaker: int = 8
    n_enroll: int = 4
    n_test: int = 4

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ConfigError(f"mini-batch needs >= 2 speakers, got {self.n_speakers}")
        if self.n_enroll < 1 or self.n_test < 1:
            raise ConfigError("mini-batch needs >= 1 enrollment and >= 1 test utterance")
        if self.n_enroll + self.n_test != self.utts_per_speaker:
            raise ConfigError(f"n_enroll + n_test must equal utts_per_speaker "
                              f"({self.n_enroll} + {self.n_test} != {self.utts_per_speaker})")

    @property
    def n_blocks(self) -> int:
        return self.n_test + self.n_enroll  # forward blocks + swapped blocks


FULL_BATCH = MiniBatchSpec()
DESK_BATCH = MiniBatchSpec(n_speakers=8, utts_per_speaker=4, n_enroll=2, n_test=2)


@dataclass
class ScoreBlock:
    """N x N scores; row i = test utterance of speaker i, column j =
    enrollment model of speaker j, targets on the diagonal."""

    scores: Tensor
    test_speaker_ids: list
    model_speaker_ids: list
    test_utt_ids: list = field(default_factory=list)
    role: str = FORWARD
    block_index: int = 0

    def __post_init__(self):
        if not isinstance(self.scores, Tensor):
            self.scores = Tensor(np.asarray(self.scores))
        if self.scores.ndim != 2 or self.scores.shape[0] != self.scores.shape[1]:
            raise DataError(f"score block must be square, got shape {self.scores.shape}")

    @property
    def n(self) -> int:
        return self.scores.shape[0]


@dataclass
class BatchScoreMatrix:
    """Stack of score blocks with per-row provenance."""

    blocks: list
    spec: MiniBatchSpec

    def matrix(self) -> Tensor:
        return ad.concat([b.scores for b in self.blocks], axis=0)

    def row_metadata(self) -> list:
        """(block_index, role, test_speaker_id, test_utt_id) per stacked row."""
        rows = []
        for b in self.blocks:
            for i in range(b.n):
                utt = b.test_utt_ids[i] if b.test_utt_ids else ""
                rows.append((b.block_index, b.role, b.test_speaker_ids[i], utt))
        return rows

    @property
    def shape(self) -> tuple:
        n = self.blocks[0].n
        return (len(self.blocks) * n, n)


# ---------------------------------------------------------------------------
# batch construction

def sample_minibatch(corpus, spec: MiniBatchSpec, rng: np.random.Generator):
    """Sample speakers and per-speaker utterances without replacement from
    the training split. Returns (speaker_ids, {speaker_id: [utt_ids]})."""
    eligible = [s for s in corpus.speaker_ids("train")
                if len(corpus.utts_of(s)) >= spec.utts_per_speaker]
    if len(eligible) < spec.n_speakers:
        raise DataError(f"corpus has {len(eligible)} train speakers with >= "
                        f"{spec.utts_per_speaker} utterances; batch needs {spec.n_speakers}")
    picked = rng.choice(len(eligible), size=spec.n_speakers, replace=False)
    speakers = [eligible[i] for i in picked]
    utts = {}
    for sid in speakers:
        pool = corpus.utts_of(sid)
        chosen = rng.choice(len(pool), size=spec.utts_per_speaker, replace=False)
        utts[sid] = [pool[i] for i in chosen]
    return speakers, utts


def build_batch_scores(embeddings, spec: MiniBatchSpec, scorer,
                       speaker_ids=None, utt_ids=None) -> BatchScoreMatrix:
    """Score a sampled batch into stacked blocks.

    ``embeddings`` is a list of per-speaker lists (n_speakers x
    utts_per_speaker, order fixes the model columns); ``scorer`` maps
    (enrollment model, test embedding) to a scalar score tensor. Forward
    role averages the first ``n_enroll`` embeddings per speaker into models
    and scores each remaining embedding against all of them; the swapped
    role exchanges the two halves. Diagonals are same-speaker by
    construction.
    """
    if len(embeddings) != spec.n_speakers:
        raise DataError(f"expected {spec.n_speakers} speakers, got {len(embeddings)}")
    for row in embeddings:
        if len(row) != spec.utts_per_speaker:
            raise DataError(f"every speaker needs {spec.utts_per_speaker} embeddings, got {len(row)}")
    if speaker_ids is None:
        speaker_ids = [f"spk{i}" for i in range(spec.n_speakers)]
    if utt_ids is None:
        utt_ids = [[f"{speaker_ids[i]}_u{j}" for j in range(spec.utts_per_speaker)]
                   for i in range(spec.n_speakers)]

    blocks = []

    def run_role(role, enroll_slice, test_slice):
        models = [enroll_average(row[enroll_slice]) for row in embeddings]
        n_slots = len(range(*test_slice.indices(spec.utts_per_speaker)))
        base = test_slice.indices(spec.utts_per_speaker)[0]
        for b in range(n_slots):
            rows = []
            row_utts = []
            for i in range(spec.n_speakers):
                test_emb = embeddings[i][base + b]
                row_utts.append(utt_ids[i][base + b])
                scores = [ad.reshape(scorer(models[j], test_emb), (1,))
                          for j in range(spec.n_speakers)]
                rows.append(ad.reshape(ad.concat(scores, axis=0), (1, spec.n_speakers)))
            blocks.append(ScoreBlock(
                scores=ad.concat(rows, axis=0),
                test_speaker_ids=list(speaker_ids),
                model_speaker_ids=list(speaker_ids),
                test_utt_ids=row_utts,
                role=role,
                block_index=len(blocks),
            ))

    run_role(FORWARD, slice(0, spec.n_enroll), slice(spec.n_enroll, spec.utts_per_speaker))
    run_role(SWAPPED, slice(spec.n_enroll, spec.utts_per_speaker), slice(0, spec.n_enroll))
    return BatchScoreMatrix(blocks, spec)


def build_batch_scores_fast(emb_matrix: Tensor, spec: MiniBatchSpec, switches,
                            dnn, affine, speaker_ids=None, utt_ids=None) -> BatchScoreMatrix:
    """Vectorized equivalent of :func:`build_batch_scores` for the training
    loop: scores every block in a handful of matrix ops instead of one
    scalar graph per pair.

    ``emb_matrix`` is (n_speakers * utts_per_speaker) x embedding_dim in
    speaker-major order. Produces the same blocks (same layout, metadata,
    and values up to float summation order) as the closure-based builder;
    the equivalence is pinned by tests.
    """
    from .head import COSINE_EPS, LEAKY_ALPHA

    n, u = spec.n_speakers, spec.utts_per_speaker
    if emb_matrix.ndim != 2 or emb_matrix.shape[0] != n * u:
        raise DataError(f"embedding matrix must be {n * u} x dim, got {emb_matrix.shape}")
    emb_dim = emb_matrix.shape[1]
    if speaker_ids is None:
        speaker_ids = [f"spk{i}" for i in range(n)]
    if utt_ids is None:
        utt_ids = [[f"{speaker_ids[i]}_u{j}" for j in range(u)] for i in range(n)]
    d = switches.d
    rep = np.repeat(np.arange(n), n)  # test index per pair row
    tile = np.tile(np.arange(n), n)  # model index per pair row

    def norms(mat_d: Tensor) -> Tensor:
        return ad.add(ad.sqrt(ad.reduce(ad.mul(mat_d, mat_d), "sum", axis=1)), COSINE_EPS)

    blocks = []

    def run_role(role, enroll_offsets, test_offsets):
        enroll_idx = [i * u + k for i in range(n) for k in enroll_offsets]
        grouped = ad.reshape(ad.gather_rows(emb_matrix, enroll_idx), (n, len(enroll_offsets), emb_dim))
        models = ad.reshape(ad.reduce(grouped, "mean", axis=1), (n, emb_dim))
        need_cos = switches.A or switches.B
        if need_cos and d > 0:
            models_d = ad.narrow(models, 1, 0, d)
            mnorm = norms(models_d)
        for b, off in enumerate(test_offsets):
            tests = ad.gather_rows(emb_matrix, [i * u + off for i in range(n)])
            cos = None
            if need_cos:
                if d > 0:
                    tests_d = ad.narrow(tests, 1, 0, d)
                    cos = ad.div(ad.matmul(tests_d, ad.transpose(models_d)),
                                 ad.matmul(norms(tests_d), ad.transpose(mnorm)))
                else:
                    cos = Tensor(np.zeros((n, n), dtype=emb_matrix.dtype))
            raw = cos if switches.A else None
            if switches.C:
                parts = [ad.gather_rows(models, tile), ad.gather_rows(tests, rep)]
                if switches.B:
                    parts.append(ad.reshape(cos, (n * n, 1)))
                x = ad.concat(parts, axis=1)
                for w, bias in dnn.layers:
                    x = ad.leaky_relu(ad.add(ad.matmul(x, w), bias), LEAKY_ALPHA)
                dnn_mat = ad.reshape(ad.add(ad.matmul(x, dnn.out_weight), dnn.out_bias), (n, n))
                raw = dnn_mat if raw is None else ad.add(raw, dnn_mat)
            scores = ad.add(ad.mul(affine.w, raw), affine.b)
            blocks.append(ScoreBlock(
                scores=scores,
                test_speaker_ids=list(speaker_ids),
                model_speaker_ids=list(speaker_ids),
                test_utt_ids=[utt_ids[i][off] for i in range(n)],
                role=role,
                block_index=len(blocks),
            ))

    run_role(FORWARD, range(spec.n_enroll), range(spec.n_enroll, u))
    run_role(SWAPPED, range(spec.n_enroll, u), range(spec.n_enroll))
    return BatchScoreMatrix(blocks, spec)


def reorder_to_blocks(raw, target_cols) -> list:
    """Permute rows of an (R x N) score matrix into R/N blocks whose
    targets sit on the diagonal.

    ``target_cols[r]`` is the model column holding row r's same-speaker
    score. Row values are untouched; block b takes, for each column i, the
    b-th input row (in input order) whose target is column i. Gradients of
    any downstream loss map back through the inverse permutation.
    """
    raw = raw if isinstance(raw, Tensor) else Tensor(np.asarray(raw))
    if raw.ndim != 2:
        raise DataError(f"expected a 2-d score matrix, got shape {raw.shape}")
    rows, n = raw.shape
    target_cols = [int(c) for c in target_cols]
    if len(target_cols) != rows:
        raise DataError(f"{rows} rows but {len(target_cols)} target labels")
    if rows % n != 0:
        raise DataError(f"{rows} rows cannot form blocks of {n}")
    per_col = {c: [r for r, col in enumerate(target_cols) if col == c] for c in range(n)}
    k = rows // n
    bad = [c for c, rs in per_col.items() if len(rs) != k]
    if bad:
        raise DataError(f"rows are not permutable into {k} blocks: column(s) {bad} "
                        f"have unbalanced target counts")
    blocks = []
    for b in range(k):
        perm = [per_col[c][b] for c in range(n)]
        blocks.append(ScoreBlock(
            scores=ad.gather_rows(raw, perm),
            test_speaker_ids=[f"col{c}" for c in range(n)],
            model_speaker_ids=[f"col{c}" for c in range(n)],
            role=FORWARD,
            block_index=b,
        ))
    return blocks


# ---------------------------------------------------------------------------
# losses

def _block_tensor(block) -> Tensor:
    if isinstance(block, ScoreBlock):
        t = block.scores
    elif isinstance(block, Tensor):
        t = block
    else:
        t = Tensor(np.asarray(block))
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise DataError(f"score block must be square, got shape {t.shape}")
    # float32 spreads beyond ~88 underflow e^(y - max) to exactly 0; the
    # reduction runs in float64 and the cast maps gradients back
    return ad.cast(t, np.float64)


def ge2e_softmax_loss(block) -> Tensor:
    """Per-row softmax cross-entropy of the diagonal against its row."""
    y = _block_tensor(block)
    n = y.shape[0]
    row_max = Tensor(y.data.max(axis=1, keepdims=True))  # detached shift
    shifted = ad.exp(ad.sub(y, row_max))
    lse = ad.add(row_max, ad.log(ad.reduce(shifted, "sum", axis=1)))
    per_row = ad.sub(ad.reshape(lse, (n,)), ad.diag_part(y))
    return ad.sum_all(per_row)


def ge2e_xs_loss(block) -> Tensor:
    """Extended-set variant: every row's denominator pools the full set of
    off-diagonal (different-speaker) scores of the block."""
    y = _block_tensor(block)
    n = y.shape[0]
    shift = Tensor(np.asarray(y.data.max(), dtype=y.dtype))  # detached shift
    shifted = ad.exp(ad.sub(y, shift))
    diag_shifted = ad.diag_part(shifted)
    off_sum = ad.sub(ad.sum_all(shifted), ad.sum_all(diag_shifted))
    denom = ad.add(diag_shifted, off_sum)  # e^(y_ii - m) + sum of off-diagonal terms
    lse = ad.add(shift, ad.log(denom))
    return ad.sum_all(ad.sub(lse, ad.diag_part(y)))


def ecw_bce_loss(scores, labels) -> Tensor:
    """Sigmoid binary cross-entropy with the two class means weighted
    equally: mean softplus(-target scores) + mean softplus(nontarget)."""
    scores = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores))
    if scores.ndim != 1:
        scores = ad.reshape(scores, (scores.size,))
    scores = ad.cast(scores, np.float64)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if labels.size != scores.size:
        raise DataError(f"{scores.size} scores but {labels.size} labels")
    target_idx = np.nonzero(labels)[0]
    nontarget_idx = np.nonzero(~labels)[0]
    if target_idx.size == 0 or nontarget_idx.size == 0:
        raise DataError("equal-class-weight BCE needs at least one score per class")
    tar = ad.gather_rows(scores, target_idx)
    non = ad.gather_rows(scores, nontarget_idx)
    return ad.add(ad.mean_all(ad.softplus(ad.neg(tar))), ad.mean_all(ad.softplus(non)))


def _block_bce(block) -> Tensor:
    y = _block_tensor(block)
    n = y.shape[0]
    labels = np.eye(n, dtype=bool).reshape(-1)
    return ecw_bce_loss(ad.reshape(y, (n * n,)), labels)


_BLOCK_LOSSES = {
    "ge2e_softmax": ge2e_softmax_loss,
    "ge2e_xs": ge2e_xs_loss,
    "ecw_bce": _block_bce,
}


def block_loss(block, kind: str) -> Tensor:
    if kind not in _BLOCK_LOSSES:
        raise ContractError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return _BLOCK_LOSSES[kind](block)


def score_matrix_csv(matrix: BatchScoreMatrix) -> str:
    """Debug dump: one row per test utterance with role and block index,
    columns headed by the model speaker ids."""
    models = matrix.blocks[0].model_speaker_ids
    lines = ["role,block_index,test_utt," + ",".join(str(m) for m in models)]
    for block in matrix.blocks:
        data = block.scores.data
        for i in range(block.n):
            utt = block.test_utt_ids[i] if block.test_utt_ids else block.test_speaker_ids[i]
            row = ",".join(repr(float(v)) for v in data[i])
            lines.append(f"{block.role},{block.block_index},{utt},{row}")
    return "\n".join(lines) + "\n"


def batch_loss(matrix: BatchScoreMatrix, kind: str) -> Tensor:
    """Sum of the per-block losses over all blocks of the mini-batch."""
    total = None
    for block in matrix.blocks:
        term = block_loss(block, kind)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise DataError("batch has no score blocks")
    return total
