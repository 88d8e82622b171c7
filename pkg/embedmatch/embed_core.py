"""Embedding matching: the vocabulary matrix G, similarity scores and posteriors.

Every word (or pron) is a column ``g_i`` of G. An acoustic embedding ``f`` is
scored against every column with the negative squared L2 distance, expanded as
``2 g_i.f - g_i.g_i - f.f`` so that the column norms can be cached.
"""

import hashlib
import math
from enum import Enum
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence, final

import numpy as np
import numpy.typing as npt
from scipy.special import logsumexp, log_softmax

from .errors import ConfigurationError, DataError, InputError, InternalError, ParseError

FloatArray = npt.NDArray[np.float64]

EMBEDDING_FILE_MAGIC = "a2w-emb v1"


class CombinationMode(Enum):
    """How the scores of the K embeddings of a frame are combined"""

    SUM = "sum"
    LOG_SUM_EXP = "log-sum-exp"


class FrameOutput(NamedTuple):
    """Acoustic model output for one frame: b_t and the K embeddings f_{t,k}"""

    blank_raw: float
    embeddings: FloatArray  # (K, D)


class ScoreVector(NamedTuple):
    blank_score: float
    word_scores: FloatArray


def as_embedding(values: Iterable[float] | FloatArray, dim: int | None = None) -> FloatArray:
    """Convert values to a finite float64 vector, optionally checking its length"""
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1:
        raise ConfigurationError(f"Embedding must be 1-D, got shape {vector.shape}")
    if dim is not None and vector.shape[0] != dim:
        raise ConfigurationError(
            f"Embedding has dimension {vector.shape[0]}, expected {dim}"
        )
    if not np.all(np.isfinite(vector)):
        raise InputError("Embedding contains non-finite values")
    return vector


def _frozen(array: FloatArray) -> FloatArray:
    array = np.ascontiguousarray(array, dtype=np.float64)
    array.setflags(write=False)
    return array


def squared_norms(rows: FloatArray) -> FloatArray:
    """g.g for every row, one dot product per row so a recomputation is bit-identical"""
    return np.fromiter((np.dot(row, row) for row in rows), dtype=np.float64, count=rows.shape[0])


@final
class VocabMatrix:
    """The matrix G with cached squared column norms.

    Columns are stored row-wise (one row per label). The static region and the
    dynamic region are kept as separate arrays so that extending or clearing the
    dynamic region never touches the static one.
    """

    def __init__(
        self,
        labels: Sequence[int],
        static: FloatArray,
        dynamic_labels: Sequence[int] = (),
        dynamic: FloatArray | None = None,
    ) -> None:
        static = np.asarray(static, dtype=np.float64)
        if static.ndim != 2:
            raise ConfigurationError(f"Static columns must be 2-D, got {static.shape}")
        if len(labels) != static.shape[0]:
            raise ConfigurationError("One label is needed per static column")
        dim = static.shape[1]
        if dynamic is None:
            dynamic = np.zeros((0, dim))
        dynamic = np.asarray(dynamic, dtype=np.float64)
        if dynamic.ndim != 2 or dynamic.shape[1] != dim:
            raise ConfigurationError(
                f"Dynamic columns must have dimension {dim}, got shape {dynamic.shape}"
            )
        if len(dynamic_labels) != dynamic.shape[0]:
            raise ConfigurationError("One label is needed per dynamic column")
        all_labels = tuple(int(label) for label in (*labels, *dynamic_labels))
        if len(set(all_labels)) != len(all_labels):
            raise InputError("Column labels must be unique")
        if not (np.all(np.isfinite(static)) and np.all(np.isfinite(dynamic))):
            raise InputError("Vocabulary matrix contains non-finite values")

        self.dim = dim
        self.labels = all_labels
        self.static_count = static.shape[0]
        self.dynamic_count = dynamic.shape[0]
        self._static = _frozen(static)
        self._dynamic = _frozen(dynamic)
        self._static_sq_norms = _frozen(squared_norms(self._static))
        self._dynamic_sq_norms = _frozen(squared_norms(self._dynamic))

    @classmethod
    def from_entries(
        cls, entries: Sequence[tuple[int, FloatArray]], dim: int
    ) -> "VocabMatrix":
        """Build a static matrix from (label, embedding) pairs"""
        matrix = np.zeros((len(entries), dim))
        for i, (_, vector) in enumerate(entries):
            matrix[i] = as_embedding(vector, dim)
        return cls([label for label, _ in entries], matrix)

    def __len__(self) -> int:
        return self.static_count + self.dynamic_count

    @property
    def matrix(self) -> FloatArray:
        """All columns, static first, one row per label"""
        if self.dynamic_count == 0:
            return self._static
        return np.vstack([self._static, self._dynamic])

    @property
    def sq_norms(self) -> FloatArray:
        if self.dynamic_count == 0:
            return self._static_sq_norms
        return np.concatenate([self._static_sq_norms, self._dynamic_sq_norms])

    def blocks(self) -> Iterable[tuple[FloatArray, FloatArray]]:
        """(columns, squared norms) for the static and the dynamic region"""
        yield self._static, self._static_sq_norms
        if self.dynamic_count:
            yield self._dynamic, self._dynamic_sq_norms

    def column(self, index: int) -> FloatArray:
        if index < self.static_count:
            return self._static[index]
        return self._dynamic[index - self.static_count]

    def position_of(self) -> dict[int, int]:
        """Map each label to its column position"""
        return {label: i for i, label in enumerate(self.labels)}

    def extend_dynamic(self, entries: Sequence[tuple[int, FloatArray]]) -> "VocabMatrix":
        """Return a new matrix with ``entries`` appended to the dynamic region"""
        if not entries:
            return self
        known = set(self.labels)
        new_labels = [int(label) for label, _ in entries]
        for label in new_labels:
            if label in known:
                raise InputError(f"Label {label} is already present in the matrix")
            known.add(label)
        added = np.zeros((len(entries), self.dim))
        for i, (_, vector) in enumerate(entries):
            added[i] = as_embedding(vector, self.dim)
        return VocabMatrix(
            self.labels[: self.static_count],
            self._static,
            (*self.labels[self.static_count :], *new_labels),
            np.vstack([self._dynamic, added]),
        )

    def clear_dynamic(self) -> "VocabMatrix":
        """Return the static matrix, sharing the static arrays"""
        if self.dynamic_count == 0:
            return self
        return VocabMatrix(self.labels[: self.static_count], self._static)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.asarray(self.labels, dtype="<i8").tobytes())
        digest.update(self._static.astype("<f8").tobytes())
        digest.update(self._dynamic.astype("<f8").tobytes())
        return digest.hexdigest()


def score_against(f: FloatArray, G: VocabMatrix) -> FloatArray:
    """Negative squared L2 distance between f and every column of G.

    ``f`` may be a single embedding (D,) or a stack of embeddings (..., D); the
    result has shape (n,) or (..., n).
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != G.dim:
        raise ConfigurationError(f"Embedding dimension {f.shape[-1]} != matrix dimension {G.dim}")
    if not np.all(np.isfinite(f)):
        raise InputError("Embedding contains non-finite values")
    f_sq = np.einsum("...d,...d->...", f, f)[..., None]
    blocks = [2.0 * (f @ columns.T) - sq_norms - f_sq for columns, sq_norms in G.blocks()]
    if len(blocks) == 1:
        return blocks[0]
    return np.concatenate(blocks, axis=-1)


def naive_scores(f: FloatArray, G: VocabMatrix) -> FloatArray:
    """Reference implementation of score_against, one column at a time"""
    f = as_embedding(f, G.dim)
    return np.array([-float(np.sum((f - G.column(i)) ** 2)) for i in range(len(G))])


def combine_scores(
    per_embedding_scores: Sequence[FloatArray] | FloatArray,
    mode: CombinationMode = CombinationMode.SUM,
) -> FloatArray:
    """Combine K score arrays (stacked on the first axis) into one"""
    stacked = [np.asarray(s, dtype=np.float64) for s in per_embedding_scores]
    if not stacked:
        raise InternalError("At least one score array is required")
    if any(s.shape != stacked[0].shape for s in stacked):
        raise InternalError("Score arrays of different shapes cannot be combined")
    if len(stacked) == 1:
        return stacked[0]
    match mode:
        case CombinationMode.SUM:
            return np.sum(stacked, axis=0)
        case CombinationMode.LOG_SUM_EXP:
            return logsumexp(np.stack(stacked), axis=0)


def branch_weights(
    per_embedding_scores: FloatArray, mode: CombinationMode
) -> FloatArray:
    """d(combined)/d(s_k) for each branch, same shape as the stacked scores"""
    if mode is CombinationMode.SUM or per_embedding_scores.shape[0] == 1:
        return np.ones_like(per_embedding_scores)
    combined = logsumexp(per_embedding_scores, axis=0)
    return np.exp(per_embedding_scores - combined)


def blank_score(b: float | FloatArray) -> float | FloatArray:
    """The blank score -b^2"""
    if isinstance(b, np.ndarray):
        if not np.all(np.isfinite(b)):
            raise InputError("Blank outputs must be finite")
        return -np.square(b)
    if not math.isfinite(b):
        raise InputError("Blank output must be finite")
    return -(b * b)


def frame_scores(out: FrameOutput, G: VocabMatrix, mode: CombinationMode) -> ScoreVector:
    embeddings = np.atleast_2d(np.asarray(out.embeddings, dtype=np.float64))
    per_embedding = score_against(embeddings, G)
    return ScoreVector(
        blank_score=float(blank_score(float(out.blank_raw))),
        word_scores=combine_scores(list(per_embedding), mode),
    )


def frame_posteriors(
    out: FrameOutput, G: VocabMatrix, mode: CombinationMode = CombinationMode.SUM
) -> FloatArray:
    """Softmax over [blank score, combined word scores] for one frame"""
    if len(G) == 0:
        raise ConfigurationError("Vocabulary is empty")
    scores = frame_scores(out, G, mode)
    logits = np.concatenate([[scores.blank_score], scores.word_scores])
    return np.exp(log_softmax(logits))


def sequence_logits(
    blank_raw: FloatArray,
    embeddings: FloatArray,
    G: VocabMatrix,
    mode: CombinationMode = CombinationMode.SUM,
) -> tuple[FloatArray, FloatArray]:
    """Pre-softmax scores for a whole sequence.

    Args:
        blank_raw: (T,) raw blank outputs b_t
        embeddings: (T, K, D) acoustic embeddings
        G: the vocabulary matrix
        mode: how the K score arrays are combined

    Returns:
        (logits (T, 1 + n), per-embedding scores (K, T, n))
    """
    if len(G) == 0:
        raise ConfigurationError("Vocabulary is empty")
    per_embedding = np.moveaxis(score_against(embeddings, G), 1, 0)
    combined = combine_scores(per_embedding, mode)
    logits = np.concatenate([blank_score(np.asarray(blank_raw))[:, None], combined], axis=1)
    return logits, per_embedding


def sequence_posteriors(
    blank_raw: FloatArray,
    embeddings: FloatArray,
    G: VocabMatrix,
    mode: CombinationMode = CombinationMode.SUM,
) -> FloatArray:
    """Log posteriors (T, 1 + n) for a sequence of frame outputs"""
    logits, _ = sequence_logits(blank_raw, embeddings, G, mode)
    return log_softmax(logits, axis=1)


def save_embeddings(path: Path, G: VocabMatrix) -> None:
    """Write G as ``a2w-emb v1`` TSV, one row per column"""
    lines = [f"{EMBEDDING_FILE_MAGIC} dim={G.dim}"]
    matrix = G.matrix
    for label, row in zip(G.labels, matrix):
        lines.append("\t".join([str(label), *("%.17g" % value for value in row)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embeddings(path: Path) -> VocabMatrix:
    """Read an ``a2w-emb v1`` TSV into a static VocabMatrix"""
    if not path.exists():
        raise DataError(f"Embedding file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(EMBEDDING_FILE_MAGIC + " dim="):
        raise ParseError(f"expected header '{EMBEDDING_FILE_MAGIC} dim=<D>'", 1, str(path))
    try:
        dim = int(lines[0].split("dim=", 1)[1])
    except ValueError:
        raise ParseError("dimension is not an integer", 1, str(path)) from None
    entries: list[tuple[int, FloatArray]] = []
    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != dim + 1:
            raise ParseError(f"expected {dim} values, got {len(fields) - 1}", line_number, str(path))
        try:
            entries.append((int(fields[0]), np.array([float(v) for v in fields[1:]])))
        except ValueError as e:
            raise ParseError(str(e), line_number, str(path)) from None
    return VocabMatrix.from_entries(entries, dim)
