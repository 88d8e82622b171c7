"""Small acoustic model trained with CTC against a frozen G.

Stacked input frames go through ``tanh(W1 x + b1)`` and a final affine layer of
width ``1 + K * D``: the first output is b_t, the rest are the K embeddings.

Checkpoint layout::

    a2w-toy-model v1\\n
    config-bytes=<N>\\n
    <N bytes of ModelConfig JSON>
    W1 (hidden, input_dim), b1 (hidden,), W2 (1 + K*D, hidden), b2 (1 + K*D,)

tensors as little-endian float64 in C order.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence, final

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import log_softmax

from .ctc_loss import ctc_loss, min_frames
from .embed_core import (
    CombinationMode,
    FloatArray,
    FrameOutput,
    VocabMatrix,
    branch_weights,
    sequence_logits,
)
from .errors import ConfigurationError, DataError, InternalError
from .pron_lexicon import TextEncoderConfig, VocabMode

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"a2w-toy-model v1\n"
PARAMETER_ORDER = ("W1", "b1", "W2", "b2")


class ModelConfig(BaseModel):
    dim: int = Field(default=40, ge=1)
    k: int = Field(default=1, ge=1, le=3)
    context: int = Field(default=2, ge=0)
    hidden: int = Field(default=128, ge=1)
    feature_dim: int = Field(default=16, ge=1)
    seed: int = Field(default=0, ge=0)
    learning_rate: float = Field(default=0.02, gt=0.0)
    epochs: int = Field(default=15, ge=1)
    batch_size: int = Field(default=16, ge=1)
    subsample: int = Field(default=1, ge=1)
    grad_clip: float = Field(default=10.0, gt=0.0)
    combination: CombinationMode = CombinationMode.SUM
    # how G was built, so a checkpoint can rebuild dynamic columns at decode time
    vocab_mode: VocabMode = VocabMode.PRON
    decay: float = Field(default=0.6, gt=0.0, lt=1.0)
    encoder_seed: int = Field(default=0, ge=0)

    def encoder_config(self) -> TextEncoderConfig:
        return TextEncoderConfig(dim=self.dim, decay=self.decay, seed=self.encoder_seed)

    @property
    def input_dim(self) -> int:
        return self.feature_dim * (2 * self.context + 1)

    @property
    def output_dim(self) -> int:
        return 1 + self.k * self.dim


class ModelOutput(NamedTuple):
    """Outputs for a whole utterance after subsampling"""

    blank_raw: FloatArray  # (T,)
    embeddings: FloatArray  # (T, K, D)

    def frames(self) -> Iterator[FrameOutput]:
        for b, f in zip(self.blank_raw, self.embeddings):
            yield FrameOutput(float(b), f)


class TrainingExample(NamedTuple):
    id: str
    frames: FloatArray
    labels: tuple[int, ...]  # G column labels (word ids or pron ids)


class TrainingReport(BaseModel):
    epoch_losses: list[float]
    skipped_utterances: list[str] = []
    g_checksum_before: str
    g_checksum_after: str
    parameter_count: int


class _Cache(NamedTuple):
    x: FloatArray
    h: FloatArray
    out: ModelOutput


@final
class ToyModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, FloatArray] | None = None) -> None:
        self.cfg = cfg
        if params is None:
            params = _initial_params(cfg)
        shapes = self.parameter_shapes()
        for name in PARAMETER_ORDER:
            if name not in params or params[name].shape != shapes[name]:
                raise ConfigurationError(f"Parameter {name} must have shape {shapes[name]}")
        self.params = {name: np.array(params[name], dtype=np.float64) for name in PARAMETER_ORDER}

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "ToyModel":
        return cls(cfg, {name: np.zeros(shape) for name, shape in _shapes(cfg).items()})

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        return _shapes(self.cfg)

    def parameter_count(self) -> int:
        return sum(int(np.prod(shape)) for shape in self.parameter_shapes().values())

    def stack_frames(self, frames: FloatArray) -> FloatArray:
        """Stack ``context`` neighbours on each side (edges repeated), keep every
        ``subsample``-th frame"""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.cfg.feature_dim:
            raise ConfigurationError(
                f"Expected frames of shape (T, {self.cfg.feature_dim}), got {frames.shape}"
            )
        if frames.shape[0] == 0:
            raise ConfigurationError("At least one frame is required")
        c = self.cfg.context
        padded = np.concatenate([np.repeat(frames[:1], c, 0), frames, np.repeat(frames[-1:], c, 0)])
        T = frames.shape[0]
        stacked = np.concatenate([padded[i : i + T] for i in range(2 * c + 1)], axis=1)
        return stacked[:: self.cfg.subsample]

    def _forward(self, frames: FloatArray) -> _Cache:
        x = self.stack_frames(frames)
        p = self.params
        h = np.tanh(x @ p["W1"].T + p["b1"])
        y = h @ p["W2"].T + p["b2"]
        out = ModelOutput(
            blank_raw=y[:, 0],
            embeddings=y[:, 1:].reshape(y.shape[0], self.cfg.k, self.cfg.dim),
        )
        return _Cache(x, h, out)

    def forward_batch(self, frames: FloatArray) -> ModelOutput:
        return self._forward(frames).out

    def forward(self, frames: FloatArray) -> list[FrameOutput]:
        return list(self.forward_batch(frames).frames())

    def log_posteriors(self, frames: FloatArray, G: VocabMatrix) -> FloatArray:
        out = self.forward_batch(frames)
        logits, _ = sequence_logits(out.blank_raw, out.embeddings, G, self.cfg.combination)
        return log_softmax(logits, axis=1)

    def loss_and_grads(
        self, frames: FloatArray, columns: Sequence[int], G: VocabMatrix
    ) -> tuple[float, dict[str, FloatArray]]:
        """CTC loss of the reference columns (1-based, 0 is blank) and parameter gradients"""
        cache = self._forward(frames)
        out = cache.out
        logits, per_embedding = sequence_logits(out.blank_raw, out.embeddings, G, self.cfg.combination)
        result = ctc_loss(log_softmax(logits, axis=1), columns)
        d_blank, d_embeddings = backprop_scores(
            result.grad, out.blank_raw, out.embeddings, per_embedding, G, self.cfg.combination
        )
        dy = np.concatenate([d_blank[:, None], d_embeddings.reshape(d_embeddings.shape[0], -1)], axis=1)
        p = self.params
        grads = {"W2": dy.T @ cache.h, "b2": dy.sum(axis=0)}
        da = (dy @ p["W2"]) * (1.0 - cache.h**2)
        grads["W1"] = da.T @ cache.x
        grads["b1"] = da.sum(axis=0)
        return result.neg_log_likelihood, grads

    def save(self, path: Path) -> None:
        config = self.cfg.model_dump_json().encode("utf-8")
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(f"config-bytes={len(config)}\n".encode("ascii"))
            f.write(config)
            for name in PARAMETER_ORDER:
                f.write(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: Path) -> "ToyModel":
        if not path.exists():
            raise DataError(f"Checkpoint not found: {path}")
        data = path.read_bytes()
        if not data.startswith(CHECKPOINT_MAGIC):
            raise DataError(f"{path} is not an a2w-toy-model v1 checkpoint")
        try:
            cfg, params, offset = _parse_checkpoint(data)
        except ValueError as e:
            # truncated tensors, a bad header or an invalid config block
            raise DataError(f"{path}: corrupt checkpoint ({e})") from None
        if offset != len(data):
            raise DataError(f"{path}: {len(data) - offset} trailing bytes")
        return cls(cfg, params)


def _parse_checkpoint(data: bytes) -> tuple[ModelConfig, dict[str, FloatArray], int]:
    offset = len(CHECKPOINT_MAGIC)
    end = data.index(b"\n", offset)
    header = data[offset:end].decode("ascii")
    if not header.startswith("config-bytes="):
        raise ValueError("missing config-bytes header")
    size = int(header.split("=", 1)[1])
    offset = end + 1
    cfg = ModelConfig.model_validate_json(data[offset : offset + size])
    offset += size
    params: dict[str, FloatArray] = {}
    for name, shape in _shapes(cfg).items():
        count = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += count * 8
    return cfg, params, offset


def _initial_params(cfg: ModelConfig) -> dict[str, FloatArray]:
    """Seeded initialisation. W1, the blank row and the first embedding head are
    drawn in the same order for every K, so models differing only in K start alike.

    Under sum combination the K heads start as copies of the first one: the
    combined score only sees their mean, so they stay tied. Log-sum-exp needs
    distinct heads and draws the others.
    """
    rng = np.random.default_rng(cfg.seed)
    W1 = rng.standard_normal((cfg.hidden, cfg.input_dim)) / np.sqrt(cfg.input_dim)
    rows = rng.standard_normal((1 + cfg.dim, cfg.hidden)) / np.sqrt(cfg.hidden)
    blank_row, first = rows[:1], rows[1:]
    if cfg.combination is CombinationMode.SUM:
        others = [first] * (cfg.k - 1)
    else:
        others = [rng.standard_normal((cfg.dim, cfg.hidden)) / np.sqrt(cfg.hidden) for _ in range(cfg.k - 1)]
    return {
        "W1": W1,
        "b1": np.zeros(cfg.hidden),
        "W2": np.concatenate([blank_row, first, *others]),
        "b2": np.zeros(cfg.output_dim),
    }


def step_size(learning_rate: float, cfg: ModelConfig) -> float:
    """SGD step. With sum combination K tied heads move the combined scores K
    times as far as one head would, so the step is divided by K."""
    if cfg.combination is CombinationMode.SUM:
        return learning_rate / cfg.k
    return learning_rate


def _shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {
        "W1": (cfg.hidden, cfg.input_dim),
        "b1": (cfg.hidden,),
        "W2": (cfg.output_dim, cfg.hidden),
        "b2": (cfg.output_dim,),
    }


def score_gradient(f: FloatArray, G: VocabMatrix) -> FloatArray:
    """d s_i / d f = 2 (g_i - f), one row per column of G"""
    return 2.0 * (G.matrix - np.asarray(f, dtype=np.float64))


def backprop_scores(
    d_logits: FloatArray,
    blank_raw: FloatArray,
    embeddings: FloatArray,
    per_embedding: FloatArray,
    G: VocabMatrix,
    mode: CombinationMode,
) -> tuple[FloatArray, FloatArray]:
    """Chain rule from d loss / d [-b^2, combined scores] back to b_t and f_{t,k}.

    Args:
        d_logits: (T, 1 + n) gradient with respect to the pre-softmax scores
        blank_raw: (T,) raw blank outputs
        embeddings: (T, K, D)
        per_embedding: (K, T, n) score of each embedding against G
        G: the vocabulary matrix
        mode: combination mode used in the forward pass

    Returns:
        (d b (T,), d f (T, K, D))
    """
    d_blank = d_logits[:, 0] * (-2.0 * blank_raw)
    d_combined = d_logits[:, 1:]
    weights = branch_weights(per_embedding, mode)
    matrix = G.matrix
    d_embeddings = np.zeros_like(embeddings)
    for k in range(embeddings.shape[1]):
        d_scores = d_combined * weights[k]
        d_embeddings[:, k] = 2.0 * (d_scores @ matrix - embeddings[:, k] * d_scores.sum(axis=1)[:, None])
    return d_blank, d_embeddings


def _label_columns(example: TrainingExample, position: dict[int, int]) -> list[int]:
    columns = []
    for label in example.labels:
        if label not in position:
            raise DataError(f"Label {label} of utterance {example.id} is not a column of G")
        columns.append(position[label] + 1)
    return columns


def train(
    model: ToyModel,
    corpus: Sequence[TrainingExample],
    G: VocabMatrix,
    cfg: ModelConfig | None = None,
    jobs: int = 1,
) -> TrainingReport:
    """Plain SGD on the summed CTC loss of each mini-batch, G kept frozen.

    Batches are drawn in an order shuffled by ``cfg.seed``. Per-utterance
    gradients may be computed on ``jobs`` threads; they are always summed in
    batch order so the result does not depend on ``jobs``.
    """
    cfg = cfg or model.cfg
    checksum_before = G.checksum()
    position = G.position_of()
    columns = {example.id: _label_columns(example, position) for example in corpus}

    skipped: list[str] = []
    usable: list[TrainingExample] = []
    for example in corpus:
        frames = -(-len(example.frames) // model.cfg.subsample)
        if frames < min_frames(columns[example.id]):
            skipped.append(example.id)
        else:
            usable.append(example)
    if skipped:
        logger.warning("Skipping %d utterances too short for their reference", len(skipped))
    if not usable:
        raise DataError("No trainable utterances in the corpus")

    rng = np.random.default_rng(cfg.seed)
    epoch_losses: list[float] = []
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(usable))
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                batch = [usable[i] for i in order[start : start + cfg.batch_size]]
                results = list(
                    pool.map(lambda ex: model.loss_and_grads(ex.frames, columns[ex.id], G), batch)
                    if jobs > 1
                    else (model.loss_and_grads(ex.frames, columns[ex.id], G) for ex in batch)
                )
                grads = {name: np.zeros_like(value) for name, value in model.params.items()}
                for loss, example_grads in results:
                    total += loss
                    for name in grads:
                        grads[name] += example_grads[name]
                norm = np.sqrt(sum(float(np.sum(g**2)) for g in grads.values())) / len(batch)
                scale = step_size(cfg.learning_rate, model.cfg) / len(batch)
                if norm > cfg.grad_clip:
                    scale *= cfg.grad_clip / norm
                for name, grad in grads.items():
                    model.params[name] -= scale * grad
            epoch_losses.append(total / len(usable))
            logger.info("epoch %d/%d mean CTC loss %.4f", epoch + 1, cfg.epochs, epoch_losses[-1])

    checksum_after = G.checksum()
    if checksum_after != checksum_before:
        raise InternalError("G changed during training")
    return TrainingReport(
        epoch_losses=epoch_losses,
        skipped_utterances=skipped,
        g_checksum_before=checksum_before,
        g_checksum_after=checksum_after,
        parameter_count=model.parameter_count(),
    )
