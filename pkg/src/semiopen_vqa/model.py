"""The answer-querying VQA model.

Pipeline: per-cell image embedding and a small question encoder produce
``F_i`` (N x D_f) and ``F_q`` (M x D_f); the fusion stage (concatenation +
self-attention encoder layers + affine map, or a pooled sum/product baseline)
produces the fused memory ``F_f``; a transformer decoder refines one learnable
embedding per answer class against that memory; a linear map plus sigmoid
scores every class independently; the asymmetric loss trains it.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import CELL_FEATURES, QUESTION_TOKENS, EncodedDataset
from .nn import DecoderLayer, EncoderLayer, Linear, Module
from .tensor import Parameter, ShapeError, Tensor

FUSION_KINDS = ("cman", "sum", "mul")
HEAD_KINDS = ("decoder", "linear")
LOG_CLAMP = 1e-12


@dataclass
class ModelConfig:
    feature_dim: int = 64
    num_image_tokens: int = 16
    cell_features: int = CELL_FEATURES
    max_question_tokens: int = 8
    question_vocab_size: int = len(QUESTION_TOKENS)
    num_answer_classes: int = 23
    answer_embed_dim: int = 1024
    fusion_layers: int = 2
    decoder_layers: int = 2
    num_heads: int = 4
    ffn_mult: int = 4
    activation: str = "relu"
    gamma_plus: float = 1.0
    gamma_minus: float = 4.0
    fusion_kind: str = "cman"
    head_kind: str = "decoder"
    per_class_head: bool = False
    plain_eq2: bool = False
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.decoder_layers < 1:
            raise ValueError("decoder_layers must be >= 1")
        if self.num_answer_classes < 2:
            raise ValueError("num_answer_classes must be >= 2")
        if self.gamma_plus < 0 or self.gamma_minus < 0:
            raise ValueError("gamma_plus and gamma_minus must be >= 0")
        if self.fusion_kind not in FUSION_KINDS:
            raise ValueError(f"fusion_kind must be one of {FUSION_KINDS}, got {self.fusion_kind!r}")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        for dim in (self.feature_dim, self.answer_embed_dim):
            if dim % self.num_heads:
                raise ValueError(f"dimension {dim} is not divisible by num_heads {self.num_heads}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Prediction:
    probs: np.ndarray
    chosen_class: int
    logits: np.ndarray


# ------------------------------------------------------------------ encoders

class ImageEncoder(Module):
    """Per-cell affine patch embedding plus a learned positional embedding."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.n = cfg.num_image_tokens
        self.proj = Linear(cfg.cell_features, cfg.feature_dim, "image.proj", rng, dtype=dt)
        self.pos = Parameter(rng.standard_normal((cfg.num_image_tokens, cfg.feature_dim)) * 0.1,
                             "image.pos", dtype=dt)

    def __call__(self, images: Tensor) -> Tensor:
        if images.shape[-2] != self.n:
            raise ShapeError(f"expected {self.n} image cells, got {images.shape[-2]}")
        return self.proj(images) + self.pos


class QuestionEncoder(Module):
    """Token embedding + positional embedding + one encoder layer."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.vocab_size = cfg.question_vocab_size
        self.embed = Parameter(rng.standard_normal((cfg.question_vocab_size, cfg.feature_dim)),
                               "question.embed", dtype=dt)
        self.pos = Parameter(rng.standard_normal((cfg.max_question_tokens, cfg.feature_dim)) * 0.1,
                             "question.pos", dtype=dt)
        self.encoder = EncoderLayer(cfg.feature_dim, cfg.num_heads, cfg.ffn_mult, "question.encoder", rng,
                                    cfg.activation, cfg.plain_eq2, dt)

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError(f"question token id outside vocabulary of size {self.vocab_size}")
        if ids.shape[-1] != self.pos.shape[0]:
            raise ShapeError(f"question must be padded to {self.pos.shape[0]} tokens, got {ids.shape[-1]}")
        return self.encoder(T.embedding(self.embed, ids) + self.pos)


# -------------------------------------------------------------------- fusion

class CmanFusion(Module):
    """Concatenate image and question rows, self-attend, then an affine map."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.layers = [EncoderLayer(cfg.feature_dim, cfg.num_heads, cfg.ffn_mult, f"fusion.layers.{i}", rng,
                                    cfg.activation, cfg.plain_eq2, dt) for i in range(cfg.fusion_layers)]
        self.out = Linear(cfg.feature_dim, cfg.feature_dim, "fusion.out", rng, dtype=dt)

    def __call__(self, f_i: Tensor, f_q: Tensor) -> Tensor:
        x = T.concat_rows(f_i, f_q)
        for layer in self.layers:
            x = layer(x)
        return self.out(x)


def pooling_matrix(n_from: int, n_to: int, dtype=np.float64) -> np.ndarray:
    """``(n_to, n_from)`` matrix averaging contiguous near-equal chunks of rows."""
    P = np.zeros((n_to, n_from), dtype=dtype)
    for r, chunk in enumerate(np.array_split(np.arange(n_from), n_to)):
        P[r, chunk] = 1.0 / len(chunk)
    return P


class BaselineFusion(Module):
    """Elementwise sum or product of row-aligned features, then an affine map."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        if cfg.fusion_kind not in ("sum", "mul"):
            raise ValueError(f"baseline fusion kind must be 'sum' or 'mul', got {cfg.fusion_kind!r}")
        self.kind = cfg.fusion_kind
        self.out = Linear(cfg.feature_dim, cfg.feature_dim, "fusion.out", rng, dtype=cfg.np_dtype)

    def __call__(self, f_i: Tensor, f_q: Tensor) -> Tensor:
        return baseline_fuse(f_i, f_q, self.kind, self.out)


def baseline_fuse(f_i: Tensor, f_q: Tensor, kind: str, out: Linear) -> Tensor:
    if kind not in ("sum", "mul"):
        raise ValueError(f"unknown baseline fusion kind {kind!r}")
    if f_i.shape[-1] != f_q.shape[-1]:
        raise ShapeError(f"feature dims differ: {f_i.shape} vs {f_q.shape}")
    n, m = f_i.shape[-2], f_q.shape[-2]
    if n > m:
        f_i = T.matmul(Tensor(pooling_matrix(n, m, f_i.dtype)), f_i)
    elif m > n:
        f_q = T.matmul(Tensor(pooling_matrix(m, n, f_q.dtype)), f_q)
    fused = f_i + f_q if kind == "sum" else f_i * f_q
    return out(fused)


# -------------------------------------------------------------------- heads

class AnswerQueryDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        da = cfg.answer_embed_dim
        self.answers = Parameter(rng.standard_normal((cfg.num_answer_classes, da)), "decoder.answers", dtype=dt)
        self.memory_proj = (Linear(cfg.feature_dim, da, "decoder.memory_proj", rng, dtype=dt)
                            if da != cfg.feature_dim else None)
        self.layers = [DecoderLayer(da, cfg.num_heads, cfg.ffn_mult, f"decoder.layers.{i}", rng,
                                    cfg.activation, cfg.plain_eq2, dt) for i in range(cfg.decoder_layers)]

    def __call__(self, fused: Tensor) -> Tensor:
        return answer_query_decode(fused, self)


def answer_query_decode(fused: Tensor, dec: AnswerQueryDecoder) -> Tensor:
    memory = dec.memory_proj(fused) if dec.memory_proj is not None else fused
    a = dec.answers
    if memory.ndim > 2:
        a = a + Tensor(np.zeros(memory.shape[:-2] + a.shape, dtype=a.dtype))
    for layer in dec.layers:
        a = layer(a, memory)
    return a


class AnswerScorer(Module):
    """One logit per refined answer row: shared ``D_a -> 1`` map, or per-class weights."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.per_class = cfg.per_class_head
        da = cfg.answer_embed_dim
        if self.per_class:
            self.weight = Parameter(rng.standard_normal((cfg.num_answer_classes, da)) / np.sqrt(da),
                                    "head.weight", dtype=dt)
            self.bias = Parameter(np.zeros(cfg.num_answer_classes), "head.bias", dtype=dt)
        else:
            self.linear = Linear(da, 1, "head", rng, dtype=dt)

    def __call__(self, a_l: Tensor) -> Tensor:
        if self.per_class:
            return (a_l * self.weight).sum(axis=-1) + self.bias
        z = self.linear(a_l)
        return z.reshape(z.shape[:-1])


class LinearClassifier(Module):
    """Mean-pool fused rows, then a ``D_f -> C`` linear map (no answer decoder)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.linear = Linear(cfg.feature_dim, cfg.num_answer_classes, "classifier", rng, dtype=cfg.np_dtype)

    def __call__(self, fused: Tensor) -> Tensor:
        z = self.linear(fused.mean(axis=-2, keepdims=True))
        return z.reshape(z.shape[:-2] + z.shape[-1:])


# -------------------------------------------------------------------- model

class VqaModel(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.answer_vocab: tuple[str, ...] | None = None  # answer strings, set when trained on a dataset
        rng = np.random.default_rng(cfg.seed)
        self.image = ImageEncoder(cfg, rng)
        self.question = QuestionEncoder(cfg, rng)
        self.fusion = CmanFusion(cfg, rng) if cfg.fusion_kind == "cman" else BaselineFusion(cfg, rng)
        if cfg.head_kind == "decoder":
            self.decoder = AnswerQueryDecoder(cfg, rng)
            self.scorer = AnswerScorer(cfg, rng)
        else:
            self.classifier = LinearClassifier(cfg, rng)
        names = [n for n, _ in self.named_parameters()]
        if len(names) != len(set(names)):
            raise RuntimeError("duplicate parameter names")

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"parameter mismatch; missing: {missing}; unexpected: {unexpected}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def fuse(self, f_i: Tensor, f_q: Tensor) -> Tensor:
        return self.fusion(f_i, f_q)

    def logits(self, images, question_ids) -> Tensor:
        """Per-class logits for a single sample ``(N, F)`` or a batch ``(B, N, F)``."""
        images = T.as_tensor(np.asarray(images, dtype=self.cfg.np_dtype))
        fused = self.fuse(self.image(images), self.question(question_ids))
        if self.cfg.head_kind == "decoder":
            return self.scorer(self.decoder(fused))
        return self.classifier(fused)

    def loss(self, logits: Tensor, answers) -> Tensor:
        targets = one_hot(np.asarray(answers), self.cfg.num_answer_classes, logits.dtype)
        return T.asymmetric_loss_logits(logits.reshape(-1, self.cfg.num_answer_classes),
                                        targets.reshape(-1, self.cfg.num_answer_classes),
                                        self.cfg.gamma_plus, self.cfg.gamma_minus, LOG_CLAMP)


def one_hot(idx: np.ndarray, n: int, dtype=np.float64) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"class index outside [0, {n})")
    out = np.zeros(idx.shape + (n,), dtype=dtype)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


# -------------------------------------------------------- loss / prediction

def asymmetric_loss(p: Tensor, y, gamma_plus: float = 1.0, gamma_minus: float = 4.0) -> Tensor:
    """Asymmetric focal loss on probabilities ``p`` of shape ``(C,)`` or ``(B, C)``.

    Per class: ``-(1-p)^γ+ log p`` for the positive, ``-p^γ- log(1-p)`` for the
    negatives; averaged over classes, then over rows.  Logs are clamped at 1e-12.
    """
    p = T.as_tensor(p)
    if np.isnan(p.data).any() or (p.data < 0).any() or (p.data > 1).any():
        raise ValueError("asymmetric_loss needs probabilities in (0, 1)")
    y = np.asarray(y, dtype=p.dtype)
    if y.shape != p.shape:
        raise ShapeError(f"targets {y.shape} do not match probabilities {p.shape}")
    q = 1.0 - p
    pos = ((q ** gamma_plus) * T.log(p, LOG_CLAMP)) * y if gamma_plus else T.log(p, LOG_CLAMP) * y
    neg = ((p ** gamma_minus) * T.log(q, LOG_CLAMP)) * (1.0 - y) if gamma_minus else T.log(q, LOG_CLAMP) * (1.0 - y)
    per_class = -(pos + neg)
    return per_class.mean(axis=-1).mean()


def select_answer(probs: np.ndarray, candidates=None) -> int:
    """Index of the highest-probability class, lowest index on ties.

    ``candidates`` restricts the choice to a subset of classes.
    """
    probs = np.asarray(probs)
    if candidates is None:
        return int(np.argmax(probs))
    cand = np.asarray(sorted(candidates))
    return int(cand[np.argmax(probs[cand])])


def candidate_mask(closed: np.ndarray, n_classes: int) -> np.ndarray:
    """Boolean ``(B, C)`` mask: yes/no for closed questions, everything else for open ones."""
    closed = np.asarray(closed, dtype=bool)
    mask = np.zeros(closed.shape + (n_classes,), dtype=bool)
    mask[closed, :2] = True
    mask[~closed, 2:] = True
    return mask


def predict_from_logits(logits: np.ndarray, closed=None) -> np.ndarray:
    """Chosen class per row; restricted to the question type's answers when ``closed`` is given."""
    logits = np.asarray(logits)
    if closed is not None:
        logits = np.where(candidate_mask(closed, logits.shape[-1]), logits, -np.inf)
    return np.argmax(logits, axis=-1)


def predict_probs(a_l: Tensor, scorer: AnswerScorer, candidates=None) -> Prediction:
    z = scorer(a_l).data
    p = T.sigmoid(Tensor(z)).data
    return Prediction(p, select_answer(p, candidates), z)


def model_forward(model: VqaModel, image: np.ndarray, question_ids: np.ndarray, answer: int,
                  closed: bool | None = None) -> tuple[Prediction, Tensor]:
    """Single-sample forward: prediction plus loss against ``answer``."""
    z = model.logits(image, question_ids)
    loss = model.loss(z, np.asarray(answer))
    p = T.sigmoid(z.detach()).data
    cands = None
    if closed is not None:
        cands = [0, 1] if closed else list(range(2, model.cfg.num_answer_classes))
    return Prediction(p, select_answer(p, cands), z.data), loss


def batch_logits(model: VqaModel, ds: EncodedDataset, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        out.append(model.logits(ds.images[sl], ds.questions[sl]).data)
    return np.concatenate(out, axis=0)
