"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    worst_input: int
    worst_index: tuple[int, ...]
    n_coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"{status} {self.name}: max rel err {self.max_rel_error:.2e} over {self.n_coords} coords (tol {self.tol:g})"
        if not self.passed:
            msg += f"; worst at input {self.worst_input} index {self.worst_index}"
        return msg


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-4, name: str = "f", max_coords: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*xs)`` with central differences.

    The relative error of a coordinate is ``|g - n| / max(|g|, |n|, floor)``
    where ``floor`` is 1e-3 of the largest numeric gradient magnitude (and at
    least 1e-8); coordinates far below the gradient's own scale cannot be
    resolved by finite differences.  ``max_coords`` samples a random subset
    of coordinates per input.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    out = f(*xs)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, {name} returned shape {out.shape}")
    out.backward()
    analytic = [t.grad.copy() for t in xs]

    rng = np.random.default_rng(seed)
    numeric_all: list[tuple[int, tuple[int, ...], float, float]] = []
    for k, t in enumerate(xs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*xs).item()
            flat[i] = orig - h
            fm = f(*xs).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            idx = np.unravel_index(i, t.shape)
            numeric_all.append((k, tuple(int(v) for v in idx), float(analytic[k][idx]), num))

    if not numeric_all:
        return GradCheckReport(name, 0.0, -1, (), 0, tol)
    scale = max(abs(n) for *_, n in numeric_all)
    floor = max(1e-8, 1e-3 * scale)
    worst = (0.0, -1, ())
    for k, idx, a, n in numeric_all:
        err = abs(a - n) / max(abs(a), abs(n), floor)
        if err > worst[0]:
            worst = (err, k, idx)
    return GradCheckReport(name, worst[0], worst[1], worst[2], len(numeric_all), tol)


# ---------------------------------------------------------------- suite

def _tiny_model_config(**kw):
    from .model import ModelConfig

    base = dict(feature_dim=4, num_image_tokens=3, cell_features=7, max_question_tokens=2, question_vocab_size=6,
                num_answer_classes=3, answer_embed_dim=4, fusion_layers=1, decoder_layers=1, num_heads=2,
                ffn_mult=2, activation="gelu", seed=3)
    base.update(kw)
    return ModelConfig(**base)


def run_suite(h: float = 1e-5, tol: float = 1e-4, seed: int = 0) -> list[GradCheckReport]:
    """Gradient checks for every differentiable block and the full model at tiny dims."""
    from . import tensor as T
    from .model import VqaModel, asymmetric_loss
    from .nn import AttentionConfig, DecoderLayer, EncoderLayer, MultiHeadAttention

    rng = np.random.default_rng(seed)

    def rand(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    def weighted(out: Tensor, w: np.ndarray) -> Tensor:
        # generic scalar read-out with non-uniform weights
        return (out * Tensor(w)).sum()

    reports = []

    a, b = rand(3, 4), rand(4, 2)
    w = rng.standard_normal((3, 2))
    reports.append(grad_check(lambda a, b: weighted(T.matmul(a, b), w), [a, b], h, tol, "matmul"))

    x = rand(3, 5)
    w = rng.standard_normal((3, 5))
    reports.append(grad_check(lambda x: weighted(T.softmax_rows(x), w), x, h, tol, "softmax_rows"))

    x, g, bb = rand(3, 5), rand(5), rand(5)
    reports.append(grad_check(lambda x, g, bb: weighted(T.layer_norm(x, g, bb), w), [x, g, bb], h, tol, "layer_norm"))

    for kind in ("sigmoid", "gelu", "relu"):
        data = rng.standard_normal((3, 5))
        if kind == "relu":
            data = np.where(np.abs(data) < 0.1, 0.5, data)  # stay off the kink
        x = Tensor(data, requires_grad=True)
        reports.append(grad_check(lambda x, kind=kind: weighted(T.activation(x, kind), w), x, h, tol,
                                  f"activation[{kind}]"))

    x, y = rand(2, 4), rand(3, 4)
    w54 = rng.standard_normal((5, 4))
    reports.append(grad_check(lambda x, y: weighted(T.concat_rows(x, y), w54), [x, y], h, tol, "concat_rows"))

    mha = MultiHeadAttention(AttentionConfig(4, 2), "mha", rng)
    q, kv = rand(3, 4), rand(5, 4)
    w3 = rng.standard_normal((3, 4))
    reports.append(grad_check(lambda q, kv, *_: weighted(mha(q, kv, kv), w3), [q, kv] + mha.parameters(),
                              h, tol, "multi_head_attention"))

    enc = EncoderLayer(4, 2, 2, "enc", rng, activation="gelu")
    x = rand(3, 4)
    reports.append(grad_check(lambda x, *_: weighted(enc(x), w3), [x] + enc.parameters(), h, tol, "encoder_layer"))

    dec = DecoderLayer(4, 2, 2, "dec", rng, activation="gelu")
    a_, mem = rand(3, 4), rand(5, 4)
    reports.append(grad_check(lambda a_, mem, *_: weighted(dec(a_, mem), w3), [a_, mem] + dec.parameters(),
                              h, tol, "decoder_layer"))

    model = VqaModel(_tiny_model_config())
    f_i, f_q = rand(3, 4), rand(2, 4)
    w5 = rng.standard_normal((5, 4))
    reports.append(grad_check(lambda f_i, f_q, *_: weighted(model.fuse(f_i, f_q), w5),
                              [f_i, f_q] + model.fusion.parameters(), h, tol, "cman_fusion"))

    p = Tensor(rng.uniform(0.05, 0.95, size=(2, 4)), requires_grad=True)
    y = np.zeros((2, 4))
    y[0, 1] = y[1, 3] = 1.0
    reports.append(grad_check(lambda p: asymmetric_loss(p, y, 1.0, 4.0), p, h, tol, "asymmetric_loss"))
    z = rand(2, 4)
    reports.append(grad_check(lambda z: T.asymmetric_loss_logits(z, y, 1.0, 4.0), z, h, tol,
                              "asymmetric_loss_logits"))

    for cfg_kw, label in (({}, "full_model[cman+decoder]"),
                          ({"answer_embed_dim": 6}, "full_model[cman+decoder, D_a != D_f]"),
                          ({"fusion_kind": "sum", "head_kind": "linear"}, "full_model[sum+linear]"),
                          ({"fusion_kind": "mul"}, "full_model[mul+decoder]")):
        model = VqaModel(_tiny_model_config(**cfg_kw))
        images = rng.integers(0, 2, size=(2, 3, 7)).astype(float)
        qids = rng.integers(0, 6, size=(2, 2))
        ans = np.array([0, 2])
        reports.append(grad_check(lambda *_, model=model, images=images, qids=qids, ans=ans:
                                  model.loss(model.logits(images, qids), ans),
                                  model.parameters(), h, tol, label))
    return reports

