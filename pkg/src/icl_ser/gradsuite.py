"""Finite-difference sweep over every differentiable op and a tiny end-to-end model."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .corpus import Emotion, Vocab
from .model import EmotionClassifier, ModelConfig, SpeechLM, assemble_context
from .tensor import Tensor, finite_diff_check

TOLERANCE = 1e-4


def tiny_config(**overrides) -> ModelConfig:
    base = dict(feature_dim=4, model_dim=8, heads=2, ffn_dim=12, speech_layers=1, enc_layers=1,
                dec_layers=1, qformer_layers=1, query_len=2, max_sequences=16, dropout_rate=0.0)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class Case:
    name: str
    make: Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], np.ndarray]]


def _weighted(y: Tensor, w: np.ndarray) -> Tensor:
    # a random linear functional makes every output coordinate matter
    return (y * w).sum()


def _unary(name, fn, sampler=lambda rng, shape: rng.normal(size=shape), shape=(3, 4)) -> Case:
    def make(rng):
        w = rng.normal(size=fn(Tensor(np.ones(shape))).shape)
        return (lambda x: _weighted(fn(x), w)), sampler(rng, shape)
    return Case(name, make)


def _binary_left(name, fn, other_shape, shape=(3, 4), other=lambda rng, s: rng.normal(size=s)) -> Case:
    """Check the gradient w.r.t. the first operand, second operand fixed."""
    def make(rng):
        b = other(rng, other_shape)
        w = rng.normal(size=fn(Tensor(np.ones(shape)), Tensor(b)).shape)
        return (lambda x: _weighted(fn(x, Tensor(b)), w)), rng.normal(size=shape)
    return Case(name, make)


def _binary_right(name, fn, other_shape, shape=(3, 4), sampler=lambda rng, s: rng.normal(size=s)) -> Case:
    def make(rng):
        a = rng.normal(size=other_shape)
        w = rng.normal(size=fn(Tensor(a), Tensor(np.ones(shape))).shape)
        return (lambda x: _weighted(fn(Tensor(a), x), w)), sampler(rng, shape)
    return Case(name, make)


def _away_from_zero(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _positive(rng, shape):
    return rng.uniform(0.3, 3.0, size=shape)


def _ce_case(alpha: float) -> Case:
    def make(rng):
        target = rng.integers(0, 7, size=(3,))
        return (lambda x: T.label_smoothing_ce(x, target, alpha)), rng.normal(size=(3, 7))
    return Case(f"label_smoothing_ce(alpha={alpha})", make)


def _layer_norm_cases() -> list[Case]:
    def on_x(rng):
        g, b = rng.normal(size=5), rng.normal(size=5)
        w = rng.normal(size=(3, 5))
        return (lambda x: _weighted(T.layer_norm(x, g, b), w)), rng.normal(size=(3, 5))

    def on_gain(rng):
        xv, b = rng.normal(size=(3, 5)), rng.normal(size=5)
        w = rng.normal(size=(3, 5))
        return (lambda g: _weighted(T.layer_norm(xv, g, b), w)), rng.normal(size=5)

    def on_bias(rng):
        xv, g = rng.normal(size=(3, 5)), rng.normal(size=5)
        w = rng.normal(size=(3, 5))
        return (lambda b: _weighted(T.layer_norm(xv, g, b), w)), rng.normal(size=5)

    return [Case("layer_norm(x)", on_x), Case("layer_norm(gain)", on_gain), Case("layer_norm(bias)", on_bias)]


def _dropout_case() -> Case:
    def make(rng):
        seed = int(rng.integers(1 << 30))
        w = rng.normal(size=(4, 5))
        f = lambda x: _weighted(T.dropout(x, 0.3, np.random.default_rng(seed)), w)  # noqa: E731
        return f, rng.normal(size=(4, 5))
    return Case("dropout", make)


def _gather_case() -> Case:
    def make(rng):
        idx = rng.integers(0, 5, size=(3, 4))
        w = rng.normal(size=(3, 4, 2))
        return (lambda x: _weighted(x[idx], w)), rng.normal(size=(5, 2))
    return Case("getitem(gather)", make)


def op_cases() -> list[Case]:
    cases = [
        _binary_left("add", T.add, (4,)),
        _binary_right("add(broadcast)", T.add, (3, 4), shape=(4,)),
        _binary_left("sub", T.sub, (3, 1)),
        _binary_right("sub(rhs)", T.sub, (3, 4), shape=(3, 1)),
        _binary_left("mul", T.mul, (3, 4)),
        _binary_right("mul(broadcast)", T.mul, (2, 3, 4), shape=(3, 4)),
        _binary_left("div", T.div, (3, 4), other=_away_from_zero),
        _binary_right("div(denominator)", T.div, (3, 4), sampler=_away_from_zero),
        _unary("neg", T.neg),
        _unary("power", lambda x: T.power(x, 3.0)),
        _unary("exp", T.exp),
        _unary("log", T.log, _positive),
        _unary("tanh", T.tanh),
        _unary("relu", T.relu, _away_from_zero),
        _binary_left("matmul(a)", T.matmul, (4, 3), shape=(5, 4)),
        _binary_right("matmul(b)", T.matmul, (5, 4), shape=(4, 3)),
        _binary_left("matmul(batched)", T.matmul, (4, 3), shape=(2, 5, 4)),
        _unary("sum", lambda x: T.sum(x, axis=1)),
        _unary("mean", lambda x: T.mean(x, axis=0, keepdims=True)),
        _unary("max", lambda x: T.max(x, axis=1)),
        _unary("reshape", lambda x: x.reshape(4, 3)),
        _unary("transpose", lambda x: x.transpose(1, 0)),
        _unary("swapaxes", lambda x: T.swapaxes(x, 0, 1)),
        _unary("getitem(slice)", lambda x: x[1:, ::2]),
        _gather_case(),
        _unary("concat", lambda x: T.concat([x, x * 2.0, x[:1]], axis=0)),
        _unary("pad_axis", lambda x: T.pad_axis(x, 1, 2, 1)),
        _unary("softmax", lambda x: T.softmax(x, axis=-1)),
        _unary("log_softmax", lambda x: T.log_softmax(x, axis=-1)),
        _ce_case(0.0),
        _ce_case(0.1),
        _dropout_case(),
    ]
    return cases + _layer_norm_cases()


def _model_cases() -> list[Case]:
    cfg = tiny_config()
    vocab = Vocab(cfg.vocab)
    instruction = vocab.tokenize("Please select the emotion:")

    def end_to_end(rng):
        # perturbing the first speech-encoder weight exercises every stage of the chain
        model = SpeechLM(tiny_config(init_seed=int(rng.integers(1 << 30))))
        model.fit_speech_normalizer([rng.normal(size=(12, cfg.feature_dim)) for _ in range(8)])
        enroll = rng.normal(size=(6, cfg.feature_dim))
        target = rng.normal(size=(7, cfg.feature_dim))
        ctx = assemble_context(instruction, [(enroll, vocab.label_tokens(Emotion.JOY))], target)
        label = vocab.label_tokens(Emotion.SURPRISE)

        def f(w: Tensor) -> Tensor:
            model.speech_encoder.conv1.weight = w
            return model.label_loss([ctx], [label], alpha=0.1)

        return f, model.speech_encoder.conv1.weight.data.copy()

    def classifier(rng):
        model = EmotionClassifier(tiny_config(init_seed=int(rng.integers(1 << 30))))
        frames = [rng.normal(size=(n, cfg.feature_dim)) for n in (5, 9)]
        target = rng.integers(0, 7, size=2)

        def f(w: Tensor) -> Tensor:
            model.speech_encoder.conv1.weight = w
            return T.label_smoothing_ce(model.logits(frames), target, 0.1)

        return f, model.speech_encoder.conv1.weight.data.copy()

    def query_grad(rng):
        model = SpeechLM(tiny_config(init_seed=int(rng.integers(1 << 30))))
        h = rng.normal(size=(5, cfg.model_dim))
        w = rng.normal(size=(cfg.query_len, cfg.model_dim))

        def f(q: Tensor) -> Tensor:
            model.qformer.query = q
            return _weighted(model.qformer_convert(h), w)

        return f, model.qformer.query.data.copy()

    return [Case("end_to_end(speech lm)", end_to_end),
            Case("end_to_end(classifier)", classifier),
            Case("qformer(query)", query_grad)]


def run_suite(n_points: int = 50, seed: int = 0, h: float = 1e-5,
              include_model: bool = True) -> dict[str, float]:
    """Worst relative error per case over ``n_points`` random points."""
    rng = np.random.default_rng(seed)
    cases = op_cases() + (_model_cases() if include_model else [])
    worst: dict[str, float] = {}
    for case in cases:
        err = 0.0
        for _ in range(n_points):
            f, x = case.make(rng)
            err = max(err, finite_diff_check(f, x, h))
        worst[case.name] = err
    return worst


def main(n_points: int = 50, seed: int = 0) -> bool:
    t0 = time.perf_counter()
    worst = run_suite(n_points, seed)
    ok = True
    for name, err in worst.items():
        status = "PASS" if err <= TOLERANCE else "FAIL"
        ok &= err <= TOLERANCE
        print(f"{status} {name}: max rel err {err:.3e}")
    print(f"{len(worst)} cases, {n_points} points each, {time.perf_counter() - t0:.1f}s")
    return ok
