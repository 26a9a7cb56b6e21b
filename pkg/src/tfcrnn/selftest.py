"""Built-in verification: gradient checks, ablation equivalence, segmentation and loss identities."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import audio
from .model import ModelConfig, TFCRNN
from .nn import ops
from .nn.gradcheck import GradCheckResult, grad_check
from .nn.tensor import Tensor, no_grad
from .trainer import TrainConfig, accuracy, epoch_rngs, loss_many_to_many, loss_many_to_one, train_epoch

LAYER_TOL = 1e-4
LINEAR_TOL = 1e-6
END_TO_END_TOL = 1e-3
MAX_REDRAWS = 50
STEP = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


# A case builds, from a generator, the scalar function to check and its inputs.
Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _probe(rng, out_shape):
    weights = Tensor(rng.normal(size=out_shape))
    return lambda y: (y * weights).sum()


def case_linear(rng):
    x = Tensor(rng.normal(size=(4, 5)), name="x")
    w = Tensor(rng.normal(size=(3, 5)), name="w")
    b = Tensor(rng.normal(size=3), name="b")
    loss = _probe(rng, (4, 3))
    return lambda: loss(ops.linear(x, w, b)), [x, w, b]


def _case_conv(stride):
    def case(rng):
        x = Tensor(rng.normal(size=(2, 3, 20)), name="x")
        w = Tensor(rng.normal(size=(4, 3, 3)), name="w")
        b = Tensor(rng.normal(size=4), name="b")
        loss = _probe(rng, (2, 4, -(-20 // stride)))
        return lambda: loss(ops.conv1d(x, w, b, stride=stride)), [x, w, b]
    return case


def case_maxpool(rng):
    x = Tensor(rng.normal(size=(2, 3, 14)), name="x")
    loss = _probe(rng, (2, 3, 4))
    return lambda: loss(ops.maxpool1d(x)), [x]


def case_global_max(rng):
    x = Tensor(rng.normal(size=(2, 3, 7)), name="x")
    loss = _probe(rng, (2, 3))
    return lambda: loss(ops.global_maxpool(x)), [x]


def case_batchnorm(rng):
    x = Tensor(rng.normal(size=(3, 4, 6)) * 2 + 1, name="x")
    g = Tensor(1 + 0.2 * rng.normal(size=4), name="gamma")
    b = Tensor(rng.normal(size=4), name="beta")
    state = ops.BatchNormState.fresh(4, np.float64)
    loss = _probe(rng, (3, 4, 6))
    return lambda: loss(ops.batchnorm1d(x, g, b, state, True)), [x, g, b]


def _case_unary(op_name):
    def case(rng):
        x = Tensor(rng.normal(size=(3, 5)) * 2, name="x")
        loss = _probe(rng, (3, 5))
        return lambda: loss(getattr(ops, op_name)(x)), [x]
    return case


def case_channel_scale(rng):
    x = Tensor(rng.normal(size=(2, 3, 5)), name="x")
    s = Tensor(rng.uniform(0.05, 0.95, size=(2, 3)), name="scale")
    loss = _probe(rng, (2, 3, 5))
    return lambda: loss(ops.channel_scale(x, s)), [x, s]


def case_dropout(rng):
    x = Tensor(rng.normal(size=(4, 6)), name="x")
    seed = int(rng.integers(1 << 31))
    loss = _probe(rng, (4, 6))
    return lambda: loss(ops.dropout(x, 0.5, np.random.default_rng(seed), True)), [x]


def case_cross_entropy(rng):
    logits = Tensor(rng.normal(size=(4, 7)) * 2, name="logits")
    labels = rng.integers(0, 7, size=4)
    return lambda: ops.cross_entropy(logits, labels), [logits]


def case_gru_unrolled(rng):
    d, h = 4, 5
    bound = 1 / math.sqrt(h)
    params = ops.GRUParams(Tensor(rng.uniform(-bound, bound, (3 * h, d)) * 3, name="w_input"),
                           Tensor(rng.uniform(-bound, bound, (3 * h, h)) * 3, name="w_hidden"),
                           Tensor(rng.uniform(-bound, bound, 3 * h), name="bias"))
    xs = [Tensor(rng.normal(size=(2, d)), name=f"x{t}") for t in range(3)]
    h0 = Tensor(rng.normal(size=(2, h)) * 0.5, name="h0")
    loss = _probe(rng, (2, h))

    def fn():
        state = h0
        for x in xs:
            state = ops.gru_cell(x, state, params)
        return loss(state)

    return fn, [params.w_input, params.w_hidden, params.bias, h0, *xs]


def case_conv_block(rng):
    x = Tensor(rng.normal(size=(2, 3, 30)) * 3, name="x")
    w = Tensor(rng.normal(size=(4, 3, 3)), name="w")
    b = Tensor(rng.normal(size=4), name="b")
    g = Tensor(1 + 0.1 * rng.normal(size=4), name="gamma")
    beta = Tensor(rng.normal(size=4), name="beta")
    s = Tensor(rng.uniform(0.1, 0.9, size=(2, 4)), name="scale")
    state = ops.BatchNormState.fresh(4, np.float64)
    seed = int(rng.integers(1 << 31))
    loss = _probe(rng, (2, 4, 10))

    def fn():
        y = ops.relu(ops.conv1d(x, w, b, stride=1))
        y = ops.batchnorm1d(y, g, beta, state, True)
        y = ops.channel_scale(y, s)
        y = ops.dropout(y, 0.5, np.random.default_rng(seed), True)
        return loss(ops.maxpool1d(y))

    return fn, [x, w, b, g, beta, s]


LAYER_CASES: dict[str, tuple[Case, float]] = {
    "linear": (case_linear, LINEAR_TOL),
    "conv1d_stride1": (_case_conv(1), LAYER_TOL),
    "conv1d_stride3": (_case_conv(3), LAYER_TOL),
    "maxpool1d": (case_maxpool, LAYER_TOL),
    "global_maxpool": (case_global_max, LAYER_TOL),
    "batchnorm1d": (case_batchnorm, LAYER_TOL),
    "relu": (_case_unary("relu"), LAYER_TOL),
    "sigmoid": (_case_unary("sigmoid"), LAYER_TOL),
    "tanh": (_case_unary("tanh"), LAYER_TOL),
    "channel_scale": (case_channel_scale, LAYER_TOL),
    "dropout": (case_dropout, LAYER_TOL),
    "cross_entropy": (case_cross_entropy, LAYER_TOL),
    "gru_cell_3_steps": (case_gru_unrolled, LAYER_TOL),
    "conv_block": (case_conv_block, LAYER_TOL),
}


def tiny_config(**overrides) -> ModelConfig:
    """2 blocks, hidden size 8, 3 time steps (20-sample hop, 80-sample clips)."""
    base = dict(step_ms=1.25, clip_samples=80, filters_per_block=[4, 6], hidden_dim=8,
                num_classes=5, dropout_rate=0.5, io_mode="many_to_many")
    base.update(overrides)
    return ModelConfig(**base)


def case_end_to_end(rng):
    config = tiny_config()
    model = TFCRNN(config, seed=int(rng.integers(1 << 31)), dtype=np.float64).train()
    for name, p in model.params.items():
        if name.endswith("bias") or name.endswith("beta"):
            p.data[...] = rng.normal(size=p.shape) * 0.3
    clips = rng.normal(size=(3, config.clip_samples)) * 0.5
    labels = rng.integers(0, config.num_classes, size=3)
    frames = model.frames_for(clips)
    seed = int(rng.integers(1 << 31))

    def fn():
        out = model.forward_sequence(frames, rng=np.random.default_rng(seed))
        return loss_many_to_many(out.logits, labels)

    return fn, model.parameters()


def run_case(case: Case, seed: int, fraction: float = 1.0, h: float = STEP) -> tuple[GradCheckResult, int]:
    """Check one seed, redrawing the test point while a probe straddles a kink.

    Returns the accepted result and the number of redraws needed.
    """
    result = None
    for attempt in range(MAX_REDRAWS):
        rng = np.random.default_rng([seed, attempt])
        fn, tensors = case(rng)
        result = grad_check(fn, tensors, h=h, fraction=fraction, rng=rng)
        if result.kink_crossings == 0:
            return result, attempt
    return result, MAX_REDRAWS


def gradient_suite(seeds: int = 20, cases: dict | None = None, h: float = STEP) -> list[CheckResult]:
    """Per-layer checks. At the default step, components whose true gradient
    is near 1e-5 can exceed the tolerance on truncation error alone; a
    smaller ``h`` separates that from a wrong derivative."""
    results = []
    for name, (case, tol) in (cases or LAYER_CASES).items():
        start = time.perf_counter()
        worst, redraws, smooth = 0.0, 0, True
        for seed in range(seeds):
            res, tries = run_case(case, seed, h=h)
            worst = max(worst, res.max_rel_error)
            redraws += tries
            smooth &= res.kink_crossings == 0
        passed = smooth and worst < tol
        results.append(CheckResult(f"grad:{name}", passed,
                                   f"max rel err {worst:.2e} < {tol:g} over {seeds} seeds "
                                   f"({redraws} kink redraws)", time.perf_counter() - start))
    return results


def end_to_end_gradient(seeds: int = 20, h: float = STEP) -> CheckResult:
    start = time.perf_counter()
    worst, redraws, smooth = 0.0, 0, True
    for seed in range(seeds):
        res, tries = run_case(case_end_to_end, seed, fraction=0.01, h=h)
        worst = max(worst, res.max_rel_error)
        redraws += tries
        smooth &= res.kink_crossings == 0
    return CheckResult("grad:end_to_end_tiny_model", smooth and worst < END_TO_END_TOL,
                       f"max rel err {worst:.2e} < {END_TO_END_TOL:g} over {seeds} seeds, 1% of parameters "
                       f"({redraws} kink redraws)", time.perf_counter() - start)


def ablation_equivalence(n_inputs: int = 100, seed: int = 0, tol: float = 1e-6) -> CheckResult:
    """Feedback model with excitations forced to 1 vs. the same weights without feedback."""
    start = time.perf_counter()
    config = ModelConfig(step_ms=50, filters_per_block=[8, 8, 16, 16, 32], hidden_dim=16, num_classes=35)
    model = TFCRNN(config, seed=seed)
    ablation = model.without_feedback()
    rng = np.random.default_rng(seed)
    clips = (rng.normal(size=(n_inputs, config.clip_samples)) * 0.1).astype(np.float32)
    with no_grad():
        model.train().forward_sequence(model.frames_for(clips[:23]), rng=np.random.default_rng(1))
    model.eval()
    ablation.eval()
    ones = lambda t, n: [Tensor(np.ones((n, c), np.float32)) for c in config.filters_per_block]  # noqa: E731
    worst = 0.0
    with no_grad():
        for i in range(0, n_inputs, 25):
            frames = model.frames_for(clips[i:i + 25])
            forced = model.forward_sequence(frames, excitations_override=ones)
            plain = ablation.forward_sequence(frames)
            for a, b in zip(forced.logits, plain.logits):
                worst = max(worst, float(np.max(np.abs(a.data - b.data))))
    return CheckResult("ablation_equivalence", worst <= tol,
                       f"max |logit diff| {worst:.2e} <= {tol:g} on {n_inputs} inputs",
                       time.perf_counter() - start)


def segmentation_properties(n_clips: int = 1000, seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    reference = audio.segment(audio.AudioClip(np.zeros(16000, np.float32)), 800)
    ok = reference.frames.shape == (19, 1600)
    failures = 0 if ok else 1
    for _ in range(n_clips):
        length = int(rng.integers(2, 4000))
        step = int(rng.integers(1, length // 2 + 1))
        clip = audio.AudioClip(rng.uniform(-1, 1, length).astype(np.float32))
        seq = audio.segment(clip, step)
        t = seq.num_steps
        if t != (length - 2 * step) // step + 1 or seq.window != 2 * step:
            failures += 1
            continue
        if t > 1 and not np.array_equal(seq.frames[:-1, step:], seq.frames[1:, :step]):
            failures += 1
    return CheckResult("segmentation", failures == 0,
                       f"19 frames at 50 ms: {ok}; overlap/count failures {failures} of {n_clips}",
                       time.perf_counter() - start)


def loss_identities(seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    logits = [Tensor(rng.normal(size=(4, 35)))]
    labels = rng.integers(0, 35, size=4)
    same = loss_many_to_many(logits, labels).item() == loss_many_to_one(logits, labels).item()
    uniform = [Tensor(np.zeros((1, 35))) for _ in range(5)]
    m2m = loss_many_to_many(uniform, [3]).item()
    m2o = loss_many_to_one(uniform, [3]).item()
    close = abs(m2m - math.log(35)) < 1e-4 and abs(m2o - math.log(35)) < 1e-4
    return CheckResult("loss_identities", same and close,
                       f"T=1 many-to-many == many-to-one: {same}; uniform loss {m2m:.6f} vs ln 35 "
                       f"{math.log(35):.6f}", time.perf_counter() - start)


OVERFIT_FILTERS = (16, 16, 32, 32, 64)


def overfit_sanity(max_epochs: int = 200, time_limit: float = 600.0, target: float = 0.95,
                   seed: int = 0, data_seed: int = 1, on_epoch: Callable | None = None) -> CheckResult:
    """Memorize 2 synthetic keywords x 20 clips at 50 ms, many-to-many, feedback on.

    Uses the training recipe (Nesterov SGD, batch 23, dropout 0.5) at a
    constant lr0: the plateau schedule would be driven by the same 40 clips
    and decays before learning starts. Accuracy is measured in eval mode
    after every epoch; the run ends at the first epoch reaching ``target``.
    """
    from .nn import SGDNesterov
    from .synthetic import make_clips

    start = time.perf_counter()
    labels = np.repeat([0, 1], 20)
    data = audio.ArrayClipSet(make_clips(labels, seed=data_seed), labels)
    config = ModelConfig(step_ms=50, filters_per_block=list(OVERFIT_FILTERS), hidden_dim=32, num_classes=2,
                         feedback_enabled=True, io_mode="many_to_many")
    train_config = TrainConfig(seed=seed, io_mode="many_to_many")
    model = TFCRNN(config, seed=seed)
    optimizer = SGDNesterov(model.named_parameters(), lr=train_config.lr0, momentum=train_config.momentum)
    acc, epoch = 0.0, 0
    for epoch in range(1, max_epochs + 1):
        loss = train_epoch(model, data, train_config, optimizer, *epoch_rngs(seed, epoch))
        acc = accuracy(model, data)
        if on_epoch is not None:
            on_epoch(epoch, loss, acc)
        if acc >= target or time.perf_counter() - start > time_limit:
            break
    seconds = time.perf_counter() - start
    return CheckResult("overfit_sanity", acc >= target and seconds <= time_limit,
                       f"train accuracy {acc:.3f} (target {target}) after {epoch} epochs",
                       seconds)


def run_all(seeds: int = 20, overfit: bool = False) -> list[CheckResult]:
    results = gradient_suite(seeds)
    results.append(end_to_end_gradient(seeds))
    results.append(ablation_equivalence())
    results.append(segmentation_properties())
    results.append(loss_identities())
    if overfit:
        results.append(overfit_sanity())
    return results
