"""Central finite-difference checks for every registered op and the full model."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .decoder import Mode, SblDecoderConfig, bidirectional_loss, shift_right
from .encoder import EncoderConfig, pad_features
from .lexicon import PhonemeInventory, LexiconEntry, encode
from .numerics import Tensor

TOLERANCE = 1e-4
EPS = 1e-5
FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    seconds: float = 0.0
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error < TOLERANCE


@dataclass
class GradReport:
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)

    @property
    def failures(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def names(self) -> set[str]:
        return {r.name for r in self.results}

    def format(self) -> str:
        lines = [f"{'check':<28} {'max rel err':>12} {'coords':>7}  status"]
        for r in self.results:
            status = "ok" if r.passed else "FAIL"
            note = f"  ({r.note})" if r.note else ""
            lines.append(f"{r.name:<28} {r.max_rel_error:>12.3e} {r.n_checked:>7}  {status}{note}")
        lines.append(f"total {self.seconds:.1f}s, tolerance {TOLERANCE:g}: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    inputs: dict[str, Tensor],
    rng: np.random.Generator | None = None,
    coords_per_input: int | None = None,
    eps: float = EPS,
) -> tuple[float, int, str]:
    """Compare backprop gradients of ``loss_fn()`` with central differences.

    ``coords_per_input=None`` checks every coordinate; otherwise that many are
    sampled per input. Returns ``(max relative error, coords checked, worst)``.
    """
    for t in inputs.values():
        t.requires_grad = True
        t.grad = None
    loss = loss_fn()
    nx.backward(loss, list(inputs.values()))
    analytic = {k: t.grad.copy() for k, t in inputs.items()}
    worst, count, where = 0.0, 0, ""
    with nx.no_grad():
        for name, t in inputs.items():
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if coords_per_input is not None and flat.size > coords_per_input:
                idx = rng.choice(flat.size, size=coords_per_input, replace=False)
            for i in idx:
                keep = flat[i]
                flat[i] = keep + eps
                up = loss_fn().item()
                flat[i] = keep - eps
                down = loss_fn().item()
                flat[i] = keep
                err = relative_error(analytic[name].reshape(-1)[i], (up - down) / (2 * eps))
                count += 1
                if err > worst:
                    worst, where = err, f"{name}[{int(i)}]"
    return worst, count, where


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _weighted(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    w = rng.normal(size=out.shape)
    return lambda y: nx.sum_(nx.mul(y, w))


def _case(rng, build):
    """Wrap ``build(inputs) -> Tensor`` into a scalar loss with fixed random weights."""
    def make(inputs):
        with nx.no_grad():
            probe = build(inputs)
        reduce = _weighted(probe, rng)
        return lambda: reduce(build(inputs))
    return make


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict[str, Tensor]]]:
    """One small instance per registered op, keyed by op name."""
    t = lambda *shape: Tensor(rng.normal(size=shape))  # noqa: E731
    cases: dict[str, tuple[Callable, dict[str, Tensor]]] = {}

    def add(name, inputs, build):
        cases[name] = (_case(rng, build)(inputs), inputs)

    add("add", {"a": t(3, 4), "b": t(4)}, lambda i: nx.add(i["a"], i["b"]))
    add("sub", {"a": t(2, 3, 4), "b": t(3, 1)}, lambda i: nx.sub(i["a"], i["b"]))
    add("mul", {"a": t(3, 4), "b": t(1, 4)}, lambda i: nx.mul(i["a"], i["b"]))
    add("scale", {"a": t(5)}, lambda i: nx.scale(i["a"], -1.7))
    add("relu", {"a": Tensor(_away_from_zero(rng, (4, 5)))}, lambda i: nx.relu(i["a"]))
    add("matmul", {"a": t(2, 3, 4), "b": t(4, 5)}, lambda i: nx.matmul(i["a"], i["b"]))
    cases["matmul.batched"] = (
        _case(rng, lambda i: nx.matmul(i["a"], i["b"]))(m := {"a": t(2, 3, 3, 4), "b": t(2, 3, 4, 2)}), m
    )
    add("reshape", {"a": t(2, 6)}, lambda i: nx.reshape(i["a"], (3, 4)))
    add("transpose", {"a": t(2, 3, 4)}, lambda i: nx.transpose(i["a"], (2, 0, 1)))
    add("sum", {"a": t(3, 4)}, lambda i: nx.sum_(i["a"], axis=1, keepdims=True))
    add("mean", {"a": t(3, 4)}, lambda i: nx.mean(i["a"], axis=0))
    rows = np.array([0, 2, 2, 1])
    add("take", {"a": t(3, 4)}, lambda i: nx.take(i["a"], rows))
    lengths = np.array([3, 1, 4])
    add("reverse_time", {"a": t(3, 4, 2)}, lambda i: nx.reverse_time(i["a"], lengths))
    cases["reverse_time.full"] = (_case(rng, lambda i: nx.reverse_time(i["a"]))(m := {"a": t(2, 3, 2)}), m)
    add("softmax", {"a": t(3, 5)}, lambda i: nx.softmax(i["a"]))
    add("log_softmax", {"a": t(3, 5)}, lambda i: nx.log_softmax(i["a"]))
    add("layer_norm", {"x": t(3, 6), "g": t(6), "b": t(6)}, lambda i: nx.layer_norm(i["x"], i["g"], i["b"]))
    keep = rng.random((3, 5)) < 0.6
    keep[:, 0] = True
    add("masked_fill", {"a": t(3, 5)}, lambda i: nx.masked_fill(i["a"], keep, -3.0))
    cases["masked_fill.softmax"] = (
        _case(rng, lambda i: nx.softmax(nx.masked_fill(i["a"], keep)))(m := {"a": t(3, 5)}), m
    )
    targets = rng.integers(0, 6, size=(2, 4))
    mask = rng.random((2, 4)) < 0.7
    mask[0, 0] = True
    cases["cross_entropy"] = ((lambda m: lambda: nx.cross_entropy(m["z"], targets, mask))(m := {"z": t(2, 4, 6)}), m)
    return cases


def _toy_batch(rng, inventory: PhonemeInventory, feature_dim: int, max_len: int):
    frames = [rng.normal(size=(n, feature_dim)) for n in (5, 7)]
    feats, frame_mask = pad_features(frames)
    words = [("A", ("p", "q", "p")), ("B", ("q", "r"))]
    targets = [encode(LexiconEntry(f"w{k}", lang, ph), inventory, False, max_len) for k, (lang, ph) in enumerate(words)]
    tgt_l2r = np.array([s.l2r for s in targets])
    tgt_r2l = np.array([s.r2l for s in targets])
    return feats, frame_mask, tgt_l2r, tgt_r2l


def model_case(seed: int = 0, mode: Mode = Mode.SBL_ALL, d_model: int = 64):
    """Loss closure over an N=2 / h=4 encoder feeding a 2-block decoder, dropout off."""
    from .training import SblModel

    inventory = PhonemeInventory.from_symbols({"A": ["p", "q"], "B": ["q", "r"]})
    heads, d_head = 4, d_model // 4
    enc = EncoderConfig(n_blocks=2, n_heads=heads, d_model=d_model, d_k=d_head, d_v=d_head, d_ff=2 * d_model,
                        dropout=0.0, feature_dim=8)
    dec = SblDecoderConfig(n_blocks=2, n_heads=heads, d_model=d_model, d_k=d_head, d_v=d_head, d_ff=2 * d_model,
                           dropout=0.0, mode=mode)
    model = SblModel(enc, dec, inventory, max_len=5, seed=seed)
    model.eval()
    feats, frame_mask, tgt_l2r, tgt_r2l = _toy_batch(np.random.default_rng(seed), inventory, 8, 5)

    def loss():
        memory = model.encoder(feats, frame_mask)
        logits = model.decoder.forward(shift_right(tgt_l2r), shift_right(tgt_r2l), memory)
        return bidirectional_loss(*logits, tgt_l2r, tgt_r2l)

    return loss, model.named_parameters()


def run_suite(seed: int = 0, include_model: bool = True, coords_per_param: int = 4) -> GradReport:
    """Every registered op (all coordinates) plus the end-to-end model (sampled coordinates)."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    report = GradReport()
    cases = op_cases(rng)
    for name, (fn, inputs) in cases.items():
        t0 = time.perf_counter()
        worst, n, where = check_gradients(fn, inputs)
        report.results.append(CheckResult(name, worst, n, time.perf_counter() - t0, where))
    covered = {name.split(".")[0] for name in cases}
    for missing in sorted(set(nx.OPS) - covered):
        report.results.append(CheckResult(missing, float("inf"), 0, note="no gradient case registered"))
    if include_model:
        for mode in (Mode.SBL_ALL, Mode.SBL_FIRST, Mode.SEPARATE_BIDIR):
            t0 = time.perf_counter()
            loss, params = model_case(seed, mode)
            worst, n, where = check_gradients(loss, params, rng, coords_per_param)
            report.results.append(CheckResult(f"model[{mode.value}]", worst, n, time.perf_counter() - t0, where))
    report.seconds = time.perf_counter() - start
    return report
