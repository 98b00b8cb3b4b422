"""Training loop, ablation variants, checkpoints, and evaluation reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import RunConfig, parse_config_text
from .decoder import (
    BidiPrediction,
    Mode,
    SblDecoder,
    SblDecoderConfig,
    bidirectional_loss,
    combine_bidirectional,
    combine_with_flag,
    combined_flag,
    greedy_synchronous_decode,
    mixed_contexts,
    shift_right,
)
from .encoder import Encoder, EncoderConfig, pad_features
from .errors import ConfigError, DataError, NumericError, SblError
from .lexicon import LexiconEntry, PhonemeInventory, TargetSequence, corpus_per, encode, strip, word_accuracy
from .nn import Module, RngStream
from .seeding import stream
from .synth import DatasetManifest

log = logging.getLogger(__name__)

MODES = ("L2R", "R2L", "C-Bi")
METRIC_COLUMNS = ("step", "variant", "language", "mode", "per", "acc", "flag_acc", "loss")


@dataclass(frozen=True)
class VariantSpec:
    name: str
    joint: bool
    mode: Mode
    flag: bool


VARIANTS: dict[str, VariantSpec] = {
    v.name: v
    for v in (
        VariantSpec("TM", False, Mode.UNIDIR_L2R, False),
        VariantSpec("TM-ML", True, Mode.UNIDIR_L2R, False),
        VariantSpec("TM-ML-Flag", True, Mode.UNIDIR_L2R, True),
        VariantSpec("TM-ML-BD", True, Mode.SEPARATE_BIDIR, False),
        VariantSpec("TM-ML-BD-Flag", True, Mode.SEPARATE_BIDIR, True),
        VariantSpec("SBL-First", True, Mode.SBL_FIRST, False),
        VariantSpec("SBL-All", True, Mode.SBL_ALL, False),
        VariantSpec("SBL-All-Flag", True, Mode.SBL_ALL, True),
    )
}


def get_variant(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}") from None


def lr_schedule(step: int, warmup: int, d_model: int, factor: float = 1.0) -> float:
    """Linear warmup then inverse square-root decay, peaking at ``step == warmup``."""
    if warmup < 1:
        raise ConfigError(f"warmup must be >= 1, got {warmup}")
    if step < 1:
        raise ConfigError(f"schedule steps start at 1, got {step}")
    return factor * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


# ---------------------------------------------------------------------------
# data


@dataclass
class Example:
    sample_id: str
    language: str
    word: str
    target: TargetSequence
    frames: np.ndarray


@dataclass
class Batch:
    sample_ids: list[str]
    languages: list[str]
    features: np.ndarray
    frame_mask: np.ndarray
    tgt_l2r: np.ndarray
    tgt_r2l: np.ndarray
    targets: list[TargetSequence]


class Dataset:
    def __init__(self, examples: list[Example]):
        self.examples = examples

    def __len__(self) -> int:
        return len(self.examples)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, inventory: PhonemeInventory, with_flag: bool, max_len: int):
        examples = []
        for row in manifest.samples:
            entry = LexiconEntry(row.word, row.language, row.phonemes)
            target = encode(entry, inventory, with_flag, max_len)
            examples.append(Example(row.sample_id, row.language, row.word, target, manifest.load_features(row)))
        return cls(examples)

    def languages(self) -> list[str]:
        return sorted({e.language for e in self.examples})

    def indices_by_language(self) -> dict[str, np.ndarray]:
        out: dict[str, list[int]] = {}
        for i, e in enumerate(self.examples):
            out.setdefault(e.language, []).append(i)
        return {k: np.array(v) for k, v in out.items()}

    def batch(self, indices) -> Batch:
        chosen = [self.examples[int(i)] for i in indices]
        feats, mask = pad_features([e.frames for e in chosen])
        width = max(len(e.target.flagged) + 1 for e in chosen)
        return Batch(
            sample_ids=[e.sample_id for e in chosen],
            languages=[e.language for e in chosen],
            features=feats,
            frame_mask=mask,
            tgt_l2r=np.array([e.target.l2r[:width] for e in chosen], dtype=np.int64),
            tgt_r2l=np.array([e.target.r2l[:width] for e in chosen], dtype=np.int64),
            targets=[e.target for e in chosen],
        )


def load_inventory(data_dir: str | Path) -> PhonemeInventory:
    path = Path(data_dir) / "inventory.tsv"
    if not path.exists():
        raise DataError(f"no inventory at {path}; run gen-data first")
    return PhonemeInventory.read(path)


def load_split(data_dir, split: str, inventory, languages, with_flag: bool, max_len: int, cap: int = 0, seed: int = 0):
    manifest = DatasetManifest.read(Path(data_dir) / f"{split}.tsv", split).only(languages)
    if not manifest.samples:
        raise DataError(f"split {split!r} has no samples for languages {list(languages)}")
    if cap and len(manifest.samples) > cap:
        keep = np.sort(stream(seed, "cap", split).permutation(len(manifest.samples))[:cap])
        manifest = DatasetManifest([manifest.samples[i] for i in keep], manifest.split, manifest.root)
    return Dataset.from_manifest(manifest, inventory, with_flag, max_len)


# ---------------------------------------------------------------------------
# model


class SblModel(Module):
    """Encoder plus decoder, bound to one inventory and one ablation variant."""

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: SblDecoderConfig, inventory: PhonemeInventory,
                 max_len: int, seed: int = 0):
        self.inventory = inventory
        self.max_len = max_len
        self.dropout_stream = RngStream(stream(seed, "dropout"))
        rng = stream(seed, "init")
        self.encoder = Encoder(enc_cfg, rng, self.dropout_stream)
        self.decoder = SblDecoder(dec_cfg, inventory.vocab_size, rng, self.dropout_stream)

    @property
    def cfg(self) -> SblDecoderConfig:
        return self.decoder.cfg

    def loss(self, batch: Batch, tf_rng: np.random.Generator):
        memory = self.encoder(batch.features, batch.frame_mask)
        bidir = self.cfg.bidirectional
        in_l2r, in_r2l = mixed_contexts(
            self.decoder, batch.tgt_l2r, batch.tgt_r2l if bidir else None, memory, self.cfg.gamma, tf_rng
        )
        logits_l2r, logits_r2l = self.decoder.forward(in_l2r, in_r2l, memory)
        return bidirectional_loss(
            logits_l2r, logits_r2l, batch.tgt_l2r, batch.tgt_r2l, self.cfg.lambda_l2r,
            self.cfg.lambda_r2l if bidir else 0.0,
        )

    def teacher_forced_loss(self, batch: Batch) -> float:
        was = self.training
        self.eval()
        with nx.no_grad():
            memory = self.encoder(batch.features, batch.frame_mask)
            r2l = shift_right(batch.tgt_r2l) if self.cfg.bidirectional else None
            logits = self.decoder.forward(shift_right(batch.tgt_l2r), r2l, memory)
            loss = bidirectional_loss(*logits, batch.tgt_l2r, batch.tgt_r2l, self.cfg.lambda_l2r,
                                      self.cfg.lambda_r2l if self.cfg.bidirectional else 0.0)
        self.train(was)
        return loss.item()

    def decode(self, batch: Batch) -> list[BidiPrediction]:
        was = self.training
        self.eval()
        with nx.no_grad():
            memory = self.encoder(batch.features, batch.frame_mask)
        preds = greedy_synchronous_decode(self.decoder, memory, self.inventory, self.max_len)
        self.train(was)
        return preds


def build_model(cfg: RunConfig, inventory: PhonemeInventory, variant: VariantSpec | None = None) -> SblModel:
    variant = variant or get_variant(cfg.train.variant)
    m, t = cfg.model, cfg.train
    enc = EncoderConfig(
        n_blocks=m.enc_blocks, n_heads=m.heads, d_model=m.d_model, d_k=m.d_k, d_v=m.d_v, d_ff=m.d_ff,
        dropout=m.dropout, feature_dim=cfg.data.feature_dim,
    )
    dec = SblDecoderConfig(
        n_blocks=m.dec_blocks, n_heads=m.heads, d_model=m.d_model, d_k=m.d_k, d_v=m.d_v, d_ff=m.d_ff,
        dropout=m.dropout, mode=variant.mode, flag_enabled=variant.flag, lambda_l2r=t.lambda_l2r,
        lambda_r2l=t.lambda_r2l, gamma=t.gamma,
    )
    return SblModel(enc, dec, inventory, m.max_len, t.seed)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"SBLC"
CKPT_VERSION = 1
_META = "#! "


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]
    step: int
    rng_state: dict
    meta: dict[str, str] = field(default_factory=dict)


def _write_records(fh, records: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(records)))
    for name, arr in records.items():
        encoded = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        fh.write(struct.pack("<I", len(encoded)) + encoded)
        fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_records(buf: io.BytesIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", buf.read(4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", buf.read(4))
        name = buf.read(n).decode()
        (rank,) = struct.unpack("<I", buf.read(4))
        shape = struct.unpack(f"<{rank}I", buf.read(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(buf.read(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return out


def save_checkpoint(path, cfg: RunConfig, model: SblModel, optimizer: nx.Adam | None, step: int, rngs: dict) -> None:
    """Single-file checkpoint: config echo, parameters, Adam moments, step, RNG states."""
    echo = cfg.to_text() + f"{_META}inventory_sha256 = {model.inventory.fingerprint()}\n"
    params = {k: p.data for k, p in model.named_parameters().items()}
    opt: dict[str, np.ndarray] = {}
    if optimizer is not None:
        for k in optimizer.state.m:
            opt[f"m/{k}"] = optimizer.state.m[k]
            opt[f"v/{k}"] = optimizer.state.v[k]
    rng_blob = json.dumps(rngs, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
        encoded = echo.encode()
        fh.write(struct.pack("<I", len(encoded)) + encoded)
        _write_records(fh, params)
        _write_records(fh, opt)
        fh.write(struct.pack("<Q", step))
        fh.write(struct.pack("<I", len(rng_blob)) + rng_blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    buf = io.BytesIO(path.read_bytes())
    if buf.read(4) != CKPT_MAGIC:
        raise DataError(f"{path}: not an SBLC checkpoint")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", buf.read(4))
    echo = buf.read(n).decode()
    meta = {}
    for line in echo.splitlines():
        if line.startswith(_META):
            key, value = line[len(_META):].split("=", 1)
            meta[key.strip()] = value.strip()
    params = _read_records(buf)
    opt = _read_records(buf)
    (step,) = struct.unpack("<Q", buf.read(8))
    (n,) = struct.unpack("<I", buf.read(4))
    rng_state = json.loads(buf.read(n).decode())
    return Checkpoint(parse_config_text(echo, origin=str(path)), params, opt, step, rng_state, meta)


def restore_model(ckpt: Checkpoint, inventory: PhonemeInventory) -> SblModel:
    expected = ckpt.meta.get("inventory_sha256")
    if expected and expected != inventory.fingerprint():
        raise ConfigError("checkpoint vocabulary does not match the dataset inventory")
    model = build_model(ckpt.config, inventory)
    named = model.named_parameters()
    if set(named) != set(ckpt.params):
        raise ConfigError("checkpoint parameters do not match the configured architecture")
    for k, p in named.items():
        if p.shape != ckpt.params[k].shape:
            raise ConfigError(f"parameter {k}: checkpoint shape {ckpt.params[k].shape} vs model {p.shape}")
        p.data[...] = ckpt.params[k]
    if "dropout" in ckpt.rng_state:
        model.dropout_stream.rng.bit_generator.state = ckpt.rng_state["dropout"]
    return model


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricRow:
    step: int
    variant: str
    language: str
    mode: str
    per: float
    acc: float
    flag_acc: float | None
    loss: float

    def as_csv(self) -> list[str]:
        flag = "" if self.flag_acc is None else f"{self.flag_acc:.6f}"
        return [str(self.step), self.variant, self.language, self.mode, f"{self.per:.6f}", f"{self.acc:.6f}",
                flag, f"{self.loss:.6f}"]


def write_metrics_csv(path, rows: list[MetricRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for r in rows:
            writer.writerow(r.as_csv())


def hypothesis_for(pred: BidiPrediction, mode: str) -> list[int] | None:
    if mode == "L2R":
        return pred.tokens_l2r
    if mode == "R2L":
        return pred.tokens_r2l if pred.dist_r2l is not None else None
    return pred.combined


def flag_for(pred: BidiPrediction, mode: str) -> int | None:
    if mode == "L2R":
        return None if pred.flag_l2r is None else int(np.argmax(pred.flag_l2r))
    if mode == "R2L":
        return None if pred.flag_r2l is None else int(np.argmax(pred.flag_r2l))
    return combined_flag(pred)


def available_modes(model: SblModel, requested=MODES) -> list[str]:
    if model.cfg.bidirectional:
        return list(requested)
    return [m for m in requested if m != "R2L"]


def decode_dataset(model: SblModel, data: Dataset, batch_size: int = 256) -> list[BidiPrediction]:
    preds: list[BidiPrediction] = []
    for start in range(0, len(data), batch_size):
        preds.extend(model.decode(data.batch(range(start, min(start + batch_size, len(data))))))
    return preds


def dataset_loss(model: SblModel, data: Dataset, batch_size: int = 256) -> float:
    total = weight = 0.0
    for start in range(0, len(data), batch_size):
        idx = range(start, min(start + batch_size, len(data)))
        total += model.teacher_forced_loss(data.batch(idx)) * len(idx)
        weight += len(idx)
    return total / weight


def evaluate(model: SblModel, data: Dataset, modes=MODES, variant: str = "", step: int = 0) -> list[MetricRow]:
    """PER / Acc / flag accuracy per language and overall for each combination mode."""
    inv = model.inventory
    modes = available_modes(model, modes)
    preds = decode_dataset(model, data)
    loss = dataset_loss(model, data)
    rows = []
    groups = {lang: [i for i, e in enumerate(data.examples) if e.language == lang] for lang in data.languages()}
    groups["all"] = list(range(len(data)))
    for mode in modes:
        for lang, idx in groups.items():
            pairs = [(list(data.examples[i].target.raw), strip(hypothesis_for(preds[i], mode), inv)) for i in idx]
            flag_acc = None
            if model.cfg.flag_enabled:
                hits = [flag_for(preds[i], mode) == data.examples[i].target.flag for i in idx]
                flag_acc = sum(hits) / len(hits)
            rows.append(MetricRow(step, variant, lang, mode, corpus_per(pairs), word_accuracy(pairs), flag_acc, loss))
    return rows


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SblModel
    metrics: list[MetricRow]
    losses: list[float]
    checkpoint: Path | None
    seconds: float = 0.0

    def final(self, language: str = "all", mode: str = "C-Bi") -> MetricRow:
        last = max(r.step for r in self.metrics)
        for r in self.metrics:
            if r.step == last and r.language == language and r.mode == mode:
                return r
        raise KeyError((language, mode))


def training_languages(cfg: RunConfig, inventory: PhonemeInventory, variant: VariantSpec) -> list[str]:
    if variant.joint:
        return list(inventory.languages)
    if not cfg.train.language:
        raise ConfigError(f"variant {variant.name} trains on one language; set train.language")
    if cfg.train.language not in inventory.languages:
        raise ConfigError(f"train.language {cfg.train.language!r} not in {inventory.languages}")
    return [cfg.train.language]


def _sample_batch(rng, by_lang: dict[str, np.ndarray], languages: list[str], size: int, mix: float) -> np.ndarray:
    if len(languages) == 1:
        pool = by_lang[languages[0]]
        return pool[rng.integers(0, len(pool), size=size)]
    probs = np.full(len(languages), (1.0 - mix) / (len(languages) - 1))
    probs[0] = mix
    which = rng.choice(len(languages), size=size, p=probs)
    out = np.empty(size, dtype=np.int64)
    for k, lang in enumerate(languages):
        sel = which == k
        pool = by_lang[lang]
        out[sel] = pool[rng.integers(0, len(pool), size=int(sel.sum()))]
    return out


def _grad_norms(model: SblModel) -> dict[str, float]:
    return {k: float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0 for k, p in model.named_parameters().items()}


def train(
    cfg: RunConfig,
    out_dir: str | Path | None = None,
    train_data: Dataset | None = None,
    eval_data: Dataset | None = None,
    inventory: PhonemeInventory | None = None,
) -> TrainResult:
    """Seeded training run; evaluates every ``eval_interval`` steps and at the end."""
    t0 = time.perf_counter()
    variant = get_variant(cfg.train.variant)
    t = cfg.train
    for name in ("batch_size", "warmup"):
        if getattr(t, name) < 1:
            raise ConfigError(f"train.{name} must be >= 1")
    if t.max_steps < 0 or t.eval_interval < 0:
        raise ConfigError("train.max_steps and train.eval_interval must be >= 0")
    if not 0.0 <= t.language_mix <= 1.0:
        raise ConfigError("train.language_mix must lie in [0, 1]")
    inventory = inventory or load_inventory(cfg.data.dir)
    languages = training_languages(cfg, inventory, variant)
    if train_data is None:
        train_data = load_split(cfg.data.dir, "train", inventory, languages, variant.flag, cfg.model.max_len,
                                t.max_train, cfg.train.seed)
    if t.epochs < 0:
        raise ConfigError("train.epochs must be >= 0")
    if eval_data is None and (t.max_steps > 0 or t.epochs > 0):
        eval_data = load_split(cfg.data.dir, cfg.eval.split, inventory, languages, variant.flag, cfg.model.max_len)

    steps = t.max_steps
    if t.epochs > 0:
        # Equal passes over the data rather than equal updates.
        steps = max(1, int(round(t.epochs * len(train_data) / t.batch_size)))

    model = build_model(cfg, inventory, variant)
    model.train()
    optimizer = nx.Adam(model.named_parameters(), t.beta1, t.beta2, t.adam_eps)
    batch_rng = stream(t.seed, "batches")
    tf_rng = stream(t.seed, "teacher-forcing")
    by_lang = train_data.indices_by_language()
    present = [lang for lang in languages if lang in by_lang]

    metrics: list[MetricRow] = []
    losses: list[float] = []
    for step in range(1, steps + 1):
        batch = train_data.batch(_sample_batch(batch_rng, by_lang, present, t.batch_size, t.language_mix))
        lr = lr_schedule(step, t.warmup, cfg.model.d_model, t.lr_factor)
        loss = model.loss(batch, tf_rng)
        value = loss.item()
        optimizer.zero_grad()
        nx.backward(loss)
        if not math.isfinite(value):
            norms = _grad_norms(model)
            message = f"non-finite loss {value} at step {step} (lr={lr:.3e})"
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                dump = [message] + [f"{k}\t{v:.6e}" for k, v in norms.items()]
                (Path(out_dir) / "nan_dump.txt").write_text("\n".join(dump) + "\n")
            raise NumericError(message)
        optimizer.step(lr)
        losses.append(value)
        if (t.eval_interval and step % t.eval_interval == 0) or step == steps:
            rows = evaluate(model, eval_data, variant=variant.name, step=step)
            metrics.extend(rows)
            log.info("step %d loss %.4f %s", step, value,
                     " ".join(f"{r.language}/{r.mode}={r.acc:.3f}" for r in rows if r.language == "all"))

    ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "checkpoint.sblc"
        rngs = {
            "dropout": model.dropout_stream.rng.bit_generator.state,
            "batches": batch_rng.bit_generator.state,
            "teacher-forcing": tf_rng.bit_generator.state,
        }
        save_checkpoint(ckpt, cfg, model, optimizer, steps, rngs)
        write_metrics_csv(out / "metrics.csv", metrics)
        (out / "losses.txt").write_text("".join(f"{v:.10f}\n" for v in losses))
    return TrainResult(model, metrics, losses, ckpt, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# ablation matrix


@dataclass
class AblationReport:
    rows: list[dict] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)
    failure_codes: dict[str, int] = field(default_factory=dict)
    variants: list[str] = field(default_factory=list)
    languages: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def value(self, variant: str, language: str, mode: str, metric: str = "acc") -> float | None:
        vals = [r[metric] for r in self.rows
                if r["variant"] == variant and r["language"] == language and r["mode"] == mode]
        return float(np.mean(vals)) if vals else None

    def mean_acc(self, variant: str, mode: str = "C-Bi") -> float:
        """Mean test accuracy over seeds and languages."""
        vals = [r["acc"] for r in self.rows
                if r["variant"] == variant and r["mode"] == mode and r["language"] in self.languages]
        return float(np.mean(vals)) if vals else float("nan")

    def table(self, metric: str = "acc") -> str:
        header = ["Method", "Languages"]
        for lang in self.languages:
            header += [f"{lang} L2R", f"{lang} R2L", f"{lang} C-Bi"]
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for name in self.variants:
            spec = VARIANTS[name]
            cells = [name, "+".join(self.languages) if spec.joint else "/".join(self.languages)]
            for lang in self.languages:
                for mode in MODES:
                    if name in self.failures:
                        cells.append("failed")
                    elif spec.mode is Mode.UNIDIR_L2R and mode != "C-Bi":
                        cells.append("--")
                    else:
                        v = self.value(name, lang, mode, metric)
                        cells.append("--" if v is None else f"{100 * v:.2f}%")
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines)

    def markdown(self) -> str:
        parts = ["# Ablation report", "", "## Word accuracy (Acc = 1 - WER)", "", self.table("acc"), "",
                 "## Phoneme error rate (PER)", "", self.table("per"), ""]
        if self.failures:
            parts += ["## Failures", ""] + [f"- {k}: {v}" for k, v in self.failures.items()] + [""]
        return "\n".join(parts)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.md").write_text(self.markdown(), encoding="utf-8")
        with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["variant", "seed", "language", "mode", "per", "acc", "flag_acc", "status"])
            for r in self.rows:
                flag = "" if r["flag_acc"] is None else f"{r['flag_acc']:.6f}"
                writer.writerow([r["variant"], r["seed"], r["language"], r["mode"], f"{r['per']:.6f}",
                                 f"{r['acc']:.6f}", flag, "ok"])
            for name, why in self.failures.items():
                writer.writerow([name, "", "", "", "", "", "", f"failed: {why}"])


def run_ablation_matrix(cfg: RunConfig, out_dir=None, variants=None, seeds=None) -> AblationReport:
    """Train and evaluate each variant under shared seeds; single-language variants train per language."""
    variants = list(variants or VARIANTS)
    seeds = list(seeds if seeds is not None else [cfg.train.seed])
    inventory = load_inventory(cfg.data.dir)
    report = AblationReport(variants=variants, languages=list(inventory.languages))
    cache: dict[tuple, Dataset] = {}

    def data(split, langs, flag):
        key = (split, tuple(langs), flag)
        if key not in cache:
            cap = cfg.train.max_train if split == "train" else 0
            cache[key] = load_split(cfg.data.dir, split, inventory, langs, flag, cfg.model.max_len, cap, cfg.train.seed)
        return cache[key]

    for seed in seeds:
        for name in variants:
            if name in report.failures:
                continue
            spec = get_variant(name)
            groups = [list(inventory.languages)] if spec.joint else [[lang] for lang in inventory.languages]
            try:
                for langs in groups:
                    run = cfg.copy()
                    run.train.variant = name
                    run.train.seed = seed
                    run.train.language = "" if spec.joint else langs[0]
                    sub = None
                    if out_dir is not None:
                        tag = name if spec.joint else f"{name}_{langs[0]}"
                        sub = Path(out_dir) / f"seed{seed}" / tag
                    result = train(run, sub, data("train", langs, spec.flag), data(cfg.eval.split, langs, spec.flag),
                                   inventory)
                    last = max(r.step for r in result.metrics)
                    for r in result.metrics:
                        if r.step == last and r.language in langs:
                            report.rows.append(dict(variant=name, seed=seed, language=r.language, mode=r.mode,
                                                    per=r.per, acc=r.acc, flag_acc=r.flag_acc))
                    log.info("%s seed %d %s done in %.1fs", name, seed, "+".join(langs), result.seconds)
            except SblError as exc:
                report.failures[name] = str(exc)
                report.failure_codes[name] = exc.exit_code
                log.error("variant %s failed: %s", name, exc)
    if out_dir is not None:
        report.write(out_dir)
    return report
