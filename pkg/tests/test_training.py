import csv

import numpy as np
import pytest

from conftest import tiny_config
from sbl import training as tr
from sbl.errors import ConfigError, DataError, NumericError
from sbl.lexicon import PhonemeInventory


def test_lr_schedule_peaks_at_warmup():
    assert tr.lr_schedule(100, 100, 64) == pytest.approx(64**-0.5 * 100**-0.5)
    assert tr.lr_schedule(50, 100, 64) == pytest.approx(64**-0.5 * 50 * 100**-1.5)
    assert tr.lr_schedule(400, 100, 64, factor=2.0) == pytest.approx(2 * 64**-0.5 / 20)
    lrs = [tr.lr_schedule(s, 10, 16) for s in range(1, 40)]
    assert int(np.argmax(lrs)) + 1 == 10
    for bad in ((0, 10), (5, 0)):
        with pytest.raises(ConfigError):
            tr.lr_schedule(*bad, 16)


def test_eight_variants():
    assert list(tr.VARIANTS) == ["TM", "TM-ML", "TM-ML-Flag", "TM-ML-BD", "TM-ML-BD-Flag", "SBL-First",
                                 "SBL-All", "SBL-All-Flag"]
    assert not tr.VARIANTS["TM"].joint and tr.VARIANTS["SBL-All-Flag"].flag
    with pytest.raises(ConfigError):
        tr.get_variant("SBL-None")


def test_zero_steps_writes_untrained_checkpoint(tiny_data, tmp_path):
    result = tr.train(tiny_config(tiny_data, max_steps=0), tmp_path)
    assert result.losses == [] and result.metrics == []
    assert tr.load_checkpoint(result.checkpoint).step == 0


def test_single_language_variant_needs_language(tiny_data):
    with pytest.raises(ConfigError):
        tr.train(tiny_config(tiny_data, variant="TM"))
    with pytest.raises(ConfigError):
        tr.train(tiny_config(tiny_data, variant="TM", language="Z"))


def test_missing_data_dir(tmp_path):
    with pytest.raises(DataError):
        tr.train(tiny_config(tmp_path / "nowhere"))


def test_nonfinite_loss_dumps_and_raises(tiny_data, tmp_path, monkeypatch):
    original = tr.SblModel.loss
    monkeypatch.setattr(tr.SblModel, "loss", lambda self, b, r: original(self, b, r) * float("nan"))
    with pytest.raises(NumericError):
        tr.train(tiny_config(tiny_data), tmp_path)
    dump = (tmp_path / "nan_dump.txt").read_text()
    assert dump.startswith("non-finite loss") and "decoder" in dump


def test_training_reduces_loss(tiny_data):
    result = tr.train(tiny_config(tiny_data, max_steps=30, warmup=5, lr_factor=1.0))
    assert np.mean(result.losses[-5:]) < np.mean(result.losses[:5])


def test_epoch_budget_sets_step_count(tiny_data):
    # 6 words x 3 train samples x 2 languages = 36 examples; 2 epochs at batch 8 -> 9 steps.
    result = tr.train(tiny_config(tiny_data, epochs=2.0))
    assert len(result.losses) == 9


def test_checkpoint_roundtrip_is_forward_exact(tiny_data, tmp_path):
    cfg = tiny_config(tiny_data, variant="SBL-All-Flag")
    result = tr.train(cfg, tmp_path)
    inv = tr.load_inventory(tiny_data)
    ckpt = tr.load_checkpoint(result.checkpoint)
    assert ckpt.step == 4 and set(ckpt.rng_state) == {"dropout", "batches", "teacher-forcing"}
    assert ckpt.config.to_text() == cfg.to_text()
    assert {k[2:] for k in ckpt.optimizer if k.startswith("m/")} == set(ckpt.params)
    restored = tr.restore_model(ckpt, inv)
    test = tr.load_split(tiny_data, "test", inv, inv.languages, True, cfg.model.max_len)
    batch = test.batch(range(6))
    assert restored.teacher_forced_loss(batch) == result.model.teacher_forced_loss(batch)
    for a, b in zip(restored.decode(batch), result.model.decode(batch)):
        np.testing.assert_array_equal(a.dist_l2r, b.dist_l2r)
        np.testing.assert_array_equal(a.flag_r2l, b.flag_r2l)


def test_checkpoint_rejects_other_inventory(tiny_data, tmp_path):
    result = tr.train(tiny_config(tiny_data, max_steps=1), tmp_path)
    other = PhonemeInventory.from_symbols({"A": ["x"], "B": ["y"]})
    with pytest.raises(ConfigError):
        tr.restore_model(tr.load_checkpoint(result.checkpoint), other)


def test_corrupt_checkpoint(tmp_path):
    (tmp_path / "c.sblc").write_bytes(b"NOPE")
    with pytest.raises(DataError):
        tr.load_checkpoint(tmp_path / "c.sblc")


def test_evaluate_has_no_side_effects(tiny_data):
    result = tr.train(tiny_config(tiny_data, max_steps=2))
    model = result.model
    model.train()
    before = {k: p.data.copy() for k, p in model.named_parameters().items()}
    state = model.dropout_stream.rng.bit_generator.state
    inv = model.inventory
    test = tr.load_split(tiny_data, "test", inv, inv.languages, False, model.max_len)
    first = tr.evaluate(model, test)
    assert tr.evaluate(model, test) == first
    assert model.training and model.dropout_stream.rng.bit_generator.state == state
    for k, p in model.named_parameters().items():
        np.testing.assert_array_equal(p.data, before[k])
    assert {(r.language, r.mode) for r in first} == {(l, m) for l in ("A", "B", "all") for m in tr.MODES}


def test_unidirectional_model_has_no_r2l_rows(tiny_data):
    result = tr.train(tiny_config(tiny_data, variant="TM-ML", max_steps=1))
    assert {r.mode for r in result.metrics} == {"L2R", "C-Bi"}
    assert all(r.flag_acc is None for r in result.metrics)


def test_metrics_csv_is_deterministic(tiny_data, tmp_path):
    for name in ("a", "b"):
        tr.train(tiny_config(tiny_data, eval_interval=2), tmp_path / name)
    a, b = ((tmp_path / n / "metrics.csv").read_bytes() for n in ("a", "b"))
    assert a == b
    rows = list(csv.reader(a.decode().splitlines()))
    assert tuple(rows[0]) == tr.METRIC_COLUMNS
    assert {r[0] for r in rows[1:]} == {"2", "4"}


def test_report_marks_unidirectional_cells_and_failures():
    rows = [dict(variant=v, seed=0, language=lang, mode=m, per=0.1, acc=0.9, flag_acc=None)
            for v, modes in (("TM-ML", ("L2R", "C-Bi")), ("SBL-All", tr.MODES))
            for lang in ("A", "B") for m in modes]
    report = tr.AblationReport(rows, {"TM-ML-BD": "boom"}, {"TM-ML-BD": 5}, ["TM-ML", "SBL-All", "TM-ML-BD"],
                               ["A", "B"])
    lines = report.table().splitlines()
    assert lines[2].count("--") == 4 and lines[2].count("90.00%") == 2
    assert lines[3].count("90.00%") == 6
    assert lines[4].count("failed") == 6
    assert report.mean_acc("SBL-All") == pytest.approx(0.9)
    assert "boom" in report.markdown() and not report.ok


def test_ablation_matrix_trains_tm_per_language(tiny_data, tmp_path):
    cfg = tiny_config(tiny_data, max_steps=1)
    report = tr.run_ablation_matrix(cfg, tmp_path, ["TM", "SBL-All"], [0])
    assert report.ok
    assert (tmp_path / "seed0" / "TM_A" / "metrics.csv").exists()
    assert (tmp_path / "seed0" / "SBL-All" / "checkpoint.sblc").exists()
    assert {r["language"] for r in report.rows if r["variant"] == "TM"} == {"A", "B"}
    assert (tmp_path / "ablation.md").read_text().startswith("# Ablation report")
