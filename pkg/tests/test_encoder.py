import math

import numpy as np
import pytest

from sbl import numerics as nx
from sbl.encoder import (
    Encoder,
    EncoderConfig,
    FeatureSequence,
    MultiHeadAttention,
    causal_mask,
    multi_head_attention,
    pad_features,
    positional_encoding,
    read_features,
    write_features,
)
from sbl.errors import ConfigError, DataError, ShapeError
from sbl.nn import RngStream


def test_positional_encoding_values():
    pe = positional_encoding(3, 4)
    assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0]
    assert pe[2, 0] == pytest.approx(math.sin(2.0))
    assert pe[2, 3] == pytest.approx(math.cos(2.0 / 100.0))


def test_positional_encoding_needs_even_width():
    with pytest.raises(ConfigError):
        positional_encoding(4, 5)


def test_causal_mask_is_lower_triangular():
    m = causal_mask(3)
    assert m.tolist() == [[True, False, False], [True, True, False], [True, True, True]]


def test_attention_single_head_identity_projections():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3))
    eye = np.eye(3)
    out = multi_head_attention(x, x, x, eye, eye, eye, eye, n_heads=1).data
    scores = x @ x.T / math.sqrt(3)
    w = np.exp(scores - scores.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    np.testing.assert_allclose(out, w @ x, atol=1e-12)


def test_attention_weights_rows_sum_to_one_and_respect_mask():
    rng = np.random.default_rng(1)
    attn = MultiHeadAttention(8, 2, 4, 4, rng)
    x = rng.normal(size=(2, 5, 8))
    _, weights = attn(x, x, x, causal_mask(5), return_weights=True)
    np.testing.assert_allclose(weights.data.sum(-1), 1.0, atol=1e-12)
    assert np.all(weights.data[..., np.triu_indices(5, 1)[0], np.triu_indices(5, 1)[1]] == 0)


def test_attention_rejects_mismatched_mask():
    rng = np.random.default_rng(2)
    attn = MultiHeadAttention(8, 2, 4, 4, rng)
    x = rng.normal(size=(2, 5, 8))
    with pytest.raises(ShapeError):
        attn(x, x, x, np.ones((3, 3), dtype=bool))


def test_feature_file_roundtrip(tmp_path):
    frames = np.random.default_rng(3).normal(size=(7, 5)).astype(np.float32)
    write_features(tmp_path / "f.sblf", frames)
    np.testing.assert_array_equal(read_features(tmp_path / "f.sblf"), frames.astype(np.float64))
    blob = (tmp_path / "f.sblf").read_bytes()
    assert blob[:4] == b"SBLF"


def test_corrupt_feature_file(tmp_path):
    (tmp_path / "bad.sblf").write_bytes(b"SBLF" + b"\x01\x00\x00\x00" + b"\x05\x00\x00\x00" * 2)
    with pytest.raises(DataError):
        read_features(tmp_path / "bad.sblf")


def test_feature_sequence_needs_frames():
    with pytest.raises(DataError):
        FeatureSequence(np.zeros((0, 3)))


def test_encoder_ignores_padding_content():
    cfg = EncoderConfig(n_blocks=2, n_heads=2, d_model=8, d_k=4, d_v=4, d_ff=16, dropout=0.0, feature_dim=3)
    enc = Encoder(cfg, np.random.default_rng(4), RngStream(np.random.default_rng(5)))
    enc.eval()
    rng = np.random.default_rng(6)
    short, long = rng.normal(size=(3, 3)), rng.normal(size=(6, 3))
    feats, mask = pad_features([short, long])
    with nx.no_grad():
        a = enc(feats, mask).states.data
        feats[0, 3:] = 99.0
        b = enc(feats, mask).states.data
        alone = enc(short).states.data
    np.testing.assert_array_equal(a[0, :3], b[0, :3])
    np.testing.assert_allclose(a[0, :3], alone[0], atol=1e-12)
    assert a.shape == (2, 6, 8)


def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(d_model=7)
    with pytest.raises(ConfigError):
        EncoderConfig(dropout=1.0)
    assert EncoderConfig.full_scale().d_model == 512
