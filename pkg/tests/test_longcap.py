import numpy as np
import pytest

from slidecap.encoders import EncoderConfig, encode_text_window, init_params, normalize
from slidecap.errors import BatchItemError
from slidecap.longcap import LongTextConfig, caption_forward, encode_caption_batch, encode_long_text
from slidecap.textpipe import TokenSequence, make_windows, vocabulary_from_tokens, window_count

VOCAB = vocabulary_from_tokens([f"w{i}" for i in range(40)])
CFG = EncoderConfig(vocab_size=len(VOCAB), context_len=12, text_layers=1, text_heads=2, text_width=16,
                    image_size=8, patch_size=4, image_layers=1, image_heads=2, image_width=8, embed_dim=8)
LTC = LongTextConfig(context_len=12, stride=5)


@pytest.fixture(scope="module")
def params():
    return init_params(CFG, seed=11)


def random_seq(rng, n):
    return TokenSequence(tuple(int(x) for x in rng.integers(0, 40, size=n)), VOCAB)


def test_short_caption_equals_single_window(params):
    rng = np.random.default_rng(0)
    for n in (0, 1, 5, 10):
        seq = random_seq(rng, n)
        b = make_windows(seq, 12, 5)
        expected = normalize(encode_text_window(b.windows[0], b.masks[0], params, CFG))
        np.testing.assert_allclose(encode_long_text(seq, params, CFG, LTC), expected, atol=1e-6)


def test_duplicated_caption_without_overlap(params):
    rng = np.random.default_rng(1)
    half = random_seq(rng, 10)
    doubled = TokenSequence(half.ids + half.ids, VOCAB)
    ltc = LongTextConfig(context_len=12, stride=10)
    assert len(make_windows(doubled, 12, 10)) == 2
    np.testing.assert_allclose(encode_long_text(doubled, params, CFG, ltc),
                               encode_long_text(half, params, CFG, ltc), atol=1e-6)


@pytest.mark.parametrize("before", [False, True])
def test_mean_of_window_embeddings(params, before):
    rng = np.random.default_rng(2)
    seq = random_seq(rng, 33)
    ltc = LongTextConfig(context_len=12, stride=5, normalize_before_mean=before)
    b = make_windows(seq, 12, 5)
    embs = [encode_text_window(r, m, params, CFG) for r, m in zip(b.windows, b.masks)]
    if before:
        embs = [normalize(e) for e in embs]
    out = encode_long_text(seq, params, CFG, ltc)
    np.testing.assert_allclose(out, normalize(np.mean(embs, axis=0)), atol=1e-10)
    # window order does not leak into the mean
    shuffled = [embs[i] for i in rng.permutation(len(embs))]
    np.testing.assert_allclose(out, normalize(np.mean(shuffled, axis=0)), atol=1e-6)


def test_output_is_unit_norm(params):
    rng = np.random.default_rng(3)
    for n in (0, 7, 30, 80):
        e = encode_long_text(random_seq(rng, n), params, CFG, LTC)
        assert np.isfinite(e).all()
        assert abs(np.linalg.norm(e) - 1) < 1e-6


def test_forward_pass_count_equals_window_count(params, monkeypatch):
    import slidecap.longcap as lc
    rows_seen = []
    real = lc.text_forward

    def counting(rows, masks, p, cfg):
        rows_seen.append(len(rows))
        return real(rows, masks, p, cfg)

    monkeypatch.setattr(lc, "text_forward", counting)
    seq = random_seq(np.random.default_rng(4), 47)
    encode_long_text(seq, params, CFG, LTC)
    assert rows_seen == [window_count(47, 10, 5)]


def test_batch_empty_and_pair(params):
    assert encode_caption_batch([], params, CFG, LTC) == []
    rng = np.random.default_rng(5)
    a, b = random_seq(rng, 4), random_seq(rng, 25)
    out = encode_caption_batch([a, b], params, CFG, LTC)
    np.testing.assert_allclose(out[0], encode_long_text(a, params, CFG, LTC), atol=1e-6)
    np.testing.assert_allclose(out[1], encode_long_text(b, params, CFG, LTC), atol=1e-6)


@pytest.mark.parametrize("max_windows", [1, 7, 256])
def test_batch_matches_sequential_map(params, max_windows):
    rng = np.random.default_rng(6)
    seqs = [random_seq(rng, int(n)) for n in rng.integers(0, 60, size=100)]
    batched = encode_caption_batch(seqs, params, CFG, LTC, max_windows=max_windows)
    assert len(batched) == 100
    for seq, got in zip(seqs, batched):
        np.testing.assert_allclose(got, encode_long_text(seq, params, CFG, LTC), atol=1e-6)


def test_batch_errors_carry_index(params):
    rng = np.random.default_rng(7)
    bad = TokenSequence((1, 999), VOCAB)
    with pytest.raises(BatchItemError) as info:
        encode_caption_batch([random_seq(rng, 5), random_seq(rng, 30), bad], params, CFG, LTC)
    assert info.value.index == 2


def test_caption_forward_matches_encode(params):
    rng = np.random.default_rng(8)
    seqs = [random_seq(rng, n) for n in (3, 17, 40)]
    out, _ = caption_forward(seqs, params, CFG, LTC)
    for seq, row in zip(seqs, out):
        np.testing.assert_allclose(row, encode_long_text(seq, params, CFG, LTC), atol=1e-6)
