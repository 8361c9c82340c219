import json

import numpy as np
import pytest

from quoterec.checkpoint import CheckpointError, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from quoterec.data import make_batch

from conftest import random_conversations, tiny_model


@pytest.fixture
def saved(small_corpus, tmp_path):
    model = tiny_model(vocab_size=len(small_corpus.vocab), n_quotes=len(small_corpus.quotes), seed=4)
    path = save_checkpoint(tmp_path / "m.ckpt", model, small_corpus.vocab, small_corpus.quotes, {"MAP": 0.5})
    return model, path


class TestRoundTrip:
    def test_save_load_save_identical(self, saved, tmp_path):
        _, path = saved
        ck = load_checkpoint(path)
        again = save_checkpoint(tmp_path / "again.ckpt", ck.model, ck.vocab, ck.quotes, ck.metrics)
        assert again.read_bytes() == path.read_bytes()

    def test_forward_identical(self, saved, small_corpus):
        model, path = saved
        ck = load_checkpoint(path)
        b = make_batch(random_conversations(np.random.default_rng(0), 6, vocab_size=len(small_corpus.vocab),
                                            n_quotes=len(small_corpus.quotes)))
        a = model.forward(b, model.quotation_matrix(small_corpus.quotes)).logits.data
        c = ck.model.forward(b, ck.model.quotation_matrix(ck.quotes)).logits.data
        assert a.tobytes() == c.tobytes()

    def test_contents(self, saved, small_corpus):
        model, path = saved
        ck = load_checkpoint(path)
        assert ck.config == model.config
        assert ck.vocab.id_to_token == small_corpus.vocab.id_to_token
        assert ck.quotes.texts == small_corpus.quotes.texts
        assert ck.quotes.tokens == small_corpus.quotes.tokens
        assert ck.metrics == {"MAP": 0.5}

    def test_header_index(self, saved):
        model, path = saved
        raw = path.read_bytes()
        _, size, rest = raw.split(b"\n", 2)
        header = json.loads(rest[: int(size)])
        names = [t["name"] for t in header["tensors"]]
        assert names == list(model.named_parameters())
        offsets = [t["offset"] for t in header["tensors"]]
        assert offsets == sorted(offsets) and offsets[0] == 0
        assert len(rest) - int(size) == 8 * sum(p.size for p in model.parameters())


class TestCorrupt:
    def _raw(self, saved):
        return saved[1].read_bytes()

    def test_bad_magic(self, saved):
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            from_bytes(b"GARBAGE" + self._raw(saved)[13:])

    def test_future_version(self, saved):
        raw = self._raw(saved).replace(b"QUOTEREC-CKPT 1\n", b"QUOTEREC-CKPT 2\n", 1)
        with pytest.raises(CheckpointError, match="version 2"):
            from_bytes(raw)

    def test_truncated_payload(self, saved):
        with pytest.raises(CheckpointError, match="truncated"):
            from_bytes(self._raw(saved)[:-8])

    def test_truncated_header(self, saved):
        with pytest.raises(CheckpointError):
            from_bytes(self._raw(saved)[:60])

    def test_empty(self):
        with pytest.raises(CheckpointError):
            from_bytes(b"")

    def test_tensor_mismatch(self, small_corpus):
        model = tiny_model(vocab_size=len(small_corpus.vocab), n_quotes=len(small_corpus.quotes))
        raw = to_bytes(model, small_corpus.vocab, small_corpus.quotes)
        first, size, rest = raw.split(b"\n", 2)
        header = json.loads(rest[: int(size)])
        header["tensors"] = header["tensors"][1:]
        head = json.dumps(header).encode()
        with pytest.raises(CheckpointError, match="registry"):
            from_bytes(first + b"\n%d\n" % len(head) + head + rest[int(size):])
