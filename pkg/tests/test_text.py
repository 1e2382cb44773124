
import numpy as np
import pytest
import torch

from unidiff import world
from unidiff.text import (
    DEFAULT_VOCAB, L_MAX, IdentityEncoder, PromptEmbedder, PromptTooLongError, UnknownTokenError, Vocabulary,
    detokenize, embed, encode_identity, inject_external, null_prompt, tokenize,
)


def test_vocabulary_layout():
    v = DEFAULT_VOCAB
    assert v.id("<pad>") == 0
    assert len(set(v.tokens)) == len(v.tokens)
    for tok in ("<t2i>", "<ie>", "<depth>", "<pose>", "<seg>", "<lg>", "<p>", "<null>", ":", "recolor", "magenta"):
        assert tok in v.index
    assert [v.id(t) for t in v.tokens] == list(range(len(v)))


def test_vocabulary_round_trip(tmp_path):
    DEFAULT_VOCAB.dump(tmp_path / "vocab.txt")
    lines = (tmp_path / "vocab.txt").read_text().splitlines()
    assert lines == list(DEFAULT_VOCAB.tokens)
    assert Vocabulary.load(tmp_path / "vocab.txt") == DEFAULT_VOCAB


def test_tokenize_examples():
    v = DEFAULT_VOCAB
    ids = tokenize("<t2i> a red circle")
    assert list(ids[:4]) == [v.id("<t2i>"), v.id("a"), v.id("red"), v.id("circle")]
    assert not ids[4:].any() and ids.shape == (L_MAX,)
    assert not tokenize("").any()
    seg = tokenize("<seg> circle : green")
    assert np.count_nonzero(seg) == 4 and not seg[4:].any()
    assert detokenize(seg) == "<seg> circle : green"


def test_tokenize_errors():
    with pytest.raises(UnknownTokenError) as exc:
        tokenize("<t2i> a purple circle")
    assert exc.value.symbol == "purple"
    with pytest.raises(PromptTooLongError):
        tokenize(" ".join(["a"] * (L_MAX + 1)))


def test_tokenization_injective_on_single_object_grammar():
    seen = {}
    for scene in world.single_object_scenes():
        key = tokenize(world.describe(scene)).tobytes()
        desc = world.describe(scene)
        assert seen.setdefault(key, desc) == desc


def _embedder(d=16):
    torch.manual_seed(0)
    return PromptEmbedder(len(DEFAULT_VOCAB), L_MAX, d)


def test_embed_rowwise_and_deterministic():
    e = _embedder()
    a = embed(tokenize("<t2i> a red circle"), e)
    b = embed(tokenize("<t2i> a red circle"), e)
    c = embed(tokenize("<t2i> a blue circle"), e)
    assert torch.equal(a.rows, b.rows)
    differs = (a.rows != c.rows).any(dim=1)
    assert differs.tolist() == [i == 2 for i in range(L_MAX)]
    ids = tokenize("<t2i> a red circle")
    assert torch.equal(a.rows[1], e.token[ids[1]] + e.position[1])
    assert a.valid.tolist() == [i < 4 for i in range(L_MAX)]


def test_placeholder_positions_and_injection():
    e = _embedder()
    p = embed(tokenize("<t2i> a <p> <p> <p> <p> red circle"), e)
    assert p.placeholder_positions == (2, 3, 4, 5)
    feats = torch.randn(4, 16)
    q = inject_external(p, feats)
    assert torch.equal(q.rows[2:6], feats)
    keep = [i for i in range(L_MAX) if i not in (2, 3, 4, 5)]
    assert float((q.rows[keep] - p.rows[keep]).abs().max().detach()) == 0.0
    assert torch.equal(inject_external(q, feats).rows, q.rows)
    with pytest.raises(ValueError):
        inject_external(p, torch.randn(3, 16))
    plain = embed(tokenize("<t2i> a red circle"), e)
    assert torch.equal(inject_external(plain, torch.zeros(0, 16)).rows, plain.rows)


def test_null_prompt_is_broadcast_learned_row():
    e = _embedder()
    n1, n2 = null_prompt(e), null_prompt(e)
    row = e.token[DEFAULT_VOCAB.id("<null>")]
    assert all(torch.equal(r, row) for r in n1.rows)
    assert torch.equal(n1.rows, n2.rows) and bool(n1.valid.all())


def test_identity_encoder_shapes_and_errors():
    enc = IdentityEncoder(256, 4)
    crop = np.random.default_rng(0).uniform(-1, 1, (16, 16, 3)).astype(np.float32)
    f1, f2 = encode_identity(crop, enc), encode_identity(crop, enc)
    assert f1.shape == (4, 256) and torch.equal(f1, f2)
    with pytest.raises(ValueError):
        encode_identity(np.zeros((8, 8, 3)), enc)


def test_identity_encoder_finite_differences():
    torch.manual_seed(0)
    enc = IdentityEncoder(8, 4, hidden=16).double()
    crop = torch.as_tensor(np.random.default_rng(1).uniform(-1, 1, (16, 16, 3)))
    w = torch.randn(4, 8, dtype=torch.float64)

    def loss():
        return (enc(crop) * w).sum() ** 2

    enc.zero_grad()
    loss().backward()
    h = 1e-5
    rng = np.random.default_rng(2)
    for p in (enc.fc1.weight, enc.fc1.bias, enc.fc2.weight, enc.fc2.bias):
        for _ in range(3):
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + h
                up = loss().item()
                p[idx] = orig - h
                down = loss().item()
                p[idx] = orig
            fd = (up - down) / (2 * h)
            g = p.grad[idx].item()
            assert abs(g - fd) / max(abs(g), abs(fd), 1e-6) < 1e-4
