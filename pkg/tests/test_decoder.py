import math

import numpy as np
import pytest

from rel2prompt import diff
from rel2prompt.decoder import Answer, Decoder, DecoderConfig
from rel2prompt.diff import ParameterStore, Value, check_gradients
from rel2prompt.errors import ConfigError, ContextOverflow, SchemaMismatch, ShapeMismatch
from rel2prompt.prompt import DenormTree, TreeNode, build_graph_prompt
from rel2prompt.vocab import BOS, EOS, MASK, NO, OPEN, RESERVED, UNK, YES, Vocab, tokenize

WIDTH = 8


@pytest.fixture
def vocab():
    return Vocab.build(['hello world , is .', 'age is 42'])


def _decoder(vocab, **overrides):
    cfg = DecoderConfig(**dict(dict(embed_dim=WIDTH, layers=1, heads=2, context=64, head_hidden=4), **overrides))
    return Decoder(ParameterStore(seed=3), len(vocab), cfg)


def _prompt(seed=0, requires_grad=False):
    root = TreeNode(0, 'users', 0, [TreeNode(1, 'orders', 1)])
    rng = np.random.default_rng(seed)
    vectors = {v: Value(rng.normal(size=WIDTH), requires_grad=requires_grad) for v in (0, 1)}
    return build_graph_prompt(DenormTree(root, ['users', 'orders']), vectors, Value(rng.normal(size=WIDTH)))


def test_reserved_block(vocab):
    assert vocab.tokens[:9] == list(RESERVED)
    assert (OPEN, YES, NO, UNK) == (4, 6, 7, 8)
    assert vocab.encode('[MASK] yes No') == [MASK, YES, NO]
    assert tokenize('Age is 4.5, ok?') == ['age', 'is', '4.5', ',', 'ok', '?']


def test_character_fallback(vocab):
    assert vocab.encode('hello') == [vocab.token_id('hello')]
    assert vocab.encode('hold') == [vocab.token_id(c) for c in 'hold']
    assert vocab.encode('q') == [UNK]
    assert vocab.decode([BOS, vocab.token_id('hello'), vocab.token_id(','), vocab.token_id('world'), EOS]) == 'hello, world'


def test_vocab_file_round_trip(vocab, tmp_path):
    path = str(tmp_path / 'vocab.txt')
    vocab.save(path)
    lines = open(path, encoding='utf-8').read().splitlines()
    assert lines[:9] == list(RESERVED) and len(lines) == len(vocab)
    assert Vocab.load(path).tokens == vocab.tokens


def test_bad_vocab_files():
    with pytest.raises(SchemaMismatch):
        Vocab(['yes', 'no'])
    with pytest.raises(SchemaMismatch):
        Vocab(list(RESERVED) + ['a', 'a'])


def test_config_validation():
    with pytest.raises(ConfigError):
        DecoderConfig(embed_dim=6, heads=4)
    with pytest.raises(ConfigError):
        DecoderConfig(layers=0)


def test_empty_text_embeds_to_no_rows(vocab):
    assert _decoder(vocab).embed_text([]).shape == (0, WIDTH)


def test_yes_no_probabilities_sum_to_one(vocab):
    decoder = _decoder(vocab)
    h_text = decoder.embed_text(vocab.encode('age is 42'))
    answer = decoder.decode(_prompt(), h_text, 'token_distribution')
    assert 0.0 < answer.p_yes < 1.0
    assert answer.p_yes + answer.p_no == pytest.approx(1.0)
    assert answer.score() == answer.p_yes
    log_probs = decoder.yes_no_log_probs(_prompt(), h_text).data
    assert math.exp(log_probs[0]) + math.exp(log_probs[1]) == pytest.approx(1.0, abs=1e-12)


def test_regression_head_starts_at_zero(vocab):
    decoder = _decoder(vocab)
    answer = decoder.decode(_prompt(), decoder.embed_text(vocab.encode('hello')), 'mlp_head')
    assert answer.scalar == 0.0 and answer.score() == 0.0


def test_zero_unembedding_gives_uniform_loss(vocab):
    decoder = _decoder(vocab)
    decoder.store['decoder.unembed'].data = np.zeros((WIDTH, len(vocab)))
    loss = decoder.teacher_forced_loss(_prompt(), decoder.embed_text(vocab.encode('age is')), vocab.encode('42') + [EOS])
    assert loss.item() == pytest.approx(math.log(len(vocab)))


def test_teacher_forcing_matches_stepwise_decoding(vocab):
    decoder = _decoder(vocab)
    prompt = _prompt()
    h_text = decoder.embed_text(vocab.encode('hello world'))
    target = vocab.encode('age is 42') + [EOS]
    stepwise = []
    for j, token in enumerate(target):
        extra = decoder.embed_ids(target[:j], h_text.shape[0]) if j else None
        logits = decoder.logits(prompt, h_text, extra).data[-1]
        shifted = logits - logits.max()
        stepwise.append(-(shifted[token] - math.log(np.exp(shifted).sum())))
    assert decoder.teacher_forced_loss(prompt, h_text, target).item() == pytest.approx(np.mean(stepwise), rel=1e-10)
    with pytest.raises(ValueError):
        decoder.teacher_forced_loss(prompt, h_text, [])


def test_later_tokens_do_not_change_earlier_logits(vocab):
    decoder = _decoder(vocab)
    prompt = _prompt()
    h_text = decoder.embed_text(vocab.encode('hello world'))
    short = decoder.logits(prompt, h_text).data
    longer = decoder.logits(prompt, h_text, decoder.embed_ids(vocab.encode('is 42'), h_text.shape[0])).data
    np.testing.assert_allclose(longer[:short.shape[0]], short, rtol=0, atol=1e-12)


def test_prompt_changes_the_answer(vocab):
    decoder = _decoder(vocab)
    h_text = decoder.embed_text(vocab.encode('hello world'))
    first = decoder.decode(_prompt(0), h_text, 'token_distribution').p_yes
    second = decoder.decode(_prompt(1), h_text, 'token_distribution').p_yes
    assert first != second


def test_frozen_decoder_passes_gradients_to_the_prompt(vocab):
    decoder = _decoder(vocab)
    prompt = _prompt(requires_grad=True)
    diff.backward(decoder.yes_no_log_probs(prompt, decoder.embed_text(vocab.encode('hello')))[0] * -1.0)
    assert all(decoder.store[name].grad is None for name in decoder.store.names() if name.startswith('decoder.'))
    assert all(slot.vector.grad is not None for slot in prompt.slots if slot.kind == 'vector')


def test_trainable_decoder_gradients(vocab):
    decoder = _decoder(vocab, trainable=True)
    prompt = _prompt()
    h_text = decoder.embed_text(vocab.encode('age is'))
    target = vocab.encode('42') + [EOS]
    assert decoder.store.trainable()[0].startswith('decoder.')
    error = check_gradients(lambda: decoder.teacher_forced_loss(prompt, h_text, target), decoder.store, max_coords=6,
                            names=['decoder.0.wq', 'decoder.0.mlp.w2', 'decoder.unembed'])
    assert error < 1e-4


def test_context_overflow(vocab):
    decoder = _decoder(vocab, context=8)
    with pytest.raises(ContextOverflow):
        decoder.decode(_prompt(), decoder.embed_text(vocab.encode('hello world hello world')), 'token_distribution')


def test_prompt_width_must_match(vocab):
    decoder = _decoder(vocab)
    root = TreeNode(0, 'users', 0)
    prompt = build_graph_prompt(DenormTree(root, ['users']), {0: Value(np.zeros(3))}, include_pooled=False)
    with pytest.raises(ShapeMismatch):
        decoder.decode(prompt, decoder.embed_text([YES]), 'token_distribution')


def test_greedy_decoding_is_bounded(vocab):
    decoder = _decoder(vocab, max_new_tokens=3)
    answer = decoder.decode(_prompt(), decoder.embed_text(vocab.encode('hello')), 'plain_text', vocab)
    assert len(answer.tokens) <= 3 and EOS not in answer.tokens
    assert answer.text == vocab.decode(answer.tokens)
    assert answer.tokens == decoder.greedy(_prompt(), decoder.embed_text(vocab.encode('hello')))
    with pytest.raises(ConfigError):
        decoder.decode(_prompt(), decoder.embed_text(vocab.encode('hello')), 'beam_search')


def test_answer_scores():
    assert Answer('plain_text', tokens=[YES, EOS]).score() == 1.0
    assert Answer('plain_text', tokens=[NO]).score() == 0.0
    assert Answer('plain_text', tokens=[]).score() == 0.0
    assert Answer('mlp_head', scalar=2.5).score() == 2.5
