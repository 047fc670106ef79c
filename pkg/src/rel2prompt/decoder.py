"""Small causal decoder conditioned on a graph prompt, with the three answer strategies."""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diff
from .errors import ConfigError, ContextOverflow, ShapeMismatch
from .vocab import CLOSE, EOS, NO, OPEN, YES

logger = logging.getLogger('rel2prompt')

DECODER_PREFIX = 'decoder.'
HEAD_PREFIX = 'head.'

STRATEGIES = ('plain_text', 'token_distribution', 'mlp_head')


@dataclass(frozen=True)
class DecoderConfig:
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    context: int = 512
    trainable: bool = False
    max_new_tokens: int = 32
    head_hidden: int = 32

    def __post_init__(self):
        if self.embed_dim <= 0 or self.layers < 1 or self.heads < 1 or self.context < 1:
            raise ConfigError(f"Invalid decoder shape: {self}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"Decoder width {self.embed_dim} is not divisible by {self.heads} heads")

    @classmethod
    def from_pipeline_config(cls, pipeline_config):
        section = pipeline_config['decoder']
        return cls(
            embed_dim=int(pipeline_config['encoder']['projection_dim']),
            layers=int(section['layers']),
            heads=int(section['heads']),
            context=int(section['context']),
            trainable=bool(section['trainable']),
            max_new_tokens=int(section['max_new_tokens']),
            head_hidden=int(section['head_hidden']),
        )


@dataclass
class Answer:
    kind: str
    tokens: Optional[list] = None
    text: Optional[str] = None
    p_yes: Optional[float] = None
    p_no: Optional[float] = None
    scalar: Optional[float] = None

    def score(self):
        """A single number for metrics: P(YES), the regression value, or 1/0 for a parsed yes/no."""
        if self.kind == 'token_distribution':
            return self.p_yes
        if self.kind == 'mlp_head':
            return self.scalar
        return 1.0 if self.tokens and self.tokens[0] == YES else 0.0


def positional_encoding(start, count, dim):
    positions = np.arange(start, start + count, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2, dtype=np.float64) / dim))
    table = np.zeros((count, dim))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[:dim // 2])
    return table


class Decoder:
    """
    Token embedding, ``layers`` residual blocks of causal multi-head attention and a ReLU MLP,
    and an untied unembedding. The decoder weights (``decoder.*``) are frozen unless ``trainable``; the regression
    head (``head.*``) always trains.
    """

    def __init__(self, store, vocab_size, cfg):
        self.store = store
        self.vocab_size = vocab_size
        self.cfg = cfg
        d = cfg.embed_dim
        std = 1.0 / math.sqrt(d)
        store.get_or_create(f'{DECODER_PREFIX}embed', (vocab_size, d), std=1.0)
        for layer in range(cfg.layers):
            for name in ('wq', 'wk', 'wv', 'wo'):
                store.get_or_create(f'{DECODER_PREFIX}{layer}.{name}', (d, d), std=std)
            store.get_or_create(f'{DECODER_PREFIX}{layer}.mlp.w1', (d, 4 * d), std=std)
            store.get_or_create(f'{DECODER_PREFIX}{layer}.mlp.b1', (4 * d,))
            store.get_or_create(f'{DECODER_PREFIX}{layer}.mlp.w2', (4 * d, d), std=1.0 / math.sqrt(4 * d))
            store.get_or_create(f'{DECODER_PREFIX}{layer}.mlp.b2', (d,))
        store.get_or_create(f'{DECODER_PREFIX}unembed', (d, vocab_size), std=std)
        store.get_or_create(f'{HEAD_PREFIX}w1', (d, cfg.head_hidden), std=std)
        store.get_or_create(f'{HEAD_PREFIX}b1', (cfg.head_hidden,))
        store.get_or_create(f'{HEAD_PREFIX}w2', (cfg.head_hidden, 1))
        store.get_or_create(f'{HEAD_PREFIX}b2', (1,))
        if not cfg.trainable:
            store.freeze([DECODER_PREFIX])

    def _p(self, name):
        return self.store[f'{DECODER_PREFIX}{name}']

    # inputs
    def embed_ids(self, ids, start=0):
        ids = list(ids)
        rows = diff.take(self._p('embed'), np.array(ids, dtype=np.int64).reshape(-1))
        return rows + diff.constant(positional_encoding(start, len(ids), self.cfg.embed_dim))

    def embed_text(self, ids):
        """h_text: token embeddings plus sinusoidal positions, ``len(ids) × embed_dim``."""
        return self.embed_ids(ids, 0)

    def prompt_rows(self, prompt):
        rows = []
        for slot in prompt.slots:
            if slot.kind in ('vector', 'pooled'):
                if slot.vector.shape != (self.cfg.embed_dim,):
                    raise ShapeMismatch(f"Prompt vector has shape {slot.vector.shape}, decoder width is {self.cfg.embed_dim}")
                rows.append(diff.reshape(slot.vector, (1, self.cfg.embed_dim)))
            else:
                rows.append(diff.take(self._p('embed'), [OPEN if slot.kind == 'open' else CLOSE]))
        return rows

    def _sequence(self, prompt, h_text, extra=None):
        parts = self.prompt_rows(prompt) + [h_text]
        if extra is not None:
            parts.append(extra)
        length = sum(p.shape[0] for p in parts)
        if length > self.cfg.context:
            raise ContextOverflow(f"Sequence of {length} positions exceeds the context of {self.cfg.context}")
        if length == 0:
            raise ShapeMismatch("Decoder input is empty")
        return diff.concat(parts, axis=0)

    # network
    def hidden_states(self, x):
        heads = self.cfg.heads
        for layer in range(self.cfg.layers):
            q = diff.matmul(x, self._p(f'{layer}.wq'))
            k = diff.matmul(x, self._p(f'{layer}.wk'))
            v = diff.matmul(x, self._p(f'{layer}.wv'))
            x = x + diff.matmul(diff.causal_attention(q, k, v, heads), self._p(f'{layer}.wo'))
            hidden = diff.relu(diff.matmul(x, self._p(f'{layer}.mlp.w1')) + self._p(f'{layer}.mlp.b1'))
            x = x + diff.matmul(hidden, self._p(f'{layer}.mlp.w2')) + self._p(f'{layer}.mlp.b2')
        return x

    def logits(self, prompt, h_text, extra=None):
        return diff.matmul(self.hidden_states(self._sequence(prompt, h_text, extra)), self._p('unembed'))

    def yes_no_log_probs(self, prompt, h_text):
        """log [P(YES), P(NO)] from a single next-token step, softmax restricted to the two ids."""
        last = self.hidden_states(self._sequence(prompt, h_text))[-1]
        pair = diff.matmul(last, diff.getitem(self._p('unembed'), (slice(None), [YES, NO])))
        return diff.log_softmax(pair)

    def regression(self, prompt, h_text):
        last = self.hidden_states(self._sequence(prompt, h_text))[-1]
        hidden = diff.relu(diff.matmul(last, self.store[f'{HEAD_PREFIX}w1']) + self.store[f'{HEAD_PREFIX}b1'])
        return (diff.matmul(hidden, self.store[f'{HEAD_PREFIX}w2']) + self.store[f'{HEAD_PREFIX}b2'])[0]

    def teacher_forced_loss(self, prompt, h_text, target):
        """
        Mean next-token negative log-likelihood of ``target`` given the graph prompt followed by ``h_text``.

        Target token j is predicted from the position just before it; target positions continue
        the text positions.
        """
        target = list(target)
        if not target:
            raise ValueError("Teacher forcing needs a nonempty target")
        n_text = h_text.shape[0]
        extra = self.embed_ids(target[:-1], n_text) if len(target) > 1 else None
        logits = self.logits(prompt, h_text, extra)
        first = logits.shape[0] - len(target)
        log_probs = diff.log_softmax(logits[first:])
        picked = log_probs[(np.arange(len(target)), np.array(target))]
        return -diff.mean(picked)

    def greedy(self, prompt, h_text, max_new_tokens=None):
        limit = self.cfg.max_new_tokens if max_new_tokens is None else max_new_tokens
        n_text = h_text.shape[0]
        generated = []
        for _ in range(limit):
            extra = self.embed_ids(generated, n_text) if generated else None
            logits = self.logits(prompt, h_text, extra)
            token = int(np.argmax(logits.data[-1]))
            if token == EOS:
                break
            generated.append(token)
        return generated

    def decode(self, prompt, h_text, strategy, vocab=None):
        """
        Answer with one of the strategies.

        :raises ContextOverflow: If the prompt plus text exceed the context cap.
        """
        if strategy == 'token_distribution':
            p_yes = float(np.exp(self.yes_no_log_probs(prompt, h_text).data[0]))
            return Answer(strategy, p_yes=p_yes, p_no=1.0 - p_yes)
        if strategy == 'mlp_head':
            return Answer(strategy, scalar=self.regression(prompt, h_text).item())
        if strategy == 'plain_text':
            tokens = self.greedy(prompt, h_text)
            return Answer(strategy, tokens=tokens, text=vocab.decode(tokens) if vocab else None)
        raise ConfigError(f"Unknown answer strategy '{strategy}', expected one of {STRATEGIES}")
