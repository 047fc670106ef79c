"""Tokenizer and vocabulary for the toy decoder.

Vocab file format: UTF-8, one token per line, line number (from 0) is the token id. The first
nine lines are always the reserved block::

    0 [pad]   1 [bos]   2 [eos]   3 [mask]   4 [open]   5 [close]   6 yes   7 no   8 [unk]
"""
import logging
import re

from .errors import SchemaMismatch

logger = logging.getLogger('rel2prompt')

RESERVED = ('[pad]', '[bos]', '[eos]', '[mask]', '[open]', '[close]', 'yes', 'no', '[unk]')
PAD, BOS, EOS, MASK, OPEN, CLOSE, YES, NO, UNK = range(len(RESERVED))

TOKEN_PATTERN = re.compile(r'\[\w+\]|-?\d+(?:\.\d+)?(?:e[+-]?\d+)?|\w+|[^\w\s]')


def tokenize(text):
    """Lowercase, then split into bracketed specials, numbers, words and single punctuation marks."""
    return TOKEN_PATTERN.findall(str(text).lower())


class Vocab:

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise SchemaMismatch(f"Vocab must start with the reserved block {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise SchemaMismatch("Vocab tokens must be unique")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.ids

    @classmethod
    def build(cls, texts):
        """Reserved block, then every token and every character seen in ``texts``, sorted."""
        seen = set()
        for text in texts:
            for token in tokenize(text):
                seen.add(token)
                seen.update(token)
        extra = sorted(seen - set(RESERVED))
        vocab = cls(list(RESERVED) + extra)
        logger.info(f"Built vocab with {len(vocab)} tokens")
        return vocab

    def token_id(self, token):
        return self.ids.get(token, UNK)

    def encode_tokens(self, tokens):
        ids = []
        for token in tokens:
            if token in self.ids:
                ids.append(self.ids[token])
            else:
                # character fallback keeps values outside the vocab readable
                ids.extend(self.ids.get(ch, UNK) for ch in token)
        return ids

    def encode(self, text):
        return self.encode_tokens(tokenize(text))

    def decode(self, ids):
        words = [self.tokens[i] for i in ids if i not in (PAD, BOS, EOS)]
        return re.sub(r' ([,.?!:;])', r'\1', ' '.join(words))

    def save(self, path):
        with open(path, 'w', encoding='utf-8') as file:
            for token in self.tokens:
                file.write(token + '\n')
        logger.info(f"Wrote vocab of {len(self)} tokens to {path}")

    @classmethod
    def load(cls, path):
        with open(path, 'r', encoding='utf-8') as file:
            return cls([line.rstrip('\n') for line in file])
