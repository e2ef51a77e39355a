import collections
import math
import re

import numpy as np

from pyslim.dataset import BehaviorSequence
from pyslim.llm import prompt_hash
from pyslim.prompts import render_prompt
from pyslim.utils import records_dump, records_load


BOS = 0
UNK = 1
RESERVED_TOKENS = ('<bos>', '<unk>')

PUNCTUATION_REGEX = re.compile(r'[^\w\s]|_', re.UNICODE)


DistillExample = collections.namedtuple('DistillExample', 'user prompt completion')


class DomainError(ValueError):
    pass


class TokenSequence(object):

    def __init__(self, tokens, vocab_size):
        tokens = tuple(int(token) for token in tokens)
        vocab_size = int(vocab_size)
        assert vocab_size > 0
        for token in tokens:
            if not 0 <= token < vocab_size:
                raise ValueError('token id {} outside vocabulary of size {}'.format(token, vocab_size))
        self.tokens = tokens
        self.vocab_size = vocab_size

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        yield from self.tokens

    def __eq__(self, other):
        return isinstance(other, TokenSequence) and self.tokens == other.tokens

    def __repr__(self):
        return 'TokenSequence({!r})'.format(list(self.tokens))

    def transitions(self):
        return zip(self.tokens[:-1], self.tokens[1:])


def words(text):
    return PUNCTUATION_REGEX.sub('', text.lower()).split()


def vocab_size_of(vocab):
    return max(len(RESERVED_TOKENS), max(vocab.values(), default=0) + 1)


def build_vocab(texts):
    found = set()
    for text in texts:
        found.update(words(text))
    vocab = collections.OrderedDict((token, index) for index, token in enumerate(RESERVED_TOKENS))
    for word in sorted(found - set(RESERVED_TOKENS)):
        vocab[word] = len(vocab)
    return vocab


def tokenize(text, vocab):
    tokens = [BOS] + [vocab.get(word, UNK) for word in words(text)]
    return TokenSequence(tokens, vocab_size_of(vocab))


def example_sequence(example, vocab):
    # the chain starts at the prompt's final token, prompt tokens carry no loss
    seed = tokenize(example.prompt, vocab).tokens[-1]
    completion = tokenize(example.completion, vocab).tokens[1:]
    return TokenSequence((seed,) + completion, vocab_size_of(vocab))


class TinyStudentModel(object):

    def __init__(self, vocab, alpha=0.0):
        alpha = float(alpha)
        if alpha < 0:
            raise ValueError('smoothing must be non-negative: {!r}'.format(alpha))
        self.vocab = vocab
        self.alpha = alpha
        self.vocab_size = vocab_size_of(vocab)
        self._counts = collections.defaultdict(collections.Counter)
        self._totals = collections.Counter()
        self._overrides = {}

    def fit(self, sequences):
        for sequence in sequences:
            for previous, current in sequence.transitions():
                self._counts[previous][current] += 1
                self._totals[previous] += 1
        return self

    def prob(self, previous, current):
        override = self._overrides.get(previous)
        if override is not None:
            return float(override[current])
        total = self._totals[previous]
        if total == 0 and self.alpha == 0:
            return 1.0 / self.vocab_size
        count = self._counts[previous][current] if previous in self._counts else 0
        return (count + self.alpha) / (total + self.alpha * self.vocab_size)

    def row(self, previous):
        override = self._overrides.get(previous)
        if override is not None:
            return np.array(override, dtype=np.float64)
        total = self._totals[previous]
        if total == 0 and self.alpha == 0:
            return np.full(self.vocab_size, 1.0 / self.vocab_size)
        row = np.full(self.vocab_size, self.alpha, dtype=np.float64)
        for current, count in self._counts.get(previous, {}).items():
            row[current] += count
        return row / (total + self.alpha * self.vocab_size)

    def with_row(self, previous, probabilities):
        probabilities = np.asarray(probabilities, dtype=np.float64)
        assert probabilities.shape == (self.vocab_size,)
        model = TinyStudentModel(self.vocab, self.alpha)
        model._counts = self._counts
        model._totals = self._totals
        model._overrides = dict(self._overrides)
        model._overrides[previous] = probabilities
        return model

    def observed_contexts(self):
        return sorted(self._totals)


def nll_loss(model, seq):
    if len(seq) < 2:
        raise ValueError('need at least two tokens')
    total = 0.0
    for previous, current in seq.transitions():
        probability = model.prob(previous, current)
        if probability <= 0:
            raise DomainError('zero probability transition {} -> {}'.format(previous, current))
        total -= math.log(probability)
    return total


def train_student_mle(examples, alpha=0.0, vocab=None):
    examples = list(examples)
    if not examples:
        raise ValueError('cannot train on an empty corpus')
    if vocab is None:
        vocab = build_vocab([example.prompt for example in examples] +
                            [example.completion for example in examples])
    model = TinyStudentModel(vocab, alpha)
    return model.fit(example_sequence(example, vocab) for example in examples)


def evaluate_student_nll(model, heldout):
    heldout = list(heldout)
    if not heldout:
        raise ValueError('empty held-out set')
    total = 0.0
    count = 0
    for example in heldout:
        sequence = example_sequence(example, model.vocab)
        if len(sequence) < 2:
            continue
        total += nll_loss(model, sequence)
        count += len(sequence) - 1
    return total / count if count else 0.0


def uniform_nll(model):
    return math.log(model.vocab_size)


def split_holdout(examples, fraction, seed=0):
    examples = sorted(examples, key=lambda example: example.user)
    count = int(round(len(examples) * float(fraction)))
    if count <= 0:
        return examples, []
    count = min(count, len(examples) - 1)
    indices = {int(index) for index in np.random.default_rng(seed).choice(len(examples), size=count, replace=False)}
    train = [example for index, example in enumerate(examples) if index not in indices]
    heldout = [example for index, example in enumerate(examples) if index in indices]
    return train, heldout


def build_distill_examples(split, cache, teacher_model, teacher_template, student_template, limit=None):
    examples = []
    for user, (inputs, _) in split.test.items():
        sequence = BehaviorSequence(user, inputs)
        teacher_prompt = render_prompt(teacher_template, sequence, split.items)
        rationale = cache.get(user, prompt_hash(teacher_prompt.text), teacher_model)
        if rationale is None:
            continue
        student_prompt = render_prompt(student_template, sequence, split.items)
        examples.append(DistillExample(user, student_prompt.text, rationale.raw))
        if limit is not None and len(examples) >= limit:
            break
    return examples


def export_finetune_dataset(examples, path):
    examples = sorted(examples, key=lambda example: example.user)
    if not examples:
        raise ValueError('no distillation examples to export')
    for example in examples:
        if not example.prompt or not example.completion:
            raise ValueError('empty prompt or completion for user {!r}'.format(example.user))
    return records_dump(path, ({'prompt': example.prompt, 'completion': example.completion}
                               for example in examples))


def read_finetune_dataset(path):
    return [(record['prompt'], record['completion']) for record in records_load(path)]
