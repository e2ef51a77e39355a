import collections
import json
import logging
import math

import numpy as np

from pyslim.backbones import BACKBONES, get_backbone, sigmoid, uniform_init
from pyslim.embed import DimensionError, item_key, user_key
from pyslim.utils import (BinaryResource, canonical_json, stream_pack, stream_pack_text, stream_read,
                          stream_unpack, stream_unpack_text, stream_write)


MODES = ('id', 'id-text', 'slim', 'agnostic')
MODE_ALIASES = {'id-only': 'id'}
PAIRS = ('all-prefixes', 'last-only')
BACKBONE_INPUTS = ('fused', 'id')
OPTIMIZERS = ('sgd', 'adam')

FUSED_MODES = ('id-text', 'slim')
ITEM_TEXT_MODES = ('id-text', 'slim', 'agnostic')
RATIONALE_MODES = ('slim', 'agnostic')

GRADIENT_STEP = 1e-5
RELATIVE_FLOOR = 1e-8
PROBABILITY_FLOOR = float(np.finfo(np.float64).eps)


Pair = collections.namedtuple('Pair', 'user inputs target label')


class OutOfVocabularyError(KeyError):

    def __init__(self, item):
        super().__init__(item)
        self.item = item

    def __str__(self):
        return 'item {!r} has no ID embedding'.format(self.item)


class MissingEmbeddingError(KeyError):

    def __init__(self, key):
        super().__init__(key)
        self.key = key

    def __str__(self):
        return 'missing embedding {!r}'.format(self.key)


class ModelConfig(object):

    FIELDS = ('mode', 'backbone', 'embed_dim', 'text_dim', 'max_seq_len', 'lr', 'epochs', 'negatives',
              'batch_size', 'seed', 'pairs', 'backbone_input', 'optimizer')

    def __init__(self, mode='slim', backbone='mean', embed_dim=64, text_dim=None, max_seq_len=50, lr=0.01,
                 epochs=10, negatives=1, batch_size=64, seed=0, pairs='all-prefixes', backbone_input='fused',
                 optimizer='sgd'):
        mode = MODE_ALIASES.get(mode, mode)
        if mode not in MODES:
            raise ValueError('unknown mode: {!r}'.format(mode))
        if backbone not in BACKBONES:
            raise ValueError('unknown backbone: {!r}'.format(backbone))
        if pairs not in PAIRS:
            raise ValueError('unknown pairs policy: {!r}'.format(pairs))
        if backbone_input not in BACKBONE_INPUTS:
            raise ValueError('unknown backbone input: {!r}'.format(backbone_input))
        if optimizer not in OPTIMIZERS:
            raise ValueError('unknown optimizer: {!r}'.format(optimizer))

        embed_dim = int(embed_dim)
        max_seq_len = int(max_seq_len)
        epochs = int(epochs)
        negatives = int(negatives)
        batch_size = int(batch_size)
        lr = float(lr)
        if embed_dim < 1:
            raise ValueError('embed_dim must be positive: {!r}'.format(embed_dim))
        if max_seq_len < 1:
            raise ValueError('max_seq_len must be positive: {!r}'.format(max_seq_len))
        if text_dim is not None and int(text_dim) < 1:
            raise ValueError('text_dim must be positive: {!r}'.format(text_dim))
        if epochs < 0 or negatives < 0 or batch_size < 1 or lr < 0:
            raise ValueError('invalid training schedule')

        self.mode = mode
        self.backbone = backbone
        self.embed_dim = embed_dim
        self.text_dim = None if text_dim is None else int(text_dim)
        self.max_seq_len = max_seq_len
        self.lr = lr
        self.epochs = epochs
        self.negatives = negatives
        self.batch_size = batch_size
        self.seed = int(seed)
        self.pairs = pairs
        self.backbone_input = backbone_input
        self.optimizer = optimizer

    def as_dict(self):
        return collections.OrderedDict((name, getattr(self, name)) for name in self.FIELDS)

    @classmethod
    def from_dict(cls, fields):
        return cls(**{name: fields[name] for name in cls.FIELDS if name in fields})

    def replace(self, **changes):
        fields = self.as_dict()
        fields.update(changes)
        return type(self).from_dict(fields)

    def __eq__(self, other):
        return isinstance(other, ModelConfig) and self.as_dict() == other.as_dict()

    def __repr__(self):
        return 'ModelConfig({})'.format(', '.join('{}={!r}'.format(*field) for field in self.as_dict().items()))

    @property
    def uses_item_text(self):
        return self.mode in ITEM_TEXT_MODES

    @property
    def uses_rationale(self):
        return self.mode in RATIONALE_MODES

    @property
    def uses_backbone(self):
        return self.mode != 'agnostic'

    @property
    def feeds_id_rows(self):
        return self.mode in FUSED_MODES and self.backbone_input == 'id'


class ParameterSet(object):

    def __init__(self, arrays, item_index):
        self.arrays = collections.OrderedDict((name, np.ascontiguousarray(array, dtype=np.float64))
                                              for name, array in arrays.items())
        self.item_index = tuple(item_index)
        self.item_lookup = {item: index for index, item in enumerate(self.item_index)}

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, array):
        assert array.shape == self.arrays[name].shape
        self.arrays[name] = array

    def __contains__(self, name):
        return name in self.arrays

    def __iter__(self):
        yield from self.arrays

    def __len__(self):
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def shapes(self):
        return collections.OrderedDict((name, list(array.shape)) for name, array in self.arrays.items())

    def copy(self):
        return ParameterSet(collections.OrderedDict((name, array.copy()) for name, array in self.arrays.items()),
                            self.item_index)

    def zeros_like(self):
        return ParameterSet(collections.OrderedDict((name, np.zeros_like(array))
                                                    for name, array in self.arrays.items()),
                            self.item_index)

    def is_finite(self):
        return all(np.all(np.isfinite(array)) for array in self.arrays.values())

    def equals(self, other):
        return (self.item_index == other.item_index and list(self.arrays) == list(other.arrays) and
                all(np.array_equal(self.arrays[name], other.arrays[name]) for name in self.arrays))


def init_parameters(config, item_index, rng):
    if config.uses_item_text and config.text_dim is None:
        raise ValueError('text_dim is required for mode {!r}'.format(config.mode))
    d = config.embed_dim
    d_t = config.text_dim
    arrays = collections.OrderedDict()
    arrays['item_id'] = uniform_init(rng, (len(item_index), d), d)
    if config.uses_backbone:
        arrays.update(get_backbone(config.backbone).init_params(rng, d, config.max_seq_len))
    if config.mode in FUSED_MODES:
        arrays['W_l'] = uniform_init(rng, (d, d_t), d_t)
        arrays['b_l'] = np.zeros(d)
        arrays['W_f'] = uniform_init(rng, (d, 2 * d), 2 * d)
        arrays['b_f'] = np.zeros(d)
    if config.mode == 'agnostic':
        arrays['W_t'] = uniform_init(rng, (d, d_t), d_t)
        arrays['b_t'] = np.zeros(d)
    return ParameterSet(arrays, item_index)


class ModelInputs(object):
    """Text vectors needed by a mode, aligned with the catalog item index."""

    def __init__(self, item_index, item_text=None, rationales=None):
        self.item_index = tuple(item_index)
        self.item_text = None if item_text is None else np.asarray(item_text, dtype=np.float64)
        self.rationales = dict(rationales or {})
        if self.item_text is not None:
            assert self.item_text.shape[0] == len(self.item_index)

    @property
    def text_dim(self):
        if self.item_text is not None:
            return self.item_text.shape[1]
        for vector in self.rationales.values():
            return len(vector)
        return None

    def rationale(self, user):
        try:
            return self.rationales[user]
        except KeyError:
            raise MissingEmbeddingError(user_key(user))

    @classmethod
    def from_store(cls, config, item_index, store, users=()):
        item_text = None
        if config.uses_item_text:
            item_text = np.array([store_vector(store, item_key(item)) for item in item_index])
        rationales = {}
        if config.uses_rationale:
            for user in users:
                rationales[user] = store_vector(store, user_key(user))
        return cls(item_index, item_text, rationales)


def store_vector(store, key):
    if store is None:
        raise MissingEmbeddingError(key)
    vector = store.get(key)
    if vector is None:
        raise MissingEmbeddingError(key)
    return vector


def encode_items(params, config, item_text):
    """Returns ``(reps, joined)`` for every catalog item; ``joined`` is the
    fusion layer input, kept for the backward pass."""
    if config.mode == 'id':
        return params['item_id'], None
    if config.mode == 'agnostic':
        return item_text @ params['W_t'].T + params['b_t'], None
    projected = item_text @ params['W_l'].T + params['b_l']
    joined = np.hstack([projected, params['item_id']])
    return joined @ params['W_f'].T + params['b_f'], joined


def item_encode(params, config, item, text_vec=None):
    index = params.item_lookup.get(item)
    if config.mode == 'id':
        if index is None:
            raise OutOfVocabularyError(item)
        return params['item_id'][index].copy()

    if text_vec is None:
        raise MissingEmbeddingError(item_key(item))
    text_vec = np.asarray(text_vec, dtype=np.float64)
    if config.mode == 'agnostic':
        return params['W_t'] @ text_vec + params['b_t']

    # cold items fuse their text with a zero ID row
    id_row = params['item_id'][index] if index is not None else np.zeros(config.embed_dim)
    joined = np.concatenate([params['W_l'] @ text_vec + params['b_l'], id_row])
    return params['W_f'] @ joined + params['b_f']


def _sequence_forward(params, config, inputs, rationale):
    if config.mode == 'agnostic':
        return params['W_t'] @ rationale + params['b_t'], None

    output, backbone_cache = get_backbone(config.backbone).forward(params, inputs)
    if config.mode != 'slim':
        return output, (backbone_cache, None)

    joined = np.concatenate([params['W_l'] @ rationale + params['b_l'], output])
    return params['W_f'] @ joined + params['b_f'], (backbone_cache, joined)


def _sequence_backward(params, config, cache, d_output, rationale, grads):
    if config.mode == 'agnostic':
        grads['W_t'] += np.outer(d_output, rationale)
        grads['b_t'] += d_output
        return None

    backbone_cache, joined = cache
    if config.mode == 'slim':
        grads['W_f'] += np.outer(d_output, joined)
        grads['b_f'] += d_output
        d_joined = params['W_f'].T @ d_output
        d_projected = d_joined[:config.embed_dim]
        grads['W_l'] += np.outer(d_projected, rationale)
        grads['b_l'] += d_projected
        d_output = d_joined[config.embed_dim:]

    backbone_grads, d_inputs = get_backbone(config.backbone).backward(params, backbone_cache, d_output)
    for name, grad in backbone_grads.items():
        grads[name] += grad
    return d_inputs


def _items_backward(params, config, item_text, joined, d_items, grads):
    if config.mode == 'id':
        grads['item_id'] += d_items
    elif config.mode == 'agnostic':
        grads['W_t'] += d_items.T @ item_text
        grads['b_t'] += d_items.sum(axis=0)
    else:
        grads['W_f'] += d_items.T @ joined
        grads['b_f'] += d_items.sum(axis=0)
        d_joined = d_items @ params['W_f']
        d_projected = d_joined[:, :config.embed_dim]
        grads['W_l'] += d_projected.T @ item_text
        grads['b_l'] += d_projected.sum(axis=0)
        grads['item_id'] += d_joined[:, config.embed_dim:]


def seq_encode(params, config, item_reps, rationale_vec=None):
    if config.uses_rationale and rationale_vec is None:
        raise MissingEmbeddingError('rationale')
    if config.mode == 'agnostic':
        output, _ = _sequence_forward(params, config, None, np.asarray(rationale_vec, dtype=np.float64))
        return output

    if item_reps is None or not len(item_reps):
        raise ValueError('empty sequence')
    inputs = np.asarray(item_reps, dtype=np.float64)[-config.max_seq_len:]
    rationale = None if rationale_vec is None else np.asarray(rationale_vec, dtype=np.float64)
    output, _ = _sequence_forward(params, config, inputs, rationale)
    return output


def predict_score(s, z):
    s = np.asarray(s, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if s.shape != z.shape:
        raise DimensionError('dimension mismatch: {} vs {}'.format(s.shape, z.shape))
    return float(sigmoid(s @ z))


def bce_loss(probability, label):
    """Loss of a probability clamped to ``[eps, 1 - eps]``; callers holding
    logits use :func:`bce_with_logit`."""
    if label:
        return -math.log(max(probability, PROBABILITY_FLOOR))
    return -math.log1p(-min(probability, 1.0 - PROBABILITY_FLOOR))


def bce_with_logit(logit, label):
    return float(np.logaddexp(0.0, logit) - label * logit)


def pair_losses(params, config, inputs, pairs, backward=True):
    """Per-pair losses, and gradients of their mean when ``backward``."""
    reps, joined = encode_items(params, config, inputs.item_text)
    sources = params['item_id'] if config.feeds_id_rows else reps
    losses = np.empty(len(pairs))
    grads = params.zeros_like() if backward else None
    d_items = np.zeros_like(reps)
    d_sources = d_items if not config.feeds_id_rows else grads['item_id'] if backward else None

    for index, pair in enumerate(pairs):
        rationale = inputs.rationale(pair.user) if config.uses_rationale else None
        sequence = sources[list(pair.inputs)] if config.uses_backbone else None
        output, cache = _sequence_forward(params, config, sequence, rationale)
        target = reps[pair.target]
        logit = float(output @ target)
        losses[index] = bce_with_logit(logit, pair.label)
        if not backward:
            continue

        d_logit = (float(sigmoid(logit)) - pair.label) / len(pairs)
        d_items[pair.target] += d_logit * output
        d_inputs = _sequence_backward(params, config, cache, d_logit * target, rationale, grads)
        if d_inputs is not None:
            np.add.at(d_sources, list(pair.inputs), d_inputs)

    if backward:
        _items_backward(params, config, inputs.item_text, joined, d_items, grads)
    return losses, grads


class SGD(object):

    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for name, grad in grads.items():
            params[name] -= self.lr * grad


class Adam(object):

    def __init__(self, lr, params, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.moments = params.zeros_like()
        self.squares = params.zeros_like()
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, grad in grads.items():
            moment = self.moments[name]
            square = self.squares[name]
            moment *= self.beta1
            moment += (1.0 - self.beta1) * grad
            square *= self.beta2
            square += (1.0 - self.beta2) * grad * grad
            params[name] -= self.lr * (moment / correction1) / (np.sqrt(square / correction2) + self.epsilon)


def make_optimizer(config, params):
    if config.optimizer == 'adam':
        return Adam(config.lr, params)
    return SGD(config.lr)


def build_training_pairs(split, config, item_lookup, rng):
    catalog = np.arange(len(item_lookup))
    pairs = []
    for user, sequence in split.train.items():
        indices = [item_lookup[item] for item in sequence]
        if len(indices) < 2:
            continue
        ends = range(1, len(indices)) if config.pairs == 'all-prefixes' else (len(indices) - 1,)
        pool = np.setdiff1d(catalog, indices)

        for end in ends:
            prefix = tuple(indices[max(0, end - config.max_seq_len):end])
            pairs.append(Pair(user, prefix, indices[end], 1.0))
            if config.negatives and len(pool):
                negatives = rng.choice(pool, size=config.negatives, replace=(len(pool) < config.negatives))
                pairs.extend(Pair(user, prefix, int(negative), 0.0) for negative in negatives)
    return pairs


def train(split, store, config):
    """Returns ``(params, trace)`` where ``trace[e]`` is the mean pair loss of epoch ``e``."""
    logger = logging.getLogger()
    item_index = tuple(sorted(split.items))
    inputs = ModelInputs.from_store(config, item_index, store, split.users)
    if inputs.text_dim is not None:
        if config.text_dim is not None and config.text_dim != inputs.text_dim:
            raise DimensionError('text_dim {} differs from embedding dimension {}'
                                 .format(config.text_dim, inputs.text_dim))
        config = config.replace(text_dim=inputs.text_dim)

    params = init_parameters(config, item_index, np.random.default_rng(config.seed))
    sample_rng = np.random.default_rng([config.seed, 1])
    pairs = build_training_pairs(split, config, params.item_lookup, sample_rng)
    if not pairs:
        raise ValueError('no training pairs: every train sequence is shorter than 2')
    logger.info('Training pairs: %d', len(pairs))

    optimizer = make_optimizer(config, params)
    trace = []
    for epoch in range(config.epochs):
        order = sample_rng.permutation(len(pairs))
        losses = np.empty(len(pairs))
        for start in range(0, len(pairs), config.batch_size):
            batch = order[start:(start + config.batch_size)]
            batch_losses, grads = pair_losses(params, config, inputs, [pairs[index] for index in batch])
            losses[batch] = batch_losses
            optimizer.step(params, grads)
        trace.append(float(np.mean(losses)))
        logger.info('Epoch [%d/%d]: %r', (epoch + 1), config.epochs, trace[-1])
    return params, trace


def grad_check(config, tolerance=1e-4, n_items=7, n_users=3):
    """Largest element-wise relative error between analytic and
    central-difference gradients of a small random model."""
    logger = logging.getLogger()
    if config.embed_dim > 8:
        raise ValueError('gradient check expects embed_dim <= 8')
    rng = np.random.default_rng(config.seed)
    config = config.replace(text_dim=(config.text_dim or 5), max_seq_len=min(config.max_seq_len, 5))

    item_index = tuple('i{}'.format(index) for index in range(n_items))
    users = tuple('u{}'.format(index) for index in range(n_users))
    inputs = ModelInputs(item_index, rng.normal(size=(n_items, config.text_dim)),
                         {user: rng.normal(size=config.text_dim) for user in users})
    params = init_parameters(config, item_index, rng)

    pairs = []
    for user in users:
        length = int(rng.integers(1, config.max_seq_len + 1))
        prefix = tuple(int(index) for index in rng.integers(0, n_items, size=length))
        pairs.append(Pair(user, prefix, int(rng.integers(n_items)), 1.0))
        pairs.append(Pair(user, prefix, int(rng.integers(n_items)), 0.0))

    def loss():
        return float(np.mean(pair_losses(params, config, inputs, pairs, backward=False)[0]))

    _, analytic = pair_losses(params, config, inputs, pairs)
    worst = 0.0
    for name, array in params.items():
        flat = array.reshape(-1)
        numeric = np.zeros(flat.size)
        for index in range(flat.size):
            original = flat[index]
            flat[index] = original + GRADIENT_STEP
            plus = loss()
            flat[index] = original - GRADIENT_STEP
            minus = loss()
            flat[index] = original
            numeric[index] = (plus - minus) / (2 * GRADIENT_STEP)
        gradient = analytic[name].reshape(-1)
        if not flat.size:
            continue
        errors = np.abs(gradient - numeric) / np.maximum(RELATIVE_FLOOR, np.abs(gradient) + np.abs(numeric))
        error = float(errors.max())
        logger.debug('Gradient %s: %g', name, error)
        worst = max(worst, error)

    if worst > tolerance:
        logger.warning('Gradient check %s/%s: %g exceeds %g', config.mode, config.backbone, worst, tolerance)
    return worst


class SequentialRecommender(object):
    """Scores candidate items for a user from a frozen parameter set."""

    def __init__(self, params, config, store=None):
        self.params = params
        self.config = config
        self.store = store
        item_text = None
        if config.uses_item_text:
            item_text = np.array([store_vector(store, item_key(item)) for item in params.item_index])
        self._reps, _ = encode_items(params, config, item_text)

    def item_vector(self, item):
        index = self.params.item_lookup.get(item)
        if index is not None:
            return self._reps[index]
        text_vec = store_vector(self.store, item_key(item)) if self.config.uses_item_text else None
        return item_encode(self.params, self.config, item, text_vec)

    def input_vector(self, item):
        if not self.config.feeds_id_rows:
            return self.item_vector(item)
        index = self.params.item_lookup.get(item)
        if index is None:
            return np.zeros(self.config.embed_dim)
        return self.params['item_id'][index]

    def user_vector(self, user, inputs):
        rationale = store_vector(self.store, user_key(user)) if self.config.uses_rationale else None
        reps = None
        if self.config.uses_backbone:
            reps = [self.input_vector(item) for item in tuple(inputs)[-self.config.max_seq_len:]]
        return seq_encode(self.params, self.config, reps, rationale)

    def score(self, user, inputs, candidates):
        """Logits for ``candidates``; ranking by logit equals ranking by probability."""
        state = self.user_vector(user, inputs)
        return np.array([self.item_vector(item) for item in candidates]) @ state

    def predict(self, user, inputs, candidates):
        return sigmoid(self.score(user, inputs, candidates))


class Checkpoint(BinaryResource):

    MAGIC = b'SLIMCKPT'
    VERSION = 1

    def __init__(self, params, config, trace=(), config_hash=None):
        self.params = params
        self.config = config
        self.trace = [float(loss) for loss in trace]
        self.config_hash = config_hash

    @classmethod
    def from_stream(cls, stream):
        magic = stream_read(stream, len(cls.MAGIC))
        if magic != cls.MAGIC:
            raise ValueError('not a checkpoint: {!r}'.format(magic))
        version = stream_unpack('<H', stream)[0]
        if version != cls.VERSION:
            raise ValueError('unsupported checkpoint version: {}'.format(version))

        header = json.loads(stream_unpack_text(stream))
        arrays = collections.OrderedDict()
        for name, shape in header['sections']:
            section = stream_unpack_text(stream)
            if section != name:
                raise ValueError('expected section {!r}, found {!r}'.format(name, section))
            count = int(np.prod(shape, dtype=np.int64))
            raw = stream_read(stream, count * 8)
            arrays[name] = np.frombuffer(raw, dtype='<f8').astype(np.float64).reshape(shape)

        params = ParameterSet(arrays, header['item_index'])
        return cls(params, ModelConfig.from_dict(header['config']), header['trace'], header['config_hash'])

    def to_stream(self, stream):
        header = {
            'config': self.config.as_dict(),
            'seed': self.config.seed,
            'item_index': list(self.params.item_index),
            'sections': [[name, shape] for name, shape in self.params.shapes().items()],
            'trace': self.trace,
            'config_hash': self.config_hash,
        }
        size = stream_write(stream, self.MAGIC)
        size += stream_pack(stream, '<H', self.VERSION)
        size += stream_pack_text(stream, canonical_json(header))
        for name, array in self.params.items():
            size += stream_pack_text(stream, name)
            size += stream_write(stream, np.ascontiguousarray(array, dtype='<f8').tobytes())
        return size

    def recommender(self, store=None):
        return SequentialRecommender(self.params, self.config, store)


def save_checkpoint(path, checkpoint):
    with open(path, 'wb') as stream:
        return checkpoint.to_stream(stream)


def load_checkpoint(path):
    with open(path, 'rb') as stream:
        return Checkpoint.from_stream(stream)
