import collections
import collections.abc
import concurrent.futures
import hashlib
import json
import re
import threading

import numpy as np

from pyslim.llm import EndpointError, TransportError, make_client, post_json
from pyslim.prompts import rationale_step_text
from pyslim.utils import records_read


DEFAULT_DIMENSION = 768
SIGNIFICANT_DIGITS = 9

TOKEN_REGEX = re.compile(r'\w+', re.UNICODE)


class EncodeError(ValueError):
    pass


class StoreError(ValueError):

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = 'line {}: {}'.format(line_number, message)
        super().__init__(message)
        self.line_number = line_number


class DimensionError(ValueError):
    pass


def item_key(item_id):
    return 'item:{}'.format(item_id)


def user_key(user):
    return 'user:{}'.format(user)


def quantize(values):
    return np.array([float('{:.{}g}'.format(value, SIGNIFICANT_DIGITS)) for value in values],
                    dtype=np.float64)


class EmbeddingVector(object):

    def __init__(self, key, values):
        values = np.asarray(values, dtype=np.float64)
        assert values.ndim == 1
        if not np.all(np.isfinite(values)):
            raise EncodeError('non-finite embedding for {!r}'.format(key))
        self.key = key
        self.values = values

    @property
    def dimension(self):
        return len(self.values)

    def __repr__(self):
        return 'EmbeddingVector({!r}, dimension={})'.format(self.key, self.dimension)


class HashEncoderConfig(object):

    def __init__(self, dimension=DEFAULT_DIMENSION, ngram_range=(1, 2), seed=0):
        dimension = int(dimension)
        low, high = (int(n) for n in ngram_range)
        if dimension < 8:
            raise ValueError('hash encoder dimension must be at least 8: {!r}'.format(dimension))
        if not 1 <= low <= high:
            raise ValueError('invalid n-gram range: {!r}'.format(ngram_range))
        self.dimension = dimension
        self.ngram_range = (low, high)
        self.seed = int(seed)

    def as_dict(self):
        return {'dimension': self.dimension, 'ngram_range': list(self.ngram_range), 'seed': self.seed}


def text_ngrams(text, ngram_range):
    tokens = TOKEN_REGEX.findall(text.strip().lower())
    low, high = ngram_range
    for n in range(low, high + 1):
        for start in range(len(tokens) - n + 1):
            yield ' '.join(tokens[start:(start + n)])


def _hash_ngram(seed, gram):
    digest = hashlib.blake2b('{}\x00{}'.format(seed, gram).encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little')


def encode_text_hash(cfg, text, key=None):
    if text is None or not text.strip():
        raise EncodeError('cannot encode empty text')

    values = np.zeros(cfg.dimension, dtype=np.float64)
    for gram in text_ngrams(text, cfg.ngram_range):
        code = _hash_ngram(cfg.seed, gram)
        sign = -1.0 if (code >> 63) & 1 else 1.0
        values[code % cfg.dimension] += sign

    norm = np.linalg.norm(values)
    if norm == 0:
        raise EncodeError('text has no hashable tokens: {!r}'.format(text))
    return EmbeddingVector(key, values / norm)


def cosine_similarity(a, b):
    a = a.values if isinstance(a, EmbeddingVector) else np.asarray(a, dtype=np.float64)
    b = b.values if isinstance(b, EmbeddingVector) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError('dimension mismatch: {} vs {}'.format(a.shape, b.shape))
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        raise DimensionError('cosine similarity of a zero vector')
    value = float(np.dot(a, b) / (norm_a * norm_b))
    return min(1.0, max(-1.0, value))


class EmbeddingStore(object):

    def __init__(self, dimension=None, provenance='hash'):
        self.dimension = dimension
        self.provenance = provenance
        self._vectors = collections.OrderedDict()

    def add(self, key, values, line_number=None):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise StoreError('vector for {!r} is not one-dimensional'.format(key), line_number)
        if not np.all(np.isfinite(values)):
            raise StoreError('non-finite vector for {!r}'.format(key), line_number)
        if self.dimension is None:
            self.dimension = len(values)
        elif len(values) != self.dimension:
            raise StoreError('dimension {} differs from store dimension {}'.format(len(values), self.dimension),
                             line_number)
        if key in self._vectors:
            raise StoreError('duplicate key {!r}'.format(key), line_number)
        self._vectors[key] = quantize(values)

    def __len__(self):
        return len(self._vectors)

    def __contains__(self, key):
        return key in self._vectors

    def __iter__(self):
        yield from self._vectors

    def __getitem__(self, key):
        return self._vectors[key]

    def get(self, key, default=None):
        return self._vectors.get(key, default)

    def keys(self):
        return list(self._vectors)

    def vector(self, key):
        return EmbeddingVector(key, self._vectors[key])


def save_embedding_store(store, path):
    with open(path, 'wt', encoding='utf-8', newline='\n') as stream:
        for key in store:
            values = ', '.join('{:.{}g}'.format(value, SIGNIFICANT_DIGITS) for value in store[key])
            stream.write('{{"key": {}, "vector": [{}]}}\n'.format(json.dumps(key, ensure_ascii=False), values))
    return len(store)


def load_embedding_store(path):
    store = EmbeddingStore(provenance='file')
    with open(path, 'rt', encoding='utf-8') as stream:
        for line_number, record in records_read(stream, path):
            try:
                key = record['key']
                vector = record['vector']
            except KeyError as error:
                raise StoreError('missing key {!s}'.format(error), line_number)
            store.add(key, vector, line_number)
    return store


def fetch_embeddings_remote(cfg, texts, batch_size=100, concurrency=1, client=None):
    """Returns ``(vectors, errors)``; failed inputs have ``None`` vectors and
    an ``(index, message)`` entry in ``errors``. A failed batch only fails its
    own inputs; the remote error is raised when every batch failed."""
    batch_size = int(batch_size)
    assert batch_size >= 1
    vectors = [None] * len(texts)
    errors = []

    valid = []
    for index, text in enumerate(texts):
        if text is None or not text.strip():
            errors.append((index, 'empty text'))
        else:
            valid.append(index)
    batches = [valid[start:(start + batch_size)] for start in range(0, len(valid), batch_size)]

    owned = client is None
    if owned:
        client = make_client(cfg)

    failures = []
    lock = threading.Lock()

    def work(batch):
        try:
            fetch_batch(batch)
        except (EndpointError, TransportError) as error:
            with lock:
                failures.append(error)
                errors.extend((index, str(error)) for index in batch)

    def fetch_batch(batch):
        payload = {'model': cfg.model_name, 'input': [texts[index] for index in batch]}
        body, _ = post_json(cfg, 'embeddings', payload, client)
        try:
            data = sorted(body['data'], key=lambda entry: entry['index'])
            embeddings = [entry['embedding'] for entry in data]
        except (KeyError, TypeError):
            raise EndpointError(200, json.dumps(body)[:200])
        if len(embeddings) != len(batch):
            raise EndpointError(200, 'expected {} embeddings, got {}'.format(len(batch), len(embeddings)))
        for index, embedding in zip(batch, embeddings):
            vectors[index] = EmbeddingVector(None, embedding)

    try:
        with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, int(concurrency))) as executor:
            for future in [executor.submit(work, batch) for batch in batches]:
                future.result()
    finally:
        if owned:
            client.close()

    if batches and len(failures) == len(batches):
        raise failures[0]
    errors.sort()
    return vectors, errors


class HashProvider(object):

    provenance = 'hash'

    def __init__(self, config=None):
        self.config = config or HashEncoderConfig()

    def embed(self, entries):
        return [encode_text_hash(self.config, text, key).values for key, text in entries]


class RemoteProvider(object):

    provenance = 'remote'

    def __init__(self, endpoint, batch_size=100, concurrency=1, client=None):
        self.endpoint = endpoint
        self.batch_size = batch_size
        self.concurrency = concurrency
        self.client = client

    def embed(self, entries):
        texts = [text for _, text in entries]
        vectors, errors = fetch_embeddings_remote(self.endpoint, texts, self.batch_size,
                                                  self.concurrency, self.client)
        if errors:
            index, message = errors[0]
            raise EncodeError('{} texts could not be embedded; first {!r}: {}'
                              .format(len(errors), entries[index][0], message))
        return [vector.values for vector in vectors]


class FileProvider(object):

    provenance = 'file'

    def __init__(self, store):
        self.store = store

    def embed(self, entries):
        return [self.store[key] for key, _ in entries]


def item_text(item):
    return ' '.join(field for field in (item.title, item.category, item.brand) if field)


def embed_items_and_rationales(items, rationales, provider, step='all'):
    if isinstance(items, collections.abc.Mapping):
        items = [items[key] for key in sorted(items)]
    entries = [(item_key(item.id), item_text(item)) for item in items]
    entries += [(user_key(rationale.user), rationale_step_text(rationale, step))
                for rationale in sorted(rationales, key=lambda rationale: rationale.user)]

    store = EmbeddingStore(provenance=provider.provenance)
    for (key, _), values in zip(entries, provider.embed(entries)):
        store.add(key, values)
    return store
