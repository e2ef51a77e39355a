import collections
import collections.abc
import types

import numpy as np

from pyslim.utils import RecordError, records_read


MIN_SEQUENCE_LENGTH = 3


Item = collections.namedtuple('Item', 'id title category brand')
Item.__new__.__defaults__ = (None, None)

Interaction = collections.namedtuple('Interaction', 'user item timestamp')

BehaviorSequence = collections.namedtuple('BehaviorSequence', 'user items')


class DatasetParseError(ValueError):

    def __init__(self, path, line_number, message):
        super().__init__('{}:{}: {}'.format(path, line_number, message))
        self.path = path
        self.line_number = line_number


class ReferentialError(KeyError):

    def __init__(self, item, line_number=None):
        super().__init__(item)
        self.item = item
        self.line_number = line_number

    def __str__(self):
        if self.line_number is None:
            return 'unknown item {!r}'.format(self.item)
        return 'unknown item {!r} at line {}'.format(self.item, self.line_number)


class SizeError(ValueError):
    pass


class InteractionDataset(object):

    def __init__(self, items, interactions):
        if not isinstance(items, collections.abc.Mapping):
            items = collections.OrderedDict((item.id, item) for item in items)
        interactions = tuple(interactions)
        for interaction in interactions:
            if interaction.item not in items:
                raise ReferentialError(interaction.item)

        self._items = types.MappingProxyType(dict(items))
        self._interactions = interactions
        self._users = None

    @property
    def items(self):
        return self._items

    @property
    def interactions(self):
        return self._interactions

    @property
    def users(self):
        if self._users is None:
            self._users = tuple(sorted({interaction.user for interaction in self._interactions}))
        return self._users

    def __len__(self):
        return len(self._interactions)

    def user_counts(self):
        return collections.Counter(interaction.user for interaction in self._interactions)

    def item_counts(self):
        return collections.Counter(interaction.item for interaction in self._interactions)

    def sample_users(self, n, seed):
        users = self.users
        n = int(n)
        if n >= len(users):
            return self
        chosen = np.random.default_rng(seed).choice(len(users), size=n, replace=False)
        kept = {users[index] for index in chosen}
        return InteractionDataset(self._items, (interaction for interaction in self._interactions
                                                if interaction.user in kept))

    def restrict_items(self):
        used = {interaction.item for interaction in self._interactions}
        items = collections.OrderedDict((key, item) for key, item in self._items.items() if key in used)
        return InteractionDataset(items, self._interactions)


class SplitDataset(object):

    def __init__(self, train, val, test, items=(), dropped=0):
        self.train = collections.OrderedDict(sorted(train.items()))
        self.val = collections.OrderedDict(sorted(val.items()))
        self.test = collections.OrderedDict(sorted(test.items()))
        if not isinstance(items, collections.abc.Mapping):
            items = collections.OrderedDict((item.id, item) for item in items)
        self.items = types.MappingProxyType(dict(items))
        self.dropped = dropped
        assert set(self.train) == set(self.val) == set(self.test)

    @property
    def users(self):
        return tuple(self.test)

    def history(self, user):
        inputs, target = self.test[user]
        return set(inputs) | {target}

    def sequence_lengths(self):
        return collections.OrderedDict((user, len(inputs) + 1) for user, (inputs, _) in self.test.items())

    def train_interaction_count(self):
        return sum(len(sequence) for sequence in self.train.values())


def _parse_item(record, path, line_number):
    try:
        item_id = str(record['item'])
        title = record['title']
    except KeyError as error:
        raise DatasetParseError(path, line_number, 'missing key {!s}'.format(error))
    if not isinstance(title, str) or not title.strip():
        raise DatasetParseError(path, line_number, 'empty title')
    category = record.get('category') or None
    brand = record.get('brand') or None
    return Item(item_id, title, category, brand)


def _parse_interaction(record, path, line_number):
    try:
        user = str(record['user'])
        item = str(record['item'])
        timestamp = record['timestamp']
    except KeyError as error:
        raise DatasetParseError(path, line_number, 'missing key {!s}'.format(error))
    if isinstance(timestamp, bool):
        raise DatasetParseError(path, line_number, 'timestamp is not an integer')
    try:
        if isinstance(timestamp, float) and not timestamp.is_integer():
            raise ValueError(timestamp)
        timestamp = int(timestamp)
    except (TypeError, ValueError):
        raise DatasetParseError(path, line_number, 'timestamp is not an integer: {!r}'.format(timestamp))
    return Interaction(user, item, timestamp)


def _read_records(path):
    with open(path, 'rt', encoding='utf-8') as stream:
        try:
            yield from records_read(stream, path)
        except RecordError as error:
            raise DatasetParseError(path, error.line_number, 'malformed record')


def load_items(path):
    items = collections.OrderedDict()
    for line_number, record in _read_records(path):
        item = _parse_item(record, path, line_number)
        if item.id in items:
            raise DatasetParseError(path, line_number, 'duplicate item {!r}'.format(item.id))
        items[item.id] = item
    return items


def load_dataset(items_path, interactions_path):
    items = load_items(items_path)
    interactions = []
    for line_number, record in _read_records(interactions_path):
        interaction = _parse_interaction(record, interactions_path, line_number)
        if interaction.item not in items:
            raise ReferentialError(interaction.item, line_number)
        interactions.append(interaction)
    return InteractionDataset(items, interactions)


def k_core_filter(ds, k):
    k = int(k)
    if k < 1:
        raise ValueError('k must be positive: {!r}'.format(k))

    interactions = list(ds.interactions)
    while True:
        user_counts = collections.Counter(interaction.user for interaction in interactions)
        item_counts = collections.Counter(interaction.item for interaction in interactions)
        kept = [interaction for interaction in interactions
                if user_counts[interaction.user] >= k and item_counts[interaction.item] >= k]
        if len(kept) == len(interactions):
            break
        interactions = kept

    if len(interactions) == len(ds.interactions):
        return ds
    return InteractionDataset(ds.items, interactions).restrict_items()


def build_sequences(ds):
    by_user = collections.OrderedDict()
    for order, interaction in enumerate(ds.interactions):
        by_user.setdefault(interaction.user, []).append((interaction.timestamp, order, interaction.item))

    sequences = []
    for user in sorted(by_user):
        events = sorted(by_user[user])
        sequences.append(BehaviorSequence(user, tuple(item for _, _, item in events)))
    return sequences


def leave_one_out_split(seqs, items=()):
    train, val, test = {}, {}, {}
    dropped = 0
    for sequence in seqs:
        history = list(sequence.items)
        if len(history) < MIN_SEQUENCE_LENGTH:
            dropped += 1
            continue
        train[sequence.user] = tuple(history[:-2])
        val[sequence.user] = (tuple(history[:-2]), history[-2])
        test[sequence.user] = (tuple(history[:-1]), history[-1])
    return SplitDataset(train, val, test, items, dropped)


def partition_by_counts(counts, n_groups=5):
    n_groups = int(n_groups)
    if n_groups < 1:
        raise ValueError('n_groups must be positive: {!r}'.format(n_groups))
    if len(counts) < n_groups:
        raise SizeError('{} users cannot fill {} groups'.format(len(counts), n_groups))

    ordered = sorted(counts, key=lambda user: (counts[user], user))
    size, remainder = divmod(len(ordered), n_groups)
    groups = []
    start = 0
    for index in range(n_groups):
        count = size + (1 if index >= n_groups - remainder else 0)
        groups.append(tuple(ordered[start:(start + count)]))
        start += count
    assert start == len(ordered)
    return SparsityGroups(groups)


def group_by_sparsity(ds, n_groups=5):
    if isinstance(ds, SplitDataset):
        counts = ds.sequence_lengths()
    else:
        counts = ds.user_counts()
    return partition_by_counts(counts, n_groups)


class SparsityGroups(object):

    def __init__(self, groups):
        self.groups = tuple(tuple(group) for group in groups)

    def __len__(self):
        return len(self.groups)

    def __iter__(self):
        yield from self.groups

    def __getitem__(self, index):
        return self.groups[index]

    def labels(self):
        return ['G{}'.format(index + 1) for index in range(len(self.groups))]


def item_frequency(split):
    counts = collections.OrderedDict((key, 0) for key in sorted(split.items))
    for sequence in split.train.values():
        for item in sequence:
            counts[item] = counts.get(item, 0) + 1
    return counts


def item_user_counts(split):
    counts = collections.OrderedDict((key, 0) for key in sorted(split.items))
    for sequence in split.train.values():
        for item in set(sequence):
            counts[item] = counts.get(item, 0) + 1
    return counts
