import json
import os

try:
    import fcntl
except ImportError:  # not POSIX
    fcntl = None

from pyslim.dataset import Item, SplitDataset
from pyslim.utils import records_dump, records_load


SPLIT_FILES = ('train', 'val', 'test')


class ArtifactError(IOError):
    pass


def split_records(split, role):
    if role == 'train':
        for user, inputs in split.train.items():
            yield {'user': user, 'input': list(inputs)}
    else:
        pairs = split.val if role == 'val' else split.test
        for user, (inputs, target) in pairs.items():
            yield {'user': user, 'input': list(inputs), 'target': target}


def item_records(items):
    for key in sorted(items):
        item = items[key]
        record = {'item': item.id, 'title': item.title}
        if item.category is not None:
            record['category'] = item.category
        if item.brand is not None:
            record['brand'] = item.brand
        yield record


def save_split(split, folder, meta=None):
    os.makedirs(folder, exist_ok=True)
    counts = {}
    for role in SPLIT_FILES:
        path = os.path.join(folder, '{}.jsonl'.format(role))
        counts[role] = records_dump(path, split_records(split, role))
    records_dump(os.path.join(folder, 'items.jsonl'), item_records(split.items))
    meta = dict(meta or {})
    meta['dropped'] = split.dropped
    write_meta(os.path.join(folder, 'meta.json'), meta)
    return counts


def load_split(folder):
    paths = {role: os.path.join(folder, '{}.jsonl'.format(role)) for role in SPLIT_FILES}
    paths['items'] = os.path.join(folder, 'items.jsonl')
    for path in paths.values():
        if not os.path.isfile(path):
            raise ArtifactError('missing split file: {}'.format(path))

    train = {record['user']: tuple(record['input']) for record in records_load(paths['train'])}
    val = {record['user']: (tuple(record['input']), record['target'])
           for record in records_load(paths['val'])}
    test = {record['user']: (tuple(record['input']), record['target'])
            for record in records_load(paths['test'])}
    items = [Item(record['item'], record['title'], record.get('category'), record.get('brand'))
             for record in records_load(paths['items'])]

    meta_path = os.path.join(folder, 'meta.json')
    dropped = read_meta(meta_path).get('dropped', 0) if os.path.isfile(meta_path) else 0
    return SplitDataset(train, val, test, items, dropped)


def meta_path_for(path):
    return path + '.meta.json'


def write_meta(path, meta):
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, 'wt', encoding='utf-8', newline='\n') as stream:
        json.dump(meta, stream, sort_keys=True, indent=2)
        stream.write('\n')


def read_meta(path):
    if not os.path.isfile(path):
        raise ArtifactError('missing artifact metadata: {}'.format(path))
    with open(path, 'rt', encoding='utf-8') as stream:
        return json.load(stream)


def check_hash(path, expected, actual):
    if expected != actual:
        raise ArtifactError('config hash mismatch for {}: artifact has {}, configuration expects {}'
                            .format(path, actual, expected))


class DirectoryLock(object):

    LOCK_NAME = '.slim.lock'

    def __init__(self, folder):
        self.folder = folder
        self._stream = None

    def acquire(self):
        os.makedirs(self.folder, exist_ok=True)
        self._stream = open(os.path.join(self.folder, self.LOCK_NAME), 'a')
        if fcntl is not None:
            try:
                fcntl.flock(self._stream.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
            except OSError:
                self._stream.close()
                self._stream = None
                raise ArtifactError('output folder is locked by another command: {}'.format(self.folder))
        return self

    def release(self):
        if self._stream is not None:
            if fcntl is not None:
                fcntl.flock(self._stream.fileno(), fcntl.LOCK_UN)
            self._stream.close()
            self._stream = None

    def __enter__(self):
        return self.acquire()

    def __exit__(self, *exc_info):
        self.release()
