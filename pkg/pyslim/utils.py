from importlib import import_module
import hashlib
import importlib.util
import io
import json
import os
import struct


def load_as_module(module_name, path):
    if os.path.exists(path):
        spec = importlib.util.spec_from_file_location(module_name, path)
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)
    else:
        module = import_module(path)
    return module


def module_constants(module):
    return {key: getattr(module, key) for key in dir(module)
            if key.isupper() and not key.startswith('_')}


def sha256_hex(data):
    if isinstance(data, str):
        data = data.encode('utf-8')
    return hashlib.sha256(data).hexdigest()


def file_digest(path, block_size=1 << 16):
    digest = hashlib.sha256()
    with open(path, 'rb') as stream:
        while True:
            block = stream.read(block_size)
            if not block:
                break
            digest.update(block)
    return digest.hexdigest()


def canonical_json(value):
    return json.dumps(value, sort_keys=True, separators=(',', ':'), ensure_ascii=False)


def config_hash(*parts):
    return sha256_hex(canonical_json(list(parts)))


def stable_seed(*parts):
    # 64-bit seed that does not depend on PYTHONHASHSEED
    return int(sha256_hex(canonical_json(list(parts)))[:16], 16)


def stream_read(stream, size):
    chunks = []
    remaining = size
    while remaining:
        chunk = stream.read(remaining)
        if chunk:
            chunks.append(chunk)
            remaining -= len(chunk)
        else:
            fmt = 'EOF at stream {!s} offset 0x{:X}'.format
            raise IOError(fmt(stream, stream.tell()))
    return b''.join(chunks)


def stream_write(stream, raw):
    written = 0
    if isinstance(raw, str):
        raw_view = raw
    else:
        raw_view = memoryview(raw)
    while written < len(raw):
        written += stream.write(raw_view[written:])
    return written


def stream_pack(stream, fmt, *args):
    return stream_write(stream, struct.pack(fmt, *args))


def stream_unpack(fmt, stream):
    chunk = stream_read(stream, struct.calcsize(fmt))
    return struct.unpack(fmt, chunk)


def stream_pack_text(stream, text):
    raw = text.encode('utf-8')
    stream_pack(stream, '<L', len(raw))
    return stream_write(stream, raw) + 4


def stream_unpack_text(stream):
    size = stream_unpack('<L', stream)[0]
    return stream_read(stream, size).decode('utf-8')


def records_read(stream, path=None):
    """Yields ``(line_number, record)`` for each non-blank JSON line."""
    for line_number, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except ValueError as error:
            raise RecordError(path, line_number, str(error))
        if not isinstance(record, dict):
            raise RecordError(path, line_number, 'record is not an object')
        yield line_number, record


def records_write(stream, records):
    count = 0
    for record in records:
        stream.write(json.dumps(record, ensure_ascii=False))
        stream.write('\n')
        count += 1
    return count


def records_load(path):
    with open(path, 'rt', encoding='utf-8') as stream:
        return [record for _, record in records_read(stream, path)]


def records_dump(path, records):
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, 'wt', encoding='utf-8', newline='\n') as stream:
        return records_write(stream, records)


class RecordError(ValueError):

    def __init__(self, path, line_number, message):
        super().__init__('{}:{}: {}'.format(path, line_number, message))
        self.path = path
        self.line_number = line_number


class BinaryResource(object):

    @classmethod
    def from_stream(cls, stream, *args, **kwargs):
        raise NotImplementedError

    def to_stream(self, stream, *args, **kwargs):
        raise NotImplementedError

    @classmethod
    def from_bytes(cls, data, *args, **kwargs):
        return cls.from_stream(io.BytesIO(data), *args, **kwargs)

    def to_bytes(self, *args, **kwargs):
        stream = io.BytesIO()
        self.to_stream(stream, *args, **kwargs)
        return stream.getvalue()
