import collections
import concurrent.futures
import datetime
import json
import logging
import os
import threading
import time

import httpx

from pyslim.prompts import RationaleParseError, format_rationale, parse_item_listing, parse_rationale
from pyslim.utils import records_read, sha256_hex


RETRY_STATUSES = (408, 429, 500, 502, 503, 504)
EXCERPT_SIZE = 200
DEFAULT_API_KEY_ENV = 'OPENAI_API_KEY'
MOCK_STEP3_COUNT = 3


ChatResult = collections.namedtuple('ChatResult', 'text prompt_tokens completion_tokens latency retries')

GenerationFailure = collections.namedtuple('GenerationFailure', 'user kind message')


class EndpointError(IOError):

    def __init__(self, status, excerpt):
        super().__init__('endpoint answered {}: {}'.format(status, excerpt))
        self.status = status
        self.excerpt = excerpt


class TransportError(IOError):

    def __init__(self, attempts, cause):
        super().__init__('giving up after {} attempts: {!s}'.format(attempts, cause))
        self.attempts = attempts
        self.cause = cause


class MockError(ValueError):
    pass


class EndpointConfig(object):

    def __init__(self, base_url, model_name, api_key=None, max_tokens=300, temperature=0.0,
                 timeout=60.0, max_retries=3, backoff=1.0, api_key_env=DEFAULT_API_KEY_ENV):
        max_tokens = int(max_tokens)
        temperature = float(temperature)
        max_retries = int(max_retries)
        if max_tokens < 1:
            raise ValueError('max_tokens must be positive: {!r}'.format(max_tokens))
        if temperature < 0:
            raise ValueError('temperature must be non-negative: {!r}'.format(temperature))
        if max_retries < 0:
            raise ValueError('max_retries must be non-negative: {!r}'.format(max_retries))

        self.base_url = base_url.rstrip('/')
        self.model_name = model_name
        self.api_key = api_key
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.timeout = float(timeout)
        self.max_retries = max_retries
        self.backoff = float(backoff)
        self.api_key_env = api_key_env

    def resolve_api_key(self):
        if self.api_key:
            return self.api_key
        if self.api_key_env:
            return os.environ.get(self.api_key_env) or None
        return None

    def headers(self):
        headers = {'Content-Type': 'application/json'}
        api_key = self.resolve_api_key()
        if api_key:
            headers['Authorization'] = 'Bearer {}'.format(api_key)
        return headers

    def url(self, path):
        return '{}/{}'.format(self.base_url, path.lstrip('/'))


def make_client(cfg, transport=None):
    return httpx.Client(timeout=cfg.timeout, transport=transport)


def post_json(cfg, path, payload, client=None):
    """POSTs ``payload`` and returns ``(response_json, retries)``."""
    logger = logging.getLogger()
    owned = client is None
    if owned:
        client = make_client(cfg)
    url = cfg.url(path)
    attempts = cfg.max_retries + 1
    cause = None

    try:
        for attempt in range(attempts):
            try:
                response = client.post(url, json=payload, headers=cfg.headers())
            except httpx.TransportError as error:
                cause = error
            else:
                excerpt = response.text[:EXCERPT_SIZE]
                if 200 <= response.status_code < 300:
                    try:
                        return response.json(), attempt
                    except ValueError:
                        raise EndpointError(response.status_code, excerpt)
                if response.status_code not in RETRY_STATUSES:
                    raise EndpointError(response.status_code, excerpt)
                cause = EndpointError(response.status_code, excerpt)

            if attempt + 1 < attempts:
                delay = cfg.backoff * (2 ** attempt)
                logger.warning('Retrying %r [%d/%d] in %.2fs: %s', url, (attempt + 1), cfg.max_retries,
                               delay, cause)
                if delay > 0:
                    time.sleep(delay)
    finally:
        if owned:
            client.close()

    raise TransportError(attempts, cause)


def chat_complete(cfg, prompt, client=None):
    if not prompt:
        raise ValueError('empty prompt')
    payload = {
        'model': cfg.model_name,
        'messages': [{'role': 'user', 'content': prompt}],
        'max_tokens': cfg.max_tokens,
        'temperature': cfg.temperature,
    }
    start = time.perf_counter()
    body, retries = post_json(cfg, 'chat/completions', payload, client)
    latency = max(0.0, time.perf_counter() - start)

    try:
        text = body['choices'][0]['message']['content']
    except (KeyError, IndexError, TypeError):
        text = None
    if not isinstance(text, str):
        raise EndpointError(200, json.dumps(body)[:EXCERPT_SIZE])
    usage = body.get('usage')
    if not isinstance(usage, dict):
        usage = {}
    return ChatResult(text, _token_count(usage.get('prompt_tokens')), _token_count(usage.get('completion_tokens')),
                      latency, retries)


def _token_count(value):
    try:
        return max(0, int(value))
    except (TypeError, ValueError):
        return 0


def prompt_hash(prompt):
    return sha256_hex(prompt)


class RationaleCache(object):

    def __init__(self, path=None):
        self.path = path
        self._entries = {}
        self._lock = threading.Lock()
        if path is not None and os.path.isfile(path):
            self.load()

    def clear(self):
        self._entries.clear()

    def load(self):
        self.clear()
        with open(self.path, 'rt', encoding='utf-8') as stream:
            for _, record in records_read(stream, self.path):
                key = (record['user'], record['prompt_hash'], record['model'])
                self._entries[key] = (record['rationale_raw'], record['created_at'])
        return self

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def __iter__(self):
        for (user, digest, model), (raw, created_at) in self._entries.items():
            yield {'user': user, 'prompt_hash': digest, 'model': model,
                   'rationale_raw': raw, 'created_at': created_at}

    def get(self, user, digest, model):
        entry = self._entries.get((user, digest, model))
        if entry is None:
            return None
        return parse_rationale(user, entry[0])

    def put(self, user, digest, model, raw, created_at=None):
        if created_at is None:
            created_at = datetime.datetime.now(datetime.timezone.utc).isoformat()
        key = (user, digest, model)
        with self._lock:
            if key in self._entries:
                return False
            self._entries[key] = (raw, created_at)
            if self.path is not None:
                folder = os.path.dirname(self.path)
                if folder:
                    os.makedirs(folder, exist_ok=True)
                record = {'user': user, 'prompt_hash': digest, 'model': model,
                          'rationale_raw': raw, 'created_at': created_at}
                with open(self.path, 'at', encoding='utf-8', newline='\n') as stream:
                    stream.write(json.dumps(record, ensure_ascii=False))
                    stream.write('\n')
        return True


class GenerationSummary(object):

    def __init__(self):
        self.calls = 0
        self.cache_hits = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.total_latency = 0.0
        self.failures = []

    @property
    def total_tokens(self):
        return self.prompt_tokens + self.completion_tokens

    @property
    def mean_latency(self):
        return self.total_latency / self.calls if self.calls else 0.0

    def as_dict(self):
        return collections.OrderedDict([
            ('calls', self.calls),
            ('cache_hits', self.cache_hits),
            ('prompt_tokens', self.prompt_tokens),
            ('completion_tokens', self.completion_tokens),
            ('total_tokens', self.total_tokens),
            ('mean_latency', self.mean_latency),
            ('failures', len(self.failures)),
        ])


def generate_rationales(cfg, prompts, cache, concurrency, client=None):
    concurrency = int(concurrency)
    if concurrency < 1:
        raise ValueError('concurrency must be positive: {!r}'.format(concurrency))

    summary = GenerationSummary()
    summary_lock = threading.Lock()
    results = [None] * len(prompts)
    pending = []

    for index, prompt in enumerate(prompts):
        digest = prompt_hash(prompt.text)
        cached = cache.get(prompt.user, digest, cfg.model_name)
        if cached is not None:
            results[index] = cached
            summary.cache_hits += 1
        else:
            pending.append((index, prompt, digest))

    owned = client is None
    if owned:
        client = make_client(cfg)

    def work(index, prompt, digest):
        try:
            result = chat_complete(cfg, prompt.text, client)
        except (EndpointError, TransportError) as error:
            with summary_lock:
                summary.failures.append(GenerationFailure(prompt.user, 'transport', str(error)))
            return
        with summary_lock:
            summary.calls += 1
            summary.prompt_tokens += result.prompt_tokens
            summary.completion_tokens += result.completion_tokens
            summary.total_latency += result.latency
        try:
            rationale = parse_rationale(prompt.user, result.text)
        except RationaleParseError as error:
            with summary_lock:
                summary.failures.append(GenerationFailure(prompt.user, 'parse', str(error)))
            return
        cache.put(prompt.user, digest, cfg.model_name, result.text)
        results[index] = rationale

    try:
        with concurrent.futures.ThreadPoolExecutor(max_workers=concurrency) as executor:
            futures = [executor.submit(work, *job) for job in pending]
            for future in futures:
                future.result()
    finally:
        if owned:
            client.close()

    summary.failures.sort(key=lambda failure: failure.user)
    return [rationale for rationale in results if rationale is not None], summary


class MockChatModel(object):

    def __init__(self, items):
        self.items = items
        self._by_title = {}
        for key in sorted(items):
            self._by_title.setdefault(items[key].title, items[key])

    def respond(self, prompt):
        listing = parse_item_listing(prompt)
        if not listing:
            raise MockError('no item listing found in prompt')

        counts = collections.Counter()
        for title, category, _ in listing:
            if category is None and title in self._by_title:
                category = self._by_title[title].category
            if category:
                counts[category] += 1
        if counts:
            best = max(counts.values())
            token = min(category for category, count in counts.items() if count == best)
        else:
            token = 'popular'

        seen = {title for title, _, _ in listing}
        unseen = sorted(item.title for item in self.items.values()
                        if item.title not in seen and (not counts or item.category == token))
        step3 = ', '.join(unseen[:MOCK_STEP3_COUNT]) or 'none'
        return format_rationale('prefers {} products'.format(token), token, step3)


def mock_llm_respond(prompt, items):
    return MockChatModel(items).respond(prompt)


def mock_transport(items, encoder_config=None):
    """Offline stand-in for an OpenAI-style server, backed by the mock model
    and the hash encoder."""
    model = MockChatModel(items)

    def handler(request):
        payload = json.loads(request.content.decode('utf-8'))
        if request.url.path.endswith('/chat/completions'):
            prompt = payload['messages'][-1]['content']
            try:
                text = model.respond(prompt)
            except MockError as error:
                return httpx.Response(400, json={'error': {'message': str(error)}})
            return httpx.Response(200, json={
                'model': payload.get('model'),
                'choices': [{'index': 0, 'message': {'role': 'assistant', 'content': text}}],
                'usage': {'prompt_tokens': len(prompt.split()), 'completion_tokens': len(text.split())},
            })

        if request.url.path.endswith('/embeddings'):
            from pyslim.embed import HashEncoderConfig, encode_text_hash
            config = encoder_config or HashEncoderConfig()
            data = []
            for index, text in enumerate(payload['input']):
                vector = encode_text_hash(config, text)
                data.append({'index': index, 'embedding': vector.values.tolist()})
            return httpx.Response(200, json={'model': payload.get('model'), 'data': data})

        return httpx.Response(404, text='unknown path {}'.format(request.url.path))

    return httpx.MockTransport(handler)
