import argparse
import collections
import logging
import os
import sys

import numpy as np

from pyslim.dataset import (BehaviorSequence, DatasetParseError, ReferentialError, SizeError, build_sequences,
                            group_by_sparsity, k_core_filter, leave_one_out_split, load_dataset)
from pyslim.distill import (DomainError, build_distill_examples, evaluate_student_nll, export_finetune_dataset,
                            split_holdout, train_student_mle, uniform_nll)
from pyslim.embed import (EncodeError, FileProvider, HashEncoderConfig, HashProvider, RemoteProvider, StoreError,
                          embed_items_and_rationales, load_embedding_store, save_embedding_store)
from pyslim.evaluation import (evaluate, popularity_histogram, sparsity_group_eval, summarize_runs,
                               write_popularity_table, write_reports)
from pyslim.graphics import render_popularity_plot
from pyslim.llm import (EndpointConfig, EndpointError, RationaleCache, TransportError, generate_rationales,
                        make_client, mock_transport, prompt_hash)
from pyslim.models import (Checkpoint, MissingEmbeddingError, ModelConfig, OutOfVocabularyError, load_checkpoint,
                           save_checkpoint, train)
from pyslim.persistence import (ArtifactError, DirectoryLock, check_hash, load_split, meta_path_for, read_meta,
                                save_split, write_meta)
from pyslim.prompts import STUDENT, TEACHER, PromptError, load_template, render_prompt
from pyslim.utils import config_hash, file_digest, load_as_module, module_constants


EXIT_OK = 0
EXIT_INPUT = 2
EXIT_REMOTE = 3

DEFAULT_CONFIG = 'pyslim.configs.default'

DERIVED_PATHS = collections.OrderedDict([
    ('SPLIT_FOLDER', 'split'),
    ('CACHE_PATH', 'rationales.jsonl'),
    ('EMBEDDINGS_PATH', 'embeddings.jsonl'),
    ('CHECKPOINT_PATH', 'model.ckpt'),
    ('REPORT_PATH', 'report.jsonl'),
    ('DISTILL_PATH', 'distill.jsonl'),
    ('POPULARITY_TABLE_PATH', 'popularity.csv'),
    ('POPULARITY_PLOT_PATH', 'popularity.png'),
    ('GROUPS_REPORT_PATH', 'groups.jsonl'),
])

FLAG_KEYS = {
    'items': 'ITEMS_PATH',
    'interactions': 'INTERACTIONS_PATH',
    'output_folder': 'OUTPUT_FOLDER',
    'cache': 'CACHE_PATH',
    'teacher_template': 'TEACHER_TEMPLATE',
    'student_template': 'STUDENT_TEMPLATE',
    'subset_size': 'SUBSET_SIZE',
    'concurrency': 'CONCURRENCY',
    'limit': 'DISTILL_LIMIT',
    'holdout': 'DISTILL_HOLDOUT',
    'provider': 'EMBEDDING_PROVIDER',
    'source': 'RATIONALE_SOURCE',
    'mode': 'MODE',
    'backbone': 'BACKBONE',
    'embed_dim': 'EMBED_DIM',
    'epochs': 'EPOCHS',
    'lr': 'LEARNING_RATE',
    'neg': 'NEGATIVES',
    'batch_size': 'BATCH_SIZE',
    'seed': 'SEED',
    'pairs': 'PAIRS',
    'backbone_input': 'BACKBONE_INPUT',
    'optimizer': 'OPTIMIZER',
    'runs': 'RUNS',
    'workers': 'WORKERS',
}

COMMAND_FLAG_KEYS = {
    'rationalize': {'seed': 'SUBSET_SEED'},
    'export-distill': {'out': 'DISTILL_PATH'},
    'embed': {'step': 'RATIONALE_STEP'},
}


class ConfigError(ValueError):
    pass


class PipelineConfig(object):

    def __init__(self, values):
        values = dict(values)
        for key, name in DERIVED_PATHS.items():
            if values.get(key) is None:
                values[key] = os.path.join(values['OUTPUT_FOLDER'], name)
        self._values = values

    def __getattr__(self, name):
        try:
            return self.__dict__['_values'][name]
        except KeyError:
            raise AttributeError(name)

    def as_dict(self):
        return dict(self._values)


def load_config(path=None, params=None):
    defaults = module_constants(load_as_module('slim_defaults', DEFAULT_CONFIG))
    values = dict(defaults)

    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError('configuration file not found: {}'.format(path))
        overrides = module_constants(load_as_module('slim_config', path))
        unknown = sorted(set(overrides) - set(defaults))
        if unknown:
            raise ConfigError('unknown configuration keys in {}: {}'.format(path, ', '.join(unknown)))
        values.update(overrides)

    if params is not None:
        flag_keys = dict(FLAG_KEYS)
        flag_keys.update(COMMAND_FLAG_KEYS.get(params.command, {}))
        for name, key in flag_keys.items():
            value = getattr(params, name, None)
            if value is not None:
                values[key] = value
    return PipelineConfig(values)


def _sep():
    logger = logging.getLogger()
    logger.info('-' * 80)


def endpoint_config(cfg, role):
    prefix = role.upper()
    return EndpointConfig(getattr(cfg, prefix + '_BASE_URL'), getattr(cfg, prefix + '_MODEL'),
                          api_key=getattr(cfg, prefix + '_API_KEY'), max_tokens=cfg.MAX_TOKENS,
                          temperature=cfg.TEMPERATURE, timeout=cfg.TIMEOUT, max_retries=cfg.MAX_RETRIES,
                          backoff=cfg.BACKOFF, api_key_env=getattr(cfg, prefix + '_API_KEY_ENV'))


def hash_encoder_config(cfg):
    return HashEncoderConfig(cfg.EMBEDDING_DIM, cfg.HASH_NGRAMS, cfg.HASH_SEED)


def model_config(cfg):
    try:
        return ModelConfig(cfg.MODE, cfg.BACKBONE, cfg.EMBED_DIM, None, cfg.MAX_SEQ_LEN, cfg.LEARNING_RATE,
                           cfg.EPOCHS, cfg.NEGATIVES, cfg.BATCH_SIZE, cfg.SEED, cfg.PAIRS, cfg.BACKBONE_INPUT,
                           cfg.OPTIMIZER)
    except ValueError as error:
        raise ConfigError(str(error))


def template_for(cfg, role):
    return load_template(cfg.TEACHER_TEMPLATE if role == TEACHER else cfg.STUDENT_TEMPLATE, role)


def prepare_hash(cfg):
    for path in (cfg.ITEMS_PATH, cfg.INTERACTIONS_PATH):
        if not os.path.isfile(path):
            raise ArtifactError('missing input file: {}'.format(path))
    return config_hash('prepare', file_digest(cfg.ITEMS_PATH), file_digest(cfg.INTERACTIONS_PATH), cfg.K_CORE)


def embed_hash(cfg, upstream):
    provider = cfg.EMBEDDING_PROVIDER
    if provider == 'hash':
        settings = hash_encoder_config(cfg).as_dict()
    elif provider == 'remote':
        settings = [cfg.EMBEDDING_BASE_URL, cfg.EMBEDDING_MODEL]
    elif provider == 'file':
        if not cfg.EMBEDDING_FILE or not os.path.isfile(cfg.EMBEDDING_FILE):
            raise ConfigError('file provider needs an existing EMBEDDING_FILE: {!r}'.format(cfg.EMBEDDING_FILE))
        settings = file_digest(cfg.EMBEDDING_FILE)
    else:
        raise ConfigError('unknown embedding provider: {!r}'.format(provider))
    source = cfg.RATIONALE_SOURCE
    template = cfg.TEACHER_TEMPLATE if source == TEACHER else cfg.STUDENT_TEMPLATE
    cache_digest = file_digest(cfg.CACHE_PATH) if os.path.isfile(cfg.CACHE_PATH) else None
    return config_hash('embed', upstream, provider, settings, str(cfg.RATIONALE_STEP), source,
                       getattr(cfg, source.upper() + '_MODEL'), template, cache_digest)


def train_hash(cfg, upstream):
    return config_hash('train', upstream, model_config(cfg).as_dict())


def load_checked_split(cfg):
    meta_path = os.path.join(cfg.SPLIT_FOLDER, 'meta.json')
    split = load_split(cfg.SPLIT_FOLDER)
    expected = prepare_hash(cfg)
    check_hash(meta_path, expected, read_meta(meta_path).get('config_hash'))
    return split, expected


def load_checked_store(cfg, upstream):
    path = cfg.EMBEDDINGS_PATH
    if not os.path.isfile(path):
        raise ArtifactError('missing embedding store: {}'.format(path))
    expected = embed_hash(cfg, upstream)
    check_hash(path, expected, read_meta(meta_path_for(path)).get('config_hash'))
    return load_embedding_store(path), expected


def make_provider(cfg, mock=False, items=None):
    provider = cfg.EMBEDDING_PROVIDER
    if provider == 'hash':
        return HashProvider(hash_encoder_config(cfg))
    if provider == 'remote':
        endpoint = endpoint_config(cfg, 'embedding')
        client = make_client(endpoint, mock_transport(items, hash_encoder_config(cfg)) if mock else None)
        return RemoteProvider(endpoint, cfg.EMBEDDING_BATCH_SIZE, cfg.CONCURRENCY, client)
    if provider == 'file':
        return FileProvider(load_embedding_store(cfg.EMBEDDING_FILE))
    raise ConfigError('unknown embedding provider: {!r}'.format(provider))


def collect_rationales(cfg, split, source):
    logger = logging.getLogger()
    template = template_for(cfg, source)
    model_name = getattr(cfg, source.upper() + '_MODEL')
    cache = RationaleCache(cfg.CACHE_PATH)
    rationales = []
    for user, (inputs, _) in split.test.items():
        prompt = render_prompt(template, BehaviorSequence(user, inputs), split.items)
        rationale = cache.get(user, prompt_hash(prompt.text), model_name)
        if rationale is not None:
            rationales.append(rationale)
    logger.info('Rationales from %s [%d/%d]', source, len(rationales), len(split.test))
    return rationales


def cmd_prepare(params, cfg):
    logger = logging.getLogger()
    digest = prepare_hash(cfg)

    logger.info('Loading dataset: <items>=%r, <interactions>=%r', cfg.ITEMS_PATH, cfg.INTERACTIONS_PATH)
    dataset = load_dataset(cfg.ITEMS_PATH, cfg.INTERACTIONS_PATH)
    logger.info('Raw: users=%d, items=%d, interactions=%d', len(dataset.users), len(dataset.items), len(dataset))

    filtered = k_core_filter(dataset, cfg.K_CORE).restrict_items()
    logger.info('%d-core: users=%d, items=%d, interactions=%d', cfg.K_CORE, len(filtered.users),
                len(filtered.items), len(filtered))

    split = leave_one_out_split(build_sequences(filtered), filtered.items)
    meta = {
        'config_hash': digest,
        'users': len(split.users),
        'items': len(split.items),
        'interactions': len(filtered),
        'train_interactions': split.train_interaction_count(),
    }
    save_split(split, cfg.SPLIT_FOLDER, meta)
    logger.info('Split: users=%d, items=%d, interactions=%d, dropped=%d', len(split.users), len(split.items),
                len(filtered), split.dropped)
    return EXIT_OK


def cmd_rationalize(params, cfg):
    logger = logging.getLogger()
    split, _ = load_checked_split(cfg)
    role = params.role
    users = params.users or ('subset' if role == TEACHER else 'all')

    selected = sorted(split.test)
    if users == 'subset':
        size = min(int(cfg.SUBSET_SIZE), len(selected))
        chosen = np.random.default_rng(cfg.SUBSET_SEED).choice(len(selected), size=size, replace=False)
        selected = sorted(selected[index] for index in chosen)
    logger.info('Role: %s, users: %s [%d/%d]', role, users, len(selected), len(split.test))

    template = template_for(cfg, role)
    prompts = [render_prompt(template, BehaviorSequence(user, split.test[user][0]), split.items)
               for user in selected]

    endpoint = endpoint_config(cfg, role)
    cache = RationaleCache(cfg.CACHE_PATH)
    with make_client(endpoint, mock_transport(split.items) if params.mock else None) as client:
        rationales, summary = generate_rationales(endpoint, prompts, cache, cfg.CONCURRENCY, client)

    _sep()
    for key, value in summary.as_dict().items():
        logger.info('%s = %r', key, value)
    for failure in summary.failures:
        logger.warning('Failure %s (%s): %s', failure.user, failure.kind, failure.message)

    pending = len(prompts) - summary.cache_hits
    transport_failures = sum(1 for failure in summary.failures if failure.kind == 'transport')
    if pending and transport_failures == pending:
        logger.error('All %d requests to %r failed', pending, endpoint.base_url)
        return EXIT_REMOTE
    logger.info('Rationales: %d, failures: %d', len(rationales), len(summary.failures))
    return EXIT_OK


def cmd_export_distill(params, cfg):
    logger = logging.getLogger()
    split, _ = load_checked_split(cfg)
    cache = RationaleCache(cfg.CACHE_PATH)
    examples = build_distill_examples(split, cache, cfg.TEACHER_MODEL, template_for(cfg, TEACHER),
                                      template_for(cfg, STUDENT), limit=cfg.DISTILL_LIMIT)
    if not examples:
        raise ArtifactError('no teacher rationales for {!r} in {}'.format(cfg.TEACHER_MODEL, cfg.CACHE_PATH))

    count = export_finetune_dataset(examples, cfg.DISTILL_PATH)
    logger.info('Distillation examples: %d -> %r', count, cfg.DISTILL_PATH)

    if cfg.DISTILL_HOLDOUT:
        train_examples, heldout = split_holdout(examples, cfg.DISTILL_HOLDOUT, cfg.SEED)
        if heldout:
            student = train_student_mle(train_examples, cfg.STUDENT_ALPHA)
            try:
                nll = evaluate_student_nll(student, heldout)
            except DomainError as error:
                logger.warning('Held-out NLL undefined: %s', error)
            else:
                logger.info('Held-out NLL [%d examples]: %.6f (uniform %.6f)', len(heldout), nll,
                            uniform_nll(student))
    return EXIT_OK


def cmd_embed(params, cfg):
    logger = logging.getLogger()
    split, upstream = load_checked_split(cfg)
    digest = embed_hash(cfg, upstream)

    provider = make_provider(cfg, params.mock, split.items)
    rationales = collect_rationales(cfg, split, cfg.RATIONALE_SOURCE)
    store = embed_items_and_rationales(split.items, rationales, provider, cfg.RATIONALE_STEP)

    count = save_embedding_store(store, cfg.EMBEDDINGS_PATH)
    write_meta(meta_path_for(cfg.EMBEDDINGS_PATH), {
        'config_hash': digest,
        'provenance': store.provenance,
        'dimension': store.dimension,
        'step': str(cfg.RATIONALE_STEP),
        'source': cfg.RATIONALE_SOURCE,
        'vectors': count,
    })
    logger.info('Embeddings: %d vectors, dimension %r -> %r', count, store.dimension, cfg.EMBEDDINGS_PATH)
    return EXIT_OK


def load_model_inputs(cfg):
    split, upstream = load_checked_split(cfg)
    config = model_config(cfg)
    store = None
    if config.uses_item_text or config.uses_rationale:
        store, upstream = load_checked_store(cfg, upstream)
    return split, store, config, upstream


def cmd_train(params, cfg):
    logger = logging.getLogger()
    split, store, config, upstream = load_model_inputs(cfg)
    digest = train_hash(cfg, upstream)
    if store is not None:
        config = config.replace(text_dim=store.dimension)

    logger.info('Training: %r', config)
    model_params, trace = train(split, store, config)
    size = save_checkpoint(cfg.CHECKPOINT_PATH, Checkpoint(model_params, config, trace, digest))
    first = trace[0] if trace else None
    last = trace[-1] if trace else None
    logger.info('Checkpoint: %d bytes -> %r, loss %r -> %r', size, cfg.CHECKPOINT_PATH, first, last)
    return EXIT_OK


def load_checked_checkpoint(cfg):
    split, store, config, upstream = load_model_inputs(cfg)
    if not os.path.isfile(cfg.CHECKPOINT_PATH):
        raise ArtifactError('missing checkpoint: {}'.format(cfg.CHECKPOINT_PATH))
    digest = train_hash(cfg, upstream)
    checkpoint = load_checkpoint(cfg.CHECKPOINT_PATH)
    check_hash(cfg.CHECKPOINT_PATH, digest, checkpoint.config_hash)
    return split, store, checkpoint, digest


def cmd_eval(params, cfg):
    logger = logging.getLogger()
    split, store, checkpoint, upstream = load_checked_checkpoint(cfg)
    step = params.step
    # a checkpoint trained on other rationale steps is replaced by one trained on this step
    retrain = step is not None and checkpoint.config.uses_rationale and str(step) != str(cfg.RATIONALE_STEP)
    if retrain:
        rationales = collect_rationales(cfg, split, cfg.RATIONALE_SOURCE)
        store = embed_items_and_rationales(split.items, rationales, make_provider(cfg, params.mock, split.items),
                                           step)
    digest = config_hash('eval', upstream, list(cfg.TOP_K), cfg.EVAL_NEGATIVES, cfg.SEED, cfg.RUNS,
                         None if step is None else str(step))

    reports = []
    for run in range(int(cfg.RUNS)):
        seed = cfg.SEED + run
        if run or retrain:
            run_params, _ = train(split, store, checkpoint.config.replace(seed=seed))
            model = Checkpoint(run_params, checkpoint.config).recommender(store)
        else:
            model = checkpoint.recommender(store)
        report = evaluate(model, split, seed, cfg.TOP_K, cfg.EVAL_NEGATIVES, cfg.WORKERS, label='run{}'.format(run))
        logger.info('Run [%d/%d]: %r', (run + 1), cfg.RUNS, dict(report.metrics or {}))
        reports.append(report)

    summary = summarize_runs(reports)
    records = [report.as_record(config_hash=digest, run=run) for run, report in enumerate(reports)]
    records.append({
        'label': 'summary',
        'config_hash': digest,
        'runs': len(reports),
        'summary': None if summary is None else {name: {'mean': mean, 'std': std}
                                                 for name, (mean, std) in summary.items()},
    })
    write_reports(cfg.REPORT_PATH, records)

    if summary:
        logger.info('Report -> %r: %s', cfg.REPORT_PATH,
                    ', '.join('{}={:.2f}±{:.2f}'.format(name, *values) for name, values in summary.items()))
    return EXIT_OK


def cmd_analyze(params, cfg):
    logger = logging.getLogger()
    split, store, checkpoint, upstream = load_checked_checkpoint(cfg)
    digest = config_hash('analyze', upstream, cfg.POPULARITY_K, cfg.N_GROUPS, list(cfg.TOP_K), cfg.EVAL_NEGATIVES,
                         cfg.SEED)
    model = checkpoint.recommender(store)

    popularity = popularity_histogram(model, split, cfg.POPULARITY_K, cfg.SEED, cfg.EVAL_NEGATIVES, cfg.WORKERS)
    write_popularity_table(cfg.POPULARITY_TABLE_PATH, popularity)
    render_popularity_plot(popularity, cfg.POPULARITY_PLOT_PATH)
    logger.info('Popularity: EFD@%d=%.4f, EPC@%d=%.4f -> %r', popularity.k, popularity.efd, popularity.k,
                popularity.epc, cfg.POPULARITY_TABLE_PATH)

    groups = group_by_sparsity(split, cfg.N_GROUPS)
    group_reports = sparsity_group_eval(model, split, groups, cfg.SEED, cfg.TOP_K, cfg.EVAL_NEGATIVES, cfg.WORKERS)
    records = [popularity.as_record(label='popularity', config_hash=digest)]
    for group, report in zip(groups, group_reports):
        records.append(report.as_record(config_hash=digest, size=len(group)))
        logger.info('Group %s [%d users]: %r', report.label, len(group), dict(report.metrics or {}))
    write_reports(cfg.GROUPS_REPORT_PATH, records)
    return EXIT_OK


COMMANDS = collections.OrderedDict([
    ('prepare', cmd_prepare),
    ('rationalize', cmd_rationalize),
    ('export-distill', cmd_export_distill),
    ('embed', cmd_embed),
    ('train', cmd_train),
    ('eval', cmd_eval),
    ('analyze', cmd_analyze),
])


def _step(text):
    if text == 'all':
        return text
    if text in ('1', '2', '3'):
        return int(text)
    raise argparse.ArgumentTypeError('step must be 1, 2, 3 or all: {!r}'.format(text))


def build_argument_parser():
    parser = argparse.ArgumentParser(prog='slim')
    parser.add_argument('--config')
    parser.add_argument('--output-folder')
    commands = parser.add_subparsers(dest='command')
    commands.required = True

    command = commands.add_parser('prepare')
    command.add_argument('--items')
    command.add_argument('--interactions')

    command = commands.add_parser('rationalize')
    command.add_argument('--role', choices=(TEACHER, STUDENT), default=TEACHER)
    command.add_argument('--users', choices=('subset', 'all'))
    command.add_argument('--subset-size', type=int)
    command.add_argument('--seed', type=int)
    command.add_argument('--concurrency', type=int)
    command.add_argument('--cache')
    command.add_argument('--teacher-template')
    command.add_argument('--student-template')
    command.add_argument('--mock', action='store_true')

    command = commands.add_parser('export-distill')
    command.add_argument('--cache')
    command.add_argument('--out')
    command.add_argument('--limit', type=int)
    command.add_argument('--holdout', type=float)
    command.add_argument('--teacher-template')
    command.add_argument('--student-template')

    command = commands.add_parser('embed')
    command.add_argument('--provider', choices=('hash', 'remote', 'file'))
    command.add_argument('--source', choices=(TEACHER, STUDENT))
    command.add_argument('--step', type=_step)
    command.add_argument('--cache')
    command.add_argument('--mock', action='store_true')

    for name in ('train', 'eval', 'analyze'):
        command = commands.add_parser(name)
        command.add_argument('--mode', choices=('id', 'id-only', 'id-text', 'slim', 'agnostic'))
        command.add_argument('--backbone', choices=('mean', 'gru', 'attention'))
        command.add_argument('--embed-dim', type=int)
        command.add_argument('--epochs', type=int)
        command.add_argument('--lr', type=float)
        command.add_argument('--neg', type=int)
        command.add_argument('--batch-size', type=int)
        command.add_argument('--seed', type=int)
        command.add_argument('--pairs', choices=('all-prefixes', 'last-only'))
        command.add_argument('--backbone-input', choices=('fused', 'id'))
        command.add_argument('--optimizer', choices=('sgd', 'adam'))
        command.add_argument('--source', choices=(TEACHER, STUDENT))
        command.add_argument('--cache')
        command.add_argument('--workers', type=int)
        if name == 'eval':
            command.add_argument('--step', type=_step)
            command.add_argument('--runs', type=int)
            command.add_argument('--mock', action='store_true')

    return parser


def main(*args):
    logger = logging.getLogger()
    stdout_handler = logging.StreamHandler(sys.stdout)
    stdout_handler.setLevel(logging.DEBUG)
    logger.addHandler(stdout_handler)
    logger.setLevel(logging.DEBUG)

    try:
        parser = build_argument_parser()
        params = parser.parse_args(args)

        logger.info('Command-line parameters:')
        for key, value in sorted(params.__dict__.items()):
            logger.info('%s = %r', key, value)
        _sep()

        try:
            cfg = load_config(params.config, params)
            with DirectoryLock(cfg.OUTPUT_FOLDER):
                return COMMANDS[params.command](params, cfg)
        except (EndpointError, TransportError) as error:
            logger.error('Remote failure: %s', error)
            return EXIT_REMOTE
        except (ConfigError, ArtifactError, DatasetParseError, ReferentialError, SizeError, PromptError,
                StoreError, EncodeError, MissingEmbeddingError, OutOfVocabularyError, OSError) as error:
            logger.error('%s: %s', type(error).__name__, error)
            return EXIT_INPUT
    finally:
        logger.removeHandler(stdout_handler)


def run():
    sys.exit(main(*sys.argv[1:]))


if __name__ == '__main__':
    run()
