import collections
import concurrent.futures
import csv
import logging
import math
import os

import numpy as np

from pyslim.dataset import SizeError, item_frequency, item_user_counts
from pyslim.utils import records_dump, stable_seed


DEFAULT_TOP_K = (10, 20)
DEFAULT_NEGATIVES = 100


RankingTask = collections.namedtuple('RankingTask', 'user inputs target candidates')

UserOutcome = collections.namedtuple('UserOutcome', 'user rank top error')


def sample_negatives(split, user, n=DEFAULT_NEGATIVES, seed=0):
    history = split.history(user)
    pool = [item for item in sorted(split.items) if item not in history]
    if len(pool) < n:
        raise SizeError('user {!r}: only {} candidate negatives for {} samples'.format(user, len(pool), n))
    rng = np.random.default_rng(stable_seed(seed, user))
    return [pool[index] for index in rng.choice(len(pool), size=n, replace=False)]


def build_task(split, user, n=DEFAULT_NEGATIVES, seed=0):
    inputs, target = split.test[user]
    return RankingTask(user, inputs, target, [target] + sample_negatives(split, user, n, seed))


def _ordering(scores, candidates):
    return sorted(range(len(candidates)), key=lambda index: (-scores[index], candidates[index]))


def rank_candidates(model, task):
    """1-based rank of the ground truth; ties go to the smaller item id."""
    scores = np.asarray(model.score(task.user, task.inputs, task.candidates), dtype=np.float64)
    target = task.candidates.index(task.target)
    better = (scores > scores[target]) | ((scores == scores[target]) &
                                          np.array([item < task.target for item in task.candidates]))
    return int(np.count_nonzero(better)) + 1


def top_k_items(model, task, k):
    scores = np.asarray(model.score(task.user, task.inputs, task.candidates), dtype=np.float64)
    return [task.candidates[index] for index in _ordering(scores, task.candidates)[:k]]


def ndcg_at_k(rank, k):
    if rank < 1:
        raise ValueError('rank must be at least 1: {!r}'.format(rank))
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def hit_at_k(rank, k):
    if rank < 1:
        raise ValueError('rank must be at least 1: {!r}'.format(rank))
    return 1 if rank <= k else 0


def metric_names(ks):
    return ['ndcg@{}'.format(k) for k in ks] + ['hit@{}'.format(k) for k in ks]


def user_metrics(rank, ks):
    values = collections.OrderedDict()
    for k in ks:
        values['ndcg@{}'.format(k)] = ndcg_at_k(rank, k)
    for k in ks:
        values['hit@{}'.format(k)] = float(hit_at_k(rank, k))
    return values


class MetricReport(object):

    def __init__(self, ranks, seed, ks=DEFAULT_TOP_K, errors=(), label=None):
        self.ranks = collections.OrderedDict(sorted(ranks.items()))
        self.seed = seed
        self.ks = tuple(ks)
        self.errors = collections.OrderedDict(sorted(dict(errors).items()))
        self.label = label

    @property
    def n_users(self):
        return len(self.ranks)

    @property
    def empty(self):
        return not self.ranks

    def rows(self):
        for user, rank in self.ranks.items():
            yield user, rank, user_metrics(rank, self.ks)

    @property
    def metrics(self):
        """Means over users in percent, or ``None`` for an empty report."""
        if self.empty:
            return None
        totals = collections.OrderedDict((name, 0.0) for name in metric_names(self.ks))
        for _, _, values in self.rows():
            for name, value in values.items():
                totals[name] += value
        return collections.OrderedDict((name, 100.0 * total / self.n_users) for name, total in totals.items())

    def subset(self, users, label=None):
        users = set(users)
        return MetricReport({user: rank for user, rank in self.ranks.items() if user in users}, self.seed,
                            self.ks, {user: error for user, error in self.errors.items() if user in users},
                            label)

    def as_record(self, **extra):
        record = collections.OrderedDict()
        if self.label is not None:
            record['label'] = self.label
        record['seed'] = self.seed
        record['n_users'] = self.n_users
        record['n_errors'] = len(self.errors)
        record['empty'] = self.empty
        record['metrics'] = self.metrics
        record.update(extra)
        return record


def _evaluate_users(model, split, seed, n_negatives, workers, top_k=None):
    def work(user):
        try:
            task = build_task(split, user, n_negatives, seed)
            rank = rank_candidates(model, task)
            top = top_k_items(model, task, top_k) if top_k else None
        except (KeyError, ValueError) as error:
            return UserOutcome(user, None, None, str(error))
        return UserOutcome(user, rank, top, None)

    users = sorted(split.test)
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, int(workers))) as executor:
        return list(executor.map(work, users))


def evaluate(model, split, seed=0, ks=DEFAULT_TOP_K, n_negatives=DEFAULT_NEGATIVES, workers=1, label=None):
    logger = logging.getLogger()
    outcomes = _evaluate_users(model, split, seed, n_negatives, workers)
    ranks = {outcome.user: outcome.rank for outcome in outcomes if outcome.error is None}
    errors = {outcome.user: outcome.error for outcome in outcomes if outcome.error is not None}
    if errors:
        logger.warning('Excluded users: %d of %d', len(errors), len(outcomes))
    return MetricReport(ranks, seed, ks, errors, label)


def summarize_runs(reports):
    """Per-metric ``(mean, sample standard deviation)`` over non-empty reports."""
    reports = [report for report in reports if not report.empty]
    if not reports:
        return None
    summary = collections.OrderedDict()
    for name in reports[0].metrics:
        values = np.array([report.metrics[name] for report in reports])
        std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        summary[name] = (float(np.mean(values)), std)
    return summary


def sparsity_group_eval(model, split, groups, seed=0, ks=DEFAULT_TOP_K, n_negatives=DEFAULT_NEGATIVES,
                        workers=1, report=None):
    if report is None:
        report = evaluate(model, split, seed, ks, n_negatives, workers)
    return [report.subset(group, label) for group, label in zip(groups, groups.labels())]


def _discounts(k):
    return [1.0 / math.log2(j + 1) for j in range(1, k + 1)]


def _expected_novelty(recs, train_user_counts, n_train_users, k, novelty):
    k = int(k)
    if k < 1:
        raise ValueError('k must be positive: {!r}'.format(k))
    if not recs:
        return 0.0
    discounts = _discounts(k)
    normalizer = sum(discounts)
    floor = 1.0 / (n_train_users + 1)
    total = 0.0
    for rec in recs:
        gain = 0.0
        for discount, item in zip(discounts, rec[:k]):
            popularity = max(floor, train_user_counts.get(item, 0) / n_train_users)
            gain += discount * novelty(popularity)
        total += gain / normalizer
    return total / len(recs)


def epc_at_k(recs, train_user_counts, n_train_users, k=10):
    return _expected_novelty(recs, train_user_counts, n_train_users, k, lambda p: 1.0 - p)


def efd_at_k(recs, train_user_counts, n_train_users, k=10):
    return _expected_novelty(recs, train_user_counts, n_train_users, k, lambda p: -math.log2(p))


PopularityRow = collections.namedtuple('PopularityRow', 'item train_count rec_count')


class PopularityReport(object):

    def __init__(self, rows, k, n_users, efd, epc, errors=()):
        self.rows = list(rows)
        self.k = k
        self.n_users = n_users
        self.efd = efd
        self.epc = epc
        self.errors = collections.OrderedDict(sorted(dict(errors).items()))

    @property
    def total_recommendations(self):
        return sum(row.rec_count for row in self.rows)

    def head_share(self, fraction=0.1):
        """Share of recommendation mass on the most trained ``fraction`` of items."""
        count = max(1, int(round(len(self.rows) * fraction)))
        total = self.total_recommendations
        return sum(row.rec_count for row in self.rows[:count]) / total if total else 0.0

    def as_record(self, **extra):
        record = collections.OrderedDict([
            ('k', self.k),
            ('n_users', self.n_users),
            ('n_errors', len(self.errors)),
            ('efd@{}'.format(self.k), self.efd),
            ('epc@{}'.format(self.k), self.epc),
        ])
        record.update(extra)
        return record


def popularity_histogram(model, split, k=10, seed=0, n_negatives=DEFAULT_NEGATIVES, workers=1):
    outcomes = _evaluate_users(model, split, seed, n_negatives, workers, top_k=k)
    recs = [outcome.top for outcome in outcomes if outcome.error is None]
    errors = {outcome.user: outcome.error for outcome in outcomes if outcome.error is not None}

    rec_counts = collections.Counter(item for rec in recs for item in rec)
    train_counts = item_frequency(split)
    rows = [PopularityRow(item, count, rec_counts.get(item, 0)) for item, count in train_counts.items()]
    rows.sort(key=lambda row: (-row.train_count, row.item))

    user_counts = item_user_counts(split)
    n_train_users = len(split.train)
    efd = efd_at_k(recs, user_counts, n_train_users, k)
    epc = epc_at_k(recs, user_counts, n_train_users, k)
    return PopularityReport(rows, k, len(recs), efd, epc, errors)


class PopularityScorer(object):
    """Scores candidates by their train interaction count."""

    def __init__(self, split):
        self.counts = item_frequency(split)

    def score(self, user, inputs, candidates):
        return np.array([self.counts.get(item, 0) for item in candidates], dtype=np.float64)


class RandomScorer(object):

    def __init__(self, seed=0):
        self.seed = seed

    def score(self, user, inputs, candidates):
        return np.random.default_rng(stable_seed(self.seed, 'random', user)).random(len(candidates))


def write_reports(path, records):
    return records_dump(path, records)


def write_popularity_table(path, report):
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, 'wt', encoding='utf-8', newline='') as stream:
        writer = csv.writer(stream, lineterminator='\n')
        writer.writerow(PopularityRow._fields)
        writer.writerows(report.rows)
    return len(report.rows)
