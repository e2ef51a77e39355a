"""Synthetic interaction datasets with known structure.

``planted_categories`` gives every user a home category that most of their
history comes from; ``zipf_catalog`` draws histories from a power-law item
popularity (exponent 0 makes it uniform).
"""

import numpy as np

from pyslim.dataset import Interaction, InteractionDataset, Item, build_sequences, leave_one_out_split


CATEGORY_NAMES = ('Books', 'Food', 'Games', 'Music', 'Toys', 'Garden', 'Sports', 'Beauty')


def category_name(index):
    if index < len(CATEGORY_NAMES):
        return CATEGORY_NAMES[index]
    return 'Category{}'.format(index)


def planted_categories(n_users=200, n_categories=5, items_per_category=50, min_length=8, max_length=12,
                       in_category=0.9, cold_fraction=0.0, ordered_targets=False, seed=0):
    """Cold items only ever appear as a user's last interaction, so their train
    count stays at zero. With ``ordered_targets`` the last interaction is the
    first home category title, in sorted order, missing from the rest of the
    history; it replaces any cold draw."""
    rng = np.random.default_rng(seed)
    items = []
    warm = []
    cold = []
    by_title = []
    for category_index in range(n_categories):
        category = category_name(category_index)
        n_cold = int(round(items_per_category * cold_fraction))
        warm.append([])
        cold.append([])
        for k in range(items_per_category):
            item = Item('{}-{:03d}'.format(category.lower(), k), '{} product {}'.format(category, k), category)
            items.append(item)
            (cold if k >= items_per_category - n_cold else warm)[category_index].append(item.id)
        titles = {item.id: item.title for item in items}
        by_title.append(sorted(warm[category_index] + cold[category_index], key=titles.get))

    interactions = []
    for user_index in range(n_users):
        user = 'u{:04d}'.format(user_index)
        home = user_index % n_categories
        length = int(rng.integers(min_length, max_length + 1))
        history = []
        for _ in range(length):
            category_index = home if rng.random() < in_category else int(rng.integers(n_categories))
            pool = [item for item in warm[category_index] if item not in history]
            if not pool:
                pool = [item for group in warm for item in group if item not in history]
            history.append(pool[int(rng.integers(len(pool)))])
        if cold[home] and rng.random() < cold_fraction:
            history[-1] = cold[home][int(rng.integers(len(cold[home])))]
        if ordered_targets:
            earlier = set(history[:-1])
            history[-1] = next(item for item in by_title[home] if item not in earlier)
        interactions.extend(Interaction(user, item, timestamp) for timestamp, item in enumerate(history))

    return InteractionDataset(items, interactions)


def zipf_catalog(n_users=500, n_items=1000, min_length=5, max_length=10, exponent=1.0, seed=0):
    rng = np.random.default_rng(seed)
    items = [Item('item-{:04d}'.format(k), 'item {}'.format(k)) for k in range(n_items)]
    weights = 1.0 / np.arange(1, n_items + 1) ** exponent
    weights /= weights.sum()

    interactions = []
    for user_index in range(n_users):
        user = 'u{:04d}'.format(user_index)
        length = int(rng.integers(min_length, max_length + 1))
        chosen = rng.choice(n_items, size=length, replace=False, p=weights)
        interactions.extend(Interaction(user, items[index].id, timestamp) for timestamp, index in enumerate(chosen))

    return InteractionDataset(items, interactions)


def split_of(ds):
    return leave_one_out_split(build_sequences(ds), ds.items)
